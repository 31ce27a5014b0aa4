"""
Error hierarchy shared by the library and the command-line entry point

Every error carries the process exit code the CLI maps it to:
0 ok, 1 I/O/format, 2 arguments, 3 divergence, 4 gradcheck failure,
5 partial sweep failure.
"""

from typing import Optional, Sequence, Tuple


ShapeTable = Sequence[Tuple[str, Tuple[int, ...]]]


class RvaeError(Exception):
    """Base class for all library errors"""
    exit_code = 1


class DimensionError(RvaeError, ValueError):
    """Operand shapes do not conform"""

    def __init__(self, operation: str, *shapes: Tuple[int, ...]):
        self.operation = operation
        self.shapes = shapes
        rendered = ' vs '.join('x'.join(str(d) for d in s) for s in shapes)
        super().__init__(f"{operation}: shape mismatch ({rendered})")


class DomainError(RvaeError, ValueError):
    """Argument outside the domain of an operation"""


class FormatError(RvaeError):
    """Malformed input file"""


class IdxLengthError(FormatError):
    """IDX file shorter than its header promises"""


class CheckpointError(FormatError):
    """Checkpoint file cannot be loaded into the requested architecture"""

    def __init__(
        self,
        message: str,
        expected: Optional[ShapeTable] = None,
        found: Optional[ShapeTable] = None
    ):
        self.expected = list(expected or [])
        self.found = list(found or [])
        if self.expected or self.found:
            message = (
                f"{message}\n  expected:\n{format_shape_table(self.expected)}"
                f"\n  found:\n{format_shape_table(self.found)}"
            )
        super().__init__(message)


class ConfigurationError(RvaeError, ValueError):
    """Invalid configuration or command-line arguments"""
    exit_code = 2


class TrainingDivergenceError(RvaeError, ArithmeticError):
    """Non-finite objective or gradient during training"""
    exit_code = 3

    def __init__(self, message: str, checkpoint_path: Optional[str] = None):
        self.checkpoint_path = checkpoint_path
        if checkpoint_path:
            message = f"{message} (last good checkpoint: {checkpoint_path})"
        super().__init__(message)


class GradientCheckError(RvaeError):
    """Analytic gradient disagrees with finite differences"""
    exit_code = 4

    def __init__(self, message: str, worst_coordinate: Optional[str] = None):
        self.worst_coordinate = worst_coordinate
        super().__init__(message)


class SweepFailedError(RvaeError):
    """At least one run of a sweep failed"""
    exit_code = 5


def format_shape_table(table: ShapeTable) -> str:
    """Render (name, shape) pairs one per line"""
    if not table:
        return '    (none)'
    return '\n'.join(
        f"    {name:<14} {'x'.join(str(d) for d in shape)}" for name, shape in table
    )
