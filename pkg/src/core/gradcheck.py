"""
Finite-difference verification of the hand-written backward passes

Checks the plain (analytic and sampled) ELBO gradients and the robust-bound
gradient of a tiny model with frozen noise against central differences.
"""

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from src.core.numerics import STREAM_GRADCHECK, coordinate_relative_errors, finite_diff_grad, make_rng
from src.core.objective import EpsilonState, elbo_batch_backward, robust_batch_backward
from src.core.vae_model import VaeParams, flatten_grads
from src.utils.errors import DomainError
from src.utils.logger import logger


DEFAULT_DIMS = (8, 5, 2)
DEFAULT_BATCH = 3
DEFAULT_STEP = 1e-5
TOLERANCE = 1e-6
MAX_PARAMETERS = 10_000

OBJECTIVE_NAMES = ('elbo-analytic', 'elbo-sampled', 'robust')


@dataclass
class GradCheckRow:
    """Outcome for one objective at one step size"""
    objective: str
    h: float
    error: float
    worst_coordinate: str
    worst_abs_diff: float


@dataclass
class GradCheckReport:
    rows: List[GradCheckRow] = field(default_factory=list)
    tolerance: float = TOLERANCE

    def at_step(self, h: float) -> List[GradCheckRow]:
        return [r for r in self.rows if r.h == h]

    def worst(self, h: float) -> GradCheckRow:
        return max(self.at_step(h), key=lambda r: r.error)

    def passed(self, h: float) -> bool:
        return self.worst(h).error <= self.tolerance


@dataclass
class GradCheckProblem:
    """A tiny model, a binary batch and frozen noise"""
    params: VaeParams
    x: np.ndarray
    noise: np.ndarray
    eps_state: EpsilonState


def make_problem(seed: int, dims: Tuple[int, int, int] = DEFAULT_DIMS, batch: int = DEFAULT_BATCH) -> GradCheckProblem:
    """
    Build a reproducible gradient-check problem

    Biases and slopes are perturbed away from their initial values so every
    parameter has a non-trivial gradient. log eps sits at the median log-ratio
    so gates span both sides of 1/2.
    """
    input_dim, hidden, latent = dims
    params = VaeParams.initialize(make_rng(seed, STREAM_GRADCHECK, 0), input_dim, hidden, latent)
    if params.size() > MAX_PARAMETERS:
        raise DomainError(f"gradcheck model has {params.size()} parameters, limit is {MAX_PARAMETERS}")
    rng = make_rng(seed, STREAM_GRADCHECK, 1)
    for name in params.names():
        if name.endswith('.b') or name.endswith('.slope'):
            params.tensors[name] = params.tensors[name] + 0.1 * rng.standard_normal(params.tensors[name].shape)
    x = (rng.random((batch, input_dim)) < 0.5).astype(np.float64)
    noise = rng.standard_normal((batch, latent))
    sampled = elbo_batch_backward(params, x, noise=noise, estimator='sampled')
    eps_state = EpsilonState(log_alpha=0.0, log_eps=float(np.median(sampled.log_ratio)))
    return GradCheckProblem(params, x, noise, eps_state)


def _objective(problem: GradCheckProblem, name: str, params: VaeParams):
    if name == 'robust':
        return robust_batch_backward(params, problem.x, problem.eps_state, noise=problem.noise)
    return elbo_batch_backward(params, problem.x, noise=problem.noise, estimator=name.split('-')[1])


def _coordinate_names(params: VaeParams) -> List[str]:
    labels = []
    for name, shape in params.layout():
        labels.extend(f"{name}[{i}]" for i in range(int(np.prod(shape))))
    return labels


def analytic_gradient(problem: GradCheckProblem, name: str) -> np.ndarray:
    return flatten_grads(_objective(problem, name, problem.params).grads, problem.params)


def numeric_gradient(problem: GradCheckProblem, name: str, h: float) -> np.ndarray:
    params = problem.params
    return finite_diff_grad(lambda v: _objective(problem, name, params.with_vector(v)).value,
                            params.flatten(), h)


def compare_gradients(problem: GradCheckProblem, name: str, h: float,
                      analytic: np.ndarray, numeric: np.ndarray) -> GradCheckRow:
    """Score an analytic gradient by its worst per-coordinate relative error"""
    errors = coordinate_relative_errors(analytic, numeric)
    worst = int(np.argmax(errors))
    return GradCheckRow(
        objective=name,
        h=h,
        error=float(errors[worst]),
        worst_coordinate=_coordinate_names(problem.params)[worst],
        worst_abs_diff=float(abs(analytic[worst] - numeric[worst])),
    )


def check_objective(problem: GradCheckProblem, name: str, h: float, corrupt: bool = False) -> GradCheckRow:
    """Compare one objective's analytic gradient with central differences"""
    analytic = analytic_gradient(problem, name)
    if corrupt:
        # Negative control: flip the sign of the output-bias gradient block
        offset = problem.params.size() - problem.params.input_dim
        analytic[offset:] = -analytic[offset:]
    return compare_gradients(problem, name, h, analytic, numeric_gradient(problem, name, h))


def run_gradient_check(
    seed: int = 0,
    dims: Tuple[int, int, int] = DEFAULT_DIMS,
    steps: Sequence[float] = (DEFAULT_STEP,),
    corrupt: bool = False,
    tolerance: float = TOLERANCE
) -> GradCheckReport:
    """
    Check every objective at every step size

    Args:
        seed: Seed of the problem
        dims: (input, hidden, latent)
        steps: Finite-difference step sizes
        corrupt: Deliberately break the analytic gradient
        tolerance: Pass threshold for the max per-coordinate relative error

    Returns:
        GradCheckReport
    """
    problem = make_problem(seed, dims)
    report = GradCheckReport(tolerance=tolerance)
    for h in steps:
        for name in OBJECTIVE_NAMES:
            row = check_objective(problem, name, h, corrupt)
            report.rows.append(row)
            logger.debug(f"gradcheck {name} h={h:g}: error={row.error:.3e} worst={row.worst_coordinate}")
    return report
