"""
Dense numerics for the hand-written VAE
Affine and PReLU layers with their backward rules, stable special functions,
Adam, seeded random streams and a central-difference gradient oracle
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Tuple, Union

import numpy as np
from scipy.special import expit

from src.utils.errors import DimensionError, DomainError, TrainingDivergenceError


# Matrix: 2-D float64 ndarray (row-major); rows and columns are plain ndarray 1-D
Matrix = np.ndarray
Rng = np.random.Generator

DTYPE = np.float64
LOG_2PI = math.log(2.0 * math.pi)

# Adam defaults (beta1 = 0.99, not the usual 0.9)
ADAM_BETA1 = 0.99
ADAM_BETA2 = 0.999
ADAM_EPS_HAT = 1e-4

# Stream identifiers for derived random generators
STREAM_INIT = 1
STREAM_SHUFFLE = 2
STREAM_TRAIN = 3
STREAM_MIX = 4
STREAM_EVAL = 5
STREAM_TEST_BINARIZE = 6
STREAM_GRADCHECK = 7


def make_rng(seed: int, *stream: int) -> Rng:
    """
    Create a generator derived from a seed and an optional stream path

    The PCG64 bit generator and SeedSequence derivation are platform
    independent, so identical (seed, stream) pairs give identical draws.

    Args:
        seed: Non-negative 64-bit seed
        stream: Integers selecting an independent sub-stream, e.g. (STREAM_SHUFFLE, epoch)

    Returns:
        numpy Generator
    """
    if seed < 0:
        raise DomainError(f"seed must be non-negative, got {seed}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *stream])))


def _shape(a: np.ndarray) -> Tuple[int, ...]:
    return tuple(int(d) for d in np.shape(a))


def affine_forward(x: Matrix, W: Matrix, b: np.ndarray) -> Matrix:
    """out[i, j] = sum_k x[i, k] W[k, j] + b[j]"""
    if x.ndim != 2 or W.ndim != 2 or b.ndim != 1 or x.shape[1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise DimensionError('affine_forward', _shape(x), _shape(W), _shape(b))
    return x @ W + b


def affine_backward(x: Matrix, W: Matrix, grad_out: Matrix) -> Tuple[Matrix, Matrix, np.ndarray]:
    """
    Reverse-mode rule for affine_forward

    Returns:
        (grad_x, grad_W, grad_b)
    """
    if (x.ndim != 2 or W.ndim != 2 or grad_out.ndim != 2 or x.shape[1] != W.shape[0]
            or grad_out.shape != (x.shape[0], W.shape[1])):
        raise DimensionError('affine_backward', _shape(x), _shape(W), _shape(grad_out))
    return grad_out @ W.T, x.T @ grad_out, grad_out.sum(axis=0)


def prelu_forward(x: Matrix, slope: float) -> Matrix:
    """x where x > 0, slope * x elsewhere"""
    if not math.isfinite(slope):
        raise DomainError(f"PReLU slope must be finite, got {slope}")
    return np.where(x > 0, x, slope * x)


def prelu_backward(x: Matrix, slope: float, grad_out: Matrix) -> Tuple[Matrix, float]:
    """
    Reverse-mode rule for prelu_forward

    At x == 0 the positive branch (derivative 1) is used.

    Returns:
        (grad_x, grad_slope)
    """
    if x.shape != grad_out.shape:
        raise DimensionError('prelu_backward', _shape(x), _shape(grad_out))
    positive = x >= 0
    grad_x = np.where(positive, grad_out, slope * grad_out)
    grad_slope = float(np.sum(np.where(positive, 0.0, x * grad_out)))
    return grad_x, grad_slope


Real = Union[float, np.ndarray]


def log_add_exp(a: Real, b: Real) -> Real:
    """
    log(exp(a) + exp(b)) without overflow

    Evaluated as max(a, b) + log1p(exp(-|a - b|)); two -inf arguments give -inf.
    Works elementwise on arrays; scalars come back as float.
    """
    out = np.logaddexp(a, b)
    return float(out) if np.ndim(out) == 0 else out


def stable_sigmoid(t: Real) -> Real:
    """Logistic function that never exponentiates a large positive number"""
    out = expit(t)
    return float(out) if np.ndim(out) == 0 else out


def softplus(t: Real) -> Real:
    """log(1 + exp(t)), overflow safe"""
    return np.logaddexp(0.0, t)


@dataclass
class AdamState:
    """
    Adam moment estimates

    eps_hat is Adam's stability constant, named apart from the robustness eps.
    """
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps_hat: float = ADAM_EPS_HAT
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> 'AdamState':
        return AdamState(
            beta1=self.beta1,
            beta2=self.beta2,
            eps_hat=self.eps_hat,
            t=self.t,
            m={k: a.copy() for k, a in self.m.items()},
            v={k: a.copy() for k, a in self.v.items()},
        )


def adam_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    state: AdamState,
    lr: float
) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """
    One bias-corrected Adam descent step, in place

    Args:
        params: Parameter arrays, updated in place
        grads: Gradients of the loss to minimize, same keys and shapes
        state: Moment estimates, updated in place
        lr: Learning rate (0 leaves the parameters untouched)

    Returns:
        (params, state)
    """
    if lr < 0:
        raise DomainError(f"learning rate must be non-negative, got {lr}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient in '{name}'")
        if name not in params or params[name].shape != g.shape:
            raise DimensionError(f"adam_step[{name}]", _shape(params.get(name, np.empty(0))), _shape(g))

    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t

    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps_hat)

    return params, state


def gaussian_sample(rng: Rng, rows: int, cols: int) -> Matrix:
    """i.i.d. standard normal rows x cols matrix"""
    if rows <= 0 or cols <= 0:
        raise DomainError(f"gaussian_sample needs positive shape, got {rows}x{cols}")
    return rng.standard_normal((rows, cols))


def he_normal(rng: Rng, fan_in: int, fan_out: int) -> Matrix:
    """Weights ~ N(0, 2 / fan_in)"""
    return rng.standard_normal((fan_in, fan_out)) * math.sqrt(2.0 / fan_in)


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """
    Central-difference gradient of a scalar function

    Args:
        f: Deterministic scalar function of a flat vector
        x: Point of evaluation (not modified)
        h: Step size

    Returns:
        (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate i
    """
    if h <= 0:
        raise DomainError(f"finite difference step must be positive, got {h}")
    x = np.array(x, dtype=DTYPE).ravel()
    grad = np.zeros_like(x)
    shifted = x.copy()
    for i in range(x.size):
        shifted[i] = x[i] + h
        f_plus = f(shifted)
        shifted[i] = x[i] - h
        f_minus = f(shifted)
        shifted[i] = x[i]
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / (||a|| + ||n||), 0 when both vanish"""
    analytic = np.ravel(analytic)
    numeric = np.ravel(numeric)
    denom = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)


# Fraction of the largest gradient entry below which coordinates are compared absolutely
COORDINATE_FLOOR = 1e-3


def coordinate_relative_errors(analytic: np.ndarray, numeric: np.ndarray,
                               floor: float = COORDINATE_FLOOR) -> np.ndarray:
    """
    Per-coordinate |a_i - n_i| / max(|a_i|, |n_i|, floor * largest entry)

    Coordinates where every magnitude vanishes score 0.
    """
    analytic = np.ravel(analytic)
    numeric = np.ravel(numeric)
    if analytic.shape != numeric.shape:
        raise DimensionError('coordinate_relative_errors', analytic.shape, numeric.shape)
    magnitude = np.maximum(np.abs(analytic), np.abs(numeric))
    scale = floor * magnitude.max() if magnitude.size else 0.0
    denom = np.maximum(magnitude, scale)
    errors = np.zeros_like(magnitude)
    nonzero = denom > 0.0
    errors[nonzero] = np.abs(analytic - numeric)[nonzero] / denom[nonzero]
    return errors

