"""
Robust evidence lower bound
Sampled log-ratio, robust term log(eps + p(x, z) / q(z | x)), its gradient gate
and the dynamic eps schedule. All eps arithmetic is in log scale: eps itself
sits around exp(-100) and below, which underflows float64.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from src.core.numerics import Matrix, Rng, log_add_exp, stable_sigmoid
from src.core.vae_model import (
    ForwardPass,
    LatentBatch,
    PosteriorParams,
    VaeParams,
    bernoulli_loglik,
    decode,
    forward_pass,
    gaussian_logpdf,
    gaussian_logpdf_std,
    model_backward,
)
from src.utils.errors import DomainError, TrainingDivergenceError


DEFAULT_GAMMA = 0.99
DEFAULT_LOG_ALPHA = -50.0


@dataclass
class EpsilonState:
    """
    Dynamic regularizer eps = alpha * exp(mean ELBO), tracked as log values

    Attributes:
        log_alpha: Fixed after configuration
        log_eps: Current regularizer; None until initialized
        gamma: Smoothing coefficient of smooth_update
    """
    log_alpha: float = DEFAULT_LOG_ALPHA
    log_eps: Optional[float] = None
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise DomainError(f"gamma must lie in [0, 1], got {self.gamma}")

    @property
    def initialized(self) -> bool:
        return self.log_eps is not None

    def require(self) -> float:
        if self.log_eps is None:
            raise DomainError("eps schedule used before initialization")
        return self.log_eps


@dataclass
class ObjectiveSampleTerms:
    """Per-sample log-ratio, robust term and gate"""
    log_ratio: np.ndarray
    robust_term: np.ndarray
    gate: np.ndarray


def log_ratio(params: VaeParams, x_batch: Matrix, latent: LatentBatch, post: PosteriorParams) -> np.ndarray:
    """
    Single-sample ELBO value log p(x, z) - log q(z | x) per example

    Args:
        params: Model parameters
        x_batch: Binary images
        latent: Sample drawn from post
        post: Posterior the sample came from

    Returns:
        Column of B log-ratios
    """
    logits = decode(params, latent.z)
    return (bernoulli_loglik(logits, x_batch)
            + gaussian_logpdf_std(latent.z)
            - gaussian_logpdf(post, latent.z))


def robust_term(log_ratio_values: np.ndarray, eps_state: EpsilonState) -> np.ndarray:
    """log(eps + ratio) elementwise; its batch mean estimates L_eps / N"""
    return log_add_exp(eps_state.require(), np.asarray(log_ratio_values, dtype=np.float64))


def gate(log_ratio_values: np.ndarray, eps_state: EpsilonState) -> np.ndarray:
    """
    ratio / (eps + ratio) = sigmoid(log ratio - log eps)

    Exactly the derivative of robust_term with respect to the log-ratio; below
    1/2 for samples the model explains worse than eps, in [1/2, 1) otherwise.
    """
    return stable_sigmoid(np.asarray(log_ratio_values, dtype=np.float64) - eps_state.require())


def sample_terms(log_ratio_values: np.ndarray, eps_state: EpsilonState) -> ObjectiveSampleTerms:
    return ObjectiveSampleTerms(
        log_ratio=log_ratio_values,
        robust_term=robust_term(log_ratio_values, eps_state),
        gate=gate(log_ratio_values, eps_state),
    )


def epsilon_target(eps_state: EpsilonState, mean_elbo_per_object: float) -> float:
    """log(alpha * exp(mean ELBO)) = log alpha + mean ELBO"""
    if not math.isfinite(mean_elbo_per_object):
        raise TrainingDivergenceError(f"non-finite mean ELBO {mean_elbo_per_object}")
    return eps_state.log_alpha + mean_elbo_per_object


def smooth_update(eps_state: EpsilonState, target: float) -> EpsilonState:
    """log_eps <- gamma * log_eps + (1 - gamma) * target, in place"""
    current = eps_state.require()
    eps_state.log_eps = eps_state.gamma * current + (1.0 - eps_state.gamma) * target
    return eps_state


@dataclass
class BatchObjective:
    """
    Value and gradient of a batch objective plus telemetry

    Attributes:
        value: Mean objective over the batch (robust term or ELBO)
        grads: Gradient of value with respect to every parameter (ascent direction)
        log_ratio: Sampled single-sample ELBO per example
        elbo: Analytic-KL ELBO per example, the eps schedule's input
        robust: Robust term per example (equals log_ratio for plain objectives)
        gate: Gate per example (1 for plain objectives)
    """
    value: float
    grads: Dict[str, np.ndarray]
    log_ratio: np.ndarray
    elbo: np.ndarray
    robust: np.ndarray
    gate: np.ndarray
    forward: Optional[ForwardPass] = field(default=None, repr=False)

    @property
    def mean_elbo(self) -> float:
        return float(np.mean(self.elbo))

    @property
    def mean_robust(self) -> float:
        return float(np.mean(self.robust))

    @property
    def mean_gate(self) -> float:
        return float(np.mean(self.gate))


def _check_finite(value: float, what: str):
    if not math.isfinite(value):
        raise TrainingDivergenceError(f"non-finite {what} ({value})")


def robust_batch_backward(
    params: VaeParams,
    x_batch: Matrix,
    eps_state: EpsilonState,
    rng: Optional[Rng] = None,
    noise: Optional[Matrix] = None
) -> BatchObjective:
    """
    Mean robust term of a batch and its parameter gradient

    The gradient is the batch mean of gate[i] times the gradient of
    log_ratio[i]; log_eps is a constant of the backward pass.

    Args:
        params: Model parameters
        x_batch: Binary images, B x input_dim
        eps_state: Initialized eps schedule
        rng: Source of reparametrization noise
        noise: Frozen noise replacing rng draws

    Returns:
        BatchObjective whose value is the mean robust term
    """
    if x_batch.shape[0] == 0:
        raise DomainError("empty batch")
    fp = forward_pass(params, x_batch, rng=rng, noise=noise)
    terms = sample_terms(fp.log_ratio, eps_state)
    value = float(np.mean(terms.robust_term))
    _check_finite(value, 'robust objective')

    weight = terms.gate / x_batch.shape[0]
    zero = np.zeros_like(weight)
    grads = model_backward(params, fp, w_loglik=weight, w_prior=weight, w_q=weight, w_kl=zero)
    return BatchObjective(
        value=value,
        grads=grads,
        log_ratio=terms.log_ratio,
        elbo=fp.elbo_analytic,
        robust=terms.robust_term,
        gate=terms.gate,
        forward=fp,
    )


def elbo_batch_backward(
    params: VaeParams,
    x_batch: Matrix,
    rng: Optional[Rng] = None,
    noise: Optional[Matrix] = None,
    estimator: str = 'analytic'
) -> BatchObjective:
    """
    Mean plain ELBO of a batch and its parameter gradient

    Args:
        params: Model parameters
        x_batch: Binary images
        rng: Source of reparametrization noise
        noise: Frozen noise replacing rng draws
        estimator: 'analytic' (reconstruction minus closed-form KL) or
            'sampled' (mean log-ratio, the eps -> 0 limit of the robust term)

    Returns:
        BatchObjective whose value is the mean ELBO estimate
    """
    if x_batch.shape[0] == 0:
        raise DomainError("empty batch")
    fp = forward_pass(params, x_batch, rng=rng, noise=noise)
    batch = x_batch.shape[0]
    ones = np.full(batch, 1.0 / batch)
    zero = np.zeros(batch)
    if estimator == 'analytic':
        value = float(np.mean(fp.elbo_analytic))
        grads = model_backward(params, fp, w_loglik=ones, w_prior=zero, w_q=zero, w_kl=ones)
    elif estimator == 'sampled':
        value = float(np.mean(fp.log_ratio))
        grads = model_backward(params, fp, w_loglik=ones, w_prior=ones, w_q=ones, w_kl=zero)
    else:
        raise DomainError(f"unknown ELBO estimator '{estimator}'")
    _check_finite(value, 'ELBO')
    log_ratio_values = fp.log_ratio
    return BatchObjective(
        value=value,
        grads=grads,
        log_ratio=log_ratio_values,
        elbo=fp.elbo_analytic,
        robust=log_ratio_values,
        gate=np.ones(batch),
        forward=fp,
    )
