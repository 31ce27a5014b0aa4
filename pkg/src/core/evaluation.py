"""
Importance-sampled test log-likelihood and metrics export
"""

import csv
import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from src.core.numerics import STREAM_EVAL, Matrix, Rng, make_rng
from src.core.objective import log_ratio
from src.core.vae_model import VaeParams, encode, reparam_sample
from src.data.dataset import ImageDataset
from src.utils.errors import DomainError
from src.utils.logger import logger


DEFAULT_K = 200
DEFAULT_EVAL_SEED = 20170301

ESTIMATORS = ('iwae', 'elbo')


@dataclass
class EvalConfig:
    """
    Attributes:
        K: Importance samples per example
        seed: Base seed; example i draws from the stream (seed, i)
        subset: Evaluate only the first n examples
        estimator: 'iwae' (log of the mean weight) or 'elbo' (mean of the log weights)
    """
    K: int = DEFAULT_K
    seed: int = DEFAULT_EVAL_SEED
    subset: Optional[int] = None
    estimator: str = 'iwae'

    def __post_init__(self):
        if self.K < 1:
            raise DomainError(f"K must be at least 1, got {self.K}")
        if self.estimator not in ESTIMATORS:
            raise DomainError(f"unknown estimator '{self.estimator}', expected one of {ESTIMATORS}")


@dataclass
class EvalResult:
    """Per-example and mean log-likelihood estimates in nats"""
    per_example_ll: np.ndarray
    mean_ll: float
    K: int
    model_checkpoint: str = ''
    seed: int = DEFAULT_EVAL_SEED


def sample_log_ratios(params: VaeParams, x: Matrix, K: int, rng: Rng) -> np.ndarray:
    """K log importance weights log p(x, z_k) / q(z_k | x) for one example"""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    post = encode(params, x).repeat(K)
    latent = reparam_sample(post, rng)
    return log_ratio(params, np.repeat(x, K, axis=0), latent, post)


def log_mean_exp(values: np.ndarray) -> float:
    """log(mean(exp(values))) with the max subtracted first"""
    return float(logsumexp(values) - math.log(len(values)))


def iwae_ll(params: VaeParams, x: Matrix, K: int, rng: Rng) -> float:
    """
    K-sample importance-weighted estimate of log p(x)

    Args:
        params: Model parameters
        x: One binarized example (flat or 1 x dim)
        K: Number of posterior samples
        rng: Generator for the samples

    Returns:
        log of the mean importance weight, in nats
    """
    if K < 1:
        raise DomainError(f"K must be at least 1, got {K}")
    return log_mean_exp(sample_log_ratios(params, x, K, rng))


def evaluate(params: VaeParams, test: ImageDataset, cfg: EvalConfig, checkpoint: str = '') -> EvalResult:
    """
    Mean test log-likelihood over a binarized (sub)set

    Each example draws from its own stream derived from (cfg.seed, index), so
    the result does not depend on evaluation order.

    Args:
        params: Model parameters
        test: Binarized test set
        cfg: Evaluation settings
        checkpoint: Identifier recorded in the result

    Returns:
        EvalResult
    """
    data = test.head(cfg.subset)
    if data.count == 0:
        raise DomainError("cannot evaluate on an empty test set")
    per_example = np.empty(data.count)
    for i in range(data.count):
        rng = make_rng(cfg.seed, STREAM_EVAL, i)
        weights = sample_log_ratios(params, data.pixels[i], cfg.K, rng)
        per_example[i] = log_mean_exp(weights) if cfg.estimator == 'iwae' else float(np.mean(weights))
    result = EvalResult(
        per_example_ll=per_example,
        mean_ll=float(np.mean(per_example)),
        K=cfg.K,
        model_checkpoint=checkpoint,
        seed=cfg.seed,
    )
    logger.info(f"Test log-likelihood ({cfg.estimator}, K={cfg.K}, n={data.count}): {result.mean_ll:.4f} nats")
    return result


def export_metrics(result: EvalResult, path: str) -> str:
    """
    Write per-example estimates as CSV and a JSON summary beside it

    Args:
        result: Evaluation result
        path: CSV path; the summary goes to the same stem with .json

    Returns:
        JSON summary path
    """
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['example_index', 'log_likelihood'])
        for i, ll in enumerate(result.per_example_ll):
            writer.writerow([i, repr(float(ll))])
    summary_path = (path[:-4] if path.endswith('.csv') else path) + '.json'
    summary = {
        'mean_ll': result.mean_ll,
        'K': result.K,
        'n': int(len(result.per_example_ll)),
        'checkpoint': result.model_checkpoint,
        'seed': result.seed,
    }
    with open(summary_path, 'w') as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write('\n')
    logger.debug(f"Evaluation written to {path} and {summary_path}")
    return summary_path
