"""
Two-phase training of robust variational autoencoders

Epoch 1 maximizes the plain ELBO and initializes log eps from its mean.
Later epochs maximize the robust bound, pulling log eps toward
log alpha + mean ELBO after every batch and again after every epoch.
"""

import csv
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from src.core.evaluation import DEFAULT_EVAL_SEED, DEFAULT_K, EvalConfig, EvalResult, evaluate
from src.core.numerics import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPS_HAT,
    STREAM_INIT,
    STREAM_MIX,
    STREAM_TRAIN,
    AdamState,
    adam_step,
    make_rng,
)
from src.core.objective import (
    DEFAULT_GAMMA,
    DEFAULT_LOG_ALPHA,
    BatchObjective,
    EpsilonState,
    elbo_batch_backward,
    epsilon_target,
    robust_batch_backward,
    smooth_update,
)
from src.core.vae_model import HIDDEN_UNITS, LATENT_UNITS, VaeParams, save_checkpoint
from src.data.dataset import (
    ImageDataset,
    NoiseMixSpec,
    Provenance,
    binarize,
    binarize_dataset,
    minibatches,
    mix,
)
from src.utils.errors import ConfigurationError, TrainingDivergenceError
from src.utils.logger import logger


OBJECTIVES = ('elbo', 'robust')
ELBO_ESTIMATORS = ('analytic', 'sampled')
EPS_INIT_MODES = ('literal', 'scaled')
EPOCH_UPDATE_MODES = ('smoothed', 'hard', 'none')

METRICS_HEADER = ['epoch', 'mean_elbo', 'mean_robust', 'mean_gate', 'log_eps', 'test_ll', 'wall_time']
METRICS_FILE = 'metrics.csv'
CHECKPOINT_FILE = 'checkpoint.rvae'


@dataclass
class TrainConfig:
    """Training hyperparameters; defaults are the full-scale MNIST settings"""
    objective: str = 'robust'
    log_alpha: float = DEFAULT_LOG_ALPHA
    epochs: int = 1000
    batch_size: int = 200
    lr: float = 1e-3
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps_hat: float = ADAM_EPS_HAT
    gamma: float = DEFAULT_GAMMA
    seed: int = 0
    hidden: int = HIDDEN_UNITS
    latent: int = LATENT_UNITS
    eval_interval: int = 50
    eval_k: int = DEFAULT_K
    eval_seed: int = DEFAULT_EVAL_SEED
    # Reparametrization samples per example and step
    samples: int = 1
    elbo_estimator: str = 'analytic'
    eps_init: str = 'literal'
    epoch_update: str = 'smoothed'
    epoch_update_alpha: bool = True
    train_subset: Optional[int] = None
    test_subset: Optional[int] = None
    record_wall_time: bool = False

    def validate(self) -> 'TrainConfig':
        """Raise ConfigurationError on the first invalid field"""
        checks = [
            (self.objective in OBJECTIVES, f"objective must be one of {OBJECTIVES}"),
            (self.elbo_estimator in ELBO_ESTIMATORS, f"elbo_estimator must be one of {ELBO_ESTIMATORS}"),
            (self.eps_init in EPS_INIT_MODES, f"eps_init must be one of {EPS_INIT_MODES}"),
            (self.epoch_update in EPOCH_UPDATE_MODES, f"epoch_update must be one of {EPOCH_UPDATE_MODES}"),
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.lr > 0, "lr must be > 0"),
            (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0, "beta1 and beta2 must lie in [0, 1)"),
            (self.eps_hat > 0, "eps_hat must be > 0"),
            (0.0 <= self.gamma <= 1.0, "gamma must lie in [0, 1]"),
            (math.isfinite(self.log_alpha), "log_alpha must be finite"),
            (self.seed >= 0, "seed must be non-negative"),
            (self.hidden >= 1 and self.latent >= 1, "hidden and latent must be >= 1"),
            (self.eval_interval >= 1, "eval_interval must be >= 1"),
            (self.eval_k >= 1, "eval_k must be >= 1"),
            (self.samples >= 1, "samples must be >= 1"),
            (self.train_subset is None or self.train_subset >= 1, "train_subset must be >= 1"),
            (self.test_subset is None or self.test_subset >= 1, "test_subset must be >= 1"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigurationError(message)
        return self

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any]) -> 'TrainConfig':
        """
        Build and validate a config from a flat mapping

        Args:
            mapping: Field names to values; values are coerced to the field types

        Returns:
            Validated TrainConfig
        """
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(mapping) - set(known))
        if unknown:
            raise ConfigurationError(f"unknown training keys: {', '.join(unknown)}")
        values = {}
        for name, value in mapping.items():
            values[name] = _coerce(name, known[name].type, value)
        return cls(**values).validate()

    @classmethod
    def from_config(cls, cfg, overrides: Optional[Mapping[str, Any]] = None) -> 'TrainConfig':
        """
        Build from a Config: the training section plus evaluation.k/seed

        Args:
            cfg: src.config.Config
            overrides: Flat field overrides (None values ignored)
        """
        values = cfg.section('training')
        evaluation = cfg.section('evaluation')
        if 'k' in evaluation:
            values.setdefault('eval_k', evaluation['k'])
        if 'seed' in evaluation:
            values.setdefault('eval_seed', evaluation['seed'])
        for key, value in (overrides or {}).items():
            if value is not None:
                values[key] = value
        return cls.from_mapping(values)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _coerce(name: str, annotation: Any, value: Any) -> Any:
    text = str(annotation)
    try:
        if value is None:
            if 'Optional' in text:
                return None
            raise ConfigurationError(f"{name} must not be empty")
        if 'bool' in text:
            if isinstance(value, str):
                if value.lower() not in ('true', 'false', '1', '0', 'yes', 'no'):
                    raise ConfigurationError(f"{name} must be a boolean, got '{value}'")
                return value.lower() in ('true', '1', 'yes')
            return bool(value)
        if 'int' in text:
            if isinstance(value, float) and not value.is_integer():
                raise ConfigurationError(f"{name} must be an integer, got {value}")
            return int(value)
        if 'float' in text:
            return float(value)
        return str(value)
    except ConfigurationError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"{name}: cannot use value {value!r} ({e})")


@dataclass
class BatchStats:
    """Telemetry of one gradient step"""
    batch_index: int
    size: int
    mean_elbo: float
    mean_robust: float
    mean_gate: float
    log_eps: Optional[float] = None


@dataclass
class EpochStats:
    """
    Example-weighted aggregates of an epoch's BatchStats

    mean_gate_original / mean_gate_noise split the gate by provenance (NaN when
    the class is absent). For plain-ELBO epochs the robust term is the log-ratio
    and the gate is 1, the eps -> 0 limits.
    """
    epoch: int
    objective: str
    mean_elbo: float
    mean_robust: float
    mean_gate: float
    log_eps_end: Optional[float]
    wall_time: float
    mean_gate_original: float = float('nan')
    mean_gate_noise: float = float('nan')
    test_ll: Optional[float] = None
    batches: List[BatchStats] = field(default_factory=list, repr=False)


@dataclass
class TrainResult:
    params: VaeParams
    history: List[EpochStats]
    metrics_path: Optional[str]
    checkpoint_path: Optional[str]


def init_epsilon(
    mean_elbo_epoch1: float,
    log_alpha: float = DEFAULT_LOG_ALPHA,
    gamma: float = DEFAULT_GAMMA,
    scaled: bool = False
) -> EpsilonState:
    """
    eps schedule after the warm-up epoch

    Args:
        mean_elbo_epoch1: Mean per-object ELBO of the warm-up epoch
        log_alpha: Fixed log alpha used by every later target
        gamma: Smoothing coefficient
        scaled: Start from log alpha + mean ELBO instead of the mean ELBO itself

    Returns:
        Initialized EpsilonState
    """
    if not math.isfinite(mean_elbo_epoch1):
        raise ConfigurationError(f"cannot initialize eps from non-finite ELBO {mean_elbo_epoch1}")
    start = log_alpha + mean_elbo_epoch1 if scaled else mean_elbo_epoch1
    return EpsilonState(log_alpha=log_alpha, log_eps=start, gamma=gamma)


def batch_eps_update(eps_state: EpsilonState, batch_mean_elbo: float) -> EpsilonState:
    """Per-step rule: smooth toward log alpha + the batch's mean ELBO"""
    return smooth_update(eps_state, epsilon_target(eps_state, batch_mean_elbo))


def epoch_eps_update(
    eps_state: EpsilonState,
    epoch_mean_elbo: float,
    mode: str = 'smoothed',
    with_alpha: bool = True
) -> EpsilonState:
    """Per-epoch rule: smoothed (default), hard assignment, or none"""
    target = epsilon_target(eps_state, epoch_mean_elbo) if with_alpha else epoch_mean_elbo
    if mode == 'smoothed':
        return smooth_update(eps_state, target)
    if mode == 'hard':
        eps_state.log_eps = target
    elif mode != 'none':
        raise ConfigurationError(f"unknown epoch update mode '{mode}'")
    return eps_state


def replay_eps_schedule(
    eps_state: EpsilonState,
    epochs: Sequence[Sequence[Tuple[float, int]]],
    mode: str = 'smoothed',
    with_alpha: bool = True
) -> List[float]:
    """
    Re-run the eps schedule on recorded batch telemetry

    Args:
        eps_state: Initialized state, updated in place
        epochs: Per epoch, the (mean ELBO, batch size) of every batch in order

    Returns:
        log_eps after every batch and after every epoch update, in order
    """
    trace = []
    for batches in epochs:
        for mean_elbo, _ in batches:
            batch_eps_update(eps_state, mean_elbo)
            trace.append(eps_state.log_eps)
        epoch_mean = float(np.average([m for m, _ in batches], weights=[n for _, n in batches]))
        epoch_eps_update(eps_state, epoch_mean, mode, with_alpha)
        trace.append(eps_state.log_eps)
    return trace


class Trainer:
    """
    Owns parameters, optimizer state and the eps schedule of one run

    Single-threaded: batch order and every random draw derive from
    (config.seed, epoch), so two runs with the same config are bitwise equal.
    """

    def __init__(
        self,
        config: TrainConfig,
        input_dim: int,
        params: Optional[VaeParams] = None
    ):
        """
        Initialize trainer

        Args:
            config: Training configuration
            input_dim: Pixels per example
            params: Starting parameters (fresh He-normal ones if omitted)
        """
        self.config = config
        self.params = params or VaeParams.initialize(
            make_rng(config.seed, STREAM_INIT), input_dim, config.hidden, config.latent
        )
        self.optimizer = AdamState(beta1=config.beta1, beta2=config.beta2, eps_hat=config.eps_hat)
        self.eps_state: Optional[EpsilonState] = None
        self.history: List[EpochStats] = []
        self.last_eval: Optional[EvalResult] = None
        self._last_good = self.params.copy()

    def _step(self, result: BatchObjective):
        # Maximization: hand the optimizer the negated ascent direction
        descent = {name: -g for name, g in result.grads.items()}
        adam_step(self.params.tensors, descent, self.optimizer, self.config.lr)

    def _run_epoch(self, data: ImageDataset, epoch: int, robust: bool) -> EpochStats:
        cfg = self.config
        rng = make_rng(cfg.seed, STREAM_TRAIN, epoch)
        started = time.perf_counter()
        batches: List[BatchStats] = []
        gates = []
        flags = []

        for index, rows in enumerate(minibatches(data, cfg.batch_size, cfg.seed, epoch)):
            x = binarize(data.pixels[rows], rng)
            provenance = data.provenance[rows]
            if cfg.samples > 1:
                x = np.repeat(x, cfg.samples, axis=0)
                provenance = np.repeat(provenance, cfg.samples)
            if robust:
                result = robust_batch_backward(self.params, x, self.eps_state, rng=rng)
            else:
                result = elbo_batch_backward(self.params, x, rng=rng, estimator=cfg.elbo_estimator)
            self._step(result)

            stats = BatchStats(
                batch_index=index,
                size=len(rows),
                mean_elbo=result.mean_elbo,
                mean_robust=result.mean_robust,
                mean_gate=result.mean_gate,
            )
            if robust:
                batch_eps_update(self.eps_state, stats.mean_elbo)
                stats.log_eps = self.eps_state.log_eps
            batches.append(stats)
            gates.append(result.gate)
            flags.append(provenance)
            logger.debug(
                f"epoch {epoch} batch {index}: elbo={stats.mean_elbo:.4f} "
                f"robust={stats.mean_robust:.4f} gate={stats.mean_gate:.4f}"
            )

        sizes = [b.size for b in batches]
        gate_values = np.concatenate(gates)
        flag_values = np.concatenate(flags)
        return EpochStats(
            epoch=epoch,
            objective='robust' if robust else 'elbo',
            mean_elbo=float(np.average([b.mean_elbo for b in batches], weights=sizes)),
            mean_robust=float(np.average([b.mean_robust for b in batches], weights=sizes)),
            mean_gate=float(np.average([b.mean_gate for b in batches], weights=sizes)),
            log_eps_end=self.eps_state.log_eps if self.eps_state is not None else None,
            wall_time=time.perf_counter() - started,
            mean_gate_original=_masked_mean(gate_values, flag_values == Provenance.ORIGINAL),
            mean_gate_noise=_masked_mean(gate_values, flag_values == Provenance.NOISE),
            batches=batches,
        )

    def warmup_epoch(self, data: ImageDataset, epoch: int = 1) -> float:
        """
        One pass of plain-ELBO updates

        Returns:
            Example-weighted mean per-object ELBO of the pass
        """
        stats = self._run_epoch(data, epoch, robust=False)
        self.history.append(stats)
        return stats.mean_elbo

    def train_epoch_elbo(self, data: ImageDataset, epoch: int) -> EpochStats:
        """One plain-ELBO epoch"""
        stats = self._run_epoch(data, epoch, robust=False)
        self.history.append(stats)
        return stats

    def train_epoch_robust(self, data: ImageDataset, epoch: int) -> EpochStats:
        """
        One robust epoch: a step and a per-batch eps update per batch,
        then the per-epoch eps update with the epoch's mean ELBO
        """
        if self.eps_state is None or not self.eps_state.initialized:
            raise ConfigurationError("robust epoch requested before the eps schedule was initialized")
        stats = self._run_epoch(data, epoch, robust=True)
        epoch_eps_update(self.eps_state, stats.mean_elbo,
                         self.config.epoch_update, self.config.epoch_update_alpha)
        stats.log_eps_end = self.eps_state.log_eps
        self.history.append(stats)
        return stats

    def train(
        self,
        train_data: ImageDataset,
        test_data: Optional[ImageDataset] = None,
        run_dir: Optional[str] = None
    ) -> TrainResult:
        """
        Full procedure: warm-up epoch, eps initialization, remaining epochs

        Args:
            train_data: Training images (intensities; binarized per batch), already
                subset and mixed by prepare_datasets
            test_data: Clean test images (binarized once with the evaluation seed)
            run_dir: Directory for metrics.csv and checkpoint.rvae (nothing written if None)

        Returns:
            TrainResult
        """
        cfg = self.config
        test_binary = binarize_dataset(test_data, cfg.eval_seed) if test_data is not None else None

        metrics_path = checkpoint_path = None
        if run_dir is not None:
            os.makedirs(run_dir, exist_ok=True)
            metrics_path = os.path.join(run_dir, METRICS_FILE)
            checkpoint_path = os.path.join(run_dir, CHECKPOINT_FILE)
            with open(metrics_path, 'w', newline='') as f:
                csv.writer(f, lineterminator='\n').writerow(METRICS_HEADER)

        logger.info(
            f"Training {cfg.objective} VAE on {train_data.count} images "
            f"({train_data.count_of(Provenance.NOISE)} noise) for {cfg.epochs} epochs"
        )
        for epoch in range(1, cfg.epochs + 1):
            try:
                if epoch == 1:
                    mean_elbo = self.warmup_epoch(train_data, epoch)
                    if cfg.objective == 'robust':
                        self.eps_state = init_epsilon(mean_elbo, cfg.log_alpha, cfg.gamma,
                                                      scaled=cfg.eps_init == 'scaled')
                        self.history[-1].log_eps_end = self.eps_state.log_eps
                    stats = self.history[-1]
                elif cfg.objective == 'robust':
                    stats = self.train_epoch_robust(train_data, epoch)
                else:
                    stats = self.train_epoch_elbo(train_data, epoch)
                if not self.params.is_finite():
                    raise TrainingDivergenceError(f"non-finite parameters after epoch {epoch}")
            except TrainingDivergenceError as e:
                saved = None
                if checkpoint_path is not None:
                    save_checkpoint(self._last_good, checkpoint_path)
                    saved = checkpoint_path
                logger.error(f"Training diverged in epoch {epoch}: {e}")
                raise TrainingDivergenceError(f"epoch {epoch}: {e}", saved) from e
            self._last_good = self.params.copy()

            last = epoch == cfg.epochs
            if test_binary is not None and (epoch % cfg.eval_interval == 0 or last):
                self.last_eval = evaluate(self.params, test_binary, EvalConfig(K=cfg.eval_k, seed=cfg.eval_seed),
                                         checkpoint=checkpoint_path or '')
                stats.test_ll = self.last_eval.mean_ll
            if checkpoint_path is not None and (epoch % cfg.eval_interval == 0 or last):
                save_checkpoint(self.params, checkpoint_path)
            if metrics_path is not None:
                self._append_metrics(metrics_path, stats)

            log_eps = f"{stats.log_eps_end:.4f}" if stats.log_eps_end is not None else '-'
            test_ll = f" test_ll={stats.test_ll:.4f}" if stats.test_ll is not None else ''
            logger.info(
                f"Epoch {epoch}/{cfg.epochs} [{stats.objective}] elbo={stats.mean_elbo:.4f} "
                f"robust={stats.mean_robust:.4f} gate={stats.mean_gate:.4f} "
                f"log_eps={log_eps}{test_ll} ({stats.wall_time:.2f}s)"
            )

        return TrainResult(self.params, self.history, metrics_path, checkpoint_path)

    def _append_metrics(self, path: str, stats: EpochStats):
        row = [
            stats.epoch,
            _fmt(stats.mean_elbo),
            _fmt(stats.mean_robust),
            _fmt(stats.mean_gate),
            _fmt(stats.log_eps_end),
            _fmt(stats.test_ll),
            _fmt(stats.wall_time) if self.config.record_wall_time else '',
        ]
        with open(path, 'a', newline='') as f:
            csv.writer(f, lineterminator='\n').writerow(row)


def prepare_datasets(
    config: TrainConfig,
    train_data: ImageDataset,
    test_data: Optional[ImageDataset] = None,
    mix_spec: Optional[NoiseMixSpec] = None,
    mix_seed: Optional[int] = None
) -> Tuple[ImageDataset, Optional[ImageDataset]]:
    """
    Apply the configured subsets, then mix noise into the training subset

    Args:
        config: Training configuration (train_subset, test_subset, seed)
        train_data: Clean training images
        test_data: Clean test images
        mix_spec: original:noise proportion, or None for clean training
        mix_seed: Seed of the mixing shuffle (defaults to config.seed)

    Returns:
        (training set, test set)
    """
    train_data = train_data.head(config.train_subset)
    if mix_spec is not None:
        seed = config.seed if mix_seed is None else mix_seed
        train_data = mix(train_data, mix_spec, make_rng(seed, STREAM_MIX))
    if test_data is not None:
        test_data = test_data.head(config.test_subset)
    return train_data, test_data


def train(
    config: TrainConfig,
    train_data: ImageDataset,
    test_data: Optional[ImageDataset] = None,
    run_dir: Optional[str] = None
) -> TrainResult:
    """Train a fresh model with config (see Trainer.train)"""
    return Trainer(config, train_data.dim).train(train_data, test_data, run_dir)


def _masked_mean(values: np.ndarray, mask: np.ndarray) -> float:
    return float(np.mean(values[mask])) if np.any(mask) else float('nan')


def _fmt(value: Optional[float]) -> str:
    return '' if value is None else repr(float(value))
