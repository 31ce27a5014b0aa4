"""
Tests for the training procedure and the eps schedule
"""

import csv
import os
import sys
import tempfile
import unittest

import numpy as np
import pytest
from numpy.testing import assert_array_equal

# Add parent directory to path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

import src.core.trainer as trainer_module
from src.core.numerics import make_rng
from src.core.objective import EpsilonState
from src.core.trainer import (
    CHECKPOINT_FILE,
    METRICS_FILE,
    METRICS_HEADER,
    Trainer,
    TrainConfig,
    epoch_eps_update,
    init_epsilon,
    prepare_datasets,
    replay_eps_schedule,
    train,
)
from src.core.vae_model import load_checkpoint
from src.data.dataset import ImageDataset, NoiseMixSpec, Provenance
from src.utils.errors import ConfigurationError, TrainingDivergenceError


def _images(count=40, seed=0):
    """4x4 images with a bright row or column and a dim background"""
    rng = make_rng(seed, 99)
    pixels = np.full((count, 4, 4), 0.05)
    for i in range(count):
        k = rng.integers(0, 4)
        if i % 2:
            pixels[i, k, :] = 0.95
        else:
            pixels[i, :, k] = 0.95
    return ImageDataset.from_pixels(pixels.reshape(count, 16), image_shape=(4, 4))


def _tiny_config(**overrides):
    values = dict(epochs=3, batch_size=10, lr=1e-2, hidden=6, latent=2,
                  eval_interval=2, eval_k=4, log_alpha=-5.0)
    values.update(overrides)
    return TrainConfig(**values).validate()


def _read_metrics(run_dir):
    with open(os.path.join(run_dir, METRICS_FILE), newline='') as f:
        return list(csv.reader(f))


class TestEpsilonSchedule(unittest.TestCase):
    """Test cases for eps initialization and updates"""

    def test_init_literal_and_scaled(self):
        """Test literal starts at the mean ELBO and scaled adds log alpha"""
        self.assertEqual(init_epsilon(-120.0, log_alpha=-50.0).log_eps, -120.0)
        self.assertEqual(init_epsilon(-120.0, log_alpha=-50.0, scaled=True).log_eps, -170.0)
        self.assertEqual(init_epsilon(-120.0, log_alpha=-50.0).log_alpha, -50.0)

    def test_init_non_finite(self):
        """Test a non-finite warm-up ELBO cannot start the schedule"""
        with self.assertRaises(ConfigurationError):
            init_epsilon(float('nan'))

    def test_epoch_update_modes(self):
        """Test smoothed, hard and none updates"""
        def state():
            return EpsilonState(log_alpha=-50.0, log_eps=-100.0, gamma=0.5)

        self.assertEqual(epoch_eps_update(state(), -100.0, 'smoothed').log_eps, -125.0)
        self.assertEqual(epoch_eps_update(state(), -100.0, 'hard').log_eps, -150.0)
        self.assertEqual(epoch_eps_update(state(), -100.0, 'none').log_eps, -100.0)
        self.assertEqual(epoch_eps_update(state(), -80.0, 'smoothed', with_alpha=False).log_eps, -90.0)
        with self.assertRaises(ConfigurationError):
            epoch_eps_update(state(), -100.0, 'sometimes')

    def test_replay(self):
        """Test the per-batch and per-epoch updates interleave in order"""
        eps = EpsilonState(log_alpha=-50.0, log_eps=-100.0, gamma=0.5)
        trace = replay_eps_schedule(eps, [[(-100.0, 2), (-80.0, 2)]])
        self.assertEqual(trace, [-125.0, -127.5, -133.75])
        self.assertEqual(eps.log_eps, -133.75)

    def test_replay_one_batch_epoch(self):
        """Test the default gamma on a single-batch epoch"""
        eps = EpsilonState(log_alpha=-50.0, log_eps=-100.0, gamma=0.99)
        trace = replay_eps_schedule(eps, [[(-90.0, 200)]])
        self.assertAlmostEqual(trace[0], -100.4, places=10)
        self.assertAlmostEqual(trace[1], -100.796, places=10)


def test_prepare_datasets_subsets_then_mixes():
    """The training subset is taken before noise is mixed in"""
    cfg = _tiny_config(train_subset=30, test_subset=5)
    train_set, test_set = prepare_datasets(cfg, _images(40), _images(10, seed=1), NoiseMixSpec(2, 1))
    assert train_set.count == 45
    assert train_set.count_of(Provenance.NOISE) == 15
    assert test_set.count == 5
    clean, none = prepare_datasets(cfg, _images(40))
    assert clean.count == 30 and none is None


def test_training_run_writes_metrics_and_checkpoint():
    """A robust run writes one metrics row per epoch and a loadable checkpoint"""
    with tempfile.TemporaryDirectory() as tmp:
        result = train(_tiny_config(), _images(40), _images(8, seed=1), run_dir=tmp)
        rows = _read_metrics(tmp)
        assert rows[0] == METRICS_HEADER
        assert [r[0] for r in rows[1:]] == ['1', '2', '3']
        # Evaluation at epochs 2 and 3 only
        assert [r[5] != '' for r in rows[1:]] == [False, True, True]
        assert all(r[6] == '' for r in rows[1:])
        assert rows[1][4] != ''
        loaded = load_checkpoint(os.path.join(tmp, CHECKPOINT_FILE), expected=(16, 6, 2))
        assert_array_equal(loaded.flatten(), result.params.flatten())
        assert len(result.history) == 3
        assert result.history[0].objective == 'elbo'
        assert result.history[1].objective == 'robust'


def test_training_is_bitwise_reproducible():
    """Two runs of the same config produce identical metrics files"""
    with tempfile.TemporaryDirectory() as tmp:
        first = os.path.join(tmp, 'a')
        second = os.path.join(tmp, 'b')
        train(_tiny_config(), _images(40), _images(8, seed=1), run_dir=first)
        train(_tiny_config(), _images(40), _images(8, seed=1), run_dir=second)
        with open(os.path.join(first, METRICS_FILE), 'rb') as f:
            a = f.read()
        with open(os.path.join(second, METRICS_FILE), 'rb') as f:
            b = f.read()
        assert a == b


def test_gate_split_by_provenance():
    """Gate telemetry is split by provenance; the noise share is NaN on clean data"""
    cfg = _tiny_config()
    noisy, _ = prepare_datasets(cfg, _images(40), mix_spec=NoiseMixSpec(1, 1))
    result = train(cfg, noisy)
    last = result.history[-1]
    assert 0.0 < last.mean_gate_noise <= 1.0
    assert 0.0 < last.mean_gate_original <= 1.0
    clean = train(cfg, _images(40))
    assert np.isnan(clean.history[-1].mean_gate_noise)
    # Warm-up epochs report a unit gate
    assert clean.history[0].mean_gate == 1.0


def test_vanishing_alpha_matches_sampled_elbo_training():
    """Scaled eps init with log alpha = -1e6 follows the sampled-ELBO trajectory bit for bit"""
    common = dict(elbo_estimator='sampled', epochs=3)
    robust = train(_tiny_config(objective='robust', log_alpha=-1e6, eps_init='scaled', **common), _images(40))
    plain = train(_tiny_config(objective='elbo', **common), _images(40))
    assert_array_equal(robust.params.flatten(), plain.params.flatten())
    assert robust.history[-1].mean_gate == 1.0


def test_robust_epoch_requires_initialized_schedule():
    """A robust epoch before the warm-up is a configuration error"""
    trainer = Trainer(_tiny_config(), 16)
    with pytest.raises(ConfigurationError):
        trainer.train_epoch_robust(_images(20), 2)


def test_divergence_saves_last_good_checkpoint(monkeypatch):
    """A divergent epoch stops training and saves the previous epoch's parameters"""
    def diverge(*args, **kwargs):
        raise TrainingDivergenceError('non-finite robust objective (nan)')

    monkeypatch.setattr(trainer_module, 'robust_batch_backward', diverge)
    trainer = Trainer(_tiny_config(), 16)
    with tempfile.TemporaryDirectory() as tmp:
        with pytest.raises(TrainingDivergenceError) as info:
            trainer.train(_images(40), run_dir=tmp)
        assert info.value.exit_code == 3
        assert 'epoch 2' in str(info.value)
        assert info.value.checkpoint_path == os.path.join(tmp, CHECKPOINT_FILE)
        saved = load_checkpoint(info.value.checkpoint_path)
        assert_array_equal(saved.flatten(), trainer.params.flatten())
        assert len(_read_metrics(tmp)) == 2


def test_config_validation():
    """Invalid hyperparameters are rejected"""
    with pytest.raises(ConfigurationError):
        TrainConfig(objective='hinge').validate()
    with pytest.raises(ConfigurationError):
        TrainConfig(lr=0.0).validate()
    with pytest.raises(ConfigurationError):
        TrainConfig(gamma=1.5).validate()


def _bars(count, side=8, seed=7):
    """One bright horizontal or vertical bar per image on a dim background"""
    rng = make_rng(seed, 100)
    images = np.full((count, side, side), 0.05)
    for i in range(count):
        line = rng.integers(side)
        if rng.random() < 0.5:
            images[i, line, :] = 0.95
        else:
            images[i, :, line] = 0.95
    return ImageDataset.from_pixels(images.reshape(count, side * side), image_shape=(side, side))


def test_noise_images_get_lower_gate():
    """After robust training on 1:1 noisy bars, noise images are gated below originals"""
    cfg = TrainConfig(objective='robust', log_alpha=-5.0, epochs=30, batch_size=50, lr=3e-3,
                      seed=7, hidden=32, latent=4, eval_interval=30, eval_k=20).validate()
    noisy, _ = prepare_datasets(cfg, _bars(400), mix_spec=NoiseMixSpec(1, 1))
    last = train(cfg, noisy).history[-1]
    assert last.mean_gate_noise < last.mean_gate_original


def test_warmup_elbo_improves():
    """Plain-ELBO epochs on a 16 x 8 dataset raise the mean ELBO over 50 epochs"""
    rng = make_rng(2, 99)
    pixels = np.where(rng.random((16, 8)) < 0.5, 0.9, 0.1)
    data = ImageDataset.from_pixels(pixels, image_shape=(2, 4))
    trainer = Trainer(_tiny_config(objective='elbo', batch_size=4, epochs=50), 8)
    first = trainer.warmup_epoch(data)
    elbos = [first] + [trainer.train_epoch_elbo(data, epoch).mean_elbo for epoch in range(2, 51)]
    assert np.mean(elbos[-5:]) > np.mean(elbos[:5])
    assert elbos[-1] > first


def test_warmup_epoch_is_reproducible():
    """Same seed, same data: identical parameters and mean ELBO after the warm-up"""
    a = Trainer(_tiny_config(), 16)
    b = Trainer(_tiny_config(), 16)
    elbo_a = a.warmup_epoch(_images(40))
    elbo_b = b.warmup_epoch(_images(40))
    assert elbo_a == elbo_b
    assert_array_equal(a.params.flatten(), b.params.flatten())


def test_unit_gamma_freezes_eps_within_epoch():
    """With gamma = 1 neither the per-batch nor the per-epoch update moves log eps"""
    trainer = Trainer(_tiny_config(gamma=1.0), 16)
    data = _images(40)
    start = trainer.warmup_epoch(data)
    trainer.eps_state = init_epsilon(start, log_alpha=-5.0, gamma=1.0)
    stats = trainer.train_epoch_robust(data, 2)
    assert [b.log_eps for b in stats.batches] == [start] * len(stats.batches)
    assert stats.log_eps_end == start
