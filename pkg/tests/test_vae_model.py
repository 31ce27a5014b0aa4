"""
Tests for the VAE model: parameters, passes, densities and checkpoints
"""

import math
import os
import sys
import tempfile
import unittest

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

# Add parent directory to path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from src.core.numerics import make_rng
from src.core.vae_model import (
    PosteriorParams,
    VaeParams,
    analytic_kl,
    bernoulli_loglik,
    decode,
    encode,
    forward_pass,
    gaussian_logpdf,
    gaussian_logpdf_std,
    load_checkpoint,
    parameter_layout,
    reparam_sample,
    save_checkpoint,
)
from src.utils.errors import CheckpointError, DimensionError, DomainError


def _binary(rows, cols, seed=0):
    return (make_rng(seed, 99).random((rows, cols)) < 0.5).astype(np.float64)


class TestParameters(unittest.TestCase):
    """Test cases for VaeParams"""

    def test_layout_order(self):
        """Test the 18 tensors come in declaration order"""
        names = [name for name, _ in parameter_layout(784, 200, 50)]
        self.assertEqual(len(names), 18)
        self.assertEqual(names[0], 'enc1.W')
        self.assertEqual(names[-1], 'dec_out.b')
        self.assertLess(names.index('enc_mu.W'), names.index('enc_logvar.W'))

    def test_initialize(self):
        """Test zero biases, slopes at 0.25 and reproducible weights"""
        a = VaeParams.initialize(make_rng(3, 1), 12, 6, 3)
        b = VaeParams.initialize(make_rng(3, 1), 12, 6, 3)
        for name in a.names():
            assert_array_equal(a[name], b[name])
        assert_array_equal(a['enc1.b'], np.zeros(6))
        self.assertEqual(a.slope('dec2'), 0.25)
        self.assertEqual(a['dec_out.W'].shape, (6, 12))
        self.assertEqual(len(a.encoder_names()) + len(a.decoder_names()), 18)

    def test_vector_round_trip(self):
        """Test flatten and with_vector are inverse"""
        params = VaeParams.initialize(make_rng(0), 6, 4, 2)
        vector = params.flatten()
        self.assertEqual(vector.size, params.size())
        assert_array_equal(params.with_vector(vector).flatten(), vector)

    def test_missing_tensor(self):
        """Test construction with a wrongly shaped tensor fails"""
        params = VaeParams.zeros(6, 4, 2)
        tensors = dict(params.tensors)
        tensors['enc1.W'] = np.zeros((4, 6))
        with self.assertRaises(DimensionError):
            VaeParams(6, 4, 2, tensors)


def test_encode_rejects_wrong_width():
    """Images of the wrong width raise DimensionError"""
    params = VaeParams.zeros(6, 4, 2)
    with pytest.raises(DimensionError):
        encode(params, np.zeros((3, 7)))
    with pytest.raises(DimensionError):
        decode(params, np.zeros((3, 3)))


def test_zero_model_is_uniform():
    """All-zero weights give mu = 0, logvar = 0 and logits = 0"""
    params = VaeParams.zeros(784, 20, 5)
    x = _binary(4, 784)
    post = encode(params, x)
    assert_array_equal(post.mu, np.zeros((4, 5)))
    assert_array_equal(post.logvar, np.zeros((4, 5)))
    assert_array_equal(decode(params, make_rng(0).standard_normal((4, 5))), np.zeros((4, 784)))


def test_zero_model_log_ratio():
    """With q equal to the prior, the log-ratio is exactly -784 log 2"""
    params = VaeParams.zeros(784, 20, 5)
    fp = forward_pass(params, _binary(3, 784), rng=make_rng(0))
    assert_array_equal(fp.log_prior, fp.log_q)
    assert_allclose(fp.log_ratio, np.full(3, -784 * math.log(2.0)), rtol=1e-14)
    assert fp.log_ratio[0] == pytest.approx(-543.4273, abs=1e-4)
    assert_array_equal(fp.kl, np.zeros(3))


def test_bernoulli_loglik_matches_naive():
    """x log p + (1 - x) log(1 - p) summed over pixels"""
    logits = make_rng(1, 99).standard_normal((3, 5)) * 3
    x = _binary(3, 5, seed=2)
    p = 1.0 / (1.0 + np.exp(-logits))
    naive = np.sum(x * np.log(p) + (1 - x) * np.log(1 - p), axis=1)
    assert_allclose(bernoulli_loglik(logits, x), naive, rtol=1e-12)


def test_bernoulli_loglik_large_logits():
    """Saturated logits stay finite"""
    logits = np.array([[800.0, -800.0]])
    x = np.array([[1.0, 1.0]])
    value = bernoulli_loglik(logits, x)
    assert np.isfinite(value).all()
    assert value[0] == pytest.approx(-800.0)


def test_gaussian_logpdf_standard_case_is_bitwise():
    """The diagonal density at mu = 0, logvar = 0 equals the standard one bitwise"""
    z = make_rng(4, 99).standard_normal((5, 3))
    post = PosteriorParams(np.zeros((5, 3)), np.zeros((5, 3)))
    assert_array_equal(gaussian_logpdf(post, z), gaussian_logpdf_std(z))


def test_analytic_kl_matches_monte_carlo():
    """Closed-form KL agrees with a large-sample estimate"""
    post = PosteriorParams(np.array([[0.5, -1.0]]), np.array([[-0.3, 0.4]]))
    rng = make_rng(5, 99)
    noise = rng.standard_normal((200000, 2))
    z = post.mu + np.exp(0.5 * post.logvar) * noise
    repeated = post.repeat(200000)
    estimate = np.mean(gaussian_logpdf(repeated, z) - gaussian_logpdf_std(z))
    assert analytic_kl(post)[0] == pytest.approx(estimate, abs=0.01)
    assert analytic_kl(PosteriorParams(np.zeros((1, 2)), np.zeros((1, 2))))[0] == 0.0


def test_forward_pass_needs_noise_source():
    """forward_pass without rng or noise is an error"""
    with pytest.raises(DomainError):
        forward_pass(VaeParams.zeros(6, 4, 2), np.zeros((1, 6)))


def test_frozen_noise_is_deterministic():
    """The same noise gives the same forward pass"""
    params = VaeParams.initialize(make_rng(0), 8, 5, 2)
    x = _binary(3, 8)
    noise = make_rng(1).standard_normal((3, 2))
    a = forward_pass(params, x, noise=noise)
    b = forward_pass(params, x, noise=noise)
    assert_array_equal(a.log_ratio, b.log_ratio)


class TestCheckpoint(unittest.TestCase):
    """Test cases for the checkpoint container"""

    def setUp(self):
        """Create a temporary directory and parameters"""
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, 'checkpoint.rvae')
        self.params = VaeParams.initialize(make_rng(7), 10, 6, 3)

    def tearDown(self):
        """Remove the temporary directory"""
        self.tmp.cleanup()

    def test_round_trip_is_bitwise(self):
        """Test a saved checkpoint loads back bit for bit"""
        save_checkpoint(self.params, self.path)
        loaded = load_checkpoint(self.path, expected=(10, 6, 3))
        assert_array_equal(loaded.flatten(), self.params.flatten())
        self.assertEqual((loaded.input_dim, loaded.hidden, loaded.latent), (10, 6, 3))

    def test_header_layout(self):
        """Test magic, version and dimensions open the file"""
        save_checkpoint(self.params, self.path)
        with open(self.path, 'rb') as f:
            head = f.read(16)
        self.assertEqual(head[:4], b'RVAE')
        self.assertEqual(int.from_bytes(head[4:6], 'little'), 1)
        self.assertEqual(int.from_bytes(head[6:8], 'little'), 10)
        self.assertEqual(int.from_bytes(head[12:16], 'little'), 18)

    def test_bad_magic(self):
        """Test a corrupted magic number is rejected"""
        save_checkpoint(self.params, self.path)
        with open(self.path, 'r+b') as f:
            f.write(b'XXXX')
        with self.assertRaises(CheckpointError) as ctx:
            load_checkpoint(self.path)
        self.assertIn('magic', str(ctx.exception))

    def test_architecture_mismatch_shows_both_tables(self):
        """Test loading into another architecture lists both shape tables"""
        save_checkpoint(self.params, self.path)
        with self.assertRaises(CheckpointError) as ctx:
            load_checkpoint(self.path, expected=(10, 8, 3))
        text = str(ctx.exception)
        self.assertIn('expected', text)
        self.assertIn('10x8', text)
        self.assertIn('10x6', text)

    def test_truncated_payload(self):
        """Test a short payload is rejected"""
        save_checkpoint(self.params, self.path)
        with open(self.path, 'rb') as f:
            blob = f.read()
        with open(self.path, 'wb') as f:
            f.write(blob[:-8])
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.path)


def test_reparam_sample_moments():
    """z = mu + sigma * noise has the posterior's mean and spread"""
    post = PosteriorParams(np.full((50000, 2), 1.0), np.full((50000, 2), math.log(4.0)))
    latent = reparam_sample(post, make_rng(6, 99))
    assert latent.z.shape == (50000, 2)
    assert_allclose(latent.z, 1.0 + 2.0 * latent.noise, rtol=1e-12)
    assert np.mean(latent.z) == pytest.approx(1.0, abs=0.03)
    assert np.std(latent.z) == pytest.approx(2.0, abs=0.03)
