"""
Variational autoencoder with a Bernoulli decoder and Gaussian posterior
Encoder, reparametrized sampling, decoder, log-density terms, hand-written
backward pass and the binary checkpoint container
"""

import struct
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from src.core.numerics import (
    LOG_2PI,
    Matrix,
    Rng,
    affine_backward,
    affine_forward,
    gaussian_sample,
    he_normal,
    prelu_backward,
    prelu_forward,
    softplus,
    stable_sigmoid,
)
from src.utils.errors import CheckpointError, DimensionError, DomainError
from src.utils.logger import logger


# Default MNIST architecture: 784 -> 200 -> 200 -> 50 and back
INPUT_DIM = 784
HIDDEN_UNITS = 200
LATENT_UNITS = 50
PRELU_INIT_SLOPE = 0.25

CHECKPOINT_MAGIC = b'RVAE'
CHECKPOINT_VERSION = 1
# magic, version, input_dim, hidden, latent, tensor count
_HEADER = struct.Struct('<4sHHHHI')
_SHAPE_ENTRY = struct.Struct('<II')

ENCODER_PREFIX = 'enc'
DECODER_PREFIX = 'dec'


def parameter_layout(input_dim: int, hidden: int, latent: int) -> List[Tuple[str, Tuple[int, ...]]]:
    """
    Parameter names and shapes in declaration order

    Encoder tensors (prefix 'enc') form phi, decoder tensors (prefix 'dec') form theta.
    """
    return [
        ('enc1.W', (input_dim, hidden)),
        ('enc1.b', (hidden,)),
        ('enc1.slope', (1,)),
        ('enc2.W', (hidden, hidden)),
        ('enc2.b', (hidden,)),
        ('enc2.slope', (1,)),
        ('enc_mu.W', (hidden, latent)),
        ('enc_mu.b', (latent,)),
        ('enc_logvar.W', (hidden, latent)),
        ('enc_logvar.b', (latent,)),
        ('dec1.W', (latent, hidden)),
        ('dec1.b', (hidden,)),
        ('dec1.slope', (1,)),
        ('dec2.W', (hidden, hidden)),
        ('dec2.b', (hidden,)),
        ('dec2.slope', (1,)),
        ('dec_out.W', (hidden, input_dim)),
        ('dec_out.b', (input_dim,)),
    ]


@dataclass
class VaeParams:
    """All encoder and decoder weights, biases and PReLU slopes"""
    input_dim: int
    hidden: int
    latent: int
    tensors: Dict[str, np.ndarray]

    def __post_init__(self):
        for name, shape in self.layout():
            if name not in self.tensors:
                raise DimensionError(f"VaeParams[{name}] missing", shape)
            if self.tensors[name].shape != shape:
                raise DimensionError(f"VaeParams[{name}]", shape, self.tensors[name].shape)

    @classmethod
    def initialize(
        cls,
        rng: Rng,
        input_dim: int = INPUT_DIM,
        hidden: int = HIDDEN_UNITS,
        latent: int = LATENT_UNITS,
        slope: float = PRELU_INIT_SLOPE
    ) -> 'VaeParams':
        """
        Fresh parameters: He-normal weights, zero biases, PReLU slopes at 0.25

        Args:
            rng: Random generator for the weights
            input_dim: Pixels per image
            hidden: Width of each of the two hidden layers
            latent: Latent dimension

        Returns:
            Initialized parameters
        """
        if min(input_dim, hidden, latent) < 1:
            raise DomainError(f"layer sizes must be positive, got {input_dim},{hidden},{latent}")
        tensors = {}
        for name, shape in parameter_layout(input_dim, hidden, latent):
            if name.endswith('.W'):
                tensors[name] = he_normal(rng, shape[0], shape[1])
            elif name.endswith('.slope'):
                tensors[name] = np.full(shape, slope)
            else:
                tensors[name] = np.zeros(shape)
        return cls(input_dim, hidden, latent, tensors)

    @classmethod
    def zeros(cls, input_dim: int = INPUT_DIM, hidden: int = HIDDEN_UNITS,
              latent: int = LATENT_UNITS, slope: float = PRELU_INIT_SLOPE) -> 'VaeParams':
        """All weights and biases zero (the analytic degenerate model)"""
        tensors = {
            name: np.full(shape, slope) if name.endswith('.slope') else np.zeros(shape)
            for name, shape in parameter_layout(input_dim, hidden, latent)
        }
        return cls(input_dim, hidden, latent, tensors)

    def layout(self) -> List[Tuple[str, Tuple[int, ...]]]:
        return parameter_layout(self.input_dim, self.hidden, self.latent)

    def names(self) -> List[str]:
        return [name for name, _ in self.layout()]

    def encoder_names(self) -> List[str]:
        """Names of the phi parameters"""
        return [n for n in self.names() if n.startswith(ENCODER_PREFIX)]

    def decoder_names(self) -> List[str]:
        """Names of the theta parameters"""
        return [n for n in self.names() if n.startswith(DECODER_PREFIX)]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def slope(self, layer: str) -> float:
        return float(self.tensors[f"{layer}.slope"][0])

    def copy(self) -> 'VaeParams':
        return VaeParams(self.input_dim, self.hidden, self.latent,
                         {k: a.copy() for k, a in self.tensors.items()})

    def zeros_like(self) -> Dict[str, np.ndarray]:
        """Gradient storage matching every parameter"""
        return {name: np.zeros(shape) for name, shape in self.layout()}

    def size(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.layout())

    def flatten(self) -> np.ndarray:
        """All parameters as one vector in declaration order"""
        return np.concatenate([self.tensors[n].ravel() for n in self.names()])

    def with_vector(self, vector: np.ndarray) -> 'VaeParams':
        """New parameters read from a flat vector in declaration order"""
        return VaeParams(self.input_dim, self.hidden, self.latent,
                         unflatten(vector, self.layout()))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.tensors.values())


def flatten_grads(grads: Dict[str, np.ndarray], params: VaeParams) -> np.ndarray:
    """Gradient dictionary as a vector in the parameters' declaration order"""
    return np.concatenate([grads[n].ravel() for n in params.names()])


def unflatten(vector: np.ndarray, layout: List[Tuple[str, Tuple[int, ...]]]) -> Dict[str, np.ndarray]:
    tensors = {}
    offset = 0
    for name, shape in layout:
        n = int(np.prod(shape))
        tensors[name] = np.array(vector[offset:offset + n], dtype=np.float64).reshape(shape)
        offset += n
    if offset != len(vector):
        raise DimensionError('unflatten', (offset,), (len(vector),))
    return tensors


@dataclass
class PosteriorParams:
    """Diagonal Gaussian q(z | x)"""
    mu: Matrix
    logvar: Matrix

    def __post_init__(self):
        if self.mu.shape != self.logvar.shape:
            raise DimensionError('PosteriorParams', self.mu.shape, self.logvar.shape)

    def repeat(self, times: int) -> 'PosteriorParams':
        """Each row repeated `times` times consecutively"""
        return PosteriorParams(np.repeat(self.mu, times, axis=0), np.repeat(self.logvar, times, axis=0))


@dataclass
class LatentBatch:
    """Reparametrized sample z = mu + exp(logvar / 2) * noise, noise kept for replay"""
    noise: Matrix
    z: Matrix


@dataclass
class EncoderCache:
    x: Matrix
    pre1: Matrix
    h1: Matrix
    pre2: Matrix
    h2: Matrix


@dataclass
class DecoderCache:
    z: Matrix
    pre1: Matrix
    h1: Matrix
    pre2: Matrix
    h2: Matrix


def encode_forward(params: VaeParams, x: Matrix) -> Tuple[PosteriorParams, EncoderCache]:
    """Encoder pass keeping the activations needed by encode_backward"""
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise DimensionError('encode', tuple(x.shape), (x.shape[0] if x.ndim else 0, params.input_dim))
    t = params.tensors
    pre1 = affine_forward(x, t['enc1.W'], t['enc1.b'])
    h1 = prelu_forward(pre1, params.slope('enc1'))
    pre2 = affine_forward(h1, t['enc2.W'], t['enc2.b'])
    h2 = prelu_forward(pre2, params.slope('enc2'))
    mu = affine_forward(h2, t['enc_mu.W'], t['enc_mu.b'])
    logvar = affine_forward(h2, t['enc_logvar.W'], t['enc_logvar.b'])
    return PosteriorParams(mu, logvar), EncoderCache(x, pre1, h1, pre2, h2)


def encode(params: VaeParams, x: Matrix) -> PosteriorParams:
    """q(z | x) parameters for a batch of images"""
    post, _ = encode_forward(params, x)
    return post


def encode_backward(
    params: VaeParams,
    cache: EncoderCache,
    grad_mu: Matrix,
    grad_logvar: Matrix,
    grads: Dict[str, np.ndarray]
):
    """Accumulate encoder parameter gradients into grads"""
    t = params.tensors
    gx, gW, gb = affine_backward(cache.h2, t['enc_mu.W'], grad_mu)
    grads['enc_mu.W'] += gW
    grads['enc_mu.b'] += gb
    g_h2 = gx
    gx, gW, gb = affine_backward(cache.h2, t['enc_logvar.W'], grad_logvar)
    grads['enc_logvar.W'] += gW
    grads['enc_logvar.b'] += gb
    g_h2 = g_h2 + gx

    g_pre2, g_slope = prelu_backward(cache.pre2, params.slope('enc2'), g_h2)
    grads['enc2.slope'][0] += g_slope
    g_h1, gW, gb = affine_backward(cache.h1, t['enc2.W'], g_pre2)
    grads['enc2.W'] += gW
    grads['enc2.b'] += gb

    g_pre1, g_slope = prelu_backward(cache.pre1, params.slope('enc1'), g_h1)
    grads['enc1.slope'][0] += g_slope
    _, gW, gb = affine_backward(cache.x, t['enc1.W'], g_pre1)
    grads['enc1.W'] += gW
    grads['enc1.b'] += gb


def decode_forward(params: VaeParams, z: Matrix) -> Tuple[Matrix, DecoderCache]:
    """Decoder pass keeping the activations needed by decode_backward"""
    if z.ndim != 2 or z.shape[1] != params.latent:
        raise DimensionError('decode', tuple(z.shape), (z.shape[0] if z.ndim else 0, params.latent))
    t = params.tensors
    pre1 = affine_forward(z, t['dec1.W'], t['dec1.b'])
    h1 = prelu_forward(pre1, params.slope('dec1'))
    pre2 = affine_forward(h1, t['dec2.W'], t['dec2.b'])
    h2 = prelu_forward(pre2, params.slope('dec2'))
    logits = affine_forward(h2, t['dec_out.W'], t['dec_out.b'])
    return logits, DecoderCache(z, pre1, h1, pre2, h2)


def decode(params: VaeParams, z: Matrix) -> Matrix:
    """Bernoulli logits for every pixel"""
    logits, _ = decode_forward(params, z)
    return logits


def decode_backward(
    params: VaeParams,
    cache: DecoderCache,
    grad_logits: Matrix,
    grads: Dict[str, np.ndarray]
) -> Matrix:
    """
    Accumulate decoder parameter gradients into grads

    Returns:
        Gradient with respect to z
    """
    t = params.tensors
    g_h2, gW, gb = affine_backward(cache.h2, t['dec_out.W'], grad_logits)
    grads['dec_out.W'] += gW
    grads['dec_out.b'] += gb

    g_pre2, g_slope = prelu_backward(cache.pre2, params.slope('dec2'), g_h2)
    grads['dec2.slope'][0] += g_slope
    g_h1, gW, gb = affine_backward(cache.h1, t['dec2.W'], g_pre2)
    grads['dec2.W'] += gW
    grads['dec2.b'] += gb

    g_pre1, g_slope = prelu_backward(cache.pre1, params.slope('dec1'), g_h1)
    grads['dec1.slope'][0] += g_slope
    g_z, gW, gb = affine_backward(cache.z, t['dec1.W'], g_pre1)
    grads['dec1.W'] += gW
    grads['dec1.b'] += gb
    return g_z


def latent_from_noise(post: PosteriorParams, noise: Matrix) -> LatentBatch:
    """Replay the reparametrization with given standard normal noise"""
    if noise.shape != post.mu.shape:
        raise DimensionError('latent_from_noise', post.mu.shape, noise.shape)
    return LatentBatch(noise=noise, z=post.mu + np.exp(0.5 * post.logvar) * noise)


def reparam_sample(post: PosteriorParams, rng: Rng) -> LatentBatch:
    """Draw z = mu + exp(logvar / 2) * noise with fresh standard normal noise"""
    rows, cols = post.mu.shape
    return latent_from_noise(post, gaussian_sample(rng, rows, cols))


def bernoulli_loglik(logits: Matrix, x: Matrix) -> np.ndarray:
    """Per-example sum over pixels of x * logit - softplus(logit)"""
    if logits.shape != x.shape:
        raise DimensionError('bernoulli_loglik', logits.shape, x.shape)
    return np.sum(x * logits - softplus(logits), axis=1)


def gaussian_logpdf_std(z: Matrix) -> np.ndarray:
    """Per-example log N(z; 0, I)"""
    return np.sum(-0.5 * LOG_2PI - 0.5 * z ** 2, axis=1)


def gaussian_logpdf(post: PosteriorParams, z: Matrix) -> np.ndarray:
    """Per-example log q(z | x) for a diagonal Gaussian"""
    if z.shape != post.mu.shape:
        raise DimensionError('gaussian_logpdf', post.mu.shape, z.shape)
    return np.sum(
        -0.5 * LOG_2PI - 0.5 * post.logvar - (z - post.mu) ** 2 / (2.0 * np.exp(post.logvar)),
        axis=1
    )


def analytic_kl(post: PosteriorParams) -> np.ndarray:
    """Per-example KL(q(z | x) || N(0, I)), always >= 0"""
    return 0.5 * np.sum(post.mu ** 2 + np.exp(post.logvar) - 1.0 - post.logvar, axis=1)


@dataclass
class ForwardPass:
    """Everything one encode -> sample -> decode pass produces"""
    x: Matrix
    post: PosteriorParams
    latent: LatentBatch
    logits: Matrix
    enc_cache: EncoderCache
    dec_cache: DecoderCache
    loglik: np.ndarray
    log_prior: np.ndarray
    log_q: np.ndarray
    kl: np.ndarray

    @property
    def log_ratio(self) -> np.ndarray:
        """log p(x, z) / q(z | x) per example"""
        return self.loglik + self.log_prior - self.log_q

    @property
    def elbo_analytic(self) -> np.ndarray:
        """E_q log p(x | z) estimate minus the closed-form KL"""
        return self.loglik - self.kl


def forward_pass(
    params: VaeParams,
    x: Matrix,
    rng: Optional[Rng] = None,
    noise: Optional[Matrix] = None
) -> ForwardPass:
    """
    Full model pass on a batch of binary images

    Args:
        params: Model parameters
        x: Binary images, B x input_dim
        rng: Source of reparametrization noise (ignored if noise is given)
        noise: Frozen standard normal noise, B x latent

    Returns:
        ForwardPass with caches and log-density terms
    """
    post, enc_cache = encode_forward(params, x)
    if noise is not None:
        latent = latent_from_noise(post, noise)
    elif rng is not None:
        latent = reparam_sample(post, rng)
    else:
        raise DomainError("forward_pass needs either rng or noise")
    logits, dec_cache = decode_forward(params, latent.z)
    return ForwardPass(
        x=x,
        post=post,
        latent=latent,
        logits=logits,
        enc_cache=enc_cache,
        dec_cache=dec_cache,
        loglik=bernoulli_loglik(logits, x),
        log_prior=gaussian_logpdf_std(latent.z),
        log_q=gaussian_logpdf(post, latent.z),
        kl=analytic_kl(post),
    )


def model_backward(
    params: VaeParams,
    fp: ForwardPass,
    w_loglik: np.ndarray,
    w_prior: np.ndarray,
    w_q: np.ndarray,
    w_kl: np.ndarray
) -> Dict[str, np.ndarray]:
    """
    Gradient of sum_i [w_loglik log p(x|z) + w_prior log p(z) - w_q log q(z|x) - w_kl KL]

    The per-example weights are constants; the noise is held fixed.

    Returns:
        Gradient dictionary keyed like params.tensors
    """
    grads = params.zeros_like()
    post = fp.post
    z = fp.latent.z
    col = lambda w: np.asarray(w, dtype=np.float64)[:, None]

    grad_logits = col(w_loglik) * (fp.x - stable_sigmoid(fp.logits))
    g_z = decode_backward(params, fp.dec_cache, grad_logits, grads)

    var = np.exp(post.logvar)
    diff = z - post.mu
    g_z = g_z - col(w_prior) * z + col(w_q) * diff / var

    # Explicit dependence of -log q and -KL on (mu, logvar)
    g_mu = -col(w_q) * diff / var - col(w_kl) * post.mu
    g_logvar = -col(w_q) * (-0.5 + diff ** 2 / (2.0 * var)) - col(w_kl) * 0.5 * (var - 1.0)

    # Through z = mu + exp(logvar / 2) * noise
    g_mu = g_mu + g_z
    g_logvar = g_logvar + g_z * 0.5 * np.exp(0.5 * post.logvar) * fp.latent.noise

    encode_backward(params, fp.enc_cache, g_mu, g_logvar, grads)
    return grads


def shape_table(params: VaeParams) -> List[Tuple[str, Tuple[int, ...]]]:
    return [(name, params.tensors[name].shape) for name in params.names()]


def save_checkpoint(params: VaeParams, path: str):
    """
    Write parameters to the RVAE container

    Layout (little-endian):
        16-byte header  magic 'RVAE' | u16 version | u16 input_dim | u16 hidden | u16 latent | u32 n
        shape table     n x (u32 rows, u32 cols); 1-D tensors are stored as 1 x len
        payload         every tensor as float64, declaration order, row-major
    """
    layout = params.layout()
    with open(path, 'wb') as f:
        f.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                             params.input_dim, params.hidden, params.latent, len(layout)))
        for _, shape in layout:
            f.write(_SHAPE_ENTRY.pack(*_as_rows_cols(shape)))
        for name, _ in layout:
            f.write(np.ascontiguousarray(params.tensors[name], dtype='<f8').tobytes())
    logger.debug(f"Checkpoint written: {path}")


def load_checkpoint(path: str, expected: Optional[Tuple[int, int, int]] = None) -> VaeParams:
    """
    Read parameters from the RVAE container

    Args:
        path: Checkpoint file
        expected: Optional (input_dim, hidden, latent) the caller is configured for

    Returns:
        Loaded parameters
    """
    with open(path, 'rb') as f:
        blob = f.read()
    if len(blob) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header ({len(blob)} bytes)")
    magic, version, input_dim, hidden, latent, count = _HEADER.unpack_from(blob, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r} at offset 0, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} at offset 4")

    offset = _HEADER.size
    if len(blob) < offset + count * _SHAPE_ENTRY.size:
        raise CheckpointError(f"{path}: truncated shape table")
    found = []
    for i in range(count):
        found.append(_SHAPE_ENTRY.unpack_from(blob, offset))
        offset += _SHAPE_ENTRY.size

    layout = parameter_layout(input_dim, hidden, latent)
    declared = [(name, _as_rows_cols(shape)) for name, shape in layout]
    found_table = [(declared[i][0] if i < len(declared) else f"#{i}", tuple(s)) for i, s in enumerate(found)]
    if [tuple(s) for s in found] != [s for _, s in declared]:
        raise CheckpointError(f"{path}: shape table inconsistent with header", declared, found_table)
    if expected is not None and tuple(expected) != (input_dim, hidden, latent):
        wanted = [(name, _as_rows_cols(shape)) for name, shape in parameter_layout(*expected)]
        raise CheckpointError(
            f"{path}: checkpoint architecture {input_dim},{hidden},{latent} "
            f"does not match configured {expected[0]},{expected[1]},{expected[2]}",
            wanted, found_table
        )

    n_values = sum(int(np.prod(shape)) for _, shape in layout)
    if len(blob) != offset + 8 * n_values:
        raise CheckpointError(
            f"{path}: payload is {len(blob) - offset} bytes, expected {8 * n_values}"
        )
    vector = np.frombuffer(blob, dtype='<f8', count=n_values, offset=offset).astype(np.float64)
    return VaeParams(input_dim, hidden, latent, unflatten(vector, layout))


def _as_rows_cols(shape: Tuple[int, ...]) -> Tuple[int, int]:
    return (shape[0], shape[1]) if len(shape) == 2 else (1, shape[0])
