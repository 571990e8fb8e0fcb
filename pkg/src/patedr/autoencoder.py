"""Dense autoencoder with a unit-ball bottleneck, trained by hand-written backprop.

Architecture (one code per volume)::

    x (d) -> relu(W1) (h) -> ball(W2) (l, from l+1 pre-activations)
          [+ N(0, s^2) during training] -> relu(W3) (h) -> sigmoid(W4) (d)

The ball activation maps ``(v0, v1..vl)`` to ``v/|v| * logistic(c v0)^(1/l)``
with ``c = sqrt(8/pi)``. For standard Normal inputs the radius raised to the
l-th power is close to Uniform[0, 1], so the codes spread roughly uniformly
over the ball.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .mechanisms import NoiseSeed
from .volume import FormatError, Volume

RADIUS_SLOPE = math.sqrt(8 / math.pi)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _split(v):
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] < 2:
        raise ValueError("ball activation needs at least two inputs (l >= 1)")
    v0 = v[..., 0]
    u = v[..., 1:].copy()
    norm = np.linalg.norm(u, axis=-1)
    zero = norm == 0
    if np.any(zero):
        # Degenerate direction: substitute the first basis vector.
        u[zero] = 0.0
        u[zero, 0] = 1.0
        norm = np.where(zero, 1.0, norm)
    return v0, u, norm


def ball_radius(v0, latent_dim: int):
    """``logistic(c v0) ** (1/l)`` computed in log space."""
    return np.exp(-_softplus(-RADIUS_SLOPE * np.asarray(v0, dtype=np.float64)) / latent_dim)


def ball_activation(v) -> np.ndarray:
    """Map ``l+1`` pre-activations (last axis) into the open unit l-ball."""
    v0, u, norm = _split(v)
    rho = ball_radius(v0, u.shape[-1])
    return u / norm[..., None] * rho[..., None]


def ball_activation_grad(v) -> np.ndarray:
    """Jacobian of :func:`ball_activation` for a single input, shape ``(l, l+1)``."""
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    v0, u, norm = _split(v)
    ell = u.size
    n = u / norm
    rho = float(ball_radius(v0, ell))
    drho = RADIUS_SLOPE / ell * rho * float(_sigmoid(-RADIUS_SLOPE * v0))
    jac = np.empty((ell, ell + 1))
    jac[:, 0] = n * drho
    jac[:, 1:] = rho / norm * (np.eye(ell) - np.outer(n, n))
    return jac


def _ball_backward(v, grad_out) -> np.ndarray:
    """Vector-Jacobian product of the ball activation, batched over rows."""
    v0, u, norm = _split(v)
    ell = u.shape[-1]
    n = u / norm[:, None]
    rho = ball_radius(v0, ell)
    drho = RADIUS_SLOPE / ell * rho * _sigmoid(-RADIUS_SLOPE * v0)
    radial = np.sum(grad_out * n, axis=1)
    out = np.empty_like(np.asarray(v, dtype=np.float64))
    out[:, 0] = radial * drho
    out[:, 1:] = (rho / norm)[:, None] * (grad_out - n * radial[:, None])
    return out


@dataclass(frozen=True, eq=False)
class AutoencoderParams:
    """Weights ``W`` are stored ``(fan_in, fan_out)``; layers run encoder then decoder."""

    weights: tuple
    biases: tuple

    ACTIVATIONS = ("relu", "ball", "relu", "sigmoid")

    def __post_init__(self):
        ws = tuple(np.array(w, dtype=np.float64) for w in self.weights)
        bs = tuple(np.array(b, dtype=np.float64).reshape(-1) for b in self.biases)
        if len(ws) != 4 or len(bs) != 4:
            raise ValueError("autoencoder has exactly four layers")
        d, h = ws[0].shape
        ell = ws[2].shape[0]
        expected = [(d, h), (h, ell + 1), (ell, h), (h, d)]
        for i, (w, b, shape) in enumerate(zip(ws, bs, expected)):
            if w.shape != shape or b.shape != (shape[1],):
                raise ValueError(f"layer {i} has shape {w.shape}/{b.shape}, expected {shape}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i} has non-finite weights")
        for a in ws + bs:
            a.setflags(write=False)
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def latent_dim(self) -> int:
        return self.weights[2].shape[0]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for pair in zip(self.weights, self.biases) for a in pair])

    def with_flat(self, theta) -> "AutoencoderParams":
        theta = np.asarray(theta, dtype=np.float64)
        ws, bs, off = [], [], 0
        for w, b in zip(self.weights, self.biases):
            ws.append(theta[off : off + w.size].reshape(w.shape))
            off += w.size
            bs.append(theta[off : off + b.size])
            off += b.size
        return AutoencoderParams(tuple(ws), tuple(bs))


def init_params(input_dim: int, hidden_dim: int, latent_dim: int, seed: int) -> AutoencoderParams:
    """Uniform fan-in init: He scale before ReLU, LeCun scale before ball/sigmoid."""
    rng = np.random.default_rng(seed)
    shapes = [
        (input_dim, hidden_dim),
        (hidden_dim, latent_dim + 1),
        (latent_dim, hidden_dim),
        (hidden_dim, input_dim),
    ]
    gains = (6.0, 3.0, 6.0, 3.0)
    ws = tuple(rng.uniform(-1, 1, s) * math.sqrt(g / s[0]) for s, g in zip(shapes, gains))
    bs = tuple(np.zeros(s[1]) for s in shapes)
    return AutoencoderParams(ws, bs)


def _as_batch(x, p: AutoencoderParams) -> np.ndarray:
    x = np.asarray(x.data if isinstance(x, Volume) else x, dtype=np.float64)
    if x.size == p.input_dim:
        x = x.reshape(1, -1)
    elif x.ndim != 2:
        x = x.reshape(x.shape[0], -1)
    if x.shape[1] != p.input_dim:
        raise ValueError(f"input length does not match autoencoder input dim {p.input_dim}")
    return x


def _encode_batch(x, p: AutoencoderParams):
    a1 = x @ p.weights[0] + p.biases[0]
    h1 = np.maximum(a1, 0.0)
    a2 = h1 @ p.weights[1] + p.biases[1]
    return a1, h1, a2, ball_activation(a2)


def _decode_logits(z, p: AutoencoderParams):
    a3 = z @ p.weights[2] + p.biases[2]
    h3 = np.maximum(a3, 0.0)
    return a3, h3, h3 @ p.weights[3] + p.biases[3]


def loss_and_grad(p: AutoencoderParams, x, bottleneck_noise=None):
    """Cross-entropy summed over voxels and averaged over the batch, with its gradient.

    ``bottleneck_noise`` (same shape as the codes) is added after the ball
    activation. Returns ``(loss, flat_gradient)``.
    """
    x = _as_batch(x, p)
    batch = x.shape[0]
    a1, h1, a2, z = _encode_batch(x, p)
    if bottleneck_noise is not None:
        z = z + bottleneck_noise
    a3, h3, a4 = _decode_logits(z, p)
    loss = float(np.sum(_softplus(a4) - x * a4) / batch)

    d4 = (_sigmoid(a4) - x) / batch
    gw4, gb4 = h3.T @ d4, d4.sum(0)
    d3 = (d4 @ p.weights[3].T) * (a3 > 0)
    gw3, gb3 = z.T @ d3, d3.sum(0)
    dz = d3 @ p.weights[2].T
    d2 = _ball_backward(a2, dz)
    gw2, gb2 = h1.T @ d2, d2.sum(0)
    d1 = (d2 @ p.weights[1].T) * (a1 > 0)
    gw1, gb1 = x.T @ d1, d1.sum(0)
    grads = [gw1, gb1, gw2, gb2, gw3, gb3, gw4, gb4]
    return loss, np.concatenate([g.reshape(-1) for g in grads])


def ae_forward(x, p: AutoencoderParams, noise_sigma: float = 0.0, seed: Optional[NoiseSeed] = None):
    """Return ``(codes, reconstruction probabilities)``; batched over rows of ``x``.

    With ``noise_sigma > 0`` the codes carry bottleneck noise drawn from ``seed``.
    """
    batch = _as_batch(x, p)
    z = _encode_batch(batch, p)[3]
    if noise_sigma > 0:
        if seed is None:
            raise ValueError("a seed is required when noise_sigma > 0")
        z = z + noise_sigma * seed.generator().standard_normal(z.shape)
    probs = _sigmoid(_decode_logits(z, p)[2])
    if np.ndim(x) == 1 or isinstance(x, Volume):
        return z[0], probs[0]
    return z, probs


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.5
    epochs: int = 60
    batch_size: int = 16
    bottleneck_noise_sigma: float = 0.0
    seed: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be nonnegative and batch_size positive")
        if self.bottleneck_noise_sigma < 0:
            raise ValueError("bottleneck_noise_sigma must be nonnegative")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")


def ae_train(
    masks: Sequence,
    cfg: TrainConfig,
    latent_dim: int = 32,
    hidden_dim: int = 128,
    init: Optional[AutoencoderParams] = None,
    history: Optional[list] = None,
) -> AutoencoderParams:
    """Mini-batch gradient descent on voxelwise cross-entropy.

    Batch order and bottleneck noise are drawn from ``cfg.seed``. Each
    epoch's mean training loss is appended to ``history`` if given.
    """
    if len(masks) == 0:
        raise ValueError("training set is empty")
    x = np.stack([np.asarray(m.data if isinstance(m, Volume) else m, dtype=np.float64).reshape(-1) for m in masks])
    p = init if init is not None else init_params(x.shape[1], hidden_dim, latent_dim, cfg.seed)
    if p.input_dim != x.shape[1]:
        raise ValueError("initial params do not match mask size")
    rng = np.random.default_rng([cfg.seed, 1])
    theta = p.flat()
    decay_mask = np.concatenate(
        [np.full(a.size, float(is_w)) for w, b in zip(p.weights, p.biases) for a, is_w in ((w, 1), (b, 0))]
    )
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            noise = None
            if cfg.bottleneck_noise_sigma > 0:
                noise = cfg.bottleneck_noise_sigma * rng.standard_normal((idx.size, p.latent_dim))
            loss, grad = loss_and_grad(p, x[idx], noise)
            if not math.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite training loss at epoch {epoch}, batch starting {start}; "
                    f"try a smaller learning rate (now {cfg.learning_rate})"
                )
            total += loss * idx.size
            if cfg.weight_decay:
                grad = grad + cfg.weight_decay * decay_mask * theta
            theta = theta - cfg.learning_rate * grad
            if not np.all(np.isfinite(theta)):
                raise FloatingPointError(
                    f"weights overflowed at epoch {epoch}; try a smaller learning rate (now {cfg.learning_rate})"
                )
            p = p.with_flat(theta)
        if history is not None:
            history.append(total / len(x))
    return p


def ae_encode(v, p: AutoencoderParams) -> np.ndarray:
    return ae_forward(v, p)[0]


def ae_decode(z, p: AutoencoderParams, dims=None, binarize: bool = True) -> Volume:
    """Decode a single code to a volume; thresholds at 0.5 unless ``binarize`` is false."""
    z = np.asarray(z, dtype=np.float64).reshape(1, -1)
    if z.shape[1] != p.latent_dim:
        raise ValueError(f"code length {z.shape[1]} does not match latent dim {p.latent_dim}")
    probs = _sigmoid(_decode_logits(z, p)[2])[0]
    if binarize:
        probs = (probs >= 0.5).astype(np.float64)
    if dims is None:
        side = round(p.input_dim ** (1 / 3))
        if side**3 != p.input_dim:
            raise ValueError("dims required for non-cubic inputs")
        dims = (side, side, side)
    return Volume.from_flat(dims, probs)


# AENC: magic, u32 layer count, per layer u32 (fan_in, fan_out), then per layer
# row-major f64 weights followed by f64 biases, all little-endian.
def save_autoencoder(path, p: AutoencoderParams) -> None:
    parts = [b"AENC", struct.pack("<I", len(p.weights))]
    parts += [struct.pack("<2I", *w.shape) for w in p.weights]
    for w, b in zip(p.weights, p.biases):
        parts += [w.astype("<f8").tobytes(), b.astype("<f8").tobytes()]
    Path(path).write_bytes(b"".join(parts))


def load_autoencoder(path) -> AutoencoderParams:
    buf = Path(path).read_bytes()
    if buf[:4] != b"AENC":
        raise FormatError(f"bad magic {buf[:4]!r}", 0)
    if len(buf) < 8:
        raise FormatError("truncated AENC header", len(buf))
    (count,) = struct.unpack_from("<I", buf, 4)
    if count != 4:
        raise FormatError(f"expected 4 layers, found {count}", 4)
    off = 8
    if len(buf) < off + 8 * count:
        raise FormatError("truncated layer table", len(buf))
    shapes = [struct.unpack_from("<2I", buf, off + 8 * i) for i in range(count)]
    off += 8 * count
    ws, bs = [], []
    for fin, fout in shapes:
        need = 8 * (fin * fout + fout)
        if len(buf) < off + need:
            raise FormatError("truncated weight data", len(buf))
        ws.append(np.frombuffer(buf, "<f8", fin * fout, off).reshape(fin, fout))
        bs.append(np.frombuffer(buf, "<f8", fout, off + 8 * fin * fout))
        off += need
    if off != len(buf):
        raise FormatError("trailing bytes after weights", off)
    try:
        return AutoencoderParams(tuple(ws), tuple(bs))
    except ValueError as e:
        raise FormatError(str(e), "layers") from None
