"""Time-series augmentation transforms driven by a magnitude in [0, 1].

Every transform is a pure function of ``(x, m, rng)``. ``apply`` works on
numpy arrays of shape ``(channels, length)``; ``apply_differentiable`` runs
the identical forward computation inside the autodiff graph and supplies
gradients wrt the signal and the magnitude. Transforms whose output depends
on ``m`` through a hard threshold (time mask, band-stop) use a
straight-through gradient taken from a sigmoid-edged relaxation.
"""

from __future__ import annotations

import enum
import math
import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from .tensor import Function, Tensor, as_tensor


class TransformId(str, enum.Enum):
    IDENTITY = "identity"
    TIME_REVERSE = "time_reverse"
    FFT_SURROGATE = "fft_surrogate"
    CHANNEL_DROPOUT = "channel_dropout"
    CHANNEL_SHUFFLE = "channel_shuffle"
    TIME_MASK = "time_mask"
    GAUSSIAN_NOISE = "gaussian_noise"
    RANDOM_BANDSTOP = "random_bandstop"
    SIGN_FLIP = "sign_flip"
    FREQUENCY_SHIFT = "frequency_shift"
    SCALING = "scaling"


REGISTRY_VERSION = 1
DEFAULT_TRANSFORMS: tuple[TransformId, ...] = tuple(TransformId)[:10]


def transform_set(enable_scaling: bool = False) -> tuple[TransformId, ...]:
    """Registry in its fixed order; ``scaling`` is appended when enabled."""
    return tuple(TransformId) if enable_scaling else DEFAULT_TRANSFORMS


def parse_transform(name: str) -> TransformId:
    try:
        return TransformId(name)
    except ValueError:
        raise ValueError(f"unknown transform {name!r}") from None


# ---------------------------------------------------------------------------
# RNG streams
# ---------------------------------------------------------------------------


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFFFFFFFFFF
    return zlib.crc32(str(part).encode())


@dataclass(frozen=True)
class RngStream:
    """Deterministic random stream addressed by ``(seed, *stream_id)``."""

    seed: int
    stream_id: tuple = ()

    def child(self, *parts) -> "RngStream":
        return RngStream(self.seed, self.stream_id + tuple(parts))

    def generator(self) -> np.random.Generator:
        entropy = [_key(self.seed)] + [_key(p) for p in self.stream_id]
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


# ---------------------------------------------------------------------------
# Fourier plumbing
# ---------------------------------------------------------------------------


def dft(x: np.ndarray) -> np.ndarray:
    """Unnormalized forward DFT over the last axis."""
    return np.fft.fft(x, axis=-1)


def idft(spectrum: np.ndarray) -> np.ndarray:
    """Inverse DFT (1/N normalization) returning the real part."""
    return np.fft.ifft(spectrum, axis=-1).real


def _analytic_mask(n: int) -> np.ndarray:
    h = np.zeros(n)
    h[0] = 1.0
    if n % 2 == 0:
        h[n // 2] = 1.0
        h[1 : n // 2] = 2.0
    else:
        h[1 : (n + 1) // 2] = 2.0
    return h


def _hilbert_imag(x: np.ndarray) -> np.ndarray:
    """Imaginary part of the analytic signal along the last axis."""
    return np.fft.ifft(np.fft.fft(x, axis=-1) * _analytic_mask(x.shape[-1]), axis=-1).imag


# ---------------------------------------------------------------------------
# transform implementations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TransformSettings:
    """Magnitude-to-parameter constants shared by all transforms."""

    sample_rate_hz: float = 100.0
    max_mask_frac: float = 0.5
    noise_sigma_max: float = 0.5
    max_shift_hz: float = 2.0
    bandstop_steepness: float = 10.0
    mask_steepness: float = 1.0


DEFAULT_SETTINGS = TransformSettings()


class _Op:
    """forward returns (output, ctx); vjp maps an output gradient to (gx, gm)."""

    continuous = False

    def forward(self, x, m, gen, s):  # pragma: no cover - abstract
        raise NotImplementedError

    def vjp(self, ctx, g):
        return g, 0.0


class _Identity(_Op):
    def forward(self, x, m, gen, s):
        return x.copy(), None


class _TimeReverse(_Op):
    def forward(self, x, m, gen, s):
        return x[:, ::-1].copy(), None

    def vjp(self, ctx, g):
        return g[:, ::-1].copy(), 0.0


class _SignFlip(_Op):
    def forward(self, x, m, gen, s):
        return -x, None

    def vjp(self, ctx, g):
        return -g, 0.0


class _ChannelShuffle(_Op):
    def forward(self, x, m, gen, s):
        perm = gen.permutation(x.shape[0])
        return x[perm].copy(), perm

    def vjp(self, perm, g):
        gx = np.empty_like(g)
        gx[perm] = g
        return gx, 0.0


class _ChannelDropout(_Op):
    def forward(self, x, m, gen, s):
        c = x.shape[0]
        k = math.ceil(m * (c - 1) - 1e-12) if c > 1 else 0
        drop = gen.choice(c, size=k, replace=False) if k else np.empty(0, dtype=np.int64)
        out = x.copy()
        out[drop] = 0.0
        keep = np.ones((c, 1))
        keep[drop] = 0.0
        return out, keep

    def vjp(self, keep, g):
        return g * keep, 0.0


class _TimeMask(_Op):
    continuous = True

    def forward(self, x, m, gen, s):
        length = x.shape[1]
        max_len = s.max_mask_frac * length
        n = int(round(m * max_len))
        start = int(gen.integers(0, length - n + 1))
        out = x.copy()
        out[:, start : start + n] = 0.0
        keep = np.ones(length)
        keep[start : start + n] = 0.0
        return out, (x, start, max_len, m, keep, s.mask_steepness)

    def vjp(self, ctx, g):
        x, start, max_len, m, keep, k = ctx
        t = np.arange(x.shape[1]) + 0.5
        end = start + m * max_len
        # soft mask: sigmoid(k (t - start)) * sigmoid(k (end - t)); only the end edge moves with m
        left = expit(k * (t - start))
        z = k * (end - t)
        right = expit(z)
        dmask_dm = left * right * (1.0 - right) * k * max_len
        gm = float(np.sum(g * (-x) * dmask_dm))
        return g * keep, gm


class _GaussianNoise(_Op):
    continuous = True

    def forward(self, x, m, gen, s):
        z = gen.standard_normal(x.shape)
        scale = s.noise_sigma_max * z
        return x + m * scale, scale

    def vjp(self, scale, g):
        return g, float(np.sum(g * scale))


class _Scaling(_Op):
    continuous = True

    def forward(self, x, m, gen, s):
        z = gen.standard_normal(x.shape[1])
        factor = 1.0 + m * z
        return x * factor, (x, z, factor)

    def vjp(self, ctx, g):
        x, z, factor = ctx
        return g * factor, float(np.sum(g * x * z))


class _RandomBandstop(_Op):
    continuous = True

    def forward(self, x, m, gen, s):
        length = x.shape[1]
        nyq = s.sample_rate_hz / 2.0
        width = m * nyq / 2.0
        center = float(gen.uniform(0.0, nyq))
        freqs = np.fft.rfftfreq(length, d=1.0 / s.sample_rate_hz)
        stop = np.abs(freqs - center) < width / 2.0
        spec = np.fft.rfft(x, axis=-1)
        spec[:, stop] = 0.0
        out = np.fft.irfft(spec, n=length, axis=-1)
        if not stop.any():
            out = x.copy()
        return out, (x, stop, freqs, center, width, nyq, s.bandstop_steepness)

    def vjp(self, ctx, g):
        x, stop, freqs, center, width, nyq, k = ctx
        length = x.shape[1]
        gain = np.where(stop, 0.0, 1.0)
        gx = np.fft.irfft(np.fft.rfft(g, axis=-1) * gain, n=length, axis=-1)
        # relaxed stop weight s(f) = sigmoid(k (width/2 - |f - c|) / df); output = x - filt(x, s)
        df = freqs[1] - freqs[0] if len(freqs) > 1 else 1.0
        z = k * (width / 2.0 - np.abs(freqs - center)) / df
        sig = expit(z)
        ds_dm = sig * (1.0 - sig) * k * (nyq / 4.0) / df
        dout_dm = -np.fft.irfft(np.fft.rfft(x, axis=-1) * ds_dm, n=length, axis=-1)
        return gx, float(np.sum(g * dout_dm))


class _FrequencyShift(_Op):
    continuous = True

    def forward(self, x, m, gen, s):
        length = x.shape[1]
        t = np.arange(length) / s.sample_rate_hz
        phi = 2.0 * np.pi * m * s.max_shift_hz * t
        hx = _hilbert_imag(x)
        cos, sin = np.cos(phi), np.sin(phi)
        out = x * cos - hx * sin
        return out, (x, hx, cos, sin, 2.0 * np.pi * s.max_shift_hz * t)

    def vjp(self, ctx, g):
        x, hx, cos, sin, dphi_dm = ctx
        # hilbert operator is antisymmetric, so its adjoint is its negation
        gx = g * cos + _hilbert_imag(g * sin)
        dout = (-x * sin - hx * cos) * dphi_dm
        return gx, float(np.sum(g * dout))


class _FftSurrogate(_Op):
    def forward(self, x, m, gen, s):
        length = x.shape[1]
        n_bins = length // 2 + 1
        # bins strictly between DC and Nyquist receive random phases (shared across channels)
        last = n_bins - 1 if length % 2 == 0 else n_bins
        phases = np.zeros(n_bins)
        phases[1:last] = m * gen.uniform(0.0, 2.0 * np.pi, size=max(0, last - 1))
        rot = np.exp(1j * phases)
        out = np.fft.irfft(np.fft.rfft(x, axis=-1) * rot, n=length, axis=-1)
        return out, (rot, length)

    def vjp(self, ctx, g):
        rot, length = ctx
        return np.fft.irfft(np.fft.rfft(g, axis=-1) * np.conj(rot), n=length, axis=-1), 0.0


_OPS: dict[TransformId, _Op] = {
    TransformId.IDENTITY: _Identity(),
    TransformId.TIME_REVERSE: _TimeReverse(),
    TransformId.FFT_SURROGATE: _FftSurrogate(),
    TransformId.CHANNEL_DROPOUT: _ChannelDropout(),
    TransformId.CHANNEL_SHUFFLE: _ChannelShuffle(),
    TransformId.TIME_MASK: _TimeMask(),
    TransformId.GAUSSIAN_NOISE: _GaussianNoise(),
    TransformId.RANDOM_BANDSTOP: _RandomBandstop(),
    TransformId.SIGN_FLIP: _SignFlip(),
    TransformId.FREQUENCY_SHIFT: _FrequencyShift(),
    TransformId.SCALING: _Scaling(),
}


def _check(x: np.ndarray, m: float) -> None:
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"magnitude must lie in [0, 1], got {m}")
    if x.ndim != 2:
        raise ValueError(f"signal must be (channels, length), got shape {x.shape}")


def apply(
    t: TransformId | str,
    x: np.ndarray,
    m: float,
    rng: RngStream,
    settings: TransformSettings = DEFAULT_SETTINGS,
) -> np.ndarray:
    """Apply transform ``t`` with magnitude ``m`` to a ``(channels, length)`` signal."""
    x = np.asarray(x, dtype=np.float64)
    m = float(m)
    _check(x, m)
    out, _ = _OPS[TransformId(t)].forward(x, m, rng.generator(), settings)
    return out


class _TransformFn(Function):
    def forward(self, x, m, op, gen, settings):
        self.op = op
        out, self.ctx = op.forward(x, float(m), gen, settings)
        return out

    def backward(self, g):
        gx, gm = self.op.vjp(self.ctx, g)
        return gx, np.asarray(gm, dtype=np.float64)


def apply_differentiable(
    t: TransformId | str,
    x: Tensor,
    m: Tensor,
    rng: RngStream,
    settings: TransformSettings = DEFAULT_SETTINGS,
) -> Tensor:
    """Graph-recording counterpart of :func:`apply` with the same forward value."""
    x, m = as_tensor(x), as_tensor(m)
    if m.size != 1:
        raise ValueError("magnitude must be a scalar tensor")
    _check(x.data, float(m.data.reshape(-1)[0]))
    return _TransformFn.apply(
        x, m.reshape(()) if m.shape != () else m,
        op=_OPS[TransformId(t)], gen=rng.generator(), settings=settings,
    )


def apply_sequence(
    ops: Sequence[tuple[TransformId, float]],
    x: np.ndarray,
    rng: RngStream,
    settings: TransformSettings = DEFAULT_SETTINGS,
) -> np.ndarray:
    """Apply ``ops`` in order; slot ``i`` draws from ``rng.child(i)``."""
    out = np.asarray(x, dtype=np.float64)
    for i, (t, m) in enumerate(ops):
        out = apply(t, out, m, rng.child(i), settings)
    return out


def perturb_magnitude(m: float, delta: float, gen: np.random.Generator) -> float:
    """m' = clamp(m + U(-delta, delta), 0, 1)."""
    if delta == 0:
        return float(m)
    return float(min(1.0, max(0.0, m + gen.uniform(-delta, delta))))
