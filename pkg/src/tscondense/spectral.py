"""Differentiable DFT and frequency-domain augmentations.

The transform is realized as multiplication by precomputed cosine/sine
matrices, so it is linear, exactly adjoint, and recorded on the autodiff tape
like any other op. Only the non-redundant half-spectrum of a real signal is
kept: floor(L/2)+1 complex bins stored as separate real/imaginary tensors.

Matrix entries are built from exact integer angle reduction (k*t mod L), so
round-trips stay below 1e-9 even for series of length several thousand.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .autodiff import (
    Tensor,
    add,
    add_const,
    broadcast_to,
    concat,
    leaf,
    matmul,
    mean_axes,
    mul,
    narrow,
    neg,
    pow_const,
    relu,
    reshape,
    sub,
)
from .errors import NumericalError, ShapeError

_MAG_EPS = 1e-24  # under the sqrt in magnitudes; keeps zero bins differentiable


@dataclass
class Spectrum:
    """Half-spectrum of a real series; re/im shaped (..., channels, bins)."""

    channels: int
    length: int
    re: Tensor
    im: Tensor

    @property
    def bins(self) -> int:
        return self.length // 2 + 1

    def magnitudes(self) -> np.ndarray:
        """Detached per-bin magnitudes."""
        return np.sqrt(self.re.data**2 + self.im.data**2)

    def validate(self) -> None:
        if self.re.data.shape != self.im.data.shape:
            raise ShapeError("re/im shape mismatch")
        if self.re.data.shape[-1] != self.bins or self.re.data.shape[-2] != self.channels:
            raise ShapeError(
                f"coefficient shape {self.re.data.shape} does not match "
                f"{self.channels} channels x {self.bins} bins"
            )
        scale = 1.0 + float(np.max(np.abs(self.re.data), initial=0.0))
        bad = float(np.max(np.abs(self.im.data[..., 0]), initial=0.0))
        if self.length % 2 == 0:
            bad = max(bad, float(np.max(np.abs(self.im.data[..., -1]), initial=0.0)))
        if bad > 1e-9 * scale:
            raise NumericalError("spectrum violates Hermitian symmetry (imag at bin 0 or L/2)")


@lru_cache(maxsize=32)
def _dft_matrices(length: int):
    k = np.arange(length // 2 + 1)
    t = np.arange(length)
    phase_idx = (t[:, None] * k[None, :]) % length  # exact integer reduction
    ang = 2.0 * np.pi * phase_idx / length
    cos_f = np.cos(ang)  # (L, K)
    sin_f = -np.sin(ang)
    sin_f[:, 0] = 0.0
    if length % 2 == 0:
        sin_f[:, -1] = 0.0
    weights = np.full(length // 2 + 1, 2.0)
    weights[0] = 1.0
    if length % 2 == 0:
        weights[-1] = 1.0
    inv_cos = (weights[:, None] * np.cos(ang).T) / length  # (K, L)
    inv_sin = -(weights[:, None] * np.sin(ang).T) / length
    inv_sin[0, :] = 0.0
    if length % 2 == 0:
        inv_sin[-1, :] = 0.0
    return cos_f, sin_f, inv_cos, inv_sin, weights


def parseval_weights(length: int) -> np.ndarray:
    """Mirroring weights w_k (1 at DC and Nyquist, else 2)."""
    return _dft_matrices(length)[4].copy()


def _mat_apply(x, mat: np.ndarray) -> Tensor:
    """Apply (L_in, L_out) matrix along the last axis of a tensor."""
    shape = x.data.shape if isinstance(x, Tensor) else np.asarray(x).shape
    lead = shape[:-1]
    flat = reshape(x, (int(np.prod(lead)) if lead else 1, shape[-1]))
    out = matmul(flat, mat)
    return reshape(out, lead + (mat.shape[1],))


def dft_forward(series) -> Spectrum:
    """Unnormalized forward DFT of a real series (..., channels, L)."""
    data = series.data if isinstance(series, Tensor) else np.asarray(series, dtype=np.float64)
    if data.ndim < 2:
        raise ShapeError(f"dft_forward expects (..., channels, L), got {data.shape}")
    length = data.shape[-1]
    if length < 2:
        raise ShapeError("series length must be >= 2")
    if not isinstance(series, Tensor):
        if not np.all(np.isfinite(data)):
            raise NumericalError("non-finite input to dft_forward")
        series = leaf(data)
    cos_f, sin_f, _, _, _ = _dft_matrices(length)
    return Spectrum(
        channels=data.shape[-2],
        length=length,
        re=_mat_apply(series, cos_f),
        im=_mat_apply(series, sin_f),
    )


def dft_inverse(spec: Spectrum) -> Tensor:
    """Real series recovering dft_forward input exactly (1/L normalization)."""
    spec.validate()
    _, _, inv_cos, inv_sin, _ = _dft_matrices(spec.length)
    return add(_mat_apply(spec.re, inv_cos), _mat_apply(spec.im, inv_sin))


def low_pass(spec: Spectrum, keep_ratio: float) -> Spectrum:
    """Zero all bins at or above ceil(keep_ratio * bins); differentiable mask."""
    if not 0.0 < keep_ratio <= 1.0:
        raise ShapeError(f"keep_ratio must be in (0, 1], got {keep_ratio}")
    bins = spec.bins
    cutoff = int(np.ceil(keep_ratio * bins))
    mask = np.zeros(spec.re.data.shape)
    mask[..., :cutoff] = 1.0
    return Spectrum(spec.channels, spec.length, mul(spec.re, mask), mul(spec.im, mask))


def perturb_phase(spec: Spectrum, sigma: float, rng: np.random.Generator) -> Spectrum:
    """Rotate each bin's phase by independent N(0, sigma^2) noise.

    The rotation angles are constants; bins 0 and (even L) L/2 stay real, so
    magnitudes there are untouched bit-exactly.
    """
    if sigma < 0:
        raise ShapeError("sigma must be >= 0")
    delta = rng.normal(0.0, sigma, size=spec.re.data.shape) if sigma > 0 else np.zeros(
        spec.re.data.shape
    )
    delta[..., 0] = 0.0
    if spec.length % 2 == 0:
        delta[..., -1] = 0.0
    cos_d, sin_d = np.cos(delta), np.sin(delta)
    cos_d[delta == 0.0] = 1.0
    sin_d[delta == 0.0] = 0.0
    re = sub(mul(spec.re, cos_d), mul(spec.im, sin_d))
    im = add(mul(spec.re, sin_d), mul(spec.im, cos_d))
    return Spectrum(spec.channels, spec.length, re, im)


def perturb_magnitude(spec: Spectrum, sigma_rel: float, rng: np.random.Generator) -> Spectrum:
    """Shift each bin magnitude by Gaussian noise, clamped at zero.

    Raw draws are N(0, 1) constants scaled by sigma_rel times the sample's
    mean magnitude, so |X| -> max(0, |X| + eps) with eps ~ N(0,
    (sigma_rel*mean|X|)^2). Phases are preserved; the common positive factor
    keeps the whole map differentiable w.r.t. the input coefficients.
    """
    if sigma_rel < 0:
        raise ShapeError("sigma_rel must be >= 0")
    shape = spec.re.data.shape
    if sigma_rel == 0:
        return Spectrum(spec.channels, spec.length, spec.re, spec.im)
    unit = rng.normal(0.0, 1.0, size=shape)
    # magnitude on the tape, with a tiny floor so zero bins stay differentiable
    mag = pow_const(
        add_const(add(mul(spec.re, spec.re), mul(spec.im, spec.im)), _MAG_EPS), 0.5
    )
    mean_mag = mean_axes(mag, (-2, -1), keepdims=True)
    eps = mul(broadcast_to(mean_mag, shape), unit * sigma_rel)
    factor = mul(relu(add(mag, eps)), pow_const(mag, -1.0))
    return Spectrum(
        spec.channels, spec.length, mul(spec.re, factor), mul(spec.im, factor)
    )


def freq_input(spec: Spectrum) -> Tensor:
    """Encode a spectrum as a real tensor: real parts then imaginary parts.

    (..., C, bins) re/im become (..., 2C, bins); channels 0..C-1 carry the
    real parts, channels C..2C-1 the imaginary parts. This layout is
    normative for frequency-domain trajectories (see README).
    """
    return concat([spec.re, spec.im], axis=-2)


def spectrum_from_tensor(tensor, length: int) -> Spectrum:
    """Inverse of freq_input given the original series length."""
    data = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
    channels2 = data.shape[-2]
    if channels2 % 2 != 0:
        raise ShapeError("stacked spectrum tensor must have an even channel count")
    if data.shape[-1] != length // 2 + 1:
        raise ShapeError(
            f"bin count {data.shape[-1]} does not match length {length}"
        )
    c = channels2 // 2
    if not isinstance(tensor, Tensor):
        tensor = leaf(data)
    re = narrow(tensor, -2, 0, c)
    im = narrow(tensor, -2, c, c)
    return Spectrum(c, length, re, im)


def spectral_energy(values: np.ndarray) -> np.ndarray:
    """Per-sample spectral energy sum_k w_k |X_k|^2 (detached helper)."""
    spec = dft_forward(np.asarray(values, dtype=np.float64))
    w = parseval_weights(spec.length)
    mags2 = spec.re.data**2 + spec.im.data**2
    return (mags2 * w).sum(axis=(-2, -1))


def retained_energy_fraction(values: np.ndarray, keep_ratio: float) -> float:
    """Fraction of spectral energy kept by the low-pass filter, dataset-wide."""
    spec = dft_forward(np.asarray(values, dtype=np.float64))
    w = parseval_weights(spec.length)
    mags2 = (spec.re.data**2 + spec.im.data**2) * w
    cutoff = int(np.ceil(keep_ratio * spec.bins))
    total = float(mags2.sum())
    if total == 0.0:
        return 1.0
    return float(mags2[..., :cutoff].sum() / total)
