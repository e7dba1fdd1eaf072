"""Pseudo-spectral operators and the scalar-vector-tensor decomposition.

Derivatives act on the band-limited trigonometric interpolant, so they
are exact per Fourier mode.  Real fields are kept in half-spectrum
(rfftn) storage internally.  For odd derivative counts along an axis the
Nyquist wavenumber is zeroed, which keeps the result real; fields built
by this package are band-limited below Nyquist so nothing is lost.

The SVT split sends a symmetric tensor T to
    T_ab = trace * delta_ab + (grad_a grad_b - delta_ab lap / 3) chi
           + grad_a Z_b + grad_b Z_a + pi_ab
with div Z = 0 and pi transverse-tracefree.  Per Fourier mode k != 0 the
parts are orthogonal projections built on P_ab = delta_ab - k_a k_b/k^2;
the k = 0 tracefree part is assigned to pi (a constant tensor is
trivially transverse) and the chi zero mode is fixed to 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import InputError
from .fields import Field, Grid3, ScalarField, SymTensorField, VectorField, SYM_COMPS

_TWO_THIRDS_GUARD = 1e-12


@lru_cache(maxsize=8)
def _k_arrays(n: int, box_len: float):
    """(k_full, k_odd) wavevector component arrays on the rfftn layout.

    k_odd zeroes the Nyquist wavenumber and must be used for odd powers
    of a derivative along that axis.
    """
    dk = 2.0 * np.pi / box_len
    kx = np.fft.fftfreq(n, d=1.0 / n) * dk
    kz = np.arange(n // 2 + 1) * dk
    k_full = (kx[:, None, None], kx[None, :, None], kz[None, None, :])
    kx_odd = kx.copy()
    kz_odd = kz.copy()
    kx_odd[n // 2] = 0.0
    kz_odd[-1] = 0.0
    k_odd = (kx_odd[:, None, None], kx_odd[None, :, None], kz_odd[None, None, :])
    return k_full, k_odd


@lru_cache(maxsize=8)
def _k_vectors(n: int, box_len: float) -> np.ndarray:
    """Materialized (3, n, n, n//2+1) wavevector array (Nyquist zeroed)."""
    _, k_odd = _k_arrays(n, box_len)
    shape = (n, n, n // 2 + 1)
    out = np.empty((3,) + shape)
    for a in range(3):
        out[a] = np.broadcast_to(k_odd[a], shape)
    return out


def rfft(grid: Grid3, values: np.ndarray) -> np.ndarray:
    return np.fft.rfftn(values, axes=(-3, -2, -1))

def irfft(grid: Grid3, spec: np.ndarray) -> np.ndarray:
    return np.fft.irfftn(spec, s=grid.shape, axes=(-3, -2, -1))


def _derivative_factor(grid: Grid3, multi_index: tuple[int, ...]) -> np.ndarray:
    k_full, k_odd = _k_arrays(grid.n, grid.box_len)
    counts = [0, 0, 0]
    for axis in multi_index:
        if axis not in (0, 1, 2):
            raise InputError(f"derivative axis must be 0, 1 or 2, got {axis}")
        counts[axis] += 1
    factor = np.ones((1, 1, 1), dtype=complex)
    for axis, c in enumerate(counts):
        if c == 0:
            continue
        k = k_odd[axis] if c % 2 else k_full[axis]
        factor = factor * (1j * k) ** c
    return factor


def spectral_derivative(field: Field, multi_index) -> Field:
    """Comma-derivative of order <= 2, exact on the band-limited interpolant."""
    multi_index = tuple(int(axis) for axis in np.atleast_1d(multi_index))
    if len(multi_index) > 2:
        raise InputError("spectral derivatives support order <= 2 only")
    factor = _derivative_factor(field.grid, multi_index)
    out = irfft(field.grid, factor * rfft(field.grid, field.values))
    return type(field)(field.grid, out)


def laplacian(field: Field) -> Field:
    k_full, _ = _k_arrays(field.grid.n, field.grid.box_len)
    k2 = k_full[0] ** 2 + k_full[1] ** 2 + k_full[2] ** 2
    out = irfft(field.grid, -k2 * rfft(field.grid, field.values))
    return type(field)(field.grid, out)


def gradient(field: ScalarField) -> VectorField:
    _, k_odd = _k_arrays(field.grid.n, field.grid.box_len)
    spec = rfft(field.grid, field.values)
    comps = [irfft(field.grid, 1j * k_odd[a] * spec) for a in range(3)]
    return VectorField(field.grid, np.stack(comps))


def divergence(field: VectorField) -> ScalarField:
    _, k_odd = _k_arrays(field.grid.n, field.grid.box_len)
    total = np.zeros((field.grid.n, field.grid.n, field.grid.n // 2 + 1), dtype=complex)
    for a in range(3):
        total += 1j * k_odd[a] * rfft(field.grid, field.values[a])
    return ScalarField(field.grid, irfft(field.grid, total))


def tensor_divergence(field: SymTensorField) -> VectorField:
    """grad^a T_ab for a symmetric tensor."""
    _, k_odd = _k_arrays(field.grid.n, field.grid.box_len)
    spec = rfft(field.grid, field.values)
    out = np.empty((3,) + field.grid.shape)
    for b in range(3):
        acc = np.zeros_like(spec[0])
        for a in range(3):
            acc += 1j * k_odd[a] * spec[_sym_idx(a, b)]
        out[b] = irfft(field.grid, acc)
    return VectorField(field.grid, out)


def _sym_idx(a: int, b: int) -> int:
    from .fields import SYM_INDEX
    return SYM_INDEX[(a, b)]


def sym_gradient(field: VectorField) -> SymTensorField:
    """2 grad_(a Z_b) = grad_a Z_b + grad_b Z_a."""
    _, k_odd = _k_arrays(field.grid.n, field.grid.box_len)
    spec = [rfft(field.grid, field.values[a]) for a in range(3)]
    comps = np.empty((6,) + field.grid.shape)
    for i, (a, b) in enumerate(SYM_COMPS):
        comps[i] = irfft(field.grid, 1j * (k_odd[a] * spec[b] + k_odd[b] * spec[a]))
    return SymTensorField(field.grid, comps)


def tracefree_hessian(field: ScalarField) -> SymTensorField:
    """(grad_a grad_b - delta_ab lap / 3) applied to a scalar.

    Uses the Nyquist-zeroed wavevectors throughout so that it is the exact
    spectral inverse used by the SVT decomposition.
    """
    _, k_odd = _k_arrays(field.grid.n, field.grid.box_len)
    spec = rfft(field.grid, field.values)
    k2 = k_odd[0] ** 2 + k_odd[1] ** 2 + k_odd[2] ** 2
    comps = np.empty((6,) + field.grid.shape)
    for i, (a, b) in enumerate(SYM_COMPS):
        if a == b:
            term = (-k_odd[a] ** 2 + k2 / 3.0) * spec
        else:
            term = -k_odd[a] * k_odd[b] * spec
        comps[i] = irfft(field.grid, term)
    return SymTensorField(field.grid, comps)


def dealias(field: Field) -> Field:
    """2/3-rule truncation, applied before forming quadratic products."""
    grid = field.grid
    keep = _dealias_mask(grid.n)
    spec = rfft(grid, field.values)
    spec *= keep
    return type(field)(grid, irfft(grid, spec))


@lru_cache(maxsize=8)
def _dealias_mask(n: int) -> np.ndarray:
    cut = n // 3
    idx = np.abs(np.fft.fftfreq(n, d=1.0 / n))
    mask_x = (idx <= cut)[:, None, None]
    mask_y = (idx <= cut)[None, :, None]
    mask_z = (np.arange(n // 2 + 1) <= cut)[None, None, :]
    return (mask_x & mask_y & mask_z).astype(float)


def transverse_projection(field: VectorField) -> VectorField:
    """Divergence-free (transverse) part of a vector field; keeps the mean."""
    grid = field.grid
    K = _k_vectors(grid.n, grid.box_len)
    k2 = np.einsum("axyz,axyz->xyz", K, K)
    safe_k2 = np.where(k2 == 0.0, 1.0, k2)
    khat = K / np.sqrt(safe_k2)
    spec = rfft(grid, field.values)
    longitudinal = np.einsum("axyz,axyz->xyz", khat, spec)
    spec = spec - khat * longitudinal
    return VectorField(grid, irfft(grid, spec))


def resample(field: Field, n_new: int) -> Field:
    """Evaluate the band-limited interpolant on an n_new^3 grid.

    Spectral zero padding; requires the field to carry no Nyquist content
    (true for everything this package constructs).
    """
    grid = field.grid
    if n_new < grid.n:
        raise InputError("resample only refines")
    batched = field.values if field.values.ndim == 4 else field.values[None]
    spec = np.fft.fftn(batched, axes=(-3, -2, -1))
    freqs = np.fft.fftfreq(grid.n, d=1.0 / grid.n).astype(int)
    target = np.where(freqs < 0, freqs + n_new, freqs)
    out_spec = np.zeros(batched.shape[:1] + (n_new,) * 3, dtype=complex)
    out_spec[:, target[:, None, None], target[None, :, None], target[None, None, :]] = spec
    scale = (n_new / grid.n) ** 3
    values = np.fft.ifftn(out_spec, axes=(-3, -2, -1)).real * scale
    if field.values.ndim == 3:
        values = values[0]
    new_grid = Grid3(n_new, grid.box_len)
    return type(field)(new_grid, values)


def strip_nyquist(field: Field) -> Field:
    """Remove Nyquist-plane content so the field is cleanly band-limited."""
    n = field.grid.n
    spec = rfft(field.grid, field.values)
    spec[..., n // 2, :, :] = 0.0
    spec[..., :, n // 2, :] = 0.0
    spec[..., :, :, n // 2] = 0.0
    return type(field)(field.grid, irfft(field.grid, spec))


# ---------------------------------------------------------------------------
# Scalar-vector-tensor decomposition
# ---------------------------------------------------------------------------

@dataclass
class SVTParts:
    """trace (tr T / 3), scalar potential chi, transverse vector Z, TT tensor pi."""

    trace: ScalarField
    chi: ScalarField
    Z: VectorField
    pi: SymTensorField


def svt_decompose(T: SymTensorField) -> SVTParts:
    grid = T.grid
    if not np.all(np.isfinite(T.values)):
        raise InputError("NaN in input tensor")
    n = grid.n
    spec6 = rfft(grid, T.values)
    trace_hat = (spec6[0] + spec6[3] + spec6[5]) / 3.0

    # full 3x3 spectral tensor of the tracefree part
    shape = trace_hat.shape
    S = np.empty((3, 3) + shape, dtype=complex)
    for a in range(3):
        for b in range(3):
            S[a, b] = spec6[_sym_idx(a, b)]
        S[a, a] -= trace_hat

    K = _k_vectors(n, grid.box_len)
    k2 = np.einsum("axyz,axyz->xyz", K, K)
    zero_k = k2 == 0.0  # true zero mode, plus pure-Nyquist modes treated alike
    safe_k2 = np.where(zero_k, 1.0, k2)
    khat = K / np.sqrt(safe_k2)

    # scalar potential: khat khat : S = -(2/3) k^2 chi_hat
    kkS = np.einsum("axyz,bxyz,abxyz->xyz", khat, khat, S)
    chi_hat = -1.5 * kkS / safe_k2
    chi_hat[zero_k] = 0.0

    # vector: w_b = khat_a S_ab; Z_hat = -i (w - khat (khat.w)) / k
    w = np.einsum("axyz,abxyz->bxyz", khat, S)
    w_long = np.einsum("bxyz,bxyz->xyz", khat, w)
    v = w - khat * w_long
    Z_hat = -1j * v / np.sqrt(safe_k2)
    Z_hat[:, zero_k] = 0.0

    # TT part: P_ac P_bd S_cd - P_ab (P_cd S_cd) / 2 with P = delta - khat khat.
    # S is tracefree, so P:S = -khat khat : S.
    PS = S - np.einsum("axyz,cxyz,cbxyz->abxyz", khat, khat, S)
    PSP = PS - np.einsum("adxyz,bxyz,dxyz->abxyz", PS, khat, khat)
    pi_full = PSP
    for a in range(3):
        pi_full[a, a] += 0.5 * kkS
    pi_full -= 0.5 * np.einsum("xyz,axyz,bxyz->abxyz", kkS, khat, khat)
    # zero mode: the constant tracefree part belongs to pi
    pi_full[:, :, 0, 0, 0] = S[:, :, 0, 0, 0]

    pi6 = np.stack([pi_full[a, b] for a, b in SYM_COMPS])
    return SVTParts(
        trace=ScalarField(grid, irfft(grid, trace_hat)),
        chi=ScalarField(grid, irfft(grid, chi_hat)),
        Z=VectorField(grid, irfft(grid, Z_hat)),
        pi=SymTensorField(grid, irfft(grid, pi6)),
    )


def svt_recompose(parts: SVTParts) -> SymTensorField:
    grid = parts.trace.grid
    for f in (parts.chi, parts.Z, parts.pi):
        if f.grid != grid:
            raise InputError("SVT parts live on different grids")
    out = tracefree_hessian(parts.chi).values
    out += sym_gradient(parts.Z).values
    out += parts.pi.values
    for i, (a, b) in enumerate(SYM_COMPS):
        if a == b:
            out[i] += parts.trace.values
    return SymTensorField(grid, out)
