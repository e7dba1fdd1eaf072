import numpy as np
import pytest

from nohair.fields import Grid3, ScalarField, SymTensorField, VectorField
from nohair.spectral import irfft, rfft


def band_limit_mask(n: int, kmax: int) -> np.ndarray:
    idx = np.abs(np.fft.fftfreq(n, d=1.0 / n))
    mx = (idx <= kmax)[:, None, None]
    my = (idx <= kmax)[None, :, None]
    mz = (np.arange(n // 2 + 1) <= kmax)[None, None, :]
    return mx & my & mz


def random_scalar(grid: Grid3, rng, kmax: int | None = None,
                  amplitude: float = 1.0) -> ScalarField:
    """Random real scalar field band-limited to |k_i| <= kmax, unit-normalized."""
    kmax = kmax if kmax is not None else grid.n // 3
    spec = rfft(grid, rng.standard_normal(grid.shape))
    spec *= band_limit_mask(grid.n, kmax)
    values = irfft(grid, spec)
    peak = np.max(np.abs(values)) or 1.0
    return ScalarField(grid, amplitude * values / peak)


def random_vector(grid: Grid3, rng, kmax: int | None = None,
                  amplitude: float = 1.0) -> VectorField:
    comps = [random_scalar(grid, rng, kmax, amplitude).values for _ in range(3)]
    return VectorField(grid, np.stack(comps))


def random_symtensor(grid: Grid3, rng, kmax: int | None = None,
                     amplitude: float = 1.0, tracefree: bool = False) -> SymTensorField:
    comps = np.stack([random_scalar(grid, rng, kmax, amplitude).values
                      for _ in range(6)])
    field = SymTensorField(grid, comps)
    if tracefree:
        third = field.trace() / 3.0
        for i in (0, 3, 5):
            field.values[i] -= third
    return field


@pytest.fixture
def rng():
    return np.random.default_rng(2024)
