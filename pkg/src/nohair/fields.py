"""Real fields on a periodic 3-torus grid.

A symmetric tensor stores its 6 independent components in the order
xx, xy, xz, yy, yz, zz; access through component(a, b) is symmetric by
construction.  Field values are plain float64 numpy arrays so callers
can use numpy arithmetic directly on .values.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError

SYM_COMPS = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))
SYM_INDEX = {(a, b): i for i, (a, b) in enumerate(SYM_COMPS)}
SYM_INDEX.update({(b, a): i for i, (a, b) in enumerate(SYM_COMPS)})


@dataclass(frozen=True)
class Grid3:
    """Periodic cubic grid: n points per axis (power of two), box length L."""

    n: int
    box_len: float = 2.0 * math.pi

    def __post_init__(self):
        if self.n < 4 or (self.n & (self.n - 1)) != 0:
            raise InputError("grid size must be a power of two, at least 4")
        if self.box_len <= 0.0:
            raise InputError("box length must be positive")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n, self.n, self.n)

    @property
    def dk(self) -> float:
        """Fundamental wavenumber 2 pi / L."""
        return 2.0 * math.pi / self.box_len

    def coords(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Broadcastable coordinate arrays along each axis."""
        x = np.arange(self.n) * (self.box_len / self.n)
        return x[:, None, None], x[None, :, None], x[None, None, :]


def _check_values(grid: Grid3, values: np.ndarray, ncomp: int | None) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    expected = grid.shape if ncomp is None else (ncomp,) + grid.shape
    if values.shape != expected:
        raise InputError(f"field values have shape {values.shape}, expected {expected}")
    if not np.all(np.isfinite(values)):
        raise InputError("field values contain non-finite entries")
    return values


@dataclass
class ScalarField:
    grid: Grid3
    values: np.ndarray

    def __post_init__(self):
        self.values = _check_values(self.grid, self.values, None)

    @classmethod
    def zeros(cls, grid: Grid3) -> "ScalarField":
        return cls(grid, np.zeros(grid.shape))

    def copy(self) -> "ScalarField":
        return ScalarField(self.grid, self.values.copy())

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values)))


@dataclass
class VectorField:
    grid: Grid3
    values: np.ndarray  # (3, n, n, n)

    def __post_init__(self):
        self.values = _check_values(self.grid, self.values, 3)

    @classmethod
    def zeros(cls, grid: Grid3) -> "VectorField":
        return cls(grid, np.zeros((3,) + grid.shape))

    def component(self, a: int) -> np.ndarray:
        return self.values[a]

    def copy(self) -> "VectorField":
        return VectorField(self.grid, self.values.copy())

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values)))


@dataclass
class SymTensorField:
    grid: Grid3
    values: np.ndarray  # (6, n, n, n) in SYM_COMPS order

    def __post_init__(self):
        self.values = _check_values(self.grid, self.values, 6)

    @classmethod
    def zeros(cls, grid: Grid3) -> "SymTensorField":
        return cls(grid, np.zeros((6,) + grid.shape))

    @classmethod
    def from_matrix(cls, grid: Grid3, mat: np.ndarray,
                    check_symmetry: bool = True) -> "SymTensorField":
        """Build from a full (3, 3, n, n, n) array."""
        if check_symmetry:
            asym = np.max(np.abs(mat - mat.transpose(1, 0, 2, 3, 4)))
            scale = np.max(np.abs(mat)) or 1.0
            if asym > 1e-12 * scale:
                raise InputError("matrix field is not symmetric")
        comps = np.stack([0.5 * (mat[a, b] + mat[b, a]) for a, b in SYM_COMPS])
        return cls(grid, comps)

    def component(self, a: int, b: int) -> np.ndarray:
        return self.values[SYM_INDEX[(a, b)]]

    def as_matrix(self) -> np.ndarray:
        """Full (3, 3, n, n, n) array (copies the shared components)."""
        mat = np.empty((3, 3) + self.grid.shape)
        for a in range(3):
            for b in range(3):
                mat[a, b] = self.values[SYM_INDEX[(a, b)]]
        return mat

    def trace(self) -> np.ndarray:
        return self.values[0] + self.values[3] + self.values[5]

    def copy(self) -> "SymTensorField":
        return SymTensorField(self.grid, self.values.copy())

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values)))


Field = ScalarField | VectorField | SymTensorField

_MAGIC = b"NHFIELD1\n"


def save_field(path, field: Field, tau: float = 0.0) -> None:
    """Flat binary snapshot: magic, one JSON header line, row-major float64."""
    values = field.values if field.values.ndim == 4 else field.values[None]
    header = {
        "n": field.grid.n,
        "box_len": field.grid.box_len,
        "ncomp": int(values.shape[0]),
        "tau": float(tau),
    }
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def load_field(path) -> tuple[Field, float]:
    """Inverse of save_field; the component count selects the field type."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise InputError(f"{path}: not a field snapshot")
        header = json.loads(fh.readline().decode())
        grid = Grid3(header["n"], header["box_len"])
        ncomp = header["ncomp"]
        raw = np.frombuffer(fh.read(), dtype="<f8").astype(float)
    values = raw.reshape((ncomp,) + grid.shape)
    if ncomp == 1:
        return ScalarField(grid, values[0]), header["tau"]
    if ncomp == 3:
        return VectorField(grid, values), header["tau"]
    if ncomp == 6:
        return SymTensorField(grid, values), header["tau"]
    raise InputError(f"{path}: unsupported component count {ncomp}")
