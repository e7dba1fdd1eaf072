"""First-order perturbations: mode evolution, closed-form solutions, and
assembly of the metric perturbation gamma_ab.

In the synchronous gauge the surviving variables are the scalar phi, the
scalar potential chi of the tensor split, the transverse vector Z, and
the TT tensor pi.  The momentum constraint ties chi to phi mode by mode
(chi_hat' = 6 phi_hat' / k^2); the vector sector of that constraint is
not enforced (the evolved Z = C/a violates it) and is reported as a
diagnostic instead.

Closed-form scalar solutions come in two flavours.  The Bessel J/Y form
with |tau|^{3/2} arguments is exact only when the background density
coefficient is continued as an odd function of tau; the modified-Bessel
pair is exact for the physical positive density.  Both are provided and
both are used as oracles on their respective branches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .background import (
    AsymptoticBackground,
    BackgroundParams,
    BackgroundPoint,
    NumericalBackground,
)
from .errors import AliasingError, AmplitudeError, DomainError, InputError
from .fields import Grid3, ScalarField, SymTensorField, VectorField, SYM_COMPS
from .numerics import IntegratorSpec, bessel_i, bessel_jy, integrate_ode
from .spectral import (
    irfft,
    rfft,
    sym_gradient,
    tensor_divergence,
    tracefree_hessian,
    _k_arrays,
)

MODE_SPEC = IntegratorSpec(abs_tol=1e-13, rel_tol=1e-12)


# ---------------------------------------------------------------------------
# Gauge-constrained metric data
# ---------------------------------------------------------------------------

@dataclass
class PerturbedMetric:
    """Perturbation variables of one order in the synchronous gauge.

    The lapse perturbation psi and the shift potentials Phi, W are stored
    so the gauge condition is testable, and must be identically zero.
    """

    order: int
    psi: ScalarField
    Phi: ScalarField
    W: VectorField
    phi: ScalarField
    chi_ab: SymTensorField

    def __post_init__(self):
        if self.order < 1:
            raise InputError("perturbation order must be >= 1")
        for name, f in (("psi", self.psi), ("Phi", self.Phi), ("W", self.W)):
            if f.max_abs() != 0.0:
                raise InputError(f"synchronous gauge requires {name} = 0")

    @classmethod
    def synchronous(cls, order: int, phi: ScalarField,
                    chi_ab: SymTensorField) -> "PerturbedMetric":
        grid = phi.grid
        return cls(order, ScalarField.zeros(grid), ScalarField.zeros(grid),
                   VectorField.zeros(grid), phi, chi_ab)

    def gamma(self) -> SymTensorField:
        """gamma_ab = -2 phi delta_ab + chi_ab."""
        out = self.chi_ab.values.copy()
        for i, (a, b) in enumerate(SYM_COMPS):
            if a == b:
                out[i] -= 2.0 * self.phi.values
        return SymTensorField(self.phi.grid, out)


# ---------------------------------------------------------------------------
# Mode specifications and initial data
# ---------------------------------------------------------------------------

def _unit_frame(k_int: tuple[int, int, int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Deterministic orthonormal frame (khat, e1, e2) for a wavevector."""
    k = np.asarray(k_int, dtype=float)
    norm = np.linalg.norm(k)
    if norm == 0.0:
        raise InputError("mode wavevector must be nonzero")
    khat = k / norm
    trial = np.zeros(3)
    trial[int(np.argmin(np.abs(khat)))] = 1.0
    e1 = trial - khat * np.dot(trial, khat)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(khat, e1)
    return khat, e1, e2


def polarization_tensor(k_int, pol: str) -> np.ndarray:
    """Unit TT polarization tensor (3x3) for direction k: 'plus' or 'cross'."""
    _, e1, e2 = _unit_frame(tuple(k_int))
    if pol == "plus":
        return np.outer(e1, e1) - np.outer(e2, e2)
    if pol == "cross":
        return np.outer(e1, e2) + np.outer(e2, e1)
    raise InputError(f"unknown polarization {pol!r}")


@dataclass(frozen=True)
class ScalarModeSpec:
    k: tuple[int, int, int]
    phi0: float = 0.0
    dphi0: float = 0.0
    chi0: float = 0.0
    phase: float = 0.0


@dataclass(frozen=True)
class VectorModeSpec:
    k: tuple[int, int, int]
    amp: float = 0.0
    polarization: int = 0  # 0 or 1, selects e1/e2 of the mode frame
    phase: float = 0.0


@dataclass(frozen=True)
class TensorModeSpec:
    k: tuple[int, int, int]
    K_amp: float = 0.0
    F_amp: float = 0.0
    pol: str = "plus"
    phase: float = 0.0


@dataclass(frozen=True)
class Delta0Spec:
    constant: float = 0.0
    modes: tuple = ()  # (k, amp, phase) triples


@dataclass(frozen=True)
class PerturbationConfig:
    scalar_modes: tuple[ScalarModeSpec, ...] = ()
    vector_modes: tuple[VectorModeSpec, ...] = ()
    tensor_modes: tuple[TensorModeSpec, ...] = ()
    delta0: Delta0Spec = Delta0Spec()
    eps_max: float = 1e-2


class TensorMode:
    """One TT plane-wave mode: wavevector, constant K/F amplitudes, phase.

    K and F parametrize the initial data through the oscillate-and-settle
    closed form evaluated at tau0; on the full background the two time
    profiles are evolved numerically from that same initial data.
    """

    def __init__(self, grid: Grid3, k_int, K_amp: float, F_amp: float,
                 pol: str, phase: float = 0.0):
        self.k_int = tuple(int(v) for v in k_int)
        eps = polarization_tensor(self.k_int, pol)
        self.K = K_amp * eps
        self.F = F_amp * eps
        self.phase = float(phase)
        self.q = math.sqrt(sum(v * v for v in self.k_int)) * grid.dk
        khat, _, _ = _unit_frame(self.k_int)
        for name, amp in (("K", self.K), ("F", self.F)):
            if abs(np.trace(amp)) > 1e-12 * (np.max(np.abs(amp)) or 1.0):
                raise InputError(f"{name} amplitude is not tracefree")
            if np.max(np.abs(amp @ khat)) > 1e-12 * (np.max(np.abs(amp)) or 1.0):
                raise InputError(f"{name} amplitude is not transverse")

    def sym6(self, mat: np.ndarray) -> np.ndarray:
        return np.array([mat[a, b] for a, b in SYM_COMPS])


@dataclass
class FirstOrderFields:
    """Initial first-order data plus the snapshot used by the sources."""

    grid: Grid3
    tau0: float
    phi1: ScalarField
    phi1_prime: ScalarField
    chi1: ScalarField
    chi1_prime: ScalarField
    Z1: VectorField
    pi1_modes: tuple[TensorMode, ...]
    delta0: ScalarField
    snapshot0: SymTensorField = field(init=False)

    def __post_init__(self):
        self.snapshot0 = self._gamma0()

    def _gamma0(self) -> SymTensorField:
        out = tracefree_hessian(self.chi1).values
        out += sym_gradient(self.Z1).values
        for mode in self.pi1_modes:
            pattern = _mode_pattern(self.grid, mode.k_int, mode.phase)
            b1, b2, _, _ = tensor_mode_profiles(mode.q, self.tau0)
            amp6 = mode.sym6(mode.K) * b1 + mode.sym6(mode.F) * b2
            out += amp6[:, None, None, None] * pattern
        for i, (a, b) in enumerate(SYM_COMPS):
            if a == b:
                out[i] -= 2.0 * self.phi1.values
        return SymTensorField(self.grid, out)


def _mode_pattern(grid: Grid3, k_int, phase: float) -> np.ndarray:
    x, y, z = grid.coords()
    arg = grid.dk * (k_int[0] * x + k_int[1] * y + k_int[2] * z) + phase
    return np.cos(arg)


def _check_band(grid: Grid3, k_int) -> None:
    band = grid.n // 3
    if max(abs(int(v)) for v in k_int) > band:
        raise AliasingError(
            f"mode {tuple(k_int)} outside the dealiased band |k_i| <= {band}")


def poisson_potential(f: ScalarField) -> ScalarField:
    """Inverse-Laplacian convention: returns IFFT[ f_hat / k^2 ], zero mode 0."""
    k_full, _ = _k_arrays(f.grid.n, f.grid.box_len)
    k2 = k_full[0] ** 2 + k_full[1] ** 2 + k_full[2] ** 2
    safe = k2.copy()
    safe[0, 0, 0] = 1.0
    spec = rfft(f.grid, f.values) / safe
    spec[0, 0, 0] = 0.0
    return ScalarField(f.grid, irfft(f.grid, spec))


def init_first_order(config: PerturbationConfig, grid: Grid3,
                     tau0: float) -> FirstOrderFields:
    """Build first-order initial data from mode lists.

    The scalar sector is initialized with chi_hat' = 6 phi_hat' / k^2
    (the scalar part of the linearized momentum constraint).  Raises
    AmplitudeError when max |gamma(tau0)| exceeds eps_max.
    """
    phi0 = ScalarField.zeros(grid)
    dphi0 = ScalarField.zeros(grid)
    chi0 = ScalarField.zeros(grid)
    for m in config.scalar_modes:
        _check_band(grid, m.k)
        pattern = _mode_pattern(grid, m.k, m.phase)
        phi0.values += m.phi0 * pattern
        dphi0.values += m.dphi0 * pattern
        chi0.values += m.chi0 * pattern
    chi0_prime = ScalarField(grid, 6.0 * poisson_potential(dphi0).values)

    Z0 = VectorField.zeros(grid)
    for m in config.vector_modes:
        _check_band(grid, m.k)
        _, e1, e2 = _unit_frame(m.k)
        evec = (e1, e2)[m.polarization % 2]
        pattern = _mode_pattern(grid, m.k, m.phase)
        Z0.values += m.amp * evec[:, None, None, None] * pattern

    modes = []
    for m in config.tensor_modes:
        _check_band(grid, m.k)
        modes.append(TensorMode(grid, m.k, m.K_amp, m.F_amp, m.pol, m.phase))

    delta0 = ScalarField(grid, np.full(grid.shape, config.delta0.constant))
    for k, amp, phase in config.delta0.modes:
        _check_band(grid, k)
        delta0.values += amp * _mode_pattern(grid, k, phase)

    fields = FirstOrderFields(grid=grid, tau0=tau0, phi1=phi0, phi1_prime=dphi0,
                              chi1=chi0, chi1_prime=chi0_prime, Z1=Z0,
                              pi1_modes=tuple(modes), delta0=delta0)
    peak = fields.snapshot0.max_abs()
    if peak > config.eps_max:
        raise AmplitudeError(
            f"almost-RW violation: max |gamma(tau0)| = {peak:.3e} exceeds "
            f"eps_max = {config.eps_max:.3e}")
    return fields


# ---------------------------------------------------------------------------
# Closed-form solutions
# ---------------------------------------------------------------------------

def analytic_scalar_1(C1: float, C2: float, A: float, tau):
    """Scalar closed form C1 tau Y(2/3, z) + C2 tau J(2/3, z), z = (2/3) A |tau|^(3/2).

    Exact solution of the scalar mode equation on the continued-branch
    asymptotic background.  The J branch is O(tau^2) as tau -> 0-, the Y
    branch tends to a finite constant.
    """
    if A < 0.0:
        raise DomainError("A must be non-negative")
    if A == 0.0:
        raise DomainError("vacuum limit A=0 has no Bessel form; solutions are {1, tau^2}")
    taus = np.atleast_1d(np.asarray(tau, dtype=float))
    out = np.empty_like(taus)
    for i, t in enumerate(taus):
        z = (2.0 / 3.0) * A * abs(t) ** 1.5
        j, y = bessel_jy(2.0 / 3.0, z)
        out[i] = C1 * t * y + C2 * t * j
    return float(out[0]) if np.isscalar(tau) or np.asarray(tau).ndim == 0 else out


def analytic_scalar_1_physical(C1: float, C2: float, A: float, tau):
    """Modified-Bessel counterpart, exact for the physical positive density.

    C1 tau I(-2/3, z) + C2 tau I(2/3, z): the I(-2/3) branch tends to a
    constant as tau -> 0-, the I(2/3) branch is O(tau^2).
    """
    if A < 0.0:
        raise DomainError("A must be non-negative")
    if A == 0.0:
        raise DomainError("vacuum limit A=0 has no Bessel form; solutions are {1, tau^2}")
    taus = np.atleast_1d(np.asarray(tau, dtype=float))
    out = np.empty_like(taus)
    for i, t in enumerate(taus):
        z = (2.0 / 3.0) * A * abs(t) ** 1.5
        out[i] = C1 * t * bessel_i(-2.0 / 3.0, z) + C2 * t * bessel_i(2.0 / 3.0, z)
    return float(out[0]) if np.isscalar(tau) or np.asarray(tau).ndim == 0 else out


def analytic_scalar_1_prime(C1: float, C2: float, A: float, tau: float) -> float:
    """tau derivative of analytic_scalar_1.

    For z = (2/3) A |tau|^(3/2) and order 2/3 the product rule collapses,
    d/dtau [tau B_{2/3}(z)] = tau z' B_{-1/3}(z), which avoids the severe
    cancellation of the naive recurrence form.
    """
    if A <= 0.0:
        raise DomainError("A must be positive")
    t = float(tau)
    z = (2.0 / 3.0) * A * abs(t) ** 1.5
    dz = -A * math.sqrt(abs(t))  # d/dtau of (2/3) A |tau|^(3/2) for tau < 0
    j, y = bessel_jy(-1.0 / 3.0, z)
    return (C1 * y + C2 * j) * t * dz


def analytic_scalar_1_physical_prime(C1: float, C2: float, A: float, tau: float) -> float:
    """tau derivative of analytic_scalar_1_physical (same collapsed form)."""
    if A <= 0.0:
        raise DomainError("A must be positive")
    t = float(tau)
    z = (2.0 / 3.0) * A * abs(t) ** 1.5
    dz = -A * math.sqrt(abs(t))
    return (C1 * bessel_i(1.0 / 3.0, z) + C2 * bessel_i(-1.0 / 3.0, z)) * t * dz


def tensor_mode_profiles(q: float, tau):
    """The two tensor time profiles and their tau derivatives.

    b1 = sin(q tau) - q tau cos(q tau),   b1' = q^2 tau sin(q tau)
    b2 = cos(q tau) + q tau sin(q tau),   b2' = q^2 tau cos(q tau)
    Exact solutions of pi'' + 2(a'/a) pi' + q^2 pi = 0 for a'/a = -1/tau.
    """
    qt = q * np.asarray(tau, dtype=float)
    b1 = np.sin(qt) - qt * np.cos(qt)
    b2 = np.cos(qt) + qt * np.sin(qt)
    b1p = q * qt * np.sin(qt)
    b2p = q * qt * np.cos(qt)
    return b1, b2, b1p, b2p


def analytic_tensor_mode(q: float, K: np.ndarray, F: np.ndarray, tau: float) -> np.ndarray:
    """Per-mode tensor amplitude K (sin qt - qt cos qt) + F (cos qt + qt sin qt)."""
    K = np.asarray(K, dtype=float)
    F = np.asarray(F, dtype=float)
    if K.shape != F.shape:
        raise InputError("K and F must have the same shape")
    b1, b2, _, _ = tensor_mode_profiles(q, tau)
    return K * b1 + F * b2


def analytic_vector_1(C_field: VectorField, state) -> VectorField:
    """Vector closed form Z = C(x)/a; divergence-free input stays so."""
    a = state.a if hasattr(state, "a") else float(state)
    if a <= 0.0:
        raise InputError("scale factor must be positive")
    return VectorField(C_field.grid, C_field.values / a)


# ---------------------------------------------------------------------------
# Linear mode evolution (dual route to the closed forms)
# ---------------------------------------------------------------------------

def evolve_mode_ode(kind: str, q: float, init, background, tau_eval,
                    spec: IntegratorSpec | None = None) -> np.ndarray:
    """Integrate one linear mode ODE along conformal time.

    kind: 'scalar' (q ignored), 'vector' (first order), or 'tensor'.
    init: (value, derivative) for scalar/tensor, a bare value for vector.
    background: NumericalBackground or AsymptoticBackground; its co-state
    is integrated together with the mode so no interpolation enters.
    Returns the mode values sampled at tau_eval (derivative column too
    for second-order kinds).
    """
    if kind not in ("scalar", "vector", "tensor"):
        raise InputError(f"unknown mode kind {kind!r}")
    taus = np.asarray(tau_eval, dtype=float)
    if np.any(np.diff(taus) <= 0.0):
        raise InputError("tau_eval must be strictly increasing")
    ncs = background.co_state_dim
    if isinstance(background, NumericalBackground):
        if taus[0] != background.params.tau0 or taus[-1] >= 0.0:
            raise InputError("tau_eval must start at tau0 and lie within [tau0, 0)")

    if kind == "vector":
        y0 = np.concatenate([background.initial_costate(), np.atleast_1d(float(init))])
    else:
        value, deriv = init
        y0 = np.concatenate([background.initial_costate(), [float(value), float(deriv)]])

    def rhs(tau, y):
        s = y[:ncs]
        p = background.point(tau, s)
        dcs = background.costate_rhs(tau, s)
        if kind == "vector":
            return np.concatenate([dcs, [-p.hconf * y[ncs]]])
        v, d = y[ncs], y[ncs + 1]
        if kind == "scalar":
            acc = -p.hconf * d + 0.5 * p.rho_a2 * v
        else:
            acc = -2.0 * p.hconf * d - q * q * v
        return np.concatenate([dcs, [d, acc]])

    traj = integrate_ode(rhs, y0, (taus[0], taus[-1]), spec or MODE_SPEC, t_eval=taus)
    out = np.array([traj.sample(t)[ncs:] for t in taus])
    return out


# ---------------------------------------------------------------------------
# Co-evolved first-order system and gamma assembly
# ---------------------------------------------------------------------------

class FirstOrderSystem:
    """Compact dynamical representation of the first-order fields.

    State layout: [f, f', g, g'] + per tensor mode [cK, cK', cF, cF'].
    f and g are the two scalar basis profiles (phi = phi0 f + dphi0 g);
    the momentum-constraint relation propagates chi algebraically; the
    vector sector is the exact closed form C/a.  All spatial structure
    is cached once, so evaluating gamma and its two time derivatives at
    a stage time costs only a few grid-array multiplications.
    """

    def __init__(self, fields: FirstOrderFields, a_tau0: float):
        self.fields = fields
        self.a_tau0 = float(a_tau0)
        grid = fields.grid
        self.grid = grid
        # scalar-sector spatial caches
        self._phi0 = fields.phi1.values
        self._v0 = fields.phi1_prime.values
        p_phi = poisson_potential(fields.phi1)
        p_v = poisson_potential(fields.phi1_prime)
        self._p_phi = p_phi.values
        self._p_v = p_v.values
        self._D_chi0 = tracefree_hessian(fields.chi1).values
        self._D_pphi = tracefree_hessian(p_phi).values
        self._D_pv = tracefree_hessian(p_v).values
        # vector-sector caches (Z = Z0 a0/a)
        self._S = sym_gradient(fields.Z1).values
        self._Z0 = fields.Z1.values
        # tensor patterns
        self._patterns = [_mode_pattern(grid, m.k_int, m.phase)
                          for m in fields.pi1_modes]
        self._K6 = [m.sym6(m.K) for m in fields.pi1_modes]
        self._F6 = [m.sym6(m.F) for m in fields.pi1_modes]
        self.nstate = 4 + 4 * len(fields.pi1_modes)

    def initial_state(self) -> np.ndarray:
        state = np.zeros(self.nstate)
        state[0] = 1.0  # f
        state[3] = 1.0  # g'
        for i, mode in enumerate(self.fields.pi1_modes):
            b1, b2, b1p, b2p = tensor_mode_profiles(mode.q, self.fields.tau0)
            state[4 + 4 * i: 8 + 4 * i] = (b1, b1p, b2, b2p)
        return state

    def rhs(self, state: np.ndarray, p: BackgroundPoint) -> np.ndarray:
        out = np.empty_like(state)
        f, fp, g, gp = state[:4]
        out[0] = fp
        out[1] = -p.hconf * fp + 0.5 * p.rho_a2 * f
        out[2] = gp
        out[3] = -p.hconf * gp + 0.5 * p.rho_a2 * g
        for i, mode in enumerate(self.fields.pi1_modes):
            cK, cKp, cF, cFp = state[4 + 4 * i: 8 + 4 * i]
            q2 = mode.q ** 2
            out[4 + 4 * i] = cKp
            out[5 + 4 * i] = -2.0 * p.hconf * cKp - q2 * cK
            out[6 + 4 * i] = cFp
            out[7 + 4 * i] = -2.0 * p.hconf * cFp - q2 * cF
        return out

    def _scalar_basis(self, state: np.ndarray, p: BackgroundPoint):
        f, fp, g, gp = state[:4]
        fpp = -p.hconf * fp + 0.5 * p.rho_a2 * f
        gpp = -p.hconf * gp + 0.5 * p.rho_a2 * g
        return (f, fp, fpp), (g, gp, gpp)

    def gamma_fields(self, state: np.ndarray, p: BackgroundPoint):
        """(gamma, gamma', gamma'') as raw (6, n, n, n) arrays."""
        (f, fp, fpp), (g, gp, gpp) = self._scalar_basis(state, p)
        a0_over_a = self._a0_over_a(p)
        dto = -p.hconf * a0_over_a
        ddto = (p.hconf ** 2 - p.hconf_prime) * a0_over_a

        gamma = (self._D_chi0 + 6.0 * (f - 1.0) * self._D_pphi + 6.0 * g * self._D_pv
                 + a0_over_a * self._S)
        gamma_p = 6.0 * fp * self._D_pphi + 6.0 * gp * self._D_pv + dto * self._S
        gamma_pp = 6.0 * fpp * self._D_pphi + 6.0 * gpp * self._D_pv + ddto * self._S

        phi = f * self._phi0 + g * self._v0
        phi_p = fp * self._phi0 + gp * self._v0
        phi_pp = fpp * self._phi0 + gpp * self._v0
        for i, (a, b) in enumerate(SYM_COMPS):
            if a == b:
                gamma[i] -= 2.0 * phi
                gamma_p[i] -= 2.0 * phi_p
                gamma_pp[i] -= 2.0 * phi_pp

        for i, mode in enumerate(self.fields.pi1_modes):
            cK, cKp, cF, cFp = state[4 + 4 * i: 8 + 4 * i]
            q2 = mode.q ** 2
            cKpp = -2.0 * p.hconf * cKp - q2 * cK
            cFpp = -2.0 * p.hconf * cFp - q2 * cF
            pat = self._patterns[i]
            K6, F6 = self._K6[i], self._F6[i]
            gamma += (K6 * cK + F6 * cF)[:, None, None, None] * pat
            gamma_p += (K6 * cKp + F6 * cFp)[:, None, None, None] * pat
            gamma_pp += (K6 * cKpp + F6 * cFpp)[:, None, None, None] * pat
        return gamma, gamma_p, gamma_pp

    def _a0_over_a(self, p: BackgroundPoint) -> float:
        return self.a_tau0 / p.a

    def snapshot(self, state: np.ndarray, p: BackgroundPoint) -> "FirstOrderSnapshot":
        (f, fp, _), (g, gp, _) = self._scalar_basis(state, p)
        fields = self.fields
        grid = self.grid
        phi = ScalarField(grid, f * self._phi0 + g * self._v0)
        phi_p = ScalarField(grid, fp * self._phi0 + gp * self._v0)
        chi = ScalarField(grid, fields.chi1.values
                          + 6.0 * (f - 1.0) * self._p_phi + 6.0 * g * self._p_v)
        chi_p = ScalarField(grid, 6.0 * fp * self._p_phi + 6.0 * gp * self._p_v)
        a0_over_a = self._a0_over_a(p)
        Z = VectorField(grid, self._Z0 * a0_over_a)
        Z_p = VectorField(grid, -p.hconf * a0_over_a * self._Z0)
        pi = np.zeros((6,) + grid.shape)
        pi_p = np.zeros((6,) + grid.shape)
        for i, mode in enumerate(fields.pi1_modes):
            cK, cKp, cF, cFp = state[4 + 4 * i: 8 + 4 * i]
            pat = self._patterns[i]
            pi += (self._K6[i] * cK + self._F6[i] * cF)[:, None, None, None] * pat
            pi_p += (self._K6[i] * cKp + self._F6[i] * cFp)[:, None, None, None] * pat
        return FirstOrderSnapshot(
            tau=p.tau, phi=phi, phi_prime=phi_p, chi=chi, chi_prime=chi_p,
            Z=Z, Z_prime=Z_p, pi=SymTensorField(grid, pi),
            pi_prime=SymTensorField(grid, pi_p))


@dataclass
class FirstOrderSnapshot:
    """All first-order variables and their first time derivatives at one tau."""

    tau: float
    phi: ScalarField
    phi_prime: ScalarField
    chi: ScalarField
    chi_prime: ScalarField
    Z: VectorField
    Z_prime: VectorField
    pi: SymTensorField
    pi_prime: SymTensorField


def momentum_constraint_residual(snap: FirstOrderSnapshot) -> tuple[VectorField, float]:
    """First-order momentum-constraint residual 2 d_b phi' + (1/2) d_a chi'_ab.

    The scalar sector vanishes by construction; the vector sector carries
    the known tension of the evolved Z = C/a solution and is reported,
    not enforced.  Returns the residual field and a normalization scale
    (the max magnitude of the individual terms).
    """
    grid = snap.phi.grid
    from .spectral import gradient
    term1 = 2.0 * gradient(snap.phi_prime).values
    chi_ab_prime = tracefree_hessian(snap.chi_prime).values + sym_gradient(snap.Z_prime).values
    chi_ab_prime += snap.pi_prime.values
    term2 = 0.5 * tensor_divergence(SymTensorField(grid, chi_ab_prime)).values
    residual = VectorField(grid, term1 + term2)
    scale = max(float(np.max(np.abs(term1))), float(np.max(np.abs(term2)))) or 1.0
    return residual, scale


def assemble_gamma1(fields: FirstOrderFields, background, tau: float,
                    spec: IntegratorSpec | None = None):
    """Metric perturbation gamma_ab(tau) with its two time derivatives.

    Integrates the compact first-order state from tau0 to tau together
    with the background co-state, then synthesizes the grid fields.
    """
    ncs = background.co_state_dim
    p0 = background.point(fields.tau0, background.initial_costate())
    system = FirstOrderSystem(fields, a_tau0=p0.a)
    y0 = np.concatenate([background.initial_costate(), system.initial_state()])

    def rhs(t, y):
        s = y[:ncs]
        p = background.point(t, s)
        return np.concatenate([background.costate_rhs(t, s), system.rhs(y[ncs:], p)])

    if tau < fields.tau0:
        raise InputError("tau must be >= tau0")
    if tau == fields.tau0:
        state = system.initial_state()
        p = background.point(tau, y0[:ncs])
    else:
        traj = integrate_ode(rhs, y0, (fields.tau0, tau), spec or MODE_SPEC)
        y = traj.ys[-1]
        state = y[ncs:]
        p = background.point(tau, y[:ncs])
    g, gp, gpp = system.gamma_fields(state, p)
    grid = fields.grid
    return (SymTensorField(grid, g), SymTensorField(grid, gp),
            SymTensorField(grid, gpp))
