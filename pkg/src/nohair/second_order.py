"""Second-order perturbations: quadratic sources, evolution, constraint
monitoring, and extraction of the late-time constants.

The four second-order equations are used asymmetrically, mirroring how
they close as a system: the Raychaudhuri equation evolves phi2, the
evolution equation (rearranged for chi2'') evolves the full chi2_ab, and
the energy and momentum constraints are monitored as residuals.

Index conventions: all first-order indices are raised and lowered with
delta_ab, commas are flat spatial derivatives (spectral here), primes
are conformal-time derivatives.  The subscript-0 fields are the initial
snapshot at tau0 and delta0 is the initial density contrast; they enter
through the integrated dust-conservation terms.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .background import BackgroundPoint
from .errors import ConstraintBlowupError, InputError, RangeError
from .fields import Grid3, ScalarField, SymTensorField, VectorField, SYM_COMPS, SYM_INDEX
from .first_order import FirstOrderFields, FirstOrderSystem
from .numerics import IntegratorSpec, integrate_ode
from .spectral import _dealias_mask, _k_arrays, irfft, rfft

EVOLVE_SPEC = IntegratorSpec(abs_tol=1e-11, rel_tol=1e-9)


class ConstraintWarning(UserWarning):
    """Initial data violates a monitored second-order constraint."""


# ---------------------------------------------------------------------------
# Source terms
# ---------------------------------------------------------------------------

@dataclass
class SourceTerms:
    """Quadratic couplings of first-order perturbations at one tau.

    N1 drives the Raychaudhuri equation, N2/N3 are the energy and
    momentum constraint right-hand sides, N4 drives the evolution
    equation (stored lowered; symmetric).  The trace of N4 is kept for
    consistency checks.
    """

    tau: float
    N1: ScalarField
    N2: ScalarField
    N3: VectorField
    N4: SymTensorField
    N4_trace: np.ndarray


def _mat(field6: np.ndarray) -> np.ndarray:
    """(6, ...) symmetric storage -> full (3, 3, ...) array."""
    shape = field6.shape[1:]
    out = np.empty((3, 3) + shape)
    for a in range(3):
        for b in range(3):
            out[a, b] = field6[SYM_INDEX[(a, b)]]
    return out


def _sym6(mat: np.ndarray) -> np.ndarray:
    return np.stack([0.5 * (mat[a, b] + mat[b, a]) for a, b in SYM_COMPS])


def _band_limit(spec: np.ndarray, mask: np.ndarray) -> np.ndarray:
    spec *= mask
    return spec


def assemble_sources(gamma: SymTensorField, gamma_p: SymTensorField,
                     gamma_pp: SymTensorField, snapshot0: SymTensorField,
                     delta0: ScalarField, bg: BackgroundPoint,
                     dealias_inputs: bool = True) -> SourceTerms:
    """Quadratic sources from the first-order metric perturbation.

    All inputs must live on one grid and refer to the same tau (the
    snapshot and delta0 being the fixed initial-time data).  Spatial
    derivatives are spectral; inputs are truncated to the 2/3 band before
    any product is formed.
    """
    grid = gamma.grid
    for f in (gamma_p, gamma_pp, snapshot0, delta0):
        if f.grid != grid:
            raise InputError("source assembly inputs live on different grids")
    if snapshot0 is None:
        raise InputError("snapshot0 required for the initial-time coupling terms")

    n = grid.n
    _, k_odd = _k_arrays(n, grid.box_len)
    mask = _dealias_mask(n) if dealias_inputs else np.ones(1)

    spec_g = _band_limit(rfft(grid, gamma.values), mask)
    spec_p = _band_limit(rfft(grid, gamma_p.values), mask)

    G = _mat(irfft(grid, spec_g))
    P = _mat(irfft(grid, spec_p))
    if dealias_inputs:
        Q = _mat(irfft(grid, _band_limit(rfft(grid, gamma_pp.values), mask)))
        G0 = _mat(irfft(grid, _band_limit(rfft(grid, snapshot0.values), mask)))
        d0 = irfft(grid, _band_limit(rfft(grid, delta0.values), mask))
    else:
        Q = _mat(gamma_pp.values)
        G0 = _mat(snapshot0.values)
        d0 = delta0.values

    # first spatial derivatives of gamma and gamma'
    dG = np.empty((3, 3, 3) + grid.shape)   # dG[c, a, b] = d_c gamma_ab
    dP = np.empty((3, 3, 3) + grid.shape)
    for i, (a, b) in enumerate(SYM_COMPS):
        for c in range(3):
            dG[c, a, b] = irfft(grid, 1j * k_odd[c] * spec_g[i])
            dP[c, a, b] = irfft(grid, 1j * k_odd[c] * spec_p[i])
            if a != b:
                dG[c, b, a] = dG[c, a, b]
                dP[c, b, a] = dP[c, a, b]

    # second derivatives d_c d_d gamma_ab (symmetric in cd)
    d2G = np.empty((3, 3, 3, 3) + grid.shape)
    for i, (a, b) in enumerate(SYM_COMPS):
        for j, (c, d) in enumerate(SYM_COMPS):
            val = irfft(grid, -k_odd[c] * k_odd[d] * spec_g[i])
            d2G[c, d, a, b] = val
            if c != d:
                d2G[d, c, a, b] = val
            if a != b:
                d2G[c, d, b, a] = val
                if c != d:
                    d2G[d, c, b, a] = val

    trG = np.einsum("aaxyz->xyz", G)
    trP = np.einsum("aaxyz->xyz", P)
    trG0 = np.einsum("aaxyz->xyz", G0)
    div_g = np.einsum("aabxyz->bxyz", dG)            # d_a gamma_ab
    grad_tr = np.einsum("caaxyz->cxyz", dG)          # d_c tr gamma
    lapG = np.einsum("ccabxyz->abxyz", d2G)          # lap gamma_ab
    hess_tr = np.einsum("cdaaxyz->cdxyz", d2G)       # d_c d_d tr gamma
    grad_div = np.einsum("bdadxyz->abxyz", d2G)      # d_b d_d gamma_ad (free a, b)
    div_div = np.einsum("ndndxyz->xyz", d2G)         # d_n d_d gamma_nd
    lap_tr = np.einsum("ccaaxyz->xyz", d2G)

    GP = np.einsum("abxyz,abxyz->xyz", G, P)
    PP = np.einsum("abxyz,abxyz->xyz", P, P)
    GQ = np.einsum("abxyz,abxyz->xyz", G, Q)
    GG = np.einsum("abxyz,abxyz->xyz", G, G)
    G0G0 = np.einsum("abxyz,abxyz->xyz", G0, G0)

    H, R = bg.hconf, bg.rho_a2

    # shared dust-conservation bracket built on (gamma - gamma_0) and delta0
    dtr = trG - trG0
    bracket = -0.25 * dtr ** 2 - 0.5 * (GG - G0G0) + d0 * dtr

    # Raychaudhuri source
    N1 = (-(PP + 2.0 * H * GP) / 6.0
          - GQ / 3.0
          - (R / 6.0) * bracket)

    # energy-constraint source
    dGdG = np.einsum("cabxyz,cabxyz->xyz", dG, dG)           # gamma_ab,d gamma_ab,d
    cross = np.einsum("dabxyz,bdaxyz->xyz", dG, dG)          # gamma_ab,d gamma_da,b
    grad_tr2 = np.einsum("cxyz,cxyz->xyz", grad_tr, grad_tr)
    N2 = (-(H / 3.0) * GP
          + (PP - trP ** 2) / 24.0
          + (1.0 / 6.0) * (
              np.einsum("abxyz,abxyz->xyz", G, lapG + hess_tr - 2.0 * grad_div)
              + np.einsum("axyz,axyz->xyz", div_g, grad_tr - div_g)
              + 0.75 * dGdG - 0.5 * cross - 0.25 * grad_tr2)
          + (R / 6.0) * bracket)

    # momentum-constraint source
    N3 = (np.einsum("adxyz,abdxyz->bxyz", G, dP)             # gamma_ad gamma'_bd,a
          - np.einsum("adxyz,badxyz->bxyz", G, dP)           # gamma_ad gamma'_ad,b
          + np.einsum("dxyz,bdxyz->bxyz", div_g, P)          # gamma_ad,a gamma'_bd
          - 0.5 * np.einsum("badxyz,adxyz->bxyz", dG, P)     # gamma_ad,b gamma'_ad
          - 0.5 * np.einsum("dxyz,dbxyz->bxyz", grad_tr, P)) # tr',d ... gamma'_db

    # evolution-equation source
    delta = np.eye(3)[:, :, None, None, None]
    big = (
        - G * (div_div - lap_tr)
        + 2.0 * (np.einsum("dnxyz,dnabxyz->abxyz", G, d2G)
                 + np.einsum("dnxyz,abdnxyz->abxyz", G, d2G)
                 - np.einsum("dnxyz,bdanxyz->abxyz", G, d2G)
                 - np.einsum("dnxyz,adnbxyz->abxyz", G, d2G))
        + 2.0 * (np.einsum("nxyz,nabxyz->abxyz", div_g, dG)
                 - np.einsum("nxyz,banxyz->abxyz", div_g, dG)
                 - np.einsum("nxyz,abnxyz->abxyz", div_g, dG))
        + 2.0 * np.einsum("neaxyz,nbexyz->abxyz", dG, dG)
        - 2.0 * np.einsum("neaxyz,enbxyz->abxyz", dG, dG)
        + np.einsum("benxyz,aenxyz->abxyz", dG, dG)
        + (np.einsum("exyz,beaxyz->abxyz", grad_tr, dG)
           + np.einsum("exyz,aebxyz->abxyz", grad_tr, dG)
           - np.einsum("exyz,eabxyz->abxyz", grad_tr, dG))
        + delta * (
            - np.einsum("dnxyz,dnxyz->xyz", G, lapG + hess_tr - 2.0 * grad_div)
            - np.einsum("dxyz,dxyz->xyz", div_g, grad_tr - div_g)
            - 0.75 * dGdG + 0.5 * cross + 0.25 * grad_tr2)
    )
    N4 = (np.einsum("adxyz,dbxyz->abxyz", P, P)
          - 0.5 * trP * P
          + 0.125 * (trP ** 2 - PP) * delta
          - 0.5 * big)

    asym = np.max(np.abs(N4 - N4.transpose(1, 0, 2, 3, 4)))
    scale = np.max(np.abs(N4)) or 1.0
    if asym > 1e-10 * scale:
        raise InputError(f"evolution source lost symmetry: {asym / scale:.2e}")

    return SourceTerms(
        tau=bg.tau,
        N1=ScalarField(grid, N1),
        N2=ScalarField(grid, N2),
        N3=VectorField(grid, N3),
        N4=SymTensorField(grid, _sym6(N4)),
        N4_trace=np.einsum("aaxyz->xyz", N4),
    )


# ---------------------------------------------------------------------------
# States and providers
# ---------------------------------------------------------------------------

@dataclass
class SecondOrderState:
    tau: float
    phi2: ScalarField
    phi2_prime: ScalarField
    chi2: SymTensorField
    chi2_prime: SymTensorField

    @classmethod
    def zeros(cls, grid: Grid3, tau: float) -> "SecondOrderState":
        return cls(tau, ScalarField.zeros(grid), ScalarField.zeros(grid),
                   SymTensorField.zeros(grid), SymTensorField.zeros(grid))


class CoevolvedFirstOrderSources:
    """Source provider that advances the first-order system alongside the
    second-order state, so sources at integrator stage times come from
    exact (not interpolated) first-order values."""

    def __init__(self, fields: FirstOrderFields, background, dealias: bool = True):
        self.fields = fields
        self.background = background
        self.dealias = dealias
        self.grid = fields.grid
        p0 = background.point(fields.tau0, background.initial_costate())
        self.system = FirstOrderSystem(fields, a_tau0=p0.a)
        self.ncs = background.co_state_dim
        self.co_dim = self.ncs + self.system.nstate
        self.start_tau = fields.tau0
        bg_start = getattr(background, "start_tau", None)
        if bg_start is not None and bg_start != fields.tau0:
            raise InputError("first-order data and background start at different tau0")

    def initial(self) -> np.ndarray:
        return np.concatenate([self.background.initial_costate(),
                               self.system.initial_state()])

    def bg_point(self, tau: float, co: np.ndarray) -> BackgroundPoint:
        return self.background.point(tau, co[: self.ncs])

    def rhs(self, tau: float, co: np.ndarray) -> np.ndarray:
        p = self.bg_point(tau, co)
        return np.concatenate([self.background.costate_rhs(tau, co[: self.ncs]),
                               self.system.rhs(co[self.ncs:], p)])

    def gamma_arrays(self, tau: float, co: np.ndarray):
        p = self.bg_point(tau, co)
        return self.system.gamma_fields(co[self.ncs:], p), p

    def sources(self, tau: float, co: np.ndarray) -> SourceTerms:
        (g, gp, gpp), p = self.gamma_arrays(tau, co)
        grid = self.grid
        return assemble_sources(
            SymTensorField(grid, g), SymTensorField(grid, gp),
            SymTensorField(grid, gpp), self.fields.snapshot0,
            self.fields.delta0, p, dealias_inputs=self.dealias)

    def n1(self, tau: float, co: np.ndarray) -> np.ndarray:
        return self.sources(tau, co).N1.values


class ExplicitSources:
    """Closed-form source provider (manufactured solutions, synthetic tests).

    n1/n4 are callables tau -> real grid array (or None for zero); the
    background co-state is still integrated exactly.
    """

    def __init__(self, grid: Grid3, background, n1=None, n4=None):
        self.grid = grid
        self.background = background
        self._n1 = n1
        self._n4 = n4
        self.ncs = background.co_state_dim
        self.co_dim = self.ncs
        self.start_tau = getattr(background, "start_tau", None)

    def initial(self) -> np.ndarray:
        return self.background.initial_costate()

    def bg_point(self, tau: float, co: np.ndarray) -> BackgroundPoint:
        return self.background.point(tau, co[: self.ncs])

    def rhs(self, tau: float, co: np.ndarray) -> np.ndarray:
        return self.background.costate_rhs(tau, co[: self.ncs])

    def sources(self, tau: float, co: np.ndarray) -> SourceTerms:
        grid = self.grid
        zero = np.zeros(grid.shape)
        n1 = self._n1(tau) if self._n1 is not None else zero
        n4 = self._n4(tau) if self._n4 is not None else np.zeros((6,) + grid.shape)
        return SourceTerms(tau=tau, N1=ScalarField(grid, n1),
                           N2=ScalarField.zeros(grid), N3=VectorField.zeros(grid),
                           N4=SymTensorField(grid, n4),
                           N4_trace=n4[0] + n4[3] + n4[5])

    def n1(self, tau: float, co: np.ndarray) -> np.ndarray:
        return self._n1(tau) if self._n1 is not None else None


# ---------------------------------------------------------------------------
# Evolution
# ---------------------------------------------------------------------------

@dataclass
class SecondOrderRun:
    """Sampled trajectory of a second-order evolution."""

    grid: Grid3
    taus: np.ndarray
    states: list[SecondOrderState]
    co_states: list[np.ndarray]
    bg_points: list[BackgroundPoint]
    provider: object
    growth_A: float | None = None


class _SpectralLayout:
    """Flat float packing of the spectral second-order state."""

    def __init__(self, grid: Grid3):
        n = grid.n
        self.grid = grid
        self.nc = n * n * (n // 2 + 1)
        self.spec_shape = (n, n, n // 2 + 1)
        self.block = 2 * self.nc  # floats per complex scalar block
        self.total = self.block * (1 + 1 + 6 + 6)

    def pack(self, phi, phi_p, chi, chi_p) -> np.ndarray:
        return np.concatenate([
            phi.ravel().view(float), phi_p.ravel().view(float),
            chi.ravel().view(float), chi_p.ravel().view(float)])

    def unpack(self, flat: np.ndarray):
        nc, b = self.nc, self.block
        phi = flat[:b].view(complex).reshape(self.spec_shape)
        phi_p = flat[b:2 * b].view(complex).reshape(self.spec_shape)
        chi = flat[2 * b:8 * b].view(complex).reshape((6,) + self.spec_shape)
        chi_p = flat[8 * b:14 * b].view(complex).reshape((6,) + self.spec_shape)
        return phi, phi_p, chi, chi_p


def _chi_rhs_spatial(chi, phi, kk, k2):
    """Spatial operator terms moved to the chi'' right-hand side.

    2 * [ k_a k_b phi - (1/4)(k_d k_n chi_dn) delta_ab
          + (1/2) k_d k_b chi_da + (1/2) k_d k_a chi_db - (1/2) k^2 chi_ab ]
    """
    kk_chi = sum(kk[SYM_INDEX[(d, n)]] * chi[SYM_INDEX[(d, n)]] * (2.0 if d != n else 1.0)
                 for d, n in SYM_COMPS)
    out = np.empty_like(chi)
    for i, (a, b) in enumerate(SYM_COMPS):
        term = kk[i] * phi - 0.5 * k2 * chi[i]
        if a == b:
            term = term - 0.25 * kk_chi
        mixed = sum(0.5 * (kk[SYM_INDEX[(d, b)]] * chi[SYM_INDEX[(d, a)]]
                           + kk[SYM_INDEX[(d, a)]] * chi[SYM_INDEX[(d, b)]])
                    for d in range(3))
        out[i] = 2.0 * (term + mixed)
    return out


def evolve_second_order(init: SecondOrderState, provider, background,
                        tau_grid, spec: IntegratorSpec | None = None,
                        abort_threshold: float | None = None,
                        growth_A: float | None = None) -> SecondOrderRun:
    """Evolve phi2 (Raychaudhuri) and chi2_ab (evolution equation) spectrally.

    The provider supplies sources at every integrator stage; tau_grid
    lists the strictly increasing sample times (first entry is the start).
    The energy/momentum constraints are checked at the initial time
    (warning on violation) and monitored at sample times against
    abort_threshold when given.
    """
    taus = np.asarray(tau_grid, dtype=float)
    if taus.ndim != 1 or len(taus) < 2 or np.any(np.diff(taus) <= 0.0):
        raise InputError("tau_grid must be strictly increasing with >= 2 points")
    start = getattr(provider, "start_tau", None)
    if start is not None and taus[0] != start:
        raise InputError(f"tau_grid must start at the provider's tau0 = {start}")
    grid = init.phi2.grid
    layout = _SpectralLayout(grid)
    _, k_odd = _k_arrays(grid.n, grid.box_len)
    kk = np.stack([np.broadcast_to(k_odd[a] * k_odd[b], layout.spec_shape)
                   for a, b in SYM_COMPS]).copy()
    k2 = kk[0] + kk[3] + kk[5]
    mask = _dealias_mask(grid.n)

    co0 = provider.initial()
    ncs = len(co0)
    y0 = np.concatenate([co0, layout.pack(
        rfft(grid, init.phi2.values), rfft(grid, init.phi2_prime.values),
        rfft(grid, init.chi2.values), rfft(grid, init.chi2_prime.values))])

    # initial constraint check
    src0 = provider.sources(taus[0], co0)
    p0 = provider.bg_point(taus[0], co0)
    res0 = constraint_residuals_2(init, src0, p0)
    worst0 = max(res0.energy_normalized, res0.momentum_normalized)
    if worst0 > 1e-8:
        warnings.warn(
            f"initial data violates second-order constraints "
            f"(normalized residual {worst0:.2e})", ConstraintWarning, stacklevel=2)

    def rhs(tau, y):
        co = y[:ncs]
        phi, phi_p, chi, chi_p = layout.unpack(y[ncs:])
        p = provider.bg_point(tau, co)
        src = provider.sources(tau, co)
        n1_hat = rfft(grid, src.N1.values) * mask
        n4_hat = rfft(grid, src.N4.values) * mask
        h, r = p.hconf, p.rho_a2
        phi_pp = -h * phi_p + 0.5 * r * phi + n1_hat
        homog = h * phi_p + 0.5 * r * phi + n1_hat  # phi'' + 2H phi'
        chi_pp = -2.0 * h * chi_p + _chi_rhs_spatial(chi, phi, kk, k2)
        chi_pp += 2.0 * n4_hat
        for i, (a, b) in enumerate(SYM_COMPS):
            if a == b:
                chi_pp[i] += 2.0 * homog
        return np.concatenate([provider.rhs(tau, co),
                               layout.pack(phi_p, phi_pp, chi_p, chi_pp)])

    traj = integrate_ode(rhs, y0, (taus[0], taus[-1]), spec or EVOLVE_SPEC,
                         t_eval=taus)

    states: list[SecondOrderState] = []
    co_states: list[np.ndarray] = []
    bg_points: list[BackgroundPoint] = []
    for t in taus:
        y = traj.sample(t)
        co = y[:ncs]
        phi, phi_p, chi, chi_p = layout.unpack(y[ncs:])
        state = SecondOrderState(
            tau=t,
            phi2=ScalarField(grid, irfft(grid, phi)),
            phi2_prime=ScalarField(grid, irfft(grid, phi_p)),
            chi2=SymTensorField(grid, irfft(grid, chi)),
            chi2_prime=SymTensorField(grid, irfft(grid, chi_p)))
        if abort_threshold is not None:
            src = provider.sources(t, co)
            res = constraint_residuals_2(state, src, provider.bg_point(t, co))
            worst = max(res.energy_normalized, res.momentum_normalized)
            if worst > abort_threshold:
                raise ConstraintBlowupError(
                    f"normalized constraint residual {worst:.2e} exceeded "
                    f"{abort_threshold:.2e} at tau={t}")
        states.append(state)
        co_states.append(co.copy())
        bg_points.append(provider.bg_point(t, co))
    return SecondOrderRun(grid=grid, taus=taus, states=states,
                          co_states=co_states, bg_points=bg_points,
                          provider=provider, growth_A=growth_A)


# ---------------------------------------------------------------------------
# Constraint residuals
# ---------------------------------------------------------------------------

@dataclass
class ConstraintResiduals:
    energy: ScalarField
    momentum: VectorField
    energy_normalized: float
    momentum_normalized: float


def constraint_residuals_2(state: SecondOrderState, sources: SourceTerms,
                           bg: BackgroundPoint) -> ConstraintResiduals:
    """LHS - RHS of the energy and momentum constraints.

    energy:   H phi' - (1/3) lap phi + (R/2) phi - (1/12) chi_ab,ab - N2
    momentum: 2 phi'_,b + (1/2) chi'_ab,a - N3_b
    The normalized magnitudes divide by the largest individual term.
    """
    if sources.tau != state.tau:
        raise InputError("state and sources refer to different times")
    grid = state.phi2.grid
    _, k_odd = _k_arrays(grid.n, grid.box_len)
    k2 = k_odd[0] ** 2 + k_odd[1] ** 2 + k_odd[2] ** 2

    phi_hat = rfft(grid, state.phi2.values)
    phip_hat = rfft(grid, state.phi2_prime.values)
    chi_hat = rfft(grid, state.chi2.values)
    chip_hat = rfft(grid, state.chi2_prime.values)

    chi_dd = np.zeros(phi_hat.shape, dtype=complex)
    for i, (a, b) in enumerate(SYM_COMPS):
        w = 2.0 if a != b else 1.0
        chi_dd += -w * k_odd[a] * k_odd[b] * chi_hat[i]

    h, r = bg.hconf, bg.rho_a2
    terms = [
        h * irfft(grid, phip_hat),
        -(1.0 / 3.0) * irfft(grid, -k2 * phi_hat),
        0.5 * r * state.phi2.values,
        -(1.0 / 12.0) * irfft(grid, chi_dd),
        -sources.N2.values,
    ]
    energy = ScalarField(grid, sum(terms))
    e_scale = max(float(np.max(np.abs(t))) for t in terms) or 1.0

    mom = np.empty((3,) + grid.shape)
    m_scale = 0.0
    grad_phip = np.stack([irfft(grid, 1j * k_odd[b] * phip_hat) for b in range(3)])
    for b in range(3):
        div_chip = np.zeros(phi_hat.shape, dtype=complex)
        for a in range(3):
            div_chip += 1j * k_odd[a] * chip_hat[SYM_INDEX[(a, b)]]
        t1 = 2.0 * grad_phip[b]
        t2 = 0.5 * irfft(grid, div_chip)
        t3 = -sources.N3.values[b]
        mom[b] = t1 + t2 + t3
        m_scale = max(m_scale, np.max(np.abs(t1)), np.max(np.abs(t2)), np.max(np.abs(t3)))
    momentum = VectorField(grid, mom)
    return ConstraintResiduals(
        energy=energy, momentum=momentum,
        energy_normalized=energy.max_abs() / e_scale,
        momentum_normalized=momentum.max_abs() / (m_scale or 1.0))


def constraint_consistent_init(sources0: SourceTerms,
                               bg0: BackgroundPoint) -> SecondOrderState:
    """Initial second-order data satisfying both constraints at tau0.

    Keeps phi2 = 0 and solves the energy constraint for the longitudinal
    part of chi2 and the momentum constraint for the longitudinal-plus-
    vector part of chi2'; the zero mode of the energy constraint is
    absorbed by the phi2' zero mode.
    """
    grid = sources0.N1.grid
    _, k_odd = _k_arrays(grid.n, grid.box_len)
    shape = (grid.n, grid.n, grid.n // 2 + 1)
    kvec = [np.broadcast_to(k_odd[a], shape) for a in range(3)]
    k2 = kvec[0] ** 2 + kvec[1] ** 2 + kvec[2] ** 2
    safe_k2 = np.where(k2 == 0.0, 1.0, k2)

    n2_hat = rfft(grid, sources0.N2.values)
    n3_hat = rfft(grid, sources0.N3.values)

    # energy constraint: (1/12) k_a k_b chi_ab = N2  ->  chi^L = 12 N2 k k / k^4
    beta = 12.0 * n2_hat / safe_k2 ** 2
    beta[0, 0, 0] = 0.0
    chi_hat = np.stack([beta * kvec[a] * kvec[b] for a, b in SYM_COMPS])

    # momentum constraint: (i/2) k_a chi'_ab = N3_b (phi2' spatial part zero)
    k_dot_n3 = sum(kvec[a] * n3_hat[a] for a in range(3))
    alpha = -2.0j * k_dot_n3 / safe_k2 ** 2
    w = -2.0j * (n3_hat - np.stack(kvec) * k_dot_n3 / safe_k2) / safe_k2
    alpha[0, 0, 0] = 0.0
    w[:, 0, 0, 0] = 0.0
    chip_hat = np.stack([alpha * kvec[a] * kvec[b] + kvec[a] * w[b] + kvec[b] * w[a]
                         for a, b in SYM_COMPS])

    phi2_prime = np.zeros(shape, dtype=complex)
    phi2_prime[0, 0, 0] = n2_hat[0, 0, 0] / bg0.hconf

    return SecondOrderState(
        tau=sources0.tau,
        phi2=ScalarField.zeros(grid),
        phi2_prime=ScalarField(grid, irfft(grid, phi2_prime)),
        chi2=SymTensorField(grid, irfft(grid, chi_hat)),
        chi2_prime=SymTensorField(grid, irfft(grid, chip_hat)))


def split_chi2(chi2: SymTensorField):
    """SVT split of chi2 for individual late-time tracking."""
    from .spectral import svt_decompose
    parts = svt_decompose(chi2)
    return parts.Z, parts.pi, (parts.trace, parts.chi)


# ---------------------------------------------------------------------------
# Asymptotic fits
# ---------------------------------------------------------------------------

@dataclass
class AsymptoticFit:
    """Late-time constants and measured settling orders.

    L is the settled Raychaudhuri constant times A^2 (reported alongside
    L/A^2); Q and G are the settled first and second divergences of chi2;
    E_amp tabulates settled per-mode chi2 amplitudes scaled by k.
    """

    L: ScalarField
    L_over_A2: ScalarField
    Q: VectorField
    G: ScalarField
    E_amp: list[dict]
    fitted_order: float
    orders: dict
    fit_ok: bool


def settling_order(taus: np.ndarray, norms: np.ndarray) -> float:
    """Log-log slope of |v(tau) - v(tau_final)| away from the reference."""
    ref = norms[-1]
    window = (np.abs(taus) > 20.0 * np.abs(taus[-1]))
    diffs = np.abs(norms[window] - ref)
    good = diffs > 0
    if np.count_nonzero(good) < 4:
        return math.nan
    return float(np.polyfit(np.log(np.abs(taus[window][good])), np.log(diffs[good]), 1)[0])


def richardson_constant(taus: np.ndarray, values: np.ndarray, order: float = 2.0):
    """Pointwise settled value assuming v = c + b tau^order.

    Uses the last pair of samples: c = (v2 - s^p v1) / (1 - s^p) with
    s = tau2/tau1.
    """
    t1, t2 = taus[-2], taus[-1]
    s = (t2 / t1) ** order
    return (values[-1] - s * values[-2]) / (1.0 - s)


def fit_asymptotics(run: SecondOrderRun, min_tail: int = 8) -> AsymptoticFit:
    """Extract settled constants and decay orders from a sampled run.

    Requires coverage down to |tau0|/100 with at least min_tail samples in
    the final decade.
    """
    taus = run.taus
    if abs(taus[-1]) > abs(taus[0]) / 100.0 * (1.0 + 1e-9):
        raise RangeError("run does not reach |tau0|/100")
    in_last_decade = np.abs(taus) <= 10.0 * np.abs(taus[-1])
    if np.count_nonzero(in_last_decade) < min_tail:
        raise RangeError(f"need >= {min_tail} samples in the final decade")

    grid = run.grid
    phi_series = np.stack([s.phi2.values for s in run.states])
    phi_norms = np.array([s.phi2.max_abs() for s in run.states])
    settled_phi = richardson_constant(taus, phi_series)

    from .spectral import tensor_divergence, divergence
    div_series = np.stack([tensor_divergence(s.chi2).values for s in run.states])
    divdiv_series = np.stack(
        [divergence(VectorField(grid, d)).values for d in div_series])
    settled_q = richardson_constant(taus, div_series)
    settled_g = richardson_constant(taus, divdiv_series)

    orders = {
        "phi2": settling_order(taus, phi_norms),
        "grad_chi2": settling_order(
            taus, np.array([np.max(np.abs(d)) for d in div_series])),
        "gradgrad_chi2": settling_order(
            taus, np.array([np.max(np.abs(d)) for d in divdiv_series])),
    }

    # per-mode settled chi2 amplitudes
    chi_hat_last = rfft(grid, run.states[-1].chi2.values)
    chi_hat_prev = rfft(grid, run.states[-2].chi2.values)
    amp = np.sqrt(np.sum(np.abs(chi_hat_last) ** 2, axis=0))
    amp[0, 0, 0] = 0.0
    nmodes = min(8, int(np.count_nonzero(amp > 1e-12 * (amp.max() or 1.0))))
    flat_order = np.argsort(amp.ravel())[::-1][:nmodes]
    _, k_odd = _k_arrays(grid.n, grid.box_len)
    freqs = np.fft.fftfreq(grid.n, d=1.0 / grid.n).astype(int)
    e_amp = []
    s_pow = (taus[-1] / taus[-2]) ** 2
    norm = grid.n ** 3
    for flat in flat_order:
        ix, iy, iz = np.unravel_index(flat, amp.shape)
        k_int = (int(freqs[ix]), int(freqs[iy]), int(iz))
        kmag = math.sqrt(sum(v * v for v in k_int)) * grid.dk
        settled = (chi_hat_last[:, ix, iy, iz] - s_pow * chi_hat_prev[:, ix, iy, iz]) / (1.0 - s_pow)
        e_over_k = settled / norm
        e_amp.append({
            "k": list(k_int),
            "k_mag": kmag,
            "chi2_settled_mag": float(np.linalg.norm(e_over_k)),
            "E_mag": float(np.linalg.norm(e_over_k) * kmag),
        })

    order = orders["phi2"]
    fit_ok = bool(order == order and 1.0 <= order <= 3.0)  # NaN-safe
    a2 = (run.growth_A or 0.0) ** 2
    return AsymptoticFit(
        L=ScalarField(grid, settled_phi * a2),
        L_over_A2=ScalarField(grid, settled_phi),
        Q=VectorField(grid, settled_q),
        G=ScalarField(grid, settled_g),
        E_amp=e_amp,
        fitted_order=order,
        orders=orders,
        fit_ok=fit_ok)


# ---------------------------------------------------------------------------
# Generic order-n scalar driver
# ---------------------------------------------------------------------------

def evolve_scalar_n(order_n: int, source_n1, background, init, tau_grid,
                    spec: IntegratorSpec | None = None):
    """Evolve phi^(n)'' + H phi^(n)' - (R/2) phi^(n) = N1^(n).

    The homogeneous operator is identical at every order; only the source
    changes.  source_n1(tau, co_state) must return a real grid array (the
    co-state is the provider's, e.g. first-order values for n=2); for
    n=1 pass None to reproduce the free evolution.  init is
    (phi_field, phi_prime_field); returns (taus, list of (phi, phi'))
    field pairs.
    """
    if order_n < 1:
        raise InputError("order must be >= 1")
    taus = np.asarray(tau_grid, dtype=float)
    phi0, dphi0 = init
    grid = phi0.grid
    provider = source_n1

    if provider is None:
        class _Zero:
            co_dim = background.co_state_dim

            def initial(self):
                return background.initial_costate()

            def rhs(self, tau, co):
                return background.costate_rhs(tau, co)

            def bg_point(self, tau, co):
                return background.point(tau, co)

            def n1(self, tau, co):
                return None
        provider = _Zero()

    ncs = provider.co_dim
    nc = grid.n * grid.n * (grid.n // 2 + 1)
    y0 = np.concatenate([provider.initial(),
                         rfft(grid, phi0.values).ravel().view(float),
                         rfft(grid, dphi0.values).ravel().view(float)])
    spec_shape = (grid.n, grid.n, grid.n // 2 + 1)
    mask = _dealias_mask(grid.n)

    def rhs(tau, y):
        co = y[:ncs]
        phi = y[ncs:ncs + 2 * nc].view(complex).reshape(spec_shape)
        phi_p = y[ncs + 2 * nc:].view(complex).reshape(spec_shape)
        p = provider.bg_point(tau, co)
        src = provider.n1(tau, co)
        phi_pp = -p.hconf * phi_p + 0.5 * p.rho_a2 * phi
        if src is not None:
            phi_pp = phi_pp + rfft(grid, src) * mask
        return np.concatenate([provider.rhs(tau, co),
                               phi_p.ravel().view(float),
                               phi_pp.ravel().view(float)])

    traj = integrate_ode(rhs, y0, (taus[0], taus[-1]), spec or EVOLVE_SPEC,
                         t_eval=taus)
    out = []
    for t in taus:
        y = traj.sample(t)
        phi = irfft(grid, y[ncs:ncs + 2 * nc].view(complex).reshape(spec_shape))
        phi_p = irfft(grid, y[ncs + 2 * nc:].view(complex).reshape(spec_shape))
        out.append((ScalarField(grid, phi), ScalarField(grid, phi_p)))
    return taus, out
