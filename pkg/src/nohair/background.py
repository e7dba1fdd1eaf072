"""Flat dust FLRW background with a positive cosmological constant.

Conformal time is negative and increases toward 0-, which is the far
future: the scale factor behaves as a ~ -sqrt(3/Lambda)/tau there.  All
geometric units take 8 pi G = c = 1.

The Friedmann constraint theta^2 = 3(rho + Lambda) with theta = 3a'/a^2
yields the single ODE  a' = a^2 sqrt((rho0 a0^3/a^3 + Lambda)/3).  The
integrator works with the inverse scale factor u = 1/a, whose rate
u' = -sqrt((M u^3 + Lambda)/3) stays smooth and bounded all the way to
the de-Sitter asymptote, where u -> 0 linearly in tau.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, DomainError, InputError
from .numerics import IntegratorSpec, Trajectory, gauss_legendre_integral, integrate_ode

DEFAULT_SPEC = IntegratorSpec(method="rk45_adaptive", abs_tol=1e-12, rel_tol=1e-10)


@dataclass(frozen=True)
class BackgroundParams:
    """Cosmological constant, initial dust density, and normalization.

    tau0 defaults to the value consistent with the de-Sitter asymptote,
    i.e. minus the conformal time remaining until a -> infinity.  With
    that choice a(tau)*|tau|*sqrt(Lambda/3) -> 1.  Passing tau0 explicitly
    shifts the time origin and the asymptote constant with it (required
    for Lambda = 0 test configurations, where no future asymptote exists).
    """

    Lambda: float
    rho0: float
    a0: float = 1.0
    tau0: float | None = None
    allow_zero_lambda: bool = False

    def __post_init__(self):
        if self.Lambda < 0.0 or (self.Lambda == 0.0 and not self.allow_zero_lambda):
            raise DomainError("Lambda must be positive (Lambda=0 only in test builds)")
        if self.rho0 < 0.0:
            raise DomainError("rho0 must be non-negative")
        if self.a0 <= 0.0:
            raise DomainError("a0 must be positive")
        if self.tau0 is None:
            if self.Lambda == 0.0:
                raise InputError("Lambda=0 requires an explicit tau0")
            object.__setattr__(self, "tau0", -remaining_conformal_time(
                self.Lambda, self.rho0, self.a0))
        if self.tau0 >= 0.0:
            raise DomainError("tau0 must be negative")

    @property
    def mass(self) -> float:
        """Conserved dust coefficient M = rho0 * a0^3 (rho = M / a^3)."""
        return self.rho0 * self.a0 ** 3


@dataclass(frozen=True)
class BackgroundState:
    """Background sample at one conformal time."""

    tau: float
    a: float
    a_prime: float
    rho_B: float
    conf_H: float


def remaining_conformal_time(Lambda: float, rho0: float, a0: float) -> float:
    """Conformal time left until the scale factor diverges.

    Equals sqrt(3) * integral_0^{1/a0} du / sqrt(M u^3 + Lambda); the
    integrand is smooth for Lambda > 0 so fixed-order Gauss-Legendre
    panels reach machine accuracy.
    """
    if Lambda <= 0.0:
        raise DomainError("remaining conformal time needs Lambda > 0")
    m = rho0 * a0 ** 3
    u0 = 1.0 / a0

    def f(u):
        return math.sqrt(3.0) / np.sqrt(m * u ** 3 + Lambda)

    return gauss_legendre_integral(f, 0.0, u0, n=64, panels=8)


def _u_rhs(m: float, lam: float):
    def rhs(tau, y):
        u = y[0]
        return np.array([-math.sqrt((m * u ** 3 + lam) / 3.0)])
    return rhs


def _state_from_u(tau: float, u: float, m: float, lam: float) -> BackgroundState:
    a = 1.0 / u
    h_cosmic = math.sqrt((m * u ** 3 + lam) / 3.0)
    a_prime = a * a * h_cosmic
    return BackgroundState(tau=tau, a=a, a_prime=a_prime,
                           rho_B=m * u ** 3, conf_H=a * h_cosmic)


def evolve_background(params: BackgroundParams, tau_grid,
                      spec: IntegratorSpec | None = None) -> list[BackgroundState]:
    """Integrate the background over a strictly increasing conformal-time grid.

    Every grid point must lie in [tau0, 0).  Raises DivergenceError naming
    the last valid tau if the scale factor blows up inside the grid (only
    possible when tau0 was overridden inconsistently).
    """
    taus = np.asarray(tau_grid, dtype=float)
    if taus.ndim != 1 or len(taus) == 0:
        raise InputError("tau_grid must be a non-empty 1-d sequence")
    if np.any(np.diff(taus) <= 0.0):
        raise InputError("tau_grid must be strictly increasing")
    if taus[0] < params.tau0 or taus[-1] >= 0.0:
        raise InputError("tau_grid must lie within [tau0, 0)")
    spec = spec or DEFAULT_SPEC
    m, lam = params.mass, params.Lambda
    u0 = 1.0 / params.a0
    rhs = _u_rhs(m, lam)

    states: list[BackgroundState] = []
    try:
        traj = integrate_ode(rhs, [u0], (params.tau0, taus[-1]), spec, t_eval=taus)
    except DivergenceError:
        raise
    for t in taus:
        u = float(traj.sample(t)[0])
        if u <= 0.0:
            raise DivergenceError(
                f"scale factor diverged before tau={t}", last_valid_tau=t)
        states.append(_state_from_u(t, u, m, lam))
    return states


class BackgroundTrajectory:
    """Callable background along a trajectory, for output and diagnostics.

    Mode evolutions do not interpolate this object; they co-integrate the
    inverse scale factor so that background values at integrator stage
    times are exact.
    """

    def __init__(self, params: BackgroundParams, traj: Trajectory):
        self.params = params
        self._traj = traj

    @classmethod
    def solve(cls, params: BackgroundParams, tau_end: float,
              spec: IntegratorSpec | None = None) -> "BackgroundTrajectory":
        if tau_end >= 0.0 or tau_end < params.tau0:
            raise InputError("tau_end must lie in [tau0, 0)")
        if spec is None:
            # knots dense enough that Hermite sampling keeps full accuracy
            span = tau_end - params.tau0
            spec = IntegratorSpec(abs_tol=1e-13, rel_tol=1e-12, max_step=span / 1024.0)
        traj = integrate_ode(_u_rhs(params.mass, params.Lambda), [1.0 / params.a0],
                             (params.tau0, tau_end), spec)
        return cls(params, traj)

    @property
    def tau_start(self) -> float:
        return float(self._traj.ts[0])

    @property
    def tau_end(self) -> float:
        return float(self._traj.ts[-1])

    def state(self, tau: float) -> BackgroundState:
        u = float(self._traj.sample(tau)[0])
        return _state_from_u(tau, u, self.params.mass, self.params.Lambda)


@dataclass(frozen=True)
class BackgroundPoint:
    """Background coefficients entering the perturbation equations at one tau."""

    tau: float
    a: float
    hconf: float        # a'/a
    rho_a2: float       # rho_B a^2 (may be signed on the continued branch)
    hconf_prime: float  # (a'/a)'


class NumericalBackground:
    """Full dust+Lambda background; co-integrates u = 1/a with the caller.

    The single co-state component makes background values at integrator
    stage times exact instead of interpolated.
    """

    co_state_dim = 1

    def __init__(self, params: BackgroundParams):
        self.params = params
        self.start_tau = params.tau0

    def initial_costate(self) -> np.ndarray:
        return np.array([1.0 / self.params.a0])

    def costate_rhs(self, tau: float, s: np.ndarray) -> np.ndarray:
        u = s[0]
        return np.array([-math.sqrt((self.params.mass * u ** 3 + self.params.Lambda) / 3.0)])

    def point(self, tau: float, s: np.ndarray) -> BackgroundPoint:
        u = s[0]
        if u <= 0.0:
            raise DivergenceError(f"scale factor diverged at tau={tau}", last_valid_tau=tau)
        m, lam = self.params.mass, self.params.Lambda
        a = 1.0 / u
        w2 = (m * u ** 3 + lam) / 3.0
        hconf = a * math.sqrt(w2)
        a_pp = 2.0 * a ** 3 * w2 - 0.5 * m
        return BackgroundPoint(tau=tau, a=a, hconf=hconf, rho_a2=m * u,
                               hconf_prime=a_pp / a - hconf ** 2)


class AsymptoticBackground:
    """Late-time closed-form background a = -sqrt(3/Lambda)/tau.

    density_branch selects the density coefficient rho_B a^2:
      "physical"  -> 2 A^2 |tau|  (positive density),
      "continued" -> 2 A^2 tau    (odd continuation; the branch on which
                     the printed Bessel-form scalar solution is exact).
    """

    co_state_dim = 0
    start_tau = None

    def __init__(self, Lambda: float, mass: float, density_branch: str = "physical"):
        if Lambda <= 0.0:
            raise DomainError("asymptotic background needs Lambda > 0")
        if density_branch not in ("physical", "continued"):
            raise InputError(f"unknown density branch {density_branch!r}")
        self.Lambda = Lambda
        self.mass = mass
        self.density_branch = density_branch
        self._sqrt_l3 = math.sqrt(Lambda / 3.0)

    def initial_costate(self) -> np.ndarray:
        return np.zeros(0)

    def costate_rhs(self, tau: float, s: np.ndarray) -> np.ndarray:
        return np.zeros(0)

    def point(self, tau: float, s: np.ndarray = None) -> BackgroundPoint:
        if tau >= 0.0:
            raise DomainError("asymptotic background defined for tau < 0")
        a = -1.0 / (self._sqrt_l3 * tau)
        signed = tau if self.density_branch == "continued" else -tau
        return BackgroundPoint(tau=tau, a=a, hconf=-1.0 / tau,
                               rho_a2=self.mass * self._sqrt_l3 * signed,
                               hconf_prime=1.0 / tau ** 2)


def asymptotic_scale_factor(Lambda: float, tau: float):
    """Late-time scale factor -sqrt(3/Lambda)/tau (tau < 0)."""
    if Lambda <= 0.0:
        raise DomainError("asymptotic scale factor needs Lambda > 0")
    tau = np.asarray(tau, dtype=float)
    if np.any(tau >= 0.0):
        raise DomainError("asymptotic scale factor needs tau < 0")
    out = -math.sqrt(3.0 / Lambda) / tau
    return float(out) if out.ndim == 0 else out


def coefficient_A(Lambda: float, rho0: float) -> float:
    """Growth coefficient A with A^2 = rho0 sqrt(Lambda/3) / 2."""
    if Lambda <= 0.0:
        raise DomainError("coefficient_A needs Lambda > 0")
    if rho0 < 0.0:
        raise DomainError("coefficient_A needs rho0 >= 0")
    return math.sqrt(0.5 * rho0 * math.sqrt(Lambda / 3.0))


def einstein_de_sitter_scale_factor(params: BackgroundParams, tau):
    """Closed-form dust solution for Lambda = 0 (test oracle).

    a(tau) = (sqrt(a0) + kappa (tau - tau0) / 2)^2, kappa = sqrt(M/3).
    """
    if params.Lambda != 0.0:
        raise InputError("closed form applies to Lambda = 0 only")
    kappa = math.sqrt(params.mass / 3.0)
    tau = np.asarray(tau, dtype=float)
    root = math.sqrt(params.a0) + 0.5 * kappa * (tau - params.tau0)
    return root ** 2
