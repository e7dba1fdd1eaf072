"""Special functions and ODE integration engines.

Bessel functions are implemented in-repo (power series plus large-argument
asymptotics) because the order-2/3 evaluations serve as certified oracles
for the analytic perturbation solutions.  The two ODE engines (fixed-step
RK4 and an adaptive Dormand-Prince 5(4) pair) are kept independent so one
can always cross-check the other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, DomainError, InputError, RangeError, RhsError

_LD = np.longdouble
_SERIES_ASYMPTOTIC_CROSSOVER = 14.0
_MAX_SERIES_TERMS = 400


# ---------------------------------------------------------------------------
# Bessel functions
# ---------------------------------------------------------------------------

def _series_j(nu: float, x: float) -> float:
    """Power series for J_nu(x), accumulated in 80-bit precision.

    Terms are generated recursively so each carries only a relative
    rounding error; the cancellation floor is then ~max|term| * 1e-19.
    Valid for x below the asymptotic crossover.
    """
    xl = _LD(x)
    q = xl * xl / _LD(4)
    term = _LD(0.5) ** _LD(nu) * xl ** _LD(nu) / _LD(math.gamma(nu + 1.0))
    total = term
    for m in range(1, _MAX_SERIES_TERMS):
        term = -term * q / (_LD(m) * _LD(nu + m))
        total += term
        if abs(term) <= abs(total) * _LD(1e-25):
            break
    else:
        raise DomainError(f"Bessel series failed to converge at nu={nu}, x={x}")
    return float(total)


def _series_i(nu: float, x: float) -> float:
    """Power series for the modified Bessel function I_nu(x) (all terms positive)."""
    xl = _LD(x)
    q = xl * xl / _LD(4)
    term = _LD(0.5) ** _LD(nu) * xl ** _LD(nu) / _LD(math.gamma(nu + 1.0))
    total = term
    for m in range(1, _MAX_SERIES_TERMS):
        term = term * q / (_LD(m) * _LD(nu + m))
        total += term
        if abs(term) <= abs(total) * _LD(1e-25):
            break
    else:
        raise DomainError(f"modified Bessel series failed to converge at nu={nu}, x={x}")
    return float(total)


def _hankel_pq(nu: float, x: float) -> tuple[float, float]:
    """P and Q factors of the large-argument expansion of J/Y.

    J_nu = sqrt(2/? x) (P cos w - Q sin w), Y_nu = sqrt(2/? x) (P sin w + Q cos w)
    with w = x - (nu/2 + 1/4) pi.  Truncated at the smallest term; for
    x >= 14 the optimal-truncation error is ~1e-13 or below.
    """
    mu = _LD(4.0 * nu * nu)
    inv8x = _LD(1.0) / (_LD(8.0) * _LD(x))
    p = _LD(1.0)
    q = _LD(0.0)
    term = _LD(1.0)
    prev = None
    for k in range(1, 60):
        term = term * (mu - _LD((2 * k - 1) ** 2)) * inv8x / _LD(k)
        if prev is not None and abs(term) > prev:
            break  # divergent tail reached; stop at the smallest term
        prev = abs(term)
        if k % 2 == 0:
            p += term if k % 4 == 0 else -term
        else:
            q += term if k % 4 == 1 else -term
        if abs(term) < _LD(1e-22):
            break
    return float(p), float(q)


def _asymptotic_jy(nu: float, x: float) -> tuple[float, float]:
    p, q = _hankel_pq(nu, x)
    w = x - (0.5 * nu + 0.25) * math.pi
    amp = math.sqrt(2.0 / (math.pi * x))
    cw, sw = math.cos(w), math.sin(w)
    return amp * (p * cw - q * sw), amp * (p * sw + q * cw)


def bessel_j(nu: float, x: float) -> float:
    """Bessel function of the first kind, real order, x > 0."""
    if x <= 0.0:
        raise DomainError(f"bessel_j requires x > 0, got {x}")
    if x < _SERIES_ASYMPTOTIC_CROSSOVER:
        return _series_j(nu, x)
    return _asymptotic_jy(nu, x)[0]


def bessel_y(nu: float, x: float) -> float:
    """Bessel function of the second kind via the reflection formula.

    Only non-integer orders are supported (sin(nu pi) appears in the
    denominator); that covers every order this package needs.
    """
    if x <= 0.0:
        raise DomainError(f"bessel_y requires x > 0, got {x}")
    s = math.sin(math.pi * nu)
    if abs(s) < 1e-8:
        raise DomainError(f"bessel_y supports non-integer orders only, got nu={nu}")
    if x >= _SERIES_ASYMPTOTIC_CROSSOVER:
        return _asymptotic_jy(nu, x)[1]
    jp = _series_j(nu, x)
    jm = _series_j(-nu, x)
    return (jp * math.cos(math.pi * nu) - jm) / s


def bessel_jy(nu: float, x: float) -> tuple[float, float]:
    """(J_nu(x), Y_nu(x)) for x > 0."""
    if x <= 0.0:
        raise DomainError(f"bessel_jy requires x > 0, got {x}")
    if x >= _SERIES_ASYMPTOTIC_CROSSOVER:
        return _asymptotic_jy(nu, x)
    return bessel_j(nu, x), bessel_y(nu, x)


def bessel_i(nu: float, x: float) -> float:
    """Modified Bessel function of the first kind, real order, x >= 0."""
    if x < 0.0:
        raise DomainError(f"bessel_i requires x >= 0, got {x}")
    if x == 0.0:
        if nu == 0.0:
            return 1.0
        if nu > 0.0:
            return 0.0
        raise DomainError("bessel_i diverges at x=0 for negative order")
    if x < 30.0:
        return _series_i(nu, x)
    # large-argument expansion: I ~ e^x/sqrt(2 pi x) sum (-1)^k a_k(nu)/x^k
    mu = _LD(4.0 * nu * nu)
    inv8x = _LD(1.0) / (_LD(8.0) * _LD(x))
    total = _LD(1.0)
    term = _LD(1.0)
    for k in range(1, 60):
        term = -term * (mu - _LD((2 * k - 1) ** 2)) * inv8x / _LD(k)
        total += term
        if abs(term) < _LD(1e-22):
            break
    return float(math.exp(x) / math.sqrt(2.0 * math.pi * x) * float(total))


def bessel_j_prime(nu: float, x: float) -> float:
    """dJ_nu/dx via the three-term recurrence."""
    return 0.5 * (bessel_j(nu - 1.0, x) - bessel_j(nu + 1.0, x))


def bessel_y_prime(nu: float, x: float) -> float:
    """dY_nu/dx via the three-term recurrence."""
    return 0.5 * (bessel_y(nu - 1.0, x) - bessel_y(nu + 1.0, x))


# ---------------------------------------------------------------------------
# ODE integration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IntegratorSpec:
    """Method selection and tolerances for integrate_ode."""

    method: str = "rk45_adaptive"
    abs_tol: float = 1e-12
    rel_tol: float = 1e-10
    max_step: float = math.inf
    min_step: float = 0.0

    def __post_init__(self):
        if self.method not in ("rk4_fixed", "rk45_adaptive"):
            raise InputError(f"unknown integrator method {self.method!r}")
        if self.abs_tol <= 0.0 or self.rel_tol <= 0.0:
            raise InputError("integrator tolerances must be positive")
        if not self.min_step < self.max_step:
            raise InputError("min_step must be smaller than max_step")


class Trajectory:
    """Accepted integration knots with cubic-Hermite sampling between them.

    When output times are passed to integrate_ode the integrator lands on
    them exactly, so sampled values carry full integrator accuracy; the
    Hermite interpolant is a convenience for off-knot queries.
    """

    def __init__(self, ts: np.ndarray, ys: np.ndarray, fs: np.ndarray):
        self.ts = ts
        self.ys = ys
        self.fs = fs

    def __len__(self) -> int:
        return len(self.ts)

    def sample(self, t: float) -> np.ndarray:
        ts = self.ts
        lo, hi = min(ts[0], ts[-1]), max(ts[0], ts[-1])
        if not lo <= t <= hi:
            raise RangeError(f"t={t} outside trajectory range [{lo}, {hi}]")
        idx = np.searchsorted(ts, t) if ts[-1] >= ts[0] else len(ts) - np.searchsorted(ts[::-1], t)
        idx = int(np.clip(idx, 1, len(ts) - 1))
        t0, t1 = ts[idx - 1], ts[idx]
        if t == t0:
            return self.ys[idx - 1].copy()
        if t == t1:
            return self.ys[idx].copy()
        h = t1 - t0
        s = (t - t0) / h
        h00 = (1 + 2 * s) * (1 - s) ** 2
        h10 = s * (1 - s) ** 2
        h01 = s * s * (3 - 2 * s)
        h11 = s * s * (s - 1)
        return (h00 * self.ys[idx - 1] + h * h10 * self.fs[idx - 1]
                + h01 * self.ys[idx] + h * h11 * self.fs[idx])


def _check_rhs(value: np.ndarray, t: float) -> np.ndarray:
    value = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(value)):
        raise RhsError(f"ODE right-hand side returned non-finite values at t={t}")
    return value


# Dormand-Prince 5(4) tableau.
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_ERR = _DP_B5 - np.array(
    [5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])


def _integrate_rk45(rhs, y0, t0, t1, spec, stops):
    direction = 1.0 if t1 >= t0 else -1.0
    ts = [t0]
    ys = [y0.copy()]
    f = _check_rhs(rhs(t0, y0), t0)
    fs = [f.copy()]
    t, y = t0, y0.copy()
    span = abs(t1 - t0)
    h = min(spec.max_step, span / 100.0) or span / 100.0
    stop_iter = iter(stops)
    next_stop = next(stop_iter, t1)
    min_step = spec.min_step if spec.min_step > 0 else span * 1e-14
    k = np.empty((7,) + y0.shape)
    while direction * (t1 - t) > 0:
        hit_stop = False
        if direction * (next_stop - t) <= h:
            h = direction * (next_stop - t)
            hit_stop = True
        if h < min_step:
            raise DivergenceError(
                f"step size underflow at t={t}", last_valid_tau=t)
        k[0] = f
        for i in range(1, 7):
            yi = y + direction * h * np.tensordot(_DP_A[i], k[:i], axes=(0, 0))
            k[i] = _check_rhs(rhs(t + direction * h * _DP_C[i], yi), t)
        y_new = y + direction * h * np.tensordot(_DP_B5, k, axes=(0, 0))
        err_vec = h * np.tensordot(_DP_ERR, k, axes=(0, 0))
        scale = spec.abs_tol + spec.rel_tol * np.maximum(np.abs(y), np.abs(y_new))
        err = math.sqrt(float(np.mean((err_vec / scale) ** 2)))
        if err <= 1.0:
            t = next_stop if hit_stop else t + direction * h
            y = y_new
            f = k[6].copy()  # FSAL
            ts.append(t)
            ys.append(y.copy())
            fs.append(f.copy())
            if hit_stop:
                next_stop = next(stop_iter, t1)
        factor = 0.9 * err ** -0.2 if err > 0 else 5.0
        h = min(h * min(5.0, max(0.2, factor)), spec.max_step)
    return Trajectory(np.array(ts), np.array(ys), np.array(fs))


def _integrate_rk4(rhs, y0, t0, t1, spec, stops):
    direction = 1.0 if t1 >= t0 else -1.0
    if not math.isfinite(spec.max_step):
        raise InputError("rk4_fixed requires a finite max_step")
    ts = [t0]
    ys = [y0.copy()]
    fs = [_check_rhs(rhs(t0, y0), t0).copy()]
    t, y = t0, y0.copy()
    segments = list(stops)
    if not segments or segments[-1] != t1:
        segments.append(t1)
    for seg_end in segments:
        seg = abs(seg_end - t)
        if seg == 0.0:
            continue
        nsteps = max(1, math.ceil(seg / spec.max_step))
        h = direction * seg / nsteps
        for i in range(nsteps):
            k1 = _check_rhs(rhs(t, y), t)
            k2 = _check_rhs(rhs(t + 0.5 * h, y + 0.5 * h * k1), t)
            k3 = _check_rhs(rhs(t + 0.5 * h, y + 0.5 * h * k2), t)
            k4 = _check_rhs(rhs(t + h, y + h * k3), t)
            y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            t = seg_end if i == nsteps - 1 else t + h
            ts.append(t)
            ys.append(y.copy())
            fs.append(_check_rhs(rhs(t, y), t).copy())
    return Trajectory(np.array(ts), np.array(ys), np.array(fs))


def integrate_ode(rhs, init, t_span, spec: IntegratorSpec | None = None,
                  t_eval=None) -> Trajectory:
    """Integrate y' = rhs(t, y) over t_span = (t0, t1).

    t_eval lists times the integrator must land on exactly (they become
    trajectory knots); they must lie inside t_span and be ordered in the
    direction of integration.
    """
    spec = spec or IntegratorSpec()
    t0, t1 = float(t_span[0]), float(t_span[1])
    y0 = np.atleast_1d(np.asarray(init, dtype=float)).copy()
    direction = 1.0 if t1 >= t0 else -1.0
    stops: list[float] = []
    if t_eval is not None:
        prev = t0
        for t in t_eval:
            t = float(t)
            if direction * (t - prev) < 0 or direction * (t1 - t) < 0:
                raise InputError("t_eval must be ordered and inside t_span")
            if t != prev:
                stops.append(t)
            prev = t
    if spec.method == "rk4_fixed":
        return _integrate_rk4(rhs, y0, t0, t1, spec, stops)
    return _integrate_rk45(rhs, y0, t0, t1, spec, stops)


# ---------------------------------------------------------------------------
# Small numerical utilities
# ---------------------------------------------------------------------------

def gauss_legendre_integral(f, a: float, b: float, n: int = 64,
                            panels: int = 4) -> float:
    """Composite Gauss-Legendre quadrature of a smooth scalar function."""
    nodes, weights = np.polynomial.legendre.leggauss(n)
    total = 0.0
    edges = np.linspace(a, b, panels + 1)
    for lo, hi in zip(edges[:-1], edges[1:]):
        mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
        x = mid + half * nodes
        total += half * float(np.dot(weights, f(x)))
    return total


def fd_weights(nodes: np.ndarray, x0: float, order: int) -> np.ndarray:
    """Finite-difference weights on arbitrary nodes (Fornberg's algorithm).

    Returns w such that sum(w * f(nodes)) approximates the order-th
    derivative of f at x0.
    """
    nodes = np.asarray(nodes, dtype=float)
    n = len(nodes)
    if order >= n:
        raise InputError("need more nodes than the derivative order")
    c = np.zeros((n, order + 1))
    c[0, 0] = 1.0
    c1 = 1.0
    c4 = nodes[0] - x0
    for i in range(1, n):
        mn = min(i, order)
        c2 = 1.0
        c5 = c4
        c4 = nodes[i] - x0
        for j in range(i):
            c3 = nodes[i] - nodes[j]
            c2 *= c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    c[i, k] = c1 * (k * c[i - 1, k - 1] - c5 * c[i - 1, k]) / c2
                c[i, 0] = -c1 * c5 * c[i - 1, 0] / c2
            for k in range(mn, 0, -1):
                c[j, k] = (c4 * c[j, k] - k * c[j, k - 1]) / c3
            c[j, 0] = c4 * c[j, 0] / c3
        c1 = c2
    return c[:, order]
