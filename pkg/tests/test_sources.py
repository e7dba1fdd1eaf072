"""Source-assembly checks: closed-form homogeneous reduction, quadratic
scaling, and an independent brute-force finite-difference evaluator."""

import numpy as np
import pytest

from conftest import random_scalar, random_symtensor
from nohair.background import BackgroundPoint
from nohair.errors import InputError
from nohair.fields import Grid3, ScalarField, SymTensorField
from nohair.second_order import SourceTerms, assemble_sources

BG = BackgroundPoint(tau=-3.0, a=2.0, hconf=0.4, rho_a2=0.05, hconf_prime=0.01)


def _uniform_tensor(grid, diag):
    comps = np.zeros((6,) + grid.shape)
    comps[0] = comps[3] = comps[5] = diag
    return SymTensorField(grid, comps)


def test_zero_gamma_gives_zero_sources():
    grid = Grid3(8)
    zero_t = SymTensorField.zeros(grid)
    src = assemble_sources(zero_t, zero_t.copy(), zero_t.copy(), zero_t.copy(),
                           ScalarField(grid, np.full(grid.shape, 0.3)), BG)
    assert src.N1.max_abs() == 0.0
    assert src.N2.max_abs() == 0.0
    assert src.N3.max_abs() == 0.0
    assert src.N4.max_abs() == 0.0


def test_homogeneous_gamma_closed_forms():
    # gamma_ab = -2 phi(tau) delta_ab with spatially constant phi and delta0:
    # every comma term drops and the sources reduce to hand-derived scalars
    grid = Grid3(8)
    phi, dphi, ddphi, phi0, d0 = 3e-3, -2e-3, 5e-4, 1e-3, 7e-3
    gamma = _uniform_tensor(grid, -2.0 * phi)
    gamma_p = _uniform_tensor(grid, -2.0 * dphi)
    gamma_pp = _uniform_tensor(grid, -2.0 * ddphi)
    snap0 = _uniform_tensor(grid, -2.0 * phi0)
    delta0 = ScalarField(grid, np.full(grid.shape, d0))
    src = assemble_sources(gamma, gamma_p, gamma_pp, snap0, delta0, BG)

    H, R = BG.hconf, BG.rho_a2
    bracket = (-9.0 * (phi - phi0) ** 2 - 6.0 * (phi ** 2 - phi0 ** 2)
               - 6.0 * d0 * (phi - phi0))
    n1 = -(12.0 * dphi ** 2 + 24.0 * H * dphi * phi) / 6.0 \
        - 4.0 * phi * ddphi - (R / 6.0) * bracket
    n2 = -4.0 * H * phi * dphi - dphi ** 2 + (R / 6.0) * bracket
    n4_diag = dphi ** 2

    assert np.max(np.abs(src.N1.values - n1)) < 1e-10 * max(abs(n1), 1e-12)
    assert np.max(np.abs(src.N2.values - n2)) < 1e-10 * max(abs(n2), 1e-12)
    assert src.N3.max_abs() < 1e-14
    for i, expect in ((0, n4_diag), (3, n4_diag), (5, n4_diag),
                      (1, 0.0), (2, 0.0), (4, 0.0)):
        assert np.max(np.abs(src.N4.values[i] - expect)) < 1e-10 * abs(n4_diag)
    assert np.max(np.abs(src.N4_trace - 3.0 * n4_diag)) < 1e-10 * abs(n4_diag)


def test_quadratic_homogeneity(rng):
    grid = Grid3(16)
    gamma = random_symtensor(grid, rng, kmax=3, amplitude=1e-3)
    gamma_p = random_symtensor(grid, rng, kmax=3, amplitude=1e-3)
    gamma_pp = random_symtensor(grid, rng, kmax=3, amplitude=1e-3)
    snap0 = random_symtensor(grid, rng, kmax=3, amplitude=1e-3)
    delta0 = random_scalar(grid, rng, kmax=3, amplitude=1e-3)
    src1 = assemble_sources(gamma, gamma_p, gamma_pp, snap0, delta0, BG)

    lam = 3.7
    scaled = [SymTensorField(grid, lam * f.values)
              for f in (gamma, gamma_p, gamma_pp, snap0)]
    src2 = assemble_sources(*scaled, ScalarField(grid, lam * delta0.values), BG)

    for name in ("N1", "N2", "N3", "N4"):
        a = getattr(src1, name).values
        b = getattr(src2, name).values
        scale = np.max(np.abs(b)) or 1.0
        assert np.max(np.abs(lam ** 2 * a - b)) < 1e-10 * scale


def test_grid_mismatch_rejected():
    g1, g2 = Grid3(8), Grid3(16)
    zero1 = SymTensorField.zeros(g1)
    with pytest.raises(InputError):
        assemble_sources(zero1, zero1.copy(), zero1.copy(),
                         SymTensorField.zeros(g2), ScalarField.zeros(g1), BG)


# ---------------------------------------------------------------------------
# independent finite-difference evaluator (6th-order central stencils)
# ---------------------------------------------------------------------------

C1 = np.array([-1.0, 9.0, -45.0, 0.0, 45.0, -9.0, 1.0]) / 60.0
C2 = np.array([2.0, -27.0, 270.0, -490.0, 270.0, -27.0, 2.0]) / 180.0


def _fd(arr, axis, h, coeffs):
    out = np.zeros_like(arr)
    for j, c in zip(range(-3, 4), coeffs):
        if c != 0.0:
            out += c * np.roll(arr, -j, axis)
    return out / h


def _fd_sources(G, P, Q, G0, d0, bg, h):
    """Brute-force source evaluation, written directly from the printed
    equations with explicit loops (independent of the einsum assembly)."""
    d1 = {(c, a, b): _fd(G[a][b], c, h, C1)
          for c in range(3) for a in range(3) for b in range(3)}
    d1p = {(c, a, b): _fd(P[a][b], c, h, C1)
           for c in range(3) for a in range(3) for b in range(3)}
    d2 = {}
    for a in range(3):
        for b in range(3):
            for c in range(3):
                d2[(c, c, a, b)] = _fd(G[a][b], c, h * h, C2)
            d2[(0, 1, a, b)] = d2[(1, 0, a, b)] = _fd(d1[(0, a, b)], 1, h, C1)
            d2[(0, 2, a, b)] = d2[(2, 0, a, b)] = _fd(d1[(0, a, b)], 2, h, C1)
            d2[(1, 2, a, b)] = d2[(2, 1, a, b)] = _fd(d1[(1, a, b)], 2, h, C1)

    def tr(X):
        return X[0][0] + X[1][1] + X[2][2]

    def ddot(X, Y):
        return sum(X[a][b] * Y[a][b] for a in range(3) for b in range(3))

    H, R = bg.hconf, bg.rho_a2
    shape = G[0][0].shape
    trG, trP, trG0 = tr(G), tr(P), tr(G0)
    lap = {(a, b): sum(d2[(c, c, a, b)] for c in range(3))
           for a in range(3) for b in range(3)}
    bracket = (-0.25 * (trG - trG0) ** 2
               - 0.5 * (ddot(G, G) - ddot(G0, G0)) + d0 * (trG - trG0))

    n1 = np.zeros(shape)
    for a in range(3):
        for b in range(3):
            n1 += -(1.0 / 6.0) * P[a][b] * (P[a][b] + 2.0 * H * G[a][b])
            n1 += -(1.0 / 3.0) * G[a][b] * Q[a][b]
    n1 += -(R / 6.0) * bracket

    n2 = np.zeros(shape)
    n2 += -(H / 3.0) * ddot(G, P)
    n2 += (1.0 / 24.0) * (ddot(P, P) - trP * trP)
    inner = np.zeros(shape)
    for a in range(3):
        for b in range(3):
            inner += G[a][b] * (lap[(a, b)]
                                + sum(d2[(a, b, d, d)] for d in range(3))
                                - 2.0 * sum(d2[(b, d, d, a)] for d in range(3)))
    for a in range(3):
        div_a = sum(d1[(d, d, a)] for d in range(3))
        inner += div_a * (sum(d1[(a, b, b)] for b in range(3)) - div_a)
    for a in range(3):
        for b in range(3):
            for d in range(3):
                inner += 0.75 * d1[(d, a, b)] * d1[(d, a, b)]
                inner += -0.5 * d1[(d, a, b)] * d1[(b, d, a)]
    grad_tr = [sum(d1[(d, a, a)] for a in range(3)) for d in range(3)]
    for d in range(3):
        inner += -0.25 * grad_tr[d] * grad_tr[d]
    n2 += inner / 6.0 + (R / 6.0) * bracket

    n3 = []
    for b in range(3):
        acc = np.zeros(shape)
        for a in range(3):
            for d in range(3):
                acc += G[a][d] * (d1p[(a, b, d)] - d1p[(b, a, d)])
        for d in range(3):
            acc += sum(d1[(a, a, d)] for a in range(3)) * P[b][d]
        for a in range(3):
            for d in range(3):
                acc += -0.5 * d1[(b, a, d)] * P[a][d]
        for d in range(3):
            acc += -0.5 * grad_tr[d] * P[d][b]
        n3.append(acc)

    div_div = sum(d2[(n, d, n, d)] for n in range(3) for d in range(3))
    lap_tr = sum(lap[(a, a)] for a in range(3))
    n4 = [[np.zeros(shape) for _ in range(3)] for _ in range(3)]
    for a in range(3):
        for b in range(3):
            acc = np.zeros(shape)
            for d in range(3):
                acc += P[a][d] * P[d][b]
            acc += -0.5 * trP * P[a][b]
            if a == b:
                acc += 0.125 * (trP * trP - ddot(P, P))
            big = np.zeros(shape)
            big += -G[a][b] * (div_div - lap_tr)
            for d in range(3):
                for n in range(3):
                    big += 2.0 * G[d][n] * (d2[(d, n, a, b)] + d2[(a, b, d, n)]
                                            - d2[(b, d, a, n)] - d2[(a, d, n, b)])
            for n in range(3):
                div_n = sum(d1[(d, d, n)] for d in range(3))
                big += 2.0 * div_n * (d1[(n, a, b)] - d1[(b, a, n)] - d1[(a, b, n)])
            for e in range(3):
                for n in range(3):
                    big += 2.0 * d1[(n, e, a)] * d1[(n, b, e)]
                    big += -2.0 * d1[(n, e, a)] * d1[(e, n, b)]
                    big += d1[(b, e, n)] * d1[(a, e, n)]
            for e in range(3):
                big += grad_tr[e] * (d1[(b, e, a)] + d1[(a, e, b)] - d1[(e, a, b)])
            if a == b:
                inner4 = np.zeros(shape)
                for d in range(3):
                    for n in range(3):
                        inner4 += -G[d][n] * (lap[(d, n)]
                                              + sum(d2[(d, n, m, m)] for m in range(3))
                                              - 2.0 * sum(d2[(m, n, m, d)] for m in range(3)))
                for d in range(3):
                    div_d = sum(d1[(n, n, d)] for n in range(3))
                    inner4 += -div_d * (grad_tr[d] - div_d)
                for d in range(3):
                    for n in range(3):
                        for m in range(3):
                            inner4 += -0.75 * d1[(m, d, n)] * d1[(m, d, n)]
                            inner4 += 0.5 * d1[(m, d, n)] * d1[(n, m, d)]
                for m in range(3):
                    inner4 += 0.25 * grad_tr[m] * grad_tr[m]
                big += inner4
            n4[a][b] = acc - 0.5 * big
    return n1, n2, n3, n4


def _mats(field: SymTensorField):
    m = field.as_matrix()
    return [[m[a, b] for b in range(3)] for a in range(3)]


@pytest.mark.parametrize("case", ["tt_wave", "random"])
def test_fd_oracle_matches_spectral_assembly(case, rng):
    grid = Grid3(64)
    if case == "tt_wave":
        x, y, z = grid.coords()
        wave = 1e-3 * np.cos(grid.dk * z)
        wave_p = -4e-4 * np.cos(grid.dk * z)
        wave_pp = 2e-4 * np.cos(grid.dk * z)
        comps = np.zeros((6,) + grid.shape)
        fields = []
        for w in (wave, wave_p, wave_pp):
            c = comps.copy()
            c[0] = np.broadcast_to(w, grid.shape)
            c[3] = -c[0]
            fields.append(SymTensorField(grid, c))
        gamma, gamma_p, gamma_pp = fields
        snap0 = gamma.copy()
        delta0 = ScalarField(grid, np.full(grid.shape, 1e-3))
    else:
        gamma = random_symtensor(grid, rng, kmax=2, amplitude=1e-3)
        gamma_p = random_symtensor(grid, rng, kmax=2, amplitude=1e-3)
        gamma_pp = random_symtensor(grid, rng, kmax=2, amplitude=1e-3)
        snap0 = random_symtensor(grid, rng, kmax=2, amplitude=1e-3)
        delta0 = random_scalar(grid, rng, kmax=2, amplitude=1e-3)

    src = assemble_sources(gamma, gamma_p, gamma_pp, snap0, delta0, BG)
    h = grid.box_len / grid.n
    n1, n2, n3, n4 = _fd_sources(_mats(gamma), _mats(gamma_p), _mats(gamma_pp),
                                 _mats(snap0), delta0.values, BG, h)

    overall = max(np.max(np.abs(arr)) for arr in
                  (n1, n2, *n3, *(n4[a][b] for a in range(3) for b in range(3))))

    def rel(a, b):
        return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-6 * overall)

    assert rel(src.N1.values, n1) < 1e-5
    assert rel(src.N2.values, n2) < 1e-5
    for b in range(3):
        assert rel(src.N3.values[b], n3[b]) < 1e-5
    for a in range(3):
        for b in range(3):
            assert rel(src.N4.component(a, b), n4[a][b]) < 1e-5
