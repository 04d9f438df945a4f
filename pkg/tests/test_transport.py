import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from slab_mlmc.errors import ConvergenceError, RefinementExhausted
from slab_mlmc.quadrature import double_gauss
from slab_mlmc.specfun import exp_integral_e1, exp_integral_e2
from slab_mlmc.transport import (CoefficientSample, CouplingPolicy, Mesh, StabilityParams,
                                 analytic_pure_absorber, apply_discrete_k, boundary_defect,
                                 direct_solve, scheme_residual, solve, source_iteration,
                                 stability_constants, stable_mesh_width, sweep, _stability_lhs)


def smooth_coeffs(m, scale=1.0):
    mesh = Mesh.uniform(m)
    return CoefficientSample.from_functions(
        mesh, lambda x: scale * (0.8 + 0.5 * np.sin(2 * np.pi * x)),
        lambda x: scale * (0.6 + 0.3 * x), lambda x: 1.0 + x * x)


def random_coeffs(rng, m, ratio_max=0.9):
    mesh = Mesh.uniform(m)
    sig = rng.uniform(0.5, 4.0, m)
    sig_s = sig * rng.uniform(0.05, ratio_max, m)
    return CoefficientSample(mesh, sig, sig_s, rng.uniform(0.0, 3.0, m))


# -- mesh and coefficients ---------------------------------------------------------

def test_mesh_derived_quantities():
    mesh = Mesh(np.array([0.0, 0.1, 0.4, 1.0]))
    assert mesh.cells == 3
    np.testing.assert_allclose(mesh.widths, [0.1, 0.3, 0.6])
    assert mesh.h == pytest.approx(0.6)
    assert mesh.rho == pytest.approx(6.0)


@pytest.mark.parametrize("nodes", [[0.0], [0.1, 1.0], [0.0, 0.9], [0.0, 0.5, 0.5, 1.0], [0.0, 0.7, 0.3, 1.0]])
def test_mesh_rejects_bad_nodes(nodes):
    with pytest.raises(ValueError):
        Mesh(np.array(nodes))


def test_mesh_breakpoints_resolved():
    mesh = Mesh.uniform(10, (0.0, 0.3, 1.0))
    assert 0.3 in mesh.nodes.tolist()
    with pytest.raises(ValueError):
        Mesh.uniform(4, (0.0, 0.3, 1.0))
    assert mesh.piece_index().tolist() == [0, 0, 0] + [1] * 7


def test_mesh_coarsen():
    assert Mesh.uniform(16).coarsen().nodes.tolist() == Mesh.uniform(8).nodes.tolist()
    with pytest.raises(ValueError):
        Mesh.uniform(5).coarsen()


def test_coefficients_validation():
    mesh = Mesh.uniform(4)
    one = np.ones(4)
    with pytest.raises(ValueError):
        CoefficientSample(mesh, one, one, one)  # no absorption
    with pytest.raises(ValueError):
        CoefficientSample(mesh, -one, 0 * one, one)
    with pytest.raises(ValueError):
        CoefficientSample(mesh, one, -0.1 * one, one)
    with pytest.raises(ValueError):
        CoefficientSample(mesh, np.ones(3), np.zeros(3), np.ones(3))
    c = CoefficientSample(mesh, 2 * one, one, one)
    assert c.scattering_ratio_sup == 0.5


# -- sweep ------------------------------------------------------------------------

def test_sweep_zero_source():
    mesh = Mesh.uniform(16)
    assert np.all(sweep(mesh, np.ones(16), np.zeros(16), 0.3) == 0.0)
    assert np.all(sweep(mesh, np.ones(16), np.zeros(16), -0.3) == 0.0)


def test_sweep_rejects_zero_mu():
    mesh = Mesh.uniform(4)
    with pytest.raises(ValueError):
        sweep(mesh, np.ones(4), np.ones(4), 0.0)


def test_sweep_second_order_against_exact():
    errs = []
    for m in (64, 128, 256):
        mesh = Mesh.uniform(m)
        u = sweep(mesh, np.ones(m), np.ones(m), 1.0)
        errs.append(np.max(np.abs(u - (1 - np.exp(-mesh.nodes)))))
    assert errs[0] <= 0.01 * (1 / 64) ** 2 * 64  # C h^2 with modest C
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    np.testing.assert_allclose(ratios, 4.0, rtol=0.02)


def test_sweep_mirror_symmetry():
    rng = np.random.default_rng(3)
    m = 37
    nodes = np.concatenate([[0.0], np.sort(rng.uniform(0, 1, m - 1)), [1.0]])
    mesh = Mesh(nodes)
    mirrored = Mesh(1.0 - nodes[::-1])
    sig, src = rng.uniform(0.5, 3, m), rng.uniform(0, 2, m)
    fwd = sweep(mesh, sig, src, 0.4)
    back = sweep(mirrored, sig[::-1], src[::-1], -0.4)
    np.testing.assert_allclose(back[::-1], fwd, rtol=1e-13, atol=1e-15)


@given(st.integers(0, 10 ** 6), st.floats(0.01, 1.0), st.booleans())
@settings(max_examples=60, deadline=None)
def test_sweep_cell_equations(seed, mu, neg):
    rng = np.random.default_rng(seed)
    m = 50
    mesh = Mesh(np.concatenate([[0.0], np.sort(rng.uniform(0, 1, m - 1)), [1.0]])) if seed % 2 else Mesh.uniform(m)
    sig, src = rng.uniform(0.1, 20, m), rng.uniform(-1, 1, m)
    mu = -mu if neg else mu
    u = sweep(mesh, sig, src, mu)
    res = mu * np.diff(u) / mesh.widths + sig * 0.5 * (u[1:] + u[:-1]) - src
    # round-off in evaluating the residual itself: each term is exact to a few ulps
    a = np.abs(u[1:]) + np.abs(u[:-1])
    scale = abs(mu) * a / mesh.widths + sig * a + np.abs(src)
    assert np.all(np.abs(res) <= 16 * np.finfo(float).eps * scale)
    assert (u[0] if mu > 0 else u[-1]) == 0.0


def test_sweep_stability_bound_randomized():
    rng = np.random.default_rng(11)
    for _ in range(100):
        m = int(rng.integers(4, 80))
        nodes = np.concatenate([[0.0], np.sort(rng.uniform(0, 1, m - 1)), [1.0]])
        if np.min(np.diff(nodes)) < 1e-4:
            continue
        mesh = Mesh(nodes)
        sig, g = rng.uniform(0.2, 10, m), rng.uniform(0, 5, m)
        mu = float(rng.choice([-1, 1]) * rng.uniform(0.01, 1.0))
        u = sweep(mesh, sig, g, mu)
        bound = 2 * mesh.rho / sig.min() * (1 + sig.max() * mesh.h / abs(mu)) * g.max()
        assert np.max(np.abs(u)) <= bound


# -- discrete K and pure absorber oracle ----------------------------------------------

def test_apply_k_zero_source():
    mesh = Mesh.uniform(8)
    assert np.all(apply_discrete_k(mesh, np.ones(8), double_gauss(4), np.zeros(8)).nodal == 0.0)


def test_pure_absorber_at_midpoint():
    m = 256
    phi = apply_discrete_k(Mesh.uniform(m), np.ones(m), double_gauss(32), np.ones(m))
    exact = 1 - exp_integral_e2(0.5)
    assert exact == pytest.approx(0.6733561, abs=1e-7)
    assert abs(phi(0.5) - exact) <= 2e-3


def test_k_converges_to_e1_kernel_integral():
    m = 512
    mesh = Mesh.uniform(m)
    f = lambda y: 1.0 + y
    x = 0.3
    left, _ = integrate.quad(lambda y: exp_integral_e1(x - y) * f(y), 0, x, limit=200)
    right, _ = integrate.quad(lambda y: exp_integral_e1(y - x) * f(y), x, 1, limit=200)
    ref = 0.5 * (left + right)
    errs = []
    for n in (4, 16, 64):
        phi = apply_discrete_k(mesh, np.ones(m), double_gauss(n), f(mesh.midpoints))
        errs.append(abs(phi(x) - ref))
    assert errs[-1] <= 1e-3
    assert errs[-1] < errs[0]


def test_analytic_pure_absorber_values():
    assert analytic_pure_absorber(1.0, 0.5) == pytest.approx(1 - exp_integral_e2(0.5), rel=1e-14)
    s = 1.7
    assert analytic_pure_absorber(s, 0.0) == pytest.approx((1 - exp_integral_e2(s)) / (2 * s), rel=1e-14)
    for x in (0.1, 0.3):
        assert analytic_pure_absorber(s, x) == pytest.approx(analytic_pure_absorber(s, 1 - x), rel=1e-14)


# -- solvers ---------------------------------------------------------------------------

def test_no_scattering_converges_in_one_iteration():
    m = 32
    c = CoefficientSample.from_functions(Mesh.uniform(m), 0.0, 1.3, lambda x: 1 + x)
    rule = double_gauss(6)
    phi, psi, stats = source_iteration(c, rule)
    assert stats.iterations == 1
    np.testing.assert_allclose(phi.nodal, apply_discrete_k(c.mesh, c.sigma_mid, rule, c.f_mid).nodal, rtol=1e-14)


def test_source_iteration_matches_direct():
    c = CoefficientSample.from_functions(Mesh.uniform(64), 1.0, 1.0, 1.0)
    rule = double_gauss(16)
    a, _, _ = source_iteration(c, rule, tol=1e-10)
    b, _, _ = direct_solve(c, rule)
    assert np.max(np.abs(a.nodal - b.nodal)) <= 1e-8


def test_cross_solver_heterogeneous():
    c = smooth_coeffs(96)
    rule = double_gauss(12)
    a, _, _ = solve(c, rule, "source_iteration", tol=1e-12)
    b, _, _ = solve(c, rule, "direct")
    assert np.max(np.abs(a.nodal - b.nodal)) <= 1e-8


def test_direct_without_scattering_is_k_of_f():
    c = CoefficientSample.from_functions(Mesh.uniform(40), 0.0, lambda x: 1 + x, lambda x: np.cos(x))
    rule = double_gauss(5)
    phi, _, _ = direct_solve(c, rule)
    ref = apply_discrete_k(c.mesh, c.sigma_mid, rule, c.f_mid)
    assert np.max(np.abs(phi.nodal - ref.nodal)) <= 1e-12


def test_direct_work_scaling():
    ms = np.array([32, 64, 128])
    work = []
    for m in ms:
        c = smooth_coeffs(int(m))
        work.append(direct_solve(c, double_gauss(int(m) // 2))[2].work_units)
    slope = np.polyfit(np.log(ms), np.log(work), 1)[0]
    assert abs(slope - 3.0) < 0.15


def test_iterations_scale_with_log_tol():
    m = 64
    c = CoefficientSample.from_functions(Mesh.uniform(m), 9.0, 1.0, 1.0)
    rule = double_gauss(8)
    i1 = source_iteration(c, rule, tol=1e-5)[2].iterations
    i2 = source_iteration(c, rule, tol=1e-10)[2].iterations
    assert 1.6 <= i2 / i1 <= 2.4


def test_convergence_error_carries_residual():
    c = CoefficientSample.from_functions(Mesh.uniform(16), 9.0, 1.0, 1.0)
    with pytest.raises(ConvergenceError) as err:
        source_iteration(c, double_gauss(4), tol=1e-12, max_iter=3)
    assert err.value.residual > 0 and err.value.iterations == 3


def test_invalid_tolerance():
    with pytest.raises(ValueError):
        source_iteration(smooth_coeffs(8), double_gauss(2), tol=0.0)


def test_work_units_definition():
    c = smooth_coeffs(32)
    rule = double_gauss(7)
    _, _, stats = source_iteration(c, rule)
    assert stats.work_units == stats.iterations * 32 * 14
    assert stats.work_units > 0


def test_scheme_residual_randomised_fields():
    rng = np.random.default_rng(2024)
    tol = 1e-10
    for _ in range(50):
        c = random_coeffs(rng, int(rng.integers(8, 120)))
        rule = double_gauss(int(rng.integers(1, 12)))
        phi, psi, stats = source_iteration(c, rule, tol=tol)
        assert scheme_residual(c, psi) <= 10 * tol
        assert boundary_defect(psi) == 0.0
        # midpoint storage consistency
        mid = 0.5 * np.sum(rule.w[:, None] * 0.5 * (psi.psi[:, 1:] + psi.psi[:, :-1]), axis=0)
        np.testing.assert_allclose(phi.midpoint, mid, rtol=0, atol=1e-14 * max(1.0, np.max(np.abs(mid))))


def test_direct_scheme_residual():
    c = random_coeffs(np.random.default_rng(5), 60)
    phi, psi, stats = direct_solve(c, double_gauss(9))
    assert scheme_residual(c, psi) <= 1e-10
    assert boundary_defect(psi) == 0.0
    assert stats.final_residual <= 1e-12


def test_scalar_flux_midpoint_consistency():
    phi, _, _ = source_iteration(smooth_coeffs(33), double_gauss(5))
    np.testing.assert_allclose(phi.midpoint, 0.5 * (phi.nodal[1:] + phi.nodal[:-1]), atol=1e-14)


def test_mesh_refinement_differences_decrease():
    diffs = []
    prev = None
    for m in (16, 32, 64, 128, 256):
        phi, _, _ = source_iteration(smooth_coeffs(m), double_gauss(8), tol=1e-12)
        if prev is not None:
            diffs.append(np.max(np.abs(phi.nodal[::2] - prev.nodal)))
        prev = phi
    assert all(a > b for a, b in zip(diffs, diffs[1:]))


def test_solver_choice_validation():
    from slab_mlmc.errors import ConfigError
    with pytest.raises(ConfigError):
        solve(smooth_coeffs(8), double_gauss(2), "gmres")


# -- coupling and stability --------------------------------------------------------------

def test_coupling_policies():
    assert CouplingPolicy("sqrt")(1 / 64) == 2 * 16
    assert CouplingPolicy("linear")(1 / 64) == 32
    assert CouplingPolicy.parse("power(2,0.5)")(1 / 16) == 8
    assert str(CouplingPolicy.parse("power(2,0.5)")) == "power(2,0.5)"


def test_stability_constants_example():
    c = CoefficientSample.from_functions(Mesh.uniform(16), 1.0, 1.0, 1.0)
    p = stability_constants(c, 0.5)
    assert p.scattering_ratio_sup == 0.5
    assert p.R1 == pytest.approx(4 * math.sqrt(2), rel=1e-14)
    assert p.R2 >= p.R1 and p.R3 > 0 and p.R4 > 0


def test_stability_ratio_scale_invariance():
    rng = np.random.default_rng(8)
    c = random_coeffs(rng, 20)
    scaled = CoefficientSample(c.mesh, 3.5 * c.sigma_mid, 3.5 * c.sigma_s_mid, c.f_mid)
    assert stability_constants(c, 0.3).scattering_ratio_sup == pytest.approx(
        stability_constants(scaled, 0.3).scattering_ratio_sup, rel=1e-15)


@given(st.integers(0, 10 ** 6))
@settings(max_examples=30, deadline=None)
def test_r2_at_least_r1(seed):
    p = stability_constants(random_coeffs(np.random.default_rng(seed), 12), 0.5, K=2.0)
    assert p.R2 >= p.R1 > 0


def test_stability_rejects_bad_input():
    c = CoefficientSample.from_functions(Mesh.uniform(8), 0.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        stability_constants(c, 0.5)
    with pytest.raises(ValueError):
        stability_constants(smooth_coeffs(8), 1.5)


def _params(r3, eta=0.5):
    return StabilityParams(eta, 1.0, 1.0, 0.5, 1.0, 1.0, r3, 1.0)


def test_stable_width_trivial_when_r3_small():
    assert stable_mesh_width(_params(0.5), 1 / 8, CouplingPolicy("power", 2.0, 0.5)) == 1 / 8


def test_stable_width_brute_force_scan():
    cp = CouplingPolicy("power", 2.0, 0.5)
    h = 1 / 8
    expected = None
    for m in range(40):
        hp = h * 2.0 ** -m
        n = cp(hp)
        if hp * math.log(n) <= 1 and 1 / (hp ** 0.5 + hp * math.log(n) + 1 / n) >= 10:
            expected = hp
            break
    assert expected is not None and expected < h
    assert stable_mesh_width(_params(10.0), h, cp) == expected
    assert _stability_lhs(expected, cp(expected), 0.5) >= 10


def test_stable_width_monotone_in_r3():
    cp = CouplingPolicy("sqrt")
    widths = [stable_mesh_width(_params(r), 1 / 8, cp) for r in (1, 2, 5, 10, 20, 40)]
    assert all(a >= b for a, b in zip(widths, widths[1:]))


def test_stable_width_disabled_and_exhausted():
    cp = CouplingPolicy("sqrt")
    assert stable_mesh_width(_params(1e9), 1 / 8, cp, enabled=False) == 1 / 8
    with pytest.raises(RefinementExhausted) as err:
        stable_mesh_width(_params(1e9), 1 / 8, cp)
    assert err.value.r3 == 1e9
