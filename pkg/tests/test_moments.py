import math

import numpy as np
import pytest
from scipy import integrate
from scipy.linalg import expm

from volmoments import build_explicit_model
from volmoments.moments import (
    Corridor, MomentError, bivariate_moments, build_functional, deform, moments_exact, moments_fd,
    series_exponential,
)
from volmoments.propagator import expm_squaring

from conftest import random_generator, two_state


def test_two_state_variance_functional():
    m = two_state()
    phi = build_functional("variance", m).on(m.time_grid.intervals[0])
    assert phi[0] == pytest.approx(math.log(1.2) ** 2, rel=1e-14)
    assert phi[0] == pytest.approx(0.03324, abs=1e-5)


def test_zero_generator_functional():
    m = build_explicit_model(np.zeros((3, 3)), [90.0, 100.0, 110.0])
    assert not np.any(build_functional("variance", m).on(m.time_grid.intervals[0]))


def test_functional_kinds(default_model):
    m = default_model
    iv = m.time_grid.intervals[0]
    var = build_functional("variance", m).on(iv)
    full = build_functional("corridor_variance", m, Corridor(0.0, None)).on(iv)
    assert np.array_equal(var, full)
    c = Corridor(80.0, 120.0)
    cv = build_functional("corridor_variance", m, c).on(iv)
    inside = c.indicator(m.prices).astype(bool)
    assert np.all(cv[~inside] == 0) and np.array_equal(cv[inside], var[inside])
    occ = build_functional("occupation", m, c).on(iv)
    assert set(np.unique(occ)) <= {0.0, 1.0}
    g = build_functional("gamma", m).on(iv)
    assert var.min() >= 0 and g.min() >= 0
    unit = build_functional("gamma", m, gamma_weight="unit").on(iv)
    assert np.array_equal(unit, var)
    with pytest.raises(MomentError):
        build_functional("occupation", m)
    with pytest.raises(MomentError):
        Corridor(2.0, 1.0)


def test_deform():
    L = np.array([[-1.0, 1.0], [2.0, -2.0]])
    assert np.array_equal(deform(L, [3.0, 4.0], 0.0), L)
    assert np.array_equal(deform(L, [0.5, 0.5], 1.0).diagonal(), [-0.5, -1.5])
    eps, c, d = 0.3, 0.7, 1.0
    u = expm_squaring(deform(L, [c, c], eps), d)
    assert np.allclose(u, math.exp(eps * c * d) * expm(L * d), atol=1e-9)


def test_constant_functional_fd_and_exact():
    m = two_state(rate=1.5)
    f = build_functional("constant", m, constant=0.3)
    for bm in (moments_fd(m, f, 0.0, 1.0, 2), moments_exact(m, f, 0.0, 1.0, 2)):
        u = bm.transition
        assert np.allclose(bm.raw[0], 0.3 * u, rtol=1e-5)
        assert np.allclose(bm.raw[1], 0.09 * u, rtol=1e-5)
    ex = moments_exact(m, f, 0.0, 1.0, 2)
    assert np.allclose(ex.raw[1], 0.09 * ex.transition, rtol=1e-12)
    zero = moments_fd(m, build_functional("constant", m, constant=0.0), 0.0, 1.0, 3)
    assert not np.any(zero.raw)


def test_two_state_occupation_closed_form():
    m = two_state()
    f = build_functional("occupation", m, Corridor(None, 110.0))
    want = 0.5 + (1 - math.exp(-2)) / 4
    assert moments_exact(m, f, 0.0, 1.0, 1).unconditional()[0] == pytest.approx(want, abs=1e-9)
    assert moments_fd(m, f, 0.0, 1.0, 1).unconditional()[0] == pytest.approx(want, abs=1e-5)


def test_dyson_first_order_vs_quadrature(rng):
    n = 5
    L = random_generator(n, rng)
    s = np.linspace(90, 110, n)
    m = build_explicit_model(L, s, 1, horizon=1.0, step=1.0)
    f = build_functional("variance", m)
    phi = f.on(m.time_grid.intervals[0])
    ts = np.linspace(0, 1, 801)
    vals = np.array([(expm(L * t) @ np.diag(phi) @ expm(L * (1 - t)))[1] for t in ts])
    want = integrate.simpson(vals, x=ts, axis=0)
    got = moments_exact(m, f, 0.0, 1.0, 1).raw[0]
    assert np.max(np.abs(got - want)) < 1e-6


def test_series_blocks_order_zero_is_kernel(rng):
    L = random_generator(4, rng)
    phi = rng.random(4)
    blocks = series_exponential(L, [phi], 0.7, 2, 1e-12)
    assert np.max(np.abs(np.eye(4) + blocks[(0,)] - expm(0.7 * L))) < 1e-9


def test_occupation_total_time(default_model):
    m = default_model
    f = build_functional("occupation", m, Corridor())
    assert moments_exact(m, f, 0.25, 1.0, 1).unconditional()[0] == pytest.approx(0.75, rel=1e-10)
    # central difference truncation for a constant integrand is eps_base^2 / 6
    assert moments_fd(m, f, 0.25, 1.0, 1).unconditional()[0] == pytest.approx(0.75, rel=1e-6)


def test_fd_vs_exact_default_model(default_model):
    m = default_model
    f = build_functional("variance", m)
    fd = moments_fd(m, f, 0.0, 1.0, 3)
    ex = moments_exact(m, f, 0.0, 1.0, 3)
    for k, tol in ((0, 1e-4), (1, 1e-4), (2, 1e-3)):
        rel = abs(fd.unconditional()[k] / ex.unconditional()[k] - 1)
        assert rel <= tol, (k, rel)
    ok = ex.transition > 1e-6
    nm = ex.normalized
    assert np.all(nm[1, ok] >= nm[0, ok] ** 2 * (1 - 1e-9))
    assert ex.raw.min() > -1e-12


def test_eps_halving_stability(default_model):
    m = default_model
    f = build_functional("variance", m)
    a = moments_fd(m, f, 0.0, 1.0, 1).unconditional()[0]
    b = moments_fd(m, f, 0.0, 1.0, 1, eps_base=1e-3).unconditional()[0]
    assert abs(a / b - 1) <= 1e-6


def test_bivariate_full_corridor(default_model):
    m = default_model
    phi = build_functional("corridor_variance", m, Corridor())
    psi = build_functional("occupation", m, Corridor())
    for method in ("fd", "exact"):
        bb = bivariate_moments(m, phi, psi, 0.0, 1.0, method=method)
        u = bb.transition
        assert np.allclose(bb.raw["m01"], u, atol=1e-9)
        assert np.allclose(bb.raw["m11"], bb.raw["m10"], atol=1e-8)
        nm = bb.normalized
        ok = u > 1e-6
        assert np.allclose(nm["m02"][ok], nm["m01"][ok] ** 2, rtol=1e-5)


def test_bivariate_zero_psi_and_schwarz(default_model):
    m = two_state()
    phi = build_functional("corridor_variance", m, Corridor(None, 1000.0))
    psi = build_functional("occupation", m, Corridor(None, 1000.0))
    bb = bivariate_moments(m, phi, psi, 0.0, 1.0)
    nm = bb.normalized
    assert np.all(nm["m11"] ** 2 <= nm["m20"] * nm["m02"] * (1 + 1e-5))
    zero = build_functional("occupation", m, Corridor(1000.0, 2000.0))
    phi2 = build_functional("corridor_variance", m, Corridor(1000.0, 2000.0))
    bz = bivariate_moments(m, phi2, zero, 0.0, 1.0)
    for k in ("m01", "m02", "m11"):
        assert not np.any(bz.raw[k])
    with pytest.raises(MomentError):
        bivariate_moments(m, phi, zero, 0.0, 1.0)


def test_bridge_csv(tmp_path, default_model):
    m = default_model
    bm = moments_fd(m, build_functional("variance", m), 0.0, 0.25, 2)
    bm.to_csv(tmp_path / "m.csv", m)
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0].startswith("y2,x,a,b,U,m1")
    assert len(lines) == 1 + m.n_states
