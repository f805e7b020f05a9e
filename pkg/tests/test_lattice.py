import math

import numpy as np
import pytest
from scipy import integrate

from volmoments.lattice import (
    BetaCurve, GridSpec, LatticeError, LatticeState, ModelConfig, Outlook, RateCurve, VolRegime,
    build_jump_operators, build_regime_switch_operator, build_stock_grid, calibrate_and_assemble,
    local_vols, validate_generator,
)


@pytest.fixture(scope="module")
def grid():
    return build_stock_grid(70, 100.0)


def test_flattening_is_bijection():
    nx = 70
    seen = {LatticeState(x, a, b).flat(nx) for x in range(nx) for a in Outlook for b in VolRegime}
    assert seen == set(range(6 * nx))
    for y in (0, 69, 70, 419, 213):
        assert LatticeState.from_flat(y, nx).flat(nx) == y
    assert LatticeState(3, Outlook.NEGATIVE, VolRegime.HIGH).flat(nx) == 3 + nx * (1 + 2 * 2)


def test_grid_endpoints_and_spot(grid):
    assert grid.nx == 70
    assert grid.prices[0] == pytest.approx(10.0, rel=1e-14)
    assert grid.prices[-1] == pytest.approx(1000.0, rel=1e-14)
    assert np.all(np.diff(grid.prices) > 0)
    half_step = 0.5 * (grid.prices[1] / grid.prices[0] - 1)
    assert abs(grid.S0 - 100) / 100 <= half_step
    assert np.argmin(np.abs(grid.prices - 100)) == grid.spot_index


def test_grid_rejects_degenerate():
    with pytest.raises(LatticeError):
        build_stock_grid(2, 100.0)
    with pytest.raises(LatticeError):
        build_stock_grid(70, 5000.0)
    with pytest.raises(LatticeError):
        build_stock_grid(70, 100.0, GridSpec(100.0, 10.0))


def test_beta_curve_range(grid):
    b = BetaCurve((50.0, 150.0), (0.5, 1.5))
    g = build_stock_grid(70, 100.0, beta=b)
    v = g.beta_values()
    assert np.all((v >= 0) & (v <= 2))
    assert v[0] == 0.5 and v[-1] == 1.5
    with pytest.raises(LatticeError):
        BetaCurve((1.0,), (2.5,))


def test_rate_curve_discount():
    rc = RateCurve((0.0, 1.0, 3.0), (0.02, 0.05))
    assert rc.discount(0.0) == 1.0
    assert rc.discount(2.0) == pytest.approx(math.exp(-(0.02 + 0.05)), rel=1e-14)
    ds = [rc.discount(t) for t in np.linspace(0, 3, 31)]
    assert all(a >= b > 0 for a, b in zip(ds, ds[1:]))
    assert rc.discount(1.0 - 1e-9) == pytest.approx(rc.discount(1.0 + 1e-9), rel=1e-8)
    with pytest.raises(LatticeError):
        rc.rate_on(0.5, 1.5)


def test_model_config_validation():
    with pytest.raises(LatticeError):
        ModelConfig(jump_intensity=-1.0)
    with pytest.raises(LatticeError):
        ModelConfig(regime_vols=(0.3, 0.2, 0.1))
    with pytest.raises(LatticeError):
        ModelConfig(jump_outlook_switch=(1.2, 0.0))


def test_negative_outlook_mean_jump(grid):
    ops = build_jump_operators(grid, ModelConfig())
    logp = np.log(grid.prices)
    nx = grid.nx
    for x in (10, 35, 60):
        row = ops.outlook[x + nx * Outlook.NEGATIVE].reshape(2, nx).sum(axis=0)
        row[x] = 0.0
        mean = float(row @ (logp - logp[x])) / row.sum()
        assert abs(mean + 0.12) <= 0.012


def test_zero_intensity_no_outlook_jumps(grid):
    ops = build_jump_operators(grid, ModelConfig(jump_intensity=0.0))
    assert not np.any(ops.outlook)


def test_vg_second_moment(grid):
    cfg = ModelConfig()
    ops = build_jump_operators(grid, cfg)
    logp = np.log(grid.prices)
    vols = local_vols(grid, cfg)
    nu = cfg.vg_variance_rate
    for b in VolRegime:
        for x in (5, 34, 64):
            sigma = vols[b, x]
            d2 = (logp - logp[x]) ** 2
            # Levy density of VG with zero drift: exp(-|z|/eta) / (nu |z|)
            eta = sigma * math.sqrt(nu / 2)
            half = 0.5 * math.log(grid.prices[1] / grid.prices[0])
            tail = 2 * integrate.quad(lambda z: z * math.exp(-z / eta) / nu, half, np.inf)[0]
            jumped = float(ops.vg[b, x] @ d2)
            assert jumped == pytest.approx(tail, rel=0.05)
            assert jumped + ops.small_jump_variance[b, x] == pytest.approx(sigma ** 2, rel=1e-10)


def test_regime_switch_operator():
    v = build_regime_switch_operator(ModelConfig())
    assert v[0, 2] == 0 and v[2, 0] == 0
    assert np.allclose(v.sum(axis=1), 0)
    assert not np.any(build_regime_switch_operator(ModelConfig(regime_switch_rates=(0, 0, 0, 0))))
    v1 = build_regime_switch_operator(ModelConfig(regime_switch_rates=(1, 1, 1, 1)))
    w, vec = np.linalg.eig(v1.T)
    pi = np.real(vec[:, np.argmin(np.abs(w))])
    assert np.allclose(pi / pi.sum(), 1 / 3)


def test_symmetric_martingale_case():
    g = build_stock_grid(30, 100.0)
    cfg = ModelConfig(jump_intensity=0.0, vg_variance_rate=0.0, regime_vols=(0.2, 0.2, 0.2))
    gen = calibrate_and_assemble(g, cfg, RateCurve.flat(0.0), (0.0, 1.0))
    L = gen.entries
    s = np.tile(g.prices, 6)
    drift = (L * (s[None, :] - s[:, None])).sum(axis=1)
    assert np.max(np.abs(drift) / s) < 1e-13


def test_default_generator_valid(default_model):
    gen = default_model.time_grid.intervals[0].generator
    rep = validate_generator(gen, default_model.prices, gen.rate, absorbing=default_model.absorbing)
    assert rep.passed, rep.to_text()
    off = gen.entries.copy()
    np.fill_diagonal(off, 0)
    assert off.min() >= 0.0
    assert rep.max_abs_row_sum <= 1e-12
    assert rep.max_drift_residual <= 1e-6
    assert default_model.absorbing[0]


def test_validate_zero_matrix():
    s = np.array([90.0, 100.0, 110.0])
    rep = validate_generator(np.zeros((3, 3)), s, 0.0)
    assert rep.passed
    rep = validate_generator(np.zeros((3, 3)), s, 0.05)
    assert rep.passed_positivity and rep.passed_conservation and not rep.passed_drift


def test_validate_locates_negative_entry():
    L = np.array([[-1.0, 1.0, 0.0], [0.6, -0.5, -0.1], [0.0, 1.0, -1.0]])
    rep = validate_generator(L, [90.0, 100.0, 110.0], 0.0)
    assert not rep.passed_positivity
    assert tuple(rep.worst_offdiag) == (1, 2)
    assert "FAIL" in rep.to_text()
    assert '"passed": false' in rep.to_json()
