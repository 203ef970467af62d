import math

import numpy as np
import pytest

from hslv.engine import (PathEnsemble, SimulationError, SlvConfig, advance_asset, default_market,
                         derive_model_params, error_table, market_reference, price_call, score_cell,
                         simulate_hslv)
from hslv.engine import PriceEstimate
from hslv.pricing import HestonParams, build_market_surface, cos_call_price

MARKET = default_market()
# mpmath evaluation of the single-step formula at 30 digits
GOLDEN_STEP = 0.174733602226983926


@pytest.fixture(scope="module")
def surface():
    return build_market_surface(MARKET)


def test_derive_model_params_values():
    m = derive_model_params(MARKET, 0.25)
    assert m.gamma == pytest.approx(0.7125, abs=1e-15)
    assert m.kappa == pytest.approx(1.3125, abs=1e-15)
    assert m.rho == pytest.approx(-0.39375, abs=1e-15)
    assert m.theta == pytest.approx(0.064125, abs=1e-15)
    assert m.v0 == pytest.approx(0.118125, abs=1e-15)
    assert (m.r, m.s0) == (MARKET.r, MARKET.s0)


def test_derive_model_params_identity_and_error():
    assert derive_model_params(MARKET, 0.0) == MARKET
    with pytest.raises(ValueError):
        derive_model_params(MARKET, 3.0)


def test_advance_asset_golden():
    got = advance_asset(0.0, 0.09, 0.10, 1.0, 0.5, 1.0, MARKET)
    assert got == pytest.approx(GOLDEN_STEP, abs=1e-12)


def test_advance_asset_reductions():
    R = np.array([0.1, -0.2])
    V = np.array([0.09, 0.2])
    assert np.array_equal(advance_asset(R, V, V * 1.1, 0.0, 0.25, np.array([1.0, -1.0]),
                                        HestonParams.from_values(kappa=1, theta=0.1, gamma=0.5, v0=0.1,
                                                                 rho=-0.5, r=0.03)), R + 0.03 * 0.25)
    p0 = HestonParams.from_values(kappa=1.05, theta=0.0855, gamma=0.95, v0=0.0945, rho=0.0)
    Z = np.array([0.3, -1.2])
    np.testing.assert_allclose(advance_asset(R, V, V * 1.3, 1.0, 0.1, Z, p0),
                               R - 0.05 * V + np.sqrt(0.1 * V) * Z, rtol=0, atol=1e-15)


def test_price_call_examples():
    ens = PathEnsemble(np.log(np.array([1.2, 0.8])), np.zeros(2))
    est = price_call(ens, 1.0, 0.0, 1.0)
    assert est.mean == pytest.approx(0.1) and est.stderr == pytest.approx(0.1)
    ens = PathEnsemble(np.log(np.array([1.2, 0.8, 1.5])), np.zeros(3))
    assert price_call(ens, 0.0, 0.0, 1.0).mean == pytest.approx(3.5 / 3)
    flat = PathEnsemble(np.zeros(10), np.zeros(10))
    assert price_call(flat, 0.9, 0.0, 1.0).stderr == 0.0
    assert math.isnan(price_call(PathEnsemble(np.zeros(1), np.zeros(1)), 0.9, 0.0, 1.0).stderr)


def test_config_validation():
    with pytest.raises(ValueError):
        SlvConfig(MARKET, MARKET, "euler", paths=50)
    with pytest.raises(ValueError):
        SlvConfig(MARKET, MARKET, "euler", steps=0)
    with pytest.raises(ValueError):
        SlvConfig(MARKET, MARKET, "euler", strikes=(1.0, -1.0))
    with pytest.raises(ValueError):
        SlvConfig(MARKET, MARKET, "euler", coupling="other")


def test_zero_leverage_single_step_gives_intrinsic():
    cfg = SlvConfig(MARKET, MARKET, "backward", paths=200, steps=1, horizon=1.0)
    ens = simulate_hslv(cfg, None, leverage=0.0)
    np.testing.assert_array_equal(ens.S, 1.0)
    assert price_call(ens, 0.9, 0.0, 1.0).mean == pytest.approx(0.1, abs=1e-15)
    assert price_call(ens, 1.1, 0.0, 1.0).mean == 0.0


@pytest.mark.parametrize("scheme", ["euler", "aes", "truncated", "backward"])
def test_martingale_with_calibrated_leverage(surface, scheme):
    cfg = SlvConfig.from_market(MARKET, 0.25, scheme, paths=10_000, steps=25, horizon=5.0)
    ens = simulate_hslv(cfg, surface)
    S = ens.S
    assert abs(S.mean() - 1.0) <= 4 * S.std(ddof=1) / math.sqrt(S.size)
    assert np.all(ens.V >= 0)


def test_increment_coupling_biases_lamperti_schemes():
    """With the scheme's own increment in the asset step the Lamperti drift,
    which lacks the Ito correction, leaks a negative drift into log S."""
    base = SlvConfig(MARKET, MARKET, "backward", paths=20_000, steps=5, horizon=5.0, seed=2)
    noise = simulate_hslv(base, None, leverage=1.0).S
    inc = simulate_hslv(SlvConfig(MARKET, MARKET, "backward", paths=20_000, steps=5, horizon=5.0, seed=2,
                                  coupling="increment"), None, leverage=1.0).S
    se = lambda x: x.std(ddof=1) / math.sqrt(x.size)
    assert abs(noise.mean() - 1) <= 4 * se(noise)
    assert inc.mean() - 1 < -4 * se(inc)


def test_exact_scheme_ignores_coupling():
    kw = dict(paths=500, steps=4, horizon=1.0, seed=9)
    a = simulate_hslv(SlvConfig(MARKET, MARKET, "aes", **kw), None, leverage=1.0)
    b = simulate_hslv(SlvConfig(MARKET, MARKET, "aes", coupling="increment", **kw), None, leverage=1.0)
    np.testing.assert_array_equal(a.R, b.R)


def test_paths_are_independent_of_batching(surface):
    full = simulate_hslv(SlvConfig(MARKET, MARKET, "euler", paths=400, steps=3, horizon=1.0, seed=4),
                         None, leverage=1.0)
    part = simulate_hslv(SlvConfig(MARKET, MARKET, "euler", paths=200, steps=3, horizon=1.0, seed=4),
                         None, leverage=1.0, path_offset=200)
    np.testing.assert_array_equal(full.R[200:], part.R)


def test_simulation_is_deterministic(surface):
    cfg = SlvConfig.from_market(MARKET, 0.25, "truncated", paths=1000, steps=5, horizon=5.0, seed=11)
    a, b = simulate_hslv(cfg, surface), simulate_hslv(cfg, surface)
    assert a.R.tobytes() == b.R.tobytes() and a.V.tobytes() == b.V.tobytes()


def test_trace_records_every_step(surface):
    trace = []
    cfg = SlvConfig.from_market(MARKET, 0.25, "backward", paths=500, steps=4, horizon=1.0)
    simulate_hslv(cfg, surface, trace=trace)
    assert [round(s.t, 12) for s in trace] == [0.0, 0.25, 0.5, 0.75]
    assert trace[0].estimate is None and trace[1].estimate.n_bins == 20
    assert all(0.01 <= s.sigma2_min <= s.sigma2_max <= 25.0 for s in trace)


def test_non_finite_state_aborts():
    wild = HestonParams.from_values(kappa=1.0, theta=0.1, gamma=0.5, v0=0.1, rho=-0.5)
    cfg = SlvConfig(wild, wild, "euler", paths=100, steps=2, horizon=1.0)
    with pytest.raises(SimulationError) as info, np.errstate(all="ignore"):
        simulate_hslv(cfg, None, leverage=1e200)
    assert info.value.paths.size > 0


def test_leverage_mode_errors():
    cfg = SlvConfig(MARKET, MARKET, "euler", paths=100, steps=1)
    with pytest.raises(ValueError):
        simulate_hslv(cfg, None)
    with pytest.raises(ValueError):
        simulate_hslv(cfg, None, leverage="fixed")


def test_score_cell_metrics():
    ref = market_reference(MARKET, (1.0,), 5.0)[1.0]
    exact = PriceEstimate(ref[0], 0.001, 10_000)
    err, se, band = score_cell(exact, 1.0, 5.0, MARKET, ref, "iv")
    assert err == pytest.approx(0.0, abs=1e-9) and se > 0 and not band
    err, se, band = score_cell(PriceEstimate(ref[0] + 0.01, 0.001, 100), 1.0, 5.0, MARKET, ref, "price")
    assert err == pytest.approx(1.0) and se == pytest.approx(0.1)
    err, _, band = score_cell(PriceEstimate(1.5, 0.001, 100), 1.0, 5.0, MARKET, ref, "iv")
    assert band and math.isnan(err)
    with pytest.raises(ValueError):
        score_cell(exact, 1.0, 5.0, MARKET, ref, "rmse")


def test_error_table_layout_and_executor_invariance(surface):
    from concurrent.futures import ThreadPoolExecutor
    base = SlvConfig.from_market(MARKET, 0.25, "euler", paths=500, steps=5)
    serial = error_table(base, surface, ("euler", "backward"), (2, 4))
    with ThreadPoolExecutor(3) as ex:
        threaded = error_table(base, surface, ("euler", "backward"), (2, 4), executor=ex)
    assert [(c.scheme.value, c.N, c.K) for c in serial][:4] == [("euler", 2, 0.7), ("euler", 2, 1.0),
                                                                ("euler", 2, 1.5), ("euler", 4, 0.7)]
    assert [(c.err_pct, c.stderr_pct, c.price) for c in serial] == \
        [(c.err_pct, c.stderr_pct, c.price) for c in threaded]


def test_prices_within_bounds(surface):
    cfg = SlvConfig.from_market(MARKET, 0.25, "aes", paths=2000, steps=10)
    ens = simulate_hslv(cfg, surface)
    for K in (0.0, 0.5, 1.0, 3.0):
        assert 0.0 <= price_call(ens, K, 0.0, 5.0).mean <= 1.0 + 4 * ens.S.std() / math.sqrt(2000)


@pytest.mark.slow
def test_self_pricing_with_unit_leverage(surface):
    base = SlvConfig(MARKET, MARKET, "aes", paths=100_000, steps=100, horizon=5.0, seed=21)
    cells = error_table(base, surface, ("aes",), (100,), leverage=1.0)
    for c in cells:
        assert c.err_pct <= 3 * c.stderr_pct


@pytest.mark.slow
def test_reference_cell_backward_n40_k100(surface):
    """Published cell 0.46 (stderr 0.68) for Backward at N = 40, K = 1."""
    base = SlvConfig.from_market(MARKET, 0.25, "backward", paths=10_000, steps=40, strikes=(1.0,))
    (cell,) = error_table(base, surface, ("backward",), (40,))
    assert abs(cell.err_pct - 0.46) <= 3 * math.hypot(0.68, cell.stderr_pct)


def test_cos_reference_used_by_tables():
    ref = market_reference(MARKET, (0.7,), 5.0)
    assert ref[0.7][0] == cos_call_price(MARKET, 0.7, 5.0)
