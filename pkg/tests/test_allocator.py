import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import optimize

from crofdma.allocator import (LN2, AllocationResult, DualState, ScenarioKind, ScenarioSpec,
                               ScenarioWeights, SolverError, SolverOptions, ase,
                               assign_subcarriers, constellation, cutoff_sinr, quantize_rate,
                               scenario_weights, solve, solve_batch, subcarrier_metric,
                               subgradient_update, verify_kkt, water_fill, zeta)
from crofdma.experiments import experiment_rng, trial_rng
from crofdma.model import (EstimationModel, ParameterError, SystemConfig, draw_direct_means,
                           sample_realization)

from helpers import brute_force_ase, realization_from_gains

PERFECT = ScenarioSpec(ScenarioKind.PERFECT)
EST = EstimationModel.from_correlation(0.5, 0.1)
SCENARIOS = [
    (PERFECT, None),
    (ScenarioSpec("average", rho=0.5), EST),
    (ScenarioSpec("worst", rho=0.5, pr=0.9), EST),
    (ScenarioSpec("probabilistic", rho=0.5, eps=0.05), EST),
]


def duals(mu, eta, step1=0.1, step2=0.1, k=1):
    return DualState(np.zeros(k), mu, eta, step1, step2)


# --- closed forms ----------------------------------------------------------

def test_zeta_values():
    assert zeta(1e-2) == pytest.approx(0.44102, abs=1e-5)
    assert zeta(1e-3) == pytest.approx(0.26298, abs=1e-5)
    assert zeta(0.3 * math.exp(-1.5)) == pytest.approx(1.0)
    for bad in (0.3, 0.5, 0.0):
        with pytest.raises(ParameterError):
            zeta(bad)


def test_scenario_spec_validation():
    with pytest.raises(ParameterError):
        ScenarioSpec("worst", rho=0.5)
    with pytest.raises(ParameterError):
        ScenarioSpec("average", rho=0.5, pr=0.5)
    with pytest.raises(ParameterError):
        ScenarioSpec("probabilistic", rho=0.5)
    with pytest.raises(ParameterError):
        ScenarioSpec("average", rho=1.5)
    with pytest.raises(ValueError):
        ScenarioSpec("unknown")


def test_dual_state_rejects_negative():
    with pytest.raises(ParameterError):
        duals(-0.1, 0.0)


def test_water_fill_examples():
    # level 2: mu = 1/(2 ln2); floor 0.5: min_term/(zeta*sinr) = 0.5
    d = duals(1 / (2 * LN2), 0.0)
    assert water_fill(4.0, 1.0, d, 0.5, 1.0) == pytest.approx(1.5)
    assert water_fill(0.1, 1.0, d, 0.5, 1.0) == 0.0
    assert water_fill(8.0, 1.0, d, 0.5, 1.0) > water_fill(4.0, 1.0, d, 0.5, 1.0)
    with pytest.raises(ParameterError):
        water_fill(4.0, 1.0, duals(0.0, 0.0), 0.5, 1.0)


def test_subcarrier_metric_examples():
    assert subcarrier_metric(3.0, 0.0, 0.5, 1.0) == 0.0
    assert subcarrier_metric(1.0, 1.0, 1.0, 1.0) == pytest.approx(1 / (2 * LN2) + 1, abs=1e-5)
    vals = subcarrier_metric(1.0, np.linspace(0, 50, 100), 1.0, 1.0)
    assert np.all(np.diff(vals) > 0)


def test_assign_subcarriers_examples():
    assert assign_subcarriers(np.array([[0.2], [0.9], [0.4]]))[0] == 1
    assert assign_subcarriers(np.array([[0.5], [0.5]]))[0] == 0
    np.testing.assert_array_equal(assign_subcarriers(np.ones((1, 5))), np.zeros(5))
    with pytest.raises(ParameterError):
        assign_subcarriers(np.array([[np.nan]]))


def test_constellation_and_cutoff():
    # zeta*sinr/(ln2*min_term*price) = 4
    d = duals(1.0, 0.0)
    assert constellation(4 * LN2, d, 1.0, 1.0, 1.0) == pytest.approx(4.0)
    assert constellation(0.5 * LN2, d, 1.0, 1.0, 1.0) == 1.0
    th = cutoff_sinr(d, 1.0, 0.7, 2.0)
    assert constellation(th, d, 1.0, 0.7, 2.0) == pytest.approx(1.0)
    assert water_fill(th, 1.0, d, 0.7, 2.0) == pytest.approx(0.0, abs=1e-15)


def test_quantize_rate_examples():
    assert quantize_rate(1.0) == 0
    assert quantize_rate(3.99) == 0
    assert quantize_rate(17.0) == 4
    assert quantize_rate(1024.0) == 10
    assert quantize_rate(1e9) == 10
    np.testing.assert_array_equal(quantize_rate(np.array([4.0, 16.0, 63.9, 64.0])), [2, 4, 4, 6])


@settings(max_examples=100, deadline=None)
@given(st.floats(1.0, 1e6))
def test_quantized_rate_never_exceeds_continuous(m):
    assert quantize_rate(m) <= math.log2(m) + 1e-12


def _result_stub(phi, power, w):
    k = phi.shape[1]
    return AllocationResult(
        phi=phi, power=power, constellation=np.ones_like(power), rates=np.zeros_like(power),
        quantized_rates=np.zeros_like(power), ase=0.0, ase_quantized=0.0, feasibility={},
        cutoff=np.ones_like(power), duals=duals(1.0, 1.0, k=k),
        weights=ScenarioWeights(np.asarray(w, float), 1.0, 1.0), sinr=np.ones_like(power),
        zeta=1.0, min_term=1.0, p_total=1.0)


def test_subgradient_update_examples(cfg):
    w = ScenarioWeights(np.ones(1), 1.0, cfg.i_threshold)
    slack = _result_stub(np.array([[1]]), np.array([[1.0]]), [1.0])
    d = subgradient_update(duals(0.0, 0.0), slack, w, cfg)
    assert (d.mu, d.eta) == (0.0, 0.0)
    over = _result_stub(np.array([[1]]), np.array([[cfg.p_total + 1.0]]), [1e-6])
    d = subgradient_update(duals(0.5, 0.0, step1=0.1), over, w, cfg)
    assert d.mu == pytest.approx(0.6)
    assert d.step1 == pytest.approx(0.1 / math.sqrt(2))
    d = subgradient_update(duals(0.05, 0.0, step1=1.0), slack, w, cfg)
    assert d.mu == 0.0


def test_scenario_weights_examples(cfg, rng):
    est0 = EstimationModel.from_correlation(0.0, 0.1)
    real = sample_realization(cfg, est0, rng)
    avg = scenario_weights(ScenarioSpec("average", rho=0.0), real, est0, cfg)
    perf = scenario_weights(PERFECT, real, None, cfg)
    np.testing.assert_allclose(avg.w_k, np.abs(real.cross_estimates) ** 2)
    np.testing.assert_allclose(avg.w_k, perf.w_k)

    one = realization_from_gains(cfg.with_(n_subcarriers=1, n_users=1), [[1.0]], [1.0])
    est = EstimationModel(0.0, 1.0, 1.0)
    worst = scenario_weights(ScenarioSpec("worst", rho=0.0, pr=0.0), one, est, cfg)
    assert worst.w_k[0] == pytest.approx(4.0)

    zero = realization_from_gains(cfg.with_(n_subcarriers=4, n_users=1), np.ones((1, 4)), np.zeros(4))
    prob = scenario_weights(ScenarioSpec("probabilistic", rho=0.0, eps=0.1), zero, est, cfg)
    np.testing.assert_allclose(prob.w_k, 2.0 * est.error_variance)
    assert prob.i_eff < cfg.i_threshold

    with pytest.raises(ParameterError):
        scenario_weights(ScenarioSpec("average", rho=0.3), real, est0, cfg)
    with pytest.raises(ParameterError):
        scenario_weights(ScenarioSpec("average", rho=0.0), real, None, cfg)


def test_ase_examples():
    phi = np.array([[1, 1]])
    a = _result_stub(phi, np.zeros((1, 2)), [1, 1])
    assert ase([a]) == 0.0
    b = _result_stub(phi, np.ones((1, 2)), [1, 1])
    b.rates = np.log2(np.array([[4.0, 16.0]]))
    assert ase([b]) == pytest.approx(6.0)
    b2 = _result_stub(phi, np.ones((1, 2)), [1, 1])
    b2.rates = np.log2(np.array([[8.0, 32.0]]))
    assert ase([b2]) - ase([b]) == pytest.approx(2.0)
    with pytest.raises(ParameterError):
        ase([])


# --- solver ----------------------------------------------------------------

def _batch(cfg, est, n, seed=3):
    dm = draw_direct_means(cfg, experiment_rng(seed))
    return [sample_realization(cfg, est, trial_rng(seed, t), dm) for t in range(n)]


@pytest.mark.parametrize("shared", [False, True])
@pytest.mark.parametrize("scenario,est", SCENARIOS, ids=lambda s: getattr(s, "kind", s))
def test_solution_invariants(scenario, est, shared):
    cfg = SystemConfig(i_threshold=2.0)
    reals = _batch(cfg, est, 20)
    results = solve_batch(cfg, est, scenario, reals, SolverOptions(shared_power=shared))
    mean_power = np.mean([r.power_used for r in results]) if shared else None
    for r in results:
        assert np.all(r.phi.sum(axis=0) <= 1)
        assert np.all(r.power[r.phi == 0] == 0)
        assert np.all(r.power >= 0)
        np.testing.assert_array_equal(r.constellation == 1.0, r.power == 0)
        active = r.power > 0
        assert np.all(r.sinr[active] > r.cutoff[active])
        assert np.all(r.quantized_rates <= r.rates + 1e-12)
        assert r.interference <= r.weights.i_eff * (1 + 1e-6)
        if not shared:
            assert r.power_used <= cfg.p_total * (1 + 1e-6)
        assert np.all(r.trajectory["mu"] >= 0) and np.all(r.trajectory["eta"] >= 0)
        rep = verify_kkt(r, r.duals, r.weights, cfg, tol=1e-4, ensemble_power=mean_power)
        assert rep.passed, rep
    if shared:
        assert mean_power <= cfg.p_total * (1 + 1e-6)


def test_shared_budget_never_worse_than_per_realization():
    cfg = SystemConfig(i_threshold=2.0)
    reals = _batch(cfg, None, 30)
    own = ase(solve_batch(cfg, None, PERFECT, reals))
    pooled = ase(solve_batch(cfg, None, PERFECT, reals, SolverOptions(shared_power=True)))
    assert pooled >= own - 1e-9


def test_average_with_zero_correlation_collapses_to_perfect():
    cfg = SystemConfig(i_threshold=1.5)
    est0 = EstimationModel.from_correlation(0.0, 0.1)
    for real in _batch(cfg, est0, 5):
        a = solve(cfg, est0, ScenarioSpec("average", rho=0.0), real)
        p = solve(cfg, None, PERFECT, real)
        np.testing.assert_array_equal(a.phi, p.phi)
        np.testing.assert_array_equal(a.power, p.power)


def test_huge_interference_budget_reduces_to_power_water_filling():
    cfg = SystemConfig(i_threshold=1e9)
    real = _batch(cfg, None, 1)[0]
    res = solve(cfg, None, PERFECT, real)
    assert res.duals.eta == 0.0
    # oracle: classic single-constraint water-filling on the best user per subcarrier
    g = (zeta(cfg.ber_target) * real.direct_power_gains / cfg.total_noise).max(axis=0)
    level = optimize.brentq(lambda L: np.maximum(L - 1 / g, 0).sum() - cfg.p_total, 0, 1e3,
                            xtol=1e-15)
    np.testing.assert_allclose(res.power.sum(axis=0), np.maximum(level - 1 / g, 0),
                               rtol=1e-9, atol=1e-12)


def test_vanishing_power_budget():
    cfg = SystemConfig(p_total=1e-22)
    res = solve(cfg, None, PERFECT, _batch(cfg, None, 1)[0])
    assert res.power.max() < 1e-21
    assert res.ase < 1e-6
    assert np.all(res.quantized_rates == 0)


def test_matches_brute_force_on_small_instances():
    cfg = SystemConfig(n_users=2, n_subcarriers=2, p_total=2.0, i_threshold=1.2)
    support = (0.5, 2.0, 5.0)
    w = np.array([0.6, 1.3])
    for vals in itertools.product(support, repeat=4):
        gain = np.array(vals).reshape(2, 2)
        res = solve(cfg, None, PERFECT, realization_from_gains(cfg, gain, np.sqrt(w)))
        ref = brute_force_ase(gain, w, cfg.p_total, cfg.i_threshold)
        assert res.ase == pytest.approx(ref, rel=1e-2)
        assert res.ase >= ref - 1e-9


def test_verify_kkt_flags_violations(cfg):
    real = _batch(cfg, None, 1)[0]
    res = solve(cfg, None, PERFECT, real)
    assert verify_kkt(res, res.duals, res.weights, cfg).passed
    # mu > 0 but half the power unused
    half = AllocationResult(**{**res.__dict__, "power": res.power / 2})
    rep = verify_kkt(half, res.duals, res.weights, cfg)
    assert not rep.passed and rep.cs_power > 0.4
    # eta = 0 with interference slack passes that clause
    assert res.duals.eta == 0.0 and rep.cs_interference == 0.0


def test_solver_is_deterministic(cfg):
    real = _batch(cfg, EST, 1)[0]
    sc = ScenarioSpec("probabilistic", rho=0.5, eps=0.05)
    a, b = solve(cfg, EST, sc, real), solve(cfg, EST, sc, real)
    np.testing.assert_array_equal(a.power, b.power)
    assert a.n_iter == b.n_iter


def test_subgradient_phase_alone_is_near_optimal(cfg):
    reals = _batch(cfg, None, 10)
    exact = solve_batch(cfg, None, PERFECT, reals)
    raw = solve_batch(cfg, None, PERFECT, reals, SolverOptions(polish=False))
    for e, r in zip(exact, raw):
        assert r.best_iterate_ase <= e.ase * (1 + 1e-9)
        assert r.best_iterate_ase >= 0.99 * e.ase


def test_solver_error_carries_trajectory():
    err = SolverError("boom", trajectory={"mu": [1.0]})
    assert err.trajectory == {"mu": [1.0]}


def test_solve_batch_rejects_empty(cfg):
    with pytest.raises(ParameterError):
        solve_batch(cfg, None, PERFECT, [])
