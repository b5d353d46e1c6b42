"""Joint power, rate and subcarrier allocation by Lagrangian dual decomposition.

The per-subcarrier power follows a multi-level water-filling rule whose water
level is set by the power multiplier ``mu`` and the interference multiplier
``eta``; each subcarrier goes to the user with the largest assignment metric;
the multipliers are driven by projected subgradient steps.  After the
subgradient phase the multipliers are polished by solving the complementary
slackness conditions with log-scale bisection, which makes the returned point
feasible to machine precision.

Everything works on a batch of channel realizations at once: arrays carry a
leading realization axis ``R``, then users ``N``, then subcarriers ``K``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
import math

import numpy as np

from .distributions import cross_power_sum_params, deterministic_cap
from .model import (ChannelRealization, EstimationModel, ParameterError, SystemConfig,
                    worst_case_bound)

LN2 = math.log(2.0)
RATE_GRID = (2, 4, 6, 8, 10)


class SolverError(RuntimeError):
    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory


class ScenarioKind(str, Enum):
    PERFECT = "perfect"
    AVERAGE = "average"
    WORST = "worst"
    PROBABILISTIC = "probabilistic"


@dataclass(frozen=True)
class ScenarioSpec:
    kind: ScenarioKind
    rho: float | None = None
    pr: float | None = None
    eps: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ScenarioKind(self.kind))
        if (self.pr is not None) != (self.kind is ScenarioKind.WORST):
            raise ParameterError("pr is required for, and only for, the worst case")
        if (self.eps is not None) != (self.kind is ScenarioKind.PROBABILISTIC):
            raise ParameterError("eps is required for, and only for, the probabilistic case")
        if self.rho is not None and not 0.0 <= self.rho <= 1.0:
            raise ParameterError(f"rho must lie in [0, 1], got {self.rho}")
        if self.pr is not None and not 0.0 <= self.pr < 1.0:
            raise ParameterError(f"pr must lie in [0, 1), got {self.pr}")
        if self.eps is not None and not 0.0 < self.eps < 1.0:
            raise ParameterError(f"eps must lie in (0, 1), got {self.eps}")

    @property
    def imperfect(self) -> bool:
        return self.kind is not ScenarioKind.PERFECT


@dataclass
class DualState:
    lambda_k: np.ndarray
    mu: float
    eta: float
    step1: float
    step2: float
    iteration: int = 1

    def __post_init__(self):
        if self.mu < 0 or self.eta < 0 or np.any(np.asarray(self.lambda_k) < 0):
            raise ParameterError("Lagrange multipliers must be nonnegative")


@dataclass(frozen=True)
class ScenarioWeights:
    w_k: np.ndarray
    nsp_value: float
    i_eff: float


@dataclass
class AllocationResult:
    phi: np.ndarray
    power: np.ndarray
    constellation: np.ndarray
    rates: np.ndarray
    quantized_rates: np.ndarray
    ase: float
    ase_quantized: float
    feasibility: dict
    cutoff: np.ndarray
    duals: DualState
    weights: ScenarioWeights
    sinr: np.ndarray
    zeta: float
    min_term: float
    p_total: float
    n_iter: int = 0
    converged: bool = False
    best_iterate_ase: float = 0.0
    trajectory: dict = field(default_factory=dict, repr=False)

    @property
    def power_used(self) -> float:
        return float(np.sum(self.phi * self.power))

    @property
    def interference(self) -> float:
        return float(np.sum(self.phi * self.power * self.weights.w_k[None, :]))


def zeta(ber_target: float) -> float:
    """SNR gap constant of the MQAM BER bound for a target BER below 0.3."""
    if not 0.0 < ber_target < 0.3:
        raise ParameterError(f"ber_target must lie in (0, 0.3), got {ber_target}")
    return -1.5 / math.log(ber_target / 0.3)


def _check_rho(scenario: ScenarioSpec, est: EstimationModel) -> float:
    if scenario.rho is not None and not math.isclose(scenario.rho, est.correlation, abs_tol=1e-12):
        raise ParameterError(f"scenario rho {scenario.rho} differs from the estimation "
                             f"model correlation {est.correlation}")
    return est.correlation


def scenario_weights(scenario: ScenarioSpec, real: ChannelRealization,
                     est: EstimationModel | None, cfg: SystemConfig) -> ScenarioWeights:
    """Per-subcarrier interference weights, power-sum normalizer and interference budget."""
    kind = scenario.kind
    k = real.n_subcarriers
    if kind is ScenarioKind.PERFECT:
        w = np.abs(real.cross_gains) ** 2
        return ScenarioWeights(w, float(w.sum()), cfg.i_threshold)
    if est is None:
        raise ParameterError(f"{kind.value} case needs an estimation model")
    rho2 = _check_rho(scenario, est) ** 2
    h_hat = real.cross_estimates
    if kind is ScenarioKind.AVERAGE:
        w = np.abs(h_hat * (1.0 + rho2)) ** 2
        return ScenarioWeights(w, float(w.sum()), cfg.i_threshold)
    if kind is ScenarioKind.WORST:
        omega = worst_case_bound(est, h_hat, scenario.pr)
        w = (np.abs(h_hat) + omega) ** 2
        return ScenarioWeights(w, float(w.sum()), cfg.i_threshold)
    # probabilistic: posterior variance times (2 + squared normalized posterior mean),
    # expanded so that rho = 1 (zero posterior variance) stays finite
    post_var = (1.0 - rho2) * est.error_variance
    w = 2.0 * post_var + np.abs((1.0 + rho2) * h_hat) ** 2
    nsp = cross_power_sum_params("probabilistic", est, k).mean
    return ScenarioWeights(w, float(nsp), deterministic_cap(cfg.i_threshold, scenario.eps, k))


def min_term(cfg: SystemConfig, weights: ScenarioWeights) -> float:
    k = len(weights.w_k)
    if weights.nsp_value <= 0:
        return cfg.p_total / k
    return min(cfg.p_total / k, weights.i_eff / weights.nsp_value)


def scenario_sinr(cfg: SystemConfig, real: ChannelRealization, nominal: float) -> np.ndarray:
    """SINR of every (user, subcarrier) at the scenario's nominal power."""
    if cfg.sinr_reference == "per_subcarrier":
        return real.sinr
    return nominal * real.direct_power_gains / cfg.total_noise


def _price(mu, eta, w_k):
    price = np.asarray(mu + eta * np.asarray(w_k, dtype=float), dtype=float)
    if np.any(price <= 0):
        raise ParameterError("mu + eta * w must stay positive (unbounded water level)")
    return price


def water_fill(sinr, w_k, duals: DualState, zeta: float, min_term: float):
    """Optimal power for given multipliers: ``[level - floor]^+``."""
    price = _price(duals.mu, duals.eta, w_k)
    level = 1.0 / (LN2 * price)
    with np.errstate(divide="ignore"):
        floor = min_term / (zeta * np.asarray(sinr, dtype=float))
    return np.maximum(level - floor, 0.0)


def subcarrier_metric(sinr, p_star, zeta: float, min_term: float):
    x = zeta * np.asarray(sinr, dtype=float) * np.asarray(p_star, dtype=float) / min_term
    return x / (LN2 * (1.0 + x)) + np.log1p(x) / LN2


def assign_subcarriers(metrics) -> np.ndarray:
    """Index of the best user per subcarrier; ties go to the lowest index."""
    m = np.asarray(metrics, dtype=float)
    if not np.all(np.isfinite(m)):
        raise ParameterError("metrics must be finite")
    return np.argmax(m, axis=0)


def constellation(sinr, duals: DualState, w_k, zeta: float, min_term: float):
    price = _price(duals.mu, duals.eta, w_k)
    return np.maximum(1.0, zeta * np.asarray(sinr, dtype=float) / (LN2 * min_term * price))


def cutoff_sinr(duals: DualState, w_k, zeta: float, min_term: float):
    return LN2 * _price(duals.mu, duals.eta, w_k) * min_term / zeta


def quantize_rate(m_star):
    """Largest rate on the {2,...,10}-bit grid with 2**rate <= m_star (0 below 4)."""
    m = np.asarray(m_star, dtype=float)
    bits = np.floor(np.log2(np.maximum(m, 1.0)) + 1e-12)
    bits = np.minimum(2 * np.floor(bits / 2), RATE_GRID[-1])
    out = np.where(bits >= RATE_GRID[0], bits, 0.0)
    return out if out.ndim else float(out)


def _projected(multiplier, step, residual):
    return np.maximum(multiplier - step * residual, 0.0)


def subgradient_update(duals: DualState, result: AllocationResult,
                       weights: ScenarioWeights, cfg: SystemConfig) -> DualState:
    """One projected subgradient step on ``mu`` and ``eta`` with diminishing steps."""
    used = float(np.sum(result.phi * result.power))
    interference = float(np.sum(result.phi * result.power * weights.w_k[None, :]))
    mu = float(_projected(duals.mu, duals.step1, cfg.p_total - used))
    eta = float(_projected(duals.eta, duals.step2, weights.i_eff - interference))
    shrink = math.sqrt(duals.iteration / (duals.iteration + 1))
    return replace(duals, mu=mu, eta=eta, step1=duals.step1 * shrink,
                   step2=duals.step2 * shrink, iteration=duals.iteration + 1)


# ---------------------------------------------------------------------------
# batched solver


@dataclass
class _Batch:
    gain: np.ndarray     # (R, N, K): zeta * sinr / min_term, so M = 1 + gain * P
    w: np.ndarray        # (R, K)
    i_eff: np.ndarray    # (R,)
    p_total: float

    def __post_init__(self):
        # only the best user on each subcarrier can receive power, so the
        # polishing stage works with the per-subcarrier best gain
        self.best = self.gain.max(axis=1)
        with np.errstate(divide="ignore"):
            self.best_floor = np.where(self.best > 0, 1.0 / self.best, np.inf)
        self.mu_cap = np.maximum(self.best.max(axis=1), 1e-300) / LN2 * (1 + 1e-12)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(self.w > 0, self.best / self.w, 0.0)
        self.eta_cap = np.maximum(ratio.max(axis=1), 1e-300) / LN2 * (1 + 1e-12)

    def primal(self, mu, eta):
        price = mu[:, None] + eta[:, None] * self.w
        with np.errstate(divide="ignore", invalid="ignore"):
            level = 1.0 / (LN2 * price)
            floor = np.where(self.gain > 0, 1.0 / self.gain, np.inf)
        p_all = np.maximum(level[:, None, :] - floor, 0.0)
        x = self.gain * p_all
        metric = x / (LN2 * (1.0 + x)) + np.log1p(x) / LN2
        user = np.argmax(metric, axis=1)
        phi = np.zeros_like(p_all)
        np.put_along_axis(phi, user[:, None, :], 1.0, axis=1)
        return phi, phi * p_all, metric, price

    def best_power(self, mu, eta):
        with np.errstate(divide="ignore", invalid="ignore"):
            level = 1.0 / (LN2 * (mu[:, None] + eta[:, None] * self.w))
        return np.maximum(level - self.best_floor, 0.0)


def _log_bisect(excess, lo, hi, iters=64):
    """Vectorized root of a decreasing function; returns the upper (nonpositive) side."""
    llo, lhi = np.log(lo), np.log(hi)
    for _ in range(iters):
        mid = 0.5 * (llo + lhi)
        positive = excess(np.exp(mid)) > 0
        llo = np.where(positive, mid, llo)
        lhi = np.where(positive, lhi, mid)
    return np.exp(lhi)


def _mu_given_eta(b: _Batch, eta):
    """Smallest mu >= 0 keeping each realization's power within the budget."""
    zero = np.zeros_like(eta)
    with np.errstate(divide="ignore", invalid="ignore"):
        free = np.where(eta > 0, b.best_power(zero, eta).sum(axis=1), np.inf)
    mu = _log_bisect(lambda m: b.best_power(m, eta).sum(axis=1) - b.p_total,
                     b.mu_cap * 1e-40, b.mu_cap)
    return np.where(free <= b.p_total, 0.0, mu)


def _eta_given_mu(b: _Batch, mu):
    """Smallest eta >= 0 keeping each realization's interference within budget."""
    zero = np.zeros_like(mu)
    with np.errstate(divide="ignore", invalid="ignore"):
        free = np.where(mu > 0, (b.best_power(mu, zero) * b.w).sum(axis=1), np.inf)
    eta = _log_bisect(lambda e: (b.best_power(mu, e) * b.w).sum(axis=1) - b.i_eff,
                      b.eta_cap * 1e-40, b.eta_cap)
    return np.where(free <= b.i_eff, 0.0, eta)


def _polish_individual(b: _Batch):
    r = b.w.shape[0]
    zero = np.zeros(r)
    mu0 = _mu_given_eta(b, zero)
    interf0 = (b.best_power(mu0, zero) * b.w).sum(axis=1)

    def excess(eta):
        return (b.best_power(_mu_given_eta(b, eta), eta) * b.w).sum(axis=1) - b.i_eff

    eta = _log_bisect(excess, b.eta_cap * 1e-40, b.eta_cap)
    eta = np.where(interf0 <= b.i_eff, 0.0, eta)
    return _mu_given_eta(b, eta), eta


def _polish_shared(b: _Batch):
    """Common mu for the average power budget, per-realization eta."""
    r = b.w.shape[0]
    cap = np.full(r, b.mu_cap.max())

    def mean_power(mu_scalar):
        mu = np.broadcast_to(mu_scalar, (r,)).astype(float)
        return b.best_power(mu, _eta_given_mu(b, mu)).sum(axis=1).mean()

    if mean_power(np.zeros(r)) <= b.p_total:
        mu = np.zeros(r)
    else:
        mu_s = _log_bisect(lambda m: np.atleast_1d(mean_power(m[0]) - b.p_total),
                           cap[:1] * 1e-40, cap[:1])
        mu = np.full(r, mu_s[0])
    return mu, _eta_given_mu(b, mu)


@dataclass(frozen=True)
class SolverOptions:
    max_iter: int = 500
    tol: float = 1e-5
    patience: int = 5
    step_scale: float = 0.1
    shared_power: bool = False
    polish: bool = True


def _feasible_value(b: _Batch, power, shared):
    used = power.sum(axis=(1, 2))
    interf = (power * b.w[:, None, :]).sum(axis=(1, 2))
    with np.errstate(divide="ignore", invalid="ignore"):
        s_int = np.where(interf > b.i_eff, b.i_eff / interf, 1.0)
        if shared:
            mean_used = used.mean()
            s_pow = np.full_like(used, b.p_total / mean_used if mean_used > b.p_total else 1.0)
        else:
            s_pow = np.where(used > b.p_total, b.p_total / used, 1.0)
    scale = np.minimum(s_int, s_pow)
    return np.log2(1.0 + b.gain * power * scale[:, None, None]).sum(axis=(1, 2))


def _run(b: _Batch, opts: SolverOptions):
    r, _, k = b.gain.shape
    mu = np.full(r, k / (b.p_total * LN2))
    eta = k / (b.i_eff * LN2)
    if opts.shared_power:
        mu = np.full(r, mu.mean())
    mu_floor = 1e-12 * mu
    tau1 = opts.step_scale * mu / b.p_total
    tau2 = opts.step_scale * eta / b.i_eff

    active = np.ones(r, dtype=bool)
    calm = np.zeros(r, dtype=int)
    n_iter = np.zeros(r, dtype=int)
    prev = np.full(r, np.nan)
    best = np.full(r, -np.inf)
    traj = {key: [] for key in ("dual", "primal", "feasible", "mu", "eta", "power", "interference")}

    for i in range(1, opts.max_iter + 1):
        phi, power, _, price = b.primal(mu, eta)
        x = (b.gain * power).sum(axis=1)
        p = power.sum(axis=1)
        dual = (np.log2(1.0 + x) - price * p).sum(axis=1) + eta * b.i_eff
        used = p.sum(axis=1)
        interf = (p * b.w).sum(axis=1)
        rate = np.log2(1.0 + x).sum(axis=1)
        feasible = _feasible_value(b, power, opts.shared_power)
        best = np.maximum(best, feasible)
        if opts.shared_power:
            dual = dual.mean() + mu[0] * b.p_total
            dual = np.full(r, dual)
        else:
            dual = dual + mu * b.p_total

        for key, val in (("dual", dual), ("primal", rate), ("feasible", feasible), ("mu", mu),
                         ("eta", eta), ("power", used), ("interference", interf)):
            traj[key].append(np.array(val, dtype=float))

        n_iter = np.where(active, i, n_iter)
        with np.errstate(divide="ignore", invalid="ignore"):
            change = np.abs(dual - prev) / np.maximum(np.abs(prev), 1e-300)
        calm = np.where(change < opts.tol, calm + 1, 0)
        prev = dual
        active &= calm < opts.patience
        if not active.any():
            break

        step = 1.0 / math.sqrt(i)
        if opts.shared_power:
            new_mu = _projected(mu[0], tau1[0] * step, b.p_total - used.mean())
            mu = np.where(active, new_mu, mu)
        else:
            mu = np.where(active, _projected(mu, tau1 * step, b.p_total - used), mu)
        eta = np.where(active, _projected(eta, tau2 * step, b.i_eff - interf), eta)
        # an all-zero price would make the water level unbounded
        unbounded = (mu <= 0) & ((eta <= 0) | (b.w.min(axis=1) <= 0))
        mu = np.where(unbounded, mu_floor, mu)

    traj = {key: np.stack(val) for key, val in traj.items()}
    return mu, eta, n_iter, ~active, best, traj


def _prepare(cfg: SystemConfig, est, scenario: ScenarioSpec, realizations):
    z = zeta(cfg.ber_target)
    weights, minterms, sinrs = [], [], []
    for real in realizations:
        wts = scenario_weights(scenario, real, est, cfg)
        mt = min_term(cfg, wts)
        weights.append(wts)
        minterms.append(mt)
        sinrs.append(scenario_sinr(cfg, real, mt))
    sinr = np.stack(sinrs)
    mts = np.array(minterms)
    batch = _Batch(gain=z * sinr / mts[:, None, None],
                   w=np.stack([wt.w_k for wt in weights]),
                   i_eff=np.array([wt.i_eff for wt in weights]),
                   p_total=cfg.p_total)
    return z, weights, mts, sinr, batch


def solve_batch(cfg: SystemConfig, est: EstimationModel | None, scenario: ScenarioSpec,
                realizations, options: SolverOptions | None = None) -> list[AllocationResult]:
    """Solve many realizations together.

    With ``options.shared_power`` the power budget is an average over the
    batch (one ``mu`` for all realizations); otherwise each realization has
    its own budget.  The interference budget is always per realization.
    """
    opts = options or SolverOptions()
    realizations = list(realizations)
    if not realizations:
        raise ParameterError("no realizations to solve")
    z, weights, mts, sinr, b = _prepare(cfg, est, scenario, realizations)
    mu_sg, eta_sg, n_iter, converged, best, traj = _run(b, opts)
    if opts.polish:
        mu, eta = _polish_shared(b) if opts.shared_power else _polish_individual(b)
    else:
        mu, eta = mu_sg, eta_sg
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(eta))):
        raise SolverError("multipliers became non-finite", trajectory=traj)

    phi, power, metric, price = b.primal(mu, eta)
    used = power.sum(axis=(1, 2))
    budget_used = used.mean() if opts.shared_power else used
    results = []
    for r, real in enumerate(realizations):
        m_star = np.where(phi[r] > 0, np.maximum(1.0, b.gain[r] / (LN2 * price[r][None, :])), 1.0)
        m_star = np.where(power[r] > 0, m_star, 1.0)
        rates = np.log2(m_star)
        q = quantize_rate(m_star)
        interference = float((power[r] * b.w[r][None, :]).sum())
        top = np.sort(metric[r], axis=0)
        second = top[-2] if top.shape[0] > 1 else np.zeros(top.shape[1])
        duals = DualState(lambda_k=0.5 * (top[-1] + second), mu=float(mu[r]), eta=float(eta[r]),
                          step1=float(opts.step_scale * mu_sg[r] / cfg.p_total / math.sqrt(n_iter[r])),
                          step2=float(opts.step_scale * max(eta_sg[r], 1e-300) / b.i_eff[r]
                                      / math.sqrt(n_iter[r])),
                          iteration=int(n_iter[r]))
        feas = {
            "power_used": float(used[r]),
            "power_budget_used": float(budget_used if opts.shared_power else budget_used[r]),
            "power_slack": float(cfg.p_total - (budget_used if opts.shared_power else budget_used[r])),
            "interference": interference,
            "interference_budget": float(b.i_eff[r]),
            "interference_slack": float(b.i_eff[r] - interference),
            "shared_power": opts.shared_power,
        }
        results.append(AllocationResult(
            phi=phi[r].astype(int), power=power[r], constellation=m_star, rates=rates,
            quantized_rates=q, ase=float(rates.sum()), ase_quantized=float((q * phi[r]).sum()),
            feasibility=feas,
            cutoff=np.broadcast_to(LN2 * price[r] * mts[r] / z, phi[r].shape).copy(),
            duals=duals, weights=weights[r], sinr=sinr[r], zeta=z, min_term=float(mts[r]),
            p_total=cfg.p_total, n_iter=int(n_iter[r]), converged=bool(converged[r]),
            best_iterate_ase=float(best[r]),
            trajectory={key: val[:, r] for key, val in traj.items()},
        ))
    return results


def solve(cfg: SystemConfig, est: EstimationModel | None, scenario: ScenarioSpec,
          realization: ChannelRealization, options: SolverOptions | None = None) -> AllocationResult:
    """Allocate power, rate and subcarriers for one realization."""
    opts = replace(options or SolverOptions(), shared_power=False)
    return solve_batch(cfg, est, scenario, [realization], opts)[0]


def ase(results, quantized: bool = False) -> float:
    """Sample mean of the per-realization sum rate."""
    results = list(results)
    if not results:
        raise ParameterError("ase needs at least one solved realization")
    if quantized:
        return float(np.mean([np.sum(r.quantized_rates * r.phi) for r in results]))
    return float(np.mean([np.sum(r.rates * r.phi) for r in results]))


@dataclass
class KKTReport:
    power_slack: float
    interference_slack: float
    power_violation: float
    interference_violation: float
    cs_power: float
    cs_interference: float
    stationarity: float
    inactive_violation: float
    dual_feasible: bool
    passed: bool


def verify_kkt(result: AllocationResult, duals: DualState, weights: ScenarioWeights,
               cfg: SystemConfig, tol: float = 1e-3, feas_tol: float = 1e-6,
               ensemble_power: float | None = None) -> KKTReport:
    """Check feasibility, complementary slackness and stationarity of a solution.

    Residuals are relative: slackness products are divided by multiplier times
    budget, stationarity by the price ``mu + eta * w``.  ``ensemble_power``
    replaces this realization's power use when the budget is an average.
    """
    phi = np.asarray(result.phi, dtype=float)
    power = phi * result.power
    w = weights.w_k
    used = float(power.sum()) if ensemble_power is None else float(ensemble_power)
    interf = float((power * w[None, :]).sum())
    p_slack = cfg.p_total - used
    i_slack = weights.i_eff - interf
    cs_p = abs(duals.mu * p_slack) / (duals.mu * cfg.p_total) if duals.mu > 0 else 0.0
    cs_i = abs(duals.eta * i_slack) / (duals.eta * weights.i_eff) if duals.eta > 0 else 0.0

    gain = result.zeta * result.sinr / result.min_term
    price = (duals.mu + duals.eta * w)[None, :] * np.ones_like(gain)
    on = (phi > 0) & (power > 0)
    idle = (phi > 0) & (power == 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        marginal = gain / (LN2 * (1.0 + gain * power))
        stat = float(np.max(np.abs(marginal[on] - price[on]) / price[on])) if on.any() else 0.0
        # derivative at zero power must not exceed the price
        idle_excess = (gain[idle] / LN2 - price[idle]) / price[idle]
    inactive = float(max(np.max(idle_excess), 0.0)) if idle.any() else 0.0

    p_viol = max(-p_slack, 0.0) / cfg.p_total
    i_viol = max(-i_slack, 0.0) / weights.i_eff
    dual_ok = duals.mu >= 0 and duals.eta >= 0
    passed = (dual_ok and p_viol <= feas_tol and i_viol <= feas_tol and cs_p <= tol
              and cs_i <= tol and stat <= tol and inactive <= tol)
    return KKTReport(p_slack, i_slack, p_viol, i_viol, cs_p, cs_i, stat, inactive, dual_ok, passed)
