"""Monte-Carlo harness: parameter sweeps and sampling checks of the analytic laws.

All randomness derives from one master seed.  Trial ``t`` of any sweep point
uses ``SeedSequence(seed, spawn_key=(1, t))``, so grid points share their
channel draws (common random numbers) and sweeps can be split or reordered
without changing results.  Mean direct-link gains are drawn once per
experiment from ``spawn_key=(0,)``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .allocator import (ScenarioKind, ScenarioSpec, SolverError, SolverOptions, solve_batch,
                        verify_kkt)
from .distributions import (GaussianParams, SinrDistParams,
                            deterministic_cap, power_sum_gaussian, sinr_cdf,
                            weighted_chi_square_approx)
from .model import (EstimationModel, ParameterError, SystemConfig, complex_normal,
                    draw_direct_means, posterior_channel_params, sample_realization)

SWEEP_VARIABLES = ("i_th", "p_total", "rho", "pr", "eps", "ber_target", "k_subcarriers")
CSV_COLUMNS = ("value", "ase_mean", "ase_stderr", "violation_rate", "mean_iterations")


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, trial)))


def experiment_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))


@dataclass(frozen=True)
class SweepSpec:
    variable: str
    grid: tuple
    trials: int = 500
    scenario: ScenarioSpec = ScenarioSpec(ScenarioKind.PERFECT)
    base: SystemConfig = SystemConfig()
    estimate_variance: float | None = None
    seed: int | None = None
    shared_power: bool = True
    quantized: bool = False
    kkt_tol: float = 1e-3
    solver: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        if self.variable not in SWEEP_VARIABLES:
            raise ParameterError(f"unknown sweep variable {self.variable!r}; "
                                 f"expected one of {SWEEP_VARIABLES}")
        object.__setattr__(self, "grid", tuple(float(v) for v in np.atleast_1d(self.grid)))
        if not self.grid:
            raise ParameterError("sweep grid is empty")
        if self.trials < 1:
            raise ParameterError("trials must be at least 1")
        if self.variable == "pr" and self.scenario.kind is not ScenarioKind.WORST:
            raise ParameterError("a pr sweep needs the worst-case scenario")
        if self.variable == "eps" and self.scenario.kind is not ScenarioKind.PROBABILISTIC:
            raise ParameterError("an eps sweep needs the probabilistic scenario")
        if self.variable == "rho" and not self.scenario.imperfect:
            raise ParameterError("a rho sweep needs an imperfect-knowledge scenario")

    @property
    def master_seed(self) -> int:
        return self.base.rng_seed if self.seed is None else self.seed

    def point(self, value: float) -> tuple[SystemConfig, ScenarioSpec]:
        cfg, sc = self.base, self.scenario
        if self.variable == "i_th":
            cfg = cfg.with_(i_threshold=value)
        elif self.variable == "p_total":
            cfg = cfg.with_(p_total=value)
        elif self.variable == "ber_target":
            cfg = cfg.with_(ber_target=value)
        elif self.variable == "k_subcarriers":
            if value != int(value):
                raise ParameterError(f"k_subcarriers must be integral, got {value}")
            cfg = cfg.with_(n_subcarriers=int(value))
        elif self.variable == "rho":
            sc = replace(sc, rho=value)
        elif self.variable == "pr":
            sc = replace(sc, pr=value)
        else:
            sc = replace(sc, eps=value)
        return cfg, sc

    def estimation(self, cfg: SystemConfig, sc: ScenarioSpec) -> EstimationModel | None:
        if not sc.imperfect:
            return None
        if sc.rho is None:
            raise ParameterError(f"{sc.kind.value} scenario needs rho")
        v_hat = cfg.cross_variance if self.estimate_variance is None else self.estimate_variance
        return EstimationModel.from_correlation(sc.rho, v_hat)


@dataclass
class SweepPoint:
    value: float
    ase_mean: float
    ase_stderr: float
    violation_rate: float
    mean_iterations: float
    status: str = "ok"
    kkt_pass_rate: float = float("nan")
    trial_ase: np.ndarray = field(default=None, repr=False)


@dataclass
class SweepResult:
    points: list
    metadata: dict

    @property
    def values(self) -> np.ndarray:
        return np.array([p.value for p in self.points])

    @property
    def ase_mean(self) -> np.ndarray:
        return np.array([p.ase_mean for p in self.points])

    @property
    def ase_stderr(self) -> np.ndarray:
        return np.array([p.ase_stderr for p in self.points])

    @property
    def failed(self) -> bool:
        return any(p.status != "ok" for p in self.points)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS + ("status",))
        for p in self.points:
            writer.writerow([repr(float(getattr(p, c))) for c in CSV_COLUMNS] + [p.status])
        return buf.getvalue()

    def to_json(self) -> str:
        rows = [{c: _finite_or_none(getattr(p, c)) for c in CSV_COLUMNS}
                | {"status": p.status, "kkt_pass_rate": _finite_or_none(p.kkt_pass_rate)}
                for p in self.points]
        return json.dumps({"metadata": self.metadata, "points": rows}, indent=2, sort_keys=True)


def _finite_or_none(x):
    x = float(x)
    return x if math.isfinite(x) else None


def _config_echo(cfg: SystemConfig) -> dict:
    out = asdict(cfg)
    out["cross_mean"] = [cfg.cross_mean.real, cfg.cross_mean.imag]
    out["direct_mean_range"] = list(cfg.direct_mean_range)
    return out


def true_interference(result, true_cross) -> float:
    return float(np.sum(result.phi * result.power * np.abs(true_cross)[None, :] ** 2))


def _solve_point(spec: SweepSpec, value: float, direct_means_seed: int) -> SweepPoint:
    cfg, sc = spec.point(value)
    est = spec.estimation(cfg, sc)
    dm = draw_direct_means(cfg, experiment_rng(direct_means_seed))
    reals = [sample_realization(cfg, est, trial_rng(spec.master_seed, t), dm)
             for t in range(spec.trials)]
    results = solve_batch(cfg, est, sc, reals, replace(spec.solver, shared_power=spec.shared_power))
    rates = np.array([r.ase_quantized if spec.quantized else r.ase for r in results])
    mean_power = float(np.mean([r.power_used for r in results])) if spec.shared_power else None
    kkt = [verify_kkt(r, r.duals, r.weights, cfg, tol=spec.kkt_tol, ensemble_power=mean_power)
           for r in results]
    violations = [true_interference(r, real.cross_gains) > cfg.i_threshold * (1 + 1e-9)
                  for r, real in zip(results, reals)]
    stderr = float(rates.std(ddof=1) / math.sqrt(rates.size)) if rates.size > 1 else 0.0
    return SweepPoint(value, float(rates.mean()), stderr, float(np.mean(violations)),
                      float(np.mean([r.n_iter for r in results])),
                      kkt_pass_rate=float(np.mean([k.passed for k in kkt])), trial_ase=rates)


def run_sweep(spec: SweepSpec) -> SweepResult:
    """Solve ``spec.trials`` realizations at every grid value and aggregate.

    A point whose solve raises is recorded with a ``failed: ...`` status and
    NaN statistics; the sweep carries on with the remaining points.
    """
    points = []
    for value in spec.grid:
        try:
            points.append(_solve_point(spec, value, spec.master_seed))
        except (SolverError, ParameterError, FloatingPointError) as exc:
            nan = float("nan")
            points.append(SweepPoint(value, nan, nan, nan, nan, status=f"failed: {exc}"))
    sc = spec.scenario
    metadata = {
        "seed": spec.master_seed,
        "variable": spec.variable,
        "grid": list(spec.grid),
        "trials": spec.trials,
        "scenario": {"kind": sc.kind.value, "rho": sc.rho, "pr": sc.pr, "eps": sc.eps},
        "base": _config_echo(spec.base),
        "estimate_variance": spec.estimate_variance,
        "power_budget": "average over trials" if spec.shared_power else "per trial",
        "rates": "quantized" if spec.quantized else "continuous",
    }
    return SweepResult(points, metadata)


# ---------------------------------------------------------------------------
# sampling checks


def cross_link_sum_params(cfg: SystemConfig, convention: str = "total") -> GaussianParams:
    """Gaussian law of the perfectly known cross-link power sum."""
    means = np.full(cfg.n_subcarriers, cfg.cross_mean)
    return power_sum_gaussian(means, cfg.cross_variance, convention)


def sinr_params(cfg: SystemConfig, direct_mean: float = 1.0,
                convention: str = "total") -> SinrDistParams:
    return SinrDistParams(direct_mean, cfg.total_noise, cfg.p_total, cfg.i_threshold,
                          cfg.n_subcarriers, cross_link_sum_params(cfg, convention))


def sample_sinr(cfg: SystemConfig, est: EstimationModel | None, samples: int,
                rng: np.random.Generator, direct_mean: float = 1.0,
                chunk: int = 20000) -> np.ndarray:
    """Draws of ``min(P_t/K, I_th/N) * |H|^2 / noise`` with ``N`` the cross-link power sum."""
    k = cfg.n_subcarriers
    out = np.empty(samples)
    for start in range(0, samples, chunk):
        n = min(chunk, samples - start)
        if est is None:
            cross = complex_normal(rng, cfg.cross_variance, (n, k), cfg.cross_mean)
        else:
            err = complex_normal(rng, est.error_variance, (n, k))
            cross = 2 * err + complex_normal(rng, est.estimate_variance - est.error_variance, (n, k))
        nsp = np.sum(np.abs(cross) ** 2, axis=1)
        direct = rng.exponential(direct_mean, n)
        out[start:start + n] = np.minimum(cfg.p_total / k, cfg.i_threshold / nsp) * direct / cfg.total_noise
    return out


def empirical_sinr_cdf(cfg: SystemConfig, est: EstimationModel | None, samples: int,
                       rng: np.random.Generator | None = None, direct_mean: float = 1.0):
    """Sorted ``(gamma, F_hat)`` table from direct simulation of the received SINR."""
    if samples < 1000:
        raise ParameterError("empirical_sinr_cdf needs at least 1000 samples")
    rng = rng or experiment_rng(cfg.rng_seed)
    g = np.sort(sample_sinr(cfg, est, samples, rng, direct_mean))
    return g, np.arange(1, samples + 1) / samples


def sup_gap(sorted_samples: np.ndarray, cdf_values: np.ndarray) -> float:
    """Kolmogorov distance between the empirical cdf of sorted samples and a model cdf."""
    n = sorted_samples.size
    upper = np.arange(1, n + 1) / n
    return float(max(np.max(np.abs(upper - cdf_values)), np.max(np.abs(upper - 1 / n - cdf_values))))


def sinr_cdf_check(cfg: SystemConfig, samples: int, seed: int, direct_mean: float = 1.0,
                   convention: str = "total") -> dict:
    g, _ = empirical_sinr_cdf(cfg, None, samples, experiment_rng(seed), direct_mean)
    model = sinr_cdf(g, sinr_params(cfg, direct_mean, convention))
    return {"gamma": g, "cdf": model, "sup_gap": sup_gap(g, model)}


@dataclass(frozen=True)
class WeightLaw:
    """Distribution of the per-term weights: a shifted chi-square or shifted gamma."""

    family: str
    shape: float
    scale: float = 1.0
    location: float = 0.0

    def __post_init__(self):
        if self.family not in ("chi-square", "gamma"):
            raise ParameterError(f"unknown weight law {self.family!r}")
        if self.shape <= 0 or self.scale <= 0:
            raise ParameterError("weight law shape and scale must be positive")

    @classmethod
    def chi_square(cls, dof: float = 2.0, location: float = 2.0) -> "WeightLaw":
        return cls("chi-square", dof, 1.0, location)

    @classmethod
    def gamma(cls, shape: float = 2.0, scale: float = 0.5, mean: float = 4.0) -> "WeightLaw":
        """Gamma weights shifted so that their mean equals ``mean``."""
        return cls("gamma", shape, scale, mean - shape * scale)

    @property
    def mean(self) -> float:
        return self.location + self.shape * self.scale

    def draw(self, rng: np.random.Generator, k: int) -> np.ndarray:
        if self.family == "chi-square":
            return self.location + rng.chisquare(self.shape, k)
        return self.location + rng.gamma(self.shape, self.scale, k)


@dataclass
class Fig2Result:
    x: np.ndarray
    empirical: np.ndarray
    approx: np.ndarray
    sup_gap: float
    weights: np.ndarray
    metadata: dict


def fig2_validation(weight_law: WeightLaw, k: int, samples: int, variance: float = 1.0,
                    mean: complex = 0.0, rng: np.random.Generator | None = None,
                    table_points: int = 200) -> Fig2Result:
    """Compare the moment-matched chi-square law of ``sum_k beta_k |X_k|^2`` with sampling.

    ``X_k ~ CN(mean, variance)`` in the total-variance convention; the weights
    ``beta`` are drawn once.
    """
    if k < 1 or samples < 2:
        raise ParameterError("need k >= 1 and at least two samples")
    rng = rng or np.random.default_rng()
    beta = weight_law.draw(rng, k)
    half = variance / 2.0
    approx = weighted_chi_square_approx(beta * half, np.full(k, abs(mean) ** 2 / half))
    total = np.empty(samples)
    chunk = max(1, 2_000_000 // k)
    for start in range(0, samples, chunk):
        n = min(chunk, samples - start)
        x = complex_normal(rng, variance, (n, k), mean)
        total[start:start + n] = np.abs(x) ** 2 @ beta
    total.sort()
    model = approx.cdf(total)
    gap = sup_gap(total, model)
    idx = np.unique(np.linspace(0, samples - 1, min(table_points, samples)).astype(int))
    meta = {"weight_law": asdict(weight_law), "weight_mean": weight_law.mean, "k": k,
            "samples": samples, "variance": variance, "mean": [complex(mean).real, complex(mean).imag],
            "approx": asdict(approx)}
    return Fig2Result(total[idx], (idx + 1) / samples, model[idx], gap, beta, meta)


def cap_collision_rate(est: EstimationModel, k: int, eps: float, i_threshold: float,
                       draws: int, rng: np.random.Generator, power=None,
                       chunk: int = 20000) -> float:
    """Collision rate of a power vector scaled so its weighted sum hits the deterministic cap.

    One set of estimates and (unless given) random powers is drawn; the true
    cross-link is then resampled ``draws`` times from its posterior.
    """
    estimate = complex_normal(rng, est.estimate_variance, k)
    p = rng.uniform(0.1, 1.0, k) if power is None else np.asarray(power, dtype=float)
    rho2 = est.correlation ** 2
    alpha = 2.0 * (1.0 - rho2) * est.error_variance + np.abs((1.0 + rho2) * estimate) ** 2
    p = p * deterministic_cap(i_threshold, eps, k) / np.dot(alpha, p)
    mean, var = posterior_channel_params(est, estimate)
    hits = 0
    for start in range(0, draws, chunk):
        n = min(chunk, draws - start)
        h = complex_normal(rng, var, (n, k), mean)
        hits += int(np.count_nonzero(np.abs(h) ** 2 @ p > i_threshold))
    return hits / draws


@dataclass
class AuditResult:
    rate: float
    stderr: float
    trials: int
    ase_mean: float
    metadata: dict


def violation_audit(cfg: SystemConfig, est: EstimationModel, scenario: ScenarioSpec,
                    trials: int, seed: int | None = None, zero_power: bool = False,
                    batch: int = 1000, solver: SolverOptions | None = None) -> AuditResult:
    """Fraction of solved trials whose interference under the true channel exceeds the threshold.

    Each trial solves the allocation from the estimate, then draws the true
    cross-link from its posterior given that estimate.
    """
    if scenario.kind is not ScenarioKind.PROBABILISTIC:
        raise ParameterError("violation_audit expects the probabilistic scenario")
    if trials < 1:
        raise ParameterError("trials must be at least 1")
    seed = cfg.rng_seed if seed is None else seed
    dm = draw_direct_means(cfg, experiment_rng(seed))
    hits, rates = 0, []
    for start in range(0, trials, batch):
        idx = range(start, min(trials, start + batch))
        rngs = [trial_rng(seed, t) for t in idx]
        reals = [sample_realization(cfg, est, r, dm) for r in rngs]
        results = solve_batch(cfg, est, scenario, reals,
                              replace(solver or SolverOptions(), shared_power=False))
        for res, real, rng in zip(results, reals, rngs):
            mean, var = posterior_channel_params(est, real.cross_estimates)
            truth = complex_normal(rng, var, cfg.n_subcarriers, mean)
            power = np.zeros_like(res.power) if zero_power else res.power
            hits += float(np.sum(res.phi * power * np.abs(truth)[None, :] ** 2)) > cfg.i_threshold
            rates.append(0.0 if zero_power else res.ase)
    rate = hits / trials
    meta = {"seed": seed, "eps": scenario.eps, "rho": est.correlation,
            "estimate_variance": est.estimate_variance, "base": _config_echo(cfg),
            "cap": deterministic_cap(cfg.i_threshold, scenario.eps, cfg.n_subcarriers)}
    return AuditResult(rate, math.sqrt(max(scenario.eps * (1 - scenario.eps), 0) / trials),
                       trials, float(np.mean(rates)), meta)
