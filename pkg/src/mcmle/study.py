"""Simulation experiments: coverage, convergence rate, scheme comparison.

Each experiment is bitwise reproducible from its configuration and master
seed: replicate k derives its own child seeds by stream splitting, so
replicates are independent yet the whole study replays exactly.  Replicates
are also embarrassingly parallel; with ``threads > 1`` they run in a
process pool and are merged in replicate-index order, which preserves the
single-threaded result bit for bit.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import engine, glmm, infer, optim, oracle
from .rng import child_seeds


class StudyError(RuntimeError):
    """Too many replicates failed for the study to be trustworthy."""


MAX_INVALID_FRACTION = 0.05


@dataclass(frozen=True)
class CoverageResult:
    replicates: int
    covered: int
    estimates: np.ndarray  # (replicates, d); NaN rows mark invalid replicates
    covered_flags: np.ndarray  # (replicates,) int8; -1 marks invalid
    invalid: int
    ellipse_used: str
    level: float
    seeds: dict
    failures: tuple[str, ...] = ()


@dataclass(frozen=True)
class ConvergenceResult:
    m_grid: tuple[int, ...]
    rmse: np.ndarray
    slope: float
    oracle_value: float


@dataclass(frozen=True)
class SchemeVarianceResult:
    trace_shared: float
    trace_fresh: float
    diff_se: float  # jackknife SE of (trace_fresh - trace_shared)
    replicates: int


def generate_dataset(design: glmm.GlmmDesign, truth: glmm.GlmmParams, n: int,
                     seed: int) -> engine.ObservedData:
    """Simulate an observed dataset at the given truth."""
    return glmm.simulate_y(design, truth, n, seed)


def _coverage_replicate(args):
    (design, truth_theta, n, m, level, seed, rep, mode, radius2, precision) = args
    model = glmm.as_model(design)
    data_seed, sample_seed = child_seeds(seed, rep, 2)
    truth_params = glmm.GlmmParams.from_theta(design, truth_theta)
    data = glmm.simulate_y(design, truth_params, n, data_seed)
    sample = engine.draw_sample(model, m, sample_seed)
    try:
        res = optim.fit_mcmle(model, data, sample)
        if not res.converged:
            return None, False, f"replicate {rep}: optimizer did not converge"
        theta_hat = res.theta
        canon = glmm.GlmmParams.from_theta(design, theta_hat).canonical().to_theta()
        if mode == "plugin":
            J = infer.estimate_J(model, theta_hat, data, sample)
            V = infer.estimate_V(model, theta_hat, data, sample)
            W = infer.estimate_W(model, theta_hat, data, sample)
            vcov = infer.sandwich_vcov(J, V, W, n=n, m=m)
            precision = np.linalg.inv(vcov)
            precision = 0.5 * (precision + precision.T)
        diff = truth_theta - canon
        covered = bool(float(diff @ precision @ diff) <= radius2)
        return canon, covered, None
    except (infer.RidgeError, optim.NonFiniteObjectiveError, engine.AllImpossibleError) as exc:
        return None, False, f"replicate {rep}: {exc}"


def coverage_study(design: glmm.GlmmDesign, truth: glmm.GlmmParams, n: int, m: int,
                   replicates: int, level: float, seed: int,
                   ellipse_mode: str = "exact-theory", threads: int = 1,
                   rule: oracle.QuadratureRule | None = None) -> CoverageResult:
    """Repeatedly simulate, fit, and test whether the truth falls in the
    level-ellipsoid centered at the estimate.

    ``ellipse_mode='exact-theory'`` builds one fixed ellipsoid shape from
    the oracle's exact J and W at the truth with V = J (correct
    specification); ``'plugin'`` re-estimates J, V, W per replicate at the
    fitted point.  Estimates are reported with the variance components
    folded to their nonnegative canonical sign.
    """
    if replicates < 1:
        raise ValueError("need at least one replicate")
    if ellipse_mode not in ("exact-theory", "plugin"):
        raise ValueError(f"unknown ellipse mode {ellipse_mode!r}")
    d = design.theta_dim
    truth_theta = truth.to_theta()
    radius2 = infer.chi2_quantile(level, dof=d)

    precision = None
    if ellipse_mode == "exact-theory":
        rule = rule or oracle.gauss_hermite(64)
        J, _, W = oracle.exact_JVW(design, truth, rule)
        vcov = infer.sandwich_vcov(J, J, W, n=n, m=m)
        precision = np.linalg.inv(vcov)
        precision = 0.5 * (precision + precision.T)

    tasks = [
        (design, truth_theta, n, m, level, seed, rep,
         "plugin" if ellipse_mode == "plugin" else "exact", radius2, precision)
        for rep in range(replicates)
    ]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_coverage_replicate, tasks, chunksize=8))
    else:
        results = [_coverage_replicate(t) for t in tasks]

    estimates = np.full((replicates, d), np.nan)
    flags = np.full(replicates, -1, dtype=np.int8)
    failures = []
    covered = 0
    for rep, (est, cov, err) in enumerate(results):
        if err is not None:
            failures.append(err)
            continue
        estimates[rep] = est
        flags[rep] = 1 if cov else 0
        covered += int(cov)
    invalid = len(failures)
    if invalid > MAX_INVALID_FRACTION * replicates:
        raise StudyError(
            f"{invalid}/{replicates} replicates invalid (> {MAX_INVALID_FRACTION:.0%}): "
            + "; ".join(failures[:5])
        )
    return CoverageResult(
        replicates=replicates,
        covered=covered,
        estimates=estimates,
        covered_flags=flags,
        invalid=invalid,
        ellipse_used=ellipse_mode,
        level=level,
        seeds={"master": int(seed)},
        failures=tuple(failures),
    )


def convergence_experiment(design: glmm.GlmmDesign, params: glmm.GlmmParams, y,
                           m_grid, seeds_per_m: int, seed: int = 0,
                           rule: oracle.QuadratureRule | None = None) -> ConvergenceResult:
    """RMSE of the Monte Carlo log marginal against the quadrature value for
    one record, across sample sizes; reports the fitted log-log slope."""
    rule = rule or oracle.gauss_hermite(64)
    target = oracle.gh_loglik(design, params, [y], rule)
    model = glmm.as_model(design)
    theta = params.to_theta()
    m_grid = tuple(int(m) for m in m_grid)
    rmse = np.empty(len(m_grid))
    for i, m in enumerate(m_grid):
        sq = 0.0
        for s in range(seeds_per_m):
            (sample_seed,) = child_seeds(seed, i * seeds_per_m + s)
            sample = engine.draw_sample(model, m, sample_seed)
            err = engine.log_marginal_mc(model, theta, y, sample) - target
            sq += err * err
        rmse[i] = np.sqrt(sq / seeds_per_m)
    if np.all(rmse > 0):
        slope = float(np.polyfit(np.log(m_grid), np.log(rmse), 1)[0])
    else:
        slope = float("nan")
    return ConvergenceResult(m_grid=m_grid, rmse=rmse, slope=slope, oracle_value=target)


def _trace_and_jackknife(G_shared: np.ndarray, G_fresh: np.ndarray):
    """Traces of the two score covariances plus the jackknife SE of their
    difference, all from per-replicate score matrices (R, d)."""
    R = G_shared.shape[0]

    def tr(G):
        return float(G.var(axis=0, ddof=1).sum())

    t_shared, t_fresh = tr(G_shared), tr(G_fresh)

    def loo_traces(G):
        s1 = G.sum(axis=0)
        s2 = (G * G).sum(axis=0)
        s1r = s1[None, :] - G
        s2r = s2[None, :] - G * G
        var_r = (s2r - s1r * s1r / (R - 1)) / (R - 2)
        return var_r.sum(axis=1)

    d_r = loo_traces(G_fresh) - loo_traces(G_shared)
    se = float(np.sqrt((R - 1) / R * ((d_r - d_r.mean()) ** 2).sum()))
    return t_shared, t_fresh, se


def scheme_variance_compare(design: glmm.GlmmDesign, params: glmm.GlmmParams,
                            data: engine.ObservedData, m: int, replicates: int,
                            seed: int) -> SchemeVarianceResult:
    """Variance of the Monte Carlo score at a fixed theta across replicate
    samples, under the shared-sample and fresh-per-record schemes.

    Both schemes spend the same total budget of m draws: the shared scheme
    reuses all m for every record, the fresh scheme splits them into n
    blocks of m/n.  Sharing averages the per-record score errors over one
    sample and can only reduce the variance, so trace_fresh should not
    fall below trace_shared by more than noise.
    """
    if replicates < 100:
        raise ValueError("need at least 100 replicates for a stable comparison")
    n = data.n
    if m % n != 0:
        raise ValueError(f"total budget m={m} must be divisible by n={n} record blocks")
    model = glmm.as_model(design)
    theta = params.to_theta()
    d = model.theta_dim
    G_shared = np.empty((replicates, d))
    G_fresh = np.empty((replicates, d))
    for rep in range(replicates):
        (rep_seed,) = child_seeds(seed, rep)
        sample = engine.draw_sample(model, m, rep_seed)
        G_shared[rep] = engine.mc_score(model, theta, data, sample)
        _, score = engine.mc_loglik_and_score_fresh(model, theta, data, m // n, rep_seed)
        G_fresh[rep] = score
    t_shared, t_fresh, se = _trace_and_jackknife(G_shared, G_fresh)
    return SchemeVarianceResult(
        trace_shared=t_shared, trace_fresh=t_fresh, diff_se=se, replicates=replicates
    )
