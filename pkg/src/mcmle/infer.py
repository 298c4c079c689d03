"""Plug-in variance estimation and confidence regions.

The estimator's asymptotic covariance splits into a sampling part and a
Monte Carlo part around the curvature:

    vcov = J^-1 (V/n + W/m) J^-1

J-hat is the average negated Hessian of the Monte Carlo log likelihood,
V-hat the uncentered second moment of per-record scores, and W-hat the
empirical second moment over sample points of the per-point kernel
S_i = (1/n) sum_j w_ij (s_ij - g_j), with w_ij = m * u_ij the unnormalized
importance weights.  The S_i average to exactly zero by construction, a
useful self-check.

A nearly singular J-hat is a finding, not a nuisance: it signals a ridge
in the likelihood surface (non-identifiable directions), so it raises a
dedicated error naming the smallest eigenvalue instead of silently
pseudo-inverting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import chdtri

from . import engine
from .engine import MonteCarloSample, ParamVector


class RidgeError(np.linalg.LinAlgError):
    """Curvature matrix is singular or nearly so: a likelihood ridge."""

    def __init__(self, smallest_eigenvalue: float, cond: float):
        self.smallest_eigenvalue = smallest_eigenvalue
        self.cond = cond
        super().__init__(
            "curvature estimate is not invertible (ridge / non-identifiable): "
            f"smallest eigenvalue {smallest_eigenvalue:.6e}, condition number {cond:.3e}"
        )


@dataclass(frozen=True)
class InferenceReport:
    J_hat: np.ndarray
    V_hat: np.ndarray
    W_hat: np.ndarray
    vcov: np.ndarray
    se: np.ndarray
    m: int
    n: int
    theta_ref: ParamVector | np.ndarray


@dataclass(frozen=True)
class Ellipse:
    """The set q(theta) = (theta-center)^T vcov^-1 (theta-center) <= radius2."""

    center: np.ndarray
    axes: np.ndarray  # orthonormal eigenvectors, one per column
    radii: np.ndarray  # semi-axis lengths
    radius2: float  # chi-square quantile used
    level: float
    precision: np.ndarray  # inverse of the covariance


def estimate_J(model, theta, data, sample: MonteCarloSample) -> np.ndarray:
    """Average negated Hessian of the MC log likelihood: -(1/n) mc_hessian."""
    n = len(engine._as_records(data))
    return -engine.mc_hessian(model, theta, data, sample) / n


def estimate_V(model, theta, data, sample: MonteCarloSample) -> np.ndarray:
    """Uncentered second moment of per-record MC scores."""
    g = engine.mc_record_scores(model, theta, data, sample)
    return g.T @ g / g.shape[0]


def estimate_W(model, theta, data, sample: MonteCarloSample) -> np.ndarray:
    """Empirical second moment over sample points of the per-point score
    deviation kernel; the Monte Carlo analogue of V."""
    theta = engine.theta_values(theta)
    records = engine._as_records(data)
    n = len(records)
    logz = engine._log_normalizers(model, theta, records, sample)
    g = engine._record_scores_from_logz(model, theta, records, sample, logz)
    W = np.zeros((model.theta_dim, model.theta_dim))
    for points in engine.iter_chunks(sample):
        ratios = engine._ratio_chunk(model, theta, points, records)
        w = sample.m * np.exp(ratios - logz[:, None])  # (n, chunk)
        s = engine._grad_chunk(model, theta, points, records)
        S = np.einsum("jm,jmd->md", w, s - g[:, None, :]) / n  # (chunk, d)
        W += S.T @ S
    return W / sample.m


def estimate_W_fresh(model, theta, data, samples: list[MonteCarloSample]) -> np.ndarray:
    """Fresh-scheme analogue of W: each record's own sample estimates the
    per-record score-kernel variance, averaged over records."""
    theta = engine.theta_values(theta)
    records = engine._as_records(data)
    if len(samples) != len(records):
        raise ValueError("need exactly one sample per record")
    d = model.theta_dim
    W = np.zeros((d, d))
    for y, sample_j in zip(records, samples):
        logz = engine._log_normalizers(model, theta, [y], sample_j)
        g = engine._record_scores_from_logz(model, theta, [y], sample_j, logz)
        for points in engine.iter_chunks(sample_j):
            ratios = engine._ratio_chunk(model, theta, points, [y])
            w = sample_j.m * np.exp(ratios - logz[:, None])
            s = engine._grad_chunk(model, theta, points, [y])
            K = w[0][:, None] * (s[0] - g[0][None, :])  # (chunk, d)
            W += K.T @ K / sample_j.m
    return W / len(records)


def sandwich_vcov(J_hat, V_hat, W_hat, n: int, m: int, cond_cap: float = 1e12) -> np.ndarray:
    """J^-1 (V/n + W/m) J^-1 via a symmetric eigenfactorization of J.

    Raises RidgeError when J is singular beyond ``cond_cap``; the message
    carries the smallest eigenvalue, which is the quantity to report when
    diagnosing a likelihood ridge.
    """
    J = np.asarray(J_hat, dtype=float)
    evals, evecs = np.linalg.eigh(0.5 * (J + J.T))
    small = float(np.abs(evals).min())
    big = float(np.abs(evals).max())
    if small == 0.0 or big / small > cond_cap or evals.min() <= 0.0:
        raise RidgeError(float(evals.min()), np.inf if small == 0.0 else big / small)
    B = np.asarray(V_hat, dtype=float) / n + np.asarray(W_hat, dtype=float) / m
    inner = evecs.T @ B @ evecs / np.outer(evals, evals)
    vcov = evecs @ inner @ evecs.T
    return 0.5 * (vcov + vcov.T)


def chi2_quantile(level: float, dof: int = 2) -> float:
    """Chi-square quantile via the regularized incomplete gamma inverse."""
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must be in (0, 1), got {level}")
    return float(chdtri(dof, 1.0 - level))


def confidence_ellipse(vcov2, center, level: float) -> Ellipse:
    """Nominal confidence ellipse for a 2-vector with covariance vcov2."""
    vcov2 = np.asarray(vcov2, dtype=float)
    center = np.asarray(center, dtype=float)
    if vcov2.shape != (2, 2) or center.shape != (2,):
        raise ValueError("confidence_ellipse is two-dimensional")
    evals, evecs = np.linalg.eigh(0.5 * (vcov2 + vcov2.T))
    if evals.min() <= 0.0:
        raise np.linalg.LinAlgError(
            f"covariance is not positive definite (eigenvalues {evals.tolist()})"
        )
    radius2 = chi2_quantile(level, dof=2)
    precision = evecs @ np.diag(1.0 / evals) @ evecs.T
    return Ellipse(
        center=center,
        axes=evecs,
        radii=np.sqrt(evals * radius2),
        radius2=radius2,
        level=level,
        precision=0.5 * (precision + precision.T),
    )


def ellipse_contains(ellipse: Ellipse, point) -> bool:
    """Membership by the quadratic form, boundary inclusive."""
    diff = np.asarray(point, dtype=float) - ellipse.center
    return float(diff @ ellipse.precision @ diff) <= ellipse.radius2


def standard_errors(report: InferenceReport) -> dict[str, float]:
    """Square roots of the vcov diagonal, labeled by the parameter layout."""
    diag = np.diag(report.vcov)
    if (diag < 0).any():
        raise ValueError(
            f"negative variance estimate on the diagonal: {diag.tolist()} "
            "(upstream numerical failure)"
        )
    se = np.sqrt(diag)
    if isinstance(report.theta_ref, ParamVector):
        labels = report.theta_ref.layout.labels()
    else:
        labels = tuple(f"theta[{i}]" for i in range(len(se)))
    return dict(zip(labels, (float(x) for x in se)))


def build_report(model, theta, data, sample: MonteCarloSample,
                 cond_cap: float = 1e12) -> InferenceReport:
    """All plug-ins and the sandwich at one parameter point."""
    records = engine._as_records(data)
    n = len(records)
    J = estimate_J(model, theta, data, sample)
    V = estimate_V(model, theta, data, sample)
    W = estimate_W(model, theta, data, sample)
    vcov = sandwich_vcov(J, V, W, n=n, m=sample.m, cond_cap=cond_cap)
    se = np.sqrt(np.diag(vcov))
    return InferenceReport(
        J_hat=J, V_hat=V, W_hat=W, vcov=vcov, se=se, m=sample.m, n=n, theta_ref=theta
    )
