"""Exact reference machinery for verification.

For a one-dimensional random effect the observed-data likelihood is a
smooth one-dimensional integral against the standard normal, which
Gauss-Hermite quadrature evaluates to near machine precision.  For small
record length T the full response space {0,1}^T is enumerable, so the
information matrices J and V, the Monte Carlo variance kernel W, and the
Kullback-Leibler divergence between two parameter points can all be
computed exactly.  Everything here exists to check the sampling-based
estimates elsewhere in the package, so it is deliberately restricted to
the regimes where it is genuinely exact (q <= 1, T <= 12).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp

from . import optim
from .engine import ObservedData
from .glmm import GlmmDesign, GlmmParams, _augmented_batch, _eta_batch, softplus

ENUMERATION_MAX_T = 12


class QuadratureError(ValueError):
    """Raised when the rule cannot represent the requested integral."""


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes and weights for integrals against the standard normal density."""

    order: int
    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        for arr in (self.nodes, self.weights):
            np.asarray(arr).flags.writeable = False
        if len(self.nodes) != self.order or len(self.weights) != self.order:
            raise ValueError("rule arrays do not match the stated order")


def gauss_hermite(order: int = 64) -> QuadratureRule:
    """Gauss-Hermite rule reweighted for the N(0,1) measure."""
    if order < 1:
        raise ValueError("quadrature order must be >= 1")
    x, w = np.polynomial.hermite.hermgauss(order)
    return QuadratureRule(order=order, nodes=x * math.sqrt(2.0), weights=w / math.sqrt(math.pi))


def _check_univariate(design: GlmmDesign):
    if design.q > 1:
        raise QuadratureError(
            f"quadrature oracle requires a scalar random effect, design has q={design.q}"
        )


def _log_marginals(design, params, records, rule) -> np.ndarray:
    """(n,) exact log marginal densities log f(y_j) by quadrature."""
    Y = np.asarray(records, dtype=float)
    if design.q == 0:
        eta = design.X @ params.beta
        return Y @ eta - softplus(eta).sum()
    theta = params.to_theta()
    B = rule.nodes.reshape(-1, 1)
    eta = _eta_batch(design, theta, B)  # (order, T)
    lam = Y @ eta.T - softplus(eta).sum(axis=1)[None, :] + np.log(rule.weights)[None, :]
    return logsumexp(lam, axis=1)


def gh_loglik(design: GlmmDesign, params: GlmmParams, data, rule: QuadratureRule) -> float:
    """Exact observed-data log likelihood for q <= 1.

    With no random effect the integrand is constant in b and this is the
    plain Bernoulli log likelihood.
    """
    _check_univariate(design)
    records = data.records if isinstance(data, ObservedData) else data
    return float(_log_marginals(design, params, records, rule).sum())


def _node_moments(design, theta, records, rule, want_hess: bool):
    """Per-record quadrature-weighted score (and curvature) of log f(y)."""
    Y = np.asarray(records, dtype=float)
    B = rule.nodes.reshape(-1, 1)
    eta = _eta_batch(design, theta, B)
    lam = Y @ eta.T - softplus(eta).sum(axis=1)[None, :] + np.log(rule.weights)[None, :]
    logf = logsumexp(lam, axis=1)
    omega = np.exp(lam - logf[:, None])  # (n, order)
    M = _augmented_batch(design, B)  # (order, T, d)
    p = expit(eta)
    pM = np.einsum("mt,mtd->md", p, M)
    s = np.einsum("jt,mtd->jmd", Y, M, optimize=True) - pM[None, :, :]  # (n, order, d)
    score = np.einsum("jm,jmd->jd", omega, s)
    if not want_hess:
        return logf, score, None
    H = -np.einsum("mt,mtd,mte->mde", p * (1.0 - p), M, M)
    curv = (
        np.einsum("jm,mde->jde", omega, H)
        + np.einsum("jm,jmd,jme->jde", omega, s, s)
        - np.einsum("jd,je->jde", score, score)
    )
    return logf, score, curv


def gh_loglik_and_score(design, params, data, rule):
    """Exact log likelihood and its theta-gradient (analytic, not differenced)."""
    _check_univariate(design)
    records = data.records if isinstance(data, ObservedData) else data
    if design.q == 0:
        Y = np.asarray(records, dtype=float)
        eta = design.X @ params.beta
        p = expit(eta)
        value = float((Y @ eta).sum() - len(Y) * softplus(eta).sum())
        grad = design.X.T @ (Y.sum(axis=0) - len(Y) * p)
        return value, grad
    logf, score, _ = _node_moments(design, params.to_theta(), records, rule, want_hess=False)
    return float(logf.sum()), score.sum(axis=0)


def gh_mle(design: GlmmDesign, data, rule: QuadratureRule, theta0=None,
           opts: optim.OptimOptions | None = None) -> optim.OptResult:
    """Exact-likelihood maximizer via quasi-Newton ascent on the quadrature
    objective with its analytic gradient."""
    _check_univariate(design)
    if theta0 is None:
        theta0 = np.zeros(design.theta_dim)
        if design.r:
            theta0[design.p :] = 0.1

    def objective(theta):
        params = GlmmParams.from_theta(design, theta)
        return gh_loglik_and_score(design, params, data, rule)

    return optim.maximize(objective, theta0, opts)


def enumerate_outcomes(T: int) -> np.ndarray:
    """(2^T, T) matrix of all binary records, row k the bits of k."""
    if T > ENUMERATION_MAX_T:
        raise ValueError(
            f"enumeration over 2^{T} outcomes refused (cap T <= {ENUMERATION_MAX_T})"
        )
    grid = np.arange(2**T)
    return ((grid[:, None] >> np.arange(T)[None, :]) & 1).astype(float)


def exact_JVW(design: GlmmDesign, params: GlmmParams, rule: QuadratureRule,
              x_rule: QuadratureRule | None = None):
    """Exact J, V, W at a parameter point, assuming correct specification
    (the data-generating law is the model at ``params``).

    J and V come from exact summation over all 2^T outcomes with quadrature
    marginals and their derivatives; W integrates the squared
    outcome-averaged score kernel over the missing-data space with a finer
    dedicated rule.  Marginals are re-checked under order doubling and a
    disagreement beyond 1e-6 raises QuadratureError.
    """
    _check_univariate(design)
    if design.q != 1:
        raise QuadratureError("exact_JVW needs exactly one random effect")
    if x_rule is None:
        x_rule = gauss_hermite(max(128, 2 * rule.order))
    theta = params.to_theta()
    Y = enumerate_outcomes(design.T)

    logf, score, curv = _node_moments(design, theta, Y, rule, want_hess=True)
    logf2 = _log_marginals(design, params, Y, gauss_hermite(2 * rule.order))
    drift = float(np.abs(logf - logf2).max())
    if drift > 1e-6:
        raise QuadratureError(
            f"order doubling moved log marginals by {drift:.3e} (> 1e-6); "
            "increase the rule order"
        )

    f = np.exp(logf)
    J = -np.einsum("j,jde->de", f, curv)
    V = np.einsum("j,jd,je->de", f, score, score)

    # W: variance over x ~ N(0,1) of S(x) = sum_y exp(rho(x,y)) (s(x,y) - score(y))
    B = x_rule.nodes.reshape(-1, 1)
    eta = _eta_batch(design, theta, B)  # (kx, T)
    R = Y @ eta.T - softplus(eta).sum(axis=1)[None, :]  # (2^T, kx) log rho
    E = np.exp(R)
    M = _augmented_batch(design, B)
    p = expit(eta)
    pM = np.einsum("mt,mtd->md", p, M)
    sx = np.einsum("jt,mtd->jmd", Y, M, optimize=True) - pM[None, :, :]  # (2^T, kx, d)
    S = np.einsum("jm,jmd->md", E, sx) - E.T @ score  # (kx, d)
    mu = x_rule.weights @ S
    W = np.einsum("m,md,me->de", x_rule.weights, S, S) - np.outer(mu, mu)
    return J, V, W


def kl_info(design: GlmmDesign, params_true: GlmmParams, params: GlmmParams,
            rule: QuadratureRule) -> float:
    """Kullback-Leibler divergence of the model at ``params`` from the truth
    at ``params_true``, by exact enumeration of the response space."""
    _check_univariate(design)
    Y = enumerate_outcomes(design.T)
    logf0 = _log_marginals(design, params_true, Y, rule)
    logf1 = _log_marginals(design, params, Y, rule)
    return float(np.exp(logf0) @ (logf0 - logf1))
