"""Quasi-Newton maximization and profile curves.

The maximizer is dense BFGS on the negated objective with a backtracking
(Armijo) line search, so every accepted iterate increases the objective.
Analytic gradients come with the objective callable: it returns the pair
``(value, gradient)``.  Dimensions here are small (a couple dozen at
most), so dense inverse-Hessian updates are the right tool.

Convergence is declared when the gradient sup-norm drops below
``gtol * (1 + |value|)``; the relative form makes results invariant to
positive rescaling of the objective.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import ParamVector, mc_loglik_and_score, theta_values


class NonFiniteObjectiveError(RuntimeError):
    """Objective or gradient came back NaN/inf; carries the offending theta."""

    def __init__(self, theta: np.ndarray, what: str):
        self.theta = np.array(theta)
        super().__init__(f"non-finite {what} at theta={self.theta.tolist()}")


@dataclass(frozen=True)
class OptimOptions:
    gtol: float = 1e-8  # relative: scaled by (1 + |objective|)
    max_iter: int = 500
    armijo_c1: float = 1e-4
    max_backtracks: int = 60
    keep_trace: bool = True


@dataclass
class OptResult:
    theta_hat: ParamVector | np.ndarray
    objective: float
    grad_norm: float
    iterations: int
    converged: bool
    trace: list[tuple[float, float]] = field(default_factory=list)

    @property
    def theta(self) -> np.ndarray:
        return theta_values(self.theta_hat)


@dataclass(frozen=True)
class ProfilePoint:
    value: float
    objective: float
    theta: np.ndarray


def _check_finite(x, value, grad):
    if not np.isfinite(value):
        raise NonFiniteObjectiveError(x, "objective")
    if not np.isfinite(grad).all():
        raise NonFiniteObjectiveError(x, "gradient")


def maximize(objective, theta0, opts: OptimOptions | None = None) -> OptResult:
    """Maximize a smooth objective from theta0.

    Parameters
    ----------
    objective : callable
        theta -> (value, gradient).
    theta0 : array-like or ParamVector
        Start point; the objective must be finite here.
    opts : OptimOptions
        Tolerances and iteration limits.

    Returns
    -------
    OptResult with ``converged`` true iff the gradient sup-norm met the
    (relative) tolerance; hitting max_iter is reported, not raised.
    """
    opts = opts or OptimOptions()
    layout = theta0.layout if isinstance(theta0, ParamVector) else None
    x = np.array(theta_values(theta0), dtype=float)
    d = x.size

    f, g = objective(x)
    f, g = float(f), np.asarray(g, dtype=float)
    _check_finite(x, f, g)

    H = np.eye(d)  # approximates the inverse of the negated Hessian
    trace = [(f, float(np.abs(g).max()))] if opts.keep_trace else []
    converged = False
    iterations = 0
    first_update = True

    for _ in range(opts.max_iter):
        gnorm = float(np.abs(g).max())
        tol = opts.gtol * (1.0 + abs(f))
        if gnorm <= tol:
            converged = True
            break

        p = H @ g  # ascent direction
        slope = float(g @ p)
        if slope <= 0.0:  # update lost positive definiteness; restart
            H = np.eye(d)
            p = g.copy()
            slope = float(g @ g)

        alpha = 1.0
        accepted = False
        for _ in range(opts.max_backtracks):
            x_new = x + alpha * p
            f_new, g_new = objective(x_new)
            f_new, g_new = float(f_new), np.asarray(g_new, dtype=float)
            _check_finite(x_new, f_new, g_new)
            if f_new >= f + opts.armijo_c1 * alpha * slope:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break  # stuck at floating-point resolution; report as-is

        s = x_new - x
        y = g_new - g  # gradient change; curvature condition uses -y
        sy = -float(s @ y)
        if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y) + 1e-300):
            if first_update:
                H *= sy / float(y @ y)
                first_update = False
            rho = 1.0 / sy
            Hy = H @ (-y)
            H = H - np.outer(Hy, s) * rho - np.outer(s, Hy) * rho + np.outer(s, s) * (
                rho + rho * rho * float((-y) @ Hy)
            )
        x, f, g = x_new, f_new, g_new
        iterations += 1
        if opts.keep_trace:
            trace.append((f, float(np.abs(g).max())))
    else:
        pass  # max_iter exhausted; converged stays False

    gnorm = float(np.abs(g).max())
    if not converged:
        converged = gnorm <= opts.gtol * (1.0 + abs(f))
    theta_hat = ParamVector(x, layout) if layout is not None else x
    return OptResult(
        theta_hat=theta_hat,
        objective=f,
        grad_norm=gnorm,
        iterations=iterations,
        converged=converged,
        trace=trace,
    )


def profile(objective, theta0, coord: int, grid, opts: OptimOptions | None = None):
    """Profile the objective over one coordinate.

    For each grid value g the coordinate ``coord`` is pinned to g and the
    objective is maximized over the rest, warm-starting from the previous
    grid point's maximizer.  With a one-dimensional objective there is
    nothing to maximize and the curve is just the objective on the grid.

    Returns a list of ProfilePoint(value=g, objective=max, theta=argmax).
    """
    grid = [float(g) for g in grid]
    if not grid:
        raise ValueError("profile grid must be nonempty")
    x0 = np.array(theta_values(theta0), dtype=float)
    d = x0.size
    if not 0 <= coord < d:
        raise ValueError(f"coordinate {coord} out of range for dimension {d}")

    points: list[ProfilePoint] = []
    if d == 1:
        for gval in grid:
            theta = np.array([gval])
            value, _ = objective(theta)
            points.append(ProfilePoint(value=gval, objective=float(value), theta=theta))
        return points

    free = np.arange(d) != coord
    warm = x0[free]
    for gval in grid:
        def reduced(z, _gval=gval):
            theta = np.empty(d)
            theta[free] = z
            theta[coord] = _gval
            value, grad = objective(theta)
            return value, np.asarray(grad)[free]

        try:
            res = maximize(reduced, warm, opts)
        except NonFiniteObjectiveError as exc:
            raise NonFiniteObjectiveError(
                exc.theta, f"objective while profiling at grid value {gval}"
            ) from exc
        warm = theta_values(res.theta_hat)
        theta = np.empty(d)
        theta[free] = warm
        theta[coord] = gval
        points.append(ProfilePoint(value=gval, objective=res.objective, theta=theta))
    return points


def default_start(model) -> np.ndarray:
    """Zero vector with the delta block nudged to 0.1: exact zero sits on
    the sign-symmetry saddle of the variance components."""
    theta0 = np.zeros(model.theta_dim)
    if model.layout is not None:
        try:
            theta0[model.layout.block_slice("delta")] = 0.1
        except KeyError:
            pass
    return theta0


def fit_mcmle(model, data, sample, theta0=None, opts: OptimOptions | None = None) -> OptResult:
    """Maximize the Monte Carlo log likelihood for a fixed sample."""
    if theta0 is None:
        theta0 = default_start(model)
        if model.layout is not None:
            theta0 = ParamVector(theta0, model.layout)

    def objective(theta):
        return mc_loglik_and_score(model, theta, data, sample)

    return maximize(objective, theta0, opts)
