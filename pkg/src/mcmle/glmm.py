"""Logit-Normal GLMM: Bernoulli responses with normal random effects.

One record is a length-T binary vector whose components are independent
Bernoulli given the random effects, with linear predictor

    eta = X beta + Z diag(delta)[delta_map] b,      b ~ N(0, I_q).

The delta parameters are square roots of variance components; delta_map
lets several diagonal slots share one parameter.  Because b is standard
normal regardless of theta, the standard normal is the natural importance
density, and the joint-to-importance log ratio reduces to the conditional
Bernoulli log likelihood of y given b.  That makes the family a
``MissingDataModel`` with fully analytic derivatives: with the augmented
design M(b) = [X | C(b)], where column l of C sums Z columns mapped to
delta_l weighted by b, everything is plain logistic-regression algebra
on M(b).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .engine import MissingDataModel, ObservedData, ParamLayout, theta_values
from .rng import RandomStream


class ModelSpecError(ValueError):
    """A model spec file failed validation; the message names the field."""


def softplus(x):
    """log(1 + exp(x)) without overflow for large |x|."""
    x = np.asarray(x, dtype=float)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


@dataclass(frozen=True)
class GlmmDesign:
    """Design matrices and variance-component map of one record.

    delta_map holds 0-based parameter indices here; the JSON spec format
    uses 1-based indices and is converted on load.
    """

    X: np.ndarray
    Z: np.ndarray
    delta_map: np.ndarray
    name: str = ""

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        Z = np.asarray(self.Z, dtype=float)
        dmap = np.asarray(self.delta_map, dtype=int)
        if X.ndim != 2:
            raise ModelSpecError("X must be a matrix")
        if Z.ndim != 2 or Z.shape[0] != X.shape[0]:
            raise ModelSpecError("Z must be a matrix with the same number of rows as X")
        if dmap.shape != (Z.shape[1],):
            raise ModelSpecError("delta_map must have one entry per column of Z")
        if dmap.size:
            r = int(dmap.max()) + 1
            if dmap.min() < 0 or set(dmap.tolist()) != set(range(r)):
                raise ModelSpecError("delta_map must cover 1..r with no gaps")
        for arr in (X, Z, dmap):
            arr.flags.writeable = False
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "delta_map", dmap)

    @property
    def T(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        return self.Z.shape[1]

    @property
    def r(self) -> int:
        return int(self.delta_map.max()) + 1 if self.delta_map.size else 0

    @property
    def theta_dim(self) -> int:
        return self.p + self.r

    def layout(self) -> ParamLayout:
        blocks = []
        if self.p:
            blocks.append(("beta", self.p))
        if self.r:
            blocks.append(("delta", self.r))
        return ParamLayout(tuple(blocks))

    def delta_indicator(self) -> np.ndarray:
        """(q, r) 0/1 matrix: column l marks the Z columns sharing delta_l."""
        E = np.zeros((self.q, self.r))
        E[np.arange(self.q), self.delta_map] = 1.0
        return E


@dataclass(frozen=True)
class GlmmParams:
    """Fixed effects and square-root variance components."""

    beta: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "beta", np.atleast_1d(np.asarray(self.beta, dtype=float)))
        object.__setattr__(self, "delta", np.atleast_1d(np.asarray(self.delta, dtype=float)))
        if not (np.isfinite(self.beta).all() and np.isfinite(self.delta).all()):
            raise ValueError("parameters must be finite")

    @classmethod
    def from_theta(cls, design: GlmmDesign, theta) -> "GlmmParams":
        theta = theta_values(theta)
        if theta.shape != (design.theta_dim,):
            raise ValueError(
                f"theta has length {theta.shape[0]}, design expects {design.theta_dim}"
            )
        return cls(beta=theta[: design.p], delta=theta[design.p :])

    def to_theta(self) -> np.ndarray:
        return np.concatenate([self.beta, self.delta])

    def canonical(self) -> "GlmmParams":
        """Flip delta signs positive; the exact likelihood is even in delta."""
        return GlmmParams(beta=self.beta, delta=np.abs(self.delta))


def _check_binary(y) -> np.ndarray:
    y = np.asarray(y)
    if not np.isin(y, (0, 1)).all():
        raise ValueError("responses must be 0/1")
    return y.astype(float)


def linear_predictor(design: GlmmDesign, params: GlmmParams, b) -> np.ndarray:
    """eta = X beta + Z diag(delta[delta_map]) b for one random-effect draw."""
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if b.shape != (design.q,):
        raise ValueError(f"b has shape {b.shape}, design expects ({design.q},)")
    if params.beta.shape != (design.p,) or params.delta.shape != (design.r,):
        raise ValueError("parameter blocks do not match the design")
    eta = design.X @ params.beta
    if design.q:
        eta = eta + design.Z @ (params.delta[design.delta_map] * b)
    return eta


def log_ratio(design: GlmmDesign, params: GlmmParams, b, y) -> float:
    """Conditional Bernoulli log likelihood of y given b (equals the
    joint-to-importance log ratio because the importance density is the
    marginal law of b)."""
    y = _check_binary(y)
    eta = linear_predictor(design, params, b)
    return float(y @ eta - softplus(eta).sum())


def augmented_design(design: GlmmDesign, b) -> np.ndarray:
    """M(b) = [X | C(b)] with C collapsing Z columns onto shared deltas;
    eta = M(b) theta exactly."""
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if not design.q:
        return design.X
    C = design.Z @ (b[:, None] * design.delta_indicator())
    return np.hstack([design.X, C])


def log_ratio_grad(design: GlmmDesign, params: GlmmParams, b, y) -> np.ndarray:
    """Theta-gradient of the log ratio: M(b)^T (y - p)."""
    y = _check_binary(y)
    p = expit(linear_predictor(design, params, b))
    return augmented_design(design, b).T @ (y - p)


def log_ratio_hess(design: GlmmDesign, params: GlmmParams, b, y) -> np.ndarray:
    """Theta-Hessian of the log ratio: -M(b)^T diag(p(1-p)) M(b)."""
    _check_binary(y)
    p = expit(linear_predictor(design, params, b))
    M = augmented_design(design, b)
    return -(M.T * (p * (1.0 - p))) @ M


def simulate_y(design: GlmmDesign, params: GlmmParams, n: int, seed: int) -> ObservedData:
    """Simulate n records at the given truth: draw b ~ N(0, I_q), then each
    component Bernoulli(logistic(eta)).  Deterministic in the seed."""
    if n < 1:
        raise ValueError(f"number of records must be >= 1, got {n}")
    if params.beta.shape != (design.p,) or params.delta.shape != (design.r,):
        raise ValueError("parameter blocks do not match the design")
    stream = RandomStream(seed)
    B = stream.normals((n, design.q))
    eta = _eta_batch(design, params.to_theta(), B)
    probs = expit(eta)
    U = stream.uniforms((n, design.T))
    records = (U < probs).astype(np.int8)
    return ObservedData(records=records)


# ---------------------------------------------------------------------------
# vectorized kernels used by the engine


def _eta_batch(design: GlmmDesign, theta, B) -> np.ndarray:
    """(m, T) linear predictors for a block of random-effect draws."""
    params = GlmmParams.from_theta(design, theta)
    eta = np.broadcast_to(design.X @ params.beta, (B.shape[0], design.T)).copy()
    if design.q:
        eta += (B * params.delta[design.delta_map]) @ design.Z.T
    return eta


def _augmented_batch(design: GlmmDesign, B) -> np.ndarray:
    """(m, T, d) stack of augmented designs M(b_i)."""
    m = B.shape[0]
    Xrep = np.broadcast_to(design.X, (m, design.T, design.p))
    if not design.q:
        return Xrep.copy()
    C = np.einsum("ms,ts,sl->mtl", B, design.Z, design.delta_indicator(), optimize=True)
    return np.concatenate([Xrep, C], axis=2)


def _log_ratio_batch(design, theta, B, records) -> np.ndarray:
    Y = _check_binary(records)
    eta = _eta_batch(design, theta, B)
    return Y @ eta.T - softplus(eta).sum(axis=1)[None, :]


def _log_ratio_grad_batch(design, theta, B, records) -> np.ndarray:
    Y = _check_binary(records)
    eta = _eta_batch(design, theta, B)
    M = _augmented_batch(design, B)
    pM = np.einsum("mt,mtd->md", expit(eta), M)
    return np.einsum("jt,mtd->jmd", Y, M, optimize=True) - pM[None, :, :]


def _log_ratio_hess_batch(design, theta, B, records) -> np.ndarray:
    # independent of the record, so (m, d, d); the engine broadcasts
    p = expit(_eta_batch(design, theta, B))
    M = _augmented_batch(design, B)
    return -np.einsum("mt,mtd,mte->mde", p * (1.0 - p), M, M, optimize=True)


def as_model(design: GlmmDesign) -> MissingDataModel:
    """Wrap a design as the engine's missing-data capability bundle."""
    if design.q < 1:
        raise ValueError(
            "design has no random effects; its likelihood is closed-form "
            "and needs no Monte Carlo"
        )

    def _params(theta):
        return GlmmParams.from_theta(design, theta)

    return MissingDataModel(
        theta_dim=design.theta_dim,
        missing_dim=design.q,
        log_ratio=lambda th, x, y: log_ratio(design, _params(th), x, y),
        log_ratio_grad=lambda th, x, y: log_ratio_grad(design, _params(th), x, y),
        log_ratio_hess=lambda th, x, y: log_ratio_hess(design, _params(th), x, y),
        sample_importance=lambda stream: stream.normals(design.q),
        sample_importance_batch=lambda stream, m: stream.normals((m, design.q)),
        log_ratio_batch=lambda th, B, rec: _log_ratio_batch(design, th, B, rec),
        log_ratio_grad_batch=lambda th, B, rec: _log_ratio_grad_batch(design, th, B, rec),
        log_ratio_hess_batch=lambda th, B, rec: _log_ratio_hess_batch(design, th, B, rec),
        layout=design.layout(),
        name=design.name,
    )


# ---------------------------------------------------------------------------
# stock designs


def mcculloch_design(T: int = 15) -> GlmmDesign:
    """One fixed effect with covariate k/T, one scalar random intercept."""
    X = (np.arange(1, T + 1, dtype=float) / T).reshape(T, 1)
    Z = np.ones((T, 1))
    return GlmmDesign(X=X, Z=Z, delta_map=np.array([0]), name=f"mcculloch-t{T}")


def influenza_design() -> GlmmDesign:
    """Four outbreak effects with a shared-plus-contrast random structure:
    three variance parameters, the third shared by four slots."""
    X = np.eye(4)
    Z = np.array(
        [
            [1.0, 1.0, 1.0, 0.0, 0.0, 0.0],
            [1.0, 1.0, 0.0, 1.0, 0.0, 0.0],
            [1.0, 1.0, 0.0, 0.0, 1.0, 0.0],
            [1.0, -1.0, 0.0, 0.0, 0.0, 1.0],
        ]
    )
    return GlmmDesign(X=X, Z=Z, delta_map=np.array([0, 1, 2, 2, 2, 2]), name="influenza")


# ---------------------------------------------------------------------------
# model spec files


def design_from_spec(obj: dict) -> GlmmDesign:
    """Build a design from the JSON spec object; delta_map is 1-based there."""
    if not isinstance(obj, dict):
        raise ModelSpecError("model spec must be a JSON object")
    for field in ("X", "Z", "delta_map"):
        if field not in obj:
            raise ModelSpecError(f"model spec is missing field {field!r}")
    try:
        X = np.array(obj["X"], dtype=float)
    except (TypeError, ValueError) as exc:
        raise ModelSpecError(f"field 'X' is not a numeric matrix: {exc}") from None
    try:
        Z = np.array(obj["Z"], dtype=float)
        if Z.size == 0:
            Z = Z.reshape(len(obj["Z"]), 0)
    except (TypeError, ValueError) as exc:
        raise ModelSpecError(f"field 'Z' is not a numeric matrix: {exc}") from None
    try:
        dmap = np.array(obj["delta_map"], dtype=int) - 1
    except (TypeError, ValueError) as exc:
        raise ModelSpecError(f"field 'delta_map' is not an integer vector: {exc}") from None
    name = obj.get("name", "")
    if not isinstance(name, str):
        raise ModelSpecError("field 'name' must be a string")
    try:
        return GlmmDesign(X=X, Z=Z, delta_map=dmap, name=name)
    except ModelSpecError as exc:
        raise ModelSpecError(f"inconsistent model spec: {exc}") from None


def design_to_spec(design: GlmmDesign) -> dict:
    out = {
        "X": design.X.tolist(),
        "Z": design.Z.tolist(),
        "delta_map": (design.delta_map + 1).tolist(),
    }
    if design.name:
        out["name"] = design.name
    return out
