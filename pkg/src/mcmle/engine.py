"""Monte Carlo likelihood engine for missing-data models.

A model is specified through the log ratio ``rho(theta, x, y)`` of the
complete-data density to the importance density that the missing draws
come from.  Averaging ``exp(rho)`` over an i.i.d. importance sample gives
a simulation-consistent estimate of the intractable observed-data
marginal; everything here evaluates that estimate, its log and its first
two theta-derivatives in the log domain, where it cannot overflow.

Evaluation is pure: the importance sample is drawn once, frozen, and
shared by every operation, so the Monte Carlo log likelihood is an
ordinary deterministic function of theta that an optimizer can maximize.
Reductions over sample points run in fixed-size chunks (a fixed pairwise
tree), which makes every result bitwise reproducible for given inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Sequence

import numpy as np

from .rng import GENERATOR_ID, RandomStream

# Sample points are processed this many at a time.  The value is part of
# the numerical contract: changing it changes the reduction tree and
# therefore low-order bits of results.
CHUNK_SIZE = 2048


class AllImpossibleError(ValueError):
    """Every sample point has ratio -inf for some record: the estimated
    marginal is exactly zero and its log is undefined."""

    def __init__(self, record_index: int):
        self.record_index = record_index
        super().__init__(
            f"estimated marginal is zero for record {record_index}: "
            "all importance ratios are -inf"
        )


class NonFiniteRatioError(ValueError):
    """A ratio evaluation produced +inf or NaN (a model bug; -inf alone is
    legal and means a structurally impossible record)."""


@dataclass(frozen=True)
class ParamLayout:
    """Maps coordinates of a parameter vector to named blocks."""

    blocks: tuple[tuple[str, int], ...]

    @property
    def dim(self) -> int:
        return sum(size for _, size in self.blocks)

    def labels(self) -> tuple[str, ...]:
        out = []
        for name, size in self.blocks:
            if size == 1:
                out.append(name)
            else:
                out.extend(f"{name}[{i}]" for i in range(size))
        return tuple(out)

    def block_slice(self, name: str) -> slice:
        lo = 0
        for block, size in self.blocks:
            if block == name:
                return slice(lo, lo + size)
            lo += size
        raise KeyError(f"no parameter block named {name!r}")

    def index_of(self, label: str) -> int:
        labels = self.labels()
        try:
            return labels.index(label)
        except ValueError:
            raise KeyError(
                f"unknown parameter {label!r}; expected one of {list(labels)}"
            ) from None


@dataclass(frozen=True)
class ParamVector:
    """A parameter point theta together with its block layout."""

    values: np.ndarray
    layout: ParamLayout

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        if values.shape != (self.layout.dim,):
            raise ValueError(
                f"parameter vector has length {values.shape}, layout expects {self.layout.dim}"
            )

    def block(self, name: str) -> np.ndarray:
        return self.values[self.layout.block_slice(name)]

    def replace(self, values) -> "ParamVector":
        return ParamVector(np.array(values, dtype=float), self.layout)

    def labeled(self) -> dict[str, float]:
        return dict(zip(self.layout.labels(), (float(v) for v in self.values)))


def theta_values(theta) -> np.ndarray:
    """Plain coordinate array of a ParamVector or array-like theta."""
    if isinstance(theta, ParamVector):
        return theta.values
    return np.asarray(theta, dtype=float)


@dataclass(frozen=True)
class MissingDataModel:
    """Capability bundle a missing-data model must provide.

    ``log_ratio`` and its derivatives are the per-point contract; the
    optional ``*_batch`` hooks return the same values for a whole sample
    chunk at once and exist purely for speed.  ``log_ratio_hess_batch``
    may return shape (m, d, d) when the Hessian does not depend on the
    record, or (n, m, d, d) in general.
    """

    theta_dim: int
    missing_dim: int
    log_ratio: Callable[[np.ndarray, np.ndarray, Any], float]
    log_ratio_grad: Callable[[np.ndarray, np.ndarray, Any], np.ndarray]
    log_ratio_hess: Callable[[np.ndarray, np.ndarray, Any], np.ndarray]
    sample_importance: Callable[[RandomStream], np.ndarray]
    sample_importance_batch: Callable[[RandomStream, int], np.ndarray] | None = None
    log_ratio_batch: Callable[..., np.ndarray] | None = None
    log_ratio_grad_batch: Callable[..., np.ndarray] | None = None
    log_ratio_hess_batch: Callable[..., np.ndarray] | None = None
    layout: ParamLayout | None = None
    name: str = ""

    def __post_init__(self):
        if self.theta_dim < 1:
            raise ValueError("theta_dim must be a positive integer")
        if self.missing_dim < 1:
            raise ValueError("missing_dim must be a positive integer")


@dataclass(frozen=True)
class MonteCarloSample:
    """Frozen i.i.d. draws from the importance density."""

    points: np.ndarray
    m: int
    seed: int
    generator_id: str = GENERATOR_ID

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float)
        points.flags.writeable = False
        object.__setattr__(self, "points", points)
        if points.shape[0] != self.m or self.m < 1:
            raise ValueError(f"sample advertises m={self.m} but holds {points.shape[0]} points")


@dataclass(frozen=True)
class ObservedData:
    """The observed records; payload layout is owned by the model."""

    records: Any

    @property
    def n(self) -> int:
        return len(self.records)

    def __post_init__(self):
        if isinstance(self.records, np.ndarray):
            self.records.flags.writeable = False
        if len(self.records) < 1:
            raise ValueError("observed data must contain at least one record")


def draw_sample(model: MissingDataModel, m: int, seed: int) -> MonteCarloSample:
    """Draw m i.i.d. missing-data points from the importance density.

    Deterministic in (seed, m); the first k points of any sample equal the
    m=k sample for the same seed (stream-prefix property).
    """
    if m < 1:
        raise ValueError(f"Monte Carlo sample size must be >= 1, got {m}")
    stream = RandomStream(seed, stream=0)
    if model.sample_importance_batch is not None:
        points = np.asarray(model.sample_importance_batch(stream, m), dtype=float)
    else:
        points = np.stack([np.atleast_1d(model.sample_importance(stream)) for _ in range(m)])
    points = points.reshape(m, model.missing_dim)
    return MonteCarloSample(points=points, m=m, seed=int(seed))


# ---------------------------------------------------------------------------
# chunked evaluation internals


def _as_records(data) -> Sequence:
    if isinstance(data, ObservedData):
        return data.records
    return data


def _ratio_chunk(model, theta, points, records) -> np.ndarray:
    """(n, chunk) matrix of rho(theta, x_i, y_j) values."""
    if model.log_ratio_batch is not None:
        out = np.asarray(model.log_ratio_batch(theta, points, records), dtype=float)
    else:
        out = np.array(
            [[model.log_ratio(theta, x, y) for x in points] for y in records],
            dtype=float,
        )
    if np.isnan(out).any() or np.isposinf(out).any():
        raise NonFiniteRatioError("log ratio produced NaN or +inf")
    return out


def _grad_chunk(model, theta, points, records) -> np.ndarray:
    """(n, chunk, d) array of ratio gradients."""
    if model.log_ratio_grad_batch is not None:
        return np.asarray(model.log_ratio_grad_batch(theta, points, records), dtype=float)
    return np.array(
        [[model.log_ratio_grad(theta, x, y) for x in points] for y in records],
        dtype=float,
    )


def _hess_chunk(model, theta, points, records) -> np.ndarray:
    """(n, chunk, d, d) or (chunk, d, d) array of ratio Hessians."""
    if model.log_ratio_hess_batch is not None:
        return np.asarray(model.log_ratio_hess_batch(theta, points, records), dtype=float)
    return np.array(
        [[model.log_ratio_hess(theta, x, y) for x in points] for y in records],
        dtype=float,
    )


def iter_chunks(sample: MonteCarloSample, chunk: int = CHUNK_SIZE) -> Iterator[np.ndarray]:
    for lo in range(0, sample.m, chunk):
        yield sample.points[lo : lo + chunk]


def _log_normalizers(model, theta, records, sample) -> np.ndarray:
    """Per-record logsumexp over all sample points of the ratio matrix.

    Streaming over chunks with a running maximum; raises AllImpossibleError
    if some record's ratios are all -inf.
    """
    theta = theta_values(theta)
    n = len(records)
    run_max = np.full(n, -np.inf)
    run_sum = np.zeros(n)
    for points in iter_chunks(sample):
        ratios = _ratio_chunk(model, theta, points, records)
        chunk_max = ratios.max(axis=1)
        new_max = np.maximum(run_max, chunk_max)
        alive = new_max > -np.inf
        if alive.any():
            shifted = ratios[alive] - new_max[alive, None]
            run_sum[alive] = run_sum[alive] * np.exp(run_max[alive] - new_max[alive]) + np.exp(
                shifted
            ).sum(axis=1)
        run_max = new_max
    dead = run_max == -np.inf
    if dead.any():
        raise AllImpossibleError(int(np.flatnonzero(dead)[0]))
    return run_max + np.log(run_sum)


def log_marginal_mc(model, theta, y, sample: MonteCarloSample) -> float:
    """Log of the importance-sampling estimate of the marginal density of
    one record: logsumexp_i rho(theta, X_i, y) - log m."""
    logz = _log_normalizers(model, theta, [y], sample)
    return float(logz[0] - math.log(sample.m))


def mc_loglik(model, theta, data, sample: MonteCarloSample) -> float:
    """Monte Carlo log likelihood: sum of log marginal estimates over records."""
    return mc_loglik_and_score(model, theta, data, sample, want_score=False)[0]


def per_record_log_marginals(model, theta, data, sample: MonteCarloSample) -> np.ndarray:
    """(n,) vector of per-record log marginal estimates."""
    records = _as_records(data)
    return _log_normalizers(model, theta, records, sample) - math.log(sample.m)


def weights(model, theta, y, sample: MonteCarloSample) -> np.ndarray:
    """Normalized importance weights of one record: softmax over sample
    points of the ratios.  Nonnegative, sums to one."""
    theta = theta_values(theta)
    logz = _log_normalizers(model, theta, [y], sample)[0]
    parts = []
    for points in iter_chunks(sample):
        ratios = _ratio_chunk(model, theta, points, [y])
        parts.append(np.exp(ratios[0] - logz))
    return np.concatenate(parts)


def mc_loglik_and_score(model, theta, data, sample, want_score: bool = True):
    """Value and gradient of the Monte Carlo log likelihood in one sweep.

    Returns ``(value, score)``; ``score`` is None when not requested.
    """
    theta = theta_values(theta)
    records = _as_records(data)
    logz = _log_normalizers(model, theta, records, sample)
    value = float(logz.sum() - len(records) * math.log(sample.m))
    if not want_score:
        return value, None
    g = _record_scores_from_logz(model, theta, records, sample, logz)
    return value, g.sum(axis=0)


def _record_scores_from_logz(model, theta, records, sample, logz) -> np.ndarray:
    """(n, d) matrix of per-record weighted scores sum_i u_ij s_ij."""
    n = len(records)
    g = np.zeros((n, model.theta_dim))
    for points in iter_chunks(sample):
        ratios = _ratio_chunk(model, theta, points, records)
        u = np.exp(ratios - logz[:, None])
        s = _grad_chunk(model, theta, points, records)
        g += np.einsum("jm,jmd->jd", u, s)
    return g


def mc_record_scores(model, theta, data, sample: MonteCarloSample) -> np.ndarray:
    """Per-record gradients of the Monte Carlo log likelihood, stacked (n, d)."""
    theta = theta_values(theta)
    records = _as_records(data)
    logz = _log_normalizers(model, theta, records, sample)
    return _record_scores_from_logz(model, theta, records, sample, logz)


def mc_score(model, theta, data, sample: MonteCarloSample) -> np.ndarray:
    """Gradient of mc_loglik at theta, exact for the fixed sample."""
    return mc_record_scores(model, theta, data, sample).sum(axis=0)


def mc_hessian(model, theta, data, sample: MonteCarloSample) -> np.ndarray:
    """Hessian of mc_loglik at theta, exact for the fixed sample.

    Per record: sum_i u_i (H_i + s_i s_i^T) - g g^T with g the weighted
    score; assembled analytically from the weight representation, never by
    differencing.
    """
    theta = theta_values(theta)
    records = _as_records(data)
    d = model.theta_dim
    n = len(records)
    logz = _log_normalizers(model, theta, records, sample)
    g = np.zeros((n, d))
    curv = np.zeros((n, d, d))
    for points in iter_chunks(sample):
        ratios = _ratio_chunk(model, theta, points, records)
        u = np.exp(ratios - logz[:, None])
        s = _grad_chunk(model, theta, points, records)
        h = _hess_chunk(model, theta, points, records)
        g += np.einsum("jm,jmd->jd", u, s)
        curv += np.einsum("jm,jmd,jme->jde", u, s, s)
        if h.ndim == 3:  # record-invariant Hessian, shape (chunk, d, d)
            curv += np.einsum("jm,mde->jde", u, h)
        else:
            curv += np.einsum("jm,jmde->jde", u, h)
    total = curv.sum(axis=0) - np.einsum("jd,je->de", g, g)
    return total


def _fresh_sample(model, m_per_obs: int, seed: int, record_index: int) -> MonteCarloSample:
    stream = RandomStream(seed, stream=record_index)
    if model.sample_importance_batch is not None:
        points = np.asarray(model.sample_importance_batch(stream, m_per_obs), dtype=float)
    else:
        points = np.stack(
            [np.atleast_1d(model.sample_importance(stream)) for _ in range(m_per_obs)]
        )
    return MonteCarloSample(points=points.reshape(m_per_obs, model.missing_dim), m=m_per_obs, seed=int(seed))


def fresh_record_samples(model, n: int, m_per_obs: int, seed: int) -> list[MonteCarloSample]:
    """One independent sample per record: record j reads substream j of the
    seed, so record 0's sample coincides with ``draw_sample``'s for the
    same seed."""
    if m_per_obs < 1:
        raise ValueError(f"per-record sample size must be >= 1, got {m_per_obs}")
    return [_fresh_sample(model, m_per_obs, seed, j) for j in range(n)]


def mc_loglik_fresh(model, theta, data, m_per_obs: int, seed: int) -> float:
    """Monte Carlo log likelihood under the fresh-sample scheme: each record
    is evaluated with its own independent block of draws."""
    value, _ = mc_loglik_and_score_fresh(model, theta, data, m_per_obs, seed, want_score=False)
    return value


def mc_loglik_and_score_fresh(model, theta, data, m_per_obs: int, seed: int, want_score: bool = True):
    """Value (and optionally gradient) of the fresh-sample log likelihood."""
    records = _as_records(data)
    samples = fresh_record_samples(model, len(records), m_per_obs, seed)
    return mc_loglik_and_score_per_sample(model, theta, data, samples, want_score)


def mc_loglik_and_score_per_sample(model, theta, data, samples, want_score: bool = True):
    """Like mc_loglik_and_score, but record j is evaluated with its own
    pre-drawn sample (the fresh scheme with the drawing factored out)."""
    theta = theta_values(theta)
    records = _as_records(data)
    if len(samples) != len(records):
        raise ValueError("need exactly one sample per record")
    value = 0.0
    score = np.zeros(model.theta_dim) if want_score else None
    for j, (y, sample_j) in enumerate(zip(records, samples)):
        try:
            logz = _log_normalizers(model, theta, [y], sample_j)
        except AllImpossibleError:
            raise AllImpossibleError(j) from None
        value += float(logz[0] - math.log(sample_j.m))
        if want_score:
            score += _record_scores_from_logz(model, theta, [y], sample_j, logz)[0]
    return value, score
