"""
EM for spherical Gaussian mixtures.

E-step:  w_i(X) proportional to pi_i exp(-||X - mu_i||^2 / (2 sigma_i^2) - d log(sigma_i^2) / 2),
         normalized over components in the log domain.
M-step:  pi_i+ = mean_j w_ij, mu_i+ = sum_j w_ij X_j / sum_j w_ij,
         sigma_i+^2 = max(floor, sum_j w_ij ||X_j - mu_i+||^2 / (d sum_j w_ij)).

fit runs either plain EM on the whole dataset or sample-splitting EM, where iteration t
uses only the t-th contiguous batch of the stored sample order.
"""

import os, sys, math, logging
from dataclasses import dataclass, field
from typing import Literal, Optional
import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, ValidationError, model_validator
from scipy.special import logsumexp
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from Method.core_model import GmmSpec, Dataset, match_components, d_m, parameter_change
from Method.utils import (DimensionMismatchError, EmptyComponentError, EmptyBatchError, ConfigError,
                          map_row_chunks, row_chunks, format_float)

logger = logging.getLogger(__name__)

ROW_SUM_TOL = 1e-10
VARIANCE_FLOOR_SCALE = 1e-12


@dataclass(frozen=True, eq=False)
class Responsibilities:
    # values[j, i] = w_i(X_j)
    values: np.ndarray

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def k(self):
        return self.values.shape[1]


class EmConfig(BaseModel):
    max_iters: Optional[int] = Field(None, ge=1, description="T; defaults to ceil(log2(1/tol)) + 5")
    tol: float = Field(1e-6, ge=0, description="stop when the successive parameter change falls below tol; 0 never stops early")
    mode: Literal["plain", "sample_split"] = "plain"
    batches: Optional[int] = Field(None, ge=1, description="number of batches in sample_split mode; must equal max_iters")
    variance_floor: Optional[float] = Field(None, gt=0, description="defaults to 1e-12 x data second moment")

    @model_validator(mode="after")
    def _fill_defaults(self):
        if self.max_iters is None:
            if self.tol == 0:
                raise ValueError("max_iters is required when tol is 0")
            self.max_iters = 5 if math.isinf(self.tol) else max(1, math.ceil(math.log2(1.0 / self.tol))) + 5
        if self.mode == "sample_split":
            if self.batches is None:
                self.batches = self.max_iters
            elif self.batches != self.max_iters:
                raise ValueError(f"sample_split mode uses one fresh batch per iteration: batches ({self.batches}) must equal max_iters ({self.max_iters})")
        return self

    @classmethod
    def build(cls, source="em config", **kwargs):
        try:
            return cls(**{key: value for key, value in kwargs.items() if value is not None})
        except ValidationError as e:
            raise ConfigError(source, "; ".join(
                "{}: {}".format(".".join(str(part) for part in err["loc"]) or "em", err["msg"]) for err in e.errors()))


@dataclass(frozen=True, eq=False)
class TraceEntry:
    iteration: int
    estimate: GmmSpec
    # None when no truth is given
    d_m: Optional[float]
    # log-likelihood of the batch used by the iteration (whole dataset in plain mode)
    loglik: float
    # parameter change from the previous iterate; None for the initialization
    change: Optional[float] = None


@dataclass
class FitTrace:
    entries: list = field(default_factory=list)
    converged: bool = False
    mode: str = "plain"

    @property
    def final(self):
        return self.entries[-1].estimate

    @property
    def d_m_values(self):
        return [entry.d_m for entry in self.entries]

    @property
    def iterations(self):
        return len(self.entries) - 1


def _check_dims(params, data):
    if params.d != data.d:
        raise DimensionMismatchError("dimension", params.d, data.d)


## Output
# (n, k) array of log pi_i - ||x - mu_i||^2 / (2 sigma_i^2) - d log(sigma_i^2) / 2 (minus d log(2 pi) / 2 when normalized)
def _log_joint(params, samples, normalized=False):
    log_prior = np.log(params.weights) - 0.5 * params.d * np.log(params.variances)
    if normalized:
        log_prior = log_prior - 0.5 * params.d * math.log(2.0 * math.pi)
    sq_dist = np.empty((len(samples), params.k))
    for cur_component in range(params.k):
        diff = samples - params.means[cur_component]
        sq_dist[:, cur_component] = np.einsum("ij,ij->i", diff, diff)
    return log_prior[None, :] - sq_dist / (2.0 * params.variances[None, :])


def _posterior_chunk(params, samples):
    log_joint = _log_joint(params, samples)
    # max-subtracted normalization; exp of the normalized log values stays within [0, 1]
    return np.exp(log_joint - logsumexp(log_joint, axis=1, keepdims=True))


def e_step(params, data):
    _check_dims(params, data)
    values = map_row_chunks(lambda rows: _posterior_chunk(params, rows), data.samples)
    return Responsibilities(values=values)


def log_likelihood(params, data):
    _check_dims(params, data)
    per_sample = map_row_chunks(lambda rows: logsumexp(_log_joint(params, rows, normalized=True), axis=1), data.samples)
    return float(np.mean(per_sample))


def default_variance_floor(data):
    return VARIANCE_FLOOR_SCALE * float(np.mean(data.samples ** 2))


def m_step(data, resp, variance_floor=None):
    if resp.n != data.n:
        raise DimensionMismatchError("responsibility rows", data.n, resp.n)
    if variance_floor is None:
        variance_floor = default_variance_floor(data)
    samples, w = data.samples, resp.values
    chunks = row_chunks(data.n)
    # sequential sums over row chunks in index order
    column_sums = np.zeros(resp.k)
    weighted_sums = np.zeros((resp.k, data.d))
    for start, stop in chunks:
        column_sums += w[start:stop].sum(axis=0)
        weighted_sums += w[start:stop].T @ samples[start:stop]
    for cur_component in range(resp.k):
        if not column_sums[cur_component] > 0:
            raise EmptyComponentError(cur_component)
    means = weighted_sums / column_sums[:, None]
    spread = np.zeros(resp.k)
    for start, stop in chunks:
        for cur_component in range(resp.k):
            diff = samples[start:stop] - means[cur_component]
            spread[cur_component] += w[start:stop, cur_component] @ np.einsum("ij,ij->i", diff, diff)
    variances = np.maximum(variance_floor, spread / (data.d * column_sums))
    weights = column_sums / data.n
    return GmmSpec(weights=weights / weights.sum(), means=means, variances=variances)


def em_step(params, data, cfg=None):
    cfg = cfg if cfg is not None else EmConfig()
    return m_step(data, e_step(params, data), cfg.variance_floor)


def _batch_bounds(n, batches):
    size = n // batches
    if size == 0:
        raise EmptyBatchError(0, n, batches)
    return [(t * size, (t + 1) * size) for t in range(batches)]


def _d_m_against(estimate, truth):
    if truth is None:
        return None
    return d_m(estimate, truth, match_components(estimate, truth))


## Input
# init: GmmSpec starting point; data: Dataset; cfg: EmConfig; truth: optional GmmSpec for matched D_m
## Output
# FitTrace with the initialization as entry 0 and one entry per iteration;
# converged is True when the parameter change fell below cfg.tol before max_iters ran out
def fit(init, data, cfg=None, truth=None):
    cfg = cfg if cfg is not None else EmConfig()
    _check_dims(init, data)
    if truth is not None and (truth.d != init.d or truth.k != init.k):
        raise DimensionMismatchError("truth shape (k, d)", (init.k, init.d), (truth.k, truth.d))
    if cfg.mode == "sample_split":
        batches = [data.rows(start, stop) for start, stop in _batch_bounds(data.n, cfg.batches)]
    else:
        batches = [data] * cfg.max_iters
    trace = FitTrace(mode=cfg.mode)
    trace.entries.append(TraceEntry(iteration=0, estimate=init, d_m=_d_m_against(init, truth),
                                    loglik=log_likelihood(init, batches[0])))
    current = init
    for cur_iter in range(1, cfg.max_iters + 1):
        batch = batches[cur_iter - 1]
        updated = em_step(current, batch, cfg)
        change = parameter_change(updated, current)
        entry = TraceEntry(iteration=cur_iter, estimate=updated, d_m=_d_m_against(updated, truth),
                           loglik=log_likelihood(updated, batch), change=change)
        trace.entries.append(entry)
        logger.debug("iter {}: change {:.3e}; D_m {}; loglik {:.6f}".format(
            cur_iter, change, "-" if entry.d_m is None else "{:.4e}".format(entry.d_m), entry.loglik))
        current = updated
        if change < cfg.tol:
            trace.converged = True
            break
    logger.info("fit ({} mode): {} iteration(s), converged: {}".format(cfg.mode, trace.iterations, trace.converged))
    return trace


## Trace CSV: iter, D_m, loglik, w0..w{k-1}, mu{i}_{c} for each component i and coordinate c, var0..var{k-1}
def trace_columns(k, d):
    return (["iter", "D_m", "loglik"] + [f"w{i}" for i in range(k)]
            + [f"mu{i}_{c}" for i in range(k) for c in range(d)] + [f"var{i}" for i in range(k)])


def trace_to_frame(trace):
    first = trace.entries[0].estimate
    rows = []
    for entry in trace.entries:
        est = entry.estimate
        rows.append([str(entry.iteration), format_float(entry.d_m), format_float(entry.loglik)]
                    + [format_float(x) for x in est.weights]
                    + [format_float(x) for x in est.means.reshape(-1)]
                    + [format_float(x) for x in est.variances])
    return pd.DataFrame(rows, columns=trace_columns(first.k, first.d))


def save_trace(trace, path):
    folder = os.path.dirname(path)
    if folder:
        os.makedirs(folder, exist_ok=True)
    trace_to_frame(trace).to_csv(path, index=False, lineterminator="\n")
