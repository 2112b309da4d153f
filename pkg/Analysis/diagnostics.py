"""
Computable quantities from the local convergence analysis of EM.

- beta(i, j) = ||mu_i* - mu_j*||^2 / (64 (sigma_i* v sigma_j*)^2)
- good events for a sample X from source component j, judged against target component i
  (v = X - mu_j*, R = ||mu_j* - mu_i*||, Delta_mu = mu* - mu):
    E1: -R^2/5 <= <v, mu_j* - mu_i*>
    E2: -R^2/64 <= <v, Delta_mu_i>  and  <v, Delta_mu_j> <= (sigma_j*/sigma_i*)^2 R^2/64
    E3: d (1 - 2 sqrt(beta/d)) <= ||v||^2 / sigma_j*^2 <= d (1 + 2 sqrt(beta/d) + 2 beta/d)
  all three together fail with probability at most 5 exp(-beta).
- fixed-point residual: D_m after one EM step started at the truth.
- contraction ratios D_m(t+1) / D_m(t) along a fit trace.
"""

import os, sys, math, logging
from dataclasses import dataclass, field
import numpy as np
from scipy import stats
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from Method.core_model import Dataset, match_components, d_m
from Method.em_engine import EmConfig, em_step, e_step
from Method.utils import InvalidSpecError, DimensionMismatchError, MissingLabelsError
from Preprocessing.synth import SeededRng, sample_dataset

logger = logging.getLogger(__name__)

# stream used for fixed-point datasets; distinct from the generation streams of the CLI
FIXED_POINT_STREAM = 11
BINOMIAL_SLACK_SIGMAS = 4.0
PLATEAU_FLATNESS = 2.0
PLATEAU_MULTIPLE = 10.0
# a last step shrinking D_m by less than this counts as stationary
STALLED_RATIO = 0.9


@dataclass
class GoodEventReport:
    source_j: int
    target_i: int
    beta: float
    # (n_j, 3) booleans: E1, E2, E3 per label-j sample
    flags: np.ndarray
    empirical_bad_rate: float
    theoretical_bound: float
    # fraction of good samples whose weight on the target exceeds (pi_i / pi_j) exp(-beta)
    weight_bound_violation_rate_estimate: float = 0.0
    weight_bound_violation_rate_truth: float = 0.0

    @property
    def n_samples(self):
        return int(self.flags.shape[0])

    @property
    def slack(self):
        return binomial_slack(self.theoretical_bound, self.n_samples)

    @property
    def passes(self):
        return self.empirical_bad_rate <= self.theoretical_bound + self.slack

    def to_json_dict(self, include_flags=False):
        report = {
            "source_j": self.source_j,
            "target_i": self.target_i,
            "beta": self.beta,
            "n_samples": self.n_samples,
            "empirical_bad_rate": self.empirical_bad_rate,
            "theoretical_bound": self.theoretical_bound,
            "slack": self.slack,
            "passes": self.passes,
            "event_failures": {f"E{e + 1}": int(np.sum(~self.flags[:, e])) for e in range(3)},
            "weight_bound_violation_rate_estimate": self.weight_bound_violation_rate_estimate,
            "weight_bound_violation_rate_truth": self.weight_bound_violation_rate_truth,
        }
        if include_flags:
            report["flags"] = self.flags.astype(int).tolist()
        return report


@dataclass
class FixedPointSummary:
    n: int
    seeds: list
    values: list = field(default_factory=list)

    @property
    def median(self):
        return float(np.median(self.values))

    @property
    def max(self):
        return float(np.max(self.values))


@dataclass
class ContractionEstimate:
    # (t, D_m(t+1) / D_m(t)) for every t above the plateau threshold
    ratios: list
    floor: float
    plateau_detected: bool

    @property
    def max_ratio(self):
        return max((ratio for _, ratio in self.ratios), default=None)


def binomial_slack(bound, n):
    if n <= 0:
        return math.inf
    p = min(max(bound, 0.0), 1.0)
    return BINOMIAL_SLACK_SIGMAS * math.sqrt(p * (1.0 - p) / n) + 4.0 / n


def beta(spec, i, j):
    if i == j:
        raise InvalidSpecError("component pair", f"beta needs two distinct components, got ({i}, {j})")
    for index in (i, j):
        if not 0 <= index < spec.k:
            raise InvalidSpecError("component index", f"{index} outside [0, {spec.k})")
    distance_sq = float(np.sum((spec.means[i] - spec.means[j]) ** 2))
    return distance_sq / (64.0 * max(spec.variances[i], spec.variances[j]))


## Input
# samples: (m, d) array of points believed to come from source_j
# estimate: current parameters aligned with truth by component index
## Output
# (m, 3) boolean array of (E1, E2, E3)
def good_event_matrix(samples, source_j, target_i, estimate, truth):
    if source_j == target_i:
        raise InvalidSpecError("component pair", "source and target must differ")
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if samples.shape[1] != truth.d:
        raise DimensionMismatchError("sample dimension", truth.d, samples.shape[1])
    if estimate.d != truth.d or estimate.k != truth.k:
        raise DimensionMismatchError("estimate shape (k, d)", (truth.k, truth.d), (estimate.k, estimate.d))
    d = truth.d
    b = beta(truth, target_i, source_j)
    separation = truth.means[source_j] - truth.means[target_i]
    r_sq = float(separation @ separation)
    delta_target = truth.means[target_i] - estimate.means[target_i]
    delta_source = truth.means[source_j] - estimate.means[source_j]
    sigma_ratio_sq = truth.variances[source_j] / truth.variances[target_i]
    v = samples - truth.means[source_j]
    e1 = v @ separation >= -r_sq / 5.0
    e2 = (v @ delta_target >= -r_sq / 64.0) & (v @ delta_source <= sigma_ratio_sq * r_sq / 64.0)
    scaled_norm = np.einsum("ij,ij->i", v, v) / truth.variances[source_j]
    e3 = ((scaled_norm >= d * (1.0 - 2.0 * math.sqrt(b / d)))
          & (scaled_norm <= d * (1.0 + 2.0 * math.sqrt(b / d) + 2.0 * b / d)))
    return np.stack([e1, e2, e3], axis=1)


def good_event_flags(x, source_j, target_i, estimate, truth):
    row = good_event_matrix(np.asarray(x, dtype=np.float64).reshape(1, -1), source_j, target_i, estimate, truth)[0]
    return bool(row[0]), bool(row[1]), bool(row[2])


def _weight_bound_violations(params, samples, source_j, target_i, b):
    if len(samples) == 0:
        return 0.0
    weights = e_step(params, Dataset(samples)).values[:, target_i]
    limit = params.weights[target_i] / params.weights[source_j] * math.exp(-b)
    return float(np.mean(weights > limit))


## Output
# {source_j: GoodEventReport, or None when no label-j samples exist} for every j != target_i
def bad_event_rate(data, estimate, truth, target_i=0):
    if not data.has_labels:
        raise MissingLabelsError()
    if not 0 <= target_i < truth.k:
        raise InvalidSpecError("target_i", f"{target_i} outside [0, {truth.k})")
    # bring the estimate into the truth's component order
    aligned = estimate.permuted(match_components(estimate, truth).estimate_for_truth)
    reports = {}
    for source_j in range(truth.k):
        if source_j == target_i:
            continue
        samples = data.samples[data.labels == source_j]
        if len(samples) == 0:
            reports[source_j] = None
            continue
        b = beta(truth, target_i, source_j)
        flags = good_event_matrix(samples, source_j, target_i, aligned, truth)
        good = flags.all(axis=1)
        reports[source_j] = GoodEventReport(
            source_j=source_j, target_i=target_i, beta=b, flags=flags,
            empirical_bad_rate=float(1.0 - good.mean()),
            theoretical_bound=5.0 * math.exp(-b),
            weight_bound_violation_rate_estimate=_weight_bound_violations(aligned, samples[good], source_j, target_i, b),
            weight_bound_violation_rate_truth=_weight_bound_violations(truth, samples[good], source_j, target_i, b))
    return reports


def fixed_point_residual(truth, n, seeds, cfg=None, stream_id=FIXED_POINT_STREAM):
    if n < truth.k * 100:
        raise InvalidSpecError("n", f"needs at least 100 samples per component ({truth.k * 100}), got {n}")
    assert len(seeds) >= 1, "seeds must be nonempty"
    cfg = cfg if cfg is not None else EmConfig()
    summary = FixedPointSummary(n=int(n), seeds=list(seeds))
    for cur_seed in seeds:
        data = sample_dataset(truth, n, SeededRng(cur_seed, stream_id))
        updated = em_step(truth, data, cfg)
        summary.values.append(d_m(updated, truth, match_components(updated, truth)))
        logger.debug("fixed point: n {}; seed {}; D_m {:.4e}".format(n, cur_seed, summary.values[-1]))
    return summary


## Input
# trace: FitTrace with truth-matched D_m values, or a plain sequence of D_m values
## Output
# plateau = median of the last three values when that tail is flat (max/min <= 2); otherwise the last value when
# the trace has stalled (fit converged, or last step ratio >= 0.9); else 0.
# ratios D_m(t+1)/D_m(t) for every t with D_m(t) > 10 x plateau
def contraction_estimate(trace):
    values = list(trace.d_m_values) if hasattr(trace, "d_m_values") else list(trace)
    if len(values) < 2:
        raise InvalidSpecError("trace", f"needs at least 2 entries, got {len(values)}")
    if any(value is None for value in values):
        raise InvalidSpecError("trace", "every entry needs a truth-matched D_m")
    tail = values[-3:]
    flat = min(tail) > 0 and max(tail) / min(tail) <= PLATEAU_FLATNESS
    stalled = getattr(trace, "converged", False) or (values[-2] > 0 and values[-1] / values[-2] >= STALLED_RATIO)
    if flat:
        floor = float(np.median(tail))
    elif stalled:
        floor = float(values[-1])
    else:
        floor = 0.0
    threshold = PLATEAU_MULTIPLE * floor
    ratios = [(t, values[t + 1] / values[t]) for t in range(len(values) - 1)
              if values[t] > threshold and values[t] > 0]
    return ContractionEstimate(ratios=ratios, floor=floor, plateau_detected=bool(flat or stalled))


# slope of log(error) against log(n)
def rate_slope(ns, errors):
    ns = np.asarray(ns, dtype=np.float64)
    errors = np.asarray(errors, dtype=np.float64)
    if len(ns) < 2 or np.any(ns <= 0) or np.any(errors <= 0):
        raise InvalidSpecError("rate series", "needs at least two positive (n, error) points")
    return float(stats.linregress(np.log(ns), np.log(errors)).slope)
