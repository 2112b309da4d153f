"""
Domain types for spherical Gaussian mixtures and the metrics used to judge estimates.

A mixture stores, per component i, a weight pi_i, a mean mu_i in R^d and a variance
sigma_i^2 (covariance sigma_i^2 * I_d). Errors are reported in the true component's
units: mean error / sigma_i*, relative weight error, and sqrt(d)-scaled relative
variance error; D_m is the worst of these over all components.
"""

import os, sys, json, math, itertools
from dataclasses import dataclass
from typing import NamedTuple, Optional
import numpy as np
from pydantic import BaseModel, Field, ValidationError
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import pdist, squareform
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from Method.utils import InvalidSpecError, DimensionMismatchError, DataFormatError

WEIGHT_SUM_TOL = 1e-12
# relative slack when comparing a separation margin with C
SEPARATION_REL_TOL = 1e-12


def _frozen(array):
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class GmmSpec:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        weights = np.array(self.weights, dtype=np.float64).reshape(-1)
        means = np.array(self.means, dtype=np.float64)
        variances = np.array(self.variances, dtype=np.float64).reshape(-1)
        k = len(weights)
        if k < 1:
            raise InvalidSpecError("weights", "a mixture needs at least one component")
        if means.ndim != 2 or means.shape[0] != k or means.shape[1] < 1:
            raise InvalidSpecError("means", f"expected a ({k}, d) array with d >= 1, got shape {means.shape}")
        if len(variances) != k:
            raise InvalidSpecError("variances", f"expected {k} entries, got {len(variances)}")
        if not (np.all(np.isfinite(weights)) and np.all(np.isfinite(means)) and np.all(np.isfinite(variances))):
            raise InvalidSpecError("parameters", "all parameters must be finite")
        if np.any(weights <= 0):
            raise InvalidSpecError("weights", f"every weight must be positive, got {weights.tolist()}")
        if abs(weights.sum() - 1.0) > WEIGHT_SUM_TOL:
            raise InvalidSpecError("weights", f"weights must sum to 1 (got {weights.sum()!r})")
        if np.any(variances <= 0):
            raise InvalidSpecError("variances", f"every variance must be positive, got {variances.tolist()}")
        object.__setattr__(self, "weights", _frozen(weights))
        object.__setattr__(self, "means", _frozen(means))
        object.__setattr__(self, "variances", _frozen(variances))

    @property
    def k(self):
        return len(self.weights)

    @property
    def d(self):
        return self.means.shape[1]

    @property
    def sigmas(self):
        return np.sqrt(self.variances)

    # order[new_index] = old_index
    def permuted(self, order):
        order = np.asarray(order, dtype=np.int64)
        return GmmSpec(self.weights[order], self.means[order], self.variances[order])

    def translated(self, shift):
        return GmmSpec(self.weights, self.means + np.asarray(shift, dtype=np.float64), self.variances)

    def equals(self, other):
        return (self.k == other.k and self.d == other.d
                and np.array_equal(self.weights, other.weights)
                and np.array_equal(self.means, other.means)
                and np.array_equal(self.variances, other.variances))

    def to_document(self):
        return GmmSpecDocument(
            d=self.d,
            components=[ComponentDocument(weight=float(w), mean=[float(x) for x in mu], variance=float(v))
                        for w, mu, v in zip(self.weights, self.means, self.variances)])

    @classmethod
    def from_document(cls, document):
        for cur_id, cur_component in enumerate(document.components):
            if len(cur_component.mean) != document.d:
                raise DimensionMismatchError(f"component {cur_id} mean length", document.d, len(cur_component.mean))
        return cls(weights=[c.weight for c in document.components],
                   means=[c.mean for c in document.components],
                   variances=[c.variance for c in document.components])


@dataclass(frozen=True, eq=False)
class Dataset:
    samples: np.ndarray
    labels: Optional[np.ndarray] = None
    # number of components the labels index into; required when labels are given
    k: Optional[int] = None

    def __post_init__(self):
        samples = np.array(self.samples, dtype=np.float64)
        if samples.ndim == 1:
            samples = samples.reshape(-1, 1)
        if samples.ndim != 2 or samples.shape[1] < 1:
            raise InvalidSpecError("samples", f"expected an (n, d) array, got shape {samples.shape}")
        object.__setattr__(self, "samples", _frozen(samples))
        if self.labels is not None:
            labels = np.array(self.labels, dtype=np.int64).reshape(-1)
            if len(labels) != len(samples):
                raise DimensionMismatchError("label count", len(samples), len(labels))
            upper = self.k if self.k is not None else (int(labels.max()) + 1 if len(labels) else 0)
            if len(labels) and (labels.min() < 0 or labels.max() >= upper):
                raise InvalidSpecError("labels", f"labels must lie in [0, {upper})")
            object.__setattr__(self, "labels", _frozen(labels))
            object.__setattr__(self, "k", upper)

    @property
    def n(self):
        return self.samples.shape[0]

    @property
    def d(self):
        return self.samples.shape[1]

    @property
    def has_labels(self):
        return self.labels is not None

    # contiguous slice in storage order
    def rows(self, start, stop):
        labels = None if self.labels is None else self.labels[start:stop]
        return Dataset(self.samples[start:stop], labels, self.k)

    def with_label(self, component):
        mask = self.labels == component
        return Dataset(self.samples[mask], self.labels[mask], self.k)


@dataclass(frozen=True, eq=False)
class MatchResult:
    # permutation[e] = t: estimate component e is matched to true component t
    permutation: np.ndarray
    # indexed by true component
    per_component_mean_err: np.ndarray
    per_component_weight_err: np.ndarray
    per_component_var_err: np.ndarray

    @property
    def estimate_for_truth(self):
        inverse = np.empty_like(self.permutation)
        inverse[self.permutation] = np.arange(len(self.permutation))
        return inverse

    @classmethod
    def identity(cls, estimate, truth):
        return match_with_permutation(estimate, truth, np.arange(truth.k))


class DerivedStats(NamedTuple):
    pi_min: float
    rho_pi: float
    rho_sigma: float
    pairwise_distances: np.ndarray


class SeparationCheck(NamedTuple):
    holds: bool
    margin: float


## JSON documents
class ComponentDocument(BaseModel):
    weight: float = Field(..., description="mixing weight pi_i")
    mean: list[float] = Field(..., description="mean vector mu_i")
    variance: float = Field(..., description="variance sigma_i^2 (covariance sigma_i^2 * I_d)")


class GmmSpecDocument(BaseModel):
    d: int = Field(..., ge=1, description="dimension")
    components: list[ComponentDocument] = Field(..., min_length=1)


def spec_to_json(spec):
    # json floats are written with repr, which round-trips exactly
    return json.dumps(spec.to_document().model_dump(), indent=2)


def spec_from_json(text, source="<string>"):
    try:
        document = GmmSpecDocument.model_validate_json(text)
    except ValidationError as e:
        raise DataFormatError(source, "; ".join(
            "{}: {}".format(".".join(str(part) for part in err["loc"]) or "<document>", err["msg"]) for err in e.errors()))
    try:
        return GmmSpec.from_document(document)
    except (InvalidSpecError, DimensionMismatchError) as e:
        raise DataFormatError(source, str(e))


def save_spec(spec, path):
    folder = os.path.dirname(path)
    if folder:
        os.makedirs(folder, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(spec_to_json(spec) + "\n")


def load_spec(path):
    with open(path, "r", encoding="utf-8") as f:
        return spec_from_json(f.read(), source=path)


## Metrics
def derived_stats(spec):
    sigmas = spec.sigmas
    pairwise_distances = squareform(pdist(spec.means)) if spec.k > 1 else np.zeros((1, 1))
    return DerivedStats(
        pi_min=float(spec.weights.min()),
        rho_pi=float(spec.weights.max() / spec.weights.min()),
        rho_sigma=float(sigmas.max() / sigmas.min()),
        pairwise_distances=pairwise_distances)


# sqrt(log k + log(rho_sigma * rho_pi)); the scale-free factor of the separation condition
def separation_log_factor(spec):
    stats = derived_stats(spec)
    return math.sqrt(math.log(spec.k) + math.log(stats.rho_sigma * stats.rho_pi))


## Output
# margin: min over i != j of ||mu_i - mu_j|| / ((sigma_i v sigma_j) * sqrt(log k + log(rho_sigma rho_pi)))
# holds: margin >= C
def check_separation(spec, C=64.0):
    if spec.k == 1:
        return SeparationCheck(holds=True, margin=math.inf)
    stats = derived_stats(spec)
    sigmas = spec.sigmas
    scale = np.maximum.outer(sigmas, sigmas) * separation_log_factor(spec)
    off_diagonal = ~np.eye(spec.k, dtype=bool)
    margin = float(np.min(stats.pairwise_distances[off_diagonal] / scale[off_diagonal]))
    return SeparationCheck(holds=margin >= C * (1.0 - SEPARATION_REL_TOL), margin=margin)


def _check_same_shape(estimate, truth):
    if estimate.k != truth.k:
        raise DimensionMismatchError("component count", truth.k, estimate.k)
    if estimate.d != truth.d:
        raise DimensionMismatchError("dimension", truth.d, estimate.d)


# cost[e, t] = ||mu_hat_e - mu*_t|| / sigma*_t
def matching_cost(estimate, truth):
    _check_same_shape(estimate, truth)
    diff = estimate.means[:, None, :] - truth.means[None, :, :]
    return np.linalg.norm(diff, axis=2) / truth.sigmas[None, :]


def match_with_permutation(estimate, truth, permutation):
    _check_same_shape(estimate, truth)
    permutation = np.asarray(permutation, dtype=np.int64)
    if sorted(permutation.tolist()) != list(range(truth.k)):
        raise InvalidSpecError("permutation", f"not a bijection on [0, {truth.k}): {permutation.tolist()}")
    # ordered[t] is the estimate component matched to true component t
    inverse = np.empty_like(permutation)
    inverse[permutation] = np.arange(truth.k)
    ordered = estimate.permuted(inverse)
    mean_err = np.linalg.norm(ordered.means - truth.means, axis=1) / truth.sigmas
    weight_err = np.abs(ordered.weights - truth.weights) / truth.weights
    var_err = math.sqrt(truth.d) * np.abs(ordered.variances - truth.variances) / truth.variances
    return MatchResult(permutation=_frozen(permutation), per_component_mean_err=_frozen(mean_err),
                       per_component_weight_err=_frozen(weight_err), per_component_var_err=_frozen(var_err))


def _optimal_cost(cost):
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


## Function
# exact minimum-cost assignment of estimate components to true components;
# ties are resolved by fixing true components in increasing index order to the lowest estimate index
# that still attains the optimal total cost
def match_components(estimate, truth):
    cost = matching_cost(estimate, truth)
    k = truth.k
    best = _optimal_cost(cost)
    tie_tol = 1e-12 * max(1.0, abs(best))
    estimate_for_truth = np.full(k, -1, dtype=np.int64)
    free_estimates = list(range(k))
    fixed_cost = 0.0
    for cur_truth in range(k):
        remaining_truths = list(range(cur_truth + 1, k))
        for cur_estimate in free_estimates:
            rest = [e for e in free_estimates if e != cur_estimate]
            rest_cost = _optimal_cost(cost[np.ix_(rest, remaining_truths)]) if rest else 0.0
            if fixed_cost + cost[cur_estimate, cur_truth] + rest_cost <= best + tie_tol:
                estimate_for_truth[cur_truth] = cur_estimate
                fixed_cost += cost[cur_estimate, cur_truth]
                free_estimates.remove(cur_estimate)
                break
    permutation = np.empty(k, dtype=np.int64)
    permutation[estimate_for_truth] = np.arange(k)
    return match_with_permutation(estimate, truth, permutation)


# brute-force reference over all k! assignments; only for small k
def brute_force_match(estimate, truth):
    cost = matching_cost(estimate, truth)
    best_permutation, best_cost = None, math.inf
    for estimate_for_truth in itertools.permutations(range(truth.k)):
        cur_cost = sum(cost[e, t] for t, e in enumerate(estimate_for_truth))
        if cur_cost < best_cost:
            best_cost = cur_cost
            best_permutation = estimate_for_truth
    permutation = np.empty(truth.k, dtype=np.int64)
    permutation[list(best_permutation)] = np.arange(truth.k)
    return match_with_permutation(estimate, truth, permutation)


def total_match_cost(estimate, truth, match):
    cost = matching_cost(estimate, truth)
    return float(sum(cost[e, t] for e, t in enumerate(match.permutation)))


# D_m = max_i max(||mu_i - mu_i*|| / sigma_i*, |pi_i - pi_i*| / pi_i*, sqrt(d) |sigma_i^2 - sigma_i*^2| / sigma_i*^2)
def d_m(estimate, truth, match=None):
    if match is None:
        match = match_components(estimate, truth)
    return float(max(match.per_component_mean_err.max(),
                     match.per_component_weight_err.max(),
                     match.per_component_var_err.max()))


# D_m between successive iterates, components aligned by index and scaled by the previous iterate
def parameter_change(new, old):
    return d_m(new, old, match_with_permutation(new, old, np.arange(old.k)))
