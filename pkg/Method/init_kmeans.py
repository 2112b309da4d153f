"""
One-step k-means with a chi-square quantile variance estimator.

Given good initial means, samples are assigned to their nearest mean (ties to the lowest
index); each cluster gives a weight |C_i|/n and a mean. The variance of cluster i is read
off the squared distances between ADJACENT members in storage order: each such distance
divided by 2 sigma_i^2 is chi-square with d degrees of freedom, so the value at rank
ceil(alpha_d m) among the m - 1 sorted distances, divided by 2d, estimates sigma_i^2 with
alpha_d = F_d(d). Taking a quantile rather than a mean keeps the estimate within
0.5 sigma_i^2 / sqrt(d) when a few percent of the cluster belongs to other components.

The incomplete gamma function follows the usual series / continued-fraction split
(series for x < a + 1, modified Lentz continued fraction otherwise).
"""

import os, sys, math
from dataclasses import dataclass
from functools import lru_cache
import numpy as np
from scipy.special import gammaln
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from Method.core_model import GmmSpec
from Method.utils import (DimensionMismatchError, EmptyComponentError, ClusterTooSmallError,
                          ConvergenceError, InvalidSpecError, map_row_chunks)

GAMMA_ACCURACY = 1e-15
GAMMA_MAX_ITERATIONS = 100000
_TINY = sys.float_info.min / sys.float_info.epsilon


@dataclass(frozen=True, eq=False)
class ClusterAssignment:
    cluster_of: np.ndarray
    # clusters[i]: sample indices of C_i in dataset order
    clusters: tuple

    @property
    def sizes(self):
        return np.array([len(members) for members in self.clusters], dtype=np.int64)


def _as_means(means, d):
    means = np.asarray(means, dtype=np.float64)
    if means.ndim == 1:
        means = means.reshape(1, -1)
    if means.shape[1] != d:
        raise DimensionMismatchError("mean dimension", d, means.shape[1])
    if means.shape[0] < 1:
        raise InvalidSpecError("means", "need at least one mean")
    return means


def _nearest_chunk(means, samples):
    sq_dist = np.empty((len(samples), len(means)))
    for cur_component in range(len(means)):
        diff = samples - means[cur_component]
        sq_dist[:, cur_component] = np.einsum("ij,ij->i", diff, diff)
    # argmin returns the first minimum: exact ties go to the lowest index
    return np.argmin(sq_dist, axis=1)


def assign_clusters(data, means):
    means = _as_means(means, data.d)
    cluster_of = map_row_chunks(lambda rows: _nearest_chunk(means, rows), data.samples).astype(np.int64)
    clusters = tuple(np.flatnonzero(cluster_of == i) for i in range(len(means)))
    assert sum(len(members) for members in clusters) == data.n
    cluster_of.setflags(write=False)
    return ClusterAssignment(cluster_of=cluster_of, clusters=clusters)


## Special functions
def _lower_gamma_series(a, x, gln):
    ap = a
    term = 1.0 / a
    total = term
    for _ in range(GAMMA_MAX_ITERATIONS):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * GAMMA_ACCURACY:
            return total * math.exp(-x + a * math.log(x) - gln)
    raise ConvergenceError(f"incomplete gamma series (a={a}, x={x})")


# Q(a, x) = 1 - P(a, x)
def _upper_gamma_continued_fraction(a, x, gln):
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, GAMMA_MAX_ITERATIONS + 1):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < GAMMA_ACCURACY:
            return math.exp(-x + a * math.log(x) - gln) * h
    raise ConvergenceError(f"incomplete gamma continued fraction (a={a}, x={x})")


def regularized_lower_gamma(a, x):
    if not (a > 0 and math.isfinite(a)):
        raise InvalidSpecError("a", f"must be positive and finite, got {a}")
    if math.isnan(x) or x < 0:
        raise InvalidSpecError("x", f"must be nonnegative, got {x}")
    if x == 0:
        return 0.0
    if math.isinf(x):
        return 1.0
    gln = float(gammaln(a))
    if x < a + 1.0:
        return min(1.0, _lower_gamma_series(a, x, gln))
    return max(0.0, 1.0 - _upper_gamma_continued_fraction(a, x, gln))


def chi_square_cdf(dof, x):
    if not math.isfinite(dof) or int(dof) != dof or dof < 1:
        raise InvalidSpecError("dof", f"must be a positive integer, got {dof}")
    if math.isnan(x) or x < 0:
        raise InvalidSpecError("x", f"chi-square cdf is defined for x >= 0, got {x}")
    return regularized_lower_gamma(dof / 2.0, x / 2.0)


@lru_cache(maxsize=None)
def alpha_d(d):
    return chi_square_cdf(d, float(d))


# (F(d - sqrt(d)/2), alpha_d, F(d + sqrt(d)/2)); the estimator tolerates 2% corruption when both gaps are >= 0.1
def quantile_margin(d):
    half_width = math.sqrt(d) / 2.0
    return chi_square_cdf(d, max(0.0, d - half_width)), alpha_d(d), chi_square_cdf(d, d + half_width)


## Input
# cluster_samples: (m, d) array of cluster members in storage order
## Output
# value at rank clamp(ceil(alpha_d m), 1, m - 1) among the sorted adjacent squared distances, divided by 2d
def estimate_variance_quantile(cluster_samples, d=None, component=None):
    cluster_samples = np.asarray(cluster_samples, dtype=np.float64)
    if cluster_samples.ndim == 1:
        cluster_samples = cluster_samples.reshape(-1, 1)
    d = cluster_samples.shape[1] if d is None else int(d)
    if cluster_samples.shape[1] != d:
        raise DimensionMismatchError("sample dimension", d, cluster_samples.shape[1])
    m = len(cluster_samples)
    if m < 2:
        raise ClusterTooSmallError(component, m)
    steps = np.diff(cluster_samples, axis=0)
    adjacent = np.sort(np.einsum("ij,ij->i", steps, steps))
    rank = min(max(math.ceil(alpha_d(d) * m), 1), m - 1)
    return float(adjacent[rank - 1] / (2.0 * d))


def one_step_kmeans(data, init_means):
    means = _as_means(init_means, data.d)
    assignment = assign_clusters(data, means)
    weights, cluster_means, variances = [], [], []
    for cur_component, members in enumerate(assignment.clusters):
        if len(members) == 0:
            raise EmptyComponentError(cur_component, context="cluster has no members")
        if len(members) < 2:
            raise ClusterTooSmallError(cur_component, len(members))
        cluster_samples = data.samples[members]
        weights.append(len(members) / data.n)
        cluster_means.append(cluster_samples.mean(axis=0))
        variances.append(estimate_variance_quantile(cluster_samples, data.d, component=cur_component))
    # counts over n
    return GmmSpec(weights=np.asarray(weights), means=np.asarray(cluster_means), variances=variances)


# the three initialization bounds: ||mu_i - mu_i*|| / sigma_i* <= 4, |pi_i - pi_i*| / pi_i* <= 0.5,
# |sigma_i^2 - sigma_i*^2| / sigma_i*^2 <= 0.5 / sqrt(d); estimate and truth aligned by index
def kmeans_bounds_hold(estimate, truth):
    mean_ok = np.linalg.norm(estimate.means - truth.means, axis=1) / truth.sigmas <= 4.0
    weight_ok = np.abs(estimate.weights - truth.weights) / truth.weights <= 0.5
    var_ok = np.abs(estimate.variances - truth.variances) / truth.variances <= 0.5 / math.sqrt(truth.d)
    return mean_ok & weight_ok & var_ok
