"""
Seeded synthetic mixtures and datasets.

Instances are placed so that the separation condition holds at a requested multiple of
the C = 64 threshold; datasets are drawn with component labels kept for diagnostics;
initializations are perturbed truths that sit inside (or on the boundary of) the
local convergence basin of EM.

Randomness: every generator is a numpy PCG64 stream seeded with
SeedSequence(seed, spawn_key=(stream_id,)), so (seed, stream_id) pins the stream.
Gaussian draws use Generator.standard_normal.
"""

import os, sys, re, math, logging
from dataclasses import dataclass
import numpy as np
import pandas as pd
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from Method.core_model import GmmSpec, Dataset, derived_stats, check_separation
from Method.utils import InvalidSpecError, DataFormatError, GmmError

logger = logging.getLogger(__name__)

SEPARATION_C = 64.0
MAX_PERTURB_ATTEMPTS = 100
_GEOMETRIC_PATTERN = re.compile(r'^geometric\(\s*([^)]+?)\s*\)$')


@dataclass(frozen=True)
class SeededRng:
    seed: int
    stream_id: int = 0

    def __post_init__(self):
        for name in ("seed", "stream_id"):
            value = getattr(self, name)
            if not (0 <= int(value) < 2**64):
                raise InvalidSpecError(name, f"must be a 64-bit unsigned integer, got {value}")

    def generator(self):
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream_id),))))

    def substream(self, stream_id):
        return SeededRng(self.seed, stream_id)


def as_generator(rng):
    if isinstance(rng, SeededRng):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected SeededRng or numpy Generator, got {type(rng).__name__}")


## Profiles
# profile: "uniform" | "unit" | "geometric(r)" | explicit list of positive numbers
def _profile_values(profile, k, kind):
    if isinstance(profile, (list, tuple, np.ndarray)):
        values = np.asarray(profile, dtype=np.float64).reshape(-1)
        if len(values) != k:
            raise InvalidSpecError(f"{kind}_profile", f"expected {k} entries, got {len(values)}")
    elif isinstance(profile, str):
        name = profile.strip().lower()
        match = _GEOMETRIC_PATTERN.match(name)
        if (kind == "weight" and name == "uniform") or (kind == "variance" and name == "unit"):
            values = np.ones(k)
        elif match:
            try:
                ratio = float(match.group(1))
            except ValueError:
                raise InvalidSpecError(f"{kind}_profile", f"cannot parse ratio in {profile!r}")
            if not (ratio > 0 and math.isfinite(ratio)):
                raise InvalidSpecError(f"{kind}_profile", f"ratio must be positive, got {ratio}")
            values = ratio ** np.arange(k, dtype=np.float64)
        else:
            valid = "uniform" if kind == "weight" else "unit"
            raise InvalidSpecError(f"{kind}_profile", f"unknown profile {profile!r}; expected '{valid}', 'geometric(r)' or a list")
    else:
        raise InvalidSpecError(f"{kind}_profile", f"unsupported profile {profile!r}")
    if not np.all(np.isfinite(values)) or np.any(values <= 0):
        raise InvalidSpecError(f"{kind}_profile", f"entries must be positive and finite, got {values.tolist()}")
    return values


def weights_from_profile(profile, k):
    values = _profile_values(profile, k, "weight")
    return values / values.sum()


def variances_from_profile(profile, k):
    return _profile_values(profile, k, "variance")


def _unit_directions(generator, count, d):
    directions = generator.standard_normal((count, d))
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    # a zero draw has probability zero; redraw just in case
    while np.any(norms == 0):
        bad = norms[:, 0] == 0
        directions[bad] = generator.standard_normal((int(bad.sum()), d))
        norms = np.linalg.norm(directions, axis=1, keepdims=True)
    return directions / norms


## Operations
def sample_dataset(spec, n, rng):
    assert int(n) >= 1, f"n must be positive, got {n}"
    generator = as_generator(rng)
    labels = generator.choice(spec.k, size=int(n), p=spec.weights)
    noise = generator.standard_normal((int(n), spec.d))
    samples = spec.means[labels] + spec.sigmas[labels][:, None] * noise
    return Dataset(samples=samples, labels=labels, k=spec.k)


## Output
# spec whose minimum pairwise margin is margin_multiple * C (times 1 + 1e-9), with weights/variances from the profiles
def make_separated_spec(k, d, margin_multiple=1.0, weight_profile="uniform", variance_profile="unit", rng=None, C=SEPARATION_C):
    if int(k) < 1:
        raise InvalidSpecError("k", f"must be at least 1, got {k}")
    if int(d) < 1:
        raise InvalidSpecError("d", f"must be at least 1, got {d}")
    if not margin_multiple > 0:
        raise InvalidSpecError("margin_multiple", f"must be positive, got {margin_multiple}")
    k, d = int(k), int(d)
    generator = as_generator(rng if rng is not None else SeededRng(0))
    weights = weights_from_profile(weight_profile, k)
    variances = variances_from_profile(variance_profile, k)
    if k == 1:
        return GmmSpec(weights, np.zeros((1, d)), variances)
    target = margin_multiple * C * (1.0 + 1e-9)
    for _ in range(MAX_PERTURB_ATTEMPTS):
        positions = generator.standard_normal((k, d))
        draft = GmmSpec(weights, positions, variances)
        margin = check_separation(draft).margin
        if margin > 0:
            break
    else:
        raise GmmError(f"could not place {k} distinct means in dimension {d}")
    spec = GmmSpec(weights, positions * (target / margin), variances)
    achieved = check_separation(spec, C=margin_multiple * C)
    assert achieved.holds, f"generated margin {achieved.margin} below {margin_multiple * C}"
    return spec


## Output
# spec with the same weights/variances whose smallest pairwise beta = R^2 / (64 (sigma_i v sigma_j)^2) equals beta_target
def rescale_to_beta(spec, beta_target):
    if spec.k < 2:
        raise InvalidSpecError("k", "rescaling to a target beta needs at least two components")
    if not beta_target > 0:
        raise InvalidSpecError("beta_target", f"must be positive, got {beta_target}")
    stats = derived_stats(spec)
    sigma_max = np.maximum.outer(spec.sigmas, spec.sigmas)
    betas = stats.pairwise_distances ** 2 / (64.0 * sigma_max ** 2)
    min_beta = float(np.min(betas[~np.eye(spec.k, dtype=bool)]))
    center = spec.means.mean(axis=0)
    scaled = center + (spec.means - center) * math.sqrt(beta_target / min_beta)
    return GmmSpec(spec.weights, scaled, spec.variances)


# (sigma_i / 16) * min_{j != i} ||mu_i - mu_j|| / (sigma_i v sigma_j); zero when k = 1
def mean_init_radius(truth):
    if truth.k == 1:
        return np.zeros(1)
    stats = derived_stats(truth)
    sigmas = truth.sigmas
    ratios = stats.pairwise_distances / np.maximum.outer(sigmas, sigmas)
    np.fill_diagonal(ratios, np.inf)
    return sigmas / 16.0 * ratios.min(axis=1)


def satisfies_init_conditions(init, truth):
    mean_ok = np.all(np.linalg.norm(init.means - truth.means, axis=1) <= mean_init_radius(truth) * (1.0 + 1e-12))
    weight_ok = np.all(np.abs(init.weights - truth.weights) <= truth.weights / 2.0)
    var_ok = np.all(np.abs(init.variances - truth.variances) <= 0.5 * truth.variances / math.sqrt(truth.d) * (1.0 + 1e-12))
    return bool(mean_ok and weight_ok and var_ok)


def perturb_params(truth, mean_frac=1.0, weight_frac=1.0, var_frac=1.0, rng=None):
    for name, value in (("mean_frac", mean_frac), ("weight_frac", weight_frac), ("var_frac", var_frac)):
        if not 0.0 <= value <= 1.0:
            raise InvalidSpecError(name, f"must lie in [0, 1], got {value}")
    generator = as_generator(rng if rng is not None else SeededRng(0))
    if mean_frac == 0 and weight_frac == 0 and var_frac == 0:
        return truth
    k, d = truth.k, truth.d
    radius = mean_frac * mean_init_radius(truth)
    for cur_attempt in range(MAX_PERTURB_ATTEMPTS):
        means = truth.means + radius[:, None] * _unit_directions(generator, k, d)
        weight_signs = generator.choice([-1.0, 1.0], size=k)
        var_signs = generator.choice([-1.0, 1.0], size=k)
        weights = truth.weights * (1.0 + weight_signs * weight_frac * 0.5)
        weights = weights / weights.sum()
        variances = truth.variances * (1.0 + var_signs * var_frac * 0.5 / math.sqrt(d))
        candidate = GmmSpec(weights, means, variances)
        if satisfies_init_conditions(candidate, truth):
            return candidate
        logger.debug("perturb_params: attempt {} broke the weight condition after renormalization; resampling".format(cur_attempt))
    raise GmmError(f"perturb_params could not satisfy the initialization conditions in {MAX_PERTURB_ATTEMPTS} attempts")


# each mean moved by exactly fraction * (smallest pairwise distance) in a uniform random direction;
# the premise of the one-step k-means initializer
def displace_means(truth, fraction_of_min_distance=0.25, rng=None):
    generator = as_generator(rng if rng is not None else SeededRng(0))
    if truth.k == 1:
        return truth.means.copy()
    stats = derived_stats(truth)
    min_distance = float(np.min(stats.pairwise_distances[~np.eye(truth.k, dtype=bool)]))
    return truth.means + fraction_of_min_distance * min_distance * _unit_directions(generator, truth.k, truth.d)


## Dataset CSV: header "x0,...,x{d-1}[,label]", one row per sample
def dataset_columns(d, with_labels):
    return [f"x{c}" for c in range(d)] + (["label"] if with_labels else [])


def save_dataset(dataset, path):
    folder = os.path.dirname(path)
    if folder:
        os.makedirs(folder, exist_ok=True)
    frame = pd.DataFrame(dataset.samples, columns=dataset_columns(dataset.d, False))
    if dataset.has_labels:
        frame["label"] = dataset.labels
    # float repr round-trips; '\n' line endings keep the files byte-stable across platforms
    frame.to_csv(path, index=False, float_format=None, lineterminator="\n")


def load_dataset(path, k=None):
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.ParserError as e:
        raise DataFormatError(path, f"malformed CSV: {e}")
    except pd.errors.EmptyDataError:
        raise DataFormatError(path, "empty file", line=1)
    columns = list(frame.columns)
    with_labels = len(columns) > 0 and columns[-1] == "label"
    d = len(columns) - (1 if with_labels else 0)
    if d < 1 or columns != dataset_columns(d, with_labels):
        raise DataFormatError(path, f"unexpected header {','.join(columns)}; expected x0,...,x{{d-1}}[,label]", line=1)
    if len(frame) == 0:
        raise DataFormatError(path, "no sample rows", line=2)
    values = frame.apply(pd.to_numeric, errors="coerce")
    bad_rows = np.flatnonzero(values.isna().any(axis=1).to_numpy())
    if len(bad_rows):
        # +2: header line and 1-based numbering
        raise DataFormatError(path, "non-numeric value", line=int(bad_rows[0]) + 2)
    samples = values[dataset_columns(d, False)].to_numpy(dtype=np.float64)
    labels = None
    if with_labels:
        raw_labels = values["label"].to_numpy()
        if np.any(raw_labels != np.round(raw_labels)):
            bad = int(np.flatnonzero(raw_labels != np.round(raw_labels))[0])
            raise DataFormatError(path, "label is not an integer", line=bad + 2)
        labels = raw_labels.astype(np.int64)
    try:
        return Dataset(samples=samples, labels=labels, k=k)
    except GmmError as e:
        raise DataFormatError(path, str(e))
