"""
Desk-scale experiments for EM on well-separated spherical mixtures.

Each experiment reads an ExperimentConfig (JSON, "schema": 1), runs every seed, and returns
per-seed rows plus a summary with the acceptance statistic and a pass/fail verdict:

  convergence       plain EM from a boundary-of-basin perturbation; contraction ratios and final D_m
  fixed_point       one EM step from the truth; median D_m at the largest n and its decay as n quadruples
  error_vs_n        sample-splitting EM; log-log slope of final D_m against n
  error_vs_d        sqrt(d) x relative variance error across dimensions
  separation_sweep  final D_m and contraction as the separation shrinks below the threshold
  kmeans_init       one-step k-means from displaced means, then EM from its output
  bad_events        empirical good-event failure rates against 5 exp(-beta)
"""

import os, sys, json, math, logging
from typing import Literal, Optional, Union
import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from Method.core_model import match_components, d_m
from Method.em_engine import EmConfig, fit
from Method.init_kmeans import one_step_kmeans, kmeans_bounds_hold
from Method.utils import ConfigError, ExperimentError, GmmError, map_parallel, format_float
from Preprocessing.synth import (SeededRng, make_separated_spec, rescale_to_beta, perturb_params,
                                 displace_means, sample_dataset)
from Analysis.diagnostics import contraction_estimate, fixed_point_residual, bad_event_rate, rate_slope

logger = logging.getLogger(__name__)

EXPERIMENTS = ("convergence", "error_vs_n", "error_vs_d", "separation_sweep", "kmeans_init", "bad_events", "fixed_point")
# (seed, stream_id) streams: one per random concern so they never overlap
INSTANCE_STREAM = 0
DATA_STREAM = 1
PERTURB_STREAM = 2
DISPLACE_STREAM = 3

GAMMA_LIMIT = 0.7
FINAL_D_M_LIMIT = 0.05
FIXED_POINT_MEDIAN_LIMIT = 0.02
# quadrupling n should halve the residual, within +-30%
HALVING_RANGE = (2.0 * 0.7, 2.0 * 1.3)
SLOPE_RANGE = (-0.65, -0.35)
VARIANCE_SCALING_SPREAD = 3.0
SEED_PASS_FRACTION = 0.9


class InstanceConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    k: int = Field(3, ge=1)
    d: int = Field(8, ge=1)
    margin_multiple: float = Field(1.0, gt=0)
    weight_profile: Union[str, list[float]] = "uniform"
    variance_profile: Union[str, list[float]] = "unit"
    seed: int = Field(42, ge=0, description="seed of the instance (means placement)")
    beta_target: Optional[float] = Field(None, gt=0, description="rescale means so the smallest pairwise beta equals this")

    def build(self, d=None, margin_multiple=None):
        spec = make_separated_spec(self.k, self.d if d is None else d,
                                   self.margin_multiple if margin_multiple is None else margin_multiple,
                                   self.weight_profile, self.variance_profile,
                                   SeededRng(self.seed, INSTANCE_STREAM))
        if self.beta_target is not None:
            spec = rescale_to_beta(spec, self.beta_target)
        return spec


class PerturbConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    mean_frac: float = Field(1.0, ge=0, le=1)
    weight_frac: float = Field(1.0, ge=0, le=1)
    var_frac: float = Field(1.0, ge=0, le=1)


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)
    schema_version: Literal[1] = Field(..., alias="schema")
    experiment: Literal["convergence", "error_vs_n", "error_vs_d", "separation_sweep", "kmeans_init", "bad_events", "fixed_point"]
    instance: InstanceConfig = Field(default_factory=InstanceConfig)
    n: Optional[int] = Field(None, ge=1)
    n_grid: Optional[list[int]] = None
    d_grid: Optional[list[int]] = None
    margin_grid: Optional[list[float]] = None
    seeds: list[int] = Field(..., min_length=1)
    em: EmConfig = Field(default_factory=EmConfig)
    perturb: PerturbConfig = Field(default_factory=PerturbConfig)
    # kmeans_init: displacement of each initial mean as a fraction of the smallest pairwise distance
    kmeans_displacement: float = Field(0.25, ge=0)
    output_dir: str = "./Results"

    @model_validator(mode="after")
    def _check_grids(self):
        for name in ("n_grid", "d_grid", "margin_grid"):
            grid = getattr(self, name)
            if grid is not None and (len(grid) == 0 or any(value <= 0 for value in grid)):
                raise ValueError(f"{name} must be nonempty and positive")
        if any(seed < 0 for seed in self.seeds):
            raise ValueError("seeds must be nonnegative")
        required = {"error_vs_n": "n_grid", "error_vs_d": "d_grid", "separation_sweep": "margin_grid"}
        if self.experiment in required and getattr(self, required[self.experiment]) is None:
            raise ValueError(f"experiment {self.experiment} needs {required[self.experiment]}")
        if self.experiment not in ("error_vs_n", "fixed_point") and self.n is None:
            raise ValueError(f"experiment {self.experiment} needs n")
        if self.experiment == "fixed_point" and self.n is None and self.n_grid is None:
            raise ValueError("experiment fixed_point needs n or n_grid")
        return self


def _validation_message(error):
    return "; ".join("{}: {}".format(".".join(str(part) for part in err["loc"]) or "<config>", err["msg"])
                     for err in error.errors())


def parse_experiment_config(text, source="<string>"):
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(source, e.msg, location=f"line {e.lineno}, column {e.colno}")
    if not isinstance(raw, dict):
        raise ConfigError(source, "top level must be a JSON object")
    name = raw.get("experiment")
    if name not in EXPERIMENTS:
        raise ConfigError(source, f"unknown experiment {name!r}; valid names: {', '.join(EXPERIMENTS)}", location="experiment")
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(source, _validation_message(e))


def load_experiment_config(path):
    with open(path, "r", encoding="utf-8") as f:
        return parse_experiment_config(f.read(), source=path)


def _run_seeds(config, fn):
    def guarded(seed):
        try:
            return fn(seed)
        except GmmError as e:
            raise ExperimentError(config.experiment, seed, e)
    results = map_parallel(guarded, config.seeds)
    logger.info("{}: finished {} seed(s)".format(config.experiment, len(config.seeds)))
    return results


def _perturbed_init(config, truth, seed):
    p = config.perturb
    return perturb_params(truth, p.mean_frac, p.weight_frac, p.var_frac, SeededRng(seed, PERTURB_STREAM))


def _fraction_passing(flags):
    flags = [bool(flag) for flag in flags]
    return sum(flags) / len(flags)


## Experiments
# each returns (rows: list of dicts in the experiment's column order, summary: dict)
def run_convergence(config):
    truth = config.instance.build()
    cfg = config.em.model_copy(update={"mode": "plain"})

    def one_seed(seed):
        data = sample_dataset(truth, config.n, SeededRng(seed, DATA_STREAM))
        trace = fit(_perturbed_init(config, truth, seed), data, cfg, truth=truth)
        contraction = contraction_estimate(trace)
        gammas = dict(contraction.ratios)
        rows = [{"seed": seed, "iter": entry.iteration, "D_m": entry.d_m, "loglik": entry.loglik,
                 "gamma": gammas.get(entry.iteration)} for entry in trace.entries]
        max_gamma = contraction.max_ratio
        passed = (max_gamma is None or max_gamma <= GAMMA_LIMIT) and trace.entries[-1].d_m <= FINAL_D_M_LIMIT
        return rows, {"seed": seed, "max_gamma": max_gamma, "final_D_m": trace.entries[-1].d_m, "passed": passed}

    results = _run_seeds(config, one_seed)
    per_seed = [summary for _, summary in results]
    fraction = _fraction_passing(s["passed"] for s in per_seed)
    summary = {
        "max_gamma": max((s["max_gamma"] for s in per_seed if s["max_gamma"] is not None), default=None),
        "median_final_D_m": float(np.median([s["final_D_m"] for s in per_seed])),
        "seeds_passing": sum(s["passed"] for s in per_seed),
        "pass_fraction": fraction,
        "passed": fraction >= SEED_PASS_FRACTION,
    }
    return [row for rows, _ in results for row in rows], summary


def run_fixed_point(config):
    truth = config.instance.build()
    grid = config.n_grid if config.n_grid is not None else [config.n, 4 * config.n]
    rows, medians = [], []
    for cur_n in grid:
        residual = fixed_point_residual(truth, cur_n, config.seeds, config.em)
        medians.append(residual.median)
        rows.extend({"seed": seed, "n": cur_n, "D_m": value} for seed, value in zip(residual.seeds, residual.values))
    halvings = [medians[t] / medians[t + 1] for t in range(len(medians) - 1)]
    in_range = all(HALVING_RANGE[0] <= ratio <= HALVING_RANGE[1] for ratio in halvings)
    slope = rate_slope(grid, medians) if len(grid) >= 2 else None
    summary = {
        "n_grid": list(grid),
        "median_D_m": medians,
        "max_D_m": [float(max(r["D_m"] for r in rows if r["n"] == cur_n)) for cur_n in grid],
        "halving_ratios": halvings,
        "slope": slope,
        "passed": medians[-1] <= FIXED_POINT_MEDIAN_LIMIT and in_range,
    }
    return rows, summary


def run_error_vs_n(config):
    truth = config.instance.build()
    cfg = config.em if config.em.mode == "sample_split" else config.em.model_copy(
        update={"mode": "sample_split", "batches": config.em.max_iters})

    def one_seed(seed):
        rows = []
        for cur_n in config.n_grid:
            data = sample_dataset(truth, cur_n, SeededRng(seed, DATA_STREAM))
            trace = fit(_perturbed_init(config, truth, seed), data, cfg, truth=truth)
            rows.append({"seed": seed, "n": cur_n, "final_D_m": trace.entries[-1].d_m, "iterations": trace.iterations})
        return rows

    rows = [row for rows in _run_seeds(config, one_seed) for row in rows]
    medians = [float(np.median([r["final_D_m"] for r in rows if r["n"] == cur_n])) for cur_n in config.n_grid]
    slope = rate_slope(config.n_grid, medians)
    summary = {"n_grid": list(config.n_grid), "median_final_D_m": medians, "slope": slope,
               "slope_range": list(SLOPE_RANGE), "passed": SLOPE_RANGE[0] <= slope <= SLOPE_RANGE[1]}
    return rows, summary


def run_error_vs_d(config):
    truths = {cur_d: config.instance.build(d=cur_d) for cur_d in config.d_grid}
    cfg = config.em.model_copy(update={"mode": "plain"})

    def one_seed(seed):
        rows = []
        for cur_d, truth in truths.items():
            data = sample_dataset(truth, config.n, SeededRng(seed, DATA_STREAM))
            trace = fit(_perturbed_init(config, truth, seed), data, cfg, truth=truth)
            final = trace.final
            match = match_components(final, truth)
            relative_var_err = float(match.per_component_var_err.max() / math.sqrt(cur_d))
            rows.append({"seed": seed, "d": cur_d, "rel_var_err": relative_var_err,
                         "scaled_var_err": math.sqrt(cur_d) * relative_var_err,
                         "final_D_m": d_m(final, truth, match)})
        return rows

    rows = [row for rows in _run_seeds(config, one_seed) for row in rows]
    scaled = [math.sqrt(cur_d) * float(np.median([r["rel_var_err"] for r in rows if r["d"] == cur_d]))
              for cur_d in config.d_grid]
    spread = max(scaled) / min(scaled) if min(scaled) > 0 else math.inf
    summary = {"d_grid": list(config.d_grid), "scaled_median_rel_var_err": scaled, "spread": spread,
               "passed": spread <= VARIANCE_SCALING_SPREAD}
    return rows, summary


def run_separation_sweep(config):
    truths = {multiple: config.instance.build(margin_multiple=multiple) for multiple in config.margin_grid}
    cfg = config.em.model_copy(update={"mode": "plain"})

    def one_seed(seed):
        rows = []
        for multiple, truth in truths.items():
            data = sample_dataset(truth, config.n, SeededRng(seed, DATA_STREAM))
            try:
                trace = fit(_perturbed_init(config, truth, seed), data, cfg, truth=truth)
            except GmmError as e:
                # below the threshold EM may collapse a component; record the failure and move on
                logger.info("separation_sweep: margin {} seed {} failed: {}".format(multiple, seed, e))
                rows.append({"seed": seed, "margin_multiple": multiple, "final_D_m": None, "max_gamma": None, "iterations": None})
                continue
            contraction = contraction_estimate(trace)
            rows.append({"seed": seed, "margin_multiple": multiple, "final_D_m": trace.entries[-1].d_m,
                         "max_gamma": contraction.max_ratio, "iterations": trace.iterations})
        return rows

    rows = [row for rows in _run_seeds(config, one_seed) for row in rows]
    medians = []
    for multiple in config.margin_grid:
        values = [r["final_D_m"] for r in rows if r["margin_multiple"] == multiple and r["final_D_m"] is not None]
        medians.append(float(np.median(values)) if values else None)
    summary = {"margin_grid": list(config.margin_grid), "median_final_D_m": medians,
               "failed_runs": sum(r["final_D_m"] is None for r in rows), "passed": None}
    return rows, summary


def run_kmeans_init(config):
    truth = config.instance.build()

    def one_seed(seed):
        data = sample_dataset(truth, config.n, SeededRng(seed, DATA_STREAM))
        init_means = displace_means(truth, config.kmeans_displacement, SeededRng(seed, DISPLACE_STREAM))
        estimate = one_step_kmeans(data, init_means)
        holds = kmeans_bounds_hold(estimate, truth)
        trace = fit(estimate, data, config.em, truth=truth)
        final_d_m = trace.entries[-1].d_m
        rows = []
        for cur_component in range(truth.k):
            rows.append({
                "seed": seed, "component": cur_component,
                "mean_err": float(np.linalg.norm(estimate.means[cur_component] - truth.means[cur_component]) / truth.sigmas[cur_component]),
                "weight_err": float(abs(estimate.weights[cur_component] - truth.weights[cur_component]) / truth.weights[cur_component]),
                "var_err": float(abs(estimate.variances[cur_component] - truth.variances[cur_component]) / truth.variances[cur_component]),
                "bounds_hold": bool(holds[cur_component]),
                "final_D_m": final_d_m})
        return rows, bool(np.all(holds)), final_d_m

    results = _run_seeds(config, one_seed)
    fraction = _fraction_passing(all_hold for _, all_hold, _ in results)
    summary = {"seeds_passing": sum(all_hold for _, all_hold, _ in results), "pass_fraction": fraction,
               "median_final_D_m_after_em": float(np.median([final for _, _, final in results])),
               "passed": fraction >= SEED_PASS_FRACTION}
    return [row for rows, _, _ in results for row in rows], summary


def run_bad_events(config):
    truth = config.instance.build()

    def one_seed(seed):
        data = sample_dataset(truth, config.n, SeededRng(seed, DATA_STREAM))
        rows = []
        for target_i in range(truth.k):
            for source_j, report in sorted(bad_event_rate(data, truth, truth, target_i).items()):
                if report is None:
                    continue
                rows.append({"seed": seed, "source_j": source_j, "target_i": target_i, "beta": report.beta,
                             "n_j": report.n_samples, "bad_rate": report.empirical_bad_rate,
                             "bound": report.theoretical_bound, "slack": report.slack, "passes": report.passes})
        return rows

    rows = [row for rows in _run_seeds(config, one_seed) for row in rows]
    summary = {"pairs_checked": len(rows), "pairs_failing": sum(not r["passes"] for r in rows),
               "min_beta": min((r["beta"] for r in rows), default=None),
               "passed": all(r["passes"] for r in rows)}
    return rows, summary


RUNNERS = {
    "convergence": run_convergence,
    "fixed_point": run_fixed_point,
    "error_vs_n": run_error_vs_n,
    "error_vs_d": run_error_vs_d,
    "separation_sweep": run_separation_sweep,
    "kmeans_init": run_kmeans_init,
    "bad_events": run_bad_events,
}

RESULT_COLUMNS = {
    "convergence": ["seed", "iter", "D_m", "loglik", "gamma"],
    "fixed_point": ["seed", "n", "D_m"],
    "error_vs_n": ["seed", "n", "final_D_m", "iterations"],
    "error_vs_d": ["seed", "d", "rel_var_err", "scaled_var_err", "final_D_m"],
    "separation_sweep": ["seed", "margin_multiple", "final_D_m", "max_gamma", "iterations"],
    "kmeans_init": ["seed", "component", "mean_err", "weight_err", "var_err", "bounds_hold", "final_D_m"],
    "bad_events": ["seed", "source_j", "target_i", "beta", "n_j", "bad_rate", "bound", "slack", "passes"],
}
# rows are sorted by these columns before writing
SORT_KEYS = {
    "convergence": ["seed", "iter"],
    "fixed_point": ["seed", "n"],
    "error_vs_n": ["seed", "n"],
    "error_vs_d": ["seed", "d"],
    "separation_sweep": ["seed", "margin_multiple"],
    "kmeans_init": ["seed", "component"],
    "bad_events": ["seed", "target_i", "source_j"],
}


def _cell(value):
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format_float(float(value))


def results_frame(experiment, rows):
    columns = RESULT_COLUMNS[experiment]
    ordered = sorted(rows, key=lambda row: tuple(row[key] for key in SORT_KEYS[experiment]))
    return pd.DataFrame([[_cell(row[column]) for column in columns] for row in ordered], columns=columns)


def _json_ready(value):
    if isinstance(value, dict):
        return {key: _json_ready(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_ready(item) for item in value]
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return float(value) if math.isfinite(value) else None
    return value


## Output
# (results_csv_path, summary_json_path, summary)
def run_experiment(config, output_dir=None):
    output_dir = output_dir if output_dir is not None else config.output_dir
    os.makedirs(output_dir, exist_ok=True)
    logger.info("experiment {}: {} seed(s)".format(config.experiment, len(config.seeds)))
    rows, summary = RUNNERS[config.experiment](config)
    summary = {"schema": 1, "experiment": config.experiment, "seeds": list(config.seeds), **summary}
    results_path = os.path.join(output_dir, f"{config.experiment}_results.csv")
    summary_path = os.path.join(output_dir, f"{config.experiment}_summary.json")
    results_frame(config.experiment, rows).to_csv(results_path, index=False, lineterminator="\n")
    with open(summary_path, "w", encoding="utf-8") as f:
        json.dump(_json_ready(summary), f, indent=2)
        f.write("\n")
    logger.info("experiment {}: passed = {}; results in {}".format(config.experiment, summary["passed"], results_path))
    return results_path, summary_path, summary
