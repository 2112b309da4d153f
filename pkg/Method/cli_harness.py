import os, sys, argparse, json, builtins
from typing import Optional, Union
from pydantic import BaseModel, ConfigDict, Field, ValidationError
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from Method.core_model import save_spec, load_spec
from Method.em_engine import EmConfig, fit, save_trace
from Method.init_kmeans import one_step_kmeans
from Method.logging_utils import setup_logger
from Method.utils import GmmError, ConfigError, DimensionMismatchError
from Preprocessing.synth import SeededRng, make_separated_spec, rescale_to_beta, sample_dataset, save_dataset, load_dataset
from Analysis.diagnostics import bad_event_rate, fixed_point_residual
from Analysis.experiments import load_experiment_config, run_experiment

# exit codes
EXIT_OK = 0
EXIT_ERROR = 1
# fit: max_iters ran out before the tolerance was reached; experiment: acceptance check failed
EXIT_NOT_CONVERGED = 2

# (seed, stream_id) streams of the generate command
GENERATE_INSTANCE_STREAM = 0
GENERATE_DATA_STREAM = 1


def _profile(value):
    # "0.5,0.3,0.2" -> explicit list; anything else is a named profile
    if value is None or "," not in value:
        return value
    try:
        return [float(item) for item in value.split(",")]
    except ValueError:
        raise ConfigError("command line", f"profile list must hold numbers, got {value!r}")


class GenerateConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    k: int = Field(..., ge=1)
    d: int = Field(..., ge=1)
    n: int = Field(..., ge=1)
    seed: int = Field(0, ge=0)
    margin_multiple: float = Field(1.0, gt=0)
    weight_profile: Union[str, list[float]] = "uniform"
    variance_profile: Union[str, list[float]] = "unit"
    beta_target: Optional[float] = Field(None, gt=0)


def _em_config(args):
    mode = {"plain": "plain", "split": "sample_split", None: None}[args.mode]
    return EmConfig.build(source="command line", max_iters=args.max_iters, tol=args.tol, mode=mode, batches=args.batches)


def _output_path(out, name):
    os.makedirs(out, exist_ok=True)
    return os.path.join(out, name)


class GenerateCommand(object):
    # writes <out>/spec.json and <out>/data.csv
    def __init__(self, args):
        try:
            self.config = GenerateConfig(k=args.k, d=args.d, n=args.n, seed=args.seed,
                                         margin_multiple=args.margin_multiple,
                                         weight_profile=_profile(args.weight_profile),
                                         variance_profile=_profile(args.variance_profile),
                                         beta_target=args.beta_target)
        except ValidationError as e:
            raise ConfigError("command line", "; ".join(
                "--{}: {}".format(".".join(str(part) for part in err["loc"]).replace("_", "-"), err["msg"]) for err in e.errors()))
        self.out = args.out

    def run(self):
        cfg = self.config
        spec = make_separated_spec(cfg.k, cfg.d, cfg.margin_multiple, cfg.weight_profile, cfg.variance_profile,
                                   SeededRng(cfg.seed, GENERATE_INSTANCE_STREAM))
        if cfg.beta_target is not None:
            spec = rescale_to_beta(spec, cfg.beta_target)
        data = sample_dataset(spec, cfg.n, SeededRng(cfg.seed, GENERATE_DATA_STREAM))
        save_spec(spec, _output_path(self.out, "spec.json"))
        save_dataset(data, _output_path(self.out, "data.csv"))
        print("generate: k {}; d {}; n {}; seed {} -> {}".format(cfg.k, cfg.d, cfg.n, cfg.seed, self.out))
        return EXIT_OK


class FitCommand(object):
    # writes <out>/trace.csv and <out>/final_spec.json
    def __init__(self, args):
        assert args.init is not None, "fit needs --init"
        assert args.data is not None, "fit needs --data"
        self.args = args
        self.cfg = _em_config(args)

    def run(self):
        init = load_spec(self.args.init)
        data = load_dataset(self.args.data, k=init.k)
        truth = load_spec(self.args.truth) if self.args.truth else None
        if init.d != data.d:
            raise DimensionMismatchError(f"dimension of {self.args.data} against {self.args.init}", init.d, data.d)
        trace = fit(init, data, self.cfg, truth=truth)
        save_trace(trace, _output_path(self.args.out, "trace.csv"))
        save_spec(trace.final, _output_path(self.args.out, "final_spec.json"))
        if trace.entries[-1].d_m is not None:
            print("fit: final D_m {:.6e}".format(trace.entries[-1].d_m))
        if not trace.converged:
            print("fit: max_iters ({}) reached before tol ({})".format(self.cfg.max_iters, self.cfg.tol))
            return EXIT_NOT_CONVERGED
        print("fit: converged after {} iteration(s)".format(trace.iterations))
        return EXIT_OK


class InitKmeansCommand(object):
    # initial means come from --init; writes <out>/kmeans_spec.json
    def __init__(self, args):
        assert args.init is not None, "init-kmeans needs --init"
        assert args.data is not None, "init-kmeans needs --data"
        self.args = args

    def run(self):
        init = load_spec(self.args.init)
        data = load_dataset(self.args.data)
        estimate = one_step_kmeans(data, init.means)
        save_spec(estimate, _output_path(self.args.out, "kmeans_spec.json"))
        print("init-kmeans: {} clusters from {} samples".format(estimate.k, data.n))
        return EXIT_OK


class DiagnoseCommand(object):
    # writes <out>/bad_events.json; with --fixed-point-n also <out>/fixed_point.json
    def __init__(self, args):
        assert args.truth is not None, "diagnose needs --truth"
        assert args.data is not None, "diagnose needs --data"
        self.args = args

    def run(self):
        truth = load_spec(self.args.truth)
        data = load_dataset(self.args.data, k=truth.k)
        estimate = load_spec(self.args.spec) if self.args.spec else truth
        reports = []
        for target_i in range(truth.k):
            for source_j, report in sorted(bad_event_rate(data, estimate, truth, target_i).items()):
                if report is None:
                    reports.append({"source_j": source_j, "target_i": target_i, "n_samples": 0})
                else:
                    reports.append(report.to_json_dict(include_flags=self.args.include_flags))
        with open(_output_path(self.args.out, "bad_events.json"), "w", encoding="utf-8") as f:
            json.dump({"schema": 1, "reports": reports}, f, indent=2)
            f.write("\n")
        failing = sum(1 for report in reports if report.get("passes") is False)
        print("diagnose: {} (source, target) pair(s); {} above the bad-event bound".format(len(reports), failing))
        if self.args.fixed_point_n is not None:
            seeds = list(range(self.args.seed, self.args.seed + self.args.fixed_point_seeds))
            summary = fixed_point_residual(truth, self.args.fixed_point_n, seeds, _em_config(self.args))
            with open(_output_path(self.args.out, "fixed_point.json"), "w", encoding="utf-8") as f:
                json.dump({"schema": 1, "n": summary.n, "seeds": summary.seeds, "values": summary.values,
                           "median": summary.median, "max": summary.max}, f, indent=2)
                f.write("\n")
            print("diagnose: fixed-point residual median {:.4e}; max {:.4e}".format(summary.median, summary.max))
        return EXIT_OK


class ExperimentCommand(object):
    def __init__(self, args):
        assert args.config is not None, "experiment needs --config"
        self.config = load_experiment_config(args.config)
        self.out = args.out

    def run(self):
        _, summary_path, summary = run_experiment(self.config, self.out)
        print("experiment {}: passed = {} ({})".format(self.config.experiment, summary["passed"], summary_path))
        return EXIT_NOT_CONVERGED if summary["passed"] is False else EXIT_OK


COMMANDS = {
    "generate": GenerateCommand,
    "fit": FitCommand,
    "init-kmeans": InitKmeansCommand,
    "diagnose": DiagnoseCommand,
    "experiment": ExperimentCommand,
}


def build_parser():
    parser = argparse.ArgumentParser(description='EM for well-separated spherical Gaussian mixtures')
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub = subparsers.add_parser(name)
        sub.add_argument("--out", type=str, default=None, help="output directory; defaults to ./Results/<command> (experiment: output_dir of the config)")
        sub.add_argument("--seed", type=int, default=0, help="base seed")
        if name in ("fit", "init-kmeans", "diagnose"):
            sub.add_argument("--data", type=str, default=None, help="dataset CSV with header x0,...,x{d-1}[,label]")
            sub.add_argument("--init", type=str, default=None, help="initial parameters (spec JSON)")
            sub.add_argument("--truth", type=str, default=None, help="true parameters (spec JSON); fit reports D_m against it")
            sub.add_argument("--spec", type=str, default=None, help="diagnose: estimate to judge (spec JSON); defaults to --truth")
        if name in ("fit", "diagnose"):
            sub.add_argument("--mode", type=str, choices=["plain", "split"], default=None, help="plain EM or sample-splitting EM")
            sub.add_argument("--batches", type=int, default=None, help="split mode: number of batches (must equal --max-iters)")
            sub.add_argument("--max-iters", type=int, default=None, help="defaults to ceil(log2(1/tol)) + 5")
            sub.add_argument("--tol", type=float, default=None, help="stopping tolerance on the successive parameter change (default 1e-6)")
        if name == "diagnose":
            sub.add_argument("--include-flags", action="store_true", help="keep per-sample (E1, E2, E3) flags in bad_events.json")
            sub.add_argument("--fixed-point-n", type=int, default=None, help="also measure the fixed-point residual at this n")
            sub.add_argument("--fixed-point-seeds", type=int, default=20, help="number of seeds for the fixed-point residual")
        if name == "generate":
            sub.add_argument("--k", type=int, required=True)
            sub.add_argument("--d", type=int, required=True)
            sub.add_argument("--n", type=int, required=True)
            sub.add_argument("--margin-multiple", type=float, default=1.0, help="minimum separation margin as a multiple of C = 64")
            sub.add_argument("--weight-profile", type=str, default="uniform", help="uniform | geometric(r) | comma-separated weights")
            sub.add_argument("--variance-profile", type=str, default="unit", help="unit | geometric(r) | comma-separated variances")
            sub.add_argument("--beta-target", type=float, default=None, help="rescale means so the smallest pairwise beta equals this")
        if name == "experiment":
            sub.add_argument("--config", type=str, default=None, help="experiment config JSON (\"schema\": 1)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    # experiment falls back to the output_dir of its config
    if args.out is None and args.command != "experiment":
        args.out = os.path.join("./Results", args.command)

    ## Setup logger
    logger = setup_logger(args.out or args.command)
    # Redirect print to logger
    def custom_print(*args, **kwargs):
        message = " ".join(map(str, args))
        logger.info(message)
    original_print = builtins.print
    builtins.print = custom_print
    try:
        print("args: ", args)
        try:
            return COMMANDS[args.command](args).run()
        except (GmmError, OSError, AssertionError) as e:
            logger.error("error: {}".format(e))
            return EXIT_ERROR
    finally:
        builtins.print = original_print


if __name__ == '__main__':
    sys.exit(main())
