"""
Unit tests for experiments: config parsing, small runs of every experiment, the result files.

The full-scale reproductions in ./experiment_configs run only with GMM_EM_ACCEPTANCE=1.
"""

import os, sys, json, time, tempfile
import unittest
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from Method.utils import ConfigError
from Analysis.experiments import (EXPERIMENTS, RESULT_COLUMNS, parse_experiment_config, load_experiment_config,
                                  run_experiment)

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CONFIG_DIR = os.path.join(REPO_ROOT, "experiment_configs")
ACCEPTANCE = os.environ.get("GMM_EM_ACCEPTANCE", "0") == "1"

INSTANCE = {"k": 3, "d": 8, "margin_multiple": 1.0, "weight_profile": [0.5, 0.3, 0.2], "variance_profile": "unit", "seed": 42}


def small_config(experiment, **fields):
    document = {"schema": 1, "experiment": experiment, "instance": dict(INSTANCE), "seeds": [0, 1]}
    document.update(fields)
    return parse_experiment_config(json.dumps(document))


class TestConfigParsing(unittest.TestCase):

    def test_unknown_experiment_lists_valid_names(self):
        with self.assertRaises(ConfigError) as ctx:
            parse_experiment_config('{"schema": 1, "experiment": "nope", "seeds": [0], "n": 10}')
        for name in EXPERIMENTS:
            self.assertIn(name, str(ctx.exception))

    def test_json_syntax_error_has_location(self):
        with self.assertRaises(ConfigError) as ctx:
            parse_experiment_config('{"schema": 1,\n "experiment": }')
        self.assertIn("line 2", ctx.exception.location)

    def test_wrong_schema(self):
        with self.assertRaises(ConfigError):
            parse_experiment_config('{"schema": 2, "experiment": "convergence", "seeds": [0], "n": 10}')

    def test_empty_seeds(self):
        with self.assertRaises(ConfigError):
            parse_experiment_config('{"schema": 1, "experiment": "convergence", "seeds": [], "n": 10}')

    def test_nonpositive_grid(self):
        with self.assertRaises(ConfigError):
            parse_experiment_config('{"schema": 1, "experiment": "error_vs_n", "seeds": [0], "n_grid": [1000, 0]}')

    def test_missing_grid(self):
        with self.assertRaises(ConfigError) as ctx:
            parse_experiment_config('{"schema": 1, "experiment": "error_vs_d", "seeds": [0], "n": 1000}')
        self.assertIn("d_grid", str(ctx.exception))

    def test_unknown_field(self):
        with self.assertRaises(ConfigError):
            parse_experiment_config('{"schema": 1, "experiment": "convergence", "seeds": [0], "n": 10, "nn": 3}')

    def test_shipped_configs_parse(self):
        names = sorted(os.path.splitext(name)[0] for name in os.listdir(CONFIG_DIR) if name.endswith(".json"))
        self.assertEqual(names, sorted(EXPERIMENTS))
        for name in names:
            config = load_experiment_config(os.path.join(CONFIG_DIR, f"{name}.json"))
            self.assertEqual(config.experiment, name)


class TestSmallRuns(unittest.TestCase):

    def setUp(self):
        self.folder = tempfile.TemporaryDirectory()
        self.addCleanup(self.folder.cleanup)

    def run_and_read(self, config):
        results_path, summary_path, summary = run_experiment(config, self.folder.name)
        with open(results_path, "r", encoding="utf-8") as f:
            header = f.readline().strip()
        with open(summary_path, "r", encoding="utf-8") as f:
            written = json.load(f)
        self.assertEqual(header, ",".join(RESULT_COLUMNS[config.experiment]))
        self.assertEqual(written["experiment"], config.experiment)
        self.assertEqual(written["schema"], 1)
        return results_path, summary

    def test_convergence(self):
        _, summary = self.run_and_read(small_config("convergence", n=80000))
        self.assertTrue(summary["passed"])
        self.assertLessEqual(summary["median_final_D_m"], 0.05)
        # a fit that stops at its fixed point reports no stationary ratio
        self.assertLess(summary["max_gamma"], 0.7)

    def test_fixed_point(self):
        _, summary = self.run_and_read(small_config("fixed_point", n_grid=[5000, 20000]))
        self.assertEqual(len(summary["halving_ratios"]), 1)
        self.assertLess(summary["median_D_m"][1], summary["median_D_m"][0])

    def test_error_vs_n(self):
        config = small_config("error_vs_n", n_grid=[2000, 8000], em={"max_iters": 4, "tol": 0, "mode": "sample_split"})
        _, summary = self.run_and_read(config)
        self.assertLess(summary["slope"], 0.0)

    def test_error_vs_d(self):
        _, summary = self.run_and_read(small_config("error_vs_d", n=5000, d_grid=[4, 16]))
        self.assertEqual(len(summary["scaled_median_rel_var_err"]), 2)

    def test_separation_sweep(self):
        config = small_config("separation_sweep", n=5000, margin_grid=[0.05, 1.0], em={"max_iters": 10, "tol": 1e-6})
        results_path, summary = self.run_and_read(config)
        self.assertIsNone(summary["passed"])
        self.assertEqual(len(summary["median_final_D_m"]), 2)

    def test_kmeans_init(self):
        results_path, summary = self.run_and_read(small_config("kmeans_init", n=20000))
        self.assertTrue(summary["passed"])
        with open(results_path, "r", encoding="utf-8") as f:
            # header + 2 seeds x 3 components
            self.assertEqual(len(f.read().splitlines()), 7)

    def test_bad_events(self):
        instance = dict(INSTANCE, beta_target=4.0)
        _, summary = self.run_and_read(small_config("bad_events", n=20000, instance=instance))
        # 2 seeds x 3 targets x 2 sources
        self.assertEqual(summary["pairs_checked"], 12)
        self.assertTrue(summary["passed"])

    def test_deterministic_results(self):
        config = small_config("kmeans_init", n=5000)
        first, _, _ = run_experiment(config, os.path.join(self.folder.name, "a"))
        second, _, _ = run_experiment(config, os.path.join(self.folder.name, "b"))
        with open(first, "rb") as f, open(second, "rb") as g:
            self.assertEqual(f.read(), g.read())


@unittest.skipUnless(ACCEPTANCE, "set GMM_EM_ACCEPTANCE=1 to run the full-scale reproductions")
class TestAcceptance(unittest.TestCase):

    def run_config(self, name):
        config = load_experiment_config(os.path.join(CONFIG_DIR, f"{name}.json"))
        with tempfile.TemporaryDirectory() as folder:
            _, _, summary = run_experiment(config, folder)
        return summary

    def test_convergence(self):
        started = time.perf_counter()
        summary = self.run_config("convergence")
        self.assertGreaterEqual(summary["seeds_passing"], 18)
        self.assertLessEqual(time.perf_counter() - started, 60.0)

    def test_fixed_point(self):
        summary = self.run_config("fixed_point")
        self.assertLessEqual(summary["median_D_m"][-1], 0.02)
        self.assertTrue(summary["passed"])

    def test_error_vs_n(self):
        summary = self.run_config("error_vs_n")
        self.assertGreaterEqual(summary["slope"], -0.65)
        self.assertLessEqual(summary["slope"], -0.35)

    def test_error_vs_d(self):
        self.assertLessEqual(self.run_config("error_vs_d")["spread"], 3.0)

    def test_kmeans_init(self):
        self.assertGreaterEqual(self.run_config("kmeans_init")["seeds_passing"], 45)

    def test_bad_events(self):
        self.assertTrue(self.run_config("bad_events")["passed"])


if __name__ == '__main__':
    unittest.main()
