"""
Unit tests for the command-line surface: exit codes, output files and determinism.
"""

import os, sys, json, tempfile
import unittest
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from Method.cli_harness import main, EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED
from Method.core_model import GmmSpec, load_spec, save_spec
from Preprocessing.synth import load_dataset


class CliTestCase(unittest.TestCase):

    def setUp(self):
        self.folder = tempfile.TemporaryDirectory()
        self.addCleanup(self.folder.cleanup)
        # logs go under ./Logs of the working directory
        self.cwd = os.getcwd()
        os.chdir(self.folder.name)
        self.addCleanup(os.chdir, self.cwd)

    def path(self, *parts):
        return os.path.join(self.folder.name, *parts)

    def generate(self, out="gen", n=3000, seed=7, extra=()):
        return main(["generate", "--k", "3", "--d", "8", "--n", str(n), "--seed", str(seed),
                     "--weight-profile", "0.5,0.3,0.2", "--out", self.path(out), *extra])


class TestGenerate(CliTestCase):

    def test_writes_spec_and_dataset(self):
        self.assertEqual(self.generate(n=1000), EXIT_OK)
        spec = load_spec(self.path("gen", "spec.json"))
        data = load_dataset(self.path("gen", "data.csv"), k=3)
        self.assertEqual((spec.k, spec.d), (3, 8))
        self.assertEqual(data.n, 1000)

    def test_byte_identical_outputs(self):
        self.assertEqual(self.generate(out="a"), EXIT_OK)
        self.assertEqual(self.generate(out="b"), EXIT_OK)
        for name in ("spec.json", "data.csv"):
            with open(self.path("a", name), "rb") as f, open(self.path("b", name), "rb") as g:
                self.assertEqual(f.read(), g.read(), msg=name)

    def test_zero_samples(self):
        self.assertEqual(self.generate(n=0), EXIT_ERROR)

    def test_bad_profile(self):
        self.assertEqual(self.generate(extra=("--variance-profile", "wobbly")), EXIT_ERROR)


class TestFit(CliTestCase):

    def setUp(self):
        super().setUp()
        self.assertEqual(self.generate(), EXIT_OK)
        self.truth_path = self.path("gen", "spec.json")
        self.data_path = self.path("gen", "data.csv")

    def fit(self, init_path, *extra):
        return main(["fit", "--init", init_path, "--data", self.data_path, "--truth", self.truth_path,
                     "--out", self.path("fit"), *extra])

    def test_init_at_truth_converges(self):
        self.assertEqual(self.fit(self.truth_path, "--tol", "1e-3"), EXIT_OK)
        with open(self.path("fit", "trace.csv"), "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
        # header, init and at most 3 iterations
        self.assertLessEqual(len(lines), 5)
        self.assertTrue(lines[0].startswith("iter,D_m,loglik,w0,w1,w2,mu0_0"))
        self.assertTrue(os.path.exists(self.path("fit", "final_spec.json")))

    def test_max_iters_without_tol(self):
        self.assertEqual(self.fit(self.truth_path, "--max-iters", "1", "--tol", "0"), EXIT_NOT_CONVERGED)

    def test_split_mode(self):
        code = self.fit(self.truth_path, "--mode", "split", "--max-iters", "3", "--tol", "0")
        self.assertEqual(code, EXIT_NOT_CONVERGED)

    def test_split_batches_mismatch(self):
        self.assertEqual(self.fit(self.truth_path, "--mode", "split", "--max-iters", "3", "--batches", "4"), EXIT_ERROR)

    def test_dimension_mismatch(self):
        wrong = GmmSpec(weights=[0.5, 0.3, 0.2], means=[[0.0, 0.0], [50.0, 0.0], [0.0, 50.0]], variances=[1.0, 1.0, 1.0])
        save_spec(wrong, self.path("wrong.json"))
        self.assertEqual(self.fit(self.path("wrong.json")), EXIT_ERROR)

    def test_missing_file(self):
        self.assertEqual(self.fit(self.path("missing.json")), EXIT_ERROR)


class TestInitKmeansAndDiagnose(CliTestCase):

    def setUp(self):
        super().setUp()
        self.assertEqual(self.generate(n=5000), EXIT_OK)

    def test_init_kmeans(self):
        code = main(["init-kmeans", "--init", self.path("gen", "spec.json"), "--data", self.path("gen", "data.csv"),
                     "--out", self.path("km")])
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(load_spec(self.path("km", "kmeans_spec.json")).k, 3)

    def test_diagnose(self):
        code = main(["diagnose", "--truth", self.path("gen", "spec.json"), "--data", self.path("gen", "data.csv"),
                     "--out", self.path("diag")])
        self.assertEqual(code, EXIT_OK)
        with open(self.path("diag", "bad_events.json"), "r", encoding="utf-8") as f:
            document = json.load(f)
        self.assertEqual(len(document["reports"]), 6)
        self.assertNotIn("flags", document["reports"][0])


class TestExperiment(CliTestCase):

    def write_config(self, document):
        path = self.path("config.json")
        with open(path, "w", encoding="utf-8") as f:
            json.dump(document, f)
        return path

    def test_unknown_experiment(self):
        path = self.write_config({"schema": 1, "experiment": "nope", "seeds": [0], "n": 100})
        self.assertEqual(main(["experiment", "--config", path, "--out", self.path("exp")]), EXIT_ERROR)

    def test_runs_and_writes_files(self):
        path = self.write_config({"schema": 1, "experiment": "bad_events", "seeds": [0], "n": 5000,
                                  "instance": {"k": 2, "d": 4, "seed": 1, "beta_target": 4.0}})
        self.assertEqual(main(["experiment", "--config", path, "--out", self.path("exp")]), EXIT_OK)
        self.assertTrue(os.path.exists(self.path("exp", "bad_events_results.csv")))
        self.assertTrue(os.path.exists(self.path("exp", "bad_events_summary.json")))


if __name__ == '__main__':
    unittest.main()
