import contextlib
import io
import json
import logging
import os
import tempfile
import unittest

from engine import cli
from engine.checkpoints import manifest_checksum
from engine.core import BASELINES, PLOTS, build_run_config, generate_data, validate_config
from engine.evaluation import ABLATION_ROWS
from engine.paths import build_run_paths
from slides import storage

TINY_CONFIG = {
    "seed": 3,
    "resolution": {"factors": [4, 2, 1], "patch_size": 16},
    "data": {
        "n_slides": 4,
        "base_side": 64,
        "n_classes": 3,
        "split": [2, 1, 1],
        "probe_slides": 0,
        "workers": 2,
    },
    "backbone": {"base_channels": 2, "encoder_blocks": 2, "decoder_blocks": 2},
    "gaps": {"tau": 0.5, "mode": "per_branch", "calibration_triples": 8},
    "meta_fusion": {"hidden": 8, "generate_biases": False},
    "train": {
        "epochs_step1": 1,
        "epochs_step2": 1,
        "epochs_step3": 1,
        "plain_fusion_epochs": 1,
        "batch_size": 4,
        "learning_rate": 0.001,
    },
}


def _drop_cli_handlers():
    root = logging.getLogger("")
    for handler in list(root.handlers):
        if getattr(handler, "_msn_handler", False):
            root.removeHandler(handler)
            handler.close()


class CliTestCase(unittest.TestCase):
    def setUp(self):
        self._temp = tempfile.TemporaryDirectory()
        self.temp_dir = self._temp.name
        self.addCleanup(self._temp.cleanup)
        self.addCleanup(_drop_cli_handlers)

    def write_config(self, config, name="config.json"):
        path = os.path.join(self.temp_dir, name)
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(config, handle)
        return path

    def run_cli(self, *argv):
        stdout = io.StringIO()
        stderr = io.StringIO()
        with contextlib.redirect_stdout(stdout), contextlib.redirect_stderr(stderr):
            code = cli.main(list(argv))
        return code, stdout.getvalue(), stderr.getvalue()


class ConfigValidationTests(unittest.TestCase):
    def test_tiny_config_is_valid(self):
        self.assertEqual(validate_config(TINY_CONFIG), [])
        run_config = build_run_config(TINY_CONFIG)
        self.assertEqual(run_config.resolution.factors, (4, 2, 1))
        self.assertEqual(run_config.train.seed, 3)
        self.assertEqual(run_config.backbone.n_classes, 3)

    def test_errors_are_reported_per_key(self):
        config = json.loads(json.dumps(TINY_CONFIG))
        config["data"]["split"] = [2, 1, 2]
        config["resolution"]["factors"] = [4, 3, 1]
        config["extra"] = {}
        config["train"]["momentum"] = 0.9
        errors = validate_config(config)
        self.assertIn("unknown config section 'extra'", errors)
        self.assertIn("unknown key 'train.momentum'", errors)
        self.assertTrue(any("data.split" in e for e in errors))
        self.assertTrue(any("divide" in e for e in errors))

    def test_patch_size_must_fit_encoder_depth(self):
        config = json.loads(json.dumps(TINY_CONFIG))
        config["backbone"]["encoder_blocks"] = 3
        config["backbone"]["decoder_blocks"] = 3
        config["resolution"]["patch_size"] = 20
        self.assertTrue(any("divisible by 2**backbone.encoder_blocks" in e for e in validate_config(config)))


class CliTests(CliTestCase):
    def test_version_prints_runtime_info(self):
        code, stdout, _ = self.run_cli("--version")
        self.assertEqual(code, 0)
        info = json.loads(stdout)
        self.assertIn("torch_version", info)

    def test_missing_command_exits_2(self):
        code, _, _ = self.run_cli()
        self.assertEqual(code, 2)

    def test_invalid_config_exits_2(self):
        config = json.loads(json.dumps(TINY_CONFIG))
        config["data"]["n_classes"] = 1
        path = self.write_config(config)
        code, _, stderr = self.run_cli("gen-data", "--config", path, "--out", os.path.join(self.temp_dir, "run"))
        self.assertEqual(code, 2)
        self.assertIn("data.n_classes", stderr)

    def test_unreadable_config_exits_2(self):
        path = os.path.join(self.temp_dir, "broken.json")
        with open(path, "w", encoding="utf-8") as handle:
            handle.write("{not json")
        code, _, _ = self.run_cli("gen-data", "--config", path, "--out", os.path.join(self.temp_dir, "run"))
        self.assertEqual(code, 2)

    def test_step2_before_step1_names_missing_checkpoint(self):
        run = os.path.join(self.temp_dir, "run")
        self.assertEqual(self.run_cli("gen-data", "--config", self.write_config(TINY_CONFIG), "--out", run)[0], 0)
        code, _, stderr = self.run_cli("train", "--run", run, "--step", "2")
        self.assertEqual(code, 1)
        self.assertIn("step 1", stderr)

    def test_commands_on_an_empty_run_exit_1(self):
        run = os.path.join(self.temp_dir, "empty")
        code, _, stderr = self.run_cli("analyze-gaps", "--run", run)
        self.assertEqual(code, 1)
        self.assertIn("gen-data", stderr)

    def test_gen_data_is_deterministic_and_refuses_overwrite(self):
        config_path = self.write_config(TINY_CONFIG)
        first = os.path.join(self.temp_dir, "a")
        second = os.path.join(self.temp_dir, "b")
        self.assertEqual(self.run_cli("gen-data", "--config", config_path, "--out", first)[0], 0)
        self.assertEqual(self.run_cli("gen-data", "--config", config_path, "--out", second)[0], 0)
        slides_a = build_run_paths(first, create=False).slides_dir
        slides_b = build_run_paths(second, create=False).slides_dir
        self.assertEqual(storage.list_slides(slides_a), ["slide_000", "slide_001", "slide_002", "slide_003"])
        for slide_id in storage.list_slides(slides_a):
            self.assertEqual(
                storage.slide_checksum(os.path.join(slides_a, slide_id)),
                storage.slide_checksum(os.path.join(slides_b, slide_id)),
            )
        code, _, stderr = self.run_cli("gen-data", "--config", config_path, "--out", first)
        self.assertEqual(code, 1)
        self.assertIn("--force", stderr)
        self.assertEqual(self.run_cli("gen-data", "--config", config_path, "--out", first, "--force")[0], 0)

    def test_generate_data_returns_checksums_and_split(self):
        run = os.path.join(self.temp_dir, "direct")
        checksums = generate_data(TINY_CONFIG, run)
        self.assertEqual(len(checksums), 4)
        assignment = storage.load_splits(build_run_paths(run, create=False).splits_path)
        self.assertEqual(sorted(assignment.values()), ["subtrain", "test", "train", "train"])


class PipelineTests(CliTestCase):
    def test_full_pipeline_on_a_tiny_run(self):
        run = os.path.join(self.temp_dir, "run")
        paths = build_run_paths(run, create=False)

        def ok(*argv):
            code, _, stderr = self.run_cli(*argv)
            self.assertEqual(code, 0, msg=f"{argv}: {stderr}")

        ok("gen-data", "--config", self.write_config(TINY_CONFIG), "--out", run)
        ok("train", "--run", run, "--step", "1")
        meta_checksum = manifest_checksum(paths.step_checkpoint(1))
        ok("analyze-gaps", "--run", run)
        ok("train", "--run", run, "--step", "2")
        ok("train", "--run", run, "--step", "3")
        ok("train", "--run", run, "--step", "2", "--use-train-split")
        ok("train", "--run", run, "--step", "3", "--use-train-split")
        for baseline in BASELINES:
            ok("train", "--run", run, "--baseline", baseline)
        self.assertEqual(manifest_checksum(paths.step_checkpoint(1)), meta_checksum)
        ok("evaluate", "--run", run, "--ablations")
        for what in PLOTS:
            ok("plot", "--run", run, "--what", what)

        for step in (1, 2, 3):
            self.assertTrue(os.path.exists(os.path.join(paths.step_checkpoint(step), "manifest.json")))
        for branch in ("x1", "x2"):
            self.assertTrue(os.path.exists(paths.gap_profile(branch)))
        with open(os.path.join(paths.reports_dir, "report.json"), encoding="utf-8") as handle:
            report = json.load(handle)
        self.assertEqual([row["name"] for row in report["rows"]], list(ABLATION_ROWS))
        self.assertEqual(report["multi_branch_ratio"], 3.0)
        for row in report["rows"]:
            for value in row["branch_miou"].values():
                self.assertGreaterEqual(value, 0.0)
                self.assertLessEqual(value, 1.0)
        self.assertTrue(os.path.exists(os.path.join(paths.reports_dir, "report.md")))
        self.assertTrue(os.path.exists(os.path.join(paths.reports_dir, "log_step1.csv")))
        self.assertTrue(os.path.exists(os.path.join(paths.reports_dir, "log_step2_train.csv")))
        for name in ("gaps", "trend", "fusion_trend", "branch_trend"):
            self.assertTrue(os.path.exists(os.path.join(paths.plots_dir, f"{name}.png")))
        test_slides = [s for s, split in storage.load_splits(paths.splits_path).items() if split == "test"]
        for slide_id in test_slides:
            self.assertTrue(os.path.exists(os.path.join(paths.reports_dir, f"pred_{slide_id}.png")))

        code, _, _ = self.run_cli("train", "--run", run, "--step", "1")
        self.assertEqual(code, 1)
        ok("train", "--run", run, "--step", "1", "--force")
