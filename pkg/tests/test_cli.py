import json

import numpy as np
import pytest

from fgsty.cli import parse_and_dispatch

FAST = ["--set", "epochs=2", "--set", "resolution=32", "--set", "n_style_images=3"]


def dispatch(*argv):
    return parse_and_dispatch(list(argv))


class TestBasics:
    def test_no_arguments_is_usage_error(self):
        assert dispatch() == 1

    def test_unknown_verb(self):
        assert dispatch("frobnicate") == 1

    def test_help_exits_zero(self):
        assert dispatch("--help") == 0

    def test_bad_set_key(self, tmp_path):
        code = dispatch("generate", "--out", str(tmp_path), "--set", "nonsense=1")
        assert code == 1

    def test_bad_set_value(self, tmp_path):
        code = dispatch("generate", "--out", str(tmp_path), "--set", "alpha=2.0")
        assert code == 1


class TestGenerate:
    def test_writes_layout_and_recipes(self, tmp_path):
        code = dispatch(
            "generate", "--out", str(tmp_path / "data"), "--domains", "source,t1",
            "--n-train", "3", "--n-test", "2", *FAST,
        )
        assert code == 0
        for name in ("source", "t1"):
            root = tmp_path / "data" / name
            assert len(list((root / "train" / "images").glob("*.png"))) == 3
            assert len(list((root / "train" / "masks").glob("*.png"))) == 3
            assert len(list((root / "test" / "images").glob("*.png"))) == 2
            recipe = json.loads((root / "recipe.json").read_text())
            assert recipe["domain_id"] == name

    def test_unknown_domain(self, tmp_path):
        assert dispatch("generate", "--out", str(tmp_path), "--domains", "mars") == 1


@pytest.fixture(scope="module")
def data_dirs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli-data")
    assert (
        dispatch(
            "generate", "--out", str(root), "--domains", "source,t1",
            "--n-train", "6", "--n-test", "2", *FAST,
        )
        == 0
    )
    return root


class TestStylize:
    def test_stylize_writes_manifest(self, data_dirs, tmp_path):
        out = tmp_path / "styled"
        code = dispatch(
            "stylize", "--source", str(data_dirs / "source"),
            "--style", str(data_dirs / "t1"), "--out", str(out), *FAST,
        )
        assert code == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["aligned"] is True
        assert len(manifest["pairs"]) == 6
        assert all("source_id" in p and "style_id" in p for p in manifest["pairs"])
        assert len(list((out / "train" / "images").glob("*.png"))) == 6

    def test_unaligned_flag(self, data_dirs, tmp_path):
        out = tmp_path / "styled-u"
        code = dispatch(
            "stylize", "--source", str(data_dirs / "source"),
            "--style", str(data_dirs / "t1"), "--out", str(out), "--unaligned", *FAST,
        )
        assert code == 0
        assert json.loads((out / "manifest.json").read_text())["aligned"] is False

    def test_missing_source_dir(self, data_dirs, tmp_path):
        code = dispatch(
            "stylize", "--source", str(tmp_path / "nope"),
            "--style", str(data_dirs / "t1"), "--out", str(tmp_path / "x"), *FAST,
        )
        assert code == 1


class TestTrainEvaluate:
    def test_train_then_evaluate(self, data_dirs, tmp_path):
        out = tmp_path / "trained"
        assert dispatch("train", "--data", str(data_dirs / "source"), "--out", str(out), *FAST) == 0
        assert (out / "model.npz").exists()
        metrics = json.loads((out / "metrics.json").read_text())
        assert len(metrics["train_loss"]) == 2
        assert "test_miou" in metrics

        eval_out = tmp_path / "eval"
        code = dispatch(
            "evaluate", "--model", str(out / "model.npz"),
            "--data", str(data_dirs / "t1"), "--out", str(eval_out), *FAST,
        )
        assert code == 0
        result = json.loads((eval_out / "metrics.json").read_text())
        assert 0.0 <= result["test_miou"] <= 1.0
        assert (eval_out / "per_sample.csv").exists()


class TestAdaptSweepReport:
    def test_adapt_persists_run_with_overrides(self, tmp_path):
        out = tmp_path / "runs"
        code = dispatch(
            "adapt", "--source", "preset:source", "--targets", "preset:t1",
            "--variant", "source_only", "--out", str(out),
            "--seed", "5", "--set", "alpha=0.9", *FAST,
        )
        assert code == 0
        run_dir = next(out.iterdir())
        snapshot = json.loads((run_dir / "config.json").read_text())
        assert snapshot["config"]["alpha"] == 0.9
        assert snapshot["config"]["seed"] == 5
        results = json.loads((run_dir / "results.json").read_text())
        assert results["variant"] == "source_only"

    def test_adapt_needs_target(self, tmp_path):
        code = dispatch(
            "adapt", "--source", "preset:source", "--targets", "",
            "--out", str(tmp_path), *FAST,
        )
        assert code == 1

    def test_sweep_runs_grid(self, tmp_path):
        out = tmp_path / "runs"
        code = dispatch(
            "sweep", "--kind", "source_size", "--grid", "1.0,0.5",
            "--source", "preset:source", "--targets", "preset:t1",
            "--variant", "source_only", "--out", str(out), *FAST,
        )
        assert code == 0
        sweep_dirs = [d for d in out.iterdir() if d.name.endswith("sweep-source_size")
                      or "sweep-source_size" in d.name]
        assert sweep_dirs
        payload = json.loads((sweep_dirs[0] / "sweep.json").read_text())
        assert len(payload["points"]) == 2

    def test_report_from_run_dir(self, tmp_path):
        out = tmp_path / "runs"
        assert (
            dispatch(
                "adapt", "--source", "preset:source", "--targets", "preset:t1",
                "--variant", "source_only", "--out", str(out), *FAST,
            )
            == 0
        )
        run_dir = next(out.iterdir())
        report = tmp_path / "report"
        assert dispatch("report", str(run_dir), "--out", str(report)) == 0
        assert (report / "summary.csv").exists()
        rows = json.loads((report / "results.json").read_text())
        assert len(rows) == 1

    def test_report_missing_results(self, tmp_path):
        assert dispatch("report", str(tmp_path / "none"), "--out", str(tmp_path / "r")) == 1
