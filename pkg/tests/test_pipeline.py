import json

import numpy as np
import pytest

from fgsty.core import ExperimentConfig, save_dataset
from fgsty.pipeline import (
    LeakageError,
    RunResult,
    RunSpec,
    _audit_no_leakage,
    _subsample_source,
    emit_report,
    replay,
    resolve_dataset,
    run,
    run_domain_generalization,
    run_multi_target,
    run_sweep,
)
from fgsty.synth import preset_suite


def tiny_cfg(**kw):
    defaults = dict(epochs=2, batch_size=8, learning_rate=2e-3, resolution=32, seed=11)
    defaults.update(kw)
    return ExperimentConfig(**defaults)


def tiny_spec(variant="source_only", targets=("preset:t1",), **kw):
    cfg = kw.pop("config", tiny_cfg())
    return RunSpec(
        variant=variant,
        source="preset:source",
        targets=list(targets),
        config=cfg,
        **kw,
    )


class TestRunSpec:
    def test_unknown_variant_rejected(self):
        with pytest.raises(ValueError):
            tiny_spec(variant="magic")

    def test_dg_requires_test_domain(self):
        with pytest.raises(ValueError):
            tiny_spec(mode="domain_generalization")

    def test_dg_leakage_rejected(self):
        with pytest.raises(ValueError):
            tiny_spec(
                mode="domain_generalization",
                targets=("preset:t1", "preset:t2"),
                test_domain="preset:t1",
            )

    def test_roundtrip(self):
        spec = tiny_spec(variant="fgsty", targets=("preset:t1", "preset:t3"))
        back = RunSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
        assert back == spec


class TestResolveDataset:
    def test_preset_refs(self):
        split = resolve_dataset("preset:t2", tiny_cfg())
        assert split.domain_id == "t2"
        assert split.train[0].image.shape == (32, 32, 3)

    def test_unknown_preset(self):
        with pytest.raises(ValueError):
            resolve_dataset("preset:mars", tiny_cfg())

    def test_path_ref(self, tmp_path):
        suite = preset_suite(3, n_train=3, n_test=2, resolution=32)
        save_dataset(suite.source, tmp_path / "src")
        split = resolve_dataset(str(tmp_path / "src"), tiny_cfg())
        assert len(split.train) == 3

    def test_subsample_deterministic(self):
        split = resolve_dataset("preset:source", tiny_cfg())
        a = _subsample_source(split, 0.5, seed=4)
        b = _subsample_source(split, 0.5, seed=4)
        assert [s.sample_id for s in a.train] == [s.sample_id for s in b.train]
        assert len(a.train) == len(split.train) // 2


class TestAudit:
    def test_leak_detected(self):
        suite = preset_suite(5, n_train=3, n_test=2, resolution=32)
        test_id = suite.source.test[0].sample_id
        with pytest.raises(LeakageError):
            _audit_no_leakage({test_id}, set(), [], suite.source)

    def test_clean_run_passes(self):
        suite = preset_suite(5, n_train=3, n_test=2, resolution=32)
        train_ids = {s.sample_id for s in suite.source.train}
        _audit_no_leakage(train_ids, set(), [suite.source], suite.source)


class TestRun:
    def test_source_only_result_shape(self):
        res = run(tiny_spec(targets=("preset:t1", "preset:t2")))
        assert set(res.per_target) == {"t1", "t2"}
        assert res.average == pytest.approx(np.mean(list(res.per_target.values())))
        assert res.variant == "source_only"
        assert res.loss_curves

    def test_mode_mismatch_rejected(self):
        spec = tiny_spec(mode="multi_target", targets=("preset:t1", "preset:t2"))
        with pytest.raises(ValueError):
            run(spec)

    def test_persist_and_replay_identical(self, tmp_path):
        spec = tiny_spec()
        res = run(spec, out_root=tmp_path)
        run_dirs = list(tmp_path.iterdir())
        assert len(run_dirs) == 1
        run_dir = run_dirs[0]
        assert (run_dir / "config.json").exists()
        assert (run_dir / "results.json").exists()
        assert (run_dir / "summary.csv").exists()
        assert list((run_dir / "checkpoints").glob("*.npz"))
        old, new = replay(run_dir)
        for domain in old.per_target:
            assert abs(old.per_target[domain] - new.per_target[domain]) < 1e-6

    def test_fgsty_cpl_runs_and_reports_pl_stats(self):
        res = run(tiny_spec(variant="fgsty_cpl"))
        assert res.pl_stats
        assert all("n_accepted" in s for s in res.pl_stats)
        assert res.style_ids
        # style images must come from the target train split
        for ids in res.style_ids.values():
            assert all("train" in sid for sid in ids)


class TestMultiTarget:
    def test_needs_two_targets(self):
        spec = tiny_spec(mode="multi_target")
        with pytest.raises(ValueError):
            run_multi_target(spec)

    def test_joint_adaptation_covers_all_targets(self):
        spec = tiny_spec(
            variant="fgsty_cpl", mode="multi_target", targets=("preset:t1", "preset:t2")
        )
        res = run_multi_target(spec)
        assert set(res.per_target) == {"t1", "t2"}
        draws = [s["target_draws_per_domain"] for s in res.pl_stats]
        assert all(len(d) == 2 for d in draws)

    def test_duplicated_target_close_to_single(self):
        # degenerate union of two identical targets
        cfg = tiny_cfg(epochs=8)
        single = run(tiny_spec(variant="fgsty_cpl", config=cfg))
        multi = run_multi_target(
            tiny_spec(
                variant="fgsty_cpl", mode="multi_target",
                targets=("preset:t1", "preset:t1"), config=cfg,
            )
        )
        assert abs(multi.per_target["t1"] - single.per_target["t1"]) <= 0.02


class TestDomainGeneralization:
    def test_evaluates_held_out_domain_only(self):
        spec = tiny_spec(
            variant="fgsty_cpl",
            mode="domain_generalization",
            targets=("preset:t1", "preset:t3"),
            test_domain="preset:t2",
        )
        res = run_domain_generalization(spec)
        assert set(res.per_target) == {"t2"}

    def test_empty_auxiliaries_rejected(self):
        spec = tiny_spec(
            variant="fgsty_cpl",
            mode="domain_generalization",
            targets=("preset:t1",),
            test_domain="preset:t2",
        )
        spec.targets = []
        with pytest.raises(ValueError):
            run_domain_generalization(spec)


class TestSweep:
    def test_invalid_knob(self):
        with pytest.raises(ValueError):
            run_sweep("gamma", [1], tiny_spec())

    def test_empty_grid(self):
        with pytest.raises(ValueError):
            run_sweep("alpha", [], tiny_spec())

    def test_source_size_sweep_subsamples(self):
        rows = run_sweep("source_size", [1.0, 0.25], tiny_spec())
        assert len(rows) == 2
        assert rows[0][0] == 1.0
        # both runs completed with a score
        assert all(0.0 <= r.average <= 1.0 for _, r in rows)

    def test_alpha_sweep_snapshots_config(self):
        rows = run_sweep("alpha", [0.5, 0.9], tiny_spec(variant="fgsty_cpl"))
        assert [r.config["alpha"] for _, r in rows] == [0.5, 0.9]


class TestEmitReport:
    def test_empty_report_valid(self, tmp_path):
        written = emit_report([], tmp_path / "report")
        names = {p.name for p in written}
        assert "results.json" in names
        assert "summary.csv" in names
        assert json.loads((tmp_path / "report" / "results.json").read_text()) == []

    def test_single_run_one_csv_row(self, tmp_path):
        res = run(tiny_spec())
        emit_report([res], tmp_path / "report")
        lines = (tmp_path / "report" / "summary.csv").read_text().strip().splitlines()
        assert len(lines) == 2

    def test_re_emit_byte_identical_json(self, tmp_path):
        res = run(tiny_spec())
        emit_report([res], tmp_path / "a")
        emit_report([res], tmp_path / "b")
        assert (tmp_path / "a" / "results.json").read_bytes() == (
            tmp_path / "b" / "results.json"
        ).read_bytes()

    def test_plots_written(self, tmp_path):
        res = run(tiny_spec(variant="fgsty_cpl"))
        suite = preset_suite(11, n_train=4, n_test=2, resolution=32)
        written = emit_report(
            [res], tmp_path / "report", label_splits=[suite.source]
        )
        plot_names = [p.name for p in written if p.suffix == ".png"]
        assert any(n.startswith("loss_") for n in plot_names)
        assert any(n.startswith("labels_") for n in plot_names)


class TestRunResultSerialization:
    def test_roundtrip(self):
        res = run(tiny_spec())
        back = RunResult.from_dict(json.loads(json.dumps(res.to_dict())))
        assert back.per_target == res.per_target
        assert back.average == res.average
