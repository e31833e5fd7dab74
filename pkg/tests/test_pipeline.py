import json
import logging
import shutil
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from autodiff.tensor import Tensor
from config import RunConfig
from data import LabelTable
from encoder import Encoder
from errors import CheckpointError, CollapseError, DimensionError
from metrics import format_report, read_report
from model import HISTORY_COLUMNS, FineTuneStage, NonContrastiveStage
from pipeline import (
    COLLAPSE_FILE,
    SWEEP_BATCH_SIZES,
    StageArtifacts,
    _train,
    diagnose_checkpoint,
    evaluate_checkpoint,
    prepare_data,
    resolve_stage_dir,
    run_batch_size_sweep,
    run_joint,
    run_pipeline,
    stage1_finetune,
    stage2_noncontrastive,
    stage3_classify,
)

FIXTURES = Path(__file__).parent / "fixtures"
CONFIGS = Path(__file__).parent.parent / "src" / "configs"


def _values(artifacts, prefix=""):
    return {e.name[len(prefix):]: e for e in artifacts.entries() if e.name.startswith(prefix)}


class TestPrepareData:
    def test_synthetic_split(self, small_data):
        split, table = small_data
        assert len(table) == 4
        assert (len(split.train), len(split.eval), len(split.test)) == (32, 32, 32)

    def test_tsv_corpus(self, tmp_path, small_cfg, sentences):
        path = tmp_path / "corpus.tsv"
        names = {0: "treats", 1: "causes"}
        path.write_text("".join(f"{s.text}\t{names[s.predicate]}\n" for s in sentences), encoding="utf-8")
        cfg = small_cfg.with_overrides({"data.synthetic": False, "data.train_path": str(path)})
        split, table = prepare_data(cfg)
        assert len(table) == 28
        assert {s.predicate for s in split.train + split.eval + split.test} == {20, 7}


class TestStages:
    def test_stage1_freezes_all_but_last_layer(self, small_cfg, small_data):
        split, table = small_data
        untrained = FineTuneStage(small_cfg, split, len(table), seed=small_cfg.seed)
        trained = _values(stage1_finetune(split, small_cfg, table))
        moved = []
        for parameter in untrained.parameters():
            entry = trained[parameter.name]
            assert entry.frozen == parameter.frozen
            if parameter.frozen:
                np.testing.assert_array_equal(entry.values, parameter.data)
            elif not np.array_equal(entry.values, parameter.data):
                moved.append(parameter.name)
        assert any(name.startswith("encoder.layer2") for name in moved)
        assert any(name.startswith("head.") for name in moved)

    def test_stage1_is_deterministic(self, small_cfg, small_data):
        split, table = small_data
        first = stage1_finetune(split, small_cfg, table)
        second = stage1_finetune(split, small_cfg, table)
        assert first.checkpoint == second.checkpoint
        assert first.history.equals(second.history)

    def test_freeze_cascade(self, small_cfg, small_data):
        split, table = small_data
        stage1 = stage1_finetune(split, small_cfg, table)
        stage2 = stage2_noncontrastive(stage1, split, small_cfg)
        stage3, _ = stage3_classify(stage2, split, small_cfg, table)

        encoder = _values(stage1, "encoder.")
        online_encoder = _values(stage2, "online.encoder.")
        assert set(online_encoder) == set(encoder)
        for name, entry in online_encoder.items():
            assert entry.frozen
            np.testing.assert_array_equal(entry.values, encoder[name].values)
        target_encoder = _values(stage2, "target.encoder.")
        assert set(target_encoder) == set(encoder)
        for name, entry in target_encoder.items():
            assert entry.frozen
            np.testing.assert_array_equal(entry.values, encoder[name].values)

        after = _values(stage3)
        for name, entry in _values(stage2).items():
            assert after[name].frozen
            np.testing.assert_array_equal(after[name].values, entry.values)

    def test_stage2_moves_the_online_side(self, small_cfg, small_data):
        split, table = small_data
        stage1 = stage1_finetune(split, small_cfg, table)
        stage2 = stage2_noncontrastive(stage1, split, small_cfg)
        trainable = {e.name.split(".")[1] for e in stage2.entries() if not e.frozen}
        assert trainable == {"projector", "predictor"}
        assert all(e.frozen for e in stage2.entries() if e.name.startswith("target."))

    def test_stage3_classifier_width(self, small_cfg, small_data):
        split, table = small_data
        stage1 = stage1_finetune(split, small_cfg, table)
        stage2 = stage2_noncontrastive(stage1, split, small_cfg)
        stage3, report = stage3_classify(stage2, split, small_cfg, table)
        weight = _values(stage3)["classifier.weight"]
        assert weight.values.shape == (small_cfg.byol.projector_out, len(table))
        assert [row.name for row in report.rows] == list(table.names)
        assert report.total_support == len(split.test)

    def test_history_columns(self, small_cfg, small_data):
        split, table = small_data
        stage1 = stage1_finetune(split, small_cfg, table)
        assert list(stage1.history.columns) == HISTORY_COLUMNS
        assert list(stage1.history["epoch"]) == [1, 2]
        assert len(stage1.snapshots) == 2

    def test_collapse_writes_diagnostics(self, tmp_path, small_cfg, small_data):
        split, _ = small_data
        encoder = Encoder(small_cfg.encoder, small_cfg.tokenizer, np.random.default_rng(0))
        model = NonContrastiveStage(small_cfg, split, encoder, seed=1)
        for parameter in model.pair.online.predictor.parameters():
            parameter.data[...] = 0.0
        with pytest.raises(CollapseError) as info:
            _train(model, tmp_path / "stage2")
        path = tmp_path / "stage2" / COLLAPSE_FILE
        assert info.value.diagnostics_path == path
        dump = json.loads(path.read_text(encoding="utf-8"))
        assert dump["stage"] == "stage2"
        assert dump["epoch"] == 1
        assert not model.running

    def test_degenerate_diagnostics_abort_as_collapse(self, small_cfg, small_data, monkeypatch):
        split, table = small_data
        model = FineTuneStage(small_cfg, split, len(table), seed=0)
        monkeypatch.setattr(model, "representations", lambda: Tensor(np.zeros((len(split.train), 4))))
        with pytest.raises(CollapseError, match="after epoch 1"):
            model.step()
        assert not model.running
        assert model.snapshots == []


class TestRunPipeline:
    def test_matches_stage_by_stage_composition(self, tmp_path, small_cfg, small_data):
        split, table = small_data
        stage1 = stage1_finetune(split, small_cfg, table)
        stage2 = stage2_noncontrastive(stage1, split, small_cfg)
        stage3, expected = stage3_classify(stage2, split, small_cfg, table)

        report = run_pipeline(split, small_cfg, table, tmp_path / "run")
        assert format_report(report) == format_report(expected)
        assert (tmp_path / "run" / "stage3" / "checkpoint.bin").read_bytes() == stage3.checkpoint
        assert (tmp_path / "run" / "report.tsv").read_text(encoding="utf-8") == format_report(expected)
        assert LabelTable.from_file(tmp_path / "run" / "labels.txt") == table

    def test_resume_reuses_completed_stages(self, tmp_path, small_cfg, small_data, caplog):
        split, table = small_data
        out = tmp_path / "run"
        run_pipeline(split, small_cfg, table, out)
        stage1 = (out / "stage1" / "checkpoint.bin").read_bytes()
        stage2 = (out / "stage2" / "checkpoint.bin").read_bytes()
        report = (out / "report.tsv").read_text(encoding="utf-8")

        shutil.rmtree(out / "stage3")
        with caplog.at_level(logging.INFO, logger="pipeline"):
            run_pipeline(split, small_cfg, table, out)
        assert "Reusing stage 1" in caplog.text
        assert "Reusing stage 2" in caplog.text
        assert (out / "stage1" / "checkpoint.bin").read_bytes() == stage1
        assert (out / "stage2" / "checkpoint.bin").read_bytes() == stage2
        assert (out / "report.tsv").read_text(encoding="utf-8") == report

    def test_changed_config_retrains(self, tmp_path, small_cfg, small_data, caplog):
        split, table = small_data
        out = tmp_path / "run"
        run_pipeline(split, small_cfg, table, out)
        changed = small_cfg.with_overrides({"pipeline.stage3_epochs": 2})
        with caplog.at_level(logging.INFO, logger="pipeline"):
            run_pipeline(split, changed, table, out)
        assert "Reusing" not in caplog.text
        assert (out / "stage3" / "config.json").read_text(encoding="utf-8") == changed.to_json()

    def test_evaluate_checkpoint_reproduces_report(self, tmp_path, small_cfg, small_data):
        split, table = small_data
        report = run_pipeline(split, small_cfg, table, tmp_path / "run")
        assert format_report(evaluate_checkpoint(tmp_path / "run", split.test, table)) == format_report(report)

    def test_stage1_checkpoint_is_a_classifier(self, tmp_path, small_cfg, small_data):
        split, table = small_data
        run_pipeline(split, small_cfg, table, tmp_path / "run")
        report = evaluate_checkpoint(tmp_path / "run" / "stage1", split.test, table)
        assert report.total_support == len(split.test)

    def test_label_table_narrower_than_classifier(self, tmp_path, small_cfg, small_data):
        split, table = small_data
        run_pipeline(split, small_cfg, table, tmp_path / "run")
        with pytest.raises(DimensionError):
            evaluate_checkpoint(tmp_path / "run", split.test, LabelTable.for_classes(3))

    def test_stage2_has_no_classifier(self, tmp_path, small_cfg, small_data):
        split, table = small_data
        run_pipeline(split, small_cfg, table, tmp_path / "run")
        with pytest.raises(CheckpointError):
            evaluate_checkpoint(tmp_path / "run" / "stage2", split.test, table)

    def test_resolve_stage_dir(self, tmp_path, small_cfg, small_data):
        split, table = small_data
        run_pipeline(split, small_cfg, table, tmp_path / "run")
        assert resolve_stage_dir(tmp_path / "run") == tmp_path / "run" / "stage3"
        assert resolve_stage_dir(tmp_path / "run" / "stage1" / "checkpoint.bin") == tmp_path / "run" / "stage1"
        with pytest.raises(CheckpointError):
            resolve_stage_dir(tmp_path)

    def test_diagnose_checkpoint(self, tmp_path, small_cfg, small_data):
        split, table = small_data
        run_pipeline(split, small_cfg, table, tmp_path / "run")
        stage2 = diagnose_checkpoint(tmp_path / "run" / "stage2", split.test)
        stage1 = diagnose_checkpoint(tmp_path / "run" / "stage1", split.test)
        assert len(stage2.singular_values) == small_cfg.byol.projector_out
        assert len(stage1.singular_values) == small_cfg.encoder.output_dim
        assert -1.0 <= stage2.anisotropy <= 1.0


class TestJoint:
    def test_lambda_zero_equals_classification_only(self, small_cfg, small_data):
        split, table = small_data
        cfg = small_cfg.with_overrides({"pipeline.lambda": 0.0})
        weighted, weighted_report = run_joint(split, cfg, table)
        plain, plain_report = run_joint(split, cfg, table, classification_only=True)
        assert format_report(weighted_report) == format_report(plain_report)
        shared = {n: e for n, e in _values(weighted).items() if n.startswith(("head.", "online.encoder."))}
        for name, entry in shared.items():
            np.testing.assert_array_equal(_values(plain)[name].values, entry.values)

    def test_joint_run_directory(self, tmp_path, small_cfg, small_data):
        split, table = small_data
        artifacts, report = run_joint(split, small_cfg, table, tmp_path / "run")
        assert len(artifacts.history) == small_cfg.pipeline.joint_epochs
        assert artifacts.history["eval_macro_f1"].notna().all()
        assert resolve_stage_dir(tmp_path / "run") == tmp_path / "run" / "joint"
        assert format_report(evaluate_checkpoint(tmp_path / "run", split.test, table)) == format_report(report)


class TestSweep:
    def test_summary(self, tmp_path, small_cfg, small_data):
        split, table = small_data
        summary = run_batch_size_sweep(split, small_cfg, table, sizes=(8, 16), out_dir=tmp_path / "sweep")
        assert list(summary["batch_size"]) == [8, 16]
        assert list(summary.columns) == ["batch_size", "macro_precision", "macro_recall", "macro_f1"]
        assert (tmp_path / "sweep" / "summary.tsv").is_file()
        for size in (8, 16):
            assert (tmp_path / "sweep" / f"batch_{size}" / "report.tsv").is_file()
            cfg = RunConfig.from_json(tmp_path / "sweep" / f"batch_{size}" / "stage2" / "config.json")
            assert cfg.pipeline.batch_size == size


@pytest.fixture(scope="module")
def synthetic_run(tmp_path_factory):
    cfg = RunConfig.from_json(CONFIGS / "synthetic.json")
    out = tmp_path_factory.mktemp("synthetic")
    split, table = prepare_data(cfg)
    report = run_pipeline(split, cfg, table, out)
    return cfg, split, table, out, report


@pytest.fixture(scope="module")
def thresholds():
    return json.loads((FIXTURES / "collapse_thresholds.json").read_text(encoding="utf-8"))


@pytest.fixture(scope="module")
def ablated_stage2(synthetic_run):
    """Final stage-2 diagnostics without stop-gradient, predictor or EMA lag."""
    cfg, split, _, out, _ = synthetic_run
    ablated = cfg.with_overrides({"byol.stop_gradient": False, "byol.use_predictor": False, "byol.delta": 0.0})
    stage1 = StageArtifacts.load(out / "stage1", "stage1")
    try:
        return stage2_noncontrastive(stage1, split, ablated).snapshots[-1]
    except CollapseError as exc:
        return exc.snapshot


@pytest.mark.slow
class TestSyntheticRun:
    def test_separable_classes_are_learned(self, synthetic_run, thresholds):
        *_, report = synthetic_run
        assert report.macro_f1 >= thresholds["synthetic_min_macro_f1"]

    def test_stage1_loss_decreases(self, synthetic_run):
        _, _, _, out, _ = synthetic_run
        losses = list(pd.read_csv(out / "stage1" / "history.csv")["mean_loss"])
        assert all(later < earlier for earlier, later in zip(losses, losses[1:]))

    def test_stage2_loss_decreases(self, synthetic_run):
        _, _, _, out, _ = synthetic_run
        losses = list(pd.read_csv(out / "stage2" / "history.csv")["mean_loss"])
        assert losses[-1] < losses[0]

    def test_stage2_representations_keep_their_rank(self, synthetic_run, thresholds):
        _, split, _, out, _ = synthetic_run
        snapshot = diagnose_checkpoint(out / "stage2", split.test)
        assert snapshot.effective_rank > thresholds["stage2_min_effective_rank"]
        assert snapshot.cross_class_anisotropy < 0.99
        assert not snapshot.collapsed

    def test_staged_keeps_up_with_joint(self, synthetic_run, thresholds):
        cfg, split, table, _, report = synthetic_run
        _, joint = run_joint(split, cfg, table)
        assert report.macro_f1 >= joint.macro_f1 - thresholds["joint_margin"]

    def test_stage2_never_collapses_across_classes(self, synthetic_run, thresholds):
        _, _, _, out, _ = synthetic_run
        history = pd.read_csv(out / "stage2" / "history.csv")
        assert (history["cross_class_anisotropy"] < thresholds["cross_class_collapse_anisotropy"]).all()

    def test_ablated_stage2_collapses(self, synthetic_run, ablated_stage2, thresholds):
        _, _, _, out, _ = synthetic_run
        # None: the representations degenerated before diagnostics could be taken
        if ablated_stage2 is not None:
            healthy = pd.read_csv(out / "stage2" / "history.csv")["cross_class_anisotropy"]
            assert ablated_stage2.cross_class_anisotropy > thresholds["cross_class_collapse_anisotropy"]
            assert ablated_stage2.cross_class_anisotropy > healthy.iloc[-1]

    def test_report_matches_recorded_fixture(self, synthetic_run):
        _, _, _, out, _ = synthetic_run
        produced = (out / "report.tsv").read_bytes()
        recorded = FIXTURES / "synthetic_report.tsv"
        if not recorded.is_file():
            recorded.write_bytes(produced)
            pytest.skip(f"recorded {recorded.name}; commit it to pin the synthetic report")
        assert produced == recorded.read_bytes()

    def test_sweep_over_default_batch_sizes(self, synthetic_run, tmp_path):
        cfg, split, table, _, _ = synthetic_run
        summary = run_batch_size_sweep(split, cfg, table, out_dir=tmp_path / "sweep")
        assert SWEEP_BATCH_SIZES == (8, 64, 128, 256)
        assert list(summary["batch_size"]) == list(SWEEP_BATCH_SIZES)
        written = pd.read_csv(tmp_path / "sweep" / "summary.tsv", sep="\t")
        assert list(written["batch_size"]) == list(SWEEP_BATCH_SIZES)
        for size in SWEEP_BATCH_SIZES:
            report = read_report(tmp_path / "sweep" / f"batch_{size}" / "report.tsv")
            assert list(report["predicate"]) == list(table.names) + ["average"]
            assert report["support"].iloc[-1] == len(split.test)
