import copy

import numpy as np
import pytest
import torch

from distileval import harness
from distileval.arch_zoo import ArchSpec, build_model
from distileval.config import PRESET_NAMES, apply_overrides, build_config, load_config
from distileval.datastore import DatasetContainer, RunRecord, read_metrics_csv, synthetic_dataset
from distileval.errors import ConfigError, NumericError
from distileval.objectives import ce_loss
from distileval.schedules import cosine_annealing_lr, keep_rate, schedule_table

TABLE = {  # DP, KD, Misc.
    "baseline": (False, False, False),
    "no_dp_kd": (False, False, True),
    "no_dp": (False, True, True),
    "no_kd": (True, False, True),
    "full": (True, True, True),
}


@pytest.mark.parametrize("preset", PRESET_NAMES)
def test_preset_matrix(preset):
    d = harness.describe(build_config({"preset": preset}))
    assert (d["DP"], d["KD"], d["Misc"]) == TABLE[preset]


def test_baseline_uses_comparators():
    plan = harness.plan_run(build_config({"preset": "baseline"}))
    assert (plan.lr_schedule, plan.optimizer, plan.augment_mode) == ("cosine", "adamw-baseline", "single")
    plan = harness.plan_run(build_config({"preset": "no_dp_kd"}))
    assert (plan.lr_schedule, plan.optimizer, plan.augment_mode) == ("periodic", "lion", "kfold")


def test_misc_components_overridable():
    d = harness.describe(build_config({"preset": "full", "optimizer": "adamw-baseline"}))
    assert d["optimizer"] == "adamw-baseline" and d["Misc"] is False and d["DP"] and d["KD"]


def test_teacher_plan_never_uses_dp_or_kd():
    plan = harness.plan_run(build_config({"preset": "full"}), role="teacher")
    assert not plan.droppath and not plan.kd and plan.optimizer == "lion"


def test_default_batch_sizes():
    for ipc, bs in ((1, 10), (10, 100), (50, 128)):
        c = DatasetContainer(np.zeros((10 * ipc, 1, 1, 1), np.float32),
                             np.eye(10, dtype=np.float32)[np.arange(10 * ipc) % 10], ipc=ipc)
        assert harness.default_batch_size(c) == bs


def test_zero_epoch_checkpoint_is_initialization(tiny_cfg, tiny_data):
    train, test = tiny_data
    cfg = tiny_cfg("no_kd", epochs=0)
    rec = harness.train_student(cfg, data=train, eval_data=test)
    model = harness.load_model(f"{cfg.output_dir}/student.ddt")
    init = build_model(model.spec, seed=0)
    for (k, a), (_, b) in zip(model.state_dict().items(), init.state_dict().items()):
        assert torch.equal(a, b), k
    assert rec.metrics == [] and 0.0 <= rec.final_accuracy <= 1.0


def test_no_dp_never_draws_masks(tiny_cfg, tiny_data):
    train, test = tiny_data
    rec = harness.train_student(tiny_cfg("no_dp_kd"), data=train, eval_data=test)
    assert rec.droppath_draws == 0
    rec = harness.train_student(tiny_cfg("no_kd"), data=train, eval_data=test)
    assert rec.droppath_draws > 0


def test_no_dp_with_teacher_draws_nothing(tiny_cfg, tiny_data):
    train, test = tiny_data
    ckpt, _ = harness.train_teacher(tiny_cfg("no_dp"), data=train)
    rec = harness.train_student(tiny_cfg("no_dp"), teacher_checkpoint=ckpt, data=train, eval_data=test)
    assert rec.droppath_draws == 0


def test_identical_teacher_gives_half_ce(tiny_cfg, tiny_data, monkeypatch):
    train, _ = tiny_data
    cfg = tiny_cfg("no_dp", epochs=2)
    plan = harness.plan_run(cfg)
    seen = []
    real = harness.kd_loss

    def spy(ys, yt, target, kd):
        loss = real(ys, yt, target, kd)
        seen.append((loss.item(), 0.5 * ce_loss(ys, target).item()))
        return loss

    monkeypatch.setattr(harness, "kd_loss", spy)
    model = build_model(harness._resolved_arch(cfg.student, train, False), seed=0)
    harness.fit(model, train, cfg, plan, teacher=model)
    assert seen and all(a == b for a, b in seen)


def test_teacher_is_not_modified(tiny_cfg, tiny_data):
    train, _ = tiny_data
    ckpt, _ = harness.train_teacher(tiny_cfg("full"), data=train)
    teacher = harness.load_model(ckpt)
    before = copy.deepcopy(teacher.state_dict())
    harness.train_student(tiny_cfg("full"), teacher_checkpoint=teacher, data=train)
    for k, v in teacher.state_dict().items():
        assert torch.equal(v, before[k]), k


def test_schedules_threaded_into_loop(tiny_cfg, tiny_data):
    train, _ = tiny_data
    cfg = tiny_cfg("no_kd")
    rec = harness.train_student(cfg, data=train)
    assert [(m.epoch, m.keep_rate, m.lr) for m in rec.metrics] == schedule_table(cfg.keep_rate, cfg.lr)
    rec = harness.train_student(tiny_cfg("baseline"), data=train)
    assert [m.keep_rate for m in rec.metrics] == [1.0] * 6
    assert [m.lr for m in rec.metrics] == [cosine_annealing_lr(cfg.adamw.lr, i, 6) for i in range(6)]


def test_keep_rate_reaches_the_model(tiny_cfg, tiny_data, monkeypatch):
    train, _ = tiny_data
    cfg = tiny_cfg("no_kd")
    seen = []
    real = harness.Model.forward

    def spy(self, x):
        if self.training:
            seen.append(self.keep_rate)
        return real(self, x)

    monkeypatch.setattr(harness.Model, "forward", spy)
    harness.train_student(cfg, data=train)
    per_epoch = seen[:: train.n_items // cfg.batch_size]
    assert per_epoch == [keep_rate(cfg.keep_rate, i) for i in range(6)]


def test_reproducible_metrics(tmp_path, tiny_data):
    from conftest import tiny_doc

    train, test = tiny_data
    csvs = []
    for run in ("a", "b"):
        cfg = build_config(tiny_doc(tmp_path / run, "no_kd"))
        harness.train_student(cfg, data=train, eval_data=test)
        csvs.append((tmp_path / run / "student_metrics.csv").read_bytes())
    assert csvs[0] == csvs[1]


def test_eval_cadence(tiny_cfg, tiny_data):
    train, test = tiny_data
    rec = harness.train_student(tiny_cfg("no_dp_kd", epochs=5), data=train, eval_data=test)
    assert [m.epoch for m in rec.metrics if m.eval_accuracy is not None] == [2, 4]
    assert rec.final_accuracy == rec.metrics[-1].eval_accuracy


def test_persisted_artifacts(tiny_cfg, tiny_data):
    train, test = tiny_data
    cfg = tiny_cfg("no_kd")
    rec = harness.train_student(cfg, data=train, eval_data=test)
    assert RunRecord.load(f"{cfg.output_dir}/student_record.json") == rec
    assert read_metrics_csv(f"{cfg.output_dir}/student_metrics.csv") == rec.metrics
    assert harness.evaluate(f"{cfg.output_dir}/student.ddt", test) == rec.final_accuracy


def test_kd_preset_without_teacher_rejected(tiny_cfg, tiny_data):
    with pytest.raises(ConfigError, match="teacher"):
        harness.train_student(tiny_cfg("full"), data=tiny_data[0])


def test_teacher_must_be_cnn3(tiny_cfg, tiny_data):
    cfg = tiny_cfg("full", teacher={"arch": {"family": "resnet8", "width_profile": [4, 4, 4]}})
    with pytest.raises(ConfigError):
        harness.train_teacher(cfg, data=tiny_data[0])


def test_dp_preset_rejects_cnn3_student(tiny_cfg, tiny_data):
    cfg = tiny_cfg("no_kd", student={"family": "cnn3", "width_profile": [4, 4, 4]})
    with pytest.raises(ConfigError):
        harness.train_student(cfg, data=tiny_data[0])


def test_non_finite_loss_aborts_with_epoch(tiny_cfg, tiny_data, monkeypatch):
    monkeypatch.setattr(harness, "ce_loss", lambda ys, y: ys.sum() * float("nan"))
    with pytest.raises(NumericError, match="epoch 0"):
        harness.train_student(tiny_cfg("no_dp_kd"), data=tiny_data[0])


def constant_model(cls, n_classes=10, shape=(3, 8, 8)):
    model = build_model(ArchSpec(family="cnn3", width_profile=[2, 2, 2], input_shape=shape, num_classes=n_classes))
    lin = model.head[-1]
    with torch.no_grad():
        lin.weight.zero_()
        lin.bias.zero_()
        lin.bias[cls] = 1.0
    return model


def test_constant_prediction_scores_chance():
    data = synthetic_dataset(5, n_classes=10, shape=(3, 8, 8))
    model = constant_model(3)
    assert harness.evaluate(model, data) == pytest.approx(0.1)
    assert harness.evaluate(model, data) == harness.evaluate(model, data)


def test_evaluate_shape_mismatch():
    data = synthetic_dataset(1, n_classes=4, shape=(3, 8, 8))
    with pytest.raises(ConfigError):
        harness.evaluate(constant_model(0), data)


def test_evaluate_restores_training_mode():
    data = synthetic_dataset(2, n_classes=10, shape=(3, 8, 8))
    model = constant_model(0)
    model.train()
    harness.evaluate(model, data)
    assert model.training


def test_run_experiment_trains_teacher_per_seed(tiny_cfg, tiny_data, tmp_path):
    from distileval.datastore import write_container

    train, test = tiny_data
    write_container(train, tmp_path / "train.ddt")
    write_container(test, tmp_path / "test.ddt")
    cfg = tiny_cfg("full", dataset=str(tmp_path / "train.ddt"), eval_dataset=str(tmp_path / "test.ddt"), epochs=2)
    res = harness.run_experiment(cfg, seeds=[0, 1])
    assert res["seeds"] == [0, 1] and len(res["accuracies"]) == 2
    assert res["mean"] == pytest.approx(np.mean(res["accuracies"]))
    for s in (0, 1):
        assert (tmp_path / "full" / f"seed{s}" / "teacher.ddt").exists()


def test_emit_plots(tiny_cfg, tiny_data, tmp_path, caplog):
    train, test = tiny_data
    runs = tmp_path / "full"
    for preset in ("baseline", "no_kd"):
        harness.train_student(tiny_cfg(preset, output_dir=str(runs / preset)), data=train, eval_data=test)
    stale = RunRecord({}, "no_dp", 0)
    stale.save(runs / "stale.json")
    written = harness.emit_plots(runs, render=True)
    names = sorted(p.name for p in written)
    assert names == ["accuracy_series.csv", "accuracy_summary.csv", "schedule_traces.csv", "summary.png"]
    summary = (runs / "accuracy_summary.csv").read_text().splitlines()
    assert [line.split(",")[0] for line in summary[1:]] == ["baseline/resnet8", "no_kd/resnet8"]
    assert "no final accuracy" in caplog.text
    import csv

    rows = [r for r in csv.DictReader(open(runs / "schedule_traces.csv")) if r["series"] == "no_kd/resnet8"]
    cfg = tiny_cfg("no_kd")
    assert [(int(r["epoch"]), float(r["keep_rate"]), float(r["lr"])) for r in rows] == schedule_table(cfg.keep_rate, cfg.lr)


def test_emit_plots_empty_dir(tmp_path, caplog):
    assert harness.emit_plots(tmp_path) == []
    assert "no run records" in caplog.text


def test_config_overrides_and_errors(tmp_path):
    doc = apply_overrides({}, ["lr.lr_max=1e-3", "preset=no_kd", "student.family=resnet8", "augment.k=4"])
    cfg = build_config(doc)
    assert cfg.lr.lr_max == 1e-3 and cfg.preset == "no_kd" and cfg.student.family == "resnet8" and cfg.augment.k == 4
    with pytest.raises(ConfigError):
        build_config({"preset": "everything"})
    with pytest.raises(ConfigError):
        build_config({"lr": {"T": 400}})
    with pytest.raises(ConfigError):
        build_config({"keep_rate": {"gamma": 2.0}})
    with pytest.raises(ConfigError):
        apply_overrides({}, ["novalue"])
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


def test_config_json_round_trip():
    cfg = build_config({"preset": "no_dp", "student": {"family": "vgg11"}})
    assert build_config(cfg.to_dict()) == cfg
