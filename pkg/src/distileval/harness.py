"""Experiment orchestration: teacher and student training, evaluation, summaries."""
from __future__ import annotations

import csv
import json
import logging
import statistics
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .arch_zoo import ArchSpec, Model, build_model, resolve_norm
from .augment import AugmentConfig, augment_batch
from .config import PRESET_NAMES, RunConfig
from .datastore import (
    DatasetContainer,
    MetricRow,
    RunRecord,
    read_checkpoint,
    read_container,
    write_checkpoint,
    write_metrics_csv,
)
from .errors import ConfigError, NumericError
from .lion_optim import Lion
from .objectives import Targets, ce_loss, kd_loss
from .schedules import cosine_annealing_lr, keep_rate, learning_rate

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Components:
    droppath: bool
    kd: bool
    misc: bool


# rows of the ablation table: DP, KD, Misc.
PRESETS = {
    "baseline": Components(droppath=False, kd=False, misc=False),
    "no_dp_kd": Components(droppath=False, kd=False, misc=True),
    "no_dp": Components(droppath=False, kd=True, misc=True),
    "no_kd": Components(droppath=True, kd=False, misc=True),
    "full": Components(droppath=True, kd=True, misc=True),
}
assert tuple(PRESETS) == PRESET_NAMES

# (n_classes, ipc) -> batch size
BATCH_SIZES = {
    (10, 1): 10, (10, 10): 100, (10, 50): 128,
    (100, 1): 100, (100, 10): 256, (100, 50): 256,
}


def resolve_preset(name: str) -> Components:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; expected one of {list(PRESETS)}") from None


@dataclass(frozen=True)
class Plan:
    """Everything a run will actually do, resolved from config + preset."""

    preset: str
    droppath: bool
    kd: bool
    lr_schedule: str
    optimizer: str
    augment_mode: str

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def plan_run(cfg: RunConfig, role: str = "student") -> Plan:
    comp = resolve_preset(cfg.preset)
    misc = comp.misc
    return Plan(
        preset=cfg.preset,
        droppath=comp.droppath and role == "student",
        kd=comp.kd and role == "student",
        lr_schedule=cfg.lr_schedule or ("periodic" if misc else "cosine"),
        optimizer=cfg.optimizer or ("lion" if misc else "adamw-baseline"),
        augment_mode=cfg.augment_mode or ("kfold" if misc else "single"),
    )


def describe(cfg: RunConfig) -> dict:
    """Dry-run introspection of the component set a preset enables."""
    plan = plan_run(cfg)
    return {
        "preset": plan.preset,
        "DP": plan.droppath,
        "KD": plan.kd,
        "Misc": plan.lr_schedule == "periodic" and plan.optimizer == "lion" and plan.augment_mode == "kfold",
        **plan.to_dict(),
    }


def default_batch_size(container: DatasetContainer) -> int:
    size = BATCH_SIZES.get((container.n_classes, container.ipc))
    if size is None:
        size = 128
    return min(size, max(container.n_items, 1))


def container_targets(container: DatasetContainer) -> Targets:
    if container.label_kind == "logits":
        return Targets.soft(torch.from_numpy(container.labels), container.label_temperature)
    return Targets.hard(torch.from_numpy(container.class_indices()))


def set_deterministic(seed: int, enabled: bool = True):
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(enabled)


def _load(dataset) -> DatasetContainer:
    if isinstance(dataset, DatasetContainer):
        return dataset
    return read_container(dataset)


def _resolved_arch(spec: ArchSpec, data: DatasetContainer, droppath: bool) -> ArchSpec:
    spec = resolve_norm(spec, data.source)
    if tuple(spec.input_shape) != data.image_shape or spec.num_classes != data.n_classes:
        spec = ArchSpec(**{**spec.to_dict(), "input_shape": data.image_shape, "num_classes": data.n_classes})
    if spec.family == "cnn3" and droppath:
        raise ConfigError("presets with DropPath need a residual or single-branch student, not cnn3")
    return ArchSpec(**{**spec.to_dict(), "droppath_enabled": droppath})


def save_model(model: Model, path, meta: dict | None = None):
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    write_checkpoint(path, model.spec.to_dict(), tensors, meta)


def load_model(path) -> Model:
    arch, tensors, meta = read_checkpoint(path)
    spec = ArchSpec.from_dict(arch)
    model = build_model(spec, seed=int(meta.get("seed", 0)))
    model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    model.eval()
    return model


@torch.no_grad()
def predict(model: Model, images: torch.Tensor, batch_size: int = 500) -> torch.Tensor:
    was_training = model.training
    model.eval()
    out = torch.cat([model(images[i:i + batch_size]) for i in range(0, len(images), batch_size)])
    model.train(was_training)
    return out


def evaluate(checkpoint, eval_dataset) -> float:
    """Top-1 accuracy in inference mode (DropPath off, no augmentation)."""
    model = checkpoint if isinstance(checkpoint, Model) else load_model(checkpoint)
    data = _load(eval_dataset)
    if data.image_shape != model.spec.input_shape or data.n_classes != model.spec.num_classes:
        raise ConfigError(
            f"checkpoint expects {model.spec.input_shape} images with {model.spec.num_classes} classes, "
            f"dataset has {data.image_shape} with {data.n_classes}"
        )
    if data.n_items == 0:
        raise ConfigError("evaluation dataset is empty")
    logits = predict(model, torch.from_numpy(data.images))
    return float((logits.argmax(dim=1).numpy() == data.class_indices()).mean())


def _make_optimizer(model: Model, cfg: RunConfig, plan: Plan):
    if plan.optimizer == "lion":
        opt = Lion(model.parameters(), lr=0.0, betas=(cfg.lion.beta1, cfg.lion.beta2),
                   weight_decay=cfg.lion.weight_decay)
        opt.name_parameters(model.named_parameters())
        return opt
    return torch.optim.AdamW(model.parameters(), lr=cfg.adamw.lr, betas=tuple(cfg.adamw.betas),
                             weight_decay=cfg.adamw.weight_decay)


def _epoch_lr(cfg: RunConfig, plan: Plan, i: int, n: int) -> float:
    if plan.lr_schedule == "periodic":
        return learning_rate(cfg.lr, i)
    peak = cfg.lr.lr_max if plan.optimizer == "lion" else cfg.adamw.lr
    return cosine_annealing_lr(peak, i, n)


def _augment_cfg(cfg: RunConfig, plan: Plan, data: DatasetContainer) -> AugmentConfig:
    aug = cfg.augment
    if plan.augment_mode == "single":
        return replace(aug, k=min(1, len(aug.pool)))
    return aug.resolve(data.ipc)


def fit(
    model: Model,
    data: DatasetContainer,
    cfg: RunConfig,
    plan: Plan,
    teacher: Model | None = None,
    eval_data: DatasetContainer | None = None,
    role: str = "student",
) -> RunRecord:
    """The per-epoch training loop shared by teacher and student runs."""
    n_epochs = cfg.n_epochs
    if plan.droppath and n_epochs > cfg.keep_rate.N:
        raise ConfigError(f"epochs={n_epochs} exceeds keep_rate.N={cfg.keep_rate.N}")
    if plan.kd and teacher is None:
        raise ConfigError(f"preset {plan.preset!r} uses knowledge distillation but no teacher was given")
    batch_size = cfg.batch_size or default_batch_size(data)
    aug = _augment_cfg(cfg, plan, data)
    images = data.images
    targets = container_targets(data)
    optimizer = _make_optimizer(model, cfg, plan)
    if teacher is not None:
        teacher.eval()
    record = RunRecord(config=cfg.to_dict(), preset=cfg.preset, seed=cfg.seed, role=role)
    start = time.perf_counter()
    model.train()
    for i in range(n_epochs):
        p = keep_rate(cfg.keep_rate, i) if plan.droppath else 1.0
        lr = _epoch_lr(cfg, plan, i, n_epochs)
        model.keep_rate = p
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = np.random.default_rng([cfg.seed, i, 0x5EED]).permutation(data.n_items)
        total, seen = 0.0, 0
        for b in range(0, data.n_items, batch_size):
            idx = order[b:b + batch_size]
            x = torch.from_numpy(augment_batch(images[idx], aug, cfg.seed, i, b))
            y = targets[torch.from_numpy(idx)]
            logits = model(x)
            if plan.kd:
                with torch.no_grad():
                    t_logits = teacher(x)
                loss = kd_loss(logits, t_logits, y, cfg.kd)
            else:
                loss = ce_loss(logits, y)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite training loss at epoch {i}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        acc = None
        if eval_data is not None and ((i + 1) % cfg.eval_every == 0 or i == n_epochs - 1):
            acc = evaluate(model, eval_data)
            model.train()
        record.add(MetricRow(epoch=i, train_loss=total / max(seen, 1), keep_rate=p, lr=lr, eval_accuracy=acc))
    model.eval()
    if eval_data is not None:
        record.final_accuracy = evaluate(model, eval_data)
    record.wall_time = time.perf_counter() - start
    record.droppath_draws = model.controller.draws
    return record


def _persist(model: Model, record: RunRecord, out_dir: Path, name: str) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / f"{name}.ddt"
    save_model(model, ckpt, {"seed": record.seed, "preset": record.preset, "role": record.role})
    record.save(out_dir / f"{name}_record.json")
    write_metrics_csv(record.metrics, out_dir / f"{name}_metrics.csv")
    return ckpt


def train_teacher(cfg: RunConfig, data=None, eval_data=None) -> tuple[Path, RunRecord]:
    """Train the cnn3 teacher on the student's data with the preset's Misc. scheme (no DP, no KD).

    Returns ``(checkpoint path, record)``.
    """
    data = _load(data if data is not None else cfg.dataset)
    if eval_data is None and cfg.eval_dataset:
        eval_data = cfg.eval_dataset
    eval_data = _load(eval_data) if eval_data is not None else None
    if cfg.teacher.arch.family != "cnn3":
        raise ConfigError(f"the teacher must be a cnn3, got {cfg.teacher.arch.family!r}")
    set_deterministic(cfg.seed, cfg.deterministic)
    spec = _resolved_arch(cfg.teacher.arch, data, droppath=False)
    model = build_model(spec, seed=cfg.seed)
    plan = plan_run(cfg, role="teacher")
    tcfg = cfg.model_copy(update={"epochs": cfg.teacher.epochs if cfg.teacher.epochs is not None else cfg.n_epochs})
    record = fit(model, data, tcfg, plan, eval_data=eval_data, role="teacher")
    ckpt = _persist(model, record, Path(cfg.output_dir), "teacher")
    return ckpt, record


def train_student(cfg: RunConfig, teacher_checkpoint=None, data=None, eval_data=None) -> RunRecord:
    """Train the student under ``cfg.preset`` and persist checkpoint, record and metrics CSV."""
    data = _load(data if data is not None else cfg.dataset)
    if eval_data is None and cfg.eval_dataset:
        eval_data = cfg.eval_dataset
    eval_data = _load(eval_data) if eval_data is not None else None
    plan = plan_run(cfg)
    teacher = None
    if plan.kd:
        teacher_checkpoint = teacher_checkpoint or cfg.teacher.checkpoint
        if teacher_checkpoint is None:
            raise ConfigError(f"preset {cfg.preset!r} needs a teacher checkpoint")
        teacher = teacher_checkpoint if isinstance(teacher_checkpoint, Model) else load_model(teacher_checkpoint)
        if teacher.spec.input_shape != data.image_shape or teacher.spec.num_classes != data.n_classes:
            raise ConfigError("teacher checkpoint does not match the dataset shape")
    set_deterministic(cfg.seed, cfg.deterministic)
    spec = _resolved_arch(cfg.student, data, droppath=plan.droppath)
    model = build_model(spec, seed=cfg.seed)
    record = fit(model, data, cfg, plan, teacher=teacher, eval_data=eval_data)
    _persist(model, record, Path(cfg.output_dir), "student")
    return record


def run_experiment(cfg: RunConfig, seeds: list[int] | None = None) -> dict:
    """Train (teacher if needed, then) student for each seed; report mean and std of final accuracy."""
    seeds = seeds if seeds else [cfg.seed]
    records = []
    for seed in seeds:
        out = Path(cfg.output_dir) / f"seed{seed}" if len(seeds) > 1 else Path(cfg.output_dir)
        scfg = cfg.model_copy(update={"seed": seed, "output_dir": str(out)})
        teacher = None
        if plan_run(scfg).kd and not scfg.teacher.checkpoint:
            teacher, _ = train_teacher(scfg)
        records.append(train_student(scfg, teacher_checkpoint=teacher))
    accs = [r.final_accuracy for r in records if r.final_accuracy is not None]
    return {
        "preset": cfg.preset,
        "seeds": seeds,
        "accuracies": accs,
        "mean": statistics.fmean(accs) if accs else None,
        "std": statistics.pstdev(accs) if len(accs) > 1 else (0.0 if accs else None),
        "records": records,
    }


def _find_records(results_dir: Path) -> list[tuple[Path, RunRecord]]:
    found = []
    for path in sorted(results_dir.rglob("*.json")):
        try:
            found.append((path, RunRecord.load(path)))
        except (json.JSONDecodeError, TypeError, KeyError, ValueError):
            continue
    return found


def emit_plots(results_dir, render: bool = False) -> list[Path]:
    """Write accuracy summaries, accuracy-over-epoch series and schedule traces as CSV.

    Records without a final accuracy are skipped with a warning. ``render``
    additionally draws PNG figures with matplotlib.
    """
    results_dir = Path(results_dir)
    found = _find_records(results_dir)
    if not found:
        log.warning("no run records under %s", results_dir)
        return []
    usable = []
    for path, rec in found:
        if rec.final_accuracy is None:
            log.warning("skipping %s: no final accuracy", path)
            continue
        usable.append((path, rec))
    if not usable:
        log.warning("no run records with a final accuracy under %s", results_dir)
        return []

    def label(rec: RunRecord) -> str:
        family = rec.config.get("teacher" if rec.role == "teacher" else "student", {})
        family = family.get("arch", family).get("family", "?")
        return f"{rec.preset}/{family}" if rec.role == "student" else f"teacher/{family}"

    groups: dict[str, list[RunRecord]] = {}
    for _, rec in usable:
        groups.setdefault(label(rec), []).append(rec)

    summary = results_dir / "accuracy_summary.csv"
    with open(summary, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["series", "n_runs", "mean_accuracy", "std_accuracy", "seeds"])
        for name, recs in sorted(groups.items()):
            accs = [r.final_accuracy for r in recs]
            w.writerow([name, len(recs), statistics.fmean(accs),
                        statistics.pstdev(accs) if len(accs) > 1 else 0.0,
                        " ".join(str(r.seed) for r in recs)])
    series = results_dir / "accuracy_series.csv"
    traces = results_dir / "schedule_traces.csv"
    with open(series, "w", newline="") as fs, open(traces, "w", newline="") as ft:
        ws, wt = csv.writer(fs), csv.writer(ft)
        ws.writerow(["series", "seed", "epoch", "eval_accuracy"])
        wt.writerow(["series", "seed", "epoch", "keep_rate", "lr"])
        for name, recs in sorted(groups.items()):
            for r in recs:
                for m in r.metrics:
                    if m.eval_accuracy is not None:
                        ws.writerow([name, r.seed, m.epoch, m.eval_accuracy])
                    wt.writerow([name, r.seed, m.epoch, m.keep_rate, m.lr])
    written = [summary, series, traces]
    if render:
        written += _render(results_dir, groups)
    return written


def _render(results_dir: Path, groups: dict[str, list[RunRecord]]) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax_acc, ax_p, ax_lr) = plt.subplots(1, 3, figsize=(15, 4))
    for name, recs in sorted(groups.items()):
        r = recs[0]
        pts = [(m.epoch, m.eval_accuracy) for m in r.metrics if m.eval_accuracy is not None]
        if pts:
            ax_acc.plot(*zip(*pts), label=name)
        ax_p.plot([m.epoch for m in r.metrics], [m.keep_rate for m in r.metrics], label=name)
        ax_lr.plot([m.epoch for m in r.metrics], [m.lr for m in r.metrics], label=name)
    ax_acc.set(xlabel="epoch", ylabel="test accuracy")
    ax_p.set(xlabel="epoch", ylabel="keep rate")
    ax_lr.set(xlabel="epoch", ylabel="learning rate")
    ax_acc.legend(fontsize="small")
    fig.tight_layout()
    out = results_dir / "summary.png"
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return [out]
