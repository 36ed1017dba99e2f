"""On-disk formats: dataset/checkpoint containers and run records.

Container layout (all integers little-endian)::

    bytes 0..8     magic b"DDTENSR1"
    bytes 8..12    uint32 header length H
    bytes 12..12+H UTF-8 JSON header
    then           raw payload

Dataset payload is float32 images in C order ``(N, C, H, W)`` followed by
float32 labels ``(N, n_classes)``: one-hot rows for hard labels, raw logits
otherwise. Checkpoint payload is a sequence of named arrays whose dtype,
shape and byte offset are listed in the header.
"""
from __future__ import annotations

import csv
import json
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ConfigError, FormatError

MAGIC = b"DDTENSR1"
VERSION = 1
PREFIX = len(MAGIC) + 4
CIFAR_PIXELS = 3 * 32 * 32


@dataclass
class DatasetContainer:
    images: np.ndarray
    labels: np.ndarray
    label_kind: str = "hard"
    label_temperature: float | None = None
    source: str = "real"
    ipc: int | None = None

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype="<f4")
        self.labels = np.ascontiguousarray(self.labels, dtype="<f4")

    @property
    def n_items(self) -> int:
        return self.images.shape[0]

    @property
    def n_classes(self) -> int:
        return self.labels.shape[1]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def class_indices(self) -> np.ndarray:
        return self.labels.argmax(axis=1)

    def header(self) -> dict:
        c, h, w = self.image_shape
        hdr = {
            "kind": "dataset",
            "version": VERSION,
            "n_items": self.n_items,
            "channels": c,
            "height": h,
            "width": w,
            "n_classes": self.n_classes,
            "label_kind": self.label_kind,
            "source": self.source,
            "ipc": self.ipc,
        }
        if self.label_kind == "logits":
            hdr["label_temperature"] = self.label_temperature
        return hdr

    def validate(self):
        if self.images.ndim != 4:
            raise FormatError(f"images must be (N, C, H, W), got shape {self.images.shape}")
        if self.labels.ndim != 2 or self.labels.shape[0] != self.images.shape[0]:
            raise FormatError(f"labels must be (N, n_classes) with N={self.n_items}, got {self.labels.shape}")
        if self.label_kind not in ("hard", "logits"):
            raise FormatError(f"label_kind must be 'hard' or 'logits', got {self.label_kind!r}")
        if self.label_kind == "logits":
            if self.label_temperature is None or not self.label_temperature > 0:
                raise FormatError("logit labels need a positive label_temperature")
        elif self.label_temperature is not None:
            raise FormatError("label_temperature is only valid for logit labels")
        if self.n_items and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise FormatError("image values must lie in [0, 1]")
        if self.label_kind == "hard" and self.n_items:
            ones = (self.labels == 1.0).sum(axis=1)
            zeros = (self.labels == 0.0).sum(axis=1)
            bad = np.flatnonzero((ones != 1) | (zeros != self.n_classes - 1))
            if bad.size:
                raise FormatError(f"hard label row {int(bad[0])} is not one-hot")

    def subset(self, idx) -> "DatasetContainer":
        return DatasetContainer(self.images[idx], self.labels[idx], self.label_kind,
                                self.label_temperature, self.source, self.ipc)

    def equals(self, other: "DatasetContainer") -> bool:
        return (
            self.header() == other.header()
            and self.images.tobytes() == other.images.tobytes()
            and self.labels.tobytes() == other.labels.tobytes()
        )


def _atomic_write(path: str | os.PathLike, chunks: Iterable[bytes]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            for chunk in chunks:
                f.write(chunk)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _pack(header: dict, payload: Iterable[bytes]) -> list[bytes]:
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    return [MAGIC, struct.pack("<I", len(raw)), raw, *payload]


def _read_raw(path: str | os.PathLike) -> tuple[dict, memoryview, int]:
    """Returns ``(header, payload, payload byte offset)``."""
    data = Path(path).read_bytes()
    if len(data) < PREFIX:
        raise FormatError(f"file is {len(data)} bytes, shorter than the {PREFIX}-byte prefix", len(data))
    if data[:8] != MAGIC:
        raise FormatError(f"bad magic {data[:8]!r}, expected {MAGIC!r}", 0)
    (hlen,) = struct.unpack_from("<I", data, 8)
    if PREFIX + hlen > len(data):
        raise FormatError(f"header of {hlen} bytes runs past end of file", len(data))
    try:
        header = json.loads(data[PREFIX:PREFIX + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"header is not valid UTF-8 JSON: {e}", PREFIX) from e
    if not isinstance(header, dict):
        raise FormatError("header must be a JSON object", PREFIX)
    if header.get("version") != VERSION:
        raise FormatError(f"unsupported container version {header.get('version')!r}", PREFIX)
    return header, memoryview(data)[PREFIX + hlen:], PREFIX + hlen


def _check_payload(payload: memoryview, expected: int, start: int):
    if len(payload) < expected:
        raise FormatError(
            f"payload truncated: expected {expected} bytes, found {len(payload)}", start + len(payload)
        )
    if len(payload) > expected:
        raise FormatError(
            f"payload has {len(payload) - expected} trailing bytes beyond the {expected} the header declares",
            start + expected,
        )


def write_container(container: DatasetContainer, path: str | os.PathLike):
    container.validate()
    _atomic_write(path, _pack(container.header(), [container.images.tobytes(), container.labels.tobytes()]))


def read_container(path: str | os.PathLike) -> DatasetContainer:
    header, payload, start = _read_raw(path)
    if header.get("kind", "dataset") != "dataset":
        raise FormatError(f"expected a dataset container, found kind {header.get('kind')!r}", PREFIX)
    try:
        n, c, h, w, k = (int(header[key]) for key in ("n_items", "channels", "height", "width", "n_classes"))
        label_kind = header["label_kind"]
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"dataset header missing or invalid field: {e}", PREFIX) from e
    n_img = n * c * h * w
    _check_payload(payload, 4 * (n_img + n * k), start)
    flat = np.frombuffer(payload, dtype="<f4")
    container = DatasetContainer(
        images=flat[:n_img].reshape(n, c, h, w).copy(),
        labels=flat[n_img:].reshape(n, k).copy(),
        label_kind=label_kind,
        label_temperature=header.get("label_temperature"),
        source=header.get("source", "real"),
        ipc=header.get("ipc"),
    )
    container.validate()
    return container


def write_checkpoint(path: str | os.PathLike, arch: dict, tensors: dict[str, np.ndarray], meta: dict | None = None):
    """Store named arrays plus the architecture description they belong to."""
    table, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)  # ascontiguousarray would promote 0-d arrays to 1-d
        dtype = arr.dtype.newbyteorder("<")
        raw = arr.astype(dtype, copy=False).tobytes(order="C")
        table.append({"name": name, "dtype": dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {"kind": "checkpoint", "version": VERSION, "arch": arch, "meta": meta or {}, "tensors": table}
    _atomic_write(path, _pack(header, chunks))


def read_checkpoint(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray], dict]:
    """Returns ``(arch, tensors, meta)``."""
    header, payload, start = _read_raw(path)
    if header.get("kind") != "checkpoint":
        raise FormatError(f"expected a checkpoint container, found kind {header.get('kind')!r}", PREFIX)
    table = header.get("tensors", [])
    _check_payload(payload, sum(int(t["nbytes"]) for t in table), start)
    tensors = {}
    for t in table:
        dtype = np.dtype(t["dtype"])
        count = int(t["nbytes"]) // dtype.itemsize
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=int(t["offset"]))
        if math.prod(t["shape"]) != count:
            raise FormatError(f"tensor {t['name']!r}: shape {t['shape']} does not match {count} elements", start + int(t["offset"]))
        tensors[t["name"]] = arr.reshape(t["shape"]).copy()
    return header["arch"], tensors, header.get("meta", {})


def import_cifar_binary(
    files: Iterable[str | os.PathLike],
    out_path: str | os.PathLike | None = None,
    n_classes: int = 10,
    label_bytes: int = 1,
) -> DatasetContainer:
    """Convert CIFAR binary batches (label byte(s) + 3072 pixel bytes per record).

    With ``label_bytes=2`` (CIFAR-100) the second byte, the fine label, is used.
    """
    record = label_bytes + CIFAR_PIXELS
    images, labels = [], []
    for f in files:
        raw = Path(f).read_bytes()
        if len(raw) % record:
            raise FormatError(
                f"{f}: size {len(raw)} is not a multiple of the {record}-byte record", len(raw) - len(raw) % record
            )
        arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
        labels.append(arr[:, label_bytes - 1].astype(np.int64))
        images.append(arr[:, label_bytes:].reshape(-1, 3, 32, 32))
    y = np.concatenate(labels) if labels else np.zeros(0, dtype=np.int64)
    if y.size and y.max() >= n_classes:
        raise FormatError(f"label {int(y.max())} out of range for {n_classes} classes")
    x = (np.concatenate(images).astype(np.float32) / 255.0) if images else np.zeros((0, 3, 32, 32), np.float32)
    container = DatasetContainer(x, np.eye(n_classes, dtype=np.float32)[y], "hard", None, "real", None)
    if out_path is not None:
        write_container(container, out_path)
    return container


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def sample_fraction(container: DatasetContainer, fraction: float, seed: int = 0) -> DatasetContainer:
    """Stratified sample: ``round(fraction * class_count)`` items from every class."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
    if fraction * container.n_items < container.n_classes:
        raise ConfigError(
            f"fraction {fraction} of {container.n_items} items leaves fewer than one item per class"
        )
    cls = container.class_indices()
    rng = np.random.default_rng(seed)
    picked, per_class = [], []
    for k in range(container.n_classes):
        members = np.flatnonzero(cls == k)
        if members.size == 0:
            continue
        take = _round_half_up(fraction * members.size)
        if take < 1:
            raise ConfigError(f"fraction {fraction} selects no items from class {k} ({members.size} members)")
        picked.append(rng.permutation(members)[:take])
        per_class.append(take)
    idx = rng.permutation(np.concatenate(picked))
    out = container.subset(idx)
    out.ipc = per_class[0] if len(set(per_class)) == 1 else _round_half_up(float(np.mean(per_class)))
    return out


def synthetic_dataset(
    n_per_class: int,
    n_classes: int = 10,
    shape: tuple[int, int, int] = (3, 32, 32),
    seed: int = 0,
    noise: float = 0.15,
    prototype_seed: int = 1234,
    modes: int = 1,
    clutter: float = 0.0,
    max_shift: float = 0.125,
) -> DatasetContainer:
    """A learnable stand-in for real images when none are available offline.

    Each class owns ``modes`` fixed random low-frequency color patterns (drawn
    from ``prototype_seed``, so train and test splits share classes). A sample
    is one of its class's patterns, shifted by up to ``max_shift`` of the image
    size, brightness-scaled, blended with up to ``clutter`` of a pattern from a
    random other class, and noised. The defaults give an easy task; more modes
    and clutter make few-shot generalization hard.
    """
    c, h, w = shape
    proto_rng = np.random.default_rng(prototype_seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    protos = np.zeros((n_classes, modes, c, h, w))
    for k in range(n_classes):
        for m in range(modes):
            for ch in range(c):
                for _ in range(3):
                    fy, fx = proto_rng.uniform(0.5, 3.0, size=2)
                    phase = proto_rng.uniform(0, 2 * np.pi, size=2)
                    protos[k, m, ch] += np.sin(2 * np.pi * fy * yy + phase[0]) * np.cos(2 * np.pi * fx * xx + phase[1])
    protos -= protos.min(axis=(2, 3, 4), keepdims=True)
    protos /= protos.max(axis=(2, 3, 4), keepdims=True)

    rng = np.random.default_rng(seed)
    n = n_per_class * n_classes
    labels = np.repeat(np.arange(n_classes), n_per_class)
    images = np.empty((n, c, h, w), dtype=np.float32)
    sy, sx = int(h * max_shift), int(w * max_shift)
    for j, k in enumerate(labels):
        dy, dx = rng.integers(-sy, sy + 1), rng.integers(-sx, sx + 1)
        img = np.roll(protos[k, rng.integers(modes)], (dy, dx), axis=(1, 2))
        if clutter > 0 and n_classes > 1:
            other = (k + rng.integers(1, n_classes)) % n_classes
            mix = rng.uniform(0.0, clutter)
            distractor = np.roll(protos[other, rng.integers(modes)], tuple(rng.integers(-h, h, size=2)), axis=(1, 2))
            img = (1 - mix) * img + mix * distractor
        img = img * rng.uniform(0.6, 1.0) + rng.uniform(0.0, 0.2)
        img = img + noise * rng.standard_normal(img.shape)
        images[j] = np.clip(img, 0.0, 1.0)
    order = rng.permutation(n)
    return DatasetContainer(images[order], np.eye(n_classes, dtype=np.float32)[labels[order]],
                            "hard", None, "real", n_per_class)


@dataclass
class MetricRow:
    epoch: int
    train_loss: float
    keep_rate: float
    lr: float
    eval_accuracy: float | None = None


@dataclass
class RunRecord:
    config: dict
    preset: str
    seed: int
    metrics: list[MetricRow] = field(default_factory=list)
    final_accuracy: float | None = None
    wall_time: float = 0.0
    role: str = "student"
    droppath_draws: int = 0

    def add(self, row: MetricRow):
        if self.metrics and row.epoch <= self.metrics[-1].epoch:
            raise ValueError(f"metric epochs must increase: {row.epoch} after {self.metrics[-1].epoch}")
        self.metrics.append(row)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        d = dict(d)
        d["metrics"] = [MetricRow(**m) for m in d.get("metrics", [])]
        rec = cls(**d)
        epochs = [m.epoch for m in rec.metrics]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise FormatError("metric rows are not strictly increasing in epoch")
        return rec

    def save(self, path: str | os.PathLike):
        _atomic_write(path, [json.dumps(self.to_dict(), indent=2, sort_keys=True).encode("utf-8")])

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RunRecord":
        return cls.from_dict(json.loads(Path(path).read_text()))


METRIC_FIELDS = ("epoch", "train_loss", "keep_rate", "lr", "eval_accuracy")


def write_metrics_csv(rows: Iterable[MetricRow], path: str | os.PathLike):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRIC_FIELDS)
        for r in rows:
            writer.writerow([r.epoch, repr(r.train_loss), repr(r.keep_rate), repr(r.lr),
                             "" if r.eval_accuracy is None else repr(r.eval_accuracy)])


def read_metrics_csv(path: str | os.PathLike) -> list[MetricRow]:
    with open(path, newline="") as f:
        return [
            MetricRow(int(r["epoch"]), float(r["train_loss"]), float(r["keep_rate"]), float(r["lr"]),
                      float(r["eval_accuracy"]) if r["eval_accuracy"] else None)
            for r in csv.DictReader(f)
        ]
