"""Synthetic paired RGB/thermal scenes and segmentation metrics.

Objects carry a visibility flag: ``both``, ``rgb_only``, ``thermal_only`` or
``neither``. A flag hides the object from the named modality, which then shows
background at those pixels. ``neither`` objects are labelled but invisible, so
they cap the achievable IoU.
"""

from __future__ import annotations

import csv
import io as _io
import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .io import load_tensor, read_pgm, save_tensor, write_pgm, write_ppm
from .tensor import Tensor

VISIBILITIES = ("both", "rgb_only", "thermal_only", "neither")
SHAPES = ("rectangle", "disc")

_BASE_COLORS = np.array([
    [0.90, 0.15, 0.15],
    [0.15, 0.85, 0.20],
    [0.20, 0.30, 0.95],
    [0.90, 0.85, 0.15],
    [0.85, 0.20, 0.85],
    [0.15, 0.85, 0.85],
])
THERMAL_BACKGROUND = 0.15


class SceneSpecError(ValueError):
    pass


@dataclass(frozen=True)
class ObjectSpec:
    """A rectangle (half extents ``ry, rx``) or a disc (radius ``ry``) centred at ``(cy, cx)``."""

    shape: str
    class_id: int
    visibility: str
    cy: int
    cx: int
    ry: int
    rx: int = -1

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise SceneSpecError(f"unknown shape {self.shape!r}")
        if self.visibility not in VISIBILITIES:
            raise SceneSpecError(f"unknown visibility {self.visibility!r}")
        if self.rx < 0:
            object.__setattr__(self, "rx", self.ry)

    def mask(self, height: int, width: int) -> np.ndarray:
        yy, xx = np.mgrid[:height, :width]
        if self.shape == "disc":
            return (yy - self.cy) ** 2 + (xx - self.cx) ** 2 <= self.ry ** 2
        return (np.abs(yy - self.cy) <= self.ry) & (np.abs(xx - self.cx) <= self.rx)

    def fits(self, height: int, width: int) -> bool:
        return (self.cy - self.ry >= 0 and self.cy + self.ry < height
                and self.cx - self.rx >= 0 and self.cx + self.rx < width)


@dataclass(frozen=True)
class SceneSpec:
    """Scene recipe.

    With ``objects`` set, every sample draws exactly those objects (only the
    noise and background jitter differ). Otherwise each sample draws between
    ``min_objects`` and ``max_objects`` random objects whose visibility is
    sampled from ``visibility_weights`` (ordered as ``VISIBILITIES``).
    """

    height: int = 32
    width: int = 32
    num_classes: int = 4
    noise: float = 0.05
    seed: int = 0
    objects: tuple = ()
    min_objects: int = 2
    max_objects: int = 4
    min_radius: int = 3
    max_radius: int = 7
    visibility_weights: tuple = (0.4, 0.25, 0.25, 0.1)

    def __post_init__(self):
        if self.num_classes < 2:
            raise SceneSpecError("need at least background plus one class")
        if self.noise < 0:
            raise SceneSpecError("noise must be non-negative")
        if len(self.visibility_weights) != len(VISIBILITIES) or min(self.visibility_weights) < 0 \
                or sum(self.visibility_weights) <= 0:
            raise SceneSpecError("visibility_weights needs four non-negative entries")
        if not 0 <= self.min_objects <= self.max_objects:
            raise SceneSpecError("bad object count range")
        if not 1 <= self.min_radius <= self.max_radius:
            raise SceneSpecError("bad radius range")
        if 2 * self.max_radius + 1 > min(self.height, self.width):
            raise SceneSpecError("max_radius does not fit the canvas")
        objs = tuple(o if isinstance(o, ObjectSpec) else ObjectSpec(**o) for o in self.objects)
        object.__setattr__(self, "objects", objs)
        object.__setattr__(self, "visibility_weights", tuple(float(w) for w in self.visibility_weights))
        for o in objs:
            if not o.fits(self.height, self.width):
                raise SceneSpecError(f"object {o} falls outside the {self.height}x{self.width} canvas")
            if not 1 <= o.class_id < self.num_classes:
                raise SceneSpecError(f"object class {o.class_id} not in [1, {self.num_classes})")

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        d = json.loads(text)
        d["objects"] = tuple(ObjectSpec(**o) for o in d.get("objects", ()))
        d["visibility_weights"] = tuple(d["visibility_weights"])
        return cls(**d)


@dataclass
class SampleBatch:
    rgb: Tensor
    thermal: Tensor
    labels: np.ndarray

    def __post_init__(self):
        n, _, h, w = self.rgb.shape
        if self.thermal.shape[0] != n or self.thermal.shape[2:] != (h, w) or self.labels.shape != (n, h, w):
            raise ValueError("rgb, thermal and labels disagree on N/H/W")

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, idx) -> "SampleBatch":
        return SampleBatch(Tensor(self.rgb.data[idx]), Tensor(self.thermal.data[idx]), self.labels[idx])

    def zero_modality(self, which: str | None) -> "SampleBatch":
        if which in (None, "", "none"):
            return self
        if which == "rgb":
            return SampleBatch(Tensor(np.zeros_like(self.rgb.data)), self.thermal, self.labels)
        if which == "thermal":
            return SampleBatch(self.rgb, Tensor(np.zeros_like(self.thermal.data)), self.labels)
        raise ValueError(f"unknown modality {which!r}")


def class_palette(num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """RGB colour and thermal level per class; row 0 is unused (background)."""
    k = num_classes - 1
    colors = np.zeros((num_classes, 3))
    if k <= len(_BASE_COLORS):
        colors[1:] = _BASE_COLORS[:k]
    else:
        colors[1:] = np.random.default_rng(1234).uniform(0.1, 0.95, size=(k, 3))
        colors[1:len(_BASE_COLORS) + 1] = _BASE_COLORS
    levels = np.zeros(num_classes)
    levels[1:] = np.linspace(0.95, 0.45, k) if k > 1 else 0.95
    return colors, levels


def _random_object(rng, spec: SceneSpec) -> ObjectSpec:
    shape = SHAPES[rng.integers(len(SHAPES))]
    cls = int(rng.integers(1, spec.num_classes))
    w = np.asarray(spec.visibility_weights)
    vis = VISIBILITIES[rng.choice(len(VISIBILITIES), p=w / w.sum())]
    ry = int(rng.integers(spec.min_radius, spec.max_radius + 1))
    rx = ry if shape == "disc" else int(rng.integers(spec.min_radius, spec.max_radius + 1))
    cy = int(rng.integers(ry, spec.height - ry))
    cx = int(rng.integers(rx, spec.width - rx))
    return ObjectSpec(shape, cls, vis, cy, cx, ry, rx)


def generate(spec: SceneSpec, n: int) -> SampleBatch:
    """Draw ``n`` samples; identical ``spec`` (including seed) gives identical output."""
    rng = np.random.default_rng(spec.seed)
    H, W = spec.height, spec.width
    colors, levels = class_palette(spec.num_classes)
    rgb = np.empty((n, 3, H, W))
    thermal = np.empty((n, 1, H, W))
    labels = np.zeros((n, H, W), dtype=np.int64)
    for i in range(n):
        bg = rng.uniform(0.3, 0.55) + rng.uniform(-0.05, 0.05, size=3)
        rgb[i] = bg[:, None, None]
        tb = THERMAL_BACKGROUND + rng.uniform(-0.05, 0.05)
        thermal[i] = tb
        if spec.objects:
            objs = spec.objects
        else:
            count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
            objs = [_random_object(rng, spec) for _ in range(count)]
        for o in objs:
            m = o.mask(H, W)
            labels[i][m] = o.class_id
            if o.visibility in ("both", "rgb_only"):
                rgb[i][:, m] = colors[o.class_id][:, None]
            else:
                rgb[i][:, m] = bg[:, None]
            if o.visibility in ("both", "thermal_only"):
                thermal[i][:, m] = levels[o.class_id]
            else:
                thermal[i][:, m] = tb
        if spec.noise > 0:
            rgb[i] += rng.normal(0, spec.noise, size=rgb[i].shape)
            thermal[i] += rng.normal(0, spec.noise, size=thermal[i].shape)
    np.clip(rgb, 0, 1, out=rgb)
    np.clip(thermal, 0, 1, out=thermal)
    return SampleBatch(Tensor(rgb.astype(np.float32)), Tensor(thermal.astype(np.float32)), labels)


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------

@dataclass
class MetricReport:
    confusion: np.ndarray  # rows truth, columns prediction
    acc: np.ndarray
    iou: np.ndarray
    evaluated: np.ndarray  # classes entering the means
    macc: float
    miou: float

    @property
    def num_classes(self) -> int:
        return self.confusion.shape[0]

    def to_csv(self, class_names=None) -> str:
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "acc", "iou"])
        for k in range(self.num_classes):
            name = class_names[k] if class_names else str(k)
            w.writerow([name, _fmt(self.acc[k]), _fmt(self.iou[k])])
        w.writerow(["mean", _fmt(self.macc), _fmt(self.miou)])
        return buf.getvalue()

    def table(self, class_names=None) -> str:
        names = class_names or [f"class{k}" for k in range(self.num_classes)]
        head = "".join(f"{n:>16}" for n in names)
        sub = "".join(f"{'Acc':>8}{'IoU':>8}" for _ in names)
        row = "".join(f"{_pct(a):>8}{_pct(i):>8}" for a, i in zip(self.acc, self.iou))
        return f"{head}{'mAcc':>8}{'mIoU':>8}\n{sub}\n{row}{_pct(self.macc):>8}{_pct(self.miou):>8}"


def _fmt(v: float) -> str:
    return "nan" if np.isnan(v) else f"{v:.6f}"


def _pct(v: float) -> str:
    return "-" if np.isnan(v) else f"{100 * v:.1f}"


def confusion_matrix(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> np.ndarray:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"pred {pred.shape} vs truth {truth.shape}")
    for name, a in (("pred", pred), ("truth", truth)):
        if a.size and (a.min() < 0 or a.max() >= num_classes):
            raise ValueError(f"{name} labels outside [0, {num_classes})")
    idx = truth.astype(np.int64).ravel() * num_classes + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def metrics_from_confusion(cm: np.ndarray, exclude=()) -> MetricReport:
    """Per-class recall and IoU. Recall is NaN for classes absent from truth;
    IoU is NaN for classes absent from both; NaNs and ``exclude`` stay out of the means."""
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm).astype(np.float64)
    fn = cm.sum(axis=1) - tp
    fp = cm.sum(axis=0) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = np.where(tp + fn > 0, tp / (tp + fn), np.nan)
        iou = np.where(tp + fp + fn > 0, tp / (tp + fp + fn), np.nan)
    keep = np.ones(cm.shape[0], dtype=bool)
    keep[list(exclude)] = False
    evaluated = np.flatnonzero(keep & ~np.isnan(iou))
    a = acc[evaluated]
    a = a[~np.isnan(a)]
    macc = float(a.mean()) if a.size else float("nan")
    miou = float(iou[evaluated].mean()) if evaluated.size else float("nan")
    return MetricReport(cm, acc, iou, evaluated, macc, miou)


def compute_metrics(pred, truth, num_classes: int, exclude=()) -> MetricReport:
    return metrics_from_confusion(confusion_matrix(pred, truth, num_classes), exclude)


# --------------------------------------------------------------------------
# Dataset directories
# --------------------------------------------------------------------------

def save_dataset(batch: SampleBatch, spec: SceneSpec, out_dir, previews: bool = False) -> None:
    os.makedirs(out_dir, exist_ok=True)
    ids = []
    for i in range(len(batch)):
        sid = f"sample_{i:05d}"
        ids.append(sid)
        save_tensor(os.path.join(out_dir, f"{sid}_rgb.eaet"), batch.rgb.data[i:i + 1])
        save_tensor(os.path.join(out_dir, f"{sid}_thermal.eaet"), batch.thermal.data[i:i + 1])
        write_pgm(os.path.join(out_dir, f"{sid}_labels.pgm"), batch.labels[i].astype(np.uint8))
        if previews:
            img = np.round(np.transpose(batch.rgb.data[i], (1, 2, 0)) * 255).astype(np.uint8)
            write_ppm(os.path.join(out_dir, f"{sid}_rgb.ppm"), img)
    with open(os.path.join(out_dir, "index.txt"), "w") as f:
        f.write(f"# scene {spec.to_json()}\n")
        f.write("\n".join(ids) + "\n")


def load_dataset(in_dir) -> tuple[SampleBatch, SceneSpec]:
    with open(os.path.join(in_dir, "index.txt")) as f:
        lines = f.read().splitlines()
    if not lines or not lines[0].startswith("# scene "):
        raise ValueError(f"{in_dir}: index.txt has no scene header")
    spec = SceneSpec.from_json(lines[0][len("# scene "):])
    ids = [ln for ln in lines[1:] if ln.strip()]
    rgb = np.concatenate([load_tensor(os.path.join(in_dir, f"{s}_rgb.eaet")).data for s in ids])
    th = np.concatenate([load_tensor(os.path.join(in_dir, f"{s}_thermal.eaet")).data for s in ids])
    labels = np.stack([read_pgm(os.path.join(in_dir, f"{s}_labels.pgm")) for s in ids]).astype(np.int64)
    return SampleBatch(Tensor(rgb), Tensor(th), labels), spec
