"""Flat ``key = value`` run configuration with typed validation.

Blank lines and ``#`` comments are ignored. Tuples are comma separated,
booleans are ``true``/``false``. Unknown keys are an error so that typos never
pass silently.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import get_type_hints

import numpy as np

from . import fusion as fu
from .data import VISIBILITIES, SceneSpec
from .network import LossWeights, ModelConfig

U64_MAX = 2 ** 64 - 1
MODALITIES = ("none", "rgb", "thermal")
CASES_MLP = ("identity", "random")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # optimisation
    epochs: int = 30
    batch_size: int = 8
    lr: float = 0.02
    gamma: float = 0.95
    momentum: float = 0.9
    weight_decay: float = 5e-4
    dice_weight: float = 0.5
    ce_weight: float = 0.5
    smoothing: float = 0.1
    # model
    ablation: str = "full"
    stages: tuple[int, ...] = (8, 16, 32, 64, 64)
    softmax_axis: str = "spatial"
    merge_mode: str = "per_channel"
    interaction: bool = True
    # data
    height: int = 32
    width: int = 32
    num_classes: int = 4
    noise: float = 0.05
    min_objects: int = 2
    max_objects: int = 4
    min_radius: int = 3
    max_radius: int = 7
    visibility_weights: tuple[float, ...] = (0.4, 0.25, 0.25, 0.1)
    train_samples: int = 256
    val_samples: int = 64
    eval_samples: int = 64
    zero_modality: str = "none"
    exclude_background: bool = False
    # commands
    out_dir: str = "runs"
    checkpoint: str = ""
    ablate_seeds: int = 5
    gradcheck_seeds: int = 20
    gradcheck_tol: float = 1e-3
    gradcheck_op_tol: float = 1e-4
    gradcheck_groups: tuple[str, ...] = ("all",)
    gradcheck_channels: int = 4
    gradcheck_size: int = 5
    bench_iterations: int = 100
    cases_mlp: str = "identity"
    cases_symmetric: bool = False
    cases_rgb: str = ""
    cases_thermal: str = ""

    def __post_init__(self):
        _coerce_all(self)
        self.validate()

    def validate(self) -> None:
        if not 0 <= self.seed <= U64_MAX:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        _check(self.epochs >= 0, "epochs must be >= 0")
        _check(self.batch_size >= 1, "batch_size must be >= 1")
        _check(self.lr > 0, "lr must be > 0")
        _check(0 < self.gamma <= 1, "gamma must be in (0, 1]")
        _check(0 <= self.momentum < 1, "momentum must be in [0, 1)")
        _check(self.weight_decay >= 0, "weight_decay must be >= 0")
        _check(0 <= self.smoothing < 1, "smoothing must be in [0, 1)")
        _check(self.train_samples >= 1 and self.val_samples >= 1 and self.eval_samples >= 1,
               "sample counts must be >= 1")
        _check(self.zero_modality in MODALITIES, f"zero_modality must be one of {MODALITIES}")
        _check(self.cases_mlp in CASES_MLP, f"cases_mlp must be one of {CASES_MLP}")
        _check(self.ablate_seeds >= 1, "ablate_seeds must be >= 1")
        _check(self.gradcheck_seeds >= 1, "gradcheck_seeds must be >= 1")
        _check(self.gradcheck_tol > 0 and self.gradcheck_op_tol > 0, "tolerances must be > 0")
        _check(self.gradcheck_channels >= 2 and self.gradcheck_channels % 2 == 0,
               "gradcheck_channels must be even and >= 2")
        _check(self.gradcheck_size >= 1, "gradcheck_size must be >= 1")
        _check(self.bench_iterations >= 1, "bench_iterations must be >= 1")
        scale = 2 ** len(self.stages)
        _check(self.height % scale == 0 and self.width % scale == 0,
               f"height and width must be divisible by {scale}")
        _check(len(self.visibility_weights) == len(VISIBILITIES),
               f"visibility_weights needs {len(VISIBILITIES)} entries")
        try:
            LossWeights(self.dice_weight, self.ce_weight)
            self.model_config()
            self.scene_spec(0)
        except ValueError as e:
            raise ConfigError(str(e)) from None

    # ------------------------------------------------------------------
    def model_config(self, ablation: str | None = None) -> ModelConfig:
        return ModelConfig(ablation=ablation or self.ablation, stages=self.stages,
                           num_classes=self.num_classes, softmax_axis=self.softmax_axis,
                           merge_mode=self.merge_mode, interaction=self.interaction)

    def scene_spec(self, seed: int) -> SceneSpec:
        return SceneSpec(height=self.height, width=self.width, num_classes=self.num_classes,
                         noise=self.noise, seed=seed, min_objects=self.min_objects,
                         max_objects=self.max_objects, min_radius=self.min_radius,
                         max_radius=self.max_radius, visibility_weights=self.visibility_weights)

    def split_seed(self, split: str, seed: int | None = None) -> int:
        """Data seed for ``train``, ``val`` or ``eval``, derived from the run seed."""
        k = {"train": 1, "val": 2, "eval": 3}[split]
        s = self.seed if seed is None else seed
        return int(np.random.SeedSequence([s, k]).generate_state(1, dtype=np.uint32)[0])

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.dice_weight, self.ce_weight)

    def fusion_options(self) -> fu.FusionOptions:
        return fu.FusionOptions(softmax_axis=self.softmax_axis, merge_mode=self.merge_mode,
                                interaction=self.interaction)

    def model_hash(self) -> str:
        """Hash of the keys that fix the parameter layout; checkpoints carry it."""
        keys = ("ablation", "stages", "num_classes", "softmax_axis", "merge_mode", "interaction")
        text = "\n".join(f"{k} = {_format(getattr(self, k))}" for k in keys)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # ------------------------------------------------------------------
    def dumps(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        values: dict[str, str] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            values[key] = value
        hints = get_type_hints(cls)
        kwargs = {}
        for key, value in values.items():
            try:
                kwargs[key] = _parse(hints[key], value)
            except ValueError as e:
                raise ConfigError(f"{key}: {e}") from None
        return cls(**kwargs)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
        return cls.loads(text)


def _check(ok: bool, message: str) -> None:
    if not ok:
        raise ConfigError(message)


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_bool(text: str) -> bool:
    t = text.lower()
    if t in ("true", "1", "yes"):
        return True
    if t in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_scalar(tp, text: str):
    if tp is bool:
        return _parse_bool(text)
    if tp is int:
        return int(text, 10)
    if tp is float:
        return float(text)
    return text


def _parse(tp, text: str):
    if getattr(tp, "__origin__", None) is tuple:
        inner = tp.__args__[0]
        items = [s.strip() for s in text.split(",")] if text.strip() else []
        return tuple(_parse_scalar(inner, s) for s in items)
    return _parse_scalar(tp, text)


def _coerce_all(cfg: RunConfig) -> None:
    # Keyword construction (not only file parsing) gets the same types.
    hints = get_type_hints(type(cfg))
    for f in fields(cfg):
        tp, v = hints[f.name], getattr(cfg, f.name)
        try:
            if getattr(tp, "__origin__", None) is tuple:
                inner = tp.__args__[0]
                v = tuple(v) if not isinstance(v, str) else _parse(tp, v)
                if inner is float:
                    v = tuple(float(x) for x in v)
                elif inner is int:
                    v = tuple(_as_int(x) for x in v)
                else:
                    v = tuple(str(x) for x in v)
            elif tp is bool:
                if not isinstance(v, (bool, np.bool_)):
                    raise ValueError(f"expected a boolean, got {v!r}")
                v = bool(v)
            elif tp is int:
                v = _as_int(v)
            elif tp is float:
                if isinstance(v, bool):
                    raise ValueError(f"expected a number, got {v!r}")
                v = float(v)
            else:
                v = str(v)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{f.name}: {e}") from None
        object.__setattr__(cfg, f.name, v)


def _as_int(v) -> int:
    if isinstance(v, bool) or (isinstance(v, float) and not v.is_integer()):
        raise ValueError(f"expected an integer, got {v!r}")
    return int(v)

