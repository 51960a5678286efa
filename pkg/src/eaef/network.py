"""Dual-encoder segmentation network with a fusion block at every encoder scale.

Each encoder stage is a stride-2 3x3 conv + ReLU per modality. After stage
``k`` the two streams meet in the fusion block. With EAEF, ``F_final`` is split
in halves and added back to the RGB and thermal streams; the fused feature
handed to the decoder is the sum of the two updated streams. The baseline
skips the block: streams continue untouched and the fused feature is
``F_rgb + F_t``.

The decoder runs three nearest-upsample + 3x3 conv stages from the deepest
fused feature back to input resolution, adding fused skips where scales match.
"""

from __future__ import annotations

import hashlib
import os
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import fusion as fu
from . import tensor as tc
from .data import SampleBatch
from .io import load_tensor, save_tensor
from .tensor import ConvParams, DimensionError, Tape, Tensor

ABLATIONS = ("baseline", "aib", "acb", "full")
INPUT_CENTER = 0.5


class NumericError(RuntimeError):
    """Non-finite loss. ``fusion_states`` holds the last forward's fusion points."""

    def __init__(self, message: str, fusion_points=()):
        super().__init__(message)
        self.fusion_points = list(fusion_points)


@dataclass(frozen=True)
class ModelConfig:
    ablation: str = "full"
    stages: tuple = (8, 16, 32, 64, 64)
    num_classes: int = 4
    rgb_channels: int = 3
    thermal_channels: int = 1
    softmax_axis: str = "spatial"
    merge_mode: str = "per_channel"
    interaction: bool = True

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")
        object.__setattr__(self, "stages", tuple(int(s) for s in self.stages))
        if len(self.stages) < 3 or min(self.stages) < 1:
            raise ValueError("need at least three positive encoder stages")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        self.fusion_options()

    def fusion_options(self) -> fu.FusionOptions | None:
        if self.ablation == "baseline":
            return None
        return fu.FusionOptions(self.ablation, self.softmax_axis, self.merge_mode, self.interaction)

    def decoder_plan(self) -> list[tuple[int, int]]:
        """(upsample factor, skip scale index or -1) for the three decoder stages."""
        s = len(self.stages)
        exps = [s // 3 + (1 if i < s % 3 else 0) for i in range(3)]
        plan, idx = [], s - 1
        for e in exps:
            idx -= e
            plan.append((2 ** e, idx))
        return plan


@dataclass
class LossWeights:
    dice_weight: float = 0.5
    ce_weight: float = 0.5

    def __post_init__(self):
        if self.dice_weight < 0 or self.ce_weight < 0 or self.dice_weight + self.ce_weight <= 0:
            raise ValueError("loss weights must be non-negative with positive sum")


@dataclass
class FusionPoint:
    F_rgb: Tensor
    F_t: Tensor
    fused: Tensor
    rgb_next: Tensor
    t_next: Tensor
    state: fu.FusionState | None = None


@dataclass
class ForwardResult:
    logits: Tensor
    points: list = field(default_factory=list)


class Model:
    def __init__(self, config: ModelConfig, enc_rgb, enc_t, fusions, decoder):
        self.config = config
        self.enc_rgb: list[ConvParams] = enc_rgb
        self.enc_t: list[ConvParams] = enc_t
        self.fusions: list[fu.EaefParams | None] = fusions
        self.decoder: list[ConvParams] = decoder

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "Model":
        # Separate streams so every ablation shares encoder/decoder init for a seed.
        enc_rng = np.random.default_rng([seed, 1])
        fus_rng = np.random.default_rng([seed, 2])
        dec_rng = np.random.default_rng([seed, 3])
        enc_rgb, enc_t = [], []
        cin_r, cin_t = config.rgb_channels, config.thermal_channels
        for c in config.stages:
            enc_rgb.append(tc.init_conv(enc_rng, cin_r, c, 3))
            enc_t.append(tc.init_conv(enc_rng, cin_t, c, 3))
            cin_r = cin_t = c
        opts = config.fusion_options()
        fusions = [None if opts is None else fu.EaefParams.init(c, fus_rng, opts) for c in config.stages]
        decoder, cin = [], config.stages[-1]
        for _, skip in config.decoder_plan():
            cout = config.stages[skip] if skip >= 0 else config.num_classes
            decoder.append(tc.init_conv(dec_rng, cin, cout, 3))
            cin = cout
        return cls(config, enc_rgb, enc_t, fusions, decoder)

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        out: OrderedDict[str, Tensor] = OrderedDict()
        for prefix, convs in (("enc_rgb", self.enc_rgb), ("enc_t", self.enc_t)):
            for i, p in enumerate(convs):
                out[f"{prefix}.{i}.kernel"] = p.kernel
                out[f"{prefix}.{i}.bias"] = p.bias
        for i, fp in enumerate(self.fusions):
            if fp is not None:
                for name, t in fp.named_parameters().items():
                    out[f"fusion.{i}.{name}"] = t
        for i, p in enumerate(self.decoder):
            out[f"dec.{i}.kernel"] = p.kernel
            out[f"dec.{i}.bias"] = p.bias
        return out

    def parameter_count(self) -> int:
        return sum(t.size for t in self.named_parameters().values())

    def fusion_parameter_count(self) -> int:
        return sum(fp.parameter_count() for fp in self.fusions if fp is not None)

    def forward(self, rgb: Tensor, thermal: Tensor, tape: Tape | None = None) -> ForwardResult:
        cfg = self.config
        n, _, h, w = rgb.shape
        scale = 2 ** len(cfg.stages)
        if h % scale or w % scale:
            raise DimensionError(f"input {h}x{w} not divisible by {scale}")
        if thermal.shape[0] != n or thermal.shape[2:] != (h, w):
            raise DimensionError(f"rgb {rgb.shape} vs thermal {thermal.shape}")
        opts = cfg.fusion_options()
        # inputs live in [0, 1]; centering keeps first-stage units from dying
        r = tc.scalar_add(rgb, -INPUT_CENTER, tape)
        t = tc.scalar_add(thermal, -INPUT_CENTER, tape)
        points = []
        for k in range(len(cfg.stages)):
            r = tc.relu(tc.conv2d(r, self.enc_rgb[k], stride=2, tape=tape), tape)
            t = tc.relu(tc.conv2d(t, self.enc_t[k], stride=2, tape=tape), tape)
            if opts is None:
                fused = tc.add(r, t, tape)
                points.append(FusionPoint(r, t, fused, r, t))
                continue
            state = fu.eaef_forward(r, t, self.fusions[k], opts, tape=tape if tape is not None else Tape())
            fr, ft = tc.split_channels(state.F_final, tape)
            r_next, t_next = tc.add(r, fr, tape), tc.add(t, ft, tape)
            fused = tc.add(r_next, t_next, tape)
            points.append(FusionPoint(r, t, fused, r_next, t_next, state))
            r, t = r_next, t_next

        x = points[-1].fused
        plan = cfg.decoder_plan()
        for j, ((factor, skip), conv) in enumerate(zip(plan, self.decoder)):
            x = tc.conv2d(tc.upsample_nearest(x, factor, tape), conv, tape=tape)
            if skip >= 0:
                x = tc.add(x, points[skip].fused, tape)
            if j < len(plan) - 1:
                x = tc.relu(x, tape)
        return ForwardResult(x, points)

    def mirrored(self) -> "Model":
        """Copy of the model whose thermal side equals its RGB side.

        Requires ``rgb_channels == thermal_channels``.
        """
        cfg = self.config
        if cfg.rgb_channels != cfg.thermal_channels:
            raise DimensionError("mirroring needs equal input channel counts")

        def clone(p: ConvParams) -> ConvParams:
            return ConvParams(Tensor(p.kernel.data.copy()), Tensor(p.bias.data.copy()), p.mode)

        return Model(cfg, [clone(p) for p in self.enc_rgb], [clone(p) for p in self.enc_rgb],
                     [None if fp is None else fu.mirror_params(fp) for fp in self.fusions],
                     [clone(p) for p in self.decoder])


def forward(model: Model, batch: SampleBatch, tape: Tape | None = None) -> Tensor:
    return model.forward(batch.rgb, batch.thermal, tape).logits


def predict(model: Model, batch: SampleBatch, chunk: int = 16) -> np.ndarray:
    preds = []
    for s in range(0, len(batch), chunk):
        sub = batch.subset(slice(s, s + chunk))
        preds.append(forward(model, sub).data.argmax(axis=1))
    return np.concatenate(preds)


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------

def _check_labels(logits: Tensor, labels: np.ndarray) -> int:
    n, k, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise DimensionError(f"labels {labels.shape} vs logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels outside [0, {k})")
    return k


def _probs(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.float64)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    return np.moveaxis(np.eye(k)[labels], -1, 1)


def dice_loss(logits: Tensor, labels: np.ndarray, eps: float = 1.0, tape: Tape | None = None) -> Tensor:
    """``1 - mean_k (2|p.y| + eps) / (|p| + |y| + eps)`` over classes present in ``labels``."""
    k = _check_labels(logits, labels)
    p = _probs(logits.data)
    y = _one_hot(labels, k)
    axes = (0, 2, 3)
    inter = (p * y).sum(axis=axes)
    union = p.sum(axis=axes) + y.sum(axis=axes)
    present = y.sum(axis=axes) > 0
    m = present.sum()
    dice = (2 * inter + eps) / (union + eps)
    loss = 1.0 - dice[present].mean()

    def backward(g):
        coef = np.where(present, -1.0 / m, 0.0)
        dd_dp = (2 * y * (union + eps)[None, :, None, None]
                 - (2 * inter + eps)[None, :, None, None]) / ((union + eps) ** 2)[None, :, None, None]
        gp = float(g) * coef[None, :, None, None] * dd_dp
        gz = p * (gp - (gp * p).sum(axis=1, keepdims=True))
        return (gz.astype(logits.dtype),)

    return tc._result(np.asarray(loss, dtype=logits.dtype), tape, (logits,), backward)


def soft_cross_entropy(logits: Tensor, labels: np.ndarray, smoothing: float = 0.1,
                       tape: Tape | None = None) -> Tensor:
    """Cross-entropy against targets with ``1 - s`` on the true class and ``s / (K - 1)`` elsewhere."""
    k = _check_labels(logits, labels)
    z = logits.data.astype(np.float64)
    zs = z - z.max(axis=1, keepdims=True)
    logp = zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
    y = _one_hot(labels, k)
    q = y * (1 - smoothing) + (1 - y) * (smoothing / (k - 1))
    pixels = labels.size
    loss = -(q * logp).sum() / pixels

    def backward(g):
        return ((float(g) * (np.exp(logp) - q) / pixels).astype(logits.dtype),)

    return tc._result(np.asarray(loss, dtype=logits.dtype), tape, (logits,), backward)


def segmentation_loss(logits: Tensor, labels: np.ndarray, weights: LossWeights = LossWeights(),
                      smoothing: float = 0.1, tape: Tape | None = None) -> tuple[Tensor, Tensor, Tensor]:
    d = dice_loss(logits, labels, tape=tape)
    ce = soft_cross_entropy(logits, labels, smoothing, tape=tape)
    total = tc.add(tc.scalar_mul(d, weights.dice_weight, tape), tc.scalar_mul(ce, weights.ce_weight, tape), tape)
    return total, d, ce


# --------------------------------------------------------------------------
# Optimisation
# --------------------------------------------------------------------------

class SGD:
    """SGD with heavy-ball momentum and L2 weight decay folded into the gradient."""

    def __init__(self, params: "OrderedDict[str, Tensor]", lr: float = 0.02, momentum: float = 0.9,
                 weight_decay: float = 5e-4):
        if lr < 0 or momentum < 0 or weight_decay < 0:
            raise ValueError("lr, momentum and weight_decay must be non-negative")
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: dict[str, np.ndarray] = {}

    def step(self, grads) -> None:
        for name, p in self.params.items():
            g = grads[name] if name in grads else np.zeros_like(p.data)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                buf = self.buffers.get(name)
                buf = g.copy() if buf is None else self.momentum * buf + g
                self.buffers[name] = buf
                g = buf
            p.data -= (self.lr * g).astype(p.dtype)


def exponential_lr(lr0: float, gamma: float, epoch: int) -> float:
    return lr0 * gamma ** epoch


@dataclass
class StepResult:
    loss: float
    dice: float
    ce: float


def train_step(model: Model, batch: SampleBatch, opt: SGD, weights: LossWeights = LossWeights(),
               smoothing: float = 0.1) -> StepResult:
    tape = Tape()
    result = model.forward(batch.rgb, batch.thermal, tape)
    total, d, ce = segmentation_loss(result.logits, batch.labels, weights, smoothing, tape)
    loss = float(total.data)
    if not np.isfinite(loss) or not np.isfinite(result.logits.data).all():
        raise NumericError(f"non-finite loss {loss}", result.points)
    grads = tape.backward(total)
    opt.step({name: grads[t] for name, t in opt.params.items()})
    return StepResult(loss, float(d.data), float(ce.data))


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def save_checkpoint(model: Model, out_dir, cfg_hash: str, epoch: int, lr: float) -> None:
    os.makedirs(out_dir, exist_ok=True)
    lines = [f"config_hash={cfg_hash}", f"epoch={epoch}", f"lr={lr!r}"]
    for key, value in asdict(model.config).items():
        if isinstance(value, (tuple, list)):
            value = ",".join(map(str, value))
        lines.append(f"model.{key}={value}")
    for name, t in model.named_parameters().items():
        fname = f"{name}.eaet"
        save_tensor(os.path.join(out_dir, fname), t)
        lines.append(f"param {name} {fname} {'x'.join(map(str, t.shape))}")
    with open(os.path.join(out_dir, "manifest.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")


def read_manifest(ckpt_dir) -> tuple[dict, list[tuple[str, str, tuple]]]:
    meta, params = {}, []
    with open(os.path.join(ckpt_dir, "manifest.txt")) as f:
        for line in f.read().splitlines():
            if line.startswith("param "):
                _, name, fname, shape = line.split(" ")
                params.append((name, fname, tuple(int(s) for s in shape.split("x") if s)))
            elif "=" in line:
                key, value = line.split("=", 1)
                meta[key] = value
    return meta, params


def load_checkpoint(ckpt_dir, model: Model) -> dict:
    """Overwrite ``model``'s parameters in place; returns the manifest metadata."""
    meta, params = read_manifest(ckpt_dir)
    named = model.named_parameters()
    if set(named) != {p[0] for p in params}:
        raise ValueError("checkpoint parameters do not match the model")
    for name, fname, shape in params:
        t = load_tensor(os.path.join(ckpt_dir, fname))
        if t.shape != named[name].shape:
            raise DimensionError(f"{name}: checkpoint {t.shape} vs model {named[name].shape}")
        named[name].data[...] = t.data
    return meta
