"""Explicit attention-enhanced fusion of an RGB and a thermal feature map.

Pipeline for features ``F_rgb, F_t`` of shape ``(N, c, H, W)``:

1. channel weights ``R = MLP_rgb(GAP(F_rgb))``, ``T = MLP_t(GAP(F_t))``;
2. interaction gate ``g = sigmoid(c * R * T)`` and its complement ``1 - g``;
3. interaction branch: ``F' = g (*) F`` per modality, then the concatenation is
   rescaled by ``sigmoid(MLP(GMP(dwconv(F'))))`` and split back;
4. complement branch: ``(1 - g) (*) F`` per modality;
5. branch sum per modality;
6. ``F_final = F_bar * softmax(conv1x1(F_bar))`` on the concatenation.

``(*)`` is channel-wise scaling. The sign of ``R * T`` decides which branch
carries a channel, see :class:`CaseLabel`.
"""

from __future__ import annotations

import enum
import os
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .io import normalize_u8, save_tensor, write_pgm
from .tensor import ConvParams, DenseLayerParams, DimensionError, Tape, Tensor

BRANCHES = ("full", "aib", "acb")
SOFTMAX_AXES = ("spatial", "channel")
MERGE_MODES = ("per_channel", "shared")


class CaseLabel(enum.IntEnum):
    """Sign pattern of ``(R, T)`` for one channel. Zero counts as non-negative."""

    BOTH_HIGH = 0
    ONLY_T = 1
    ONLY_R = 2
    BOTH_LOW = 3


def reduction_ratio(c: int, max_ratio: int = 16) -> int:
    """16 for wide maps, shrinking to 1 for narrow ones so the hidden layer stays >= 16 wide."""
    return int(min(max_ratio, max(1, c // 16)))


def hidden_width(width: int, c: int, max_ratio: int = 16) -> int:
    return max(1, width // reduction_ratio(c, max_ratio))


@dataclass(frozen=True)
class FusionOptions:
    branches: str = "full"
    softmax_axis: str = "spatial"
    merge_mode: str = "per_channel"
    interaction: bool = True

    def __post_init__(self):
        if self.branches not in BRANCHES:
            raise ValueError(f"branches must be one of {BRANCHES}")
        if self.softmax_axis not in SOFTMAX_AXES:
            raise ValueError(f"softmax_axis must be one of {SOFTMAX_AXES}")
        if self.merge_mode not in MERGE_MODES:
            raise ValueError(f"merge_mode must be one of {MERGE_MODES}")

    @property
    def uses_interaction(self) -> bool:
        return self.interaction and self.branches in ("full", "aib")


@dataclass
class EaefParams:
    channels: int
    mlp_rgb: list[DenseLayerParams]
    mlp_t: list[DenseLayerParams]
    merge_conv: ConvParams
    interaction_dw: ConvParams | None = None
    interaction_mlp: list[DenseLayerParams] | None = None

    def __post_init__(self):
        c = self.channels
        if c < 1:
            raise DimensionError("channel count must be positive")
        for name, mlp in (("mlp_rgb", self.mlp_rgb), ("mlp_t", self.mlp_t)):
            _check_mlp(mlp, c, name)
        if (self.interaction_dw is None) != (self.interaction_mlp is None):
            raise DimensionError("interaction_dw and interaction_mlp come together")
        if self.interaction_dw is not None:
            if self.interaction_dw.mode != "depthwise" or self.interaction_dw.out_channels != 2 * c:
                raise DimensionError("interaction_dw must be depthwise over 2c channels")
            _check_mlp(self.interaction_mlp, 2 * c, "interaction_mlp")
        mc = self.merge_conv
        if mc.kernel_size != (1, 1) or mc.in_channels != 2 * c or mc.out_channels not in (1, 2 * c):
            raise DimensionError(f"merge_conv must be 1x1 from 2c, got {mc.kernel.shape}")

    @classmethod
    def init(cls, c: int, rng: np.random.Generator, options: FusionOptions = FusionOptions(),
             kernel_size: int = 3, max_ratio: int = 16, dtype=tc.DEFAULT_DTYPE) -> "EaefParams":
        hid = hidden_width(c, c, max_ratio)
        mlp_rgb = [tc.init_dense(rng, c, hid, dtype), tc.init_dense(rng, hid, c, dtype)]
        mlp_t = [tc.init_dense(rng, c, hid, dtype), tc.init_dense(rng, hid, c, dtype)]
        dw = mlp = None
        if options.uses_interaction:
            hid2 = hidden_width(2 * c, c, max_ratio)
            dw = tc.init_conv(rng, 2 * c, 2 * c, kernel_size, "depthwise", dtype, gain=1.0)
            mlp = [tc.init_dense(rng, 2 * c, hid2, dtype), tc.init_dense(rng, hid2, 2 * c, dtype)]
        out_c = 2 * c if options.merge_mode == "per_channel" else 1
        merge = tc.init_conv(rng, 2 * c, out_c, 1, "standard", dtype, gain=1.0)
        return cls(c, mlp_rgb, mlp_t, merge, dw, mlp)

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        out: OrderedDict[str, Tensor] = OrderedDict()
        for prefix, mlp in (("mlp_rgb", self.mlp_rgb), ("mlp_t", self.mlp_t),
                            ("interaction_mlp", self.interaction_mlp)):
            for i, layer in enumerate(mlp or ()):
                out[f"{prefix}.{i}.weight"] = layer.weight
                out[f"{prefix}.{i}.bias"] = layer.bias
        if self.interaction_dw is not None:
            out["interaction_dw.kernel"] = self.interaction_dw.kernel
            out["interaction_dw.bias"] = self.interaction_dw.bias
        out["merge_conv.kernel"] = self.merge_conv.kernel
        out["merge_conv.bias"] = self.merge_conv.bias
        return out

    def parameter_count(self) -> int:
        return sum(t.size for t in self.named_parameters().values())


def _check_mlp(mlp, width: int, name: str) -> None:
    if not mlp:
        raise DimensionError(f"{name}: empty MLP")
    if mlp[0].in_features != width or mlp[-1].out_features != width:
        raise DimensionError(f"{name}: must map {width} -> {width}")
    for a, b in zip(mlp, mlp[1:]):
        if a.out_features != b.in_features:
            raise DimensionError(f"{name}: chained dims disagree")


def identity_mlp(c: int, dtype=tc.DEFAULT_DTYPE) -> list[DenseLayerParams]:
    return [DenseLayerParams(Tensor(np.eye(c, dtype=dtype)), Tensor.zeros((c,), dtype))]


@dataclass
class FusionState:
    """Every named intermediate of one fusion pass."""

    R: Tensor
    T: Tensor
    gate_i: Tensor
    gate_c: Tensor
    F_aib_rgb: Tensor | None
    F_aib_t: Tensor | None
    F_acb_rgb: Tensor | None
    F_acb_t: Tensor | None
    F_bar_rgb: Tensor
    F_bar_t: Tensor
    spatial_attn: Tensor
    F_final: Tensor
    case_labels: np.ndarray
    interaction_gate: Tensor | None = None
    inputs: tuple = ()
    params: EaefParams | None = None
    options: FusionOptions = FusionOptions()
    tape: Tape = field(default_factory=Tape, repr=False)

    TENSOR_FIELDS = ("R", "T", "gate_i", "gate_c", "interaction_gate", "F_aib_rgb", "F_aib_t",
                     "F_acb_rgb", "F_acb_t", "F_bar_rgb", "F_bar_t", "spatial_attn", "F_final")

    def tensors(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict()
        for name in self.TENSOR_FIELDS:
            t = getattr(self, name)
            if t is not None:
                out[name] = t
        return out


# --------------------------------------------------------------------------
# Individual steps
# --------------------------------------------------------------------------

def _check_pair(F_rgb: Tensor, F_t: Tensor, c: int | None = None) -> None:
    if F_rgb.ndim != 4 or F_rgb.shape != F_t.shape:
        raise DimensionError(f"feature pair mismatch: {F_rgb.shape} vs {F_t.shape}")
    if c is not None and F_rgb.shape[1] != c:
        raise DimensionError(f"features have {F_rgb.shape[1]} channels, params expect {c}")


def channel_weights(F_rgb: Tensor, F_t: Tensor, p: EaefParams, tape: Tape | None = None):
    """Pre-sigmoid channel scores ``(R, T)``, each ``(N, c)``."""
    _check_pair(F_rgb, F_t, p.channels)
    R = tc.dense_mlp(tc.global_avg_pool(F_rgb, tape), p.mlp_rgb, tape=tape)
    T = tc.dense_mlp(tc.global_avg_pool(F_t, tape), p.mlp_t, tape=tape)
    return R, T


UNDEFINED_CASE = -1


def classify_cases(R, T, strict: bool = True) -> np.ndarray:
    """Case label per channel. NaN raises, or maps to ``UNDEFINED_CASE`` when not strict."""
    r = R.data if isinstance(R, Tensor) else np.asarray(R)
    t = T.data if isinstance(T, Tensor) else np.asarray(T)
    if r.shape != t.shape:
        raise DimensionError(f"classify_cases: {r.shape} vs {t.shape}")
    nan = np.isnan(r) | np.isnan(t)
    if strict and nan.any():
        raise ValueError("classify_cases: NaN channel weight")
    r_pos, t_pos = r >= 0, t >= 0
    labels = np.where(r_pos, np.where(t_pos, CaseLabel.BOTH_HIGH, CaseLabel.ONLY_R),
                      np.where(t_pos, CaseLabel.ONLY_T, CaseLabel.BOTH_LOW))
    return np.where(nan, UNDEFINED_CASE, labels).astype(np.int8)


def aib_gate(R: Tensor, T: Tensor, c: int, tape: Tape | None = None) -> Tensor:
    if c < 1:
        raise ValueError("channel count must be >= 1")
    return tc.sigmoid(tc.scalar_mul(tc.mul(R, T, tape), float(c), tape), tape)


def interaction_gate(F_prime: Tensor, p: EaefParams, tape: Tape | None = None) -> Tensor:
    """``sigmoid(MLP(GMP(dwconv(F'))))`` over the 2c concatenated channels."""
    if p.interaction_dw is None:
        raise DimensionError("params carry no interaction module")
    v = tc.global_max_pool(tc.depthwise_conv(F_prime, p.interaction_dw, tape), tape)
    return tc.sigmoid(tc.dense_mlp(v, p.interaction_mlp, tape=tape), tape)


def _attention_interaction(F_rgb, F_t, gate_i, p, bypass, tape):
    Fp = tc.concat_channels(tc.channel_scale(F_rgb, gate_i, tape),
                            tc.channel_scale(F_t, gate_i, tape), tape)
    if bypass:
        gate = None
        mixed = Fp
    else:
        gate = interaction_gate(Fp, p, tape)
        mixed = tc.channel_scale(Fp, gate, tape)
    a, b = tc.split_channels(mixed, tape)
    return a, b, gate


def attention_interaction(F_rgb: Tensor, F_t: Tensor, gate_i: Tensor, p: EaefParams,
                          bypass: bool = False, tape: Tape | None = None):
    """Interaction branch; ``bypass`` replaces the interaction gate with ones."""
    _check_pair(F_rgb, F_t, p.channels)
    a, b, _ = _attention_interaction(F_rgb, F_t, gate_i, p, bypass, tape)
    return a, b


def attention_complement(F_rgb: Tensor, F_t: Tensor, gate_i: Tensor, tape: Tape | None = None,
                         gate_c: Tensor | None = None):
    _check_pair(F_rgb, F_t)
    if gate_c is None:
        gate_c = tc.one_minus(gate_i, tape)
    return tc.channel_scale(F_rgb, gate_c, tape), tc.channel_scale(F_t, gate_c, tape)


def aggregate_branches(F_aib_rgb, F_aib_t, F_acb_rgb, F_acb_t, tape: Tape | None = None):
    return tc.add(F_aib_rgb, F_acb_rgb, tape), tc.add(F_aib_t, F_acb_t, tape)


def _spatial_merge(F_bar_rgb, F_bar_t, p, options, tape):
    cat = tc.concat_channels(F_bar_rgb, F_bar_t, tape)
    logits = tc.conv1x1(cat, p.merge_conv, tape)
    norm = tc.spatial_softmax if options.softmax_axis == "spatial" else tc.channel_softmax
    attn = norm(logits, tape)
    if attn.shape[1] != cat.shape[1]:
        attn = tc.channel_broadcast(attn, cat.shape[1], tape)
    return tc.mul(cat, attn, tape), attn


def spatial_merge(F_bar_rgb: Tensor, F_bar_t: Tensor, p: EaefParams,
                  options: FusionOptions = FusionOptions(), tape: Tape | None = None) -> Tensor:
    _check_pair(F_bar_rgb, F_bar_t, p.channels)
    return _spatial_merge(F_bar_rgb, F_bar_t, p, options, tape)[0]


# --------------------------------------------------------------------------
# Whole block
# --------------------------------------------------------------------------

def eaef_forward(F_rgb: Tensor, F_t: Tensor, p: EaefParams,
                 options: FusionOptions = FusionOptions(), bypass_interaction: bool = False,
                 tape: Tape | None = None) -> FusionState:
    """Run the block and keep every intermediate.

    If ``tape`` is None a private tape is created so :func:`eaef_backward` can
    be called on the returned state.
    """
    _check_pair(F_rgb, F_t, p.channels)
    if tape is None:
        tape = Tape()
    c = p.channels
    R, T = channel_weights(F_rgb, F_t, p, tape)
    gate_i = aib_gate(R, T, c, tape)
    gate_c = tc.one_minus(gate_i, tape)

    aib_rgb = aib_t = acb_rgb = acb_t = igate = None
    if options.branches in ("full", "aib"):
        bypass = bypass_interaction or not options.interaction
        aib_rgb, aib_t, igate = _attention_interaction(F_rgb, F_t, gate_i, p, bypass, tape)
    if options.branches in ("full", "acb"):
        acb_rgb, acb_t = attention_complement(F_rgb, F_t, gate_i, tape, gate_c=gate_c)

    if options.branches == "full":
        bar_rgb, bar_t = aggregate_branches(aib_rgb, aib_t, acb_rgb, acb_t, tape)
    elif options.branches == "aib":
        bar_rgb, bar_t = aib_rgb, aib_t
    else:
        bar_rgb, bar_t = acb_rgb, acb_t

    final, attn = _spatial_merge(bar_rgb, bar_t, p, options, tape)
    return FusionState(
        R=R, T=T, gate_i=gate_i, gate_c=gate_c,
        F_aib_rgb=aib_rgb, F_aib_t=aib_t, F_acb_rgb=acb_rgb, F_acb_t=acb_t,
        F_bar_rgb=bar_rgb, F_bar_t=bar_t, spatial_attn=attn, F_final=final,
        case_labels=classify_cases(R, T, strict=False), interaction_gate=igate,
        inputs=(F_rgb, F_t), params=p, options=options, tape=tape,
    )


def eaef_backward(state: FusionState, grad_final, p: EaefParams):
    """Gradients of ``sum(grad_final * F_final)`` w.r.t. both inputs and every parameter."""
    if state.params is not p:
        raise ValueError("state was produced with different parameters")
    g = grad_final.data if isinstance(grad_final, Tensor) else np.asarray(grad_final)
    if g.shape != state.F_final.shape:
        raise DimensionError(f"grad_final {g.shape} vs F_final {state.F_final.shape}")
    grads = state.tape.backward(state.F_final, g)
    F_rgb, F_t = state.inputs
    named = OrderedDict((name, grads[t]) for name, t in p.named_parameters().items())
    return grads[F_rgb], grads[F_t], named


# --------------------------------------------------------------------------
# Helpers for tests and tooling
# --------------------------------------------------------------------------

def mirror_params(p: EaefParams) -> EaefParams:
    """Copy the RGB-side weights onto the thermal side and make every 2c-wide
    parameter commute with swapping the two halves."""
    c = p.channels

    def clone(t: Tensor) -> Tensor:
        return Tensor(t.data.copy())

    mlp_t = [DenseLayerParams(clone(l.weight), clone(l.bias)) for l in p.mlp_rgb]
    mlp_rgb = [DenseLayerParams(clone(l.weight), clone(l.bias)) for l in p.mlp_rgb]
    dw = mlp = None
    if p.interaction_dw is not None:
        k = p.interaction_dw.kernel.data.copy()
        k[c:] = k[:c]
        b = p.interaction_dw.bias.data.copy()
        b[c:] = b[:c]
        dw = ConvParams(Tensor(k), Tensor(b), "depthwise")
        mlp = [DenseLayerParams(clone(l.weight), clone(l.bias)) for l in p.interaction_mlp]
        last = mlp[-1]
        w, bb = last.weight.data.copy(), last.bias.data.copy()
        w[c:] = w[:c]
        bb[c:] = bb[:c]
        mlp[-1] = DenseLayerParams(Tensor(w), Tensor(bb))
    k = p.merge_conv.kernel.data.copy()
    b = p.merge_conv.bias.data.copy()
    if k.shape[0] == 2 * c:
        k[c:, c:] = k[:c, :c]
        k[c:, :c] = k[:c, c:]
        b[c:] = b[:c]
    else:
        k[:, c:] = k[:, :c]
    merge = ConvParams(Tensor(k), Tensor(b), "standard")
    return EaefParams(c, mlp_rgb, mlp_t, merge, dw, mlp)


def permute_params(p: EaefParams, perm: np.ndarray) -> EaefParams:
    """Relabel channels: new channel ``i`` is old channel ``perm[i]``."""
    c = p.channels
    perm = np.asarray(perm)
    perm2 = np.concatenate([perm, perm + c])

    def mlp_perm(mlp, idx):
        out = []
        for i, layer in enumerate(mlp):
            w, b = layer.weight.data, layer.bias.data
            if i == 0:
                w = w[:, idx]
            if i == len(mlp) - 1:
                w, b = w[idx], b[idx]
            out.append(DenseLayerParams(Tensor(w.copy()), Tensor(b.copy())))
        return out

    dw = mlp = None
    if p.interaction_dw is not None:
        dw = ConvParams(Tensor(p.interaction_dw.kernel.data[perm2].copy()),
                        Tensor(p.interaction_dw.bias.data[perm2].copy()), "depthwise")
        mlp = mlp_perm(p.interaction_mlp, perm2)
    k, b = p.merge_conv.kernel.data, p.merge_conv.bias.data
    if k.shape[0] == 2 * c:
        k, b = k[perm2][:, perm2], b[perm2]
    else:
        k = k[:, perm2]
    merge = ConvParams(Tensor(k.copy()), Tensor(b.copy()), "standard")
    return EaefParams(c, mlp_perm(p.mlp_rgb, perm), mlp_perm(p.mlp_t, perm), merge, dw, mlp)


def fusion_flops(p: EaefParams, h: int, w: int, options: FusionOptions = FusionOptions()) -> int:
    """Rough multiply-add count (2 per MAC) of one forward pass at ``h x w``, batch 1."""
    c, hw = p.channels, h * w

    def mlp(layers):
        return sum(2 * l.in_features * l.out_features for l in layers or ())

    flops = 2 * c * hw + mlp(p.mlp_rgb) + mlp(p.mlp_t) + 3 * c  # pooling, MLPs, gate
    if options.branches in ("full", "aib"):
        flops += 2 * c * hw
        if p.interaction_dw is not None:
            k = p.interaction_dw.kernel_size[0] * p.interaction_dw.kernel_size[1]
            flops += 2 * k * 2 * c * hw + 2 * c * hw + mlp(p.interaction_mlp) + 2 * c * hw
    if options.branches in ("full", "acb"):
        flops += 2 * c * hw
    if options.branches == "full":
        flops += 2 * c * hw
    mc = p.merge_conv
    flops += 2 * mc.in_channels * mc.out_channels * hw  # 1x1 merge conv
    flops += 4 * mc.out_channels * hw + 2 * c * hw      # softmax and reweighting
    return int(flops)


def state_summary(state: FusionState) -> dict:
    labels = state.case_labels
    g = state.gate_i.data
    return {
        "cases": {label.name: int(np.count_nonzero(labels == label)) for label in CaseLabel},
        "gate_min": float(g.min()),
        "gate_mean": float(g.mean(dtype=np.float64)),
        "gate_max": float(g.max()),
    }


def export_state(state: FusionState, out_dir: str | os.PathLike, pgm: bool = True) -> list[str]:
    """Dump every tensor field plus ``manifest.txt``; attention maps and gates
    also go out as min-max normalised PGM images. Returns the files written."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    lines = []
    for name, t in state.tensors().items():
        fname = f"{name}.eaet"
        save_tensor(os.path.join(out_dir, fname), t)
        lines.append(f"{name}\t{fname}\t{'x'.join(map(str, t.shape))}")
        written.append(fname)
    cases = Tensor(state.case_labels.astype(np.float32))
    save_tensor(os.path.join(out_dir, "case_labels.eaet"), cases)
    lines.append(f"case_labels\tcase_labels.eaet\t{'x'.join(map(str, cases.shape))}")
    written.append("case_labels.eaet")
    if pgm:
        written += _export_maps(state, out_dir, lines)
    with open(os.path.join(out_dir, "manifest.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")
    written.append("manifest.txt")
    return written


def _export_maps(state: FusionState, out_dir, lines) -> list[str]:
    written = []
    for gate_name in ("gate_i", "gate_c"):
        fname = f"{gate_name}.pgm"
        write_pgm(os.path.join(out_dir, fname), normalize_u8(getattr(state, gate_name).data))
        lines.append(f"{gate_name}_image\t{fname}\tN x c")
        written.append(fname)
    attn = state.spatial_attn.data
    for n in range(attn.shape[0]):
        for ch in range(attn.shape[1]):
            fname = f"attn_n{n}_c{ch}.pgm"
            write_pgm(os.path.join(out_dir, fname), normalize_u8(attn[n, ch]))
            written.append(fname)
        lines.append(f"spatial_attn_images_n{n}\tattn_n{n}_c*.pgm\t{attn.shape[1]} maps")
    return written
