"""Central finite-difference audits of the analytic backward passes.

Each audit builds a small float64 graph, projects its output onto a random
direction ``G`` so the loss is the scalar ``sum(out * G)``, and compares the
tape gradients of every leaf against central differences.

Max pooling is not differentiable where the top two values tie, and a
perturbation of ``EPS`` can flip the winner of a near tie. Audits whose graph
contains a max therefore redraw instances until every pooled map has a top-two
margin of at least ``MAX_MARGIN``.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Callable, Mapping

import numpy as np

from . import fusion as fu
from . import tensor as tc
from .tensor import ConvParams, DenseLayerParams, Tape, Tensor

EPS = 1e-4
ABS_FLOOR = 1e-6
MAX_MARGIN = 1e-3
MAX_REDRAWS = 100
F64 = np.float64


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ABS_FLOOR) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=F64)
    n = np.asarray(numeric, dtype=F64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def numeric_grad(loss: Callable[[], float], leaf: Tensor, eps: float = EPS) -> np.ndarray:
    x = leaf.data
    grad = np.zeros(x.shape, dtype=F64)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = loss()
        flat[i] = old - eps
        down = loss()
        flat[i] = old
        gflat[i] = (up - down) / (2 * eps)
    return grad


def check_graph(build: Callable[[Tape | None], Tensor], leaves: Mapping[str, Tensor],
                rng: np.random.Generator, eps: float = EPS) -> "OrderedDict[str, float]":
    """Relative error per leaf for the graph ``build`` over float64 ``leaves``."""
    tape = Tape()
    out = build(tape)
    G = rng.standard_normal(out.shape)
    grads = tape.backward(out, G)

    def loss() -> float:
        return float(np.sum(build(None).data.astype(F64) * G))

    report = OrderedDict()
    for name, leaf in leaves.items():
        report[name] = rel_error(grads[leaf], numeric_grad(loss, leaf, eps))
    return report


def _t(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), dtype=F64)


def _dense(rng, i, o) -> DenseLayerParams:
    return DenseLayerParams(_t(rng, o, i), _t(rng, o))


# Each audit takes an rng and returns (build, leaves).
def _audit_gap(rng):
    x = _t(rng, 2, 3, 4, 5)
    return (lambda tape: tc.global_avg_pool(x, tape)), {"x": x}


def max_margin(x: np.ndarray) -> float:
    """Smallest gap between the two largest cells over all (n, c) maps."""
    flat = np.sort(x.reshape(x.shape[0], x.shape[1], -1), axis=-1)
    if flat.shape[-1] < 2:
        return np.inf
    return float((flat[..., -1] - flat[..., -2]).min())


def _audit_gmp(rng):
    x = _t(rng, 2, 3, 4, 5)
    for _ in range(MAX_REDRAWS):
        if max_margin(x.data) >= MAX_MARGIN:
            break
        x = _t(rng, 2, 3, 4, 5)
    return (lambda tape: tc.global_max_pool(x, tape)), {"x": x}


def _audit_mlp(rng):
    v = _t(rng, 3, 4)
    layers = [_dense(rng, 4, 2), _dense(rng, 2, 4)]
    leaves = {"v": v}
    for i, l in enumerate(layers):
        leaves[f"{i}.weight"] = l.weight
        leaves[f"{i}.bias"] = l.bias
    return (lambda tape: tc.dense_mlp(v, layers, tape=tape)), leaves


def _audit_sigmoid(rng):
    x = _t(rng, 3, 5)
    return (lambda tape: tc.sigmoid(x, tape)), {"x": x}


def _audit_dwconv(rng):
    x = _t(rng, 2, 3, 5, 6)
    p = ConvParams(_t(rng, 3, 1, 3, 3), _t(rng, 3), "depthwise")
    return (lambda tape: tc.depthwise_conv(x, p, tape)), {"x": x, "kernel": p.kernel, "bias": p.bias}


def _audit_conv1x1(rng):
    x = _t(rng, 2, 3, 4, 4)
    p = ConvParams(_t(rng, 5, 3, 1, 1), _t(rng, 5))
    return (lambda tape: tc.conv1x1(x, p, tape)), {"x": x, "kernel": p.kernel, "bias": p.bias}


def _audit_conv3x3_s2(rng):
    x = _t(rng, 2, 2, 6, 6)
    p = ConvParams(_t(rng, 3, 2, 3, 3), _t(rng, 3))
    return (lambda tape: tc.conv2d(x, p, stride=2, tape=tape)), {"x": x, "kernel": p.kernel, "bias": p.bias}


def _audit_softmax(rng):
    x = _t(rng, 2, 3, 3, 4)
    return (lambda tape: tc.spatial_softmax(x, tape)), {"x": x}


def _audit_channel_scale(rng):
    x, g = _t(rng, 2, 3, 4, 4), _t(rng, 2, 3)
    return (lambda tape: tc.channel_scale(x, g, tape)), {"x": x, "g": g}


def _audit_concat_split(rng):
    x, y = _t(rng, 2, 3, 4, 4), _t(rng, 2, 3, 4, 4)

    def build(tape):
        a, b = tc.split_channels(tc.concat_channels(x, y, tape), tape)
        return tc.mul(a, tc.scalar_mul(b, 2.0, tape), tape)

    return build, {"x": x, "y": y}


def _audit_elementwise(rng):
    a, b = _t(rng, 2, 3, 4), _t(rng, 2, 3, 4)

    def build(tape):
        return tc.add(tc.mul(a, b, tape), tc.one_minus(tc.scalar_mul(a, 0.5, tape), tape), tape)

    return build, {"a": a, "b": b}


OP_AUDITS = OrderedDict([
    ("global_avg_pool", _audit_gap),
    ("global_max_pool", _audit_gmp),
    ("dense_mlp", _audit_mlp),
    ("sigmoid", _audit_sigmoid),
    ("depthwise_conv", _audit_dwconv),
    ("conv1x1", _audit_conv1x1),
    ("conv3x3_stride2", _audit_conv3x3_s2),
    ("spatial_softmax", _audit_softmax),
    ("channel_scale", _audit_channel_scale),
    ("concat_split", _audit_concat_split),
    ("elementwise", _audit_elementwise),
])


def random_eaef_params(rng, c: int, options: fu.FusionOptions = fu.FusionOptions()) -> fu.EaefParams:
    """float64 parameters with non-zero biases so every path carries gradient."""
    p = fu.EaefParams.init(c, rng, options, dtype=F64)
    for t in p.named_parameters().values():
        t.data[...] = rng.standard_normal(t.shape) * 0.5
    return p


def _interaction_margin(F_rgb, F_t, p, options) -> float:
    if options.branches == "acb" or not options.interaction:
        return np.inf
    st = fu.eaef_forward(F_rgb, F_t, p, options)
    Fp = tc.concat_channels(tc.channel_scale(F_rgb, st.gate_i), tc.channel_scale(F_t, st.gate_i))
    return max_margin(tc.depthwise_conv(Fp, p.interaction_dw).data)


def audit_fusion(rng, shape=(1, 4, 5, 5), options: fu.FusionOptions = fu.FusionOptions()):
    """End-to-end audit of the whole block: inputs plus every parameter tensor."""
    n, c, h, w = shape
    for _ in range(MAX_REDRAWS):
        p = random_eaef_params(rng, c, options)
        F_rgb, F_t = _t(rng, *shape), _t(rng, *shape)
        if _interaction_margin(F_rgb, F_t, p, options) >= MAX_MARGIN:
            break

    def build(tape):
        return fu.eaef_forward(F_rgb, F_t, p, options, tape=tape if tape is not None else Tape()).F_final

    leaves = OrderedDict([("F_rgb", F_rgb), ("F_t", F_t)])
    leaves.update(p.named_parameters())
    return build, leaves


def run_op_audits(seeds, names=None) -> "OrderedDict[str, float]":
    """Worst relative error over ``seeds`` for every op audit."""
    out = OrderedDict()
    for name, audit in OP_AUDITS.items():
        if names is not None and name not in names:
            continue
        worst = 0.0
        for seed in seeds:
            rng = np.random.default_rng(seed)
            build, leaves = audit(rng)
            worst = max(worst, max(check_graph(build, leaves, rng).values()))
        out[name] = worst
    return out


def run_fusion_audit(seeds, shape=(1, 4, 5, 5), options: fu.FusionOptions = fu.FusionOptions()):
    """Worst relative error per leaf (input or parameter group) over ``seeds``."""
    out: OrderedDict[str, float] = OrderedDict()
    for seed in seeds:
        rng = np.random.default_rng(seed)
        build, leaves = audit_fusion(rng, shape, options)
        for name, err in check_graph(build, leaves, rng).items():
            out[name] = max(out.get(name, 0.0), err)
    return out
