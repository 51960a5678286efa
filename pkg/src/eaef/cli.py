"""``eaef <command> --config <path> [--out <dir>] [--seed <u64>]``

Exit codes: 0 success, 1 validation failure (bad config or input, failed
audit, hash mismatch), 2 numeric failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from collections import OrderedDict

import numpy as np

from . import data as dt
from . import experiment as ex
from . import fusion as fu
from . import gradcheck as gc
from . import network as nw
from . import tensor as tc
from .config import U64_MAX, ConfigError, RunConfig
from .io import TensorFormatError, load_tensor

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2
COMMANDS = ("gradcheck", "cases", "train", "ablate", "eval", "bench")


def _u64(text: str) -> int:
    try:
        v = int(text, 10)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v <= U64_MAX:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


class _Parser(argparse.ArgumentParser):
    # usage errors are validation failures; 2 is reserved for numeric failures
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="eaef", description="RGB-thermal fusion experiments")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="key = value run configuration")
    ap.add_argument("--out", help="output directory (overrides out_dir)")
    ap.add_argument("--seed", type=_u64, help="run seed (overrides seed)")
    ap.add_argument("--rgb", help="cases: RGB feature dump (overrides cases_rgb)")
    ap.add_argument("--thermal", help="cases: thermal feature dump (overrides cases_thermal)")
    ap.add_argument("--checkpoint", help="eval: checkpoint directory (overrides checkpoint)")
    return ap


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    changes = {}
    if args.out is not None:
        changes["out_dir"] = args.out
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.rgb is not None:
        changes["cases_rgb"] = args.rgb
    if args.thermal is not None:
        changes["cases_thermal"] = args.thermal
    if args.checkpoint is not None:
        changes["checkpoint"] = args.checkpoint
    return cfg.replace(**changes) if changes else cfg


def _out(cfg: RunConfig) -> str:
    os.makedirs(cfg.out_dir, exist_ok=True)
    return cfg.out_dir


def _write(path: str, text: str) -> None:
    with open(path, "w") as f:
        f.write(text)


# --------------------------------------------------------------------------
# gradcheck
# --------------------------------------------------------------------------

def gradcheck_report(cfg: RunConfig) -> "OrderedDict[str, tuple[float, float]]":
    """``group -> (max rel error, tolerance)``. Op groups use the per-op
    tolerance, fusion leaves the end-to-end tolerance."""
    groups = cfg.gradcheck_groups
    want_all = "all" in groups
    unknown = [g for g in groups if g not in gc.OP_AUDITS and g not in ("all", "fusion")]
    if unknown:
        raise ConfigError(f"unknown gradcheck group(s): {', '.join(unknown)}")
    seeds = range(cfg.seed, cfg.seed + cfg.gradcheck_seeds)
    report: OrderedDict[str, tuple[float, float]] = OrderedDict()
    names = None if want_all else [g for g in groups if g in gc.OP_AUDITS]
    if names is None or names:
        for name, err in gc.run_op_audits(seeds, names).items():
            report[name] = (err, cfg.gradcheck_op_tol)
    if want_all or "fusion" in groups:
        shape = (1, cfg.gradcheck_channels // 2, cfg.gradcheck_size, cfg.gradcheck_size)
        for name, err in gc.run_fusion_audit(seeds, shape, cfg.fusion_options()).items():
            report[f"fusion.{name}"] = (err, cfg.gradcheck_tol)
    return report


def cmd_gradcheck(cfg: RunConfig) -> int:
    report = gradcheck_report(cfg)
    failed = [name for name, (err, tol) in report.items() if not err < tol]
    lines = [f"{name}\t{err:.3e}\t{'ok' if err < tol else 'FAIL'}" for name, (err, tol) in report.items()]
    _write(os.path.join(_out(cfg), "gradcheck.txt"), "".join(l + "\n" for l in lines))
    for line in lines:
        print(line)
    if not report:
        print("no parameter groups to audit")
    if failed:
        print(f"gradcheck failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


# --------------------------------------------------------------------------
# cases
# --------------------------------------------------------------------------

def cases_params(cfg: RunConfig, c: int, dtype) -> fu.EaefParams:
    rng = np.random.default_rng([cfg.seed, 5])
    p = fu.EaefParams.init(c, rng, cfg.fusion_options(), dtype=dtype)
    if cfg.cases_mlp == "identity":
        p = fu.EaefParams(c, fu.identity_mlp(c, dtype), fu.identity_mlp(c, dtype), p.merge_conv,
                          p.interaction_dw, p.interaction_mlp)
    if cfg.cases_symmetric:
        p = fu.mirror_params(p)
    return p


def _as_nchw(t: tc.Tensor, name: str) -> tc.Tensor:
    if t.ndim == 3:
        return tc.Tensor(t.data[None])
    if t.ndim != 4:
        raise tc.DimensionError(f"{name}: expected C x H x W or N x C x H x W, got {t.shape}")
    return t


def cmd_cases(cfg: RunConfig) -> int:
    if not cfg.cases_rgb or not cfg.cases_thermal:
        raise ConfigError("cases needs --rgb and --thermal (or cases_rgb / cases_thermal)")
    F_rgb = _as_nchw(load_tensor(cfg.cases_rgb), "rgb")
    F_t = _as_nchw(load_tensor(cfg.cases_thermal), "thermal")
    if F_rgb.shape != F_t.shape:
        raise tc.DimensionError(f"rgb {F_rgb.shape} and thermal {F_t.shape} differ")
    p = cases_params(cfg, F_rgb.shape[1], F_rgb.dtype)
    state = fu.eaef_forward(F_rgb, F_t, p, cfg.fusion_options())
    summary = fu.state_summary(state)
    lines = ["case\tchannels"] + [f"{k}\t{v}" for k, v in summary["cases"].items()]
    lines.append(f"gate_i min={summary['gate_min']:.6f} mean={summary['gate_mean']:.6f} "
                 f"max={summary['gate_max']:.6f}")
    out = _out(cfg)
    fu.export_state(state, os.path.join(out, "cases"))
    _write(os.path.join(out, "cases.txt"), "".join(l + "\n" for l in lines))
    for line in lines:
        print(line)
    return EXIT_OK


# --------------------------------------------------------------------------
# train / ablate / eval
# --------------------------------------------------------------------------

def cmd_train(cfg: RunConfig) -> int:
    out = _out(cfg)
    cfg.save(os.path.join(out, "config.txt"))
    csv_path = os.path.join(out, "metrics.csv")
    rows = []

    def log(row):
        rows.append(row)
        _write(csv_path, ex.rows_to_csv(rows))
        print(f"epoch {row['epoch']}: loss={row['loss']:.4f} train_mIoU={row['train_miou']:.4f} "
              f"val_mIoU={row['val_miou']:.4f}")

    _write(csv_path, ex.rows_to_csv(rows))
    try:
        outcome = ex.train(cfg, ckpt_dir=os.path.join(out, "checkpoint"), on_epoch=log)
    except nw.NumericError as e:
        diag = os.path.join(out, "diagnostic")
        ex.dump_diagnostic(e, diag)
        print(f"numeric failure: {e}; fusion state dumped to {diag}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"best epoch {outcome.best_epoch}: val mIoU {outcome.best_val_miou:.4f}")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig) -> int:
    out = _out(cfg)
    try:
        runs = ex.ablation_runs(cfg)
    except nw.NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    lines = ["variant,seed,mAcc,mIoU"] + [
        f"{ex.VARIANT_NAMES[r.ablation]},{r.seed},{r.val_macc:.6f},{r.val_miou:.6f}" for r in runs]
    _write(os.path.join(out, "ablation_runs.csv"), "\n".join(lines) + "\n")
    table = ex.table_csv(ex.median_table(runs))
    _write(os.path.join(out, "ablation.csv"), table)
    print(table, end="")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    ckpt = cfg.checkpoint or os.path.join(cfg.out_dir, "checkpoint")
    if not os.path.isfile(os.path.join(ckpt, "manifest.txt")):
        raise ConfigError(f"no checkpoint manifest in {ckpt}")
    meta, _ = nw.read_manifest(ckpt)
    if meta.get("config_hash") != cfg.model_hash():
        print(f"refusing to evaluate: checkpoint hash {meta.get('config_hash')} does not match "
              f"config hash {cfg.model_hash()}", file=sys.stderr)
        return EXIT_INVALID
    model = nw.Model.init(cfg.model_config(), 0)
    nw.load_checkpoint(ckpt, model)
    report = ex.evaluate(model, ex.make_split(cfg, "eval"), cfg)
    out = _out(cfg)
    _write(os.path.join(out, "eval_metrics.csv"), report.to_csv())
    print(report.table())
    return EXIT_OK


# --------------------------------------------------------------------------
# bench
# --------------------------------------------------------------------------

def bench_report(cfg: RunConfig) -> dict:
    counts = OrderedDict((ex.VARIANT_NAMES[a], nw.Model.init(cfg.model_config(a), cfg.seed).parameter_count())
                         for a in nw.ABLATIONS)
    model = nw.Model.init(cfg.model_config(), cfg.seed)
    opts = cfg.model_config().fusion_options()
    rng = np.random.default_rng([cfg.seed, 6])
    scales = []
    h, w = cfg.height, cfg.width
    for k, c in enumerate(cfg.stages):
        h, w = h // 2, w // 2
        entry = {"scale": k, "channels": c, "height": h, "width": w, "seconds": 0.0, "flops": 0}
        p = model.fusions[k]
        if p is not None:
            F_rgb = tc.Tensor(rng.standard_normal((1, c, h, w)))
            F_t = tc.Tensor(rng.standard_normal((1, c, h, w)))
            fu.eaef_forward(F_rgb, F_t, p, opts)  # warm-up
            t0 = time.perf_counter()
            for _ in range(cfg.bench_iterations):
                fu.eaef_forward(F_rgb, F_t, p, opts)
            entry["seconds"] = (time.perf_counter() - t0) / cfg.bench_iterations
            entry["flops"] = fu.fusion_flops(p, h, w, opts)
        scales.append(entry)
    total = sum(e["seconds"] for e in scales)
    return {"params": counts, "fusion_params": model.fusion_parameter_count(), "scales": scales,
            "fusions_per_sec": (len(scales) / total) if total > 0 else 0.0}


def cmd_bench(cfg: RunConfig) -> int:
    rep = bench_report(cfg)
    lines = ["variant\tparams"] + [f"{k}\t{v}" for k, v in rep["params"].items()]
    lines.append(f"fusion params ({cfg.ablation}): {rep['fusion_params']}")
    lines.append("scale\tchannels\tsize\tms_per_fusion\tflops")
    for e in rep["scales"]:
        lines.append(f"{e['scale']}\t{e['channels']}\t{e['height']}x{e['width']}\t"
                     f"{e['seconds'] * 1e3:.4f}\t{e['flops']}")
    lines.append(f"throughput: {rep['fusions_per_sec']:.1f} fusions/sec "
                 f"over {cfg.bench_iterations} iterations")
    _write(os.path.join(_out(cfg), "bench.txt"), "".join(l + "\n" for l in lines))
    for line in lines:
        print(line)
    return EXIT_OK


HANDLERS = {"gradcheck": cmd_gradcheck, "cases": cmd_cases, "train": cmd_train,
            "ablate": cmd_ablate, "eval": cmd_eval, "bench": cmd_bench}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        return HANDLERS[args.command](cfg)
    except (TensorFormatError, ConfigError, dt.SceneSpecError, tc.DimensionError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
