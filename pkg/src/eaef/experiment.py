"""Training, evaluation and ablation drivers shared by the CLI and tests."""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import data as dt
from . import fusion as fu
from . import network as nw
from .config import RunConfig
from .io import save_tensor

CSV_COLUMNS = ("epoch", "lr", "loss", "dice", "ce", "train_macc", "train_miou", "val_macc", "val_miou")
VARIANT_NAMES = {"baseline": "Baseline", "aib": "AibOnly", "acb": "AcbOnly", "full": "Full"}


def worker_count() -> int:
    """Worker cap from ``EAEF_THREADS``; defaults to 1."""
    raw = os.environ.get("EAEF_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def make_split(cfg: RunConfig, split: str, seed: int | None = None) -> dt.SampleBatch:
    n = {"train": cfg.train_samples, "val": cfg.val_samples, "eval": cfg.eval_samples}[split]
    batch = dt.generate(cfg.scene_spec(cfg.split_seed(split, seed)), n)
    return batch.zero_modality(cfg.zero_modality)


def exclude_classes(cfg: RunConfig) -> tuple[int, ...]:
    return (0,) if cfg.exclude_background else ()


def evaluate(model: nw.Model, batch: dt.SampleBatch, cfg: RunConfig) -> dt.MetricReport:
    return dt.compute_metrics(nw.predict(model, batch), batch.labels, cfg.num_classes,
                              exclude=exclude_classes(cfg))


@dataclass
class TrainOutcome:
    model: nw.Model
    best_model: nw.Model
    best_epoch: int
    best_val_miou: float
    rows: list[dict] = field(default_factory=list)

    def csv_text(self) -> str:
        return rows_to_csv(self.rows)


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _cell(r[k]) for k in CSV_COLUMNS})
    return buf.getvalue()


def _cell(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _copy_model(model: nw.Model) -> nw.Model:
    clone = nw.Model.init(model.config, 0)
    src = model.named_parameters()
    for name, t in clone.named_parameters().items():
        t.data[...] = src[name].data
    return clone


def train(cfg: RunConfig, ablation: str | None = None, seed: int | None = None,
          ckpt_dir=None, on_epoch=None) -> TrainOutcome:
    """Train one model; keeps the best-on-validation copy.

    The initial model is the first candidate, so ``epochs = 0`` yields the
    initialisation. Raises :class:`network.NumericError` on a non-finite loss.
    """
    seed = cfg.seed if seed is None else seed
    train_set, val_set = make_split(cfg, "train", seed), make_split(cfg, "val", seed)
    model = nw.Model.init(cfg.model_config(ablation), seed)
    opt = nw.SGD(model.named_parameters(), lr=cfg.lr, momentum=cfg.momentum,
                 weight_decay=cfg.weight_decay)
    weights = cfg.loss_weights()
    order_rng = np.random.default_rng([seed, 4])

    best_miou = evaluate(model, val_set, cfg).miou
    best_model, best_epoch = _copy_model(model), 0
    if ckpt_dir is not None:
        nw.save_checkpoint(model, ckpt_dir, cfg.model_hash(), 0, cfg.lr)
    rows = []
    n = len(train_set)
    for epoch in range(1, cfg.epochs + 1):
        opt.lr = nw.exponential_lr(cfg.lr, cfg.gamma, epoch - 1)
        order = order_rng.permutation(n)
        losses = []
        for s in range(0, n, cfg.batch_size):
            losses.append(nw.train_step(model, train_set.subset(order[s:s + cfg.batch_size]), opt,
                                        weights, cfg.smoothing))
        tr, va = evaluate(model, train_set, cfg), evaluate(model, val_set, cfg)
        row = {"epoch": epoch, "lr": opt.lr,
               "loss": float(np.mean([r.loss for r in losses])),
               "dice": float(np.mean([r.dice for r in losses])),
               "ce": float(np.mean([r.ce for r in losses])),
               "train_macc": tr.macc, "train_miou": tr.miou, "val_macc": va.macc, "val_miou": va.miou}
        rows.append(row)
        if va.miou > best_miou:
            best_miou, best_model, best_epoch = va.miou, _copy_model(model), epoch
            if ckpt_dir is not None:
                nw.save_checkpoint(model, ckpt_dir, cfg.model_hash(), epoch, opt.lr)
        if on_epoch is not None:
            on_epoch(row)
    return TrainOutcome(model, best_model, best_epoch, float(best_miou), rows)


@dataclass
class AblationRun:
    ablation: str
    seed: int
    val_macc: float
    val_miou: float


def _ablation_job(args) -> AblationRun:
    cfg, ablation, seed = args
    out = train(cfg, ablation, seed)
    val = evaluate(out.best_model, make_split(cfg, "val", seed), cfg)
    return AblationRun(ablation, seed, val.macc, val.miou)


def ablation_runs(cfg: RunConfig, variants=nw.ABLATIONS, seeds=None, workers: int | None = None):
    """Train every variant under every seed. Jobs are independent, so the
    result does not depend on the worker count."""
    seeds = list(range(cfg.seed, cfg.seed + cfg.ablate_seeds)) if seeds is None else list(seeds)
    jobs = [(cfg, v, s) for s in seeds for v in variants]
    workers = worker_count() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            return list(pool.map(_ablation_job, jobs))
    return [_ablation_job(j) for j in jobs]


def median_table(runs, variants=nw.ABLATIONS) -> list[tuple[str, float, float]]:
    """(variant, median mAcc, median mIoU) per variant."""
    table = []
    for v in variants:
        sel = [r for r in runs if r.ablation == v]
        table.append((VARIANT_NAMES.get(v, v), float(np.median([r.val_macc for r in sel])),
                      float(np.median([r.val_miou for r in sel]))))
    return table


def table_csv(table) -> str:
    lines = ["variant,mAcc,mIoU"] + [f"{v},{a:.6f},{m:.6f}" for v, a, m in table]
    return "\n".join(lines) + "\n"


def dump_diagnostic(err: nw.NumericError, out_dir) -> list[str]:
    """Write every recorded fusion point of a failed step under ``out_dir``."""
    written = []
    for k, point in enumerate(err.fusion_points):
        d = os.path.join(out_dir, f"scale_{k}")
        if point.state is not None:
            written += [os.path.join(d, f) for f in fu.export_state(point.state, d)]
        else:
            os.makedirs(d, exist_ok=True)
            for name in ("F_rgb", "F_t", "fused"):
                path = os.path.join(d, f"{name}.eaet")
                save_tensor(path, getattr(point, name))
                written.append(path)
    return written
