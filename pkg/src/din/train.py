"""L1 training loop and PSNR/SSIM evaluation."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ops
from .checkpoint import save_checkpoint
from .config import OptimizerConfig
from .data import PairedSample, augment, sample_patch
from .metrics import MetricsRecord, psnr, ssim
from .model import DinParams, ModelConfig, din_forward, make_forward, self_ensemble
from .optim import OptimState, adam_step
from .tensor import NumericalError, ShapeError, Tensor, backward, no_grad

log = logging.getLogger(__name__)


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error over all elements."""
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss shape mismatch: {pred.shape} vs {target.shape}")
    return ops.mean(ops.abs_(ops.sub(pred, target)))


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    checkpoint: Path | None = None
    steps: int = 0


def make_batch(pairs: Sequence[PairedSample], patch: int, batch: int, rng, do_augment=True, dtype=np.float32):
    lqs, hqs = [], []
    for _ in range(batch):
        pair = pairs[int(rng.integers(0, len(pairs)))]
        p = sample_patch(pair, patch, rng)
        if do_augment:
            p = augment(p, rng)
        lqs.append(p.lq.data)
        hqs.append(p.hq.data)
    return Tensor(np.concatenate(lqs).astype(dtype)), Tensor(np.concatenate(hqs).astype(dtype))


def write_loss_csv(path: Path, losses: Sequence[float], lrs: Sequence[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "lr"])
        for i, (loss, lr) in enumerate(zip(losses, lrs), start=1):
            w.writerow([i, repr(float(loss)), repr(float(lr))])


def train(
    params: DinParams,
    cfg: ModelConfig,
    pairs: Sequence[PairedSample],
    opt: OptimizerConfig,
    *,
    patch_size: int = 48,
    batch_size: int = 8,
    seed: int = 0,
    do_augment: bool = True,
    out_dir: str | Path | None = None,
    meta: dict | None = None,
    log_every: int = 100,
) -> TrainResult:
    """Fit `params` with Adam on random aligned patches from `pairs`.

    With `out_dir`, writes `checkpoint.dinckpt` every `opt.checkpoint_every`
    steps and at the end, plus `loss.csv`. On a non-finite loss the last
    good checkpoint is left in place and `NumericalError` is raised.
    """
    if not pairs:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(seed)
    state = OptimState(lr=opt.lr, beta1=opt.beta1, beta2=opt.beta2, eps=opt.eps)
    plist = params.parameters()
    dtype = plist[0].dtype
    out = Path(out_dir) if out_dir is not None else None
    ckpt = out / "checkpoint.dinckpt" if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    res = TrainResult(checkpoint=ckpt)
    meta = dict(meta or {})

    for step in range(opt.steps):
        state.lr = opt.lr_at(step)
        lq, hq = make_batch(pairs, patch_size, batch_size, rng, do_augment, dtype)
        for p in plist:
            p.grad = None
        loss = l1_loss(din_forward(lq, params, cfg), hq)
        value = loss.item()
        if not np.isfinite(value):
            if out is not None:
                write_loss_csv(out / "loss.csv", res.losses, res.lrs)
            raise NumericalError(f"loss diverged at step {step + 1}; last good checkpoint kept at {ckpt}")
        backward(loss)
        adam_step(plist, [p.grad for p in plist], state)
        res.losses.append(value)
        res.lrs.append(state.lr)
        res.steps = step + 1
        if log_every and (step + 1) % log_every == 0:
            log.info("step %d loss %.6f lr %.3g", step + 1, value, state.lr)
        if ckpt is not None and (step + 1) % opt.checkpoint_every == 0:
            save_checkpoint(ckpt, params, cfg, {**meta, "step": step + 1})

    if out is not None:
        save_checkpoint(ckpt, params, cfg, {**meta, "step": res.steps})
        write_loss_csv(out / "loss.csv", res.losses, res.lrs)
    return res


def predict(params: DinParams, cfg: ModelConfig, lq: Tensor, ensemble: bool = False) -> Tensor:
    dtype = params.parameters()[0].dtype
    x = Tensor(lq.data.astype(dtype))
    with no_grad():
        if ensemble:
            return self_ensemble(make_forward(params, cfg), x)
        return din_forward(x, params, cfg)


def evaluate(
    params: DinParams,
    cfg: ModelConfig,
    pairs: Sequence[PairedSample],
    ensemble: bool = False,
    y_channel: bool = True,
) -> tuple[list[MetricsRecord], list[Tensor]]:
    """Per-image Y-channel PSNR/SSIM of the restored outputs."""
    records, outputs = [], []
    for pair in pairs:
        t0 = time.perf_counter()
        out = predict(params, cfg, pair.lq, ensemble)
        ms = (time.perf_counter() - t0) * 1e3
        pred = np.clip(out.data.astype(np.float64), 0.0, 1.0)
        records.append(MetricsRecord(pair.id, psnr(pred, pair.hq, y_channel), ssim(pred, pair.hq, y_channel), ms))
        outputs.append(Tensor(pred))
    return records, outputs


def dataset_loss(params: DinParams, cfg: ModelConfig, pairs: Sequence[PairedSample]) -> float:
    """Mean full-image L1 loss over `pairs`."""
    vals = []
    for pair in pairs:
        out = predict(params, cfg, pair.lq)
        vals.append(float(np.mean(np.abs(out.data.astype(np.float64) - pair.hq.data))))
    return float(np.mean(vals))


def write_metrics(out_dir: str | Path, records: Sequence[MetricsRecord], title: str = "DIN") -> None:
    """metrics.csv (deterministic), timing.csv and a plain-text summary table."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "psnr_db", "ssim"])
        for r in records:
            w.writerow([r.id, f"{r.psnr_db:.4f}", f"{r.ssim:.6f}"])
    with open(out / "timing.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "runtime_ms"])
        for r in records:
            w.writerow([r.id, f"{r.runtime_ms:.3f}"])
    mean_p = float(np.mean([r.psnr_db for r in records])) if records else float("nan")
    mean_s = float(np.mean([r.ssim for r in records])) if records else float("nan")
    width = max([len(r.id) for r in records] + [len(title), 7])
    lines = [f"{'Image':<{width}} | {'PSNR':>7} | {'SSIM':>6}", "-" * (width + 19)]
    lines += [f"{r.id:<{width}} | {r.psnr_db:7.2f} | {r.ssim:6.4f}" for r in records]
    lines += ["-" * (width + 19), f"{title:<{width}} | {mean_p:7.2f} | {mean_s:6.4f}"]
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
