"""`din` command line: train, eval, gradcheck, params, flops, degrade.

Exit codes: 0 success, 1 usage or config error, 2 data error (missing or
unreadable files, bad image shapes), 3 numerical failure (NaN, divergence,
failed gradient check).
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, load_config
from .data import DegradationSpec, degrade, list_images, load_pairs, read_image, synthetic_pairs, write_image
from .metrics import psnr
from .model import ModelConfig, count_mult_adds, count_params, init_params, residual_base, upsample_factors
from .report import plot_loss_curve, plot_metrics
from .tensor import NumericalError, ShapeError, Tensor
from .train import evaluate, train, write_metrics

log = logging.getLogger("din")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _out_dir(args, cfg: RunConfig | None = None, default: str = "runs/default") -> Path:
    if args.out:
        return Path(args.out)
    if "DIN_OUT" in os.environ:
        return Path(os.environ["DIN_OUT"])
    return Path(cfg.out if cfg is not None else default)


def _model_config(args) -> ModelConfig:
    if args.config:
        return load_config(args.config, require_data=False).model
    return ModelConfig()


def _training_pairs(cfg: RunConfig, source: str | None, size_key: str):
    d = cfg.data
    if source is not None:
        return load_pairs(source, cfg.degradation)
    if d.synthetic:
        spec = cfg.degradation or DegradationSpec.bi(cfg.model.scale)
        return synthetic_pairs(d.synthetic, d.synthetic_size, spec, seed=cfg.seed)
    raise ConfigError(f"no {size_key} data configured")


def _input_psnr(pairs, model_cfg: ModelConfig) -> list[float]:
    return [psnr(np.clip(residual_base(p.lq, model_cfg).data, 0, 1), p.hq) for p in pairs]


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out = _out_dir(args, cfg)
    pairs = _training_pairs(cfg, cfg.data.train_dir, "training")
    params = init_params(cfg.model, seed=cfg.seed)
    log.info("training %d parameters on %d pairs for %d steps", count_params(params), len(pairs), cfg.optimizer.steps)
    meta = {"seed": cfg.seed, "degradation": cfg.degradation.to_dict() if cfg.degradation else None}
    res = train(
        params,
        cfg.model,
        pairs,
        cfg.optimizer,
        patch_size=cfg.data.patch_size,
        batch_size=cfg.data.batch_size,
        seed=cfg.seed,
        do_augment=cfg.data.augment,
        out_dir=out,
        meta=meta,
    )
    plot_loss_curve(out / "loss.png", {"train": res.losses})
    eval_pairs = load_pairs(cfg.data.eval_dir, cfg.degradation) if cfg.data.eval_dir else pairs
    records, _ = evaluate(params, cfg.model, eval_pairs)
    write_metrics(out, records)
    plot_metrics(out / "metrics.png", [r.id for r in records], [r.psnr_db for r in records],
                 _input_psnr(eval_pairs, cfg.model))
    print(f"checkpoint: {res.checkpoint}")
    print(f"final loss: {res.losses[-1]:.6f}" if res.losses else "final loss: n/a")
    print(f"mean PSNR: {np.mean([r.psnr_db for r in records]):.2f} dB")
    return EXIT_OK


def cmd_eval(args) -> int:
    model_cfg, params, meta = load_checkpoint(args.checkpoint)
    spec = None
    if args.config:
        spec = load_config(args.config, require_data=False).degradation
    elif meta.get("degradation"):
        spec = DegradationSpec.from_dict(meta["degradation"])
    pairs = load_pairs(args.data, spec)
    out = _out_dir(args, default="runs/eval")
    records, outputs = evaluate(params, model_cfg, pairs, ensemble=args.ensemble)
    title = "DIN+" if args.ensemble else "DIN"
    write_metrics(out, records, title)
    for pair, img in zip(pairs, outputs):
        write_image(out / "images" / f"{pair.id}.png", img)
    plot_metrics(out / "metrics.png", [r.id for r in records], [r.psnr_db for r in records],
                 _input_psnr(pairs, model_cfg))
    print((out / "summary.txt").read_text(), end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import run_suite

    rows = run_suite(full=args.full)
    width = max(len(r.name) for r in rows)
    for r in rows:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  {r.kind:<9}  {r.max_rel_error:.3e}  (< {r.tolerance:.0e})  {status}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "gradcheck.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["name", "kind", "max_rel_error", "tolerance", "passed"])
            for r in rows:
                w.writerow([r.name, r.kind, f"{r.max_rel_error:.6e}", r.tolerance, int(r.passed)])
    return EXIT_OK if all(r.passed for r in rows) else EXIT_NUMERICAL


def cmd_params(args) -> int:
    cfg = _model_config(args)
    n = count_params(init_params(cfg))
    print(f"{n} parameters ({n / 1e6:.2f}M) for M={cfg.M} D={cfg.D} B={cfg.B} K={cfg.K} "
          f"C={cfg.channels} G={cfg.growth} task={cfg.task} scale={cfg.scale}")
    return EXIT_OK


def cmd_flops(args) -> int:
    cfg = _model_config(args)
    h, w = args.hw
    n = count_mult_adds(cfg, h, w)
    head = "3x3 conv + 8x8 stride-4 conv (pad 2)" if cfg.task in ("deblur", "dehaze") else "3x3 conv"
    log.info("head: %s; tail: sub-pixel factors %s then 3x3 conv", head, upsample_factors(cfg.scale))
    print(f"{n} mult-adds ({n / 1e9:.2f}G) at {h}x{w} input, task={cfg.task}, head: {head}")
    return EXIT_OK


def cmd_degrade(args) -> int:
    spec = DegradationSpec(kind=args.kind, scale=args.scale, noise_level=args.noise_level, seed=args.seed or 0)
    out = _out_dir(args, default="runs/degraded")
    files = list_images(args.input)
    if not files:
        raise FileNotFoundError(f"no images in {args.input}")
    for f in files:
        hq = read_image(f)
        h, w = hq.shape[2:]
        hq = Tensor(hq.data[:, :, : h - h % spec.scale, : w - w % spec.scale].copy())
        write_image(out / f"{f.stem}.png", degrade(hq, spec, sample_id=f.stem), bits=args.bits)
    print(f"wrote {len(files)} images to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--threads", type=int, default=None, help="cap BLAS threads (env DIN_THREADS)")
    common.add_argument("--out", default=None, help="output directory (env DIN_OUT)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="din", description="Deep interleaved network for image restoration.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("train", parents=[common], help="train from a YAML config")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a directory of pairs")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True, help="directory with hq/ and optionally lq/")
    s.add_argument("--config", default=None, help="take the degradation from this config")
    s.add_argument("--ensemble", action="store_true", help="average over the 8 flips/rotations")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of all ops")
    s.add_argument("--full", action="store_true", help="perturb every coordinate of the composites")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("params", parents=[common], help="count trainable parameters")
    s.add_argument("--config", default=None)
    s.set_defaults(func=cmd_params)

    s = sub.add_parser("flops", parents=[common], help="count mult-adds for one forward pass")
    s.add_argument("--config", default=None)
    s.add_argument("--hw", type=int, nargs=2, metavar=("H", "W"), required=True)
    s.set_defaults(func=cmd_flops)

    s = sub.add_parser("degrade", parents=[common], help="synthesise low-quality images")
    s.add_argument("--input", required=True)
    s.add_argument("--kind", choices=("BI", "BD", "DN"), default="BI")
    s.add_argument("--scale", type=int, default=None)
    s.add_argument("--noise-level", type=float, default=30.0)
    s.add_argument("--bits", type=int, choices=(8, 16), default=8)
    s.set_defaults(func=cmd_degrade)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "scale", None) is None and args.command == "degrade":
        args.scale = 2 if args.kind == "BI" else 3
    threads = args.threads or (int(os.environ["DIN_THREADS"]) if os.environ.get("DIN_THREADS") else None)
    try:
        with threadpool_limits(limits=threads) if threads else nullcontext():
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, CheckpointError, ShapeError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
