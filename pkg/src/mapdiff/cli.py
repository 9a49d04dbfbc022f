"""Command-line entry point: ``mapdiff <subcommand> ...``.

Usage errors exit with 2, runtime failures with 1 and a one-line diagnostic.
``BD_DETERMINISTIC=1`` forces single-threaded execution everywhere.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import config as C
from . import degrade as D
from . import gradsuite
from . import kernels as K
from . import report as R
from . import train as TR
from .data import FolderCorpus, SyntheticCorpus, load_png, save_png, textured_image
from .metrics import ExperimentReport, ReportRow, kernel_l1, lr_consistency_psnr, psnr
from .sample import SamplerConfig, lambda_sweep, sample, toy_suite, write_sweep_csv
from .tensor.checkpoint import CheckpointError

log = logging.getLogger("mapdiff")

# stream ids for CLI-level randomness
STREAM_SYNTH = 10
STREAM_DEGRADE = 11
STREAM_RESTORE = 12


class CLIError(RuntimeError):
    pass


def _floats(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _nonneg(text: str) -> float:
    v = float(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {text}")
    return v


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
    return v


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _fan_out(fn: Callable, items: Sequence, workers: int) -> list:
    """Map ``fn`` over ``items``, threaded unless determinism mode is on; order is kept."""
    if workers <= 1 or TR.deterministic_mode() or len(items) <= 1:
        return [fn(i, item) for i, item in enumerate(items)]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(lambda pair: fn(*pair), enumerate(items)))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    """Write textured HR images, random kernels and a manifest referencing them."""
    out = Path(args.out)
    (out / "hr").mkdir(parents=True, exist_ok=True)
    (out / "kernels").mkdir(exist_ok=True)
    rng = TR.stream(args.seed, STREAM_SYNTH)
    rows = []
    for i in range(args.n):
        img = textured_image(np.random.default_rng([args.seed, STREAM_SYNTH, i]), args.size, args.size)
        k = K.sample_kernel(args.family, rng)
        hr, kp = out / "hr" / f"img{i:03d}.png", out / "kernels" / f"img{i:03d}.bdk"
        save_png(hr, img)
        K.save_kernel(kp, k)
        rows.append(D.ManifestRow(str(hr), str(kp), args.scale, args.noise))
    D.write_manifest(out / "manifest.tsv", rows)
    print(out / "manifest.tsv")
    return 0


def cmd_degrade(args) -> int:
    rows = D.read_manifest(args.manifest)
    out = Path(args.out)
    (out / "lr").mkdir(parents=True, exist_ok=True)
    (out / "kernels").mkdir(exist_ok=True)
    lr_rows = []
    for i, row in enumerate(rows):
        x = load_png(row.hr_path)
        k = K.load_kernel(row.kernel_path)
        _, h, w = x.shape
        if h % row.scale or w % row.scale:
            raise CLIError(f"{row.hr_path}: {h}x{w} not divisible by scale {row.scale}")
        y = D.apply(D.DegradationSpec(k, row.scale, row.noise_sigma), x,
                    TR.stream(args.seed, STREAM_DEGRADE, i))
        stem = Path(row.hr_path).stem
        lr_path, k_path = out / "lr" / f"{stem}.png", out / "kernels" / f"{stem}.bdk"
        save_png(lr_path, y)
        K.save_kernel(k_path, k)
        lr_rows.append(D.ManifestRow(str(lr_path), str(k_path), row.scale, row.noise_sigma))
    D.write_manifest(out / "lr_manifest.tsv", lr_rows)
    log.info("degraded %d images into %s", len(rows), out)
    return 0


def cmd_fit_pca(args) -> int:
    pca = TR.default_pca(seed=args.seed, n=args.n, d=args.d)
    K.save_pca(args.out, pca)
    print(f"d={pca.d} fit_mse={pca.fit_mse!r}")
    return 0


def _experiment(args) -> C.ExperimentConfig:
    overrides = {
        "optimizer": {"total_iters": args.iters, "seed": args.seed, "lr": args.lr},
        "io": {"workers": args.workers},
    }
    return C.load(args.config, preset=args.preset, overrides=overrides)


def cmd_train(args) -> int:
    cfg = _experiment(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    C.dump(cfg, out / "config.ini")
    pca = K.load_pca(args.pca) if args.pca else TR.default_pca()
    if cfg.corpus == "synthetic":
        corpus = SyntheticCorpus(size=max(2 * cfg.train.hr_patch, 64), seed=cfg.train.seed)
    else:
        corpus = FolderCorpus.from_dir(cfg.corpus)
    sched = cfg.schedule()
    model = TR.build_model(cfg.model, cfg.train.seed)
    held = TR.make_heldout(cfg.train, pca, sched)
    before = TR.evaluate(model, sched, held)
    ckpt = TR.train_loop(cfg.train, model, corpus, pca, sched, out, resume=not args.no_resume)
    after = TR.evaluate(model, sched, held)
    print(f"held-out eps_mse {before[0]:.6g} -> {after[0]:.6g}; kernel_l1 {before[1]:.6g} -> {after[1]:.6g}")
    print(ckpt)
    if args.report:
        R.plot_training(TR.read_metrics(out / TR.METRICS_NAME), out / "training.png")
    return 0


def _restore_one(ck: TR.Checkpoint, y: np.ndarray, s: int, lam: float, seed: int, trace_every: int):
    model = copy.deepcopy(ck.model)  # parameter gradients are scratch state; keep threads apart
    _, h, w = y.shape
    mult = 2 ** (model.cfg.levels - 1)
    if (h * s) % mult or (w * s) % mult:
        raise CLIError(f"output extent {h * s}x{w * s} must be divisible by {mult}")
    return sample(model, ck.sched, y, s, ck.pca, SamplerConfig(lam=lam, seed=seed, trace_every=trace_every))


def cmd_restore(args) -> int:
    ck = TR.load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def run(i, path):
        y = load_png(path)
        res = _restore_one(ck, y, args.scale, args.lam, args.seed + i, args.trace_every)
        stem = Path(path).stem
        np.save(out / f"{stem}_sr.npy", res.x0_hat)
        save_png(out / f"{stem}_sr.png", res.x0_hat)
        K.save_kernel(out / f"{stem}_kernel.bdk", res.kernels[0])
        res.trace.write_csv(out / f"{stem}_trace.csv")
        if args.report:
            R.plot_trace(res.trace, out / f"{stem}_trace.png")
        return stem

    for stem in _fan_out(run, list(args.inputs), args.workers):
        print(out / f"{stem}_sr.png")
    return 0


def cmd_eval(args) -> int:
    ck = TR.load_checkpoint(args.checkpoint)
    rows = D.read_manifest(args.manifest)
    if not rows:
        raise CLIError(f"{args.manifest}: no rows")
    config = {"checkpoint": _sha256(args.checkpoint), "manifest": _sha256(args.manifest),
              "lambda": args.lam, "seed": args.seed, "trace_every": args.trace_every}

    def run(i, row):
        x = load_png(row.hr_path)
        k_gt = K.load_kernel(row.kernel_path)
        y_clean = D.blur_downsample(x, k_gt, row.scale)
        y = D.apply(D.DegradationSpec(k_gt, row.scale, row.noise_sigma), x,
                    TR.stream(args.seed, STREAM_DEGRADE, i))
        res = _restore_one(ck, y, row.scale, args.lam, args.seed + i, args.trace_every)
        k_hat = res.kernels[0]
        return ReportRow(Path(row.hr_path).stem, psnr(np.clip(res.x0_hat, 0, 1), x),
                         kernel_l1(k_hat, K.pad_kernel(k_gt, k_hat.size)),
                         lr_consistency_psnr(k_hat, x, y_clean, row.scale))

    rep = ExperimentReport(config, _fan_out(run, rows, args.workers))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rep.write_csv(out)
    if args.report:
        R.plot_report(rep.rows, out.with_suffix(".png"))
    agg = rep.aggregates()
    print(f"psnr {agg['psnr']:.4f} kernel_l1 {agg['kernel_l1']:.6g} lr_psnr {agg['lr_psnr']:.4f}")
    return 0


def cmd_lambda_sweep(args) -> int:
    ck = TR.load_checkpoint(args.checkpoint)
    suite = toy_suite(args.n, args.size, args.scale, args.family, args.suite_seed)
    rows = lambda_sweep(ck.model, ck.sched, suite, args.lambdas, ck.pca, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(out / "lambda_sweep.csv", rows)
    if args.report:
        R.plot_sweep(rows, out / "lambda_sweep.png")
    for r in rows:
        print(f"lambda={r.lam:g} psnr={r.psnr:.4f} residual={r.residual:.6g} kernel_l1={r.kernel_l1:.6g}")
    return 0


def cmd_gradcheck(args) -> int:
    results = gradsuite.run(seeds=args.seeds, network=not args.no_network)
    failed = 0
    for r in results:
        status = "ok" if r.ok else "FAIL"
        failed += not r.ok
        print(f"{status:4s} {r.name:28s} max_rel_err={r.worst:.3e} tol={r.tol:g} seeds={r.seeds}")
    print(f"{len(results) - failed}/{len(results)} cases passed")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mapdiff", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("synth", help="write a synthetic HR set with kernels and a manifest")
    q.add_argument("--out", required=True)
    q.add_argument("--n", type=_positive_int, default=8)
    q.add_argument("--size", type=_positive_int, default=32)
    q.add_argument("--family", choices=["iso", "aniso"], default="iso")
    q.add_argument("--scale", type=_positive_int, default=2)
    q.add_argument("--noise", type=_nonneg, default=0.0)
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(fn=cmd_synth)

    q = sub.add_parser("degrade", help="manifest of HR images and kernels in, LR images out")
    q.add_argument("--manifest", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(fn=cmd_degrade)

    q = sub.add_parser("fit-pca", help="fit the kernel code space")
    q.add_argument("--out", required=True)
    q.add_argument("--n", type=_positive_int, default=10_000)
    q.add_argument("--d", type=_positive_int, default=K.DEFAULT_CODE_DIM)
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(fn=cmd_fit_pca)

    q = sub.add_parser("train", help="train the denoiser")
    q.add_argument("--out", required=True)
    q.add_argument("--config", default=None, help="INI file layered over the preset")
    q.add_argument("--preset", choices=sorted(C.PRESETS), default="desk")
    q.add_argument("--pca", default=None, help="BDP1 file; fitted on the fly when omitted")
    q.add_argument("--iters", type=int, default=None)
    q.add_argument("--seed", type=int, default=None)
    q.add_argument("--lr", type=_nonneg, default=None)
    q.add_argument("--workers", type=int, default=None)
    q.add_argument("--no-resume", action="store_true")
    q.add_argument("--report", action="store_true", help="render training curves")
    q.set_defaults(fn=cmd_train)

    def restore_opts(q):
        q.add_argument("--checkpoint", required=True)
        q.add_argument("--lambda", dest="lam", type=_nonneg, default=1.0)
        q.add_argument("--seed", type=int, default=0)
        q.add_argument("--trace-every", type=_positive_int, default=1)
        q.add_argument("--workers", type=int, default=0)
        q.add_argument("--report", action="store_true", help="render figures next to the CSVs")

    q = sub.add_parser("restore", help="super-resolve LR PNGs, writing image, kernel and trace")
    restore_opts(q)
    q.add_argument("--scale", type=_positive_int, required=True)
    q.add_argument("--out", required=True)
    q.add_argument("inputs", nargs="+")
    q.set_defaults(fn=cmd_restore)

    q = sub.add_parser("eval", help="restore every manifest row and write a report CSV")
    restore_opts(q)
    q.add_argument("--manifest", required=True)
    q.add_argument("--out", required=True, help="report CSV path")
    q.set_defaults(fn=cmd_eval)

    q = sub.add_parser("lambda-sweep", help="guidance-weight sweep on the toy suite")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--lambdas", type=_floats, default=[0.0, 0.1, 1.0, 5.0, 10.0])
    q.add_argument("--n", type=_positive_int, default=8)
    q.add_argument("--size", type=_positive_int, default=32)
    q.add_argument("--scale", type=_positive_int, default=2)
    q.add_argument("--family", choices=["iso", "aniso"], default="iso")
    q.add_argument("--suite-seed", type=int, default=777)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--report", action="store_true")
    q.set_defaults(fn=cmd_lambda_sweep)

    q = sub.add_parser("gradcheck", help="finite-difference suites over ops and the network")
    q.add_argument("--seeds", type=_positive_int, default=20)
    q.add_argument("--no-network", action="store_true")
    q.set_defaults(fn=cmd_gradcheck)
    return p


RUNTIME_ERRORS = (CLIError, C.ConfigError, CheckpointError, TR.TrainingError, OSError, ValueError,
                  KeyError, RuntimeError)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "lambdas", None) is not None and any(v < 0 for v in args.lambdas):
        parser.print_usage(sys.stderr)
        print("mapdiff: error: lambdas must be non-negative", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except RUNTIME_ERRORS as exc:
        print(f"mapdiff {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
