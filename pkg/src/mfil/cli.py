"""Command-line entry point: verify | train | eval | report."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import backbone as bb
from . import theory
from .analysis import erf, saliency
from .checkpoint import CheckpointError, load_checkpoint, load_into
from .config import ConfigError, RunConfig, load_run_config
from .data import SyntheticDataset
from .imageio import write_matrix_text, write_pgm
from .scan import SOBEL_X
from .tensor import Tensor
from .train import TrainAbort, evaluate, train_run
from .verify import SUITES, run_suites

_SCAN_MODE_ALIASES = {
    "multi_filter": "multi_filter",
    "single_flatten": "single_flatten",
    "cross_4dir": "cross_4dir",
    "orig_plus_one": "original_plus_one_filter",
    "original_plus_one_filter": "original_plus_one_filter",
}


def _add_model_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, default=None,
                   help="key = value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", type=Path, default=None, help="output directory")
    p.add_argument("--variant", choices=sorted(bb.VARIANTS), default=None)
    p.add_argument("--scan-mode", choices=sorted(_SCAN_MODE_ALIASES),
                   default=None)
    p.add_argument("--no-adaptive-weighting", action="store_true")
    p.add_argument("--d-state", type=int, default=None)
    p.add_argument("--ssm-ratio", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)


def _run_config_from_args(args) -> RunConfig:
    overrides = dict(
        seed=args.seed,
        variant=args.variant,
        scan_mode=(_SCAN_MODE_ALIASES[args.scan_mode]
                   if args.scan_mode else None),
        d_state=args.d_state,
        ssm_ratio=args.ssm_ratio,
        steps=getattr(args, "steps", None),
        out_dir=str(args.out) if args.out else None,
    )
    if args.no_adaptive_weighting:
        overrides["adaptive_weighting"] = False
    return load_run_config(args.config, **overrides)


def cmd_verify(args) -> int:
    results = run_suites(args.suite or None, quick=args.quick)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"VERIFY: FAIL ({', '.join(failed)})")
        return 1
    print("VERIFY: PASS")
    return 0


def cmd_train(args) -> int:
    try:
        cfg = _run_config_from_args(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        result = train_run(cfg)
    except TrainAbort as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 3
    print(f"final train accuracy: {result.final_acc:.4f}")
    print(f"final train loss: {result.final_loss:.4f}")
    print(f"metrics: {result.metrics_path}")
    print(f"checkpoint: {result.checkpoints[-1]}")
    for name, drift in sorted(result.alpha_drift.items()):
        print(f"adaptive-weight drift {name}: {drift:.6f}")
    print(f"adaptive-weight drift total: {result.total_drift:.6f}")
    return 0


def cmd_eval(args) -> int:
    try:
        cfg = _run_config_from_args(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    model = bb.build(cfg.model_config(), seed=cfg.seed, dtype=cfg.dtype)
    try:
        load_into(model.parameters(), load_checkpoint(args.checkpoint))
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 2
    dataset = SyntheticDataset(cfg.image_size, cfg.num_classes,
                               cfg.dataset_size, cfg.noise, seed=cfg.seed)
    acc, loss = evaluate(model, dataset, cfg.batch_size)
    print(f"top-1 accuracy: {acc:.4f}")
    print(f"mean loss: {loss:.4f}")
    return 0


def _report_params() -> int:
    print("variant  params      reference  deviation")
    for name in ("tiny", "small", "base"):
        cfg = bb.VARIANTS[name]()
        n = bb.count_params(cfg)
        ref = bb.REFERENCE_PARAMS[name]
        print(f"{name:<8} {n / 1e6:>8.2f}M  {ref / 1e6:>7.1f}M "
              f"{100 * (n - ref) / ref:>+8.1f}%")
    return 0


def _report_flops() -> int:
    print("variant  flops(224)  reference  deviation")
    for name in ("tiny", "small", "base"):
        cfg = bb.VARIANTS[name]()
        f = bb.count_flops(cfg, 224, 224)
        ref = bb.REFERENCE_FLOPS[name]
        print(f"{name:<8} {f / 1e9:>9.2f}G  {ref / 1e9:>7.1f}G "
              f"{100 * (f - ref) / ref:>+8.1f}%")
    return 0


def _report_erf(out_dir: Path, seed: int) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = bb.desk()
    model = bb.build(cfg, seed=seed)
    for label, net in (("desk", model),
                       ("conv-baseline",
                        bb.build_conv_baseline(cfg, seed=seed))):
        fmap = erf(net, 192, stage=3, samples=16, seed=seed)
        pgm = out_dir / f"erf-{label}.pgm"
        txt = out_dir / f"erf-{label}.txt"
        write_pgm(pgm, fmap.grid)
        write_matrix_text(txt, fmap.grid)
        print(f"{label}: coverage {fmap.coverage():.4f} -> {pgm}, {txt}")
    dataset = SyntheticDataset(image_size=64, num_classes=cfg.num_classes,
                               size=4, seed=seed)
    img, labels = dataset.batch([0])
    sal = saliency(model, Tensor(img[0], dtype="f32"), int(labels[0]))
    write_pgm(out_dir / "saliency-desk.pgm", sal)
    write_matrix_text(out_dir / "saliency-desk.txt", sal)
    print(f"saliency (class {int(labels[0])}) -> "
          f"{out_dir / 'saliency-desk.pgm'}")
    return 0


def _report_covariance() -> int:
    rng = np.random.default_rng(0)
    samples = rng.standard_normal((200, 36))
    moments = theory.empirical_moments(samples)
    p_i = theory.permutation_matrix(rng.permutation(36))
    p_j = theory.permutation_matrix(rng.permutation(36))
    sob = theory.conv_as_matrix(SOBEL_X, 6, 6, padding=1)
    print(theory.verify_permutation_identity(p_i, p_j, moments, samples))
    print(theory.verify_filter_identity(sob, sob, moments, samples))
    print(theory.spectrum_report(moments.covariance, p_i, sob))
    return 0


def cmd_report(args) -> int:
    if args.kind == "params":
        return _report_params()
    if args.kind == "flops":
        return _report_flops()
    if args.kind == "erf":
        return _report_erf(args.out or Path("reports"), args.seed or 0)
    return _report_covariance()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mfil",
        description="Multi-filter visual state-space model: training and "
                    "verification harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p_verify = sub.add_parser("verify", help="run every verification suite")
    p_verify.add_argument("--suite", action="append", choices=sorted(SUITES),
                          help="run only the named suite (repeatable)")
    p_verify.add_argument("--quick", action="store_true",
                          help="reduced case counts (development aid)")
    p_verify.set_defaults(func=cmd_verify)

    p_train = sub.add_parser("train", help="train on the synthetic dataset")
    _add_model_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", type=Path, required=True)
    _add_model_flags(p_eval)
    p_eval.set_defaults(func=cmd_eval)

    p_report = sub.add_parser("report", help="emit structured reports")
    p_report.add_argument("--kind", required=True,
                          choices=("params", "flops", "erf", "covariance"))
    p_report.add_argument("--out", type=Path, default=None)
    p_report.add_argument("--seed", type=int, default=None)
    p_report.set_defaults(func=cmd_report)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
