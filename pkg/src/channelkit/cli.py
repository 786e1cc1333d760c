"""Command-line entry point: ``channelkit <verb> [flags]``.

Exit codes: 0 success, 1 a verification failed, 2 usage or input error.
``CHANNELKIT_THREADS`` (positive integer) caps kernel worker threads.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import _accel, cost, gradcheck, oracle, zoo
from . import train as tr
from .checkpoint import load_checkpoint
from .errors import ChannelKitError
from .rng import derive_seed

MODEL_CHOICES = ("v1", "v2", "v3", "v1-minus", "mobilenet")


class UsageError(Exception):
    pass


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _nonneg_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {v}")
    return v


def _tau_list(text):
    try:
        taus = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--tau expects comma-separated numbers, got {text!r}") from None
    if not taus or any(t <= 0 for t in taus):
        raise argparse.ArgumentTypeError("--tau values must be positive")
    return taus


# ---------------------------------------------------------------------------
# stats
# ---------------------------------------------------------------------------


def _layer_table(report: cost.CostReport) -> str:
    lines = [f"{report.model_name}",
             f"{'layer':<24} {'params':>12} {'flops':>15}  output"]
    for l in report.per_layer:
        shape = "x".join(str(d) for d in l.output_shape[1:])
        lines.append(f"{l.layer_name:<24} {l.params:>12,} {l.flops:>15,}  {shape}")
    lines.append(f"{'TOTAL':<24} {report.total_params:>12,} {report.total_flops:>15,}")
    return "\n".join(lines)


def comparison_matrix(input_size: int = 224, n_classes: int = 1000):
    """Rows of (label, quantity, computed, reported, rel_diff, tolerance, ok)."""
    rows = []
    for (version, alpha), (params, flops, tol) in cost.REPORTED_TOTALS.items():
        spec = zoo.build_model_spec(version, alpha, n_classes, input_size)
        rep = cost.cost_model_total(spec)
        for quantity, computed, reported in (("params", rep.total_params, params),
                                             ("flops", rep.total_flops, flops)):
            if reported is None:
                continue
            rel = computed / reported - 1.0
            rows.append((spec.name, quantity, computed, reported, rel, tol, abs(rel) <= tol))
    return rows


def _matrix_text(rows) -> str:
    lines = [f"{'model':<24} {'qty':<6} {'computed':>13} {'reported':>13} "
             f"{'diff':>8} {'tol':>5}  within"]
    for name, qty, comp, rep, rel, tol, ok in rows:
        lines.append(f"{name:<24} {qty:<6} {comp:>13,} {int(rep):>13,} {rel:>+8.2%} "
                     f"{tol:>5.0%}  {'yes' if ok else 'NO'}")
    return "\n".join(lines)


def cmd_stats(args) -> int:
    if args.model == "all":
        print(_matrix_text(comparison_matrix(args.input_size, args.classes)))
        return 0
    spec = zoo.build_model_spec(args.model, args.alpha, args.classes, args.input_size)
    report = cost.cost_model_total(spec)
    print(_layer_table(report))
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    return 0


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    if sum(a is not None for a in (args.op, args.model, args.block)) != 1:
        raise UsageError("gradcheck needs exactly one of --op, --model, --block")
    if args.op is not None:
        if args.op not in gradcheck.OP_CASES:
            raise UsageError(f"unknown operator {args.op!r}; known: "
                             f"{', '.join(sorted(gradcheck.OP_CASES))}")
        reports = gradcheck.check_op(args.op, args.seed, args.tol)
    elif args.block is not None:
        reports = gradcheck.check_block(args.block, seed=args.seed, tol=args.tol)
    else:
        spec = zoo.build_model_spec(args.model, args.alpha, args.classes, args.input_size)
        reports = gradcheck.check_model(spec, seed=args.seed, tol=args.tol,
                                        max_elements=args.max_elements)
    print(gradcheck.format_table(reports))
    ok = gradcheck.all_passed(reports)
    print(f"{sum(r.passed for r in reports)}/{len(reports)} blocks passed at tol {args.tol:g}")
    return 0 if ok else 1


def cmd_oracle(args) -> int:
    if args.trials < 1:
        raise UsageError(f"--trials must be >= 1, got {args.trials}")
    results = oracle.run_suite(args.trials, args.seed)
    print(oracle.format_table(results))
    return 0 if all(r.passed for r in results) else 1


# ---------------------------------------------------------------------------
# training and analysis
# ---------------------------------------------------------------------------


def _load_data(args, spec):
    kind, _, path = args.dataset.partition(":")
    if kind == "synthetic":
        train = tr.synthetic_dataset(spec.n_classes, args.per_class, spec.input_size,
                                     args.seed, args.noise)
        held = tr.synthetic_dataset(spec.n_classes, max(args.per_class // 5, 1), spec.input_size,
                                    derive_seed(args.seed, "eval"), args.noise,
                                    prototypes=train.prototypes)
        return train, held
    if kind == "cifar10":
        if not path:
            raise UsageError("--dataset cifar10 needs a path: cifar10:DIR")
        if not Path(path).is_dir():
            raise UsageError(f"CIFAR-10 directory {path!r} not found")
        if spec.input_size != 32 or spec.n_classes != 10:
            raise UsageError("CIFAR-10 needs --input-size 32 and --classes 10")
        return tr.load_cifar10(path, args.train_limit, args.test_limit)
    raise UsageError(f"--dataset must be 'synthetic' or 'cifar10:PATH', got {args.dataset!r}")


def cmd_train(args) -> int:
    spec = zoo.build_model_spec(args.model, args.alpha, args.classes, args.input_size)
    if args.config:
        config = tr.load_train_config(args.config)
        if args.epochs is not None:
            config = config.with_epochs(args.epochs)
    else:
        config = tr.TrainConfig(base_lr=args.lr, decay_epochs=(), batch_size=args.batch_size,
                                total_epochs=30 if args.epochs is None else args.epochs,
                                seed=args.seed)
    train_set, eval_set = _load_data(args, spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    zoo.save_model_config(out / "model.json", spec)
    (out / "train_config.json").write_text(config.to_json())
    net = zoo.build_network(spec, config.seed)
    try:
        metrics = tr.train(net, train_set, config, eval_set, out)
    except tr.TrainingDiverged as exc:
        print(f"training diverged: {exc}; last good checkpoint kept in {out}", file=sys.stderr)
        return 1
    last = metrics.final
    print(f"{spec.name}: {len(metrics.rows) - 1} epochs, train_top1 {last.train_top1:.4f}, "
          f"eval_top1 {last.eval_top1:.4f}; wrote {out / 'metrics.csv'}")
    return 0


def cmd_analyze_fc(args) -> int:
    path = Path(args.checkpoint)
    if not path.is_file():
        raise UsageError(f"checkpoint {path} not found")
    blocks = load_checkpoint(path)
    fc = [k for k in blocks if k.endswith(".fc.weight")]
    if not fc:
        ccl = [k for k in blocks if k.endswith(".ccl.weight")]
        if ccl:
            raise UsageError(f"checkpoint classifier is a ccl ({ccl[0]}), not fully connected; "
                             "nothing to analyze")
        raise UsageError("checkpoint holds no fully-connected classifier weights")
    report = tr.analyze_fc_sparsity(blocks[fc[0]], args.tau)
    print(f"{fc[0]}: shape {blocks[fc[0]].shape}")
    print(report.to_text())
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_model_flags(p, default_model, alpha, classes, size, allow_all=False):
    choices = MODEL_CHOICES + (("all",) if allow_all else ())
    p.add_argument("--model", choices=choices, default=default_model)
    p.add_argument("--alpha", type=float, default=alpha)
    p.add_argument("--classes", type=_positive_int, default=classes)
    p.add_argument("--input-size", type=_positive_int, default=size)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="channelkit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("stats", help="per-layer parameter and FLOP counts")
    _add_model_flags(p, "v1", 1.0, 1000, 224, allow_all=True)
    p.add_argument("--csv", metavar="PATH")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--op")
    p.add_argument("--block", choices=("gm", "gcwm"))
    p.add_argument("--model", choices=MODEL_CHOICES)
    p.add_argument("--alpha", type=float, default=gradcheck.DESK_DEFAULTS["alpha"])
    p.add_argument("--classes", type=_positive_int, default=gradcheck.DESK_DEFAULTS["n_classes"])
    p.add_argument("--input-size", type=_positive_int, default=gradcheck.DESK_DEFAULTS["input_size"])
    p.add_argument("--max-elements", type=_positive_int, default=8,
                   help="elements probed per parameter block (models only)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=gradcheck.TOL)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("oracle", help="dense-oracle equivalence suite")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("train", help="desk-scale training run")
    _add_model_flags(p, "v3", 0.125, 10, 32)
    p.add_argument("--dataset", default="synthetic", help="synthetic | cifar10:DIR")
    p.add_argument("--epochs", type=_nonneg_int)
    p.add_argument("--config", metavar="PATH", help="JSON train config")
    p.add_argument("--out", metavar="DIR", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch-size", type=_positive_int, default=32)
    p.add_argument("--per-class", type=_positive_int, default=50, help="synthetic samples per class")
    p.add_argument("--noise", type=float, default=0.5, help="synthetic noise scale")
    p.add_argument("--train-limit", type=_positive_int, help="first N CIFAR-10 training images")
    p.add_argument("--test-limit", type=_positive_int, help="first N CIFAR-10 test images")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("analyze-fc", help="sparsity of a fully-connected classifier")
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--tau", type=_tau_list, default=list(tr.DEFAULT_TAUS),
                   help="comma-separated thresholds")
    p.add_argument("--csv", metavar="PATH")
    p.set_defaults(func=cmd_analyze_fc)
    return parser


def _apply_thread_cap() -> None:
    raw = os.environ.get("CHANNELKIT_THREADS")
    if raw is None or raw == "":
        return
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"CHANNELKIT_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"CHANNELKIT_THREADS must be a positive integer, got {raw!r}")
    _accel.set_num_threads(n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _apply_thread_cap()
        return args.func(args)
    except UsageError as exc:
        print(f"channelkit {args.verb}: {exc}", file=sys.stderr)
        return 2
    except ChannelKitError as exc:
        print(f"channelkit {args.verb}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
