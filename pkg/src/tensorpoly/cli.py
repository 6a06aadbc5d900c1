"""Command-line front end.

Exit status: 0 when every check or cell passes, 1 on usage errors, 2 on
numerical failures (gradient mismatch, oracle mismatch, divergence, failed
suite cells).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .adapters import canonical_method, dense_equivalent, flop_extra, param_count, tensorized_vector_count
from .config import load_config_file, parse_overrides
from .gradcheck import VARIANTS, default_dims, check_variant
from .harness import Checkpoint, DivergenceError, ExperimentConfig, adapt, canonical_mode, make_suite, pretrain
from .oracle_suite import OPERATIONS, run_oracle_suite
from .suite import SuiteSpec, read_summary, run_root, run_suite
from .tensor_core import min_base

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# ---------------------------------------------------------------------------
# params / flops


def cmd_params(args) -> int:
    method = args.method.lower()
    try:
        if method == "tlora-vector":
            if args.d is None or args.N is None or args.R is None:
                raise UsageError("tlora-vector needs --d, --N and --R")
            count = tensorized_vector_count(args.d, args.N, args.R)
            dense = args.d
            label = "tlora-vector"
        else:
            label = canonical_method(method)
            count = param_count(label, args.phase, d=args.d, r=args.r, N=args.N, R=args.R, T=args.T, S=args.S)
            dense = dense_equivalent(label, args.d, args.r) if label in ("tlora", "tp1", "tp2", "tpx") else None
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    q = min_base(args.d, args.N) if args.N is not None else None
    print("method\tphase\tparams\tq\tdense_equivalent\tcompression")
    print("\t".join([
        label, args.phase, str(count), "-" if q is None else str(q),
        "-" if dense is None else str(dense),
        "-" if dense is None else f"{dense / count:.2f}x",
    ]))
    return EXIT_OK


def cmd_flops(args) -> int:
    print("d\tr\tR\textra_flops")
    print(f"{args.d}\t{args.r}\t{args.R}\t{flop_extra(args.d, args.r, args.R)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# verification


def cmd_gradcheck(args) -> int:
    variants = VARIANTS if not args.variant else tuple(canonical_method(v) for v in args.variant)
    ok = True
    for v in variants:
        dims = default_dims(v, d_in=args.d_in, d_out=args.d_out, r=args.r, N=args.N, R=args.R)
        report = check_variant(v, dims, seed=args.seed)
        print(report.line())
        ok &= report.passed
    print("gradcheck: all variants pass" if ok else "gradcheck: FAILED")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_oracle(args) -> int:
    cases = run_oracle_suite(args.count, args.seed)
    for op in OPERATIONS:
        mine = [c for c in cases if c.op == op]
        if not mine:
            continue
        bad = sum(not c.passed for c in mine)
        worst = max((c.error for c in mine if not c.integer), default=0.0)
        print(f"{'PASS' if bad == 0 else 'FAIL'} {op:<22} cases={len(mine):<3} "
              f"failures={bad} worst_float_rel_err={worst:.2e}")
    failures = [c for c in cases if not c.passed]
    for c in failures:
        print(c.line())
    print(f"oracle: {len(cases) - len(failures)}/{len(cases)} instances match")
    return EXIT_OK if not failures else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# experiments


def _experiment_config(args) -> tuple[ExperimentConfig, dict]:
    """Built-in defaults, then the config file, then ``--set`` pairs and dedicated flags."""
    data, suite_section = {}, {}
    try:
        if args.config:
            data, suite_section = load_config_file(args.config)
        data.update(parse_overrides(args.set or []))
        for key in ("method", "seed"):
            val = getattr(args, key, None)
            if val is not None:
                data[key] = val
        return ExperimentConfig.from_mapping(data), suite_section
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad configuration: {exc}") from None


def _metrics_sink(path):
    if path is None:
        return None, (lambda rec: None)
    fh = open(path, "x", encoding="utf-8", newline="\n")

    def emit(rec):
        fh.write(json.dumps(rec.as_dict(), sort_keys=True, separators=(",", ":")) + "\n")

    return fh, emit


def cmd_pretrain(args) -> int:
    cfg, _ = _experiment_config(args)
    fh, emit = _metrics_sink(args.metrics)
    try:
        ckpt = pretrain(cfg, emit=emit)
    finally:
        if fh:
            fh.close()
    Path(args.out).write_bytes(ckpt.to_bytes())
    print(f"pretrained {cfg.method} seed={cfg.seed} trainable={ckpt.trainable} -> {args.out}")
    return EXIT_OK


def cmd_adapt(args) -> int:
    ckpt = Checkpoint.from_bytes(Path(args.checkpoint).read_bytes())
    cfg = ckpt.config
    suite = make_suite(cfg)
    if not 0 <= args.task < len(suite.test_tasks):
        raise UsageError(f"--task must index one of the {len(suite.test_tasks)} test tasks")
    task = suite.test_tasks[args.task]
    fh, emit = _metrics_sink(args.metrics)
    try:
        res = adapt(ckpt, task, args.mode, shots=args.shots, epochs=args.epochs, emit=emit)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    finally:
        if fh:
            fh.close()
    print("method\tmode\ttask_id\ttrainable\ttrain_loss\ttest_loss")
    print(f"{cfg.method}\t{args.mode}\t{task.task_id}\t{res.trainable}\t{res.train_loss:.6f}\t{res.test_loss:.6f}")
    return EXIT_OK


def _suite_spec(args) -> SuiteSpec:
    base, section = _experiment_config(args)
    spec = SuiteSpec(base=base)
    methods = args.methods or section.get("methods")
    modes = args.modes or section.get("modes")
    seeds = args.seeds or section.get("seeds")
    try:
        if methods:
            spec.methods = tuple(canonical_method(m) for m in methods)
        if modes:
            spec.modes = tuple(canonical_mode(m) for m in modes)
        if seeds:
            spec.seeds = tuple(int(s) for s in seeds)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return spec


def cmd_run_suite(args) -> int:
    spec = _suite_spec(args)
    out = Path(args.out) if args.out else run_root() / "suite"
    try:
        outcome = run_suite(spec, out, workers=args.workers)
    except FileExistsError as exc:
        raise UsageError(str(exc)) from None
    _print_summary(read_summary(out / "summary.tsv"))
    print(f"wrote {len(outcome.cells)} metrics files and summary.tsv under {out}")
    if not outcome.ok:
        print("some cells failed; see failures.txt", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _print_summary(rows: list[dict]) -> None:
    cols = ["method", "mode", "adapt_params", "pretrain_params", "median_test_loss", "status"]
    widths = {c: max(len(c), *(len(r[c]) for r in rows)) if rows else len(c) for c in cols}
    print("  ".join(c.ljust(widths[c]) for c in cols))
    for r in rows:
        print("  ".join(r[c].ljust(widths[c]) for c in cols))


def direction_checks(rows: list[dict]) -> list[tuple[str, bool, str]]:
    """Latent-expert vs single-adapter ordering and routing-only competitiveness, when present."""
    loss = {(r["method"], r["mode"]): float(r["median_test_loss"]) for r in rows}
    checks = []
    singles = [m for m in ("lora", "tlora") if (m, "full") in loss]
    for m in ("tp1", "poly"):
        if (m, "full") in loss and singles:
            worst_gap = min(loss[(s, "full")] for s in singles) - loss[(m, "full")]
            checks.append((f"{m} full below {'/'.join(singles)} full", worst_gap > 0,
                           f"{loss[(m, 'full')]:.4f} vs min {min(loss[(s, 'full')] for s in singles):.4f}"))
    if ("tp1", "full") in loss and ("tp1", "z-only") in loss:
        ratio = loss[("tp1", "z-only")] / loss[("tp1", "full")]
        checks.append(("tp1 z-only within 2x of full", ratio <= 2.0, f"ratio {ratio:.3f}"))
    return checks


def cmd_report(args) -> int:
    path = Path(args.run) / "summary.tsv"
    if not path.exists():
        raise UsageError(f"no summary.tsv in {args.run}")
    rows = read_summary(path)
    _print_summary(rows)
    ok = all(r["status"] == "ok" for r in rows)
    for name, passed, detail in direction_checks(rows):
        print(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# parser


def _experiment_flags(p):
    p.add_argument("--config", help="TOML file with experiment settings")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field")
    p.add_argument("--method", help="adapter method")
    p.add_argument("--seed", type=int, help="seed override")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    parser = _Parser(prog="tensorpoly", description="Entangled-tensor adapters and latent-expert routing.")
    # accepted before the subcommand too; a separate dest keeps the subparser default from clobbering it
    parser.add_argument("-v", "--verbose", dest="verbose_top", action="count", default=0, help=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("params", parents=[common], help="closed-form parameter count per layer")
    p.add_argument("--method", required=True)
    p.add_argument("--d", type=int, required=True)
    for flag in ("r", "N", "R", "T", "S"):
        p.add_argument(f"--{flag}", type=int)
    p.add_argument("--phase", choices=("pretrain", "finetune"), default="finetune")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("flops", parents=[common], help="extra multiplies spent materializing TLoRA factors")
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--r", type=int, required=True)
    p.add_argument("--R", type=int, required=True)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every variant")
    p.add_argument("--variant", action="append", help="restrict to a variant (repeatable)")
    p.add_argument("--N", type=int)
    p.add_argument("--R", type=int, default=3)
    p.add_argument("--r", type=int, default=2)
    p.add_argument("--d-in", type=int, default=7)
    p.add_argument("--d-out", type=int, default=9)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("oracle", parents=[common], help="random comparisons against brute-force oracles")
    p.add_argument("--count", type=int, default=120)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("pretrain", parents=[common], help="multi-task pretraining on the planted generator")
    _experiment_flags(p)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--metrics", help="write metrics records here (jsonl)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", parents=[common], help="few-shot adaptation of a checkpoint to one test task")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", type=int, default=0, help="index into the test tasks")
    p.add_argument("--mode", default="full", choices=("full", "z-only", "mu-only", "z", "mu"))
    p.add_argument("--shots", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--metrics", help="write metrics records here (jsonl)")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("run-suite", parents=[common], help="methods x modes x seeds grid with summary table")
    _experiment_flags(p)
    p.add_argument("--out", help="run directory (default: $TENSORPOLY_RUN_ROOT/suite)")
    p.add_argument("--methods", nargs="+")
    p.add_argument("--modes", nargs="+")
    p.add_argument("--seeds", nargs="+", type=int)
    p.add_argument("--workers", type=int, help="process pool size (default: $TENSORPOLY_WORKERS or 1)")
    p.set_defaults(func=cmd_run_suite)

    p = sub.add_parser("report", parents=[common], help="print a run's summary and direction checks")
    p.add_argument("run", help="run directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help or a usage error
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    verbose = args.verbose + args.verbose_top
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, FileExistsError) as exc:  # outputs are write-once
        print(f"tensorpoly {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, FloatingPointError) as exc:
        print(f"tensorpoly {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
