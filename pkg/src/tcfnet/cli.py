"""Command-line entry point: ``tcfnet {generate,train,evaluate,compare,stats}``.

Every command exits 0 on success. On failure it prints one line
``error: <command>: <message>`` to stderr and exits with status 1 (2 for
usage errors).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import config as cfgmod
from .architectures import TOPOLOGIES
from .evaluation import STRATEGIES

log = logging.getLogger("tcfnet")

ENV_DATA = "TCFNET_DATA_DIR"


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # single-line usage errors
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {self.prog}: {message}\n")
        sys.exit(2)


def _data_dir(value) -> str:
    d = value or os.environ.get(ENV_DATA)
    if not d:
        raise CliError(f"no dataset given: pass --data or set {ENV_DATA}")
    return d


def cmd_generate(args) -> int:
    from .sim import GeneratorConfig, generate_dataset

    cfg = GeneratorConfig.preset(args.snr, subjects=args.subjects, sessions=args.sessions,
                                 runs_per_session=args.runs, seed=args.seed)
    ds = generate_dataset(cfg, args.out, progress=lambda r: log.info("run sub-%02d ses-%d run-%d", r.subject, r.session, r.run))
    print(f"dataset_hash={ds.dataset_hash} runs={len(ds.entries)} out={args.out}")
    return 0


def _train_overrides(args) -> dict:
    o = dict(args.set or {})
    for key in ("architecture", "strategy", "seed", "lr", "batch", "max_epochs", "patience", "fnb_k", "window_ms", "subjects"):
        v = getattr(args, key, None)
        if v is not None:
            o[key] = v
    return o


def _resolve_run_config(args) -> dict:
    file_values = cfgmod.read_file(args.config) if args.config else {}
    cfg = cfgmod.resolve(file_values, _train_overrides(args))
    if cfg["architecture"] not in TOPOLOGIES:
        raise CliError(f"unknown architecture {cfg['architecture']!r}; valid: {', '.join(TOPOLOGIES)}")
    if cfg["strategy"] not in STRATEGIES:
        raise CliError(f"unknown strategy {cfg['strategy']!r}; valid: {', '.join(STRATEGIES)}")
    return cfg


def cmd_train(args) -> int:
    from .experiment import run_training

    cfg = _resolve_run_config(args)
    man = run_training(cfg, _data_dir(args.data), args.out, jobs=args.jobs, resume=not args.fresh,
                       stop_after=args.stop_after_epochs)
    print(f"config_hash={man['config_hash']} folds={len(man['folds'])} out={args.out}")
    return 0


def cmd_evaluate(args) -> int:
    from .experiment import run_evaluation

    if args.checkpoints is None and not args.oracle:
        raise CliError("pass --checkpoints DIR (or --oracle)")
    cfg = None
    if args.checkpoints is None:
        file_values = cfgmod.read_file(args.config) if args.config else {}
        cfg = cfgmod.resolve(file_values, {k: v for k, v in (("strategy", args.strategy), ("subjects", args.subjects)) if v})
    recs = run_evaluation(args.checkpoints, _data_dir(args.data), args.out, args.max_blocks, args.oracle,
                          args.strategy if args.checkpoints else None, cfg)
    for r in recs:
        print(f"{r.topology} {r.fold} accuracy={r.accuracy:.2f} ce={r.cross_entropy:.4f}")
    return 0


def _read_records(paths):
    from .evaluation import read_results

    recs = []
    for p in paths:
        try:
            recs += read_results(Path(p).read_text())
        except FileNotFoundError:
            raise CliError(f"{p}: results file not found") from None
    return recs


def cmd_compare(args) -> int:
    from .evaluation import compare_csv, compare_report

    rows = compare_report(_read_records(args.results), unit=args.unit)
    text = compare_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_stats(args) -> int:
    from .evaluation import stats_report

    text = stats_report(_read_records(args.results), unit=args.unit)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def _kv(s: str):
    if "=" not in s:
        raise argparse.ArgumentTypeError(f"expected key=value, got {s!r}")
    k, v = s.split("=", 1)
    return k.strip(), v.strip()


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tcfnet", description="P300 decoding with EEG-TCFNet and baselines on synthetic sessions.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="simulate a P300 dataset")
    g.add_argument("--subjects", type=int, default=9)
    g.add_argument("--sessions", type=int, default=4)
    g.add_argument("--runs", type=int, default=6, help="runs per session")
    g.add_argument("--seed", type=int, default=42)
    g.add_argument("--snr", default="high", choices=["high", "medium", "street-noise"])
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one checkpoint per cross-validation fold")
    t.add_argument("--arch", dest="architecture", help=f"one of {', '.join(TOPOLOGIES)}")
    t.add_argument("--strategy", help=f"one of {', '.join(STRATEGIES)}")
    t.add_argument("--data", help=f"dataset directory (default ${ENV_DATA})")
    t.add_argument("--config", help="key=value config file")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch", type=int)
    t.add_argument("--max-epochs", dest="max_epochs", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--fnb-k", dest="fnb_k", type=int)
    t.add_argument("--window-ms", dest="window_ms", type=float)
    t.add_argument("--subjects", help="comma-separated subject ids (default: all)")
    t.add_argument("--set", type=_kv, action="append", help="extra key=value override")
    t.add_argument("--jobs", type=int, default=1, help="folds trained in parallel")
    t.add_argument("--fresh", action="store_true", help="ignore existing fold state and checkpoints")
    t.add_argument("--stop-after-epochs", type=int, help=argparse.SUPPRESS)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score checkpoints: results and target-by-block curves")
    e.add_argument("--checkpoints", help="training output directory")
    e.add_argument("--data")
    e.add_argument("--max-blocks", dest="max_blocks", type=int, default=20)
    e.add_argument("--out", required=True)
    e.add_argument("--oracle", action="store_true", help="score with true labels instead of a model")
    e.add_argument("--strategy", help="fold strategy (oracle mode)")
    e.add_argument("--subjects", help="comma-separated subject ids (oracle mode)")
    e.add_argument("--config")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("compare", help="base vs fuzzy-block comparison table")
    c.add_argument("--results", nargs="+", required=True)
    c.add_argument("--unit", choices=["subject", "fold"], default="subject")
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)

    s = sub.add_parser("stats", help="Wilcoxon and Kolmogorov-Smirnov report")
    s.add_argument("--results", nargs="+", required=True)
    s.add_argument("--unit", choices=["subject", "fold"], default="subject")
    s.add_argument("--out")
    s.set_defaults(func=cmd_stats)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, ValueError, KeyError, OSError) as exc:
        msg = str(exc).replace("\n", " ")
        sys.stderr.write(f"error: {args.command}: {msg}\n")
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
