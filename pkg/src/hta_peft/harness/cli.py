"""Command-line entry point: ``hta-peft <subcommand> [--config F] [--seed N] [--out DIR] [--variant NAME]``.

Exit status is 0 only when every check the subcommand performs passes.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from ..adapters import ConfigError, param_count
from . import checks
from .experiment import (
    ExperimentConfig,
    report_spectra,
    run_comparison,
    run_trial,
    sweep_bottleneck,
    vitb_reference,
)


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, output_dir=args.out)
    if args.variant:
        cfg = cfg.select(args.variant)
    return cfg


def _table(header: Sequence[str], rows) -> str:
    cells = [list(map(str, header))] + [[f"{c:.4f}" if isinstance(c, float) else str(c) for c in r] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells)


def _progress(tr) -> None:
    r = tr.record
    print(f"  {tr.variant.name} trial {tr.trial}: eval {r.final_eval_acc:.4f} "
          f"train loss {r.final_train_loss:.4f} ({r.wall_time:.1f}s)", flush=True)


def cmd_compare(args) -> int:
    cfg = _load(args)
    res = run_comparison(cfg, progress=_progress)
    print(_table(("variant", "params", "trials", "median_eval", "min_eval", "max_eval", "mean_eval",
                  "median_loss", "aborted"), res.aggregate_rows()))
    print(f"wrote {len(res.files)} files under {cfg.output_dir}")
    return 0 if not any(t.record.aborted for t in res.trials) else 1


def cmd_sweep(args) -> int:
    cfg = _load(args)
    res = sweep_bottleneck(cfg, tuple(args.r), progress=_progress)
    print(_table(("r", "variant", "params_adapters", "params_with_head", "median_eval", "min_eval", "max_eval",
                  "median_loss"), res.rows))
    print("\nViT-B/16 geometry (4 x 768-wide positions, 12 blocks) against the bottleneck figure:")
    print(_table(("r", "params_adapters", "params_with_head", "paper_M", "paper_acc"), res.reference))
    counts = [row[2] for row in res.rows]
    ok = all(a <= b for a, b in zip(counts, counts[1:])) and not any(t.record.aborted for t in res.comparison.trials)
    return 0 if ok else 1


def cmd_spectra(args) -> int:
    cfg = _load(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ok = True
    for variant in cfg.variants:
        if variant.kind == "none":
            continue
        tr, b = run_trial(cfg, variant, 0)
        path = out / f"spectra_{variant.name}.csv"
        report_spectra(b, path)
        ranks = {}
        for layer, pos, _, sigma, rank in tr.spectra:
            ranks[(layer, pos)] = rank
            ok &= rank >= 0
        print(f"{variant.name}: numerical ranks per (layer, position) {sorted(ranks.items())} -> {path}")
    return 0 if ok else 1


def cmd_paramcount(args) -> int:
    result = checks.check_paramcount()
    print(result.line())
    cfg = _load(args) if (args.config or args.variant) else ExperimentConfig()
    m = cfg.model
    rows = [(v.name, param_count(v, m.dim, m.depth, m.mlp_ratio),
             param_count(v, m.dim, m.depth, m.mlp_ratio, head_classes=m.classes)) for v in cfg.variants]
    print(f"\nD={m.dim}, depth={m.depth}, classes={m.classes}:")
    print(_table(("variant", "params_adapters", "params_with_head"), rows))
    print("\nViT-B/16 bottleneck sweep (head of 50 classes in the second column):")
    print(_table(("r", "params_adapters", "params_with_head", "paper_M", "paper_acc"), vitb_reference(head_classes=50)))
    return 0 if result.passed else 1


def cmd_gradcheck(args) -> int:
    rep = checks.grad_check_model(seed=args.seed or 0)
    print(rep)
    return 0 if rep.passed else 1


def cmd_selftest(args) -> int:
    ok = True
    for fn in checks.SELFTESTS.values():
        res = fn()
        print(res.line(), flush=True)
        ok &= res.passed
    return 0 if ok else 1


COMMANDS = {
    "compare": (cmd_compare, "train every variant over all trials and write summary CSVs"),
    "sweep": (cmd_sweep, "sweep the HTA low-rank addend r and report accuracy against parameters"),
    "spectra": (cmd_spectra, "train trial 0 of each variant and dump adaptation-matrix spectra"),
    "paramcount": (cmd_paramcount, "print exact trainable-parameter counts"),
    "gradcheck": (cmd_gradcheck, "compare autodiff gradients with central differences"),
    "selftest": (cmd_selftest, "run the fast algebra, merge, init, schedule and gradient checks"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hta-peft", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config JSON")
    common.add_argument("--seed", type=int, help="override the experiment seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--variant", action="append", help="restrict to this variant (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, (fn, help_) in COMMANDS.items():
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=fn)
        if name == "sweep":
            sp.add_argument("--r", type=int, nargs="+", default=[0, 1, 2, 4], help="addend ranks to sweep")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
