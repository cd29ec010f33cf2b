"""Command-line driver.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import TrainConfig, dump_config, load_config, with_overrides
from .grpo import ConfigError
from .orchestrator import exchange_pairs, merge, planned_updates, run_training
from .pilots import drift_summary, pilot_drift, pilot_overlap_gain, rhythm_sweep
from .plotdata import FIGURES, UnknownFigureError, plot_data
from .metrics import read_metrics
from .policy import load_checkpoint, save_checkpoint
from .tasks import VOCAB, UnknownDomainError, accuracy, eval_prompts, get_domain

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _load(args) -> TrainConfig:
    cfg = load_config(args.config)
    return with_overrides(cfg, seed=args.seed, out_dir=args.out)


def describe(cfg: TrainConfig) -> str:
    """Resolved config plus the step plan, as printed by --dry-run."""
    s = cfg.schedule
    plan = {
        "mode": s.mode,
        "cycles": s.cycles,
        "phases_per_cycle": [["I", s.s_rl], ["II", s.s_opd]],
        "updates": planned_updates(cfg),
        "exchange_pairs": [list(p) for p in exchange_pairs(cfg.branch_ids, s)] if s.mode == "coevolve" else [],
    }
    return dump_config(cfg) + "---\n" + json.dumps(plan, indent=2) + "\n"


def cmd_train(args) -> int:
    cfg = _load(args)
    if args.dry_run:
        print(describe(cfg), end="")
        return EXIT_OK
    res = run_training(cfg)
    for name, accs in res.evals.items():
        print(name, " ".join(f"{d}={a:.4f}" for d, a in accs.items()))
    if cfg.out_dir:
        print(f"wrote {Path(cfg.out_dir) / 'merged.ckpt'}")
    return EXIT_OK


def cmd_pilot_overlap(args) -> int:
    cfg = _load(args)
    if args.dry_run:
        print(describe(cfg), end="")
        return EXIT_OK
    res = pilot_overlap_gain(cfg)
    print("variant\ttemperature\toverlap\tpre\tpost\tgain\tgain_se")
    for r in (*res.rows, res.control):
        t = "NA" if r.temperature is None else f"{r.temperature:g}"
        print(f"{r.variant}\t{t}\t{r.overlap:.4f}\t{r.pre:.4f}\t{r.post:.4f}\t{r.gain:+.4f}\t{r.gain_se:.4f}")
    flag = " (low confidence)" if res.low_confidence else ""
    print(f"spearman\t{res.spearman:.4f}{flag}")
    return EXIT_OK


def cmd_pilot_drift(args) -> int:
    cfg = _load(args)
    if args.dry_run:
        print(describe(cfg), end="")
        return EXIT_OK
    points = pilot_drift(cfg)
    print("branch\tstep\toverlap\tsym_kl")
    for p in points:
        print(f"{p.branch}\t{p.step}\t{p.overlap:.4f}\t{p.sym_kl:.4f}")
    for name, s in drift_summary(points).items():
        print(f"# {name}: overlap drop {s['overlap_drop']:.4f}, KL rose in {s['kl_rise_fraction']:.0%} of intervals")
    return EXIT_OK


def _ratio(text: str) -> tuple[float, float]:
    try:
        a, b = text.split(":")
        return float(a), float(b)
    except ValueError:
        raise argparse.ArgumentTypeError(f"ratio must look like 1.5:1, got {text!r}") from None


def cmd_rhythm_sweep(args) -> int:
    cfg = _load(args)
    if args.dry_run:
        print(describe(cfg), end="")
        return EXIT_OK
    rows = rhythm_sweep(cfg, args.ratios)
    print("ratio\ts_rl\ts_opd\tmerged_mean_acc\tbranch_mean_acc\tmean_overlap")
    for r in rows:
        print(f"{r.ratio}\t{r.s_rl}\t{r.s_opd}\t{r.merged_mean_acc:.4f}\t{r.branch_mean_acc:.4f}\t{r.mean_overlap:.4f}")
    best = max(rows, key=lambda r: r.merged_mean_acc)
    print(f"# best merged accuracy at {best.ratio}")
    return EXIT_OK


def eval_table(checkpoint: str, domains: list[str], n: int, seed: int) -> list[tuple[str, float, int]]:
    policy = load_checkpoint(checkpoint, VOCAB)
    rows = []
    for d in domains:
        dom = get_domain(d)
        prompts = eval_prompts(dom, n, seed)
        rows.append((dom.id, accuracy(policy, dom, prompts), n))
    return rows


def cmd_eval(args) -> int:
    domains = [d for d in args.domains.split(",") if d]
    for d in domains:
        get_domain(d)  # unknown ids fail before any work
    if args.dry_run:
        print(f"eval {args.checkpoint} on {domains} with n={args.n} seed={args.seed or 0}")
        return EXIT_OK
    print("domain\taccuracy\tn")
    for d, acc, n in eval_table(args.checkpoint, domains, args.n, args.seed or 0):
        print(f"{d}\t{acc:.4f}\t{n}")
    return EXIT_OK


def cmd_merge(args) -> int:
    if args.weights is not None and len(args.weights) != len(args.checkpoints):
        raise ConfigError(f"{len(args.weights)} weights for {len(args.checkpoints)} checkpoints")
    if args.out is None:
        raise ConfigError("merge needs --out for the merged checkpoint")
    if args.dry_run:
        print(f"merge {args.checkpoints} weights={args.weights or 'uniform'} -> {args.out}")
        return EXIT_OK
    policies = [load_checkpoint(p, VOCAB) for p in args.checkpoints]
    save_checkpoint(merge(policies, args.weights), args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_plot_data(args) -> int:
    if args.figure not in FIGURES:
        raise UnknownFigureError(f"unknown figure {args.figure!r}; valid ids: {', '.join(FIGURES)}")
    if args.dry_run:
        print(f"plot-data {args.figure} from {args.metrics}")
        return EXIT_OK
    text = plot_data(read_metrics(args.metrics), args.figure)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="copd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the run seed")
        p.add_argument("--out", default=None, help="output directory (or file for merge/plot-data)")
        p.add_argument("--dry-run", action="store_true", help="validate and print the plan only")
        return p

    common(sub.add_parser("train", help="run a training schedule")).set_defaults(fn=cmd_train)
    common(sub.add_parser("pilot-overlap", help="overlap versus distillation gain")).set_defaults(fn=cmd_pilot_overlap)
    common(sub.add_parser("pilot-drift", help="drift from theta_0 under independent RLVR")).set_defaults(fn=cmd_pilot_drift)
    p = common(sub.add_parser("rhythm-sweep", help="coevolve runs at several s_rl:s_opd ratios"))
    p.add_argument("--ratios", type=_ratio, nargs="+", default=[(1.0, 1.0), (1.5, 1.0), (3.0, 1.0)])
    p.set_defaults(fn=cmd_rhythm_sweep)

    p = common(sub.add_parser("eval", help="greedy accuracy of a checkpoint"), config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--domains", required=True, help="comma-separated domain ids")
    p.add_argument("--n", type=int, default=64, help="eval prompts per domain")
    p.set_defaults(fn=cmd_eval)

    p = common(sub.add_parser("merge", help="weighted parameter average of checkpoints"), config=False)
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--weights", type=float, nargs="+", default=None)
    p.set_defaults(fn=cmd_merge)

    p = common(sub.add_parser("plot-data", help="columnar data behind a figure"), config=False)
    p.add_argument("--metrics", required=True, help="metrics JSONL file")
    p.add_argument("--figure", required=True, help=f"one of: {', '.join(FIGURES)}")
    p.set_defaults(fn=cmd_plot_data)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, UnknownDomainError, UnknownFigureError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"config error: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - any failure after validation is a runtime error
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
