"""Command-line entry point.

Subcommands: train, prune, finetune, run, analyze, report. Every command
takes --config/--out/--seed/--override and echoes the resolved configuration
into the output directory. Exit codes: 0 success, 1 configuration problem,
2 runtime failure. Errors print as single structured lines on stderr.
"""

import argparse
import json
import os
import sys

from . import checkpoint, pruning, report
from .config import apply_overrides, load_config, write_resolved
from .data import holdout_split, load_cache
from .errors import ConfigError, DwglError
from .pipeline import (evaluate, make_dataset, prune_round, rebuild_from_checkpoint,
                       run_experiment, schedule_from_config, train)

DEFAULT_OUT = "dwgl-out"


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on usage errors, per the CLI contract."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"config-error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser():
    p = _Parser(prog="dwgl", description="Directed-weighting group-lasso filter pruning")
    sub = p.add_subparsers(dest="command", metavar="command")
    commands = {
        "train": "train (rounds=0) and write history plus a checkpoint",
        "prune": "one prune round on a checkpoint",
        "finetune": "penalty-free recovery training on a checkpoint",
        "run": "full train-prune-finetune experiment",
        "analyze": "activation stats/votes from a checkpoint, no training",
        "report": "regenerate summary JSON and figures from history.csv",
    }
    for name, help_text in commands.items():
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="INI config file with dotted sections")
        sp.add_argument("--out", help="output directory (default $DWGL_OUT or ./dwgl-out)")
        sp.add_argument("--seed", type=int, help="override run.seed")
        sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-key config override, repeatable")
        if name in ("prune", "finetune", "analyze"):
            sp.add_argument("--checkpoint", help="tensor container to load "
                            "(default: newest under <out>/checkpoints)")
    return p


def _resolve_out(args):
    return args.out or os.environ.get("DWGL_OUT") or DEFAULT_OUT


def _load_cfg(args):
    cfg = load_config(args.config)
    apply_overrides(cfg, args.override)
    if args.seed is not None:
        cfg["run.seed"] = args.seed
    return cfg


def _find_checkpoint(outdir):
    cdir = os.path.join(outdir, "checkpoints")
    if not os.path.isdir(cdir):
        return None
    names = sorted(os.listdir(cdir))
    if "final.dwgl" in names:
        return os.path.join(cdir, "final.dwgl")
    rounds = sorted((n for n in names if n.startswith("round-") and n.endswith(".dwgl")),
                    key=lambda n: int(n[6:-5]))
    return os.path.join(cdir, rounds[-1]) if rounds else None


def _dataset_for(cfg, outdir, seed):
    cached = os.path.join(outdir, "dataset.dwgl")
    if cfg["data.kind"] == "synth" and os.path.exists(cached):
        return load_cache(cached)
    return make_dataset(cfg, seed)


def _net_from_checkpoint(cfg, args, outdir, ds):
    path = getattr(args, "checkpoint", None) or _find_checkpoint(outdir)
    if path:
        return rebuild_from_checkpoint(cfg, checkpoint.load_tensors(path), ds), path
    from .pipeline import make_network
    return make_network(cfg, ds, cfg["run.seed"]), "(fresh init)"


def _cmd_run(cfg, args, outdir):
    result = run_experiment(cfg, outdir)
    if isinstance(result, dict):
        for arm, res in result.items():
            print(f"{arm}: final accuracy {res.final_accuracy:.4f}, "
                  f"compression rate {res.total_rate:.4f}")
    else:
        print(f"final accuracy {result.final_accuracy:.4f}, "
              f"compression rate {result.total_rate:.4f}")
    return 0


def _cmd_train(cfg, args, outdir):
    cfg = dict(cfg)
    cfg["run.rounds"] = 0
    result = run_experiment(cfg, outdir)
    print(f"trained {cfg['train.epochs']} epochs, final accuracy {result.final_accuracy:.4f}")
    return 0


def _cmd_prune(cfg, args, outdir):
    sched = schedule_from_config(cfg)
    ds = _dataset_for(cfg, outdir, sched.seed)
    net, src = _net_from_checkpoint(cfg, args, outdir, ds)
    for sub in ("checkpoints", "reports", "masks", "activations"):
        os.makedirs(os.path.join(outdir, sub), exist_ok=True)
    pruned, rep, masks, extras = prune_round(net, sched)
    _, val_idx = holdout_split(ds, sched.holdout, sched.seed)
    _, acc = evaluate(pruned, ds.images[val_idx], ds.labels[val_idx], sched.batch_size)
    pruning.save_masks(os.path.join(outdir, "masks", "prune.json"), masks)
    checkpoint.save_tensors(os.path.join(outdir, "checkpoints", "pruned.dwgl"),
                            pruned.state())
    with open(os.path.join(outdir, "reports", "prune.json"), "w") as fh:
        json.dump({"source": src, "report": rep.to_dict(),
                   "rate_intersection": extras["rate_intersection"],
                   "rate_union": extras["rate_union"],
                   "accuracy_post_prune": acc,
                   "masks": {m.group_id: sorted(m.remove) for m in masks}},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"pruned {src}: rate {rep.rate:.4f}, accuracy {acc:.4f}")
    return 0


def _cmd_finetune(cfg, args, outdir):
    sched = schedule_from_config(cfg)
    ds = _dataset_for(cfg, outdir, sched.seed)
    net, src = _net_from_checkpoint(cfg, args, outdir, ds)
    os.makedirs(os.path.join(outdir, "checkpoints"), exist_ok=True)
    rows = train(net, ds, sched, epochs=sched.epochs_finetune, penalized=False,
                 phase_seed=99)
    _, val_idx = holdout_split(ds, sched.holdout, sched.seed)
    _, acc = evaluate(net, ds.images[val_idx], ds.labels[val_idx], sched.batch_size)
    checkpoint.save_tensors(os.path.join(outdir, "checkpoints", "final.dwgl"), net.state())
    print(f"finetuned {src} for {sched.epochs_finetune} epochs, accuracy {acc:.4f}")
    return 0


def _cmd_analyze(cfg, args, outdir):
    sched = schedule_from_config(cfg)
    ds = _dataset_for(cfg, outdir, sched.seed)
    net, src = _net_from_checkpoint(cfg, args, outdir, ds)
    os.makedirs(os.path.join(outdir, "activations"), exist_ok=True)
    acts = pruning.filter_activations(net)
    stats = report.layer_stats(acts)
    skip = {net.stem_id()}
    prunable = {c: v for c, v in acts.items() if c not in skip}
    votes = pruning.propose_votes(prunable, sched.threshold)
    masks = pruning.resolve_all(net, votes, sched.strategy, activations=prunable,
                                skip=skip)
    for conv_id, norms in acts.items():
        report.write_activation_csv(
            os.path.join(outdir, "activations", f"analyze-{conv_id}.csv"), norms)
        if cfg["report.figures"]:
            os.makedirs(os.path.join(outdir, "figures"), exist_ok=True)
            report.activation_figure(
                os.path.join(outdir, "figures", f"analyze-{conv_id}.svg"), norms,
                title=conv_id)
    payload = {"source": src, "stats": stats,
               "votes": {v.conv_id: sorted(v.remove) for v in votes},
               "masks": {m.group_id: sorted(m.remove) for m in masks}}
    path = os.path.join(outdir, "analysis.json")
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"analyzed {src} -> {path}")
    return 0


def _cmd_report(cfg, args, outdir):
    import csv as _csv

    hist_path = os.path.join(outdir, "history.csv")
    if not os.path.exists(hist_path):
        raise ConfigError("no history.csv in output directory", path=hist_path)
    with open(hist_path, newline="") as fh:
        rows = [{"epoch": int(r["epoch"]), "split": r["split"], "loss": float(r["loss"]),
                 "penalty": float(r["penalty"]), "accuracy": float(r["accuracy"])}
                for r in _csv.DictReader(fh)]
    val = [r for r in rows if r["split"] == "val"]
    summary = {
        "epochs": rows[-1]["epoch"] + 1 if rows else 0,
        "best_val_accuracy": max((r["accuracy"] for r in val), default=None),
        "final_val_accuracy": val[-1]["accuracy"] if val else None,
        "final_penalty": rows[-1]["penalty"] if rows else None,
    }
    os.makedirs(os.path.join(outdir, "reports"), exist_ok=True)
    path = os.path.join(outdir, "reports", "summary.json")
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if cfg["report.figures"]:
        os.makedirs(os.path.join(outdir, "figures"), exist_ok=True)
        report.history_figure(os.path.join(outdir, "figures", "history.svg"), rows)
    print(f"report -> {path}")
    return 0


_COMMANDS = {
    "run": _cmd_run,
    "train": _cmd_train,
    "prune": _cmd_prune,
    "finetune": _cmd_finetune,
    "analyze": _cmd_analyze,
    "report": _cmd_report,
}


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_usage(sys.stderr)
        print("config-error: a subcommand is required", file=sys.stderr)
        return 1
    try:
        cfg = _load_cfg(args)
        outdir = _resolve_out(args)
        os.makedirs(outdir, exist_ok=True)
        write_resolved(cfg, outdir)  # every run is self-describing
        return _COMMANDS[args.command](cfg, args, outdir)
    except ConfigError as e:
        print(str(e), file=sys.stderr)
        return 1
    except DwglError as e:
        print(str(e), file=sys.stderr)
        return 2
    except OSError as e:
        print(f"io-error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
