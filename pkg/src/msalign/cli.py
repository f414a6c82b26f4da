"""Command-line entry point: ``msalign <subcommand> [flags]``.

Every input and output path is an explicit flag. Reports are tab-separated
text; matrices are written as feature files.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import TrainConfig, config_from_text, config_to_text
from .errors import ConfigurationError, MsaError
from .evalkit import SUITES, attention_dump, evaluate, embed_split, run_ablation, scale_diagnostics
from .formats import atomic_write_text, format_table, write_features
from .model import full_model_gradcheck
from .synth import SPLITS, SynthSpec, load_dataset, save_dataset, synth_dataset
from .trainer import history_to_text, load_checkpoint, train

log = logging.getLogger("msalign")


def _load_config(path, overrides=()):
    """Config from ``path`` (all keys required) or defaults, then ``key=value`` overrides."""
    text = config_to_text(TrainConfig())
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        config_from_text(text)          # strict: names every missing key
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        text += item.replace("=", " = ", 1) + "\n"
    return config_from_text(text)


def _check_compatible(cfg: TrainConfig, spec: SynthSpec):
    pairs = [("n_scales", spec.n_scales), ("channels", spec.channels), ("image_size", spec.height),
             ("text_len", spec.text_len), ("vocab", spec.vocab)]
    bad = [f"{k}={getattr(cfg, k)} (data has {v})" for k, v in pairs if getattr(cfg, k) != v]
    if spec.height != spec.width:
        bad.append(f"non-square images {spec.height}x{spec.width}")
    if bad:
        raise ConfigurationError("config does not match dataset: " + ", ".join(bad))


def _report_table(rep) -> str:
    cols = ("R@1s", "R@5s", "R@10s", "R@1i", "R@5i", "R@10i", "mR")
    return format_table(cols, [(*rep.values(), rep.mR)])


# ---------------------------------------------------------------- commands

def cmd_synth(args):
    sizes = tuple(int(x) for x in args.split_sizes.split(",")) if args.split_sizes else ()
    spec = SynthSpec(pairs=args.pairs, noise=args.noise, seed=args.seed, split_sizes=sizes)
    save_dataset(synth_dataset(spec), args.out)
    n_train, n_val, n_test = spec.sizes()
    print(f"wrote {args.out}: {n_train} train / {n_val} val / {n_test} test pairs")


def cmd_train(args):
    cfg = _load_config(args.config, args.set)
    if args.dump_config:
        sys.stdout.write(config_to_text(cfg))
        return
    if args.data is None or args.out is None:
        raise ConfigurationError("train needs --data and --out")
    ds = load_dataset(args.data)
    _check_compatible(cfg, ds.spec)
    state, history = train(cfg, ds, out_dir=args.out)
    sys.stdout.write(history_to_text(history))
    print(f"best epoch {state.best_epoch}, val mR {state.best_val:.2f}")


def cmd_eval(args):
    cfg, state = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    _check_compatible(cfg, ds.spec)
    split = ds.split(args.split)
    rep = evaluate(state.params, split, cfg)
    table = _report_table(rep)
    sys.stdout.write(table)
    if args.out:
        atomic_write_text(args.out, table)
    if args.features:
        img, txt = embed_split(state.params, split, cfg)
        write_features(Path(args.features) / f"{args.split}.image.msaf", img)
        write_features(Path(args.features) / f"{args.split}.text.msaf", txt)


def cmd_diagnose(args):
    cfg, state = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    _check_compatible(cfg, ds.spec)
    split = ds.split(args.split)
    out = Path(args.out)
    diag = scale_diagnostics(state.params, split, cfg)
    keys = ("min", "q1", "median", "q3", "max", "mean")
    table = format_table(("scale", *keys, "gap_to_largest"), [
        (i, *(s[k] for k in keys), gap)
        for i, (s, gap) in enumerate(zip(diag.stats, diag.gap_to_largest), 1)])
    atomic_write_text(out / "diagonal_stats.txt", table)
    for i, m in enumerate(diag.matrices, 1):
        write_features(out / f"scores.scale{i}.msaf", m)
    # gates: one row per (image, text) pair, columns heads x tokens
    for i, g in enumerate(attention_dump(state.params, split, cfg, args.pairs), 1):
        write_features(out / f"gates.scale{i}.msaf", g.reshape(g.shape[0] * g.shape[1], -1))
    sys.stdout.write(table)


def cmd_ablate(args):
    cfg = _load_config(args.config, args.set)
    ds = load_dataset(args.data)
    _check_compatible(cfg, ds.spec)
    grid = tuple(float(x) for x in args.grid.split(","))
    result = run_ablation(cfg, args.suite, args.seeds, ds, grid=grid)
    atomic_write_text(args.out, result.table())
    if args.summary:
        atomic_write_text(args.summary, result.summary_table())
    sys.stdout.write(result.summary_table())


def cmd_gradcheck(args):
    cfg = _load_config(args.config, args.set)
    rep = full_model_gradcheck(cfg, batch_size=args.batch_size, probes=args.probes,
                               eps=args.eps, seed=args.seed)
    print(f"max relative error {rep.max_rel_error:.3e} over {rep.checked} probes "
          f"({rep.skipped} skipped near kinks)")


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="msalign", description="Multi-scale image-text alignment toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")

    def config_flags(sp):
        sp.add_argument("--config", help="config file with every key (see train --dump-config)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable")

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--pairs", type=int, default=704)
    sp.add_argument("--noise", type=float, default=0.5)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--split-sizes", help="train,val,test counts (default 70/10/20 percent)")

    sp = sub.add_parser("train", help="train one model")
    sp.add_argument("--data")
    sp.add_argument("--out", help="directory for checkpoints and history")
    sp.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")
    config_flags(sp)

    sp = sub.add_parser("eval", help="retrieval metrics for a checkpoint")
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", choices=SPLITS, default="test")
    sp.add_argument("--out", help="report file")
    sp.add_argument("--features", help="directory for exported embeddings")

    sp = sub.add_parser("diagnose", help="per-scale score statistics and attention gates")
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", choices=SPLITS, default="test")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--pairs", type=int, default=16, help="pairs in the attention dump")

    sp = sub.add_parser("ablate", help="run an ablation suite")
    sp.add_argument("--suite", choices=SUITES, required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="per-run report file")
    sp.add_argument("--summary", help="per-setting mean/std file")
    sp.add_argument("--seeds", type=int, default=5)
    sp.add_argument("--grid", default="0,1,10", help="alpha/beta values for alpha_beta_sweep")
    config_flags(sp)

    sp = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    sp.add_argument("--seed", type=int, default=7)
    sp.add_argument("--probes", type=int, default=100)
    sp.add_argument("--eps", type=float, default=1e-5)
    sp.add_argument("--batch-size", type=int, default=4)
    config_flags(sp)
    return p


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "diagnose": cmd_diagnose,
            "ablate": cmd_ablate, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        COMMANDS[args.command](args)
    except (MsaError, OSError) as exc:
        print(f"msalign {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
