"""Command-line entry point.

Every subcommand takes `--config <file>` (versioned key = value text) plus
repeatable `--set key=value` overrides. Exits 0 on success; on failure it
prints one machine-readable `error: <message>` line to stderr and exits 1.
"""

from __future__ import annotations

import argparse
import sys

from . import pipeline
from .pipeline import Workspace


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="monotrans",
        description="3-stage training pipeline for strictly monotonic transducers",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, extra=None):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="config file (key = value, versioned)")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override one config key")
        if extra:
            extra(p)
        return p

    add("gen-data", "generate the synthetic corpus and train the LMs")
    add("train-ctc", "train the small alignment CTC model")
    add("align", "write transducer alignments from the CTC model")
    add("train", "train one pipeline stage",
        lambda p: p.add_argument("--stage", required=True, choices=["ctc", "stage1", "stage2", "stage3"]))
    add("build-nbest", "decode a training subset into the static N-best store")
    add("decode", "decode a split and print/write hypothesis lines",
        lambda p: (p.add_argument("--ckpt", default=None),
                   p.add_argument("--split", default="dev"),
                   p.add_argument("--out", default=None)))
    add("evaluate", "decode a split and report WER with Sub/Del/Ins",
        lambda p: (p.add_argument("--ckpt", default=None),
                   p.add_argument("--split", default="dev")))
    add("tune-scales", "grid-search decode scales on a dev split",
        lambda p: (p.add_argument("--ckpt", default=None),
                   p.add_argument("--split", default="dev"),
                   p.add_argument("--grid-lam1", default="0,0.2,0.4,0.6,0.8,1.0"),
                   p.add_argument("--grid-lam2", default="0")))
    add("gradcheck", "finite-difference sweep of all three training losses",
        lambda p: p.add_argument("--seed", type=int, default=7))
    add("oracle-check", "brute-force agreement suites for the dynamic programs",
        lambda p: p.add_argument("--seed", type=int, default=13))
    return parser


def load_config(args) -> dict:
    cfg = pipeline.parse_config_file(args.config) if args.config else pipeline.default_config()
    return pipeline.apply_overrides(cfg, args.overrides)


def _default_ckpt(cfg) -> str:
    ws = Workspace(cfg["workdir"])
    import os

    for stage in ("stage3", "stage2", "stage1"):
        if os.path.exists(ws.best_ckpt(stage)):
            return ws.best_ckpt(stage)
    raise FileNotFoundError("no trained checkpoint found; pass --ckpt or run `monotrans train`")


def run(args) -> int:
    cfg = load_config(args)
    if args.command == "gen-data":
        counts = pipeline.run_gen_data(cfg)
        print("generated " + " ".join(f"{k}={v}" for k, v in counts.items()))
    elif args.command == "train-ctc":
        dev = pipeline.run_train_ctc(cfg)
        print(f"ctc trained, dev loss {dev:.4f}")
    elif args.command == "align":
        counts = pipeline.run_align(cfg)
        for split, (ok, failed) in counts.items():
            print(f"{split}: aligned {ok} utts, {failed} failures")
    elif args.command == "train":
        info = pipeline.run_stage(cfg, args.stage)
        print(" ".join(f"{k}={v}" for k, v in info.items() if k != "risks"))
    elif args.command == "build-nbest":
        info = pipeline.run_build_nbest(cfg)
        print(f"nbest store: {info['utts']} utts, mean entries {info['mean_entries']:.2f}")
    elif args.command == "decode":
        ckpt = args.ckpt or _default_ckpt(cfg)
        lines = pipeline.run_decode(cfg, ckpt, args.split, args.out)
        if not args.out:
            print("\n".join(lines))
    elif args.command == "evaluate":
        ckpt = args.ckpt or _default_ckpt(cfg)
        report = pipeline.run_evaluate(cfg, ckpt, args.split)
        print(report.summary())
    elif args.command == "tune-scales":
        ckpt = args.ckpt or _default_ckpt(cfg)
        grid1 = [float(x) for x in args.grid_lam1.split(",") if x != ""]
        grid2 = [float(x) for x in args.grid_lam2.split(",") if x != ""]
        from . import dataio, lm as lm_mod
        from .model import TransducerModel

        ws = Workspace(cfg["workdir"])
        model = TransducerModel.load(ckpt)
        lm = lm_mod.read_ngram(ws.lm_recog)
        utts = dataio.load_dataset(ws.data_dir)[args.split]
        base = pipeline.decode_config_from(cfg)
        lam1, lam2, rep, _ = pipeline.tune_scale(model, lm, utts, grid1, grid2, base)
        print(f"best lam1={lam1:g} lam2={lam2:g} -> {rep.summary()}")
    elif args.command == "gradcheck":
        results = pipeline.gradient_checks(seed=args.seed)
        ok = True
        for name, r in results.items():
            status = "PASS" if r["pass"] else "FAIL"
            print(f"{name}: max rel err {r['max_rel_err']:.3e} over {r['n_params']} params [{status}]")
            ok &= r["pass"]
        return 0 if ok else 1
    elif args.command == "oracle-check":
        results = pipeline.oracle_checks(seed=args.seed)
        ok = True
        for name, r in results.items():
            status = "PASS" if r["pass"] else "FAIL"
            detail = " ".join(f"{k}={v}" for k, v in r.items() if k != "pass")
            print(f"{name}: {detail} [{status}]")
            ok &= r["pass"]
        return 0 if ok else 1
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return run(args)
    except (ValueError, KeyError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
