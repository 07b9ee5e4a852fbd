"""Command line entry point: ``diskill train|infer|resume|report``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys

import numpy as np

from . import evaluation as ev
from .trainer import CheckpointError, ConfigError, TrainingHalted, infer, load_config, resume, train


def _cmd_train(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.run.seed = args.seed
    if args.iterations is not None:
        cfg.run.max_iterations = args.iterations
    if args.checkpoint:
        cfg.run.checkpoint = args.checkpoint
    if args.log:
        cfg.run.log = args.log
    tr = train(cfg)
    print(f"trained {tr.iteration} iterations; checkpoint {cfg.run.checkpoint}; log {cfg.run.log}")


def _cmd_resume(args):
    cfg = load_config(args.config) if args.config else None
    tr = resume(args.checkpoint, cfg, args.iterations)
    print(f"checkpoint at iteration {tr.iteration}")


def _cmd_infer(args):
    cfg = load_config(args.config) if args.config else None
    contexts = np.loadtxt(args.contexts, delimiter=",", ndmin=2) if args.contexts else None
    out = infer(args.checkpoint, contexts, args.deterministic, args.n_contexts, args.seed, cfg)
    w = csv.writer(sys.stdout if args.out is None else open(args.out, "w", newline=""), lineterminator="\n")
    d = out.contexts.shape[1]
    w.writerow([f"c{i + 1}" for i in range(d)] + ["expert", "return", "success", "theta"])
    for i in range(len(out)):
        r = out.results.item(i)
        w.writerow([repr(float(x)) for x in out.contexts[i]] + [int(out.experts[i]), repr(r.episodic_return),
                                                               int(r.success), " ".join(repr(float(t)) for t in out.thetas[i])])
    ret = out.results.returns
    print(f"# mean return {ret.mean():.4f}  success {out.results.success.mean():.3f}", file=sys.stderr)


def _grid(args, checkpoint):
    tr = ev._load(checkpoint)
    return tr, ev.context_grid(tr.env, args.grid)


def _cmd_report(args):
    if args.kind == "iqm":
        rs = ev.SeedRunSet.from_logs(args.logs, args.metric)
        ci = ev.stratified_bootstrap_ci(rs, n_boot=args.n_boot, level=args.level,
                                        rng=np.random.default_rng(args.seed))
        if args.out:
            ci.to_csv(args.out)
        else:
            print("iteration,iqm,ci_low,ci_high")
            for row in zip(ci.iterations, ci.point, ci.lo, ci.hi):
                print(f"{int(row[0])},{row[1]!r},{row[2]!r},{row[3]!r}")
        return
    tr, grid = _grid(args, args.checkpoint)
    if args.kind == "activity":
        am = ev.activity_map(tr, grid, args.threshold)
        if args.out:
            am.to_csv(args.out)
        print(json.dumps({"contexts": len(grid), "threshold": args.threshold,
                          "fraction_2plus": am.fraction_at_least(2), "mean_active": float(am.counts.mean())}))
    elif args.kind == "heatmap":
        hm = ev.curriculum_heatmap(tr, grid, args.out_dir)
        print(json.dumps({"contexts": len(grid), "experts": int(hm.probs.shape[0]), "out_dir": args.out_dir}))
    elif args.kind == "diversity":
        rep = ev.diversity_report(tr, grid, args.samples, args.seed, args.out_dir)
        print(json.dumps({"contexts": len(grid), "fraction_2plus_modes": rep.fraction_with_modes(2),
                          "mean_success": float(rep.success_rate.mean()),
                          "expert_success": [None if np.isnan(x) else float(x) for x in rep.expert_success]}))


def build_parser():
    p = argparse.ArgumentParser(prog="diskill", description="Curriculum mixture-of-experts skill learning")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--iterations", type=int, help="override [run] max_iterations")
    t.add_argument("--checkpoint")
    t.add_argument("--log")
    t.set_defaults(func=_cmd_train)

    r = sub.add_parser("resume", help="continue training from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--config", help="must hash-match the checkpoint's config")
    r.add_argument("--iterations", type=int, help="new max_iterations")
    r.set_defaults(func=_cmd_resume)

    i = sub.add_parser("infer", help="run the trained policy on contexts")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--n-contexts", type=int, default=100)
    i.add_argument("--contexts", help="CSV file of contexts instead of sampling")
    i.add_argument("--deterministic", action="store_true")
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--config")
    i.add_argument("--out")
    i.set_defaults(func=_cmd_infer)

    rep = sub.add_parser("report", help="analysis outputs")
    rsub = rep.add_subparsers(dest="kind", required=True)
    q = rsub.add_parser("iqm")
    q.add_argument("--logs", required=True, help="glob of per-seed log files")
    q.add_argument("--metric", required=True)
    q.add_argument("--out")
    q.add_argument("--n-boot", type=int, default=2000)
    q.add_argument("--level", type=float, default=0.95)
    q.add_argument("--seed", type=int, default=0)
    for kind in ("activity", "heatmap", "diversity"):
        s = rsub.add_parser(kind)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--grid", type=int, default=200)
        s.add_argument("--seed", type=int, default=0)
        if kind == "activity":
            s.add_argument("--threshold", type=float, default=ev.DEFAULT_ACTIVITY_THRESHOLD)
            s.add_argument("--out")
        else:
            s.add_argument("--out-dir", default=f"{kind}_out")
        if kind == "diversity":
            s.add_argument("--samples", type=int, default=20)
    rep.set_defaults(func=_cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (ConfigError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingHalted as exc:
        print(f"halted: {exc}\n{json.dumps(exc.diagnostics, default=str)}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
