"""Command line front end: gen-dataset, train, evaluate, verify, ablate.

Exit codes: 0 success, 2 usage, 3 data or config problem, 4 numerical abort,
5 verification failure.
"""
from __future__ import annotations

import argparse
import itertools
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .data import DataError, generate_dataset, save_dataset
from .envs import WORLD_NAMES, behavior_policy, make_world
from .mdp import NumericalError
from .models import load_model, save_model
from .pipeline import (ConfigError, RunConfig, build_dataset, evaluate_checkpoint, fit_all,
                       load_config, metrics_csv, parse_overrides, run_pipeline, substream)
from .verify import SUITES, run_suite

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL, EXIT_VERIFY = 0, 2, 3, 4, 5
OUT_ENV = "BPPOLAB_OUT"

ABLATE_EPS0 = (0.05, 0.1, 0.2, 0.25, 0.3)
ABLATE_SIGMA = (0.90, 0.94, 0.96, 0.98, 1.00)
ABLATE_OMEGA = (0.5, 0.7, 0.9)


def _out_root(args) -> Path:
    return Path(args.out) if args.out else Path(os.environ.get(OUT_ENV, "runs"))


def _floats(text):
    return tuple(float(x) for x in text.split(",") if x.strip())


def _ints(text):
    return tuple(int(x) for x in text.split(",") if x.strip())


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = [(i + 1, kv) for i, kv in enumerate(getattr(args, "set", None) or [])]
    cfg = parse_overrides(overrides, cfg, "--set")
    changes = {}
    for key in ("seed", "variant", "world", "dataset"):
        val = getattr(args, key, None)
        if val is not None:
            changes[key] = val
    return cfg.replace(**changes)


# --- subcommands -----------------------------------------------------------------

def cmd_gen_dataset(args) -> int:
    if args.env not in WORLD_NAMES:
        print(f"error: unknown env {args.env!r}; choose from {', '.join(WORLD_NAMES)}",
              file=sys.stderr)
        return EXIT_USAGE
    world = make_world(args.env, args.seed)
    ds = generate_dataset(world, behavior_policy(world, args.quality), args.episodes,
                          args.horizon, substream(args.seed, "dataset"), seed=args.seed,
                          env_name=args.env)
    path = Path(args.out) if args.out else Path(os.environ.get(OUT_ENV, "runs")) / \
        f"{args.env}-s{args.seed}.dataset"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, path)
    print(f"wrote {len(ds)} transitions in {ds.n_episodes} episodes to {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args)
    out = _out_root(args)
    out.mkdir(parents=True, exist_ok=True)
    res = run_pipeline(cfg)
    (out / "config.cfg").write_text(cfg.dumps())
    (out / "metrics.csv").write_text(metrics_csv([res]))
    (out / f"trace-{cfg.variant}.csv").write_text(res.trace.to_csv())
    save_model(out / "bc_policy.ckpt", res.bc_policy)
    save_model(out / "policy.ckpt", res.trace.final_policy)
    for name, fitted in (("q", res.q), ("v", res.v)):
        if fitted.kind == "mlp":
            save_model(out / f"{name}.ckpt", fitted.model)
    print(f"run {res.run_id}: J(bc)={res.J_bc:.6g} J(final)={res.J_final:.6g} "
          f"accepted={len(res.trace.accepted_J) - 1} -> {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _run_config(args)
    policy = load_model(args.checkpoint)
    world = make_world(cfg.world, cfg.seed)
    seeds = _ints(args.seeds)
    evals = evaluate_checkpoint(policy, world, seeds, args.episodes,
                                deterministic=not args.stochastic)
    if evals[0].returns:
        rets = np.concatenate([e.returns for e in evals])
        mean, se = float(rets.mean()), float(rets.std(ddof=1) / np.sqrt(len(rets)))
        n = len(rets)
    else:
        mean, se, n = evals[0].mean, 0.0, len(seeds)
    lines = ["seed,mean,se"] + [f"{s},{e.mean:.17g},{e.se:.17g}" for s, e in zip(seeds, evals)]
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "evaluation.csv").write_text("\n".join(lines) + "\n")
    print(f"J = {mean:.6g} +- {se:.3g} (n={n})")
    return EXIT_OK


def cmd_verify(args) -> int:
    suites = SUITES if args.suite == "all" else (args.suite,)
    rows = ["suite,case,lhs,rhs,slack,pass"]
    failures = 0
    summary = []
    for name in suites:
        n = args.cases if args.cases is not None else (1000 if name in ("theorem1", "proposition1") else 500)
        n_fail = 0
        worst = float("inf")
        for i, rep in enumerate(run_suite(name, n, args.seed,
                                          perturb_bound=1.0 if args.self_test_fail else 0.0)):
            rows.append(f"{name},{i},{rep.lhs:.17g},{rep.rhs:.17g},{rep.slack:.17g},{int(rep.passed)}")
            if not args.quiet:
                print(f"[{name} {i}] {rep.line()}")
            n_fail += not rep.passed
            worst = min(worst, rep.slack)
        failures += n_fail
        summary.append(f"{name}: {n} cases, {n_fail} failures, min slack {worst:.6g}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "verify_report.csv").write_text("\n".join(rows) + "\n")
    print("== summary ==")
    for line in summary:
        print(line)
    print(f"total failures: {failures}")
    return EXIT_VERIFY if failures else EXIT_OK


def ablation_grid(eps0s=ABLATE_EPS0, sigmas=ABLATE_SIGMA, omegas=ABLATE_OMEGA, seeds=(0,)):
    return list(itertools.product(eps0s, sigmas, omegas, seeds))


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    grid = ablation_grid(_floats(args.eps0), _floats(args.sigma), _floats(args.omega),
                         _ints(args.seeds))
    print(f"{len(grid)} runs")
    if args.dry_run:
        for e, s, w, seed in grid:
            print(f"eps0={e} sigma={s} omega={w} seed={seed}")
        return EXIT_OK
    # the supervised stage depends only on the seed, so it is shared across grid points
    shared = {}
    for seed in sorted({g[3] for g in grid}):
        c = cfg.replace(seed=seed)
        ds = build_dataset(c)
        shared[seed] = (ds, fit_all(c, ds))

    def one(point):
        e, s, w, seed = point
        ds, fits = shared[seed]
        return run_pipeline(cfg.replace(eps0=e, sigma=s, omega=w, seed=seed), ds, fits)

    with ThreadPoolExecutor(max_workers=max(1, args.workers)) as pool:
        results = list(pool.map(one, grid))   # map keeps grid order, so output is deterministic
    lines = ["eps0,sigma,omega,seed,step,J,J_best,eps,ratio_mean_abs_dev"]
    for (e, s, w, seed), res in zip(grid, results):
        for rec in res.trace.records:
            lines.append(f"{e:.17g},{s:.17g},{w:.17g},{seed},{rec['step']},{rec['J']:.17g},"
                         f"{rec['J_best']:.17g},{rec['eps']:.17g},{rec['ratio_mean_abs_dev']:.17g}")
    out = _out_root(args)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(lines) - 1} rows to {out / 'ablation.csv'}")
    return EXIT_OK


# --- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bppolab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="key=value config file")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                            help="override one config key (repeatable)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help=f"output location (default ${OUT_ENV} or ./runs)")

    g = sub.add_parser("gen-dataset", help="collect an offline dataset with the behavior policy")
    g.add_argument("--env", required=True, help=", ".join(WORLD_NAMES))
    g.add_argument("--episodes", type=int, default=100)
    g.add_argument("--horizon", type=int, default=50)
    g.add_argument("--quality", type=float, default=0.5, help="behavior quality knob in [0, 1]")
    common(g, config=False)
    g.set_defaults(func=cmd_gen_dataset, seed=0)

    t = sub.add_parser("train", help="clone, fit Q and V, improve")
    common(t)
    t.add_argument("--world", choices=WORLD_NAMES)
    t.add_argument("--dataset", help="dataset file (generated when omitted)")
    t.add_argument("--variant", choices=("replacement", "iterative", "onestep"))
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="evaluate a policy checkpoint")
    common(e)
    e.add_argument("--world", choices=WORLD_NAMES)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--seeds", default="0,1,2,3,4")
    e.add_argument("--episodes", type=int, default=10)
    e.add_argument("--stochastic", action="store_true", help="sample actions instead of the mode")
    e.set_defaults(func=cmd_evaluate)

    v = sub.add_parser("verify", help="check the identity and bound suites on random worlds")
    v.add_argument("--suite", default="all", choices=("all",) + SUITES)
    v.add_argument("--cases", type=int)
    v.add_argument("--quiet", action="store_true", help="summary only")
    v.add_argument("--self-test-fail", action="store_true",
                   help="raise every bound by 1.0; the run must then fail")
    common(v, config=False)
    v.set_defaults(func=cmd_verify, seed=0)

    a = sub.add_parser("ablate", help="grid over eps0, sigma and omega")
    common(a)
    a.add_argument("--world", choices=WORLD_NAMES)
    a.add_argument("--eps0", default=",".join(map(str, ABLATE_EPS0)))
    a.add_argument("--sigma", default=",".join(map(str, ABLATE_SIGMA)))
    a.add_argument("--omega", default=",".join(map(str, ABLATE_OMEGA)))
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--workers", type=int, default=1)
    a.add_argument("--dry-run", action="store_true", help="list the runs and stop")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (DataError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
