"""``dpmshard`` command line.

Exit codes: 0 success, 1 a verification suite failed, 2 usage or config
error, 3 I/O or integrity error.
"""
from __future__ import annotations

import argparse
import inspect
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
import yaml

from .chain import run_to_directory
from .config import DEFAULTS, RunConfig, config_from_dict, dump_config, load_config, load_yaml_mapping
from .datagen import DEFAULT_BETA_GEN, DEFAULT_HELDOUT_FRACTION, GeneratorSpec, generate
from .diagnostics import convergence_report, curve_mode, heldout_log_predictive, log_mean_exp
from .errors import ConfigError, DpmError, UsageError
from .ess import MIN_TRACE, ess
from .formats import (list_snapshots, read_dataset, read_snapshot, read_truth, records_from_run,
                      truth_path_for, write_dataset, write_truth)
from .parallel import prior_chain_experiment
from .reports import (ALPHA_COLUMNS, METRICS_COLUMNS, alpha_curve_rows, write_convergence_csv, write_csv,
                      write_ess_csv, write_speedup_csv)
from .state import check_state
from .verify import SUITES, run_suite

log = logging.getLogger("dpmshard")

GENERATOR_DEFAULTS = {"n_rows": 2000, "n_dims": 16, "n_clusters": 16, "beta_gen": DEFAULT_BETA_GEN,
                      "seed": 0, "heldout_fraction": DEFAULT_HELDOUT_FRACTION}


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    overrides = {k: getattr(args, k) for k in ("seed", "mode", "workers", "superclusters", "iterations")
                 if getattr(args, k, None) is not None}
    return cfg.replace(**overrides) if overrides else cfg


def _generator_spec(args) -> GeneratorSpec:
    given = load_yaml_mapping(args.config) if args.config else {}
    unknown = set(given) - set(GENERATOR_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown generator keys {sorted(unknown)}")
    d = {**GENERATOR_DEFAULTS, **given}
    for key in ("n_rows", "n_dims", "n_clusters", "seed"):
        if getattr(args, key, None) is not None:
            d[key] = getattr(args, key)
    beta = d["beta_gen"]
    try:
        return GeneratorSpec(int(d["n_rows"]), int(d["n_dims"]), int(d["n_clusters"]),
                             tuple(beta) if isinstance(beta, list) else (float(beta),),
                             int(d["seed"]), float(d["heldout_fraction"]))
    except (TypeError, ValueError) as e:
        if isinstance(e, DpmError):
            raise
        raise ConfigError(f"invalid generator spec: {e}") from e


def cmd_generate(args) -> int:
    if args.print_config:
        print(yaml.safe_dump(GENERATOR_DEFAULTS, sort_keys=False), end="")
        return 0
    spec = _generator_spec(args)
    if not args.out:
        raise UsageError("generate needs --out")
    data, truth = generate(spec)
    write_dataset(args.out, data)
    write_truth(truth_path_for(args.out), truth)
    ll = truth.heldout_ll_per_row
    print(f"N={spec.n_rows} D={spec.n_dims} J_true={spec.n_clusters} heldout={data.n_heldout} "
          f"true_heldout_ll_per_row={'n/a' if math.isnan(ll) else f'{ll:.6f}'}")
    return 0


def cmd_run(args) -> int:
    cfg = _run_config(args)
    if args.print_config:
        print(dump_config(cfg), end="")
        return 0
    if not args.data or not args.out:
        raise UsageError("run needs --data and --out")
    data = read_dataset(args.data)

    def progress(rec, _state):
        log.info("iteration %d J=%d alpha=%.3f heldout_ll=%s", rec.iteration, rec.n_clusters, rec.alpha,
                 rec.heldout_ll)

    records = run_to_directory(cfg, data, args.out, resume=args.resume, on_record=progress)
    last = records[-1] if records else None
    if last is not None:
        print(f"iteration {last.iteration}: J={last.n_clusters} alpha={last.alpha:.4f} "
              f"heldout_ll={last.heldout_ll}")
    else:
        print("nothing to do: run already complete")
    return 0


def evaluate_run(run_dir: Path, data, burn_in: float, true_ll: float | None) -> tuple:
    """Per-snapshot metrics rows, trace records and summary dict of one run directory."""
    train, test = data.train(), data.test()
    if test.n_rows == 0:
        raise UsageError("dataset has no held-out rows to evaluate on")
    records = records_from_run(run_dir)
    snaps = list_snapshots(run_dir)
    if not snaps:
        raise UsageError(f"{run_dir}: no snapshots")
    states = []
    for path in snaps:
        _, state = read_snapshot(path)
        if len(state.beta) != data.n_dims or state.n_rows != train.n_rows:
            raise UsageError(f"{path}: snapshot has N={state.n_rows}, D={len(state.beta)}; "
                             f"dataset has N={train.n_rows}, D={data.n_dims}")
        check_state(state, train)
        states.append(state)
    last_iter = states[-1].iteration
    start = burn_in * last_iter
    rows, kept = [], []
    for st in states:
        per_row = heldout_log_predictive(st, test)
        avg = None
        if st.iteration >= start:
            kept.append(per_row)
            avg = float(np.mean(log_mean_exp(np.vstack(kept))))
        rows.append({"iteration": st.iteration, "J": st.n_clusters, "alpha": st.alpha,
                     "heldout_ll": float(np.mean(per_row)), "averaged_heldout_ll": avg,
                     "true_heldout_ll": true_ll})
    post = [r for r in records if r.iteration >= start and r.iteration > 0]
    summary = {"run": str(run_dir), "iterations": records[-1].iteration, "snapshots": len(states),
               "averaged_heldout_ll": rows[-1]["averaged_heldout_ll"], "true_heldout_ll": true_ll}
    if len(post) >= MIN_TRACE:
        summary["ess_J"] = ess([r.n_clusters for r in post])
        summary["ess_heldout_ll"] = ess([r.heldout_ll for r in post])
    if true_ll is not None and summary["averaged_heldout_ll"] is not None:
        summary["relative_error_vs_truth"] = abs(summary["averaged_heldout_ll"] - true_ll) / abs(true_ll)
    if len(records) >= 2 and all(r.heldout_ll is not None for r in records):
        summary["convergence"] = convergence_report([r.iteration for r in records],
                                                    [r.heldout_ll for r in records],
                                                    [r.n_clusters for r in records])
    return rows, records, summary


def cmd_eval(args) -> int:
    if not args.run or not args.data or not args.out:
        raise UsageError("eval needs --run, --data and --out")
    data = read_dataset(args.data)
    tpath = truth_path_for(args.data)
    true_ll = None
    if tpath.exists():
        ll = read_truth(tpath).heldout_ll_per_row
        true_ll = None if math.isnan(ll) else ll
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summaries, timed = [], []
    for i, run_dir in enumerate(args.run):
        run_dir = Path(run_dir)
        rows, records, summary = evaluate_run(run_dir, data, args.burn_in, true_ll)
        suffix = "" if len(args.run) == 1 else f"_{i}"
        write_csv(out / f"metrics{suffix}.csv", METRICS_COLUMNS, rows)
        write_convergence_csv(out / f"convergence{suffix}.csv", records, true_ll)
        cfg_path = run_dir / "config.yaml"
        summary["workers"] = load_config(cfg_path).workers if cfg_path.exists() else None
        summaries.append(summary)
        if summary["workers"] is not None:
            timed.append((summary["workers"], records))
        _print_summary(summary)
    if len(args.run) > 1 and timed:
        write_speedup_csv(out / "speedup.csv", timed)
        print(f"speedup report: {out / 'speedup.csv'}")
    (out / "summary.json").write_text(json.dumps(summaries, indent=2))
    return 0


def _print_summary(s: dict):
    print(f"{s['run']}: iterations={s['iterations']} snapshots={s['snapshots']} "
          f"averaged_heldout_ll={s['averaged_heldout_ll']} true_heldout_ll={s['true_heldout_ll']}")
    if "ess_J" in s:
        print(f"  ESS(J)={s['ess_J']:.1f} ESS(heldout_ll)={s['ess_heldout_ll']:.1f}")
    c = s.get("convergence")
    if c:
        print(f"  convergence: held-out LL within 2% of final after {c['iterations_to_ll_within_2pct']} "
              f"iterations; J within 10% of final after {c['iterations_to_J_within_10pct']} iterations")


def cmd_verify(args) -> int:
    kw = {}
    if args.seed is not None:
        params = inspect.signature(SUITES[args.suite]).parameters
        if "seed" in params:
            kw["seed"] = args.seed
        elif "seeds" in params:
            kw["seeds"] = tuple(range(args.seed, args.seed + len(params["seeds"].default)))
        else:
            raise UsageError(f"suite {args.suite!r} is deterministic and takes no --seed")
    result = run_suite(args.suite, **kw)
    print(result.report())
    return 0 if result.passed else 1


def cmd_alpha_curve(args) -> int:
    cfg = _run_config(args)
    if args.print_config:
        print(dump_config(cfg), end="")
        return 0
    if args.grid_min <= 0 or args.grid_max <= args.grid_min or args.grid_points < 2:
        raise UsageError("alpha grid needs 0 < min < max and >= 2 points")
    grid = np.geomspace(args.grid_min, args.grid_max, args.grid_points)
    rows = alpha_curve_rows(args.n_rows, args.clusters, cfg.alpha_prior, grid)
    if args.out:
        write_csv(args.out, ALPHA_COLUMNS, rows)
    for j in args.clusters:
        dens = [r["density"] for r in rows if r["J"] == j]
        print(f"N={args.n_rows} J={j}: mode alpha={curve_mode(grid, dens):.4f}")
    return 0


def cmd_prior_ess(args) -> int:
    seed = 0 if args.seed is None else args.seed
    results = []
    for alpha in args.alphas:
        for ratio in args.ratios:
            r = prior_chain_experiment(args.n_rows, args.superclusters, args.iterations, ratio, alpha, seed)
            results.append(r)
            print(f"alpha={alpha} sweeps_per_shuffle={ratio}: ESS={r['ess']:.1f} "
                  f"ESS/iteration={r['ess_per_iteration']:.5f} mean J={r['mean_clusters']:.2f} "
                  f"(expected {r['expected_clusters']:.2f})")
    if args.out:
        write_ess_csv(args.out, results)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--print-config", action="store_true", help="print the effective config and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dpmshard", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="synthetic dataset and ground truth")
    g.add_argument("--out", help="dataset path; ground truth goes to <stem>.truth.json")
    g.add_argument("--n-rows", type=int)
    g.add_argument("--n-dims", type=int)
    g.add_argument("--n-clusters", type=int)
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", parents=[common], help="run a chain, writing trace and snapshots")
    r.add_argument("--data")
    r.add_argument("--out", help="run directory")
    r.add_argument("--mode", choices=("serial", "parallel"))
    r.add_argument("--workers", type=int)
    r.add_argument("--superclusters", type=int)
    r.add_argument("--iterations", type=int)
    r.add_argument("--resume", action="store_true", help="continue from the latest snapshot in --out")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", parents=[common], help="held-out metrics from run directories")
    e.add_argument("--run", nargs="+", help="one or more run directories")
    e.add_argument("--data", help="dataset whose held-out rows are scored")
    e.add_argument("--out", help="report directory")
    e.add_argument("--burn-in", type=float, default=0.1, help="fraction of iterations discarded (default 0.1)")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", parents=[common], help="run an oracle suite")
    v.add_argument("suite", choices=sorted(SUITES))
    v.set_defaults(func=cmd_verify)

    a = sub.add_parser("alpha-curve", parents=[common], help="posterior density of alpha given N and J")
    a.add_argument("--n-rows", type=int, required=True)
    a.add_argument("--clusters", type=int, nargs="+", required=True)
    a.add_argument("--grid-min", type=float, default=0.01)
    a.add_argument("--grid-max", type=float, default=1e4)
    a.add_argument("--grid-points", type=int, default=2000)
    a.add_argument("--out", help="CSV path")
    a.set_defaults(func=cmd_alpha_curve)

    q = sub.add_parser("prior-ess", parents=[common], help="ESS of J for a prior-only chain")
    q.add_argument("--n-rows", type=int, default=200)
    q.add_argument("--superclusters", type=int, default=10)
    q.add_argument("--iterations", type=int, default=20000)
    q.add_argument("--ratios", type=int, nargs="+", default=[1, 10], help="sweeps_per_shuffle values")
    q.add_argument("--alphas", type=float, nargs="+", default=[1.0])
    q.add_argument("--out", help="CSV path")
    q.set_defaults(func=cmd_prior_ess)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    if argv is None:
        argv = sys.argv[1:]
    if list(argv) == ["--print-config"]:
        print(yaml.safe_dump(DEFAULTS, sort_keys=False), end="")
        return 0
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DpmError as e:
        print(f"dpmshard: error: {e}", file=sys.stderr)
        return e.exit_code
    except KeyboardInterrupt:
        print("dpmshard: interrupted; rerun with --resume to continue", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
