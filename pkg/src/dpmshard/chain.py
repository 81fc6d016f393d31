"""Chain drivers: initialization, the serial and parallel loops, and the
on-disk runner with snapshots and resume.

Every random draw at iteration ``t`` comes from a stream keyed by
``(seed, purpose, t[, k])``, so a run resumed from a snapshot at ``t``
reproduces the records an uninterrupted run would have written.
"""
from __future__ import annotations

import json
import logging
import math
import time
from pathlib import Path
from typing import Iterator

import numpy as np

from . import streams
from .config import RunConfig, dump_config
from .diagnostics import ChainRecord
from .errors import ConfigError, IntegrityError
from .formats import (dump_line, list_snapshots, read_snapshot, read_trace, snapshot_name,
                      trace_header, write_snapshot)
from .hyper import sample_alpha, sample_beta_griddy
from .model import BinaryDataset
from .parallel import MapPool, reduce_step, shard_state
from .prior import ConcentrationSpec, PartitionAssignment, crp_sample
from .serial import gibbs_sweep_serial, serial_step
from .state import MixtureState, state_from_assignment

log = logging.getLogger(__name__)


def initial_beta(grid: np.ndarray, n_dims: int) -> np.ndarray:
    """Grid point closest to 1 in log distance, for every dimension."""
    g = grid[int(np.argmin(np.abs(np.log(grid))))]
    return np.full(n_dims, g)


def calibration_rows(n_rows: int, config: RunConfig) -> int:
    c = config.calibration
    return min(n_rows, max(math.ceil(c.fraction * n_rows), c.min_rows))


def calibrate_alpha(config: RunConfig, data: BinaryDataset) -> float:
    """Short serial run on a random subset; returns the post-burn-in mean of ``alpha``."""
    n_cal = calibration_rows(data.n_rows, config)
    if n_cal == 0:
        raise ConfigError("calibration subset is empty")
    prior = config.alpha_prior
    alpha0 = prior.mean()
    iters = config.calibration.iterations
    if iters == 0:
        return alpha0
    rng = streams.stream(config.seed, streams.CALIBRATE)
    rows = np.sort(rng.choice(data.n_rows, n_cal, replace=False))
    sub = BinaryDataset(data.bits[rows])
    grid = config.beta_grid.points()
    z = crp_sample(n_cal, alpha0, rng)
    pa = PartitionAssignment(z, {int(j): 0 for j in np.unique(z)})
    state = state_from_assignment(sub.bits, pa, ConcentrationSpec(alpha0, (1.0,)), initial_beta(grid, data.n_dims))
    alphas = []
    for t in range(iters):
        state = serial_step(state, sub, prior, grid, streams.stream(config.seed, streams.CALIBRATE, t + 1))
        alphas.append(state.alpha)
    return float(np.mean(alphas[iters // 2:]))


def initialize(config: RunConfig, data: BinaryDataset, n_superclusters: int | None = None) -> MixtureState:
    """Calibrate ``alpha``, scatter rows uniformly over superclusters, then seat
    each supercluster's rows by its local CRP(``alpha * mu_k``)."""
    k_total = config.superclusters if n_superclusters is None else n_superclusters
    alpha = calibrate_alpha(config, data)
    spec = ConcentrationSpec.uniform(alpha, k_total)
    rng = streams.stream(config.seed, streams.INIT)
    n = data.n_rows
    sc_of_row = rng.integers(k_total, size=n)
    z = np.empty(n, dtype=np.int64)
    s = {}
    next_id = 0
    for k in range(k_total):
        rows = np.flatnonzero(sc_of_row == k)
        if len(rows) == 0:
            continue
        local = crp_sample(len(rows), alpha * spec.mu[k], rng)
        z[rows] = local + next_id
        n_local = int(local.max()) + 1
        s.update({next_id + j: k for j in range(n_local)})
        next_id += n_local
    grid = config.beta_grid.points()
    return state_from_assignment(data.bits, PartitionAssignment(z, s), spec, initial_beta(grid, data.n_dims))


def parallel_step(state: MixtureState, train: BinaryDataset, config: RunConfig, pool: MapPool) -> tuple:
    """map (concurrent over shards) -> barrier -> reduce -> shuffle."""
    timings = {}
    t0 = time.perf_counter()
    shards = shard_state(state, config.seed)
    mapped = pool.run(shards, train, config.sweeps_per_shuffle)
    timings["map"] = time.perf_counter() - t0
    rng = streams.stream(config.seed, streams.REDUCE, state.iteration)
    new = reduce_step(mapped, state, config.alpha_prior, config.beta_grid.points(), rng,
                      config.shuffle_mode, timings=timings)
    return new, timings


def timed_serial_step(state: MixtureState, train: BinaryDataset, config: RunConfig) -> tuple:
    rng = streams.stream(config.seed, streams.SERIAL, state.iteration)
    t0 = time.perf_counter()
    new = gibbs_sweep_serial(state, train, rng)
    t1 = time.perf_counter()
    if new.n_rows:
        new = new.with_alpha(sample_alpha(new.n_clusters, new.n_rows, config.alpha_prior, new.alpha, rng))
    new.beta = sample_beta_griddy(new, train, config.beta_grid.points(), rng)
    new.iteration = state.iteration + 1
    return new, {"map": t1 - t0, "reduce": time.perf_counter() - t1, "shuffle": 0.0}


def iterate_chain(config: RunConfig, data: BinaryDataset, state: MixtureState | None = None,
                  mode: str | None = None) -> Iterator[tuple]:
    """Yield ``(record, state)`` for the initial state and each iteration up to ``config.iterations``.

    ``data`` carries its own held-out split; only the training rows are clustered.
    When ``state`` is given the chain resumes after ``state.iteration`` without
    re-emitting its record.
    """
    mode = mode or config.mode
    train, test = data.train(), data.test()
    test = test if test.n_rows else None
    if state is None:
        state = initialize(config, train, 1 if mode == "serial" else None)
        yield ChainRecord.from_state(state, test), state
    elif state.n_rows != train.n_rows or len(state.beta) != train.n_dims:
        raise IntegrityError("resume state does not match the dataset")
    with MapPool(config.workers if mode == "parallel" else 1) as pool:
        while state.iteration < config.iterations:
            if mode == "serial":
                state, timings = timed_serial_step(state, train, config)
            else:
                state, timings = parallel_step(state, train, config, pool)
            yield ChainRecord.from_state(state, test, timings), state


def run_serial(config: RunConfig, data: BinaryDataset) -> list:
    return [rec for rec, _ in iterate_chain(config, data, mode="serial")]


def run_parallel(config: RunConfig, data: BinaryDataset) -> list:
    return [rec for rec, _ in iterate_chain(config, data, mode="parallel")]


def run_to_directory(config: RunConfig, data: BinaryDataset, out_dir, resume: bool = False,
                     on_record=None) -> list:
    """Run a chain writing ``trace.jsonl``, ``timings.jsonl`` and snapshots under ``out_dir``."""
    out = Path(out_dir)
    snap_dir = out / "snapshots"
    trace_path, timing_path = out / "trace.jsonl", out / "timings.jsonl"
    chash = config.hash()
    state = None
    if resume and trace_path.exists():
        header, _ = read_trace(trace_path)
        if header.get("config_hash") != chash or header.get("seed") != config.seed or header.get("mode") != config.mode:
            raise IntegrityError("existing run was produced by a different config; refusing to resume")
        snaps = list_snapshots(out)
        if not snaps:
            raise IntegrityError("no snapshot to resume from")
        snap_header, state = read_snapshot(snaps[-1], data.train())
        if snap_header.get("config_hash") != chash or snap_header.get("seed") != config.seed:
            raise IntegrityError(f"{snaps[-1]}: snapshot belongs to a different run")
        _truncate_after(trace_path, state.iteration, keep_header=True)
        _truncate_after(timing_path, state.iteration, keep_header=False)
        log.info("resuming from iteration %d", state.iteration)
    else:
        snap_dir.mkdir(parents=True, exist_ok=True)
        (out / "config.yaml").write_text(dump_config(config))
        trace_path.write_text(dump_line(trace_header(config.seed, chash, config.mode)))
        timing_path.write_text("")
        for old in list_snapshots(out):
            old.unlink()

    records = []
    with open(trace_path, "a") as tf, open(timing_path, "a") as mf:
        for rec, st in iterate_chain(config, data, state):
            tf.write(dump_line(rec.trace_dict()))
            mf.write(dump_line(rec.timing_dict()))
            tf.flush()
            mf.flush()
            period = config.snapshot_period
            if st.iteration == 0 or st.iteration == config.iterations or (period and st.iteration % period == 0):
                write_snapshot(snap_dir / snapshot_name(st.iteration), st, config.seed, chash)
            records.append(rec)
            if on_record is not None:
                on_record(rec, st)
    return records


def _truncate_after(path: Path, iteration: int, keep_header: bool):
    if not path.exists():
        return
    lines = path.read_text().splitlines(keepends=True)
    kept = []
    for i, line in enumerate(lines):
        if keep_header and i == 0:
            kept.append(line)
            continue
        if line.strip() and json.loads(line)["iteration"] <= iteration:
            kept.append(line)
    path.write_text("".join(kept))
