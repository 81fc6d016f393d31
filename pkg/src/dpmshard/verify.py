"""Oracle suites run by ``dpmshard verify`` and by the acceptance tests.

Each suite returns a :class:`SuiteResult`; ``passed`` compares the measured
quantity with a fixed threshold and ``lines`` is a human-readable report.
"""
from __future__ import annotations

import hashlib
import itertools
import math
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import chisquare, ks_2samp

from . import streams
from .chain import initialize, iterate_chain, run_parallel, run_serial, run_to_directory
from .config import CalibrationSpec, RunConfig
from .datagen import GeneratorSpec, generate
from .diagnostics import alpha_posterior_curve, curve_mode
from .errors import UsageError
from .geweke import MUTATIONS, GewekeConfig, geweke_test
from .hyper import AlphaPrior, sample_alpha
from .parallel import prior_chain_experiment
from .reports import speedup_rows
from .prior import (ConcentrationSpec, PartitionAssignment, canonical_partition, enumerate_partitions,
                    eppf_exact, joint_log_prior, partition_labels, two_stage_crp_sample)


@dataclass
class SuiteResult:
    name: str
    passed: bool
    lines: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)

    def report(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return "\n".join([f"[{status}] {self.name}", *("  " + ln for ln in self.lines)])


def marginal_fit(n_rows: int = 6, n_superclusters: int = 3, alpha: float = 1.0,
                 draws: int = 200_000, seed: int = 0) -> tuple:
    """TV distance and chi-square p-value of two-stage CRP draws against the exact EPPF.

    An exact sampler's TV is not zero at finite ``draws``; its expectation is
    roughly ``sum(sqrt(p)) / sqrt(2 * pi * draws)``.
    """
    spec = ConcentrationSpec.uniform(alpha, n_superclusters)
    rng = streams.stream(seed, streams.GEWEKE, 100)
    counts = {}
    for _ in range(draws):
        p = canonical_partition(two_stage_crp_sample(n_rows, spec, rng).z)
        counts[p] = counts.get(p, 0) + 1
    parts = enumerate_partitions(n_rows)
    unseen = set(counts) - set(parts)
    if unseen:
        raise AssertionError(f"sampler produced non-partitions {sorted(unseen)[:3]}")
    exact = np.array([eppf_exact(p, alpha) for p in parts])
    observed = np.array([counts.get(p, 0) for p in parts], dtype=float)
    tv = 0.5 * float(np.abs(observed / draws - exact).sum())
    pvalue = float(chisquare(observed, exact / exact.sum() * draws).pvalue)
    return tv, pvalue


def marginal_tv(**kw) -> float:
    return marginal_fit(**kw)[0]


def suite_marginal(draws: int = 200_000, seed: int = 0, threshold: float = 0.01) -> SuiteResult:
    tv, pvalue = marginal_fit(draws=draws, seed=seed)
    return SuiteResult("marginal", tv < threshold,
                       [f"N=6 K=3 alpha=1 draws={draws}: TV={tv:.5f} (threshold {threshold}), "
                        f"chi-square p={pvalue:.3f}"], {"tv": tv, "p": pvalue})


def normalization_error(max_rows: int = 4, max_superclusters: int = 3, alphas=(0.3, 1.0, 4.0)) -> tuple:
    """Largest |sum - 1| of the joint prior over all (z, s), and the largest
    relative spread of the joint prior across s for a fixed partition under uniform mu."""
    worst_sum, worst_spread = 0.0, 0.0
    for n in range(1, max_rows + 1):
        parts = enumerate_partitions(n)
        for k in range(1, max_superclusters + 1):
            mus = [tuple([1.0 / k] * k)]
            if k > 1:
                w = np.arange(1, k + 1, dtype=float)
                mus.append(tuple(w / w.sum()))
            for alpha, mu in itertools.product(alphas, mus):
                spec = ConcentrationSpec(alpha, mu)
                uniform = len(set(mu)) == 1
                total = 0.0
                for p in parts:
                    z = partition_labels(p)
                    vals = [math.exp(joint_log_prior(PartitionAssignment(z, dict(enumerate(s))), spec))
                            for s in itertools.product(range(k), repeat=len(p))]
                    total += sum(vals)
                    if uniform:
                        worst_spread = max(worst_spread, (max(vals) - min(vals)) / max(vals))
                    worst_sum = max(worst_sum, abs(sum(vals) - eppf_exact(p, alpha)))
                worst_sum = max(worst_sum, abs(total - 1.0))
    return worst_sum, worst_spread


def suite_normalization(tol: float = 1e-10, spread_tol: float = 1e-14) -> SuiteResult:
    err, spread = normalization_error()
    # spread is pure rounding: the log prior sums identical log(mu_k) terms in different groupings
    ok = err < tol and spread < spread_tol
    return SuiteResult("normalization", ok,
                       [f"max |sum - 1| and max |sum_s - EPPF| = {err:.2e} (tol {tol})",
                        f"max relative spread across s at uniform mu = {spread:.2e} (tol {spread_tol})"],
                       {"error": err, "spread": spread})


def suite_geweke(iterations: int = 200_000, serial_iterations: int = 120_000, n_forward: int = 8_000,
                 seed: int = 1, threshold: float = 4.0, mutation_threshold: float = 6.0,
                 mutation_iterations: int = 4_000, include_serial: bool = True) -> SuiteResult:
    """Chain lengths give J, the slowest-mixing statistic, roughly 5e3 effective samples."""
    lines, metrics, ok = [], {}, True
    runs = [("parallel", 3, iterations)] + ([("serial", 1, serial_iterations)] if include_serial else [])
    for sampler, k, n_iter in runs:
        r = geweke_test(GewekeConfig(n_superclusters=k, iterations=n_iter, n_forward=n_forward,
                                     seed=seed, sampler=sampler))
        ok &= r.passed(threshold)
        metrics[sampler] = r.z
        lines.append(f"{sampler}: max|z|={r.max_abs_z():.2f} (< {threshold}) "
                     + " ".join(f"{s}={v:+.2f}" for s, v in r.z.items())
                     + "  chain ESS " + " ".join(f"{s}={v:.0f}" for s, v in r.chain_ess.items()))
    for m in MUTATIONS:
        r = geweke_test(GewekeConfig(iterations=mutation_iterations, n_forward=n_forward, seed=seed, mutation=m))
        caught = r.max_abs_z() > mutation_threshold
        ok &= caught
        metrics[m] = r.z
        lines.append(f"mutation {m}: max|z|={r.max_abs_z():.1f} ({'detected' if caught else 'MISSED'}, > {mutation_threshold})")
    return SuiteResult("geweke", ok, lines, metrics)


def agreement_replicate(seed: int, iterations: int = 5_000, burn_in: int = 500, thin: int = 10,
                        n_train: int = 60, n_dims: int = 4, n_superclusters: int = 3) -> dict:
    """KS p-values of post-burn-in J and held-out LL between serial and parallel chains."""
    n_test = 3
    data, _ = generate(GeneratorSpec(n_train + n_test, n_dims, 4, seed=seed,
                                     heldout_fraction=n_test / (n_train + n_test)))
    cfg = RunConfig(seed=seed, iterations=iterations, superclusters=n_superclusters, snapshot_period=0)
    out = {}
    chains = {"serial": run_serial(cfg.replace(mode="serial"), data),
              "parallel": run_parallel(cfg, data)}
    for stat in ("J", "heldout_ll"):
        samples = []
        for recs in chains.values():
            kept = recs[burn_in + 1::thin]
            samples.append([r.n_clusters if stat == "J" else r.heldout_ll for r in kept])
        out[stat] = float(ks_2samp(*samples).pvalue)
    return out


def suite_agreement(seeds=(0, 1, 2, 3, 4), p_min: float = 0.01, required: int = 4, **kw) -> SuiteResult:
    lines, passes = [], 0
    per_seed = {}
    for seed in seeds:
        p = agreement_replicate(seed, **kw)
        good = min(p.values()) > p_min
        passes += good
        per_seed[seed] = p
        lines.append(f"seed {seed}: p(J)={p['J']:.3f} p(heldout_ll)={p['heldout_ll']:.3f} "
                     f"{'ok' if good else 'rejected'}")
    lines.append(f"{passes}/{len(seeds)} replicates with p > {p_min} (need {required})")
    return SuiteResult("agreement", passes >= required, lines, {"p": per_seed, "passes": passes})


def alpha_curve_modes(n_rows: int = 131_072, cluster_counts=(128, 512, 2048),
                      prior: AlphaPrior | None = None) -> list:
    prior = prior or AlphaPrior()
    grid = np.geomspace(1.0, 1e4, 4000)
    return [curve_mode(grid, alpha_posterior_curve(n_rows, j, prior, grid)) for j in cluster_counts]


def alpha_chain_tv(n_rows: int = 131_072, n_clusters: int = 512, samples: int = 50_000, bins: int = 20,
                   seed: int = 0, prior: AlphaPrior | None = None) -> float:
    """TV between a slice-sampler histogram and quadrature on equal-mass bins."""
    prior = prior or AlphaPrior()
    grid = np.geomspace(1e-3, 1e5, 20_000)
    dens = alpha_posterior_curve(n_rows, n_clusters, prior, grid)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(grid))])
    cdf /= cdf[-1]
    edges = np.interp(np.linspace(0, 1, bins + 1)[1:-1], cdf, grid)
    expected = np.diff(np.concatenate([[0.0], np.interp(edges, grid, cdf), [1.0]]))
    rng = streams.stream(seed, streams.GEWEKE, 200)
    a = curve_mode(grid, dens)
    draws = np.empty(samples)
    for i in range(samples):
        a = sample_alpha(n_clusters, n_rows, prior, a, rng)
        draws[i] = a
    observed = np.bincount(np.searchsorted(edges, draws), minlength=bins) / samples
    return float(0.5 * np.abs(observed - expected).sum())


def suite_alpha(tv_threshold: float = 0.02, samples: int = 50_000, seed: int = 0) -> SuiteResult:
    modes = alpha_curve_modes()
    increasing = all(b > a for a, b in zip(modes, modes[1:]))
    tv = alpha_chain_tv(samples=samples, seed=seed)
    return SuiteResult("alpha", increasing and tv < tv_threshold,
                       [f"modes at J=128,512,2048 (N=131072): {', '.join(f'{m:.2f}' for m in modes)}",
                        f"slice-sampler histogram vs quadrature: TV={tv:.4f} (threshold {tv_threshold})"],
                       {"modes": modes, "tv": tv})


def suite_ess(iterations: int = 20_000, seed: int = 0, max_ratio: float = 3.0) -> SuiteResult:
    by_ratio = {s: prior_chain_experiment(200, 10, iterations, s, 1.0, seed)["ess_per_iteration"] for s in (1, 10)}
    by_alpha = {a: prior_chain_experiment(200, 10, iterations, 1, a, seed)["ess_per_iteration"] for a in (0.5, 2.0, 8.0)}
    lo, hi = sorted(by_ratio.values())
    ratio = hi / lo if lo > 0 else math.inf
    vals = list(by_alpha.values())
    monotone = all(b > a for a, b in zip(vals, vals[1:]))
    return SuiteResult("ess", ratio <= max_ratio and monotone,
                       [f"ESS/iter at sweeps_per_shuffle 1, 10: {by_ratio[1]:.4f}, {by_ratio[10]:.4f} "
                        f"(ratio {ratio:.2f}, max {max_ratio})",
                        "ESS/iter at alpha 0.5, 2, 8: " + ", ".join(f"{v:.4f}" for v in vals)
                        + (" increasing" if monotone else " NOT increasing")],
                       {"by_ratio": by_ratio, "by_alpha": by_alpha, "ratio": ratio})


def trace_bytes_across_workers(workers=(1, 3), n_rows: int = 400, n_dims: int = 8, iterations: int = 20,
                               seed: int = 7, repeats: int = 2) -> list:
    """Trace file bytes from ``repeats`` runs at each worker count, same seed and data."""
    data, _ = generate(GeneratorSpec(n_rows, n_dims, 8, seed=seed))
    cfg = RunConfig(seed=seed, iterations=iterations, superclusters=4, snapshot_period=5,
                    calibration=CalibrationSpec(iterations=20))
    out = []
    with tempfile.TemporaryDirectory() as tmp:
        for w in workers:
            for r in range(repeats):
                d = Path(tmp) / f"w{w}_r{r}"
                run_to_directory(cfg.replace(workers=w), data, d)
                out.append(((w, r), (d / "trace.jsonl").read_bytes()))
    return out


def suite_determinism(seed: int = 7, iterations: int = 20) -> SuiteResult:
    traces = trace_bytes_across_workers(seed=seed, iterations=iterations)
    ref = traces[0][1]
    same = all(b == ref for _, b in traces)
    digests = ", ".join(f"W={w} run {r}: {hashlib.sha256(b).hexdigest()[:12]}" for (w, r), b in traces)
    return SuiteResult("determinism", same, [f"trace digests {digests}",
                                             "identical" if same else "traces DIFFER"],
                       {"identical": same})


def speedup_measurement(workers=(1, 4), n_rows: int = 100_000, n_dims: int = 32, n_clusters: int = 256,
                        n_superclusters: int = 32, iterations: int = 10, seed: int = 11) -> list:
    """Mean per-iteration map wall-clock for each worker count, all starting from one state."""
    data, _ = generate(GeneratorSpec(n_rows, n_dims, n_clusters, seed=seed, heldout_fraction=0.0))
    cfg = RunConfig(seed=seed, iterations=iterations, superclusters=n_superclusters, snapshot_period=0)
    start = initialize(cfg, data)
    runs = []
    for w in workers:
        recs = [rec for rec, _ in iterate_chain(cfg.replace(workers=w), data, start.copy())]
        runs.append((w, recs))
    return speedup_rows(runs)


SUITES = {
    "marginal": suite_marginal,
    "normalization": suite_normalization,
    "geweke": suite_geweke,
    "agreement": suite_agreement,
    "alpha": suite_alpha,
    "ess": suite_ess,
    "determinism": suite_determinism,
}


def run_suite(name: str, **kw) -> SuiteResult:
    if name not in SUITES:
        raise UsageError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
    return SUITES[name](**kw)
