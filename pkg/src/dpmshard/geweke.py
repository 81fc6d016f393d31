"""Joint-distribution ("getting it right") tests of the transition operators.

Forward samples draw hyperparameters, a seating and data straight from the
generative model. The successive-conditional chain alternates one sampler
transition with a fresh draw of the data given the latent state. If every
operator leaves the posterior invariant, both schemes have the same joint
distribution, so the means of any statistic agree.

Three deliberately broken operators are built in so that the test can be
shown to have teeth:

``drop_mu_scaling``
    map step opens new clusters with weight ``alpha`` instead of ``alpha * mu_k``
``skip_alpha``
    the reduce step never updates ``alpha``
``wrong_shuffle``
    clusters are reassigned with the rich-get-richer ``eq7-literal`` weights
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import streams
from .config import GridSpec
from .ess import ess
from .errors import UsageError
from .hyper import AlphaPrior
from .parallel import map_sweep, reduce_step, shard_state
from .prior import ConcentrationSpec, two_stage_crp_sample
from .serial import serial_step
from .state import MixtureState, state_from_assignment

MUTATIONS = ("drop_mu_scaling", "skip_alpha", "wrong_shuffle")
STATISTICS = ("J", "alpha", "log_alpha", "bit_mean", "max_share")
MAX_ROWS = 100


@dataclass
class _Bits:
    bits: np.ndarray

    @property
    def n_rows(self):
        return self.bits.shape[0]

    @property
    def n_dims(self):
        return self.bits.shape[1]


@dataclass(frozen=True)
class GewekeConfig:
    n_rows: int = 20
    n_dims: int = 2
    n_superclusters: int = 3
    iterations: int = 20000
    n_forward: int = 5000
    statistics: tuple = STATISTICS
    thinning: int = 1
    seed: int = 0
    sampler: str = "parallel"
    mutation: str | None = None
    alpha_prior: AlphaPrior = field(default_factory=AlphaPrior)
    beta_grid: GridSpec = field(default_factory=GridSpec)

    def __post_init__(self):
        if not 1 <= self.n_rows <= MAX_ROWS:
            raise UsageError(f"Geweke tests need 1 <= N <= {MAX_ROWS}")
        if self.sampler not in ("parallel", "serial"):
            raise UsageError("sampler must be 'parallel' or 'serial'")
        if self.sampler == "serial" and self.n_superclusters != 1:
            raise UsageError("the serial sampler runs with one supercluster")
        if self.mutation is not None and self.mutation not in MUTATIONS:
            raise UsageError(f"mutation must be one of {MUTATIONS}")
        if self.mutation in ("drop_mu_scaling", "wrong_shuffle") and self.sampler != "parallel":
            raise UsageError(f"{self.mutation} only applies to the parallel sampler")
        unknown = set(self.statistics) - set(STATISTICS)
        if unknown:
            raise UsageError(f"unknown statistics {sorted(unknown)}")
        if self.iterations < 10 * self.thinning or self.n_forward < 10 or self.thinning < 1:
            raise UsageError("too few samples")


@dataclass
class GewekeResult:
    z: dict
    forward_mean: dict
    chain_mean: dict
    chain_ess: dict

    def max_abs_z(self) -> float:
        return max(abs(v) for v in self.z.values())

    def passed(self, threshold: float = 4.0) -> bool:
        return self.max_abs_z() < threshold


def draw_data(z: np.ndarray, beta: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Bits given the seating: fresh coins per cluster, then Bernoulli draws."""
    _, inv = np.unique(z, return_inverse=True)
    theta = rng.beta(beta, beta, size=(int(inv.max()) + 1 if len(z) else 0, len(beta)))
    return (rng.random((len(z), len(beta))) < theta[inv]).astype(np.uint8)


def with_data(state: MixtureState, bits: np.ndarray) -> MixtureState:
    new = state_from_assignment(bits, state.assignment, state.spec, state.beta, state.iteration)
    new.next_cluster_id = state.next_cluster_id
    return new


def statistics(state: MixtureState, bits: np.ndarray) -> dict:
    return {
        "J": float(state.n_clusters),
        "alpha": state.alpha,
        "log_alpha": math.log(state.alpha),
        "bit_mean": float(bits.mean()),
        "max_share": float(state.rows_per_supercluster().max() / state.n_rows),
    }


def forward_sample(cfg: GewekeConfig, rng: np.random.Generator) -> tuple:
    grid = cfg.beta_grid.points()
    alpha = cfg.alpha_prior.sample(rng)
    beta = rng.choice(grid, size=cfg.n_dims)
    spec = ConcentrationSpec.uniform(alpha, cfg.n_superclusters)
    pa = two_stage_crp_sample(cfg.n_rows, spec, rng)
    bits = draw_data(pa.z, beta, rng)
    return state_from_assignment(bits, pa, spec, beta), bits


def transition(state: MixtureState, bits: np.ndarray, cfg: GewekeConfig) -> MixtureState:
    data = _Bits(bits)
    grid = cfg.beta_grid.points()
    update_alpha = cfg.mutation != "skip_alpha"
    rng = streams.stream(cfg.seed, streams.REDUCE, state.iteration)
    if cfg.sampler == "serial":
        return serial_step(state, data, cfg.alpha_prior, grid, rng, update_alpha=update_alpha)
    shards = shard_state(state, cfg.seed)
    if cfg.mutation == "drop_mu_scaling":
        for sh in shards:
            sh.alpha_mu = state.alpha
    mapped = [map_sweep(sh, data, 1) for sh in shards]
    mode = "eq7-literal" if cfg.mutation == "wrong_shuffle" else "derived"
    return reduce_step(mapped, state, cfg.alpha_prior, grid, rng, mode, update_alpha=update_alpha)


def geweke_test(cfg: GewekeConfig) -> GewekeResult:
    """z-scores of (forward mean - chain mean) with ESS-corrected standard errors."""
    rng_f = streams.stream(cfg.seed, streams.GEWEKE, 0)
    fwd = {s: np.empty(cfg.n_forward) for s in cfg.statistics}
    for i in range(cfg.n_forward):
        st = statistics(*forward_sample(cfg, rng_f))
        for s in cfg.statistics:
            fwd[s][i] = st[s]

    rng_d = streams.stream(cfg.seed, streams.GEWEKE, 1)
    state, bits = forward_sample(cfg, rng_d)
    n_kept = cfg.iterations // cfg.thinning
    chain = {s: np.empty(n_kept) for s in cfg.statistics}
    for t in range(cfg.iterations):
        state = transition(state, bits, cfg)
        bits = draw_data(state.z, state.beta, rng_d)
        state = with_data(state, bits)
        if (t + 1) % cfg.thinning == 0:
            st = statistics(state, bits)
            i = (t + 1) // cfg.thinning - 1
            for s in cfg.statistics:
                chain[s][i] = st[s]

    z, fm, cm, ce = {}, {}, {}, {}
    for s in cfg.statistics:
        f, c = fwd[s], chain[s]
        e = ess(c)
        se = math.sqrt(f.var() / len(f) + c.var() / e)
        diff = f.mean() - c.mean()
        z[s] = 0.0 if diff == 0 else (diff / se if se > 0 else math.copysign(math.inf, diff))
        fm[s], cm[s], ce[s] = float(f.mean()), float(c.mean()), e
    return GewekeResult(z, fm, cm, ce)
