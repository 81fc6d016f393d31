"""Reference single-process collapsed Gibbs sampler (one supercluster).

This path is written directly in numpy and deliberately shares no code with
the compiled map kernel in :mod:`dpmshard.kernels`, so the two can be used
to check each other.
"""
from __future__ import annotations

import numpy as np

from .errors import IntegrityError, UsageError
from .hyper import AlphaPrior, sample_alpha, sample_beta_griddy
from .model import BinaryDataset, log_predictive_matrix
from .prior import PartitionAssignment, local_table_logprobs
from .state import MixtureState, registry_from_labels
from .streams import sample_log_categorical


def _quick_check(state: MixtureState, data: BinaryDataset):
    if data.n_dims != len(state.beta):
        raise UsageError(f"data has {data.n_dims} dims, state has {len(state.beta)}")
    if state.n_rows != data.n_rows:
        raise IntegrityError(f"state covers {state.n_rows} rows, data has {data.n_rows}")
    if sum(c.size for c in state.clusters.values()) != state.n_rows:
        raise IntegrityError("cluster sizes do not sum to N")
    if set(state.s) != set(state.clusters):
        raise IntegrityError("supercluster map and registry disagree")


def gibbs_sweep_serial(state: MixtureState, data: BinaryDataset, rng: np.random.Generator) -> MixtureState:
    """Reassign every row once, in a fresh random order, from its full conditional.

    A row may join any existing cluster (weight = its size without the row)
    or open a new one (weight ``alpha``). With several superclusters the new
    cluster's supercluster is drawn in proportion to ``mu``.
    """
    _quick_check(state, data)
    bits = data.bits
    beta = state.beta
    alpha = state.alpha
    n_dims = data.n_dims

    ids, sizes, counts = state.stacked()
    slot_ids = ids.tolist()
    slot_of = {j: i for i, j in enumerate(slot_ids)}
    sizes = sizes.astype(float)
    counts = counts.astype(float)
    z = state.z.copy()
    s = dict(state.s)
    next_id = state.next_cluster_id
    mu = np.asarray(state.spec.mu)
    empty = np.zeros((1, n_dims))

    order = rng.permutation(len(z))
    uniforms = rng.random(len(z))
    for n, u in zip(order, uniforms):
        x = bits[n]
        i = slot_of[z[n]]
        sizes[i] -= 1
        counts[i] -= x
        if sizes[i] == 0:
            del s[slot_ids[i]]
        active = np.flatnonzero(sizes > 0)
        logp = local_table_logprobs(alpha, sizes[active], include_new=True)
        logp += log_predictive_matrix(x[None, :], np.append(sizes[active], 0.0),
                                      np.vstack([counts[active], empty]), beta)[0]
        c = sample_log_categorical(logp, u)
        if c == len(active):
            i = len(slot_ids)
            slot_ids.append(next_id)
            slot_of[next_id] = i
            s[next_id] = 0 if len(mu) == 1 else int(rng.choice(len(mu), p=mu))
            next_id += 1
            sizes = np.append(sizes, 0.0)
            counts = np.vstack([counts, empty])
        else:
            i = active[c]
        sizes[i] += 1
        counts[i] += x
        z[n] = slot_ids[i]

    clusters = registry_from_labels(bits, z)
    return MixtureState(PartitionAssignment(z, s), clusters, state.spec, beta.copy(), next_id, state.iteration)


def serial_step(state: MixtureState, data: BinaryDataset, prior: AlphaPrior, grid: np.ndarray,
                rng: np.random.Generator, update_alpha: bool = True) -> MixtureState:
    """One full iteration: sweep, then ``alpha``, then ``beta``."""
    state = gibbs_sweep_serial(state, data, rng)
    if update_alpha and state.n_rows:
        state = state.with_alpha(sample_alpha(state.n_clusters, state.n_rows, prior, state.alpha, rng))
    state.beta = sample_beta_griddy(state, data, grid, rng)
    state.iteration += 1
    return state
