"""Compiled collapsed-Gibbs sweeps over one supercluster's rows.

The kernel releases the GIL, so shards can be swept concurrently from a
thread pool. All randomness comes in as pre-drawn permutations and
uniforms, which keeps results independent of thread scheduling.
"""
from __future__ import annotations

import math

import numba
import numpy as np


@numba.njit(nogil=True, cache=True)
def _refresh(slot, sizes, counts, beta, log_on, log_off):
    n = sizes[slot]
    for d in range(beta.shape[0]):
        denom = math.log(n + 2.0 * beta[d])
        log_on[slot, d] = math.log(counts[slot, d] + beta[d]) - denom
        log_off[slot, d] = math.log(n - counts[slot, d] + beta[d]) - denom


@numba.njit(nogil=True, cache=True)
def sweep_shard(x, rows, labels, sizes, counts, origin, n_initial, log_alpha_mu, beta, order, uniforms):
    """Run ``order.shape[0]`` sweeps over ``rows`` in place.

    Parameters
    ----------
    x : (N, D) uint8
        Full data matrix (read only).
    rows : (m,) int64
        Rows owned by the shard.
    labels : (m,) int64
        Slot of each owned row; updated in place.
    sizes, counts : (cap,) and (cap, D) int64
        Slot statistics, ``cap >= m + 1``; slots ``>= n_initial`` start empty.
    origin : (cap,) int64
        Index of the pre-existing cluster held by a slot, or -1 for a
        cluster opened during the sweep. A slot that empties is reset to -1
        so a later reuse is never mistaken for the old cluster.
    log_alpha_mu : float
        Log of the local new-table weight.
    order : (S, m) int64 and uniforms : (S, m) float64
        Visit order and categorical uniforms for each sweep.
    """
    cap = sizes.shape[0]
    n_dims = beta.shape[0]
    log_on = np.zeros((cap, n_dims))
    log_off = np.zeros((cap, n_dims))
    active = np.empty(cap, np.int64)
    pos = np.full(cap, -1, np.int64)
    free = np.empty(cap, np.int64)
    n_active = 0
    n_free = 0
    for slot in range(cap - 1, n_initial - 1, -1):
        free[n_free] = slot
        n_free += 1
    for slot in range(n_initial):
        if sizes[slot] > 0:
            active[n_active] = slot
            pos[slot] = n_active
            n_active += 1
            _refresh(slot, sizes, counts, beta, log_on, log_off)
        else:
            origin[slot] = -1
            free[n_free] = slot
            n_free += 1

    new_score = log_alpha_mu - n_dims * math.log(2.0)
    weights = np.empty(cap + 1)

    for sweep in range(order.shape[0]):
        for t in range(order.shape[1]):
            i = order[sweep, t]
            r = rows[i]
            slot = labels[i]
            sizes[slot] -= 1
            for d in range(n_dims):
                counts[slot, d] -= x[r, d]
            if sizes[slot] == 0:
                last = active[n_active - 1]
                active[pos[slot]] = last
                pos[last] = pos[slot]
                pos[slot] = -1
                n_active -= 1
                origin[slot] = -1
                free[n_free] = slot
                n_free += 1
            else:
                _refresh(slot, sizes, counts, beta, log_on, log_off)

            best = new_score
            for a in range(n_active):
                c = active[a]
                w = math.log(sizes[c])
                for d in range(n_dims):
                    if x[r, d]:
                        w += log_on[c, d]
                    else:
                        w += log_off[c, d]
                weights[a] = w
                if w > best:
                    best = w
            weights[n_active] = new_score
            total = 0.0
            for a in range(n_active + 1):
                weights[a] = math.exp(weights[a] - best)
                total += weights[a]
            target = uniforms[sweep, t] * total
            choice = n_active
            acc = 0.0
            for a in range(n_active + 1):
                acc += weights[a]
                if target < acc:
                    choice = a
                    break

            if choice == n_active:
                n_free -= 1
                slot = free[n_free]
                origin[slot] = -1
                sizes[slot] = 0
                for d in range(n_dims):
                    counts[slot, d] = 0
                active[n_active] = slot
                pos[slot] = n_active
                n_active += 1
            else:
                slot = active[choice]
            sizes[slot] += 1
            for d in range(n_dims):
                counts[slot, d] += x[r, d]
            _refresh(slot, sizes, counts, beta, log_on, log_off)
            labels[i] = slot
