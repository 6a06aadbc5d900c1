"""Nested-loop reference implementations.

Everything here walks explicit multi-indices with ``itertools.product`` and
plain Python arithmetic. None of it calls into the vectorized code paths, so
these functions serve as independent oracles for the tests and the ``oracle``
CLI command. They are slow on purpose; keep inputs small.
"""
from __future__ import annotations

import itertools

import numpy as np


def _flat_index(multi, sizes):
    idx = 0
    for m, s in zip(multi, sizes):
        idx = idx * s + m
    return idx


def brute_simple_tensor(vectors):
    sizes = [len(v) for v in vectors]
    out = [0] * int(np.prod(sizes))
    for multi in itertools.product(*[range(s) for s in sizes]):
        val = 1
        for v, m in zip(vectors, multi):
            val = val * v[m]
        out[_flat_index(multi, sizes)] = val
    return np.array(out, dtype=np.float64)


def brute_entangled(factors, d):
    """``factors[k][i]`` is a length-``q`` vector; sum over ``k``, keep ``d`` entries."""
    R = len(factors)
    N = len(factors[0])
    q = len(factors[0][0])
    out = [0] * (q**N)
    for multi in itertools.product(range(q), repeat=N):
        pos = _flat_index(multi, [q] * N)
        for k in range(R):
            val = 1
            for i in range(N):
                val = val * factors[k][i][multi[i]]
            out[pos] += val
    return np.array(out[:d], dtype=np.float64)


def brute_materialize(fac, d, alpha=None):
    """Column-wise entangled vectors from a ``(N, r, q, R)`` factor array.

    ``alpha`` (length ``R``) weights each rank term; ``None`` means all ones.
    """
    N, r, q, R = np.shape(fac)
    out = np.zeros((d, r))
    for c in range(r):
        for k in range(R):
            w = 1 if alpha is None else alpha[k]
            for multi in itertools.product(range(q), repeat=N):
                pos = _flat_index(multi, [q] * N)
                if pos >= d:
                    continue
                val = w
                for i in range(N):
                    val = val * fac[i][c][multi[i]][k]
                out[pos, c] += val
    return out


def brute_order_merge(fac, d, alpha):
    """Per-order rank mixing followed by the column-wise tensor product."""
    N, r, q, R = np.shape(fac)
    out = np.zeros((d, r))
    for c in range(r):
        mixed = [[sum(alpha[i][k] * fac[i][c][a][k] for k in range(R)) for a in range(q)] for i in range(N)]
        for multi in itertools.product(range(q), repeat=N):
            pos = _flat_index(multi, [q] * N)
            if pos >= d:
                continue
            val = 1
            for i in range(N):
                val = val * mixed[i][multi[i]]
            out[pos, c] = val
    return out


def brute_tt(cores, alpha=None):
    """Element-by-element tensor-train contraction with optional bond weights."""
    N = len(cores)
    a_modes = [np.shape(c)[1] for c in cores]
    b_modes = [np.shape(c)[3] for c in cores]
    bonds = [np.shape(c)[2] for c in cores[:-1]]
    out = np.zeros((int(np.prod(a_modes)), int(np.prod(b_modes))))
    for a_multi in itertools.product(*[range(s) for s in a_modes]):
        row = _flat_index(a_multi, a_modes)
        for b_multi in itertools.product(*[range(s) for s in b_modes]):
            col = _flat_index(b_multi, b_modes)
            total = 0
            for bond_multi in itertools.product(*[range(s) for s in bonds]):
                left = [0] + list(bond_multi)
                right = list(bond_multi) + [0]
                val = 1
                if alpha is not None:
                    for lvl, k in enumerate(bond_multi):
                        val = val * alpha[lvl][k]
                for i in range(N):
                    val = val * cores[i][left[i]][a_multi[i]][right[i]][b_multi[i]]
                total += val
            out[row, col] = total
    return out


def brute_poly(modules, alpha):
    S = len(modules)
    out = np.zeros_like(np.asarray(modules[0], dtype=np.float64))
    for i in range(S):
        rows, cols = np.shape(modules[i])
        for a in range(rows):
            for b in range(cols):
                out[a, b] += alpha[i] * modules[i][a][b]
    return out
