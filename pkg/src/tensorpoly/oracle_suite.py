"""Randomized comparison of the vectorized kernels against the nested-loop oracles."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import oracles
from .adapters import TLoRAFactors, tlora_materialize
from .routing import TensorPolyInventory, tp1_combine, tp2_combine
from .tensor_core import (
    FactorVectorSet,
    TensorDims,
    TensorTrainCores,
    entangled_reconstruct,
    min_base,
    tt_contract,
    tt_contract_weighted,
)

OPERATIONS = ("entangled_reconstruct", "tlora_materialize", "tp1_combine", "tp2_combine",
              "tt_contract", "tt_contract_weighted")
FLOAT_TOL = 1e-12


@dataclass
class OracleCase:
    op: str
    index: int
    integer: bool
    shape: str
    error: float
    passed: bool

    def line(self) -> str:
        kind = "int" if self.integer else "float"
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.op:<22} #{self.index:<3} {kind:<5} {self.shape:<24} err={self.error:.2e}"


def _draw(rng, shape, integer):
    if integer:
        return rng.integers(-3, 4, size=shape).astype(np.float64)
    return rng.normal(size=shape)


def _compare(fast, slow, integer):
    fast = np.asarray(fast, dtype=np.float64)
    slow = np.asarray(slow, dtype=np.float64)
    if fast.shape != slow.shape:
        return float("inf"), False
    if integer:
        diff = float(np.max(np.abs(fast - slow))) if fast.size else 0.0
        return diff, bool(np.array_equal(fast, slow))
    scale = max(float(np.max(np.abs(slow))) if slow.size else 0.0, np.finfo(np.float64).tiny)
    err = float(np.max(np.abs(fast - slow))) / scale if fast.size else 0.0
    return err, err <= FLOAT_TOL


def _small_dims(rng, max_d=64):
    N = int(rng.integers(1, 4))
    R = int(rng.integers(1, 4))
    d = int(rng.integers(1, max_d + 1))
    return d, N, R


def _case(op, rng, integer):
    if op == "entangled_reconstruct":
        d, N, R = _small_dims(rng)
        q = min_base(d, N)
        fac = _draw(rng, (R, N, q), integer)
        fast = entangled_reconstruct(FactorVectorSet(fac, d))
        return fast, oracles.brute_entangled(fac.tolist(), d), f"d={d} N={N} R={R}"
    if op in ("tlora_materialize", "tp1_combine", "tp2_combine"):
        d, N, R = _small_dims(rng)
        r = int(rng.integers(1, 4))
        dims = TensorDims(d_in=d, d_out=d, r=r, N=N, R=R)
        fa = _draw(rng, (N, r, dims.q_out, R), integer)
        fb = _draw(rng, (N, r, dims.q_in, R), integer)
        f = TLoRAFactors(fa, fb, dims)
        shape = f"d={d} r={r} N={N} R={R}"
        if op == "tlora_materialize":
            fast = np.concatenate([tlora_materialize(f, "A"), tlora_materialize(f, "B")])
            slow = np.concatenate([oracles.brute_materialize(fa, d), oracles.brute_materialize(fb, d)])
        elif op == "tp1_combine":
            alpha = _draw(rng, (R,), integer)
            fast = np.concatenate(tp1_combine(TensorPolyInventory(f, "tp1"), alpha))
            slow = np.concatenate([oracles.brute_materialize(fa, d, alpha), oracles.brute_materialize(fb, d, alpha)])
        else:
            alpha = _draw(rng, (N, R), integer)
            fast = np.concatenate(tp2_combine(TensorPolyInventory(f, "tp2"), alpha))
            slow = np.concatenate([oracles.brute_order_merge(fa, d, alpha), oracles.brute_order_merge(fb, d, alpha)])
        return fast, slow, shape
    # tensor trains: keep the full matrix within 64 x 64
    N = int(rng.integers(1, 4))
    R = int(rng.integers(1, 4))
    cap = {1: 64, 2: 8, 3: 4}[N]
    a_modes = rng.integers(1, cap + 1, size=N)
    b_modes = rng.integers(1, cap + 1, size=N)
    bonds = [1] + [R] * (N - 1) + [1]
    cores = [_draw(rng, (bonds[i], int(a_modes[i]), bonds[i + 1], int(b_modes[i])), integer) for i in range(N)]
    tt = TensorTrainCores(tuple(cores))
    shape = f"N={N} R={R} rows={int(np.prod(a_modes))} cols={int(np.prod(b_modes))}"
    if op == "tt_contract":
        return tt_contract(tt), oracles.brute_tt(cores), shape
    alpha = _draw(rng, (N - 1, R), integer)
    return tt_contract_weighted(tt, alpha), oracles.brute_tt(cores, alpha), shape


def run_oracle_suite(count: int = 120, seed: int = 0) -> list[OracleCase]:
    """``count`` random instances spread round-robin over every operation.

    Even-numbered instances of each operation use small integer inputs and
    must match exactly; odd ones use Gaussian floats.
    """
    rng = np.random.default_rng(seed)
    cases = []
    for i in range(count):
        op = OPERATIONS[i % len(OPERATIONS)]
        integer = (i // len(OPERATIONS)) % 2 == 0
        fast, slow, shape = _case(op, rng, integer)
        err, ok = _compare(fast, slow, integer)
        cases.append(OracleCase(op, i, integer, shape, err, ok))
    return cases
