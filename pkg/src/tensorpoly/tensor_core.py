"""Tensor-product, entangled-tensor and tensor-train primitives.

Flattening convention used everywhere in the package: the FIRST factor of a
tensor product is the most significant index, i.e. ``simple_tensor([u, v])``
equals ``np.kron(u, v)``. Vectors produced on a ``q**N`` grid are cut down to
their leading ``d`` entries.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


def min_base(d: int, N: int) -> int:
    """Smallest ``q`` with ``q**N >= d``."""
    d, N = int(d), int(N)
    if d < 1 or N < 1:
        raise ValueError(f"min_base needs d >= 1 and N >= 1, got d={d}, N={N}")
    q = max(1, int(round(d ** (1.0 / N))))
    # float root can be off by one either way
    while q**N < d:
        q += 1
    while q > 1 and (q - 1) ** N >= d:
        q -= 1
    return q


@dataclass(frozen=True)
class TensorDims:
    """Layer geometry: feature sizes, LoRA rank ``r``, tensor order ``N`` and rank ``R``."""

    d_in: int
    d_out: int
    r: int
    N: int
    R: int
    q_in: int = field(init=False)
    q_out: int = field(init=False)

    def __post_init__(self):
        for name in ("d_in", "d_out", "r", "N", "R"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"TensorDims.{name} must be a positive integer, got {value!r}")
            object.__setattr__(self, name, int(value))
        object.__setattr__(self, "q_in", min_base(self.d_in, self.N))
        object.__setattr__(self, "q_out", min_base(self.d_out, self.N))

    @classmethod
    def square(cls, d: int, r: int, N: int, R: int) -> "TensorDims":
        return cls(d_in=d, d_out=d, r=r, N=N, R=R)

    def as_dict(self) -> dict:
        return {"d_in": self.d_in, "d_out": self.d_out, "r": self.r, "N": self.N, "R": self.R}


def _as_finite(a, what: str) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains non-finite entries")
    return arr


def simple_tensor(vectors: Sequence) -> np.ndarray:
    """Flattened tensor product ``v_1 (x) v_2 (x) ... (x) v_N``."""
    if len(vectors) == 0:
        raise ValueError("simple_tensor needs at least one vector")
    out = _as_finite(vectors[0], "factor vector").ravel()
    for v in vectors[1:]:
        v = _as_finite(v, "factor vector").ravel()
        out = np.outer(out, v).ravel()
    return out


@dataclass(frozen=True)
class FactorVectorSet:
    """``R x N`` factor vectors of length ``q`` that encode one ``d``-vector.

    ``factors[k, i]`` is the order-``i`` factor of rank term ``k``.
    """

    factors: np.ndarray
    target_dim: int

    def __post_init__(self):
        f = _as_finite(self.factors, "FactorVectorSet.factors")
        if f.ndim != 3:
            raise ValueError(f"factors must have shape (R, N, q), got {f.shape}")
        R, N, q = f.shape
        if self.target_dim < 1:
            raise ValueError("target_dim must be positive")
        if q != min_base(self.target_dim, N):
            raise ValueError(
                f"factor length {q} does not match min_base({self.target_dim}, {N})"
            )
        f = f.copy()
        f.flags.writeable = False
        object.__setattr__(self, "factors", f)

    @property
    def R(self) -> int:
        return self.factors.shape[0]

    @property
    def N(self) -> int:
        return self.factors.shape[1]

    @property
    def q(self) -> int:
        return self.factors.shape[2]


def entangled_reconstruct(fs: FactorVectorSet) -> np.ndarray:
    """Sum of the ``R`` simple tensors, truncated to ``target_dim`` entries."""
    total = np.zeros(fs.q**fs.N)
    for k in range(fs.R):
        total += simple_tensor(list(fs.factors[k]))
    return total[: fs.target_dim]


# ---------------------------------------------------------------------------
# batched Kronecker products used by the adapters


def kron_prefixes(factors: np.ndarray) -> list[np.ndarray]:
    """Prefix products of a batch of factor vectors.

    ``factors`` has shape ``(N, *batch, q)``. Entry ``i`` of the result holds
    ``factors[0] (x) ... (x) factors[i-1]`` with shape ``(*batch, q**i)``;
    entry ``N`` is the full product.
    """
    N = factors.shape[0]
    batch = factors.shape[1:-1]
    prefixes = [np.ones(batch + (1,))]
    for i in range(N):
        prev = prefixes[-1]
        prefixes.append((prev[..., :, None] * factors[i][..., None, :]).reshape(batch + (-1,)))
    return prefixes


def kron_batch(factors: np.ndarray) -> np.ndarray:
    return kron_prefixes(factors)[-1]


def kron_batch_grad(factors: np.ndarray, prefixes: list[np.ndarray], grad_out: np.ndarray) -> np.ndarray:
    """Gradient of ``<grad_out, kron_batch(factors)>`` with respect to ``factors``.

    Contracts the upstream signal against the cached prefix product and a
    suffix product accumulated right to left, so each order costs one pass.
    """
    N = factors.shape[0]
    q = factors.shape[-1]
    batch = factors.shape[1:-1]
    grads = np.empty_like(factors)
    suffix = np.ones(batch + (1,))
    for i in range(N - 1, -1, -1):
        g = grad_out.reshape(batch + (q**i, q, q ** (N - 1 - i)))
        grads[i] = np.einsum("...aqb,...a,...b->...q", g, prefixes[i], suffix)
        suffix = (factors[i][..., :, None] * suffix[..., None, :]).reshape(batch + (-1,))
    return grads


def pad_last(a: np.ndarray, size: int) -> np.ndarray:
    """Zero-pad the last axis up to ``size`` (inverse of prefix truncation)."""
    extra = size - a.shape[-1]
    if extra < 0:
        raise ValueError("cannot pad to a smaller size")
    if extra == 0:
        return a
    pad = [(0, 0)] * (a.ndim - 1) + [(0, extra)]
    return np.pad(a, pad)


# ---------------------------------------------------------------------------
# tensor trains


@dataclass(frozen=True)
class TensorTrainCores:
    """``N`` four-way cores, core ``i`` shaped ``(left bond, row mode, right bond, col mode)``."""

    cores: tuple

    def __post_init__(self):
        cores = tuple(_as_finite(c, "tensor-train core") for c in self.cores)
        if not cores:
            raise ValueError("a tensor train needs at least one core")
        for i, c in enumerate(cores):
            if c.ndim != 4:
                raise ValueError(f"core {i} must be 4-way, got shape {c.shape}")
        if cores[0].shape[0] != 1 or cores[-1].shape[2] != 1:
            raise ValueError("boundary bonds of a tensor train must be 1")
        for i in range(len(cores) - 1):
            if cores[i].shape[2] != cores[i + 1].shape[0]:
                raise ValueError(
                    f"bond mismatch between core {i} {cores[i].shape} and core {i + 1} {cores[i + 1].shape}"
                )
        object.__setattr__(self, "cores", cores)

    @property
    def N(self) -> int:
        return len(self.cores)

    @property
    def ranks(self) -> list[int]:
        return [self.cores[0].shape[0]] + [c.shape[2] for c in self.cores]

    @property
    def row_modes(self) -> list[int]:
        return [c.shape[1] for c in self.cores]

    @property
    def col_modes(self) -> list[int]:
        return [c.shape[3] for c in self.cores]


def _contract_cores(cores: Sequence[np.ndarray]) -> np.ndarray:
    # running result shaped (rows so far, cols so far, bond)
    first = cores[0]
    acc = first[0].transpose(0, 2, 1)  # (a, b, bond)
    for core in cores[1:]:
        rows, cols, _ = acc.shape
        _, a, _, b = core.shape
        acc = np.einsum("xyl,lamb->xaybm", acc, core).reshape(rows * a, cols * b, -1)
    return acc[:, :, 0]


def tt_contract(tt: TensorTrainCores) -> np.ndarray:
    """Full matrix of a tensor train; rows/cols flattened first-core-most-significant."""
    return _contract_cores(tt.cores)


def _scaled_cores(tt: TensorTrainCores, alpha) -> list[np.ndarray]:
    alpha = _as_finite(alpha, "alpha")
    N = tt.N
    bonds = tt.ranks[1:-1]
    if alpha.ndim != 2 or alpha.shape[0] != N - 1 or any(alpha.shape[1] != b for b in bonds):
        raise ValueError(f"alpha shape {alpha.shape} does not match internal bonds {bonds}")
    cores = list(tt.cores)
    for i in range(N - 1):
        cores[i] = cores[i] * alpha[i][None, None, :, None]
    return cores


def tt_contract_weighted(tt: TensorTrainCores, alpha) -> np.ndarray:
    """Tensor-train contraction where bond ``l`` taking value ``k`` is weighted by ``alpha[l, k]``."""
    return _contract_cores(_scaled_cores(tt, alpha))


def tt_core_grads(cores: Sequence[np.ndarray], grad_out: np.ndarray) -> list[np.ndarray]:
    """Gradients of ``<grad_out, contract(cores)>`` with respect to each core.

    Uses left and right environments; ``grad_out`` is the full (untruncated)
    ``prod(a_i) x prod(b_i)`` matrix.
    """
    N = len(cores)
    a_modes = [c.shape[1] for c in cores]
    b_modes = [c.shape[3] for c in cores]
    # interleave (a_1 b_1)(a_2 b_2)... so each site owns one combined mode
    g = grad_out.reshape(a_modes + b_modes)
    perm = [ax for i in range(N) for ax in (i, N + i)]
    g = g.transpose(perm)
    site = [c.transpose(0, 1, 3, 2).reshape(c.shape[0], -1, c.shape[2]) for c in cores]
    dims = [a * b for a, b in zip(a_modes, b_modes)]

    lefts = [np.ones((1, 1))]  # (combined modes so far, bond)
    for i in range(N - 1):
        L = lefts[-1]
        nxt = np.einsum("xl,lpm->xpm", L, site[i]).reshape(-1, site[i].shape[2])
        lefts.append(nxt)
    rights = [None] * N
    rights[N - 1] = np.ones((1, 1))  # (bond, combined modes after)
    for i in range(N - 1, 0, -1):
        Rt = rights[i]
        rights[i - 1] = np.einsum("lpm,my->lpy", site[i], Rt).reshape(site[i].shape[0], -1)

    grads = []
    for i in range(N):
        left_size = int(np.prod(dims[:i], dtype=np.int64))
        right_size = int(np.prod(dims[i + 1:], dtype=np.int64))
        gi = g.reshape(left_size, dims[i], right_size)
        gs = np.einsum("xpy,xl,my->lpm", gi, lefts[i], rights[i])
        c = cores[i]
        grads.append(gs.reshape(c.shape[0], c.shape[1], c.shape[3], c.shape[2]).transpose(0, 1, 3, 2))
    return grads
