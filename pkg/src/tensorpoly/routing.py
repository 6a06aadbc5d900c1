"""Task-level routing over latent experts and the four merge rules.

Routing logits are per task (not per token). A task's row is pushed through a
Gumbel-sigmoid relaxation, normalized along the rank/module axis, and then
used to merge the shared experts into a single adapter for that task.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .adapters import TLoRAFactors, _check_scale, materialize_factors
from .tensor_core import TensorDims, TensorTrainCores, kron_batch, tt_contract_weighted

log = logging.getLogger(__name__)

CLAMP_EPS = 1e-7
VARIANTS = ("poly", "tp1", "tp2", "tpx")


def sigmoid(x):
    # tanh form does not overflow for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logistic_noise(rng: np.random.Generator, shape) -> np.ndarray:
    """Difference of two standard Gumbels, drawn as ``log u - log(1 - u)``."""
    u = rng.random(shape)
    u = np.clip(u, np.finfo(np.float64).tiny, 1.0 - np.finfo(np.float64).epsneg)
    return np.log(u) - np.log1p(-u)


def gumbel_sigmoid(logits, temperature: float = 1.0, rng: Optional[np.random.Generator] = None,
                   mode: str = "train", noise=None, hard: bool = False) -> np.ndarray:
    """Relaxed Bernoulli sample ``sigmoid((z + L) / temperature)``, clamped into ``(0, 1)``.

    In ``eval`` mode no noise is added; ``hard=True`` additionally thresholds
    at 0.5. A pre-drawn ``noise`` array may be passed to replay a sample.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=np.float64)
    if mode == "train":
        if noise is None:
            if rng is None:
                raise ValueError("train-mode sampling needs an rng or explicit noise")
            noise = logistic_noise(rng, z.shape)
        y = sigmoid((z + noise) / temperature)
    elif mode == "eval":
        y = sigmoid(z / temperature)
        if hard:
            y = (y > 0.5).astype(np.float64)
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return np.clip(y, CLAMP_EPS, 1.0 - CLAMP_EPS)


def normalize_weights(z_hat, axis: int = -1, epsilon: float = 1e-12) -> np.ndarray:
    z_hat = np.asarray(z_hat, dtype=np.float64)
    total = z_hat.sum(axis=axis, keepdims=True)
    if np.any(total <= epsilon):
        log.warning("routing slice with (near) zero total mass; mixing weights collapse to ~0")
    return z_hat / (total + epsilon)


@dataclass
class RoutingLogits:
    """Routing logits for every task: ``T x S``, ``T x R``, ``T x N x R`` or ``T x (N-1) x R``."""

    variant: str
    z: np.ndarray

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown routing variant {self.variant!r}")
        self.z = np.asarray(self.z, dtype=np.float64)
        if not np.all(np.isfinite(self.z)):
            raise ValueError("routing logits must be finite")
        want = 2 if self.variant in ("poly", "tp1") else 3
        if self.z.ndim != want:
            raise ValueError(f"{self.variant} logits must be {want}-d, got shape {self.z.shape}")

    @property
    def T(self) -> int:
        return self.z.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {"logits": self.z}


@dataclass
class RoutingSample:
    """One task's relaxed routing draw, its mixing weights and the noise that produced it."""

    z_hat: np.ndarray
    alpha: np.ndarray
    noise: Optional[np.ndarray] = None
    temperature: float = 1.0
    task: Optional[int] = None
    epsilon: float = 1e-12


def routing_shape(variant: str, *, N: int = 1, R: int = 1, S: int = 1) -> tuple:
    if variant == "poly":
        return (S,)
    if variant == "tp1":
        return (R,)
    if variant == "tp2":
        return (N, R)
    if variant == "tpx":
        return (N - 1, R)
    raise ValueError(f"unknown routing variant {variant!r}")


def init_routing(variant: str, T: int, *, N: int = 1, R: int = 1, S: int = 1,
                 rng: np.random.Generator) -> RoutingLogits:
    """Near-uniform start: logits i.i.d. uniform in ``[-0.01, 0.01]``."""
    shape = (T,) + routing_shape(variant, N=N, R=R, S=S)
    return RoutingLogits(variant, rng.uniform(-0.01, 0.01, size=shape))


def sample_routing(logits: RoutingLogits, task: int, *, temperature: float = 1.0,
                   mode: str = "train", rng: Optional[np.random.Generator] = None,
                   hard: bool = False, epsilon: float = 1e-12) -> RoutingSample:
    row = logits.z[task]
    noise = None
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode routing needs an rng")
        noise = logistic_noise(rng, row.shape)
    z_hat = gumbel_sigmoid(row, temperature, mode=mode, noise=noise, hard=hard)
    alpha = normalize_weights(z_hat, axis=-1, epsilon=epsilon)
    return RoutingSample(z_hat=z_hat, alpha=alpha, noise=noise, temperature=temperature,
                         task=task, epsilon=epsilon)


def uniform_alpha(variant: str, *, N: int = 1, R: int = 1, S: int = 1) -> np.ndarray:
    """Routing-free averaging weights: every expert slot gets ``1 / (slots on its axis)``."""
    shape = routing_shape(variant, N=N, R=R, S=S)
    return np.full(shape, 1.0 / shape[-1])


# ---------------------------------------------------------------------------
# expert inventories


@dataclass
class PolyInventory:
    """``S`` LoRA experts stacked as ``A: (S, d_out, r)`` and ``B: (S, d_in, r)``."""

    A: np.ndarray
    B: np.ndarray
    s: float = 1.0

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.B = np.asarray(self.B, dtype=np.float64)
        if self.A.ndim != 3 or self.B.ndim != 3 or self.A.shape[0] != self.B.shape[0] \
                or self.A.shape[2] != self.B.shape[2]:
            raise ValueError(f"Poly experts A{self.A.shape} / B{self.B.shape} must share S and r")
        if not (np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.B))):
            raise ValueError("Poly experts must be finite")
        self.s = _check_scale(self.s)

    @property
    def S(self) -> int:
        return self.A.shape[0]

    @property
    def modules(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(self.A[i], self.B[i]) for i in range(self.S)]

    def params(self) -> dict[str, np.ndarray]:
        return {"A": self.A, "B": self.B}


@dataclass
class TensorPolyInventory:
    """Shared TLoRA factors whose rank axis doubles as the expert axis."""

    factors: TLoRAFactors
    variant: str = "tp1"

    def __post_init__(self):
        if self.variant not in ("tp1", "tp2"):
            raise ValueError(f"TensorPolyInventory variant must be tp1 or tp2, got {self.variant!r}")

    @property
    def dims(self) -> TensorDims:
        return self.factors.dims

    @property
    def s(self) -> float:
        return self.factors.s

    def params(self) -> dict[str, np.ndarray]:
        return self.factors.params()


@dataclass
class TensorTrainInventory:
    """Tensor-train cores parameterizing the full increment ``dW`` (truncated to ``d_out x d_in``)."""

    cores: TensorTrainCores
    d_out: int
    d_in: int
    s: float = 1.0

    def __post_init__(self):
        rows = int(np.prod(self.cores.row_modes))
        cols = int(np.prod(self.cores.col_modes))
        if rows < self.d_out or cols < self.d_in:
            raise ValueError(f"tensor train covers {rows}x{cols}, smaller than {self.d_out}x{self.d_in}")
        self.s = _check_scale(self.s)

    @property
    def N(self) -> int:
        return self.cores.N

    def params(self) -> dict[str, np.ndarray]:
        return {f"core{i}": c for i, c in enumerate(self.cores.cores)}


# ---------------------------------------------------------------------------
# merge rules


def _alpha(alpha, shape, what):
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != shape:
        raise ValueError(f"{what} expects alpha of shape {shape}, got {alpha.shape}")
    if not np.all(np.isfinite(alpha)):
        raise ValueError("alpha must be finite")
    return alpha


def poly_combine(inv: PolyInventory, alpha) -> tuple[np.ndarray, np.ndarray]:
    """Linear merge ``A_tau = sum_i alpha_i A_i`` (same for ``B``)."""
    alpha = _alpha(alpha, (inv.S,), "poly_combine")
    return np.tensordot(alpha, inv.A, axes=1), np.tensordot(alpha, inv.B, axes=1)


def tp1_combine(inv: TensorPolyInventory, alpha) -> tuple[np.ndarray, np.ndarray]:
    """Rank merge: weight each rank's simple tensors by ``alpha_k`` and sum."""
    if inv.variant != "tp1":
        raise ValueError("tp1_combine needs a tp1 inventory")
    d = inv.dims
    alpha = _alpha(alpha, (d.R,), "tp1_combine")
    A = materialize_factors(inv.factors.a_factors, d.d_out, alpha)
    B = materialize_factors(inv.factors.b_factors, d.d_in, alpha)
    return A, B


def _order_merge(factors: np.ndarray, d: int, alpha: np.ndarray) -> np.ndarray:
    mixed = np.einsum("ncqk,nk->ncq", factors, alpha)  # (N, r, q)
    return kron_batch(mixed)[:, :d].T.copy()


def tp2_combine(inv: TensorPolyInventory, alpha) -> tuple[np.ndarray, np.ndarray]:
    """Merge ranks separately for each order, then take the tensor product over orders."""
    if inv.variant != "tp2":
        raise ValueError("tp2_combine needs a tp2 inventory")
    d = inv.dims
    alpha = _alpha(alpha, (d.N, d.R), "tp2_combine")
    return (_order_merge(inv.factors.a_factors, d.d_out, alpha),
            _order_merge(inv.factors.b_factors, d.d_in, alpha))


def tpx_combine(inv: TensorTrainInventory, alpha) -> np.ndarray:
    """Bond-weighted tensor-train contraction cut down to ``d_out x d_in``."""
    full = tt_contract_weighted(inv.cores, alpha)
    return full[: inv.d_out, : inv.d_in].copy()
