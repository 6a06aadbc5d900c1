"""LoRA and tensor-product LoRA (TLoRA) adapters plus closed-form cost accounting."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from .tensor_core import TensorDims, kron_batch, min_base

log = logging.getLogger(__name__)


def _check_scale(s: float) -> float:
    s = float(s)
    if not np.isfinite(s) or s <= 0:
        raise ValueError(f"adapter scale must be positive, got {s}")
    if s < 1:
        log.warning("adapter scale s=%g is below 1", s)
    return s


def _finite(a, what: str) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains non-finite entries")
    return arr


@dataclass
class LoRAAdapter:
    """Low-rank update ``s * A @ B.T`` with ``A: d_out x r`` and ``B: d_in x r``."""

    A: np.ndarray
    B: np.ndarray
    s: float = 1.0

    def __post_init__(self):
        self.A = _finite(self.A, "LoRA A")
        self.B = _finite(self.B, "LoRA B")
        if self.A.ndim != 2 or self.B.ndim != 2 or self.A.shape[1] != self.B.shape[1]:
            raise ValueError(f"LoRA A {self.A.shape} and B {self.B.shape} must share rank r")
        self.s = _check_scale(self.s)

    @property
    def r(self) -> int:
        return self.A.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {"A": self.A, "B": self.B}


@dataclass
class TLoRAFactors:
    """Fourth-order factor arrays ``(N, r, q, R)`` reparameterizing LoRA's ``A`` and ``B``."""

    a_factors: np.ndarray
    b_factors: np.ndarray
    dims: TensorDims
    s: float = 1.0

    def __post_init__(self):
        d = self.dims
        self.a_factors = _finite(self.a_factors, "TLoRA A factors")
        self.b_factors = _finite(self.b_factors, "TLoRA B factors")
        want_a = (d.N, d.r, d.q_out, d.R)
        want_b = (d.N, d.r, d.q_in, d.R)
        if self.a_factors.shape != want_a or self.b_factors.shape != want_b:
            raise ValueError(
                f"factor shapes {self.a_factors.shape}/{self.b_factors.shape} do not match {want_a}/{want_b}"
            )
        self.s = _check_scale(self.s)

    def params(self) -> dict[str, np.ndarray]:
        return {"a_factors": self.a_factors, "b_factors": self.b_factors}


@dataclass
class AdapterLayer:
    """A frozen base weight with at most one adapter and optional routing logits."""

    w0: np.ndarray
    adapter: Any = None
    layer_id: str = "layer0"
    routing: Optional[Any] = None
    _w0_digest: bytes = field(init=False, repr=False)

    def __post_init__(self):
        self.w0 = _finite(self.w0, "base weight").copy()
        self.w0.flags.writeable = False
        self._w0_digest = self.w0.tobytes()

    @property
    def d_out(self) -> int:
        return self.w0.shape[0]

    @property
    def d_in(self) -> int:
        return self.w0.shape[1]

    def base_unchanged(self) -> bool:
        return self.w0.tobytes() == self._w0_digest


def _check_input(layer: AdapterLayer, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.d_in:
        raise ValueError(f"input has {x.shape[-1]} features, layer expects {layer.d_in}")
    return x


def lowrank_apply(w0: np.ndarray, A: np.ndarray, B: np.ndarray, s: float, x: np.ndarray) -> np.ndarray:
    """``W0 x + s A (B^T x)`` for a single vector or a row-batch of inputs."""
    if A.shape[0] != w0.shape[0] or B.shape[0] != w0.shape[1] or A.shape[1] != B.shape[1]:
        raise ValueError(f"adapter shapes A{A.shape} B{B.shape} incompatible with W0{w0.shape}")
    return x @ w0.T + s * ((x @ B) @ A.T)


def lora_forward(layer: AdapterLayer, x) -> np.ndarray:
    ad = layer.adapter
    if not isinstance(ad, LoRAAdapter):
        raise TypeError("lora_forward needs a layer carrying a LoRAAdapter")
    return lowrank_apply(layer.w0, ad.A, ad.B, ad.s, _check_input(layer, x))


def materialize_factors(factors: np.ndarray, d: int, weights=None) -> np.ndarray:
    """``d x r`` matrix whose column ``c`` is the weighted entangled vector of column ``c``."""
    N, r, q, R = factors.shape
    per_rank = kron_batch(factors.transpose(0, 1, 3, 2))  # (r, R, q**N)
    w = np.ones(R) if weights is None else np.asarray(weights, dtype=np.float64)
    cols = np.einsum("ckp,k->cp", per_rank, w)
    return cols[:, :d].T.copy()


def tlora_materialize(f: TLoRAFactors, side: str) -> np.ndarray:
    """Dense ``A`` (side ``"A"``, ``d_out x r``) or ``B`` (side ``"B"``, ``d_in x r``)."""
    if side == "A":
        return materialize_factors(f.a_factors, f.dims.d_out)
    if side == "B":
        return materialize_factors(f.b_factors, f.dims.d_in)
    raise ValueError(f"side must be 'A' or 'B', got {side!r}")


def tlora_forward(layer: AdapterLayer, x) -> np.ndarray:
    f = layer.adapter
    if not isinstance(f, TLoRAFactors):
        raise TypeError("tlora_forward needs a layer carrying TLoRAFactors")
    if (f.dims.d_out, f.dims.d_in) != layer.w0.shape:
        raise ValueError(f"TLoRA dims {f.dims} do not match base weight {layer.w0.shape}")
    A = tlora_materialize(f, "A")
    B = tlora_materialize(f, "B")
    return lowrank_apply(layer.w0, A, B, f.s, _check_input(layer, x))


# ---------------------------------------------------------------------------
# accounting

METHODS = ("fullft", "lora", "tlora", "poly", "tp1", "tp2", "tpx")
_ALIASES = {
    "full": "fullft", "fullft": "fullft", "lora": "lora", "tlora": "tlora", "poly": "poly",
    "tp1": "tp1", "tp-i": "tp1", "tensorpoly-i": "tp1",
    "tp2": "tp2", "tp-ii": "tp2", "tensorpoly-ii": "tp2",
    "tpx": "tpx", "tp-x": "tpx", "tensorpoly-x": "tpx",
}
ROUTED = ("poly", "tp1", "tp2", "tpx")


def canonical_method(method: str) -> str:
    try:
        return _ALIASES[method.lower()]
    except KeyError:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}") from None


def _need(name, value):
    if value is None:
        raise ValueError(f"argument {name} is required for this method")
    return int(value)


def tt_core_count(dims: TensorDims) -> int:
    N, R = dims.N, dims.R
    bonds = [1] + [R] * (N - 1) + [1]
    return sum(bonds[i] * dims.q_out * bonds[i + 1] * dims.q_in for i in range(N))


def module_count(method: str, dims: TensorDims, S: Optional[int] = None) -> int:
    """Trainable adapter scalars per layer, excluding routing logits."""
    method = canonical_method(method)
    if method == "fullft":
        return dims.d_in * dims.d_out
    if method == "lora":
        return (dims.d_in + dims.d_out) * dims.r
    if method == "poly":
        return (dims.d_in + dims.d_out) * dims.r * _need("S", S)
    if method in ("tlora", "tp1", "tp2"):
        return dims.N * dims.r * (dims.q_in + dims.q_out) * dims.R
    return tt_core_count(dims)


def routing_row_size(method: str, dims: TensorDims, S: Optional[int] = None) -> int:
    """Logits in one task's routing row for one layer (0 for unrouted methods)."""
    method = canonical_method(method)
    if method == "poly":
        return _need("S", S)
    if method == "tp1":
        return dims.R
    if method == "tp2":
        return dims.R * dims.N
    if method == "tpx":
        return dims.R * (dims.N - 1)
    return 0


def adapter_param_count(method: str, dims: TensorDims, phase: str, T: Optional[int] = None,
                        S: Optional[int] = None) -> int:
    """Per-layer parameter count for possibly rectangular layers."""
    if phase not in ("pretrain", "finetune"):
        raise ValueError(f"phase must be 'pretrain' or 'finetune', got {phase!r}")
    method = canonical_method(method)
    base = module_count(method, dims, S)
    row = routing_row_size(method, dims, S)
    if row == 0:
        return base
    rows = _need("T", T) if phase == "pretrain" else 1
    return base + rows * row


def param_count(method: str, phase: str = "finetune", d=None, r=None, N=None, R=None,
                T=None, S=None) -> int:
    """Closed-form per-layer parameter count for a square ``d x d`` layer.

    ``method`` is one of ``fullft, lora, tlora, poly, tp1, tp2`` (plus ``tpx``
    for the tensor-train variant, which has no published row).
    """
    method = canonical_method(method)
    d = _need("d", d)
    if method == "fullft":
        return d * d
    if method in ("lora", "poly"):
        dims = TensorDims.square(d, _need("r", r), 1, 1)
    elif method == "tpx":
        dims = TensorDims.square(d, 1, _need("N", N), _need("R", R))
    else:
        dims = TensorDims.square(d, _need("r", r), _need("N", N), _need("R", R))
    return adapter_param_count(method, dims, phase, T=T, S=S)


def tensorized_vector_count(d: int, N: int, R: int) -> int:
    """Storage of one ``d``-vector as an entangled tensor: ``R * N * q``."""
    return int(R) * int(N) * min_base(d, N)


def dense_equivalent(method: str, d: int, r: Optional[int] = None) -> int:
    """Dense parameter count the factored method stands in for."""
    method = canonical_method(method)
    if method == "tpx":
        return d * d
    return 2 * d * _need("r", r)


def flop_extra(d: int, r: int, R: int) -> int:
    """Extra multiplies TLoRA spends materializing its factors, ``d * r * R``."""
    return int(d) * int(r) * int(R)
