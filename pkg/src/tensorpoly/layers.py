"""Constructors for adapter layers of every method with seeded random initialization."""
from __future__ import annotations

from typing import Optional

import numpy as np

from .adapters import AdapterLayer, LoRAAdapter, TLoRAFactors, canonical_method
from .routing import (
    PolyInventory,
    TensorPolyInventory,
    TensorTrainInventory,
    init_routing,
)
from .tensor_core import TensorDims, TensorTrainCores


def _factor_std(target: float, N: int, R: int) -> float:
    # a sum of R products of N i.i.d. factors has std sqrt(R) * std**N
    return (target**2 / R) ** (1.0 / (2 * N))


def random_tlora(dims: TensorDims, rng: np.random.Generator, *, a_std: float, b_std: float,
                 s: float = 1.0) -> TLoRAFactors:
    fa = rng.normal(0.0, _factor_std(a_std, dims.N, dims.R), size=(dims.N, dims.r, dims.q_out, dims.R))
    fb = rng.normal(0.0, _factor_std(b_std, dims.N, dims.R), size=(dims.N, dims.r, dims.q_in, dims.R))
    return TLoRAFactors(fa, fb, dims, s)


def random_tt(dims: TensorDims, rng: np.random.Generator, *, w_std: float) -> TensorTrainCores:
    N, R = dims.N, dims.R
    bonds = [1] + [R] * (N - 1) + [1]
    std = (w_std**2 / R ** (N - 1)) ** (1.0 / (2 * N))
    return TensorTrainCores(tuple(
        rng.normal(0.0, std, size=(bonds[i], dims.q_out, bonds[i + 1], dims.q_in)) for i in range(N)
    ))


def build_layer(method: str, dims: TensorDims, w0: np.ndarray, rng: np.random.Generator, *,
                S: int = 4, T: int = 1, s: float = 1.0, a_std: float = 1e-2,
                b_std: Optional[float] = None, layer_id: str = "layer0") -> AdapterLayer:
    """A layer with a freshly initialized adapter and, for routed methods, ``T`` routing rows.

    ``a_std``/``b_std`` are the target entry scales of the (effective) ``A`` and
    ``B`` matrices; ``b_std`` defaults to ``1/sqrt(d_in)``.
    """
    method = method if method == "none" else canonical_method(method)
    if w0.shape != (dims.d_out, dims.d_in):
        raise ValueError(f"W0 shape {w0.shape} does not match dims {dims}")
    b_std = 1.0 / np.sqrt(dims.d_in) if b_std is None else b_std
    routing = None
    if method == "none":
        adapter = None
    elif method == "lora":
        adapter = LoRAAdapter(rng.normal(0.0, a_std, (dims.d_out, dims.r)),
                              rng.normal(0.0, b_std, (dims.d_in, dims.r)), s)
    elif method == "tlora":
        adapter = random_tlora(dims, rng, a_std=a_std, b_std=b_std, s=s)
    elif method == "poly":
        adapter = PolyInventory(rng.normal(0.0, a_std, (S, dims.d_out, dims.r)),
                                rng.normal(0.0, b_std, (S, dims.d_in, dims.r)), s)
        routing = init_routing("poly", T, S=S, rng=rng)
    elif method in ("tp1", "tp2"):
        adapter = TensorPolyInventory(random_tlora(dims, rng, a_std=a_std, b_std=b_std, s=s), method)
        routing = init_routing(method, T, N=dims.N, R=dims.R, rng=rng)
    elif method == "tpx":
        w_std = a_std * b_std * np.sqrt(dims.r)
        adapter = TensorTrainInventory(random_tt(dims, rng, w_std=w_std), dims.d_out, dims.d_in, s)
        routing = init_routing("tpx", T, N=dims.N, R=dims.R, rng=rng)
    else:
        raise ValueError(f"cannot build a layer for method {method!r}")
    return AdapterLayer(w0, adapter, layer_id, routing)
