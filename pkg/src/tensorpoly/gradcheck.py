"""Finite-difference verification of every adapter's analytic gradients."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .gradients import GradBundle, backward_layer, finite_diff, forward_layer, layer_params, relative_error
from .layers import build_layer
from .routing import TensorPolyInventory, tp1_combine, tp2_combine
from .tensor_core import TensorDims

log = logging.getLogger(__name__)

VARIANTS = ("lora", "tlora", "poly", "tp1", "tp2", "tpx")
TOLERANCE = 1e-5
STEP = 1e-5


@dataclass
class VariantReport:
    variant: str
    dims: TensorDims
    errors: dict
    worst_group: str
    worst_index: tuple
    worst_error: float
    passed: bool
    note: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        d = self.dims
        text = (f"{status} {self.variant:<6} d_in={d.d_in} d_out={d.d_out} r={d.r} N={d.N} R={d.R} "
                f"max_rel_err={self.worst_error:.3e} at {self.worst_group}{list(self.worst_index)}")
        return text + (f"  ({self.note})" if self.note else "")


def default_dims(variant: str, *, d_in: int = 7, d_out: int = 9, r: int = 2,
                 N: Optional[int] = None, R: int = 3) -> TensorDims:
    if N is None:
        N = 3 if variant in ("tp1", "tpx") else 2
    return TensorDims(d_in=d_in, d_out=d_out, r=r, N=N, R=R)


def check_variant(variant: str, dims: TensorDims, seed: int = 0, *, batch: int = 4, S: int = 3,
                  tol: float = TOLERANCE, step: float = STEP,
                  corrupt: Optional[Callable[[str, GradBundle], None]] = None) -> VariantReport:
    """Compare analytic and central-difference gradients for one variant.

    Parameters are drawn with entries of order one and routing logits from a
    standard normal; the Gumbel noise of the routing draw is frozen so the
    loss is a deterministic function of every parameter. ``corrupt`` may
    tamper with the analytic gradients (negative controls).
    """
    rng = np.random.default_rng(seed)
    w0 = rng.normal(0.0, 1.0 / np.sqrt(dims.d_in), size=(dims.d_out, dims.d_in))
    layer = build_layer(variant, dims, w0, rng, S=S, T=2, a_std=0.5, b_std=0.5)
    noise = None
    if layer.routing is not None:
        layer.routing.z[:] = rng.normal(size=layer.routing.z.shape)
        noise = rng.logistic(size=layer.routing.z.shape[1:])
    X = rng.normal(size=(batch, dims.d_in))
    Y = rng.normal(size=(batch, dims.d_out))
    task = 1 if layer.routing is not None else 0

    def loss(inputs):
        h, _ = forward_layer(layer, inputs.get("x", X), task=task, mode="train", noise=noise)
        return 0.5 * float(np.sum((h - Y) ** 2))

    h, cache = forward_layer(layer, X, task=task, mode="train", noise=noise)
    bundle, dX = backward_layer(layer, cache, h - Y)
    bundle.grads["x"] = dX
    if corrupt is not None:
        corrupt(variant, bundle)

    params = layer_params(layer)
    numeric = finite_diff(loss, params, step)
    numeric.update(finite_diff(loss, {"x": X.copy()}, step))
    errors = {}
    worst = ("", (), -1.0)
    for name in numeric:
        err, idx = relative_error(bundle[name], numeric[name])
        if not np.isfinite(err):
            err = float("inf")
        errors[name] = err
        if err > worst[2]:
            worst = (name, tuple(int(i) for i in idx), err)

    note = ""
    if variant == "tp2" and dims.N == 1:
        note = _tp1_equivalence_note(layer)
    passed = all(e <= tol for e in errors.values())
    return VariantReport(variant, dims, errors, worst[0], worst[1], worst[2], passed, note)


def _tp1_equivalence_note(layer) -> str:
    inv = layer.adapter
    alpha = np.random.default_rng(1).random((1, inv.dims.R))
    A2, B2 = tp2_combine(inv, alpha)
    A1, B1 = tp1_combine(TensorPolyInventory(inv.factors, "tp1"), alpha[0])
    gap = max(np.max(np.abs(A2 - A1)), np.max(np.abs(B2 - B1)))
    msg = f"N=1: TP-II merge equals TP-I merge (max gap {gap:.1e})"
    log.info(msg)
    return msg


def run_gradcheck(variants=VARIANTS, seed: int = 0, *, N: Optional[int] = None, R: int = 3,
                  r: int = 2, d_in: int = 7, d_out: int = 9,
                  corrupt: Optional[Callable[[str, GradBundle], None]] = None) -> list[VariantReport]:
    reports = []
    for v in variants:
        dims = default_dims(v, d_in=d_in, d_out=d_out, r=r, N=N, R=R)
        reports.append(check_variant(v, dims, seed, corrupt=corrupt))
    return reports
