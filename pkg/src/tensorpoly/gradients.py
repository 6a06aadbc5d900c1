"""Hand-derived reverse-mode gradients for every adapter parameterization.

``forward_layer`` runs a layer and keeps the intermediates that
``backward_layer`` needs: the effective low-rank pair (or the merged
tensor-train increment), per-column Kronecker prefix products, and the
routing draw. The routing gradient is pathwise: the logistic noise of the
draw is held fixed and differentiated through the sigmoid and the
normalization.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .adapters import AdapterLayer, LoRAAdapter, TLoRAFactors
from .routing import (
    CLAMP_EPS,
    PolyInventory,
    RoutingSample,
    TensorPolyInventory,
    TensorTrainInventory,
    logistic_noise,
    normalize_weights,
    sigmoid,
)
from .tensor_core import _contract_cores, kron_batch_grad, kron_prefixes, pad_last, tt_core_grads


class ContractViolation(RuntimeError):
    """Raised when backward is called without a matching forward cache."""


# ---------------------------------------------------------------------------
# parameters


def layer_params(layer: AdapterLayer) -> dict[str, np.ndarray]:
    """Trainable arrays of a layer keyed by name (``logits`` for routing)."""
    out = {}
    if layer.adapter is not None:
        out.update(layer.adapter.params())
    if layer.routing is not None:
        out["logits"] = layer.routing.z
    return out


def routing_variant(adapter) -> Optional[str]:
    if isinstance(adapter, PolyInventory):
        return "poly"
    if isinstance(adapter, TensorPolyInventory):
        return adapter.variant
    if isinstance(adapter, TensorTrainInventory):
        return "tpx"
    return None


@dataclass
class GradBundle:
    """Gradients mirroring the layer's parameter arrays, plus the loss they came from."""

    grads: dict[str, np.ndarray]
    loss_value: Optional[float] = None

    def __post_init__(self):
        for name, g in self.grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in {name!r}")

    def __getitem__(self, name):
        return self.grads[name]

    def check_shapes(self, params: dict[str, np.ndarray]):
        for name, g in self.grads.items():
            if g.shape != params[name].shape:
                raise ValueError(f"gradient {name!r} has shape {g.shape}, parameter {params[name].shape}")


@dataclass
class ForwardCache:
    x: np.ndarray
    squeeze: bool
    kind: str
    A: Optional[np.ndarray] = None
    B: Optional[np.ndarray] = None
    dW: Optional[np.ndarray] = None
    extras: dict = field(default_factory=dict)
    sample: Optional[RoutingSample] = None
    fixed_alpha: bool = False
    z_hat_raw: Optional[np.ndarray] = None


# ---------------------------------------------------------------------------
# forward


def _route(layer, alpha, task, mode, rng, temperature, noise, hard):
    """Returns (alpha, sample, differentiable sigmoid output or None) for routed adapters."""
    if alpha is not None:
        return np.asarray(alpha, dtype=np.float64), None, None
    if layer.routing is None:
        raise ValueError(f"layer {layer.layer_id} has a routed adapter but no routing logits")
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    row = layer.routing.z[task]
    if mode == "train":
        if noise is None:
            if rng is None:
                raise ValueError("train-mode routing needs an rng or explicit noise")
            noise = logistic_noise(rng, row.shape)
        raw = sigmoid((row + noise) / temperature)
    elif mode == "eval":
        noise = None
        raw = sigmoid(row / temperature)
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" and hard:
        z_hat = np.clip((raw > 0.5).astype(np.float64), CLAMP_EPS, 1.0 - CLAMP_EPS)
        raw = None
    else:
        z_hat = np.clip(raw, CLAMP_EPS, 1.0 - CLAMP_EPS)
    a = normalize_weights(z_hat, axis=-1)
    sample = RoutingSample(z_hat=z_hat, alpha=a, noise=noise, temperature=temperature, task=task)
    return a, sample, raw


def forward_layer(layer: AdapterLayer, x, *, task: int = 0, mode: str = "eval",
                  rng: Optional[np.random.Generator] = None, temperature: float = 1.0,
                  alpha=None, noise=None, hard: bool = False):
    """Run one layer. Returns ``(h, cache)``.

    ``alpha`` fixes the mixing weights (routing bypassed, no logit gradient);
    ``noise`` replays a particular Gumbel-sigmoid draw in train mode.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    X = x[None, :] if squeeze else x
    if X.shape[1] != layer.d_in:
        raise ValueError(f"input has {X.shape[1]} features, layer {layer.layer_id} expects {layer.d_in}")
    ad = layer.adapter
    base = X @ layer.w0.T
    cache = ForwardCache(x=X, squeeze=squeeze, kind="none")

    if ad is None:
        h = base
    elif isinstance(ad, LoRAAdapter):
        cache.kind, cache.A, cache.B = "lora", ad.A, ad.B
    elif isinstance(ad, TLoRAFactors):
        cache.kind = "tlora"
        _materialize_factored(cache, ad, None)
    else:
        a, sample, raw = _route(layer, alpha, task, mode, rng, temperature, noise, hard)
        cache.sample, cache.fixed_alpha, cache.z_hat_raw = sample, alpha is not None, raw
        cache.extras["alpha"] = a
        if isinstance(ad, PolyInventory):
            cache.kind = "poly"
            if a.shape != (ad.S,):
                raise ValueError(f"poly alpha must have shape ({ad.S},), got {a.shape}")
            cache.A = np.tensordot(a, ad.A, axes=1)
            cache.B = np.tensordot(a, ad.B, axes=1)
        elif isinstance(ad, TensorPolyInventory) and ad.variant == "tp1":
            cache.kind = "tp1"
            if a.shape != (ad.dims.R,):
                raise ValueError(f"tp1 alpha must have shape ({ad.dims.R},), got {a.shape}")
            _materialize_factored(cache, ad.factors, a)
        elif isinstance(ad, TensorPolyInventory):
            cache.kind = "tp2"
            dims = ad.dims
            if a.shape != (dims.N, dims.R):
                raise ValueError(f"tp2 alpha must have shape {(dims.N, dims.R)}, got {a.shape}")
            for side, fac, d in (("a", ad.factors.a_factors, dims.d_out), ("b", ad.factors.b_factors, dims.d_in)):
                mixed = np.einsum("ncqk,nk->ncq", fac, a)
                pre = kron_prefixes(mixed)
                cache.extras[f"mixed_{side}"] = mixed
                cache.extras[f"pre_{side}"] = pre
                mat = pre[-1][:, :d].T
                if side == "a":
                    cache.A = mat
                else:
                    cache.B = mat
        elif isinstance(ad, TensorTrainInventory):
            cache.kind = "tpx"
            cores = list(ad.cores.cores)
            bond = ad.cores.ranks[1] if ad.N > 1 else (a.shape[-1] if a.ndim == 2 else 0)
            if a.shape != (ad.N - 1, bond):
                raise ValueError(f"tpx alpha shape {a.shape} does not match the bond structure")
            scaled = [c * a[i][None, None, :, None] if i < ad.N - 1 else c for i, c in enumerate(cores)]
            full = _contract_cores(scaled)
            cache.extras["scaled"] = scaled
            cache.extras["full_shape"] = full.shape
            cache.dW = full[: ad.d_out, : ad.d_in]
        else:
            raise TypeError(f"unsupported adapter {type(ad).__name__}")

    if ad is not None:
        s = ad.s
        if cache.kind == "tpx":
            if cache.dW.shape != layer.w0.shape:
                raise ValueError("tensor-train increment does not match the base weight")
            h = base + s * (X @ cache.dW.T)
        else:
            if cache.A.shape[0] != layer.d_out or cache.B.shape[0] != layer.d_in:
                raise ValueError(f"adapter shapes A{cache.A.shape} B{cache.B.shape} do not fit W0{layer.w0.shape}")
            cache.extras["xB"] = X @ cache.B
            h = base + s * (cache.extras["xB"] @ cache.A.T)
    return (h[0] if squeeze else h), cache


def _materialize_factored(cache, f: TLoRAFactors, weights):
    d = f.dims
    w = np.ones(d.R) if weights is None else weights
    for side, fac, dim in (("a", f.a_factors, d.d_out), ("b", f.b_factors, d.d_in)):
        pre = kron_prefixes(fac.transpose(0, 1, 3, 2))  # batch (r, R)
        per_rank = pre[-1]
        cols = np.einsum("ckp,k->cp", per_rank, w)
        cache.extras[f"pre_{side}"] = pre
        mat = cols[:, :dim].T
        if side == "a":
            cache.A = mat
        else:
            cache.B = mat


# ---------------------------------------------------------------------------
# backward


def _factored_grads(cache, fac, side, dmat, weights):
    """Chain a dense ``d x r`` gradient into ``(N, r, q, R)`` factors; also returns ``dalpha``."""
    pre = cache.extras[f"pre_{side}"]
    N, r, q, R = fac.shape
    dcols = pad_last(dmat.T, q**N)  # (r, q**N)
    dper_rank = dcols[:, None, :] * weights[None, :, None]
    g = kron_batch_grad(fac.transpose(0, 1, 3, 2), pre, dper_rank)
    dalpha = np.einsum("cp,ckp->k", dcols, pre[-1])
    return g.transpose(0, 1, 3, 2), dalpha


def backward_layer(layer: AdapterLayer, cache: Optional[ForwardCache], upstream) -> tuple[GradBundle, np.ndarray]:
    """Gradients of ``<upstream, h>`` for every trainable array, and with respect to ``x``.

    Routing logits receive a gradient only on the row of the task used in the
    forward pass, and only when the weights came from the routing draw.
    """
    if cache is None or not isinstance(cache, ForwardCache):
        raise ContractViolation("backward_layer called without a cached forward pass")
    G = np.asarray(upstream, dtype=np.float64)
    G = G[None, :] if cache.squeeze else G
    X = cache.x
    if G.shape != (X.shape[0], layer.d_out):
        raise ValueError(f"upstream shape {G.shape} does not match layer output ({X.shape[0]}, {layer.d_out})")
    ad = layer.adapter
    dX = G @ layer.w0
    grads: dict[str, np.ndarray] = {}
    dalpha = None

    if ad is not None:
        s = ad.s
        if cache.kind == "tpx":
            dX = dX + s * (G @ cache.dW)
            dfull = np.zeros(cache.extras["full_shape"])
            dfull[: layer.d_out, : layer.d_in] = s * (G.T @ X)
            scaled = cache.extras["scaled"]
            dscaled = tt_core_grads(scaled, dfull)
            alpha = cache.extras["alpha"]
            dalpha = np.zeros_like(alpha)
            for i, c in enumerate(ad.cores.cores):
                if i < ad.N - 1:
                    grads[f"core{i}"] = dscaled[i] * alpha[i][None, None, :, None]
                    dalpha[i] = np.einsum("lamb,lamb->m", dscaled[i], c)
                else:
                    grads[f"core{i}"] = dscaled[i]
        else:
            A, B, xB = cache.A, cache.B, cache.extras["xB"]
            GA = G @ A
            dA = s * (G.T @ xB)
            dB = s * (X.T @ GA)
            dX = dX + s * (GA @ B.T)
            if cache.kind == "lora":
                grads["A"], grads["B"] = dA, dB
            elif cache.kind == "tlora":
                ones = np.ones(ad.dims.R)
                grads["a_factors"], _ = _factored_grads(cache, ad.a_factors, "a", dA, ones)
                grads["b_factors"], _ = _factored_grads(cache, ad.b_factors, "b", dB, ones)
            elif cache.kind == "poly":
                alpha = cache.extras["alpha"]
                grads["A"] = alpha[:, None, None] * dA[None]
                grads["B"] = alpha[:, None, None] * dB[None]
                dalpha = np.einsum("sij,ij->s", ad.A, dA) + np.einsum("sij,ij->s", ad.B, dB)
            elif cache.kind == "tp1":
                alpha = cache.extras["alpha"]
                f = ad.factors
                grads["a_factors"], da = _factored_grads(cache, f.a_factors, "a", dA, alpha)
                grads["b_factors"], db = _factored_grads(cache, f.b_factors, "b", dB, alpha)
                dalpha = da + db
            elif cache.kind == "tp2":
                alpha = cache.extras["alpha"]
                f = ad.factors
                dalpha = np.zeros_like(alpha)
                for side, fac, dmat in (("a", f.a_factors, dA), ("b", f.b_factors, dB)):
                    mixed = cache.extras[f"mixed_{side}"]
                    q = fac.shape[2]
                    dcols = pad_last(dmat.T, q ** fac.shape[0])
                    dmixed = kron_batch_grad(mixed, cache.extras[f"pre_{side}"], dcols)  # (N, r, q)
                    grads[f"{side}_factors"] = dmixed[..., None] * alpha[:, None, None, :]
                    dalpha += np.einsum("ncq,ncqk->nk", dmixed, fac)
            else:
                raise ContractViolation(f"cache kind {cache.kind!r} does not match adapter")

    if layer.routing is not None:
        dlogits = np.zeros_like(layer.routing.z)
        if dalpha is not None and cache.sample is not None and not cache.fixed_alpha \
                and cache.z_hat_raw is not None:
            smp = cache.sample
            z_hat = smp.z_hat
            denom = z_hat.sum(axis=-1, keepdims=True) + smp.epsilon
            dz_hat = dalpha / denom - (dalpha * z_hat).sum(axis=-1, keepdims=True) / denom**2
            raw = cache.z_hat_raw
            inside = (raw > CLAMP_EPS) & (raw < 1.0 - CLAMP_EPS)
            dlogits[smp.task] = dz_hat * raw * (1.0 - raw) / smp.temperature * inside
        grads["logits"] = dlogits

    dX = dX[0] if cache.squeeze else dX
    return GradBundle(grads), dX


# ---------------------------------------------------------------------------
# finite differences


def finite_diff(loss_fn: Callable[[dict], float], params: dict[str, np.ndarray],
                step: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences of ``loss_fn(params)``, perturbing each array in place."""
    out = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up = loss_fn(params)
            flat[j] = orig - step
            down = loss_fn(params)
            flat[j] = orig
            gflat[j] = (up - down) / (2.0 * step)
        out[name] = g
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> tuple[float, tuple]:
    """Worst coordinate error scaled by the larger gradient's max magnitude.

    Returns the error and the index where it occurs. An all-zero pair gives 0.
    """
    diff = np.abs(analytic - numeric)
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    if diff.size == 0:
        return 0.0, ()
    idx = np.unravel_index(int(np.argmax(diff)), diff.shape)
    if scale == 0.0:
        return 0.0, idx
    return float(diff[idx] / scale), idx


# ---------------------------------------------------------------------------
# optimizers


def _check_grads(grads):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name!r}")


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    _check_grads(grads)
    for name, p in params.items():
        p -= lr * grads[name]


class Adam:
    """Adam with bias-corrected moments; per-parameter learning rates via ``lr_for``."""

    def __init__(self, lr: float = 1e-2, betas=(0.9, 0.999), eps: float = 1e-8,
                 lr_for: Optional[Callable[[str], float]] = None):
        if not lr > 0:
            raise ValueError("learning rate must be positive")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.lr_for = lr_for
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        _check_grads(grads)
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient {name!r} shape {g.shape} != parameter {p.shape}")
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            lr = self.lr_for(name) if self.lr_for else self.lr
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params, grads, state: Optional[Adam] = None, **hyper) -> Adam:
    """Functional wrapper: one Adam update, returning the (possibly new) optimizer state."""
    opt = state if state is not None else Adam(**hyper)
    opt.step(params, grads)
    return opt
