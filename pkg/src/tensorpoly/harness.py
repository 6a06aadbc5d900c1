"""Synthetic multi-task pretraining and few-shot adaptation.

The generator plants ``G`` low-rank linear increments per layer. Each task's
target map is the frozen base plus a sparse convex mixture of those
increments, so ground truth is known exactly. Held-out (test) tasks reuse the
same planted increments with mixtures never seen during pretraining.

Adaptation follows three regimes: ``full`` (modules and a fresh routing row),
``z-only`` (routing row only) and ``mu-only`` (modules only, routing replaced
by uniform averaging).
"""
from __future__ import annotations

import copy
import itertools
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .adapters import ROUTED, adapter_param_count, canonical_method, module_count, routing_row_size
from .gradients import Adam, backward_layer, forward_layer, layer_params
from .layers import build_layer
from .routing import init_routing, routing_shape, uniform_alpha
from .tensor_core import TensorDims, kron_batch, min_base

log = logging.getLogger(__name__)

MODES = ("full", "z-only", "mu-only")
_MODE_ALIASES = {"full": "full", "z-only": "z-only", "z": "z-only", "-z": "z-only",
                 "mu-only": "mu-only", "mu": "mu-only", "-mu": "mu-only"}


class DivergenceError(FloatingPointError):
    pass


class BudgetError(AssertionError):
    """Trainable-parameter count disagrees with the closed form."""


def canonical_mode(mode: str) -> str:
    try:
        return _MODE_ALIASES[mode]
    except KeyError:
        raise ValueError(f"unknown adaptation mode {mode!r}; expected one of {MODES}") from None


# ---------------------------------------------------------------------------
# data


@dataclass
class TaskSpec:
    task_id: int
    mixing: np.ndarray
    x: np.ndarray
    y: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray
    split: str

    @property
    def samples(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return list(zip(self.x, self.y))


@dataclass
class PlantedSuite:
    w0: list[np.ndarray]
    experts: np.ndarray  # (layers, G, d_out, d_in)
    train_tasks: list[TaskSpec]
    test_tasks: list[TaskSpec]
    noise_std: float

    @property
    def tasks(self) -> list[TaskSpec]:
        return self.train_tasks + self.test_tasks

    def task_maps(self, mixing) -> list[np.ndarray]:
        """Per-layer true weight ``W0 + sum_g mixing_g dW_g``."""
        return [w + np.tensordot(mixing, e, axes=1) for w, e in zip(self.w0, self.experts)]

    def apply(self, mixing, x) -> np.ndarray:
        for m in self.task_maps(mixing):
            x = x @ m.T
        return x


def _base_weight(rng, d_out, d_in):
    if d_out == d_in:
        q, r = np.linalg.qr(rng.normal(size=(d_in, d_in)))
        return q * np.sign(np.diag(r))
    return rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_out, d_in))


def _supports(rng, G, k, count):
    """``count`` supports of size ``k`` cycling through all subsets in shuffled order."""
    subsets = list(itertools.combinations(range(G), k))
    out = []
    while len(out) < count:
        out.extend(subsets[i] for i in rng.permutation(len(subsets)))
    return out[:count]


def _mixing(rng, G, support):
    k = len(support)
    support = np.asarray(support)
    w = rng.dirichlet(np.ones(k)) if k > 1 else np.ones(1)  # a one-point draw is not exactly 1
    mix = np.zeros(G)
    mix[support] = w
    return mix


def _planted_factor(rng, d, N, rank, structure, tensor_rank):
    if structure == "dense":
        return rng.normal(size=(d, rank)) / np.sqrt(d)
    if structure != "tensor":
        raise ValueError(f"unknown planted structure {structure!r}")
    q = min_base(d, N)
    cols = []
    for _ in range(rank):
        vec = np.zeros(q**N)
        for _ in range(tensor_rank):
            vec += kron_batch(rng.normal(size=(N, q)))
        vec = vec[:d]
        cols.append(vec / np.linalg.norm(vec))
    return np.stack(cols, axis=1)


def gen_multitask(G: int, T_train: int, T_test: int, dims: TensorDims, noise_std: float,
                  samples_per_task: int, seed: int, *, layers: int = 1, eval_samples: int = 200,
                  planted_rank: int = 1, nonzeros: int = 2, expert_scale: float = 1.0,
                  planted_structure: str = "dense", planted_tensor_rank: int = 1) -> PlantedSuite:
    """Planted latent-expert regression tasks; a pure function of its arguments.

    ``planted_structure="dense"`` draws Gaussian factor vectors for each planted
    increment; ``"tensor"`` draws them as entangled tensors of order ``dims.N``
    and rank ``planted_tensor_rank`` (truncated to length ``d``).
    """
    if G < 1 or T_train < 1 or T_test < 0 or samples_per_task < 1 or layers < 1:
        raise ValueError("gen_multitask needs positive counts")
    if layers > 1 and dims.d_in != dims.d_out:
        raise ValueError("stacked layers need d_in == d_out")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    w0 = [_base_weight(rng, dims.d_out, dims.d_in) for _ in range(layers)]
    experts = np.empty((layers, G, dims.d_out, dims.d_in))
    for l in range(layers):
        for g in range(G):
            U = _planted_factor(rng, dims.d_out, dims.N, planted_rank, planted_structure, planted_tensor_rank)
            V = _planted_factor(rng, dims.d_in, dims.N, planted_rank, planted_structure, planted_tensor_rank)
            experts[l, g] = expert_scale * U @ V.T
    suite = PlantedSuite(w0, experts, [], [], noise_std)

    k = min(nonzeros, G)
    supports = _supports(rng, G, k, T_train)
    if k == 1:  # one-hot mixings: unseen test tasks need experts no training task uses
        free = sorted(set(itertools.combinations(range(G), 1)) - set(supports))
        if len(free) < T_test:
            raise ValueError(f"one-hot mixing leaves {len(free)} unseen experts for {T_test} test tasks")
        supports += [free[i] for i in rng.permutation(len(free))[:T_test]]
    else:
        supports += _supports(rng, G, k, T_test)
    seen = []
    for tid in range(T_train + T_test):
        split = "train" if tid < T_train else "test"
        mix = _mixing(rng, G, supports[tid])
        while split == "test" and any(np.array_equal(mix, m) for m in seen):
            mix = _mixing(rng, G, supports[tid])
        if split == "train":
            seen.append(mix)
        x = rng.normal(size=(samples_per_task, dims.d_in))
        xe = rng.normal(size=(eval_samples, dims.d_in))
        y = suite.apply(mix, x) + noise_std * rng.normal(size=(samples_per_task, dims.d_out))
        ye = suite.apply(mix, xe) + noise_std * rng.normal(size=(eval_samples, dims.d_out))
        task = TaskSpec(tid, mix, x, y, xe, ye, split)
        (suite.train_tasks if split == "train" else suite.test_tasks).append(task)
    return suite


def make_task(suite: PlantedSuite, mixing, task_id: int, samples: int, eval_samples: int, seed: int,
              split: str = "test") -> TaskSpec:
    """A fresh task over the suite's planted experts with a chosen mixing vector."""
    mixing = np.asarray(mixing, dtype=np.float64)
    if mixing.shape != (suite.experts.shape[1],) or np.any(mixing < 0) or abs(mixing.sum() - 1.0) > 1e-9:
        raise ValueError("mixing must be a nonnegative vector over the planted experts summing to 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 6, task_id]))
    d_in = suite.w0[0].shape[1]
    d_out = suite.w0[-1].shape[0]
    x = rng.normal(size=(samples, d_in))
    xe = rng.normal(size=(eval_samples, d_in))
    y = suite.apply(mixing, x) + suite.noise_std * rng.normal(size=(samples, d_out))
    ye = suite.apply(mixing, xe) + suite.noise_std * rng.normal(size=(eval_samples, d_out))
    return TaskSpec(task_id, mixing, x, y, xe, ye, split)


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    method: str = "tp1"
    d_in: int = 32
    d_out: int = 32
    r: int = 2
    N: int = 2
    R: int = 4
    S: int = 4
    layers: int = 2
    G: int = 4
    T_train: int = 8
    T_test: int = 4
    samples_per_task: int = 100
    eval_samples: int = 200
    shots: int = 50
    noise_std: float = 0.5
    planted_rank: int = 1
    nonzeros: int = 2
    expert_scale: float = 4.0
    planted_structure: str = "tensor"
    planted_tensor_rank: int = 1
    pretrain_epochs: int = 200
    adapt_epochs: int = 50
    batch_size: int = 0
    lr_modules: float = 1e-2
    lr_routing: float = 1e-1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    temperature: float = 1.0
    hard_eval: bool = False
    scale: float = 1.0
    init_a_std: float = 1e-2
    seed: int = 0
    adapt_mode: str = "full"
    record_timing: bool = False

    def __post_init__(self):
        self.method = canonical_method(self.method)
        if self.method == "fullft":
            raise ValueError("full fine-tuning is accounted for but not trainable in the harness")
        self.adapt_mode = canonical_mode(self.adapt_mode)
        for name in ("d_in", "d_out", "r", "N", "R", "S", "layers", "G", "T_train",
                     "samples_per_task", "eval_samples", "shots"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"config field {name} must be positive")
        for name in ("pretrain_epochs", "adapt_epochs", "T_test"):
            if int(getattr(self, name)) < 0:
                raise ValueError(f"config field {name} must be non-negative")
        if self.shots > self.samples_per_task:
            raise ValueError("shots cannot exceed samples_per_task")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")

    @property
    def dims(self) -> TensorDims:
        return TensorDims(d_in=self.d_in, d_out=self.d_out, r=self.r, N=self.N, R=self.R)

    @classmethod
    def from_mapping(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        if "d" in data:
            d = data.pop("d")
            data.setdefault("d_in", d)
            data.setdefault("d_out", d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def make_suite(cfg: ExperimentConfig) -> PlantedSuite:
    return gen_multitask(cfg.G, cfg.T_train, cfg.T_test, cfg.dims, cfg.noise_std, cfg.samples_per_task,
                         cfg.seed, layers=cfg.layers, eval_samples=cfg.eval_samples,
                         planted_rank=cfg.planted_rank, nonzeros=cfg.nonzeros,
                         expert_scale=cfg.expert_scale, planted_structure=cfg.planted_structure,
                         planted_tensor_rank=cfg.planted_tensor_rank)


# ---------------------------------------------------------------------------
# model


@dataclass
class MetricsRecord:
    phase: str
    step: int
    task_id: int
    loss: float
    method: str
    mode: str
    seed: int
    wall_clock_ms: Optional[float] = None

    def __post_init__(self):
        if not np.isfinite(self.loss):
            raise DivergenceError(f"non-finite loss in {self.phase} step {self.step} task {self.task_id}")

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class Model:
    """A stack of adapter layers sharing one method, plus task -> routing-row lookup."""

    layers: list
    method: str
    task_rows: dict = field(default_factory=dict)
    fixed_alpha: Optional[list] = None

    @property
    def routed(self) -> bool:
        return self.method in ROUTED

    def row(self, task_id: int) -> int:
        if not self.routed or self.fixed_alpha is not None:
            return 0
        try:
            return self.task_rows[task_id]
        except KeyError:
            raise KeyError(f"no routing row for task {task_id}") from None

    def forward(self, X, task_id: int, *, mode: str = "eval", rng=None, temperature: float = 1.0,
                hard: bool = False):
        caches = []
        h = X
        row = self.row(task_id)
        for i, layer in enumerate(self.layers):
            alpha = self.fixed_alpha[i] if self.fixed_alpha is not None else None
            h, c = forward_layer(layer, h, task=row, mode=mode, rng=rng, temperature=temperature,
                                 alpha=alpha, hard=hard)
            caches.append(c)
        return h, caches

    def backward(self, caches, upstream) -> dict[str, np.ndarray]:
        grads = {}
        g = upstream
        for i in range(len(self.layers) - 1, -1, -1):
            bundle, g = backward_layer(self.layers[i], caches[i], g)
            for name, arr in bundle.grads.items():
                grads[f"layer{i}/{name}"] = arr
        return grads

    def params(self, groups=("modules", "routing")) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, arr in layer_params(layer).items():
                group = "routing" if name == "logits" else "modules"
                if group in groups:
                    out[f"layer{i}/{name}"] = arr
        return out

    def base_digests(self) -> list[bytes]:
        return [layer.w0.tobytes() for layer in self.layers]


def mse(pred, y) -> float:
    """Mean over samples of the squared error summed over outputs."""
    return float(np.sum((pred - y) ** 2) / y.shape[0])


def build_model(cfg: ExperimentConfig, suite: PlantedSuite) -> Model:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    layers = [
        build_layer(cfg.method, cfg.dims, suite.w0[i], rng, S=cfg.S, T=cfg.T_train, s=cfg.scale,
                    a_std=cfg.init_a_std, layer_id=f"layer{i}")
        for i in range(cfg.layers)
    ]
    rows = {t.task_id: j for j, t in enumerate(suite.train_tasks)}
    return Model(layers, cfg.method, rows)


def expected_trainable(cfg: ExperimentConfig, phase: str, mode: str = "full") -> int:
    """Closed-form trainable scalar count across all layers."""
    dims = cfg.dims
    if phase == "pretrain":
        per_layer = adapter_param_count(cfg.method, dims, "pretrain", T=cfg.T_train, S=cfg.S)
    elif mode == "full":
        per_layer = adapter_param_count(cfg.method, dims, "finetune", S=cfg.S)
    elif mode == "z-only":
        per_layer = routing_row_size(cfg.method, dims, cfg.S)
    else:
        per_layer = module_count(cfg.method, dims, cfg.S)
    return per_layer * cfg.layers


def count_scalars(params: dict[str, np.ndarray]) -> int:
    return int(sum(p.size for p in params.values()))


def _assert_budget(params, expected, what):
    got = count_scalars(params)
    if got != expected:
        raise BudgetError(f"{what}: {got} trainable scalars, closed form says {expected}")
    return got


def _optimizer(cfg: ExperimentConfig) -> Adam:
    def lr_for(name):
        return cfg.lr_routing if name.endswith("/logits") else cfg.lr_modules

    return Adam(cfg.lr_modules, (cfg.beta1, cfg.beta2), cfg.adam_eps, lr_for=lr_for)


def _batches(n, batch_size, rng):
    if batch_size <= 0 or batch_size >= n:
        return [slice(None)]
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _train_step(model, opt, params, X, Y, task_id, rng, cfg):
    with np.errstate(over="ignore", invalid="ignore"):  # divergence is reported below
        pred, caches = model.forward(X, task_id, mode="train", rng=rng, temperature=cfg.temperature)
        loss = mse(pred, Y)
    if not np.isfinite(loss):
        raise DivergenceError(f"loss became {loss} on task {task_id}; lower the learning rates")
    grads = model.backward(caches, 2.0 * (pred - Y) / Y.shape[0])
    opt.step(params, {k: grads[k] for k in params})
    return loss


@dataclass
class Checkpoint:
    model: Model
    config: ExperimentConfig
    trainable: int

    def to_bytes(self) -> bytes:
        from .checkpoint import encode_model

        meta = {"config": self.config.as_dict(), "task_rows": {str(k): v for k, v in self.model.task_rows.items()},
                "trainable": self.trainable}
        return encode_model(self.model.layers, self.model.method, self.config.dims, meta)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        from .checkpoint import decode_model

        layers, header = decode_model(blob)
        meta = header["meta"]
        cfg = ExperimentConfig.from_mapping(meta["config"])
        rows = {int(k): v for k, v in meta["task_rows"].items()}
        return cls(Model(layers, cfg.method, rows), cfg, meta["trainable"])


Emit = Callable[[MetricsRecord], None]


def _record(emit, cfg, phase, step, task_id, loss, mode, started):
    if emit is None:
        return
    ms = round((time.perf_counter() - started) * 1000.0, 3) if cfg.record_timing else None
    emit(MetricsRecord(phase, step, task_id, loss, cfg.method, mode, cfg.seed, ms))


def pretrain(cfg: ExperimentConfig, suite: Optional[PlantedSuite] = None, emit: Optional[Emit] = None,
             mode_tag: str = "pretrain") -> Checkpoint:
    """Multi-task training of modules and routing over every train task."""
    suite = make_suite(cfg) if suite is None else suite
    model = build_model(cfg, suite)
    params = model.params()
    trainable = _assert_budget(params, expected_trainable(cfg, "pretrain"), f"{cfg.method} pretrain")
    opt = _optimizer(cfg)
    noise_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    order_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))
    started = time.perf_counter()
    for epoch in range(cfg.pretrain_epochs):
        for j in order_rng.permutation(len(suite.train_tasks)):
            task = suite.train_tasks[j]
            losses = [_train_step(model, opt, params, task.x[b], task.y[b], task.task_id, noise_rng, cfg)
                      for b in _batches(task.x.shape[0], cfg.batch_size, order_rng)]
            loss = float(np.mean(losses))
            _record(emit, cfg, "pretrain", epoch, task.task_id, loss, mode_tag, started)
    return Checkpoint(model, cfg, trainable)


def evaluate(model: Model, task: TaskSpec, *, task_id: Optional[int] = None, temperature: float = 1.0,
             hard: bool = False) -> float:
    """Held-out MSE with deterministic (eval-mode) routing."""
    tid = task.task_id if task_id is None else task_id
    pred, _ = model.forward(task.x_eval, tid, mode="eval", temperature=temperature, hard=hard)
    return mse(pred, task.y_eval)


@dataclass
class AdaptResult:
    model: Model
    trainable: int
    train_loss: float
    test_loss: float


def prepare_adaptation(ckpt: Checkpoint, task: TaskSpec, mode: str) -> tuple[Model, dict]:
    """Copy the pretrained model and set up routing and trainable arrays for one test task."""
    cfg = ckpt.config
    mode = canonical_mode(mode)
    model = copy.deepcopy(ckpt.model)
    if not model.routed:
        if mode != "full":
            raise ValueError(f"{cfg.method} has no routing; only full adaptation applies")
        return model, model.params(("modules",))
    dims = cfg.dims
    variant = cfg.method
    if mode == "mu-only":
        for layer in model.layers:
            layer.routing = None
        alpha = uniform_alpha(variant, N=dims.N, R=dims.R, S=cfg.S)
        model.fixed_alpha = [alpha.copy() for _ in model.layers]
        model.task_rows = {}
        return model, model.params(("modules",))
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 4, task.task_id]))
    for layer in model.layers:
        layer.routing = init_routing(variant, 1, N=dims.N, R=dims.R, S=cfg.S, rng=rng)
    model.task_rows = {task.task_id: 0}
    groups = ("modules", "routing") if mode == "full" else ("routing",)
    return model, model.params(groups)


def adapt(ckpt: Checkpoint, task: TaskSpec, mode: str = "full", shots: Optional[int] = None,
          epochs: Optional[int] = None, emit: Optional[Emit] = None) -> AdaptResult:
    """Few-shot adaptation on one unseen task, then held-out evaluation."""
    cfg = ckpt.config
    mode = canonical_mode(mode)
    shots = cfg.shots if shots is None else shots
    epochs = cfg.adapt_epochs if epochs is None else epochs
    if shots > task.x.shape[0]:
        raise ValueError(f"asked for {shots} shots but task {task.task_id} has {task.x.shape[0]} samples")
    model, params = prepare_adaptation(ckpt, task, mode)
    trainable = _assert_budget(params, expected_trainable(cfg, "finetune", mode),
                               f"{cfg.method} {mode} adaptation")
    frozen_before = {k: v.tobytes() for k, v in model.params().items() if k not in params}
    bases_before = model.base_digests()
    opt = _optimizer(cfg)
    noise_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 5, task.task_id]))
    X, Y = task.x[:shots], task.y[:shots]
    started = time.perf_counter()
    loss = float("nan")
    for epoch in range(epochs):
        losses = [_train_step(model, opt, params, X[b], Y[b], task.task_id, noise_rng, cfg)
                  for b in _batches(shots, cfg.batch_size, noise_rng)]
        loss = float(np.mean(losses))
        _record(emit, cfg, "adapt", epoch, task.task_id, loss, mode, started)
    if model.base_digests() != bases_before:
        raise AssertionError("frozen base weight changed during adaptation")
    for k, v in model.params().items():
        if k in frozen_before and v.tobytes() != frozen_before[k]:
            raise AssertionError(f"frozen array {k} changed during adaptation")
    test_loss = evaluate(model, task, temperature=cfg.temperature, hard=cfg.hard_eval)
    _record(emit, cfg, "eval", epochs, task.task_id, test_loss, mode, started)
    return AdaptResult(model, trainable, loss, test_loss)


def oracle_model(suite: PlantedSuite, task: TaskSpec) -> Model:
    """A model whose layers hold the task's true weights as frozen bases (no adapter)."""
    from .adapters import AdapterLayer

    layers = [AdapterLayer(m, None, f"layer{i}") for i, m in enumerate(suite.task_maps(task.mixing))]
    return Model(layers, "none")


def routing_rows(cfg: ExperimentConfig) -> tuple:
    return routing_shape(cfg.method, N=cfg.N, R=cfg.R, S=cfg.S) if cfg.method in ROUTED else ()
