"""Pretraining, fine-tuning, evaluation and arm comparisons.

A base model is a stack of frozen linear layers with ReLU between them and
an optional fixed readout (used by the invariant-shift task).  Fine-tuning
attaches adapters to selected layers and updates only adapter parameters.
"""

from __future__ import annotations

import hashlib
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .. import adapters as ad
from .. import tensor as T
from .. import theory
from ..errors import ConfigError, ConfigWarning, ContractError, NumericalError, TrainingError
from ..tensor import Tensor
from .optim import LinearSchedule, OptimizerState
from .settings import AdapterConfig, TrainConfig
from .tasks import Dataset

_STREAM_INIT, _STREAM_SHUFFLE, _STREAM_DROPOUT, _STREAM_ADAPTER = 10, 11, 12, 13


def _rng(seed, stream):
    return np.random.default_rng([int(seed), stream])


def _sub_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(seed), *keys]).generate_state(1)[0])


@dataclass(eq=False)
class Model:
    layers: list[ad.AdaptedLayer]
    readout: np.ndarray | None = None

    def forward(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        h = x
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            h = ad.adapted_forward(layer, h, training, rng)
            if i < last:
                h = T.relu(h)
        if self.readout is not None:
            h = T.matmul(Tensor(self.readout, copy=False), h)
        return h

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers if layer.adapter is not None for p in layer.adapter.parameters()]

    def param_budget(self) -> int:
        return sum(ad.param_count(layer.adapter) for layer in self.layers)

    def base_checksum(self) -> str:
        h = hashlib.sha256()
        for layer in self.layers:
            h.update(layer.base.weight.tobytes())
        if self.readout is not None:
            h.update(self.readout.tobytes())
        return h.hexdigest()

    def merged(self) -> "Model":
        layers = [
            ad.AdaptedLayer(ad.merge(layer) if layer.adapter is not None else layer.base, None, layer.layer_index)
            for layer in self.layers
        ]
        return Model(layers, self.readout)

    def base(self) -> "Model":
        return Model([ad.AdaptedLayer(layer.base, None, layer.layer_index) for layer in self.layers], self.readout)


def resolve_targets(n_layers: int, targets) -> list[int]:
    if not targets:
        return list(range(n_layers))
    out = sorted(set(int(t) for t in targets))
    bad = [t for t in out if not 0 <= t < n_layers]
    if bad:
        raise ConfigError(f"adapter.target_layers: {bad} out of range for a {n_layers}-layer model")
    return out


def suffix_layers(n_layers: int) -> list[int]:
    """Upper half of the stack, the analogue of adapting only later layers."""
    return list(range(n_layers // 2, n_layers)) if n_layers > 1 else [0]


def attach_adapters(base: Model, cfg: AdapterConfig, seed: int) -> Model:
    targets = set(resolve_targets(len(base.layers), cfg.target_layers))
    layers = []
    for layer in base.layers:
        adapter = None
        if layer.layer_index in targets:
            d1, d2 = layer.base.shape
            with warnings.catch_warnings():
                # rank checks are reported once by the caller's config, not per layer
                warnings.simplefilter("ignore", ConfigWarning)
                adapter = ad.init_adapter(
                    cfg.kind, (d1, d2, cfg.r, cfg.depth), _sub_seed(seed, _STREAM_ADAPTER, layer.layer_index),
                    activation=cfg.activation, scaling=cfg.resolved_scaling(), residual=cfg.residual,
                    dropout_p=cfg.dropout, output_activation=cfg.output_activation,
                )
        layers.append(ad.AdaptedLayer(layer.base, adapter, layer.layer_index))
    if any(cfg.r >= min(layer.base.shape) for layer in base.layers if layer.layer_index in targets):
        warnings.warn(f"adapter rank {cfg.r} is not below min(d1, d2) for some targeted layer", ConfigWarning, stacklevel=2)
    return Model(layers, base.readout)


def task_loss(pred: Tensor, y: np.ndarray, problem: str) -> Tensor:
    if problem == "classification":
        return T.softmax_cross_entropy_loss(pred, y)
    return T.mse_loss(pred, Tensor(y, copy=False))


def evaluate(model: Model, data: Dataset, split: str = "val") -> dict:
    """Evaluation-mode loss (and accuracy for classification) on one split."""
    x, y = data.split(split)
    pred = model.forward(Tensor(x, copy=False), training=False)
    loss = task_loss(pred, y, data.problem).item()
    acc = None
    if data.problem == "classification":
        acc = float(np.mean(np.argmax(pred.data, axis=0) == y))
    return {"loss": loss, "accuracy": acc}


@dataclass
class RunMetrics:
    arm: str
    seed: int
    param_budget: int
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float | None] = field(default_factory=list)
    wall_clock: float = 0.0

    def record(self, train: dict, val: dict) -> None:
        for v in (train["loss"], val["loss"]):
            if not math.isfinite(v):
                raise NumericalError(f"non-finite evaluation loss in arm {self.arm}")
        self.train_loss.append(train["loss"])
        self.val_loss.append(val["loss"])
        self.val_accuracy.append(val["accuracy"])

    @property
    def epochs(self) -> int:
        return len(self.train_loss) - 1

    def rows(self):
        """(epoch, split, loss, accuracy) rows; epoch 0 is before any update."""
        for epoch, (tr, va, acc) in enumerate(zip(self.train_loss, self.val_loss, self.val_accuracy)):
            yield epoch, "train", tr, None
            yield epoch, "val", va, acc

    def to_dict(self) -> dict:
        return {
            "arm": self.arm, "seed": self.seed, "param_budget": self.param_budget,
            "train_loss": self.train_loss, "val_loss": self.val_loss, "val_accuracy": self.val_accuracy,
        }


def _batches(n: int, batch_size: int, full: bool, rng):
    if full or batch_size >= n:
        yield np.arange(n)
        return
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s : s + batch_size]


def _steps_per_epoch(n, batch_size, full):
    return 1 if full or batch_size >= n else -(-n // batch_size)


def _fit(params, forward, evaluate_fn, data: Dataset, cfg: TrainConfig, seed: int, metrics: RunMetrics) -> RunMetrics:
    n = data.x_train.shape[1]
    full = data.full_batch
    total = cfg.epochs * _steps_per_epoch(n, cfg.batch_size, full)
    opt = OptimizerState(
        params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
        weight_decay=cfg.weight_decay, schedule=LinearSchedule(cfg.warmup_steps, total),
    )
    shuffle_rng = _rng(seed, _STREAM_SHUFFLE)
    dropout_rng = _rng(seed, _STREAM_DROPOUT)
    start = time.perf_counter()
    metrics.record(evaluate_fn("train"), evaluate_fn("val"))
    step = 0
    for _ in range(cfg.epochs):
        for idx in _batches(n, cfg.batch_size, full, shuffle_rng):
            opt.zero_grad()
            x = Tensor(data.x_train[:, idx])
            y = data.y_train[..., idx]
            try:
                with T.Tape() as tape:
                    loss = task_loss(forward(x, True, dropout_rng), y, data.problem)
                T.backward(loss, tape)
            except NumericalError as exc:
                raise TrainingError(str(exc), step) from None
            opt.step()
            step += 1
        try:
            metrics.record(evaluate_fn("train"), evaluate_fn("val"))
        except NumericalError as exc:
            raise TrainingError(str(exc), step) from None
    metrics.wall_clock = time.perf_counter() - start
    return metrics


def layer_dims(d_in: int, hidden, d_out: int) -> list[tuple[int, int]]:
    widths = [d_in, *hidden, d_out]
    return [(widths[i + 1], widths[i]) for i in range(len(widths) - 1)]


def pretrain(data: Dataset, hidden, epochs: int, seed: int, cfg: TrainConfig | None = None) -> tuple[Model, RunMetrics]:
    """Train a ReLU MLP from scratch, then freeze it.

    For an invariant-shift task the base is the task's own ``W0`` and readout:
    the invariance is defined relative to that weight, so it is not retrained.
    """
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    if data.base_weight is not None:
        model = Model([ad.AdaptedLayer(ad.FrozenLinear(data.base_weight), None, 0)], data.readout)
        metrics = RunMetrics("pretrain", seed, 0)
        metrics.record(evaluate(model, data, "train"), evaluate(model, data, "val"))
        return model, metrics

    cfg = replace(cfg or TrainConfig(lr=1e-2, batch_size=32, warmup_steps=0), epochs=epochs)
    init = _rng(seed, _STREAM_INIT)
    weights = [
        Tensor(init.standard_normal(shape) * math.sqrt(2.0 / shape[1]), trainable=True, name=f"W{i}")
        for i, shape in enumerate(layer_dims(data.d_in, hidden, data.d_out))
    ]

    def forward(x, training=False, rng=None):
        h = x
        for i, w in enumerate(weights):
            h = T.matmul(w, h)
            if i < len(weights) - 1:
                h = T.relu(h)
        return h

    def evaluate_fn(split):
        x, y = data.split(split)
        pred = forward(Tensor(x, copy=False))
        acc = float(np.mean(np.argmax(pred.data, axis=0) == y)) if data.problem == "classification" else None
        return {"loss": task_loss(pred, y, data.problem).item(), "accuracy": acc}

    metrics = _fit(weights, forward, evaluate_fn, data, cfg, seed, RunMetrics("pretrain", seed, sum(w.size for w in weights)))
    model = Model([ad.AdaptedLayer(ad.FrozenLinear(w.data), None, i) for i, w in enumerate(weights)])
    return model, metrics


def finetune(
    model: Model,
    data: Dataset,
    cfg: TrainConfig,
    adapter_cfg: AdapterConfig | None = None,
    seed: int = 0,
    arm: str | None = None,
) -> tuple[Model, RunMetrics]:
    """Optimize adapter parameters only.

    With ``adapter_cfg`` fresh zero-initialized adapters are attached to a
    copy of ``model``; without it the adapters already on ``model`` are
    trained in place.
    """
    if adapter_cfg is not None:
        model = attach_adapters(model, adapter_cfg, seed)
    params = model.parameters()
    if not params:
        raise ContractError("model has no adapter parameters to fine-tune")
    if model.layers[0].base.shape[1] != data.d_in:
        raise ConfigError(f"model input width {model.layers[0].base.shape[1]} does not match task d_in {data.d_in}")
    checksum = model.base_checksum()
    label = arm or (adapter_cfg.kind if adapter_cfg else model.layers[0].adapter.kind if model.layers[0].adapter else "adapted")
    metrics = RunMetrics(label, seed, model.param_budget())
    _fit(params, model.forward, lambda split: evaluate(model, data, split), data, cfg, seed, metrics)
    if model.base_checksum() != checksum:
        raise ContractError("frozen base weights changed during fine-tuning")
    return model, metrics


def construct_from_lora(model: Model) -> Model:
    """Replace every LoRA adapter by the 2r-unit ReLU NEAT adapter built from it."""
    layers = []
    for layer in model.layers:
        adapter = layer.adapter
        if isinstance(adapter, ad.LoraAdapter):
            a = adapter.A.data * adapter.scaling
            theta_in, theta_out = theory.prop1_construct(layer.base.weight, a, adapter.B.data)
            adapter = ad.NeatAdapter(Tensor(theta_in, trainable=True), Tensor(theta_out, trainable=True), activation="relu")
        layers.append(ad.AdaptedLayer(layer.base, adapter, layer.layer_index))
    return Model(layers, model.readout)


@dataclass
class ComparisonRecord:
    mode: str
    r: int
    runs: list[RunMetrics]
    constructed: list[dict]
    warnings: list[str] = field(default_factory=list)

    def max_constructed_gap(self) -> float:
        return max((max(c["train_gap"], c["val_gap"]) for c in self.constructed), default=0.0)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode, "r": self.r, "runs": [m.to_dict() for m in self.runs],
            "constructed": self.constructed, "warnings": self.warnings,
            "max_constructed_gap": self.max_constructed_gap(),
        }


def _run_trials(trials, workers: int):
    """Run (key, thunk) pairs, possibly concurrently; results keep input order."""
    if workers <= 1:
        return [fn() for _, fn in trials]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn) for _, fn in trials]
        return [f.result() for f in futures]


def compare_budget(
    base: Model,
    data: Dataset,
    r: int,
    cfg: TrainConfig,
    seeds,
    template: AdapterConfig | None = None,
    workers: int = 1,
) -> ComparisonRecord:
    """LoRA rank r vs ReLU NEAT with 2r units, plus NEAT built from the trained LoRA.

    On an invariant-shift task the constructed arm must match LoRA's loss;
    elsewhere the comparison is exploratory.
    """
    template = template or AdapterConfig()
    lora_cfg = replace(template, kind="lora", r=r, depth=2)
    neat_cfg = replace(template, kind="neat", r=2 * r, depth=2, activation="relu")
    mode = "invariant" if data.invariant_loss is not None else "exploratory"
    trials = []
    for seed in seeds:
        for arm, acfg in (("lora", lora_cfg), ("neat", neat_cfg)):
            trials.append(((seed, arm), lambda s=seed, a=arm, c=acfg: finetune(base, data, cfg, c, s, a)))
    results = _run_trials(trials, workers)

    runs, constructed, notes = [], [], []
    for ((seed, arm), _), (model, metrics) in zip(trials, results):
        runs.append(metrics)
        if arm != "lora":
            continue
        built = construct_from_lora(model)
        ev_train, ev_val = evaluate(built, data, "train"), evaluate(built, data, "val")
        constructed.append({
            "seed": seed,
            "param_budget": built.param_budget(),
            "train_loss": ev_train["loss"],
            "val_loss": ev_val["loss"],
            "train_gap": abs(ev_train["loss"] - metrics.train_loss[-1]),
            "val_gap": abs(ev_val["loss"] - metrics.val_loss[-1]),
        })
    budgets = {m.arm: m.param_budget for m in runs}
    if budgets.get("lora") != budgets.get("neat"):
        msg = f"parameter budgets differ: lora {budgets.get('lora')} vs neat {budgets.get('neat')}"
        warnings.warn(msg, ConfigWarning, stacklevel=2)
        notes.append(msg)
    return ComparisonRecord(mode, r, runs, constructed, notes)


@dataclass
class SweepRecord:
    axis: str
    values: list
    runs: list[RunMetrics]

    def summary(self) -> list[dict]:
        out = []
        for v in self.values:
            label = f"{self.axis}={v}"
            sel = [m for m in self.runs if m.arm == label]
            out.append({
                "value": v,
                "mean_final_train_loss": float(np.mean([m.train_loss[-1] for m in sel])),
                "mean_final_val_loss": float(np.mean([m.val_loss[-1] for m in sel])),
                "param_budget": sel[0].param_budget if sel else 0,
                "seeds": [m.seed for m in sel],
            })
        return out

    def to_dict(self) -> dict:
        return {"axis": self.axis, "values": list(self.values), "summary": self.summary(), "runs": [m.to_dict() for m in self.runs]}


def sweep_variant(cfg: AdapterConfig, axis: str, value, n_layers: int) -> AdapterConfig:
    if axis == "depth":
        return replace(cfg, depth=int(value))
    if axis == "activation":
        return replace(cfg, activation=str(value))
    if axis == "targeting":
        if value == "all":
            return replace(cfg, target_layers=())
        if value == "suffix":
            return replace(cfg, target_layers=tuple(suffix_layers(n_layers)))
        return replace(cfg, target_layers=tuple(int(v) for v in value))
    raise ConfigError(f"sweep.axis: unknown axis {axis!r}")


def run_sweep(base: Model, data: Dataset, axis: str, values, adapter_cfg: AdapterConfig, cfg: TrainConfig, seeds, workers: int = 1) -> SweepRecord:
    trials = []
    for v in values:
        variant = sweep_variant(adapter_cfg, axis, v, len(base.layers))
        for seed in seeds:
            label = f"{axis}={v}"
            trials.append(((v, seed), lambda s=seed, c=variant, a=label: finetune(base, data, cfg, c, s, a)[1]))
    return SweepRecord(axis, list(values), _run_trials(trials, workers))
