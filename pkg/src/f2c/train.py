"""Optimizer, stage execution and the five train/test strategies."""

import math
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .dataset import Dataset, batches
from .model import Model, build, transfer_all_but_output
from .resample import ResolutionSpec, degrade

log = logging.getLogger(__name__)


class DataView(str, Enum):
    HIGH = "high"
    LOW = "low"
    MIXED = "mixed"


class Strategy(str, Enum):
    HIGH_ONLY = "high-only"
    LOW_ONLY = "low-only"
    MIXED = "mixed"
    STAGED_HL = "staged-hl"
    STAGED_LH = "staged-lh"


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class StageConfig:
    data_view: DataView = DataView.HIGH
    learning_rate: float = 0.01
    epochs: int = 30
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    clip_norm: float = 0.0  # global gradient-norm cap, 0 disables


    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be non-negative, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.clip_norm < 0:
            raise ValueError(f"clip_norm must be non-negative, got {self.clip_norm}")


@dataclass(frozen=True)
class Hyper:
    """Knobs that a strategy expands into stage configs."""

    lr: float = 0.01
    lr_finetune: float = 0.001
    epochs: int = 30
    epochs_finetune: Optional[int] = None  # defaults to ``epochs``
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 5e-4
    pretrain_epochs: int = 30
    pretrain_lr: float = 0.01
    clip_norm: float = 0.0


@dataclass(frozen=True)
class TrainPlan:
    strategy: Strategy
    stages: Tuple[StageConfig, ...]
    pretrain: Optional[StageConfig] = None

    def __post_init__(self):
        views = [s.data_view for s in self.stages]
        expected = {
            Strategy.HIGH_ONLY: [DataView.HIGH],
            Strategy.LOW_ONLY: [DataView.LOW],
            Strategy.MIXED: [DataView.MIXED],
            Strategy.STAGED_HL: [DataView.HIGH, DataView.LOW],
            Strategy.STAGED_LH: [DataView.LOW, DataView.HIGH],
        }[self.strategy]
        if views != expected:
            raise ValueError(f"{self.strategy.value} expects stage views {[v.value for v in expected]}, got {[v.value for v in views]}")
        for first, second in zip(self.stages, self.stages[1:]):
            if not second.learning_rate < first.learning_rate:
                raise ValueError(
                    f"later stage learning rate {second.learning_rate} must be below {first.learning_rate}"
                )

    @classmethod
    def for_strategy(cls, strategy, hyper: Hyper = Hyper(), seed: int = 0, pretrain: bool = True) -> "TrainPlan":
        strategy = Strategy(strategy)
        common = dict(
            batch_size=hyper.batch_size, momentum=hyper.momentum, weight_decay=hyper.weight_decay, clip_norm=hyper.clip_norm
        )
        fine_epochs = hyper.epochs if hyper.epochs_finetune is None else hyper.epochs_finetune
        first = StageConfig(learning_rate=hyper.lr, epochs=hyper.epochs, seed=seed + 1, **common)
        second = StageConfig(learning_rate=hyper.lr_finetune, epochs=fine_epochs, seed=seed + 2, **common)
        h, l = DataView.HIGH, DataView.LOW
        stages = {
            Strategy.HIGH_ONLY: (replace(first, data_view=h),),
            Strategy.LOW_ONLY: (replace(first, data_view=l),),
            Strategy.MIXED: (replace(first, data_view=DataView.MIXED),),
            Strategy.STAGED_HL: (replace(first, data_view=h), replace(second, data_view=l)),
            Strategy.STAGED_LH: (replace(first, data_view=l), replace(second, data_view=h)),
        }[strategy]
        pre = None
        if pretrain:
            pre = StageConfig(DataView.HIGH, hyper.pretrain_lr, hyper.pretrain_epochs, seed=seed, **common)
        return cls(strategy, stages, pre)


@dataclass
class EvalResult:
    strategy: str
    train_description: str
    accuracy_high: float
    accuracy_low: float
    seed: int
    per_class: Dict[str, Dict[int, float]] = field(default_factory=dict)
    loss_curves: List[List[float]] = field(default_factory=list)


def sgd_step(params: Dict[str, np.ndarray], grads, lr, momentum, weight_decay, state: Dict[str, np.ndarray]):
    """In-place momentum SGD: ``v = m*v + g + wd*p``; ``p -= lr*v``."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise T.ShapeError(f"sgd_step: grad for {name} has shape {g.shape}, param {p.shape}")
        v = state.get(name)
        if v is None:
            v = state[name] = np.zeros_like(p)
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p
        p -= lr * v
    return params, state


def clip_grads(grads: Dict[str, np.ndarray], max_norm: float) -> Dict[str, np.ndarray]:
    """Rescale all gradients together so their global L2 norm is at most ``max_norm`` (0 = no-op)."""
    if not max_norm:
        return grads
    norm = math.sqrt(math.fsum(float(np.vdot(g, g)) for g in grads.values()))
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


def view_images(dataset: Dataset, view: DataView, spec: ResolutionSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Images and labels the given data view trains on."""
    if view is DataView.HIGH:
        return dataset.images, dataset.labels
    low = dataset.view(("degraded", spec), lambda x: degrade(x, spec))
    if view is DataView.LOW:
        return low, dataset.labels
    return np.concatenate([dataset.images, low]), np.concatenate([dataset.labels, dataset.labels])


def run_stage(model: Model, dataset: Dataset, stage: StageConfig, spec: ResolutionSpec) -> Tuple[Model, List[float]]:
    """Train ``model`` in place for one stage; returns it with the per-epoch mean loss."""
    if stage.epochs == 0:
        return model, []
    if len(dataset) == 0:
        raise ValueError("run_stage: empty dataset with epochs > 0")
    images, labels = view_images(dataset, DataView(stage.data_view), spec)
    rng = np.random.default_rng(stage.seed)
    state: Dict[str, np.ndarray] = {}
    curve = []
    model.training = True
    try:
        for epoch in range(stage.epochs):
            total = 0.0
            for idx in batches(len(labels), stage.batch_size, rng):
                logits, cache = model.forward_train(images[idx], rng)
                loss, grad = T.softmax_xent(logits, labels[idx])
                if not np.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}")
                grads = clip_grads(model.backward(cache, grad), stage.clip_norm)
                sgd_step(model.params, grads, stage.learning_rate, stage.momentum, stage.weight_decay, state)
                total += loss * len(idx)
            curve.append(total / len(labels))
            if not all(np.isfinite(p).all() for p in model.params.values()):
                raise TrainingDiverged(f"non-finite parameters after epoch {epoch + 1}")
            log.debug("stage %s epoch %d loss %.4f", stage.data_view, epoch + 1, curve[-1])
    finally:
        model.training = False
    return model, curve


def predict(model: Model, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Argmax logits; ties resolve to the lowest class index."""
    out = []
    for i in range(0, len(images), chunk):
        out.append(np.argmax(model.forward(images[i:i + chunk]), axis=1))
    return np.concatenate(out) if out else np.empty(0, dtype=int)


def evaluate(model: Model, dataset: Dataset, mode: str, spec: ResolutionSpec) -> Tuple[float, Dict[int, float]]:
    if len(dataset) == 0:
        raise ValueError("evaluate: empty dataset")
    view = {"native": DataView.HIGH, "degraded": DataView.LOW}[mode]
    images, labels = view_images(dataset, view, spec)
    correct = predict(model, images) == labels
    per_class = {int(c): float(correct[labels == c].mean()) for c in np.unique(labels)}
    return float(correct.mean()), per_class


def snap_to_f32(model: Model) -> Model:
    """Round parameters to the checkpoint precision so saved and in-memory models agree bit-for-bit."""
    for name, p in model.params.items():
        with np.errstate(over="ignore"):
            snapped = p.astype(np.float32)
        if not np.all(np.isfinite(snapped)):
            raise TrainingDiverged(f"{name} does not fit in float32 after training")
        p[...] = snapped
    return model


def pretrain_model(aux_dataset: Dataset, model_spec, stage: StageConfig, spec: ResolutionSpec, init_std=None) -> Tuple[Model, List[float]]:
    model = build(model_spec.with_classes(aux_dataset.num_classes), np.random.default_rng([stage.seed, 11]), init_std)
    return run_stage(model, aux_dataset, stage, spec)


def describe(plan: TrainPlan) -> str:
    parts = [f"{i}. {s.data_view.value}" for i, s in enumerate(plan.stages, 1)]
    if plan.pretrain is not None:
        parts.insert(0, "0. aux")
    return " ".join(parts)


def initial_model(plan: TrainPlan, model_spec, aux_dataset, num_classes, spec, seed, pretrained=None, init_std=None):
    """Model entering the first stage: fresh, or pretrained-and-transferred."""
    if plan.pretrain is None:
        return build(model_spec.with_classes(num_classes), np.random.default_rng([seed, 12]), init_std), []
    curve: List[float] = []
    if pretrained is None:
        pretrained, curve = pretrain_model(aux_dataset, model_spec, plan.pretrain, spec, init_std)
    return transfer_all_but_output(pretrained, num_classes, np.random.default_rng([seed, 13])), curve


def run_strategy(
    plan: TrainPlan,
    aux_dataset: Optional[Dataset],
    train_dataset: Dataset,
    test_dataset: Dataset,
    spec: ResolutionSpec,
    model_spec,
    seed: int = 0,
    pretrained: Optional[Model] = None,
    init_std=None,
    train_low: Optional[Dataset] = None,
) -> Tuple[EvalResult, Model]:
    """Pretrain (optional), transfer, run every stage, evaluate at both resolutions.

    ``pretrained`` short-circuits the auxiliary stage with an already trained
    model (it is copied, never mutated). ``train_low`` lets the low-res stages
    of a staged plan use a different sample set than the high-res stages.
    """
    if aux_dataset is not None and plan.pretrain is not None and pretrained is None and len(aux_dataset) == 0:
        raise ValueError("run_strategy: empty auxiliary dataset")
    if plan.pretrain is not None and pretrained is None and aux_dataset is None:
        raise ValueError("run_strategy: plan has a pretrain stage but no auxiliary dataset was given")
    model, pre_curve = initial_model(
        plan, model_spec, aux_dataset, train_dataset.num_classes, spec, seed,
        None if pretrained is None else pretrained.copy(), init_std,
    )
    curves = [pre_curve] if plan.pretrain is not None else []
    for stage in plan.stages:
        data = train_low if (train_low is not None and stage.data_view is DataView.LOW) else train_dataset
        model, curve = run_stage(model, data, stage, spec)
        curves.append(curve)
    snap_to_f32(model)
    acc_high, pc_high = evaluate(model, test_dataset, "native", spec)
    acc_low, pc_low = evaluate(model, test_dataset, "degraded", spec)
    result = EvalResult(
        strategy=plan.strategy.value,
        train_description=describe(plan),
        accuracy_high=acc_high,
        accuracy_low=acc_low,
        seed=seed,
        per_class={"high": pc_high, "low": pc_low},
        loss_curves=curves,
    )
    return result, model
