"""Two-stage few-shot adaptation and the single-stage PEFT baseline.

Stage one spends ``ceil(alpha * m)`` AdamW steps on the PEFT parameters with
the cross-entropy over base classes; stage two freezes them, stacks the
adapted text embeddings of the base classes into a classifier and spends
the remaining steps on that matrix alone.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .curves import CurveRecord, DynamicsCurve
from .errors import ArgumentError, ConfigurationError, StateError
from .infer import evaluate
from .optim import OptimizerState, adamw_step
from .peft import ParamSet, attach
from .tensor import Tensor, no_grad


@dataclass
class AdaptConfig:
    M: int = 300
    k: int = 16
    alpha: float = 0.6
    lr: float = 2e-4
    wd: float = 0.01
    batch: int = 32
    eval_interval: int = 0
    seed: int = 0
    peft: str = "layernorm"
    rank: int = 2
    ctx_len: int = 4

    def validate(self) -> None:
        if self.M * self.k < 1:
            raise ConfigurationError("budget m = M * k must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError("alpha must lie in [0, 1]")
        if self.batch < 1:
            raise ConfigurationError("batch size must be >= 1")
        if self.eval_interval < 0:
            raise ConfigurationError("eval_interval must be >= 0")
        if self.lr <= 0 or self.wd < 0:
            raise ConfigurationError("lr must be positive and wd non-negative")

    def replace(self, **changes) -> "AdaptConfig":
        data = asdict(self)
        data.update(changes)
        return AdaptConfig(**data)


def compute_budget(config: AdaptConfig) -> tuple[int, int, int]:
    """Total budget m = M * k, split as m1 = ceil(alpha * m) and m2 = m - m1."""
    m = config.M * config.k
    # round first so that e.g. 0.6 * 4800 does not ceil up from 2880.0000000000005
    m1 = math.ceil(round(config.alpha * m, 9))
    return m, m1, m - m1


def sample_indices(n: int, batch: int, rng: np.random.Generator) -> np.ndarray:
    if n < 1:
        raise StateError("no shots to sample from")
    return rng.integers(0, n, size=batch)


def sample_batch(task, batch: int, rng: np.random.Generator) -> list[tuple[np.ndarray, int]]:
    """Uniform draw with replacement of ``batch`` (image, base label) pairs from the shots."""
    idx = sample_indices(task.n, batch, rng)
    return [(task.shot_images[i], int(task.shot_labels[i])) for i in idx]


def base_targets(task) -> np.ndarray:
    """Shot labels as positions in the ascending base list."""
    pos = {c: i for i, c in enumerate(task.base)}
    return np.array([pos[int(y)] for y in task.shot_labels], dtype=np.int64)


@dataclass
class Classifier:
    base: tuple[int, ...]
    phi: Tensor
    trainable: bool = False

    def __post_init__(self):
        if list(self.base) != sorted(self.base):
            raise ArgumentError("classifier rows must follow ascending base id order")
        if self.phi.shape[0] != len(self.base):
            raise ArgumentError("classifier row count must equal |B|")
        self._pos = {c: i for i, c in enumerate(self.base)}

    def has(self, c: int) -> bool:
        return int(c) in self._pos

    def row(self, c: int) -> np.ndarray:
        return self.phi.data[self._pos[int(c)]]


def init_classifier(model, base) -> Classifier:
    """Stack the adapted text embeddings of the base classes, ascending id order."""
    base = tuple(sorted(int(b) for b in base))
    if not base:
        raise ArgumentError("empty base set")
    with no_grad():
        rows = model.encode_texts(base).data.copy()
    return Classifier(base=base, phi=Tensor(rows))


# -- training loops -------------------------------------------------------------
EvalHook = Callable[[int, float], None]


def shot_loss(model, task, targets=None) -> float:
    """Mean stage-one cross-entropy over every shot (no graph)."""
    targets = base_targets(task) if targets is None else targets
    with no_grad():
        return T.cross_entropy(model.class_logits(task.shot_images, task.base), targets).item()


def stage_one(model, omega: ParamSet, task, config: AdaptConfig, steps: int,
              rng: np.random.Generator, on_step: Callable[[int], None] | None = None) -> OptimizerState:
    """Run ``steps`` AdamW updates of the PEFT set on the base-class cross-entropy.

    ``on_step(t)`` fires after every update with the 1-based step count.
    """
    state = OptimizerState(lr=config.lr, weight_decay=config.wd)
    targets = base_targets(task)
    for t in range(1, steps + 1):
        idx = sample_indices(task.n, config.batch, rng)
        for _, p in omega:
            p.grad = None
        loss = T.cross_entropy(model.class_logits(task.shot_images[idx], task.base), targets[idx])
        loss.backward()
        adamw_step(omega, state)
        if on_step is not None:
            on_step(t)
    return state


def classifier_logits(features: Tensor | np.ndarray, classifier: Classifier, tau: float) -> Tensor:
    """tau * cosine(image, row) with rows renormalised at use."""
    return (T.as_tensor(features) @ T.l2_normalize(classifier.phi).T) * tau


def stage_two(model, classifier: Classifier, task, config: AdaptConfig, steps: int,
              rng: np.random.Generator, on_step: Callable[[int], None] | None = None) -> OptimizerState:
    """Train only the classifier rows on frozen adapted image features."""
    model.freeze_all()
    with no_grad():
        feats = model.encode_images(task.shot_images).data
    targets = base_targets(task)
    classifier.phi.requires_grad = True
    classifier.trainable = True
    params = [("classifier.phi", classifier.phi)]
    state = OptimizerState(lr=config.lr, weight_decay=config.wd)
    tau = model.tau
    for t in range(1, steps + 1):
        idx = sample_indices(task.n, config.batch, rng)
        classifier.phi.grad = None
        loss = T.cross_entropy(classifier_logits(feats[idx], classifier, tau), targets[idx])
        loss.backward()
        adamw_step(params, state)
        if on_step is not None:
            on_step(t)
    classifier.phi.requires_grad = False
    classifier.phi.grad = None
    return state


def classifier_loss(model, classifier: Classifier, task) -> float:
    with no_grad():
        feats = model.encode_images(task.shot_images).data
        return T.cross_entropy(classifier_logits(feats, classifier, model.tau), base_targets(task)).item()


@dataclass
class AdaptResult:
    omega: dict[str, np.ndarray]
    classifier: Classifier | None
    curve: DynamicsCurve
    metrics: object
    steps: int
    m1: int
    m2: int
    model: object = None


class _Recorder:
    """Evaluates held-out accuracy every ``interval`` global steps and at the end."""

    def __init__(self, model, task, protocol, interval, total, curve):
        self.model, self.task, self.protocol = model, task, protocol
        self.interval, self.total, self.curve = interval, total, curve
        self.classifier: Classifier | None = None

    def due(self, it: int) -> bool:
        return it == 0 or it == self.total or (self.interval > 0 and it % self.interval == 0)

    def record(self, it: int) -> None:
        if self.curve.records and self.curve.records[-1].iteration == it:
            return
        model = self.model
        calls = model.text_calls
        if self.classifier is None:
            loss = shot_loss(model, self.task)
        else:
            loss = classifier_loss(model, self.classifier, self.task)
        m = evaluate(self.protocol, model, self.classifier, self.task)
        model.text_calls = calls
        self.curve.append(CurveRecord(it, loss, m.base_acc, m.novel_acc))


def _protocol(task) -> str:
    return "base-to-novel" if task.novel else "all-to-all"


def run_2sfs(model, strategy: str | None, task, config: AdaptConfig, record: bool = True) -> AdaptResult:
    """attach -> stage one (m1 steps) -> init_classifier -> stage two (m2 steps).

    ``model`` is mutated in place; pass a copy of a pretrained model.  With
    ``record`` the held-out curve is sampled every ``config.eval_interval``
    steps across both stages (only iteration 0 and m when the interval is 0).
    """
    config.validate()
    strategy = strategy or config.peft
    m, m1, m2 = compute_budget(config)
    omega = attach(strategy, model, rank=config.rank, ctx_len=config.ctx_len, seed=config.seed)
    rng = np.random.default_rng(config.seed)
    curve = DynamicsCurve(strategy=strategy)
    rec = _Recorder(model, task, _protocol(task), config.eval_interval, m, curve)
    steps = 0

    def tick(offset):
        def hook(t):
            nonlocal steps
            steps += 1
            if record and rec.due(offset + t):
                rec.record(offset + t)
        return hook

    if record:
        rec.record(0)
    stage_one(model, omega, task, config, m1, rng, tick(0))
    model.freeze_all()
    omega_star = omega.snapshot()
    classifier = init_classifier(model, task.base)
    rec.classifier = classifier
    stage_two(model, classifier, task, config, m2, rng, tick(m1))
    if record and m == m1 == 0:
        rec.record(0)
    metrics = evaluate(_protocol(task), model, classifier, task)
    return AdaptResult(omega=omega_star, classifier=classifier, curve=curve, metrics=metrics,
                       steps=steps, m1=m1, m2=m2, model=model)


def run_single_stage(model, strategy: str | None, task, config: AdaptConfig,
                     record: bool = True) -> AdaptResult:
    """Plain PEFT for the full budget m on the base-class cross-entropy (no switch)."""
    config.validate()
    strategy = strategy or config.peft
    m, _, _ = compute_budget(config)
    omega = attach(strategy, model, rank=config.rank, ctx_len=config.ctx_len, seed=config.seed)
    rng = np.random.default_rng(config.seed)
    curve = DynamicsCurve(strategy=strategy)
    rec = _Recorder(model, task, _protocol(task), config.eval_interval, m, curve)
    steps = 0

    def hook(t):
        nonlocal steps
        steps += 1
        if record and rec.due(t):
            rec.record(t)

    if record:
        rec.record(0)
    stage_one(model, omega, task, config, m, rng, hook)
    model.freeze_all()
    metrics = evaluate(_protocol(task), model, None, task)
    return AdaptResult(omega=omega.snapshot(), classifier=None, curve=curve, metrics=metrics,
                       steps=steps, m1=m, m2=0, model=model)
