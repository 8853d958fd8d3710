"""Parameter-efficient fine-tuning strategies.

``attach`` selects (layernorm, bitfit) or injects (lora, prompt) the
trainable set and freezes everything else.  The returned ParamSet is an
ordered, modality-partitioned view over those tensors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, StateError
from .model import LN_KINDS, LORA_KINDS, TEMPLATE_IDS, DualEncoder, kind_of, tower_of
from .tensor import Tensor

STRATEGIES = ("layernorm", "lora", "bitfit", "prompt")


@dataclass
class ParamSet:
    strategy: str
    entries: list[tuple[str, Tensor]]

    def __post_init__(self):
        names = [n for n, _ in self.entries]
        if len(names) != len(set(names)):
            raise ArgumentError("duplicate parameter names in ParamSet")

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.entries]

    @property
    def vision(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.entries if tower_of(n) == "vision"]

    @property
    def text(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.entries if tower_of(n) == "text"]

    def n_scalars(self) -> int:
        return int(sum(t.data.size for _, t in self.entries))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.entries}

    def load(self, snap: dict[str, np.ndarray]) -> None:
        for n, t in self.entries:
            t.data[...] = snap[n]


@dataclass
class LoraModule:
    """Low-rank update ``x -> scale * (x A^T) B^T`` added beside a frozen weight."""

    target: str
    A: Tensor  # (r, in)
    B: Tensor  # (out, r)
    rank: int
    scale: float = 1.0

    def delta(self, x: Tensor) -> Tensor:
        return ((x @ self.A.T) @ self.B.T) * self.scale

    def weight_delta(self) -> np.ndarray:
        """Update in the registry's (in, out) layout."""
        return self.scale * (self.A.data.T @ self.B.data.T)


@dataclass
class PromptContext:
    """Learnable context vectors replacing the template words in the text tower."""

    ctx: Tensor  # (ctx_len, d)

    @property
    def ctx_len(self) -> int:
        return self.ctx.shape[0]


def _select(model: DualEncoder, predicate) -> list[tuple[str, Tensor]]:
    return [(n, t) for n, t in model.params.items() if predicate(n)]


def attach(strategy: str, model: DualEncoder, *, rank: int = 2, lora_scale: float = 1.0,
           ctx_len: int = 4, seed: int = 0) -> ParamSet:
    """Select or inject the trainable set for ``strategy`` and freeze the rest of the model."""
    if strategy not in STRATEGIES:
        raise ArgumentError(f"unknown PEFT strategy {strategy!r}; choose from {STRATEGIES}")
    if model.strategy is not None:
        raise StateError(f"strategy {model.strategy!r} already attached")

    if strategy == "layernorm":
        entries = _select(model, lambda n: kind_of(n) in LN_KINDS)
    elif strategy == "bitfit":
        entries = _select(model, lambda n: kind_of(n).startswith("bias_"))
    elif strategy == "lora":
        if rank < 1:
            raise ArgumentError("lora rank must be >= 1")
        rng = np.random.default_rng(seed)
        entries = []
        for name, w in model.params.items():
            if kind_of(name) not in LORA_KINDS:
                continue
            n_in, n_out = w.shape
            mod = LoraModule(target=name, A=Tensor(rng.normal(0.0, 0.02, size=(rank, n_in))),
                             B=Tensor(np.zeros((n_out, rank))), rank=rank, scale=lora_scale)
            model.lora[name] = mod
            entries += [(f"{name}.lora_A", mod.A), (f"{name}.lora_B", mod.B)]
        model.lora_merged = False
    else:
        if ctx_len < 1:
            raise ArgumentError("ctx_len must be >= 1")
        if 2 + ctx_len + 1 > model.config.max_text_len:
            raise ArgumentError("ctx_len does not fit max_text_len")
        table = model.params["text.embed"].data
        # initialise from the template words, cycling when ctx_len differs
        words = [TEMPLATE_IDS[i % len(TEMPLATE_IDS)] for i in range(ctx_len)]
        model.prompt = PromptContext(ctx=Tensor(table[words].copy()))
        entries = [("text.prompt.ctx", model.prompt.ctx)]

    model.strategy = strategy
    model.set_trainable(n for n, _ in entries)
    return ParamSet(strategy=strategy, entries=entries)


def peft_params(strategy: str, model: DualEncoder, *, rank: int = 2, ctx_len: int = 4) -> int:
    """Trainable scalar count ``strategy`` would produce on ``model`` (no mutation)."""
    if strategy not in STRATEGIES:
        raise ArgumentError(f"unknown PEFT strategy {strategy!r}")
    if strategy == "layernorm":
        return sum(t.data.size for n, t in model.params.items() if kind_of(n) in LN_KINDS)
    if strategy == "bitfit":
        return sum(t.data.size for n, t in model.params.items() if kind_of(n).startswith("bias_"))
    if strategy == "lora":
        return sum(rank * (t.shape[0] + t.shape[1])
                   for n, t in model.params.items() if kind_of(n) in LORA_KINDS)
    return ctx_len * model.config.d


def merge_lora(model: DualEncoder) -> DualEncoder:
    """Fold every adapter into its frozen weight and drop the adapters."""
    if model.lora_merged:
        raise StateError("LoRA adapters already merged")
    if not model.lora:
        raise StateError("no LoRA adapters attached")
    for name, mod in model.lora.items():
        model.params[name].data = model.params[name].data + mod.weight_delta()
    model.lora = {}
    model.lora_merged = True
    return model


def detach_strategy(model: DualEncoder) -> None:
    """Drop injected modules and clear the strategy tag (restores a plain backbone)."""
    model.lora = {}
    model.prompt = None
    model.strategy = None
    model.lora_merged = False
    model.freeze_all()
