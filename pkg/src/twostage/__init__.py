"""Two-stage few-shot adaptation of a tiny dual encoder, built on a numpy autograd core."""

__version__ = "0.1.0"

from .adapt import AdaptConfig, compute_budget, run_2sfs, run_single_stage  # noqa: E402
from .dynamics import detect_breakpoint, sweep_alpha, sweep_budget  # noqa: E402
from .infer import evaluate, harmonic_mean, selective_predict  # noqa: E402
from .model import DualEncoder, ModelConfig, PretrainConfig, pretrain, zero_shot_predict  # noqa: E402
from .peft import attach, merge_lora, peft_params  # noqa: E402
from .synthdata import make_task, make_universe, split_base_novel  # noqa: E402

__all__ = [
    "AdaptConfig", "DualEncoder", "ModelConfig", "PretrainConfig", "attach", "compute_budget",
    "detect_breakpoint", "evaluate", "harmonic_mean", "make_task", "make_universe", "merge_lora",
    "peft_params", "pretrain", "run_2sfs", "run_single_stage", "selective_predict",
    "split_base_novel", "sweep_alpha", "sweep_budget", "zero_shot_predict",
]
