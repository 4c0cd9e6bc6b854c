"""Attention-guided masked language modelling on a small numpy autodiff engine."""

__version__ = "0.1.0"

from .patterns import PatternKind, build_pattern  # noqa: E402
from .model import ModelConfig, encode, init_parameters, mlm_logits  # noqa: E402
from .objective import GuidanceConfig, combined_loss  # noqa: E402
from .trainer import TrainConfig, evaluate_mlm, train  # noqa: E402
from .probe import generate_synthetic, probe_heads  # noqa: E402
from .checkpoint import load_checkpoint, save_checkpoint  # noqa: E402

__all__ = [
    "PatternKind", "build_pattern", "ModelConfig", "encode", "init_parameters", "mlm_logits",
    "GuidanceConfig", "combined_loss", "TrainConfig", "evaluate_mlm", "train",
    "generate_synthetic", "probe_heads", "load_checkpoint", "save_checkpoint",
]
