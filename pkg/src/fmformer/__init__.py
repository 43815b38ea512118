"""Cross-modal video/current transformer for furnace anomaly detection, built on a small numpy autodiff engine."""

from .model import FmFormer, ModelConfig, PRESETS, load_model, save_model
from .tensor import Tensor, default_dtype, no_grad

__all__ = ["FmFormer", "ModelConfig", "PRESETS", "Tensor", "default_dtype", "load_model", "no_grad", "save_model"]
__version__ = "0.1.0"
