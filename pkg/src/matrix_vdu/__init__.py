"""Multi-modal transformer for visual document understanding."""

import torch

torch.set_default_dtype(torch.float64)

from .document import Document, Line, Modality, PageImage, RelBox, Word, load_document  # noqa: E402
from .encoder import Ablation, EncoderConfig, MatrixEncoder  # noqa: E402
from .attention import BiasVariant  # noqa: E402

__all__ = ["Ablation", "BiasVariant", "Document", "EncoderConfig", "Line", "MatrixEncoder", "Modality",
           "PageImage", "RelBox", "Word", "load_document"]
__version__ = "0.1.0"
