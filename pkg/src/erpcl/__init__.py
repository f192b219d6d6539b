"""Cross-subject ERP detection via contrastive pretraining.

Inception-style linear encoder, nonlinear projector, temperature-scaled
contrastive loss over subject pairs, and a frozen-encoder classifier,
all running on a self-contained reverse-mode autodiff core.
"""

from .autodiff import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
