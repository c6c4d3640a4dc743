"""Desk-scale multimodal extreme summarizer.

Two parallel text encoders (a Kronecker-sum "hyper-complex" transformer fused
with video features, and a Wasserstein flow encoder fused with audio features)
feed a transformer decoder through cross-modal attention. Everything runs on a
small float64 autodiff core so gradients can be checked against finite
differences.
"""

__version__ = "0.1.0"

from .estimator import TldrSummarizer

__all__ = ["TldrSummarizer", "__version__"]
