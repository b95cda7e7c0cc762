"""Explainable personalised federated learning on a small numpy autodiff core.

Modules: ``numkit`` (tensors and reverse-mode gradients), ``models`` (masked
ViT autoencoder and CNN classifier), ``data`` (datasets and non-IID
partitions), ``fedcore`` (federated rounds), ``explain`` (surrogate tree,
t-SNE, QoX), ``quality`` (PSNR/SSIM/accuracy) and ``cli``.
"""

__version__ = "0.1.0"

from ._jit import backend  # noqa: F401
