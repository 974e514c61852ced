"""Copy-detection descriptor toolkit.

Contrastive and entropy losses with analytic gradients, descriptor
postprocessing, a synthetic training bench, score normalization and
retrieval evaluation.
"""

__version__ = "0.1.0"
