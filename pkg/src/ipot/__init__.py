"""Operator learning with a latent attention bottleneck.

Subpackages are imported lazily where it matters (the CLI sets BLAS
thread caps before numpy loads), so this module stays import-light.
"""

__version__ = "0.1.0"
