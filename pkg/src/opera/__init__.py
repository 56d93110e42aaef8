"""Hierarchical self/full supervision on synthetic data.

A single online network is trained with an instance-level contrastive term
on its predictor output and a class-level cross-entropy term on a class head,
so that same-instance pairs end up closer than same-class pairs, which in
turn end up closer than cross-class pairs.
"""

from ._kernels import backend
from .errors import OperaError

__version__ = "0.1.0"

__all__ = ["OperaError", "backend", "__version__"]
