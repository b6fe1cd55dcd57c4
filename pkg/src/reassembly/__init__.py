"""Rigid multi-fragment 3D reassembly.

A library and CLI for reassembling fractured objects: an SO(3)/SE(3)
geometry layer, a minimal autodiff tensor engine, a synthetic fracture
pipeline, a rotation- and permutation-equivariant multimodal fragment
encoder, conditional flow matching over rigid poses, a differentiable
no-overlap penalty, and evaluation metrics.
"""

__version__ = "0.1.0"

from . import liegroup

__all__ = ["liegroup", "__version__"]
