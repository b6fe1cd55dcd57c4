"""Fragment data model, PLY I/O, synthetic fracture, and dataset layout."""

from .core import (
    Fragment,
    UnassembledObject,
    anchor_index,
    center_fragment,
    content_hash,
    fps_indices,
    proportional_counts,
    sample_object_points,
    sample_points,
)
from .fracture import (
    ValueNoise3,
    generate_fracture,
    label_fracture_boundary,
    perturb,
)
from .manifest import load_object, make_dataset, save_object
from .ply import estimate_normals, load_ply, save_ply

__all__ = [
    "Fragment",
    "UnassembledObject",
    "ValueNoise3",
    "anchor_index",
    "center_fragment",
    "content_hash",
    "estimate_normals",
    "fps_indices",
    "generate_fracture",
    "label_fracture_boundary",
    "load_object",
    "load_ply",
    "make_dataset",
    "perturb",
    "proportional_counts",
    "sample_object_points",
    "sample_points",
    "save_object",
    "save_ply",
]
