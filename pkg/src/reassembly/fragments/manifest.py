"""On-disk layout for fractured objects.

A directory holds one PLY file per fragment plus manifest.json with the
ground-truth poses, the normalization scale, and the generating seed.
Serialization is deterministic: identical objects produce identical
bytes.
"""

from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..errors import DataError
from ..liegroup import RigidTransform, check_rotation
from .core import UnassembledObject
from .fracture import label_fracture_boundary
from .ply import load_ply, save_ply

MANIFEST_NAME = "manifest.json"


def save_object(directory, obj: UnassembledObject, scale: float, seed: int,
                binary: bool = True) -> None:
    if obj.gt_poses is None:
        raise DataError("cannot save an object without ground-truth poses")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, f in enumerate(obj.fragments):
        name = f"fragment_{i:03d}.ply"
        save_ply(directory / name, f, binary=binary)
        names.append(name)
    manifest = {
        "fragments": names,
        "gt_poses": [
            {
                "rotation": [float(v) for v in g.rotation.reshape(-1)],
                "translation": [float(v) for v in g.translation],
            }
            for g in obj.gt_poses
        ],
        "scale": float(scale),
        "seed": int(seed),
    }
    text = json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    (directory / MANIFEST_NAME).write_text(text, encoding="ascii")


def load_object(directory, relabel: bool = True) -> tuple[UnassembledObject, dict]:
    """Load a saved object; returns (object, manifest dict).

    Fragments are re-centered (poses adjusted to compensate), per-fragment
    scales are reconstructed from the stored normalization scale, and
    boundary labels are recovered from assembled-coincidence unless
    relabel is False.
    """
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise DataError(f"{manifest_path}: no such file")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="ascii"))
    except (ValueError, UnicodeDecodeError) as e:
        raise DataError(f"{manifest_path}: invalid JSON ({e})")
    for key in ("fragments", "gt_poses", "scale", "seed"):
        if key not in manifest:
            raise DataError(f"{manifest_path}: missing key {key!r}")
    names = manifest["fragments"]
    raw_poses = manifest["gt_poses"]
    if len(names) != len(raw_poses):
        raise DataError(
            f"{manifest_path}: {len(names)} fragments but {len(raw_poses)} poses")

    scale = float(manifest["scale"])
    fragments = []
    poses = []
    for name, raw_pose in zip(names, raw_poses):
        f = load_ply(directory / name)
        rot = np.asarray(raw_pose["rotation"], dtype=np.float64)
        if rot.shape != (9,):
            raise DataError(f"{manifest_path}: pose rotation must have 9 entries")
        rot = rot.reshape(3, 3)
        check_rotation(rot)
        trans = np.asarray(raw_pose["translation"], dtype=np.float64)
        if trans.shape != (3,):
            raise DataError(f"{manifest_path}: pose translation must have 3 entries")
        centroid = f.positions.mean(axis=0)
        if np.abs(centroid).max() <= 1e-9:
            # already centered; keep stored coordinates bit-exact
            local = f.positions
            pose = RigidTransform(rot, trans)
        else:
            local = f.positions - centroid
            pose = RigidTransform(rot, rot @ centroid + trans)
        frag_scale = scale * float(np.linalg.norm(local, axis=1).max())
        fragments.append(replace(f, positions=local, scale=frag_scale))
        poses.append(pose)
    obj = UnassembledObject(fragments, poses)
    if relabel:
        labels = label_fracture_boundary(obj)
        obj = UnassembledObject(
            [replace(f, boundary_label=lab) for f, lab in zip(fragments, labels)],
            poses)
    return obj, manifest


def make_dataset(root, n_objects: int, n_fragments: int, n_points: int = 5000,
                 seed: int = 0, **fracture_kwargs) -> list[Path]:
    """Generate a directory of perturbed fractured objects.

    Object k lives in root/object_{k:04d} and is derived deterministically
    from (seed, k), so regeneration reproduces identical files.
    """
    from .fracture import generate_fracture, perturb

    root = Path(root)
    paths = []
    for k in range(n_objects):
        obj_seed = int(np.random.default_rng((seed, k)).integers(2**63))
        obj, scale = generate_fracture(n_fragments, n_points=n_points,
                                       seed=obj_seed, **fracture_kwargs)
        obj = perturb(obj, seed=obj_seed ^ 0xA5A5)
        out = root / f"object_{k:04d}"
        save_object(out, obj, scale, obj_seed)
        paths.append(out)
    return paths
