import json

import numpy as np
import pytest

from reassembly.errors import ConfigError, DataError
from reassembly.fragments import (
    Fragment,
    UnassembledObject,
    ValueNoise3,
    anchor_index,
    estimate_normals,
    fps_indices,
    generate_fracture,
    label_fracture_boundary,
    load_object,
    load_ply,
    make_dataset,
    perturb,
    proportional_counts,
    sample_object_points,
    sample_points,
    save_object,
    save_ply,
)
from reassembly.liegroup import RigidTransform, check_rotation


def unit_cube_fragment(n=200, seed=0, centered=True):
    rng = np.random.default_rng(seed)
    pos = rng.uniform(-1.0, 1.0, size=(n, 3))
    if centered:
        pos -= pos.mean(axis=0)
    nrm = rng.normal(size=(n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    col = rng.uniform(0.0, 1.0, size=(n, 3))
    return Fragment(pos, nrm, col)


# ---------------------------------------------------------------- data model


def test_fragment_shape_mismatch_rejected():
    f = unit_cube_fragment(50)
    with pytest.raises(ValueError):
        Fragment(f.positions, f.normals[:-1], f.colors)
    with pytest.raises(ValueError):
        Fragment(f.positions, f.normals, f.colors[:, :2])


def test_fragment_validate_centering():
    f = unit_cube_fragment(100)
    f.validate()
    shifted = Fragment(f.positions + 0.5, f.normals, f.colors)
    with pytest.raises(ValueError):
        shifted.validate()
    shifted.validate(centered=False)


def test_fragment_validate_normals_and_colors():
    f = unit_cube_fragment(60)
    bad_n = Fragment(f.positions, f.normals * 2.0, f.colors)
    with pytest.raises(ValueError):
        bad_n.validate()
    bad_c = Fragment(f.positions, f.normals, f.colors + 2.0)
    with pytest.raises(ValueError):
        bad_c.validate()


def test_take_subsets_all_channels():
    f = unit_cube_fragment(80)
    f.boundary_label = np.arange(80).astype(np.uint8) % 2
    idx = np.array([3, 1, 40])
    sub = f.take(idx)
    assert np.array_equal(sub.positions, f.positions[idx])
    assert np.array_equal(sub.normals, f.normals[idx])
    assert np.array_equal(sub.colors, f.colors[idx])
    assert np.array_equal(sub.boundary_label, f.boundary_label[idx])


def test_assembled_positions_applies_poses():
    f = unit_cube_fragment(30)
    g = RigidTransform(np.eye(3), np.array([1.0, 2.0, 3.0]))
    obj = UnassembledObject([f], [g])
    assert np.allclose(obj.assembled_positions(), f.positions + g.translation)


def test_anchor_index_prefers_largest():
    big = unit_cube_fragment(100, seed=1)
    small = unit_cube_fragment(40, seed=2)
    obj = UnassembledObject([small, big])
    assert anchor_index(obj) == 1


def test_anchor_index_tie_is_deterministic():
    a = unit_cube_fragment(50, seed=3)
    b = unit_cube_fragment(50, seed=4)
    i1 = anchor_index(UnassembledObject([a, b]))
    i2 = anchor_index(UnassembledObject([a, b]))
    assert i1 == i2
    # order-independence of the chosen fragment's content
    j = anchor_index(UnassembledObject([b, a]))
    assert {0, 1} == {i1, 1 - j} or i1 == 1 - j


# ---------------------------------------------------------------- sampling


def test_fps_indices_exact_when_enough():
    pts = np.random.default_rng(0).normal(size=(10, 3))
    assert np.array_equal(fps_indices(pts, 10), np.arange(10))
    assert np.array_equal(fps_indices(pts, 25), np.arange(10))


def test_fps_spreads_to_cube_corners():
    # 8 clusters at cube corners plus fill near the center: the first 8
    # selections must land one-per-corner.
    rng = np.random.default_rng(5)
    corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], float)
    cloud = [corners + rng.normal(scale=0.01, size=(8, 3)) for _ in range(4)]
    filler = rng.normal(scale=0.1, size=(200, 3))
    pts = np.concatenate(cloud + [filler])
    idx = fps_indices(pts, 8)
    picked = pts[idx]
    owners = {int(np.argmin(np.linalg.norm(corners - p, axis=1))) for p in picked}
    assert owners == set(range(8))


def test_fps_deterministic():
    pts = np.random.default_rng(9).normal(size=(300, 3))
    assert np.array_equal(fps_indices(pts, 50), fps_indices(pts, 50))


def test_fps_min_distance_beats_random():
    # farthest-point picks are better spread than the first-k points
    pts = np.random.default_rng(11).normal(size=(500, 3))

    def min_pairwise(p):
        d = np.linalg.norm(p[:, None] - p[None, :], axis=-1)
        return d[np.triu_indices(len(p), 1)].min()

    assert min_pairwise(pts[fps_indices(pts, 32)]) > min_pairwise(pts[:32])


def test_proportional_counts_sums_and_floors():
    sizes = [100, 50, 25, 25]
    counts = proportional_counts(sizes, 40)
    assert sum(counts) == 40
    assert counts == [20, 10, 5, 5]
    counts = proportional_counts([1000, 3, 3], 10)
    assert sum(counts) == 10
    assert min(counts) >= 1


def test_sample_points_is_exact_subset():
    f = unit_cube_fragment(300)
    sub = sample_points(f, 64)
    assert len(sub) == 64
    orig = {tuple(p) for p in f.positions}
    for p in sub.positions:
        assert tuple(p) in orig
    # deterministic regardless of seed argument
    again = sample_points(f, 64, seed=99)
    assert np.array_equal(sub.positions, again.positions)


def test_sample_object_points_preserves_assembly():
    obj, _ = generate_fracture(3, n_points=1500, seed=21)
    obj = perturb(obj, seed=1)
    sub = sample_object_points(obj, 300, seed=0)
    assert sum(len(f) for f in sub.fragments) == 300
    full = obj.assembled_positions()
    small = sub.assembled_positions()
    # every subsampled assembled point exists in the full assembly
    from scipy.spatial import cKDTree

    d, _ = cKDTree(full).query(small)
    assert d.max() < 1e-9
    for f in sub.fragments:
        f.validate()


# ---------------------------------------------------------------- value noise


def test_value_noise_deterministic_and_bounded():
    n = ValueNoise3(7, frequency=2.0, octaves=3)
    pts = np.random.default_rng(1).normal(size=(500, 3))
    a, b = n(pts), n(pts)
    assert np.array_equal(a, b)
    assert a.min() >= 0.0 and a.max() <= 1.0


def test_value_noise_seed_changes_field():
    pts = np.random.default_rng(2).normal(size=(100, 3))
    assert not np.allclose(ValueNoise3(1)(pts), ValueNoise3(2)(pts))


def test_value_noise_is_smooth():
    n = ValueNoise3(3, frequency=1.5)
    base = np.random.default_rng(3).normal(size=(200, 3))
    step = 1e-5
    delta = np.abs(n(base + step) - n(base))
    # gradient of quintic-blended noise at frequency f is bounded by ~2f
    assert delta.max() < 10.0 * step


# ---------------------------------------------------------------- fracture


def test_generate_fracture_counts_and_validity():
    obj, scale = generate_fracture(5, n_points=3000, seed=13)
    assert len(obj.fragments) == 5
    assert scale > 0.0
    total_exterior = sum(int((f.boundary_label == 0).sum()) for f in obj.fragments)
    assert total_exterior == 3000
    for f in obj.fragments:
        f.validate()
        assert f.boundary_label.any(), "every fragment touches a fracture surface"
        assert 0.15 <= f.colors.min() and f.colors.max() <= 0.85


def test_generate_fracture_normalized_to_unit_radius():
    obj, _ = generate_fracture(3, n_points=2000, seed=17)
    r = np.linalg.norm(obj.assembled_positions(), axis=1).max()
    assert abs(r - 1.0) < 1e-9


def test_generate_fracture_deterministic():
    a, sa = generate_fracture(3, n_points=1200, seed=23)
    b, sb = generate_fracture(3, n_points=1200, seed=23)
    assert sa == sb
    for fa, fb in zip(a.fragments, b.fragments):
        assert np.array_equal(fa.positions, fb.positions)
        assert np.array_equal(fa.colors, fb.colors)


def test_generate_fracture_seed_matters():
    a, _ = generate_fracture(3, n_points=1200, seed=1)
    b, _ = generate_fracture(3, n_points=1200, seed=2)
    assert len(a.fragments[0]) != len(b.fragments[0]) or not np.allclose(
        a.fragments[0].positions, b.fragments[0].positions)


def test_fracture_reassembles_exactly():
    # ground-truth poses must bring interface copies into coincidence
    obj, _ = generate_fracture(4, n_points=2500, seed=29)
    obj = perturb(obj, seed=5)
    from scipy.spatial import cKDTree

    assembled = [
        (g.rotation @ f.positions.T).T + g.translation
        for f, g in zip(obj.fragments, obj.gt_poses)
    ]
    for i in range(len(assembled)):
        fi = obj.fragments[i]
        others = np.concatenate([assembled[j] for j in range(len(assembled)) if j != i])
        d, _ = cKDTree(others).query(assembled[i][fi.boundary_label == 1])
        assert d.max() < 1e-9


def test_fracture_colors_continuous_across_cut():
    # paired interface points on opposite fragments share identical colors
    obj, _ = generate_fracture(2, n_points=1500, seed=31)
    a, b = obj.fragments
    pa = a.positions + obj.gt_poses[0].translation
    pb = b.positions + obj.gt_poses[1].translation
    from scipy.spatial import cKDTree

    ia = np.where(a.boundary_label == 1)[0]
    d, j = cKDTree(pb).query(pa[ia])
    assert d.max() < 1e-9
    assert np.allclose(a.colors[ia], b.colors[j], atol=1e-12)


def test_fracture_scale_recomputable():
    obj, scale = generate_fracture(3, n_points=1500, seed=37)
    for f in obj.fragments:
        s = scale * float(np.linalg.norm(f.positions, axis=1).max())
        assert abs(s - f.scale) < 1e-12


def test_fracture_interface_normals_oppose():
    obj, _ = generate_fracture(2, n_points=1500, seed=41)
    a, b = obj.fragments
    pa = a.positions + obj.gt_poses[0].translation
    pb = b.positions + obj.gt_poses[1].translation
    from scipy.spatial import cKDTree

    ia = np.where(a.boundary_label == 1)[0]
    _, j = cKDTree(pb).query(pa[ia])
    dots = np.einsum("ij,ij->i", a.normals[ia], b.normals[j])
    assert np.allclose(dots, -1.0, atol=1e-9)


def test_fracture_min_frac_unreachable_raises():
    with pytest.raises(DataError):
        generate_fracture(2, n_points=1000, seed=3, min_frac=0.6, max_tries=20)


def test_fracture_rejects_bad_args():
    with pytest.raises(ConfigError):
        generate_fracture(1, n_points=1000)
    with pytest.raises(ConfigError):
        generate_fracture(2, n_points=1000, primitive="torus")
    with pytest.raises(ConfigError):
        generate_fracture(2, n_points=10)


@pytest.mark.parametrize("kind", ["cube", "sphere", "cylinder", "slab"])
def test_fracture_all_primitives(kind):
    obj, _ = generate_fracture(3, n_points=1800, seed=43, primitive=kind)
    assert len(obj.fragments) == 3
    for f in obj.fragments:
        f.validate()


def test_perturb_keeps_assembly_and_centering():
    obj, _ = generate_fracture(3, n_points=1500, seed=47)
    pert = perturb(obj, seed=11)
    a = np.sort(obj.assembled_positions().ravel())
    b = np.sort(pert.assembled_positions().ravel())
    assert np.abs(a - b).max() < 1e-12
    for f, g in zip(pert.fragments, pert.gt_poses):
        f.validate()
        check_rotation(g.rotation)
    # the perturbed clouds really are rotated
    assert not np.allclose(pert.fragments[0].positions, obj.fragments[0].positions)


def test_label_fracture_boundary_matches_construction():
    obj, _ = generate_fracture(4, n_points=2000, seed=53)
    obj = perturb(obj, seed=2)
    labels = label_fracture_boundary(obj)
    for lab, f in zip(labels, obj.fragments):
        assert np.array_equal(lab, f.boundary_label)


def test_label_fracture_boundary_bruteforce_oracle():
    obj, _ = generate_fracture(2, n_points=600, seed=59)
    labels = label_fracture_boundary(obj, eps=1e-6)
    assembled = [
        (g.rotation @ f.positions.T).T + g.translation
        for f, g in zip(obj.fragments, obj.gt_poses)
    ]
    for i, j in ((0, 1), (1, 0)):
        d = np.linalg.norm(assembled[i][:, None] - assembled[j][None, :], axis=-1)
        expect = (d.min(axis=1) <= 1e-6).astype(np.uint8)
        assert np.array_equal(labels[i], expect)


# ---------------------------------------------------------------- PLY i/o


def test_ply_binary_roundtrip_bitexact(tmp_path):
    f = unit_cube_fragment(120, seed=6)
    p = tmp_path / "f.ply"
    save_ply(p, f, binary=True)
    g = load_ply(p)
    assert np.array_equal(g.positions, f.positions)
    assert np.allclose(g.normals, f.normals, atol=1e-6)
    assert np.allclose(g.colors, f.colors, atol=1e-7)
    assert not g.colors_defaulted


def test_ply_ascii_roundtrip(tmp_path):
    f = unit_cube_fragment(50, seed=7)
    p = tmp_path / "f.ply"
    save_ply(p, f, binary=False)
    g = load_ply(p)
    assert np.array_equal(g.positions, f.positions)  # repr roundtrips float64
    assert np.allclose(g.normals, f.normals, atol=1e-6)


def test_ply_uchar_colors_scaled(tmp_path):
    p = tmp_path / "c.ply"
    body = (
        "ply\nformat ascii 1.0\nelement vertex 2\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
        "0 0 0 255 0 51\n1 0 0 0 255 102\n"
    )
    p.write_text(body)
    f = load_ply(p)
    assert np.allclose(f.colors[0], [1.0, 0.0, 51 / 255])
    assert np.allclose(f.colors[1], [0.0, 1.0, 102 / 255])


def test_ply_missing_colors_defaulted(tmp_path):
    p = tmp_path / "g.ply"
    p.write_text(
        "ply\nformat ascii 1.0\nelement vertex 1\n"
        "property float x\nproperty float y\nproperty float z\n"
        "end_header\n0 0 0\n")
    f = load_ply(p)
    assert f.colors_defaulted
    assert np.allclose(f.colors, 0.5)


def test_ply_normal_estimation_on_sphere(tmp_path):
    # points on a sphere: estimated normals should be radial within ~15 deg
    rng = np.random.default_rng(8)
    u = rng.normal(size=(800, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    est = estimate_normals(u)
    dots = np.einsum("ij,ij->i", est, u)
    assert dots.min() > 0.0  # oriented outward
    assert np.quantile(np.abs(dots), 0.05) > np.cos(np.deg2rad(15.0))


def test_ply_errors_have_context(tmp_path):
    p = tmp_path / "bad.ply"
    p.write_text("not a ply\n")
    with pytest.raises(DataError, match="not a PLY"):
        load_ply(p)

    p.write_text(
        "ply\nformat ascii 1.0\nelement vertex 2\n"
        "property float x\nproperty float y\nproperty float z\n"
        "end_header\n0 0 0\n")
    with pytest.raises(DataError, match="expected 2 vertex lines"):
        load_ply(p)

    p.write_text(
        "ply\nformat ascii 1.0\nelement vertex 1\n"
        "property float x\nproperty float y\nproperty float z\n"
        "end_header\n0 zero 0\n")
    with pytest.raises(DataError, match="vertex line 1"):
        load_ply(p)

    p.write_text(
        "ply\nformat ascii 1.0\nelement face 1\nproperty float x\n"
        "element vertex 1\nproperty float x\nproperty float y\nproperty float z\n"
        "end_header\n0 0 0\n")
    with pytest.raises(DataError, match="vertex element must come first"):
        load_ply(p)

    with pytest.raises(DataError, match="no such file"):
        load_ply(tmp_path / "missing.ply")


def test_ply_truncated_binary(tmp_path):
    f = unit_cube_fragment(20, seed=9)
    p = tmp_path / "t.ply"
    save_ply(p, f, binary=True)
    raw = p.read_bytes()
    p.write_bytes(raw[:-10])
    with pytest.raises(DataError, match="truncated"):
        load_ply(p)


def test_ply_nonfinite_rejected(tmp_path):
    p = tmp_path / "n.ply"
    p.write_text(
        "ply\nformat ascii 1.0\nelement vertex 1\n"
        "property float x\nproperty float y\nproperty float z\n"
        "end_header\nnan 0 0\n")
    with pytest.raises(DataError, match="non-finite"):
        load_ply(p)


# ---------------------------------------------------------------- manifests


def test_save_load_object_roundtrip(tmp_path):
    obj, scale = generate_fracture(3, n_points=1200, seed=61)
    obj = perturb(obj, seed=4)
    save_object(tmp_path / "o", obj, scale, 61)
    re, manifest = load_object(tmp_path / "o")
    assert manifest["seed"] == 61
    assert manifest["scale"] == pytest.approx(scale)
    assert len(re.fragments) == 3
    drift = np.abs(re.assembled_positions() - obj.assembled_positions()).max()
    assert drift < 1e-12
    for fa, fb in zip(re.fragments, obj.fragments):
        assert np.array_equal(fa.positions, fb.positions)
        assert np.array_equal(fa.boundary_label, fb.boundary_label)
        assert abs(fa.scale - fb.scale) < 1e-9


def test_manifest_bytes_deterministic(tmp_path):
    obj, scale = generate_fracture(2, n_points=800, seed=67)
    save_object(tmp_path / "a", obj, scale, 67)
    save_object(tmp_path / "b", obj, scale, 67)
    a = (tmp_path / "a" / "manifest.json").read_bytes()
    b = (tmp_path / "b" / "manifest.json").read_bytes()
    assert a == b
    pa = sorted((tmp_path / "a").glob("*.ply"))
    pb = sorted((tmp_path / "b").glob("*.ply"))
    for x, y in zip(pa, pb):
        assert x.read_bytes() == y.read_bytes()


def test_manifest_keys_and_errors(tmp_path):
    obj, scale = generate_fracture(2, n_points=800, seed=71)
    save_object(tmp_path / "o", obj, scale, 71)
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert set(manifest) == {"fragments", "gt_poses", "scale", "seed"}
    assert len(manifest["gt_poses"][0]["rotation"]) == 9

    with pytest.raises(DataError, match="no such file"):
        load_object(tmp_path / "nowhere")

    broken = dict(manifest)
    del broken["scale"]
    (tmp_path / "o" / "manifest.json").write_text(json.dumps(broken))
    with pytest.raises(DataError, match="missing key"):
        load_object(tmp_path / "o")


def test_make_dataset_layout_and_determinism(tmp_path):
    paths = make_dataset(tmp_path / "d1", 3, 3, n_points=900, seed=5)
    assert [p.name for p in paths] == ["object_0000", "object_0001", "object_0002"]
    make_dataset(tmp_path / "d2", 3, 3, n_points=900, seed=5)
    for k in range(3):
        a = (tmp_path / "d1" / f"object_{k:04d}" / "manifest.json").read_bytes()
        b = (tmp_path / "d2" / f"object_{k:04d}" / "manifest.json").read_bytes()
        assert a == b
    # distinct objects within the dataset
    m0 = json.loads((tmp_path / "d1" / "object_0000" / "manifest.json").read_text())
    m1 = json.loads((tmp_path / "d1" / "object_0001" / "manifest.json").read_text())
    assert m0["seed"] != m1["seed"]


def test_loaded_objects_have_randomized_orientations(tmp_path):
    make_dataset(tmp_path / "d", 1, 3, n_points=900, seed=6)
    obj, _ = load_object(tmp_path / "d" / "object_0000")
    rots = [g.rotation for g in obj.gt_poses]
    assert any(np.abs(r - np.eye(3)).max() > 0.1 for r in rots)
