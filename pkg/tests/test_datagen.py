import json
import math
from collections import Counter

import numpy as np
import pytest

from nerfgraph import datagen, fields, renderer
from nerfgraph.datagen import DataConfig, FitConfig, Primitive
from conftest import TINY_DATA, TINY_FIT


def test_generate_scene_is_deterministic_and_bounded():
    for label in datagen.CLASSES:
        a = datagen.generate_scene(label, np.random.default_rng(3), "s", 8, 16)
        b = datagen.generate_scene(label, np.random.default_rng(3), "s", 8, 16)
        assert a.to_dict() == b.to_dict()
        for p in a.primitives:
            if p.shape == "box":
                extent = float(np.linalg.norm(p.size))
            else:
                extent = sum(p.size)
            assert np.linalg.norm(p.center) + extent <= 1.0
    assert [p.shape for p in datagen.generate_scene("sphere", np.random.default_rng(0)).primitives] == ["sphere"]
    assert len(datagen.generate_scene("two_spheres", np.random.default_rng(0)).primitives) == 2
    with pytest.raises(ValueError):
        datagen.generate_scene("cone", np.random.default_rng(0))


def test_scene_dict_roundtrip():
    s = datagen.generate_scene("torus", np.random.default_rng(1), "t", 8, 8)
    assert datagen.SceneSpec.from_dict(json.loads(json.dumps(s.to_dict()))).to_dict() == s.to_dict()


def test_rig_needs_eight_views():
    with pytest.raises(ValueError):
        datagen.camera_rig(7, 16)
    assert len(datagen.camera_rig(8, 16)) == 8


def test_stratified_labels():
    counts = Counter(datagen.assign_labels(100, list(datagen.CLASSES)))
    assert set(counts.values()) == {25}
    with pytest.raises(ValueError):
        datagen.assign_labels(4, ["only"])


def _sphere_scene(center, radius, resolution=64):
    spec = datagen.generate_scene("sphere", np.random.default_rng(0), "s", 8, resolution)
    spec.primitives = [Primitive("sphere", list(center), [radius], [0.8, 0.2, 0.1])]
    return spec


def test_render_gt_miss_and_center_hit():
    scene = _sphere_scene([0.1, 0.0, -0.1], 0.4, 16)
    pose = renderer.look_at([2.5, 0.3, 0.2], target=[0.1, 0.0, -0.1], width=3, height=3, focal=3.0)
    img, alpha = datagen.render_gt(scene, pose)
    assert alpha[1, 1] == 1.0
    shade = img[1, 1] / np.array([0.8, 0.2, 0.1])
    assert np.allclose(shade, shade[0]) and 0 < shade[0] <= 1
    away = renderer.look_at([2.5, 0.0, 0.0], target=[2.5, 5.0, 0.0], width=3, height=3, focal=3.0)
    img, alpha = datagen.render_gt(scene, away)
    np.testing.assert_array_equal(alpha, 0.0)
    np.testing.assert_array_equal(img, np.broadcast_to(datagen.BG_COLOR, img.shape))


def test_sphere_silhouette_area():
    r = 0.6
    scene = _sphere_scene([0, 0, 0], r, 64)
    pose = scene.poses[0]
    _, alpha = datagen.render_gt(scene, pose)
    d = float(np.linalg.norm(pose.position))
    want = math.pi * (pose.focal * r / d) ** 2
    assert abs(alpha.sum() - want) / want < 0.10


def test_torus_and_box_render_hits():
    for label in ("torus", "box"):
        s = datagen.generate_scene(label, np.random.default_rng(2), "s", 8, 16)
        _, alpha = datagen.render_gt(s, s.poses[3])
        assert 0 < alpha.mean() < 1


def test_split_counts_and_balance():
    labels = datagen.assign_labels(60, list(datagen.CLASSES))
    splits = datagen.split_scenes(labels, {"train": 0.8, "val": 0.1, "test": 0.1}, np.random.default_rng(0))
    assert Counter(splits) == {"train": 48, "val": 6, "test": 6}
    for name, frac in (("train", 0.8), ("val", 0.1), ("test", 0.1)):
        per_class = Counter(lab for lab, s in zip(labels, splits) if s == name)
        for cls in datagen.CLASSES:
            assert abs(per_class.get(cls, 0) - 15 * frac) <= 1


@pytest.mark.parametrize("n", [4, 8, 13, 60])
def test_small_splits_are_never_empty(n):
    labels = datagen.assign_labels(n, list(datagen.CLASSES))
    splits = datagen.split_scenes(labels, {"train": 0.5, "val": 0.25, "test": 0.25}, np.random.default_rng(n))
    counts = Counter(splits)
    assert all(counts[k] >= 1 for k in ("train", "val", "test"))
    assert sum(counts.values()) == n


def test_fit_nerf_learns_an_opaque_sphere():
    scene = _sphere_scene([0.05, -0.05, 0.0], 0.6, 16)
    scene.poses = datagen.camera_rig(12, 16)
    cfg = FitConfig(steps=300, lr=1e-2, rays_per_step=256, n_samples=24, eval_samples=24)
    arch = fields.mlp_arch(hidden_layers=2, hidden_dim=32, num_freqs=3)
    ck = datagen.fit_nerf(scene, arch, cfg.steps, np.random.default_rng(0), cfg)
    assert ck.metadata["steps"] == 300 and math.isfinite(ck.metadata["final_loss"])
    _, s_center = fields.nerf_forward(ck, np.array([0.05, -0.05, 0.0]))
    corners = np.array([[x, y, z] for x in (-.55, .55) for y in (-.55, .55) for z in (-.55, .55)])
    _, s_corner = fields.nerf_forward(ck, corners)
    assert s_center > 10 * s_corner.mean()


def test_preset_archs():
    archs, variants = datagen.preset_archs(DataConfig(unseen_variants=True))
    assert list(archs) == ["MLP", "TRI", "HASH"] and len(variants) == 7
    archs, variants = datagen.preset_archs(DataConfig(families=["TRI"], unseen_variants=True))
    assert list(archs) == ["TRI"] and all(v.family == "TRI" for v in variants.values())
    archs, _ = datagen.preset_archs(DataConfig(preset="table7"))
    assert archs["MLP"].mlp_hidden_dim == 64
    with pytest.raises(ValueError):
        datagen.preset_archs(DataConfig(preset="huge"))


def test_tiny_dataset_layout(tiny_dataset):
    m = datagen.load_manifest(tiny_dataset)
    assert m["families"] == ["MLP", "TRI", "HASH"]
    ids = [s["id"] for s in m["scenes"]]
    assert len(ids) == len(set(ids)) == 8
    for s in m["scenes"]:
        expect = set(m["families"]) | (set(m["variants"]) if s["split"] == "test" else set())
        assert set(s["checkpoints"]) == expect
        for arch, rel in s["checkpoints"].items():
            assert (tiny_dataset / rel).exists()
    n_ckpt = sum(len(s["checkpoints"]) for s in m["scenes"])
    assert n_ckpt == 8 * 3 + sum(s["split"] == "test" for s in m["scenes"]) * 7


def test_checkpoints_roundtrip_bit_identical(tiny_dataset, tmp_path):
    m = datagen.load_manifest(tiny_dataset)
    rel = m["scenes"][0]["checkpoints"]["HASH"]
    ck = fields.load_checkpoint(tiny_dataset / rel)
    ck.save(tmp_path / "again.ngc")
    assert (tmp_path / "again.ngc").read_bytes() == (tiny_dataset / rel).read_bytes()
    assert ck.metadata["label"] == m["scenes"][0]["label"]


def test_build_is_deterministic(tmp_path):
    cfg = DataConfig(**dict(TINY_DATA, num_scenes=4, unseen_variants=False))
    archs = {"MLP": datagen.preset_archs(cfg)[0]["MLP"]}
    a = datagen.build_dataset(tmp_path / "a", cfg, FitConfig(**TINY_FIT), archs)
    b = datagen.build_dataset(tmp_path / "b", cfg, FitConfig(**TINY_FIT), archs)
    assert a == b
    for s in a["scenes"]:
        rel = s["checkpoints"]["MLP"]
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_quality_gate_excludes_failed_scenes():
    manifest = {"families": ["MLP"], "excluded": [],
                "scenes": [{"id": "a", "fit": {"MLP": {"passed_gate": True}}},
                           {"id": "b", "fit": {"MLP": {"passed_gate": False}}}]}
    datagen.apply_quality_gate(manifest)
    assert [s["id"] for s in manifest["scenes"]] == ["a"]
    assert manifest["excluded"] == [{"id": "b", "failed": ["MLP"]}]
