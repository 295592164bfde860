import json
import math
from collections import Counter

import numpy as np
import pytest

from nerfgraph import renderer, training
from nerfgraph.adkernel import Tensor, backward, no_grad, ops
from nerfgraph.decoder import Decoder, DecoderConfig
from nerfgraph.training import Framework, NerfDataset, RayPack, TrainConfig, siglip_loss
from conftest import TINY_FRAMEWORK, numeric_grad, rel_err


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def tiny_train_config(**kw) -> TrainConfig:
    return TrainConfig(**{**json.loads(json.dumps(TINY_FRAMEWORK)), **kw})


def strip_wall(entries):
    return [{k: v for k, v in e.items() if k != "wall_time"} for e in entries]


# -- siglip ---------------------------------------------------------------------------------

def test_siglip_single_pair_is_ln2():
    u = np.array([[1.0, 0.0]])
    assert siglip_loss(u, u, 10.0, -10.0).item() == pytest.approx(math.log(2), abs=1e-12)


def test_siglip_saturates_to_zero():
    u = np.array([[0.0, 1.0, 0.0]])
    vals = [siglip_loss(u, u, t, 0.0).item() for t in (1.0, 10.0, 100.0, 1000.0)]
    assert vals == sorted(vals, reverse=True)
    assert vals[-1] < 1e-12


def test_siglip_two_orthonormal_pairs_by_hand():
    u = np.eye(2)
    want = 0.5 * (2 * math.log(2) + 2 * math.log1p(math.exp(-10)))
    assert siglip_loss(u, u, 10.0, -10.0).item() == pytest.approx(want, abs=1e-9)
    assert want == pytest.approx(0.693192, abs=1e-6)


def test_siglip_joint_permutation_symmetry(rng):
    u, v = unit_rows(rng, 6, 5), unit_rows(rng, 6, 5)
    base = siglip_loss(u, v, 3.0, -1.5).item()
    for _ in range(5):
        p = rng.permutation(6)
        assert siglip_loss(u[p], v[p], 3.0, -1.5).item() == pytest.approx(base, rel=1e-13)


def test_siglip_rejects_bad_inputs():
    with pytest.raises(ValueError, match="L2-normalized"):
        siglip_loss(np.array([[2.0, 0.0]]), np.array([[1.0, 0.0]]), 10.0, -10.0)
    with pytest.raises(ValueError, match="equal-shape"):
        siglip_loss(np.eye(2), np.eye(3)[:, :2], 10.0, -10.0)


@pytest.mark.parametrize("seed", range(5))
def test_siglip_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    y = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    t = Tensor(np.array(rng.uniform(1, 10)), requires_grad=True)
    b = Tensor(np.array(rng.uniform(-5, 0)), requires_grad=True)

    def loss():
        return siglip_loss(ops.l2_normalize(x, axis=1), ops.l2_normalize(y, axis=1), t, b)

    backward(loss())
    for leaf in (t, b, x, y):
        def f(val, leaf=leaf):
            saved = leaf.data.copy()
            leaf.data[...] = val
            out = loss().item()
            leaf.data[...] = saved
            return out
        assert rel_err(leaf.grad, numeric_grad(f, leaf.data.copy())) < 1e-6


# -- rendering loss -------------------------------------------------------------------------

def small_decoder(seed=0):
    return Decoder(DecoderConfig(freq_dim=12, hidden_dim=8, hidden_layers=2, skip_into_layer=1, embed_dim=4),
                   np.random.default_rng(seed), dtype=np.float64)


def ray_pack(rng, n_nerfs=2, rays=10, n_samples=6, target=None):
    pose = renderer.look_at([0.3, -2.5, 0.4], width=5, height=4, focal=4.0)
    o, d = renderer.pixel_rays(pose, rng.choice(pose.num_pixels, rays, replace=False))
    o, d = np.tile(o, (n_nerfs, 1)), np.tile(d, (n_nerfs, 1))
    near, far = renderer.sphere_bounds(o, d)
    depths = renderer.sample_depths(near, far, n_samples, rng)
    fg = rng.random(len(o)) > 0.5
    owner = np.repeat(np.arange(n_nerfs), rays)
    weights = np.concatenate([renderer.render_loss_weights(fg[owner == j]) / n_nerfs for j in range(n_nerfs)])
    tgt = rng.uniform(size=(len(o), 3)) if target is None else target
    return RayPack(o, d, depths, tgt, weights, owner), fg


def test_rendering_loss_zero_when_decoder_matches_target(rng):
    dec = small_decoder()
    emb = Tensor(rng.normal(size=(2, 4)))
    rays, _ = ray_pack(rng)
    with no_grad():
        pred, _ = renderer.render_rays(dec.field(emb, rays.owner, 6), rays.origins, rays.dirs, depths=rays.depths)
    rays.target = pred.data.copy()
    assert training.rendering_loss_batch(dec, emb, rays).item() == 0.0
    rays.target = rays.target + 0.01
    assert training.rendering_loss_batch(dec, emb, rays).item() > 0.0


def test_rendering_loss_non_negative(rng):
    dec = small_decoder(3)
    for _ in range(10):
        rays, _ = ray_pack(rng)
        assert training.rendering_loss_batch(dec, Tensor(rng.normal(size=(2, 4))), rays).item() >= 0.0


def test_one_pair_is_mean_of_two_per_nerf_losses(rng):
    dec = small_decoder(1)
    emb = Tensor(rng.normal(size=(2, 4)))
    rays, fg = ray_pack(rng)
    total = training.rendering_loss_batch(dec, emb, rays).item()
    per = []
    for j in range(2):
        sel = rays.owner == j
        depths = (rays.depths[0][sel], rays.depths[1][sel])
        field = dec.field(ops.getitem(emb, slice(j, j + 1)), np.zeros(sel.sum(), int), 6)
        pred, _ = renderer.render_rays(field, rays.origins[sel], rays.dirs[sel], depths=depths)
        per.append(renderer.render_loss(pred, rays.target[sel], fg[sel]).item())
    assert total == pytest.approx(np.mean(per), rel=1e-12)


# -- batching -------------------------------------------------------------------------------

def test_pair_batches_invariants():
    ids = [f"s{i}" for i in range(10)]
    fams = ["MLP", "TRI", "HASH"]
    seen = Counter()
    for epoch in range(20):
        batches = training.pair_batches(ids, fams, 4, np.random.default_rng(epoch))
        assert [len(b) for b in batches] == [4, 4, 2]
        flat = [x for b in batches for x in b]
        assert sorted(s for s, _, _ in flat) == sorted(ids)
        for b in batches:
            assert len({s for s, _, _ in b}) == len(b)
        for _, a, c in flat:
            assert a != c and (a, c) in training.FAMILY_PAIRS
            seen[(a, c)] += 1
    assert set(seen) == set(training.FAMILY_PAIRS)
    single = training.pair_batches(ids, ["MLP"], 8, np.random.default_rng(0))
    assert all(c is None for b in single for _, _, c in b)


def test_family_pairs_subsets():
    assert training.family_pairs(["MLP", "HASH"]) == [("MLP", "HASH")]
    assert training.family_pairs(["HASH"]) == []
    assert len(training.family_pairs(["MLP", "TRI", "HASH"])) == 3


# -- config ---------------------------------------------------------------------------------

def test_config_defaults_and_validation():
    c = TrainConfig()
    assert c.lam == 2e-2 and (c.t_init, c.b_init) == (10.0, -10.0)
    assert (c.batch_size, c.max_lr, c.weight_decay, c.rays_per_nerf) == (8, 1e-4, 1e-2, 512)
    assert TrainConfig(mode="R+C").mode == "rc"
    assert TrainConfig(encoder={"embed_dim": 32}).decoder.embed_dim == 32
    with pytest.raises(ValueError):
        TrainConfig(lam=-1.0)
    with pytest.raises(ValueError, match="unknown loss mode"):
        TrainConfig(mode="x")


def test_paper_parity_config():
    p = training.paper_config()
    assert (p.epochs, p.batch_size, p.max_lr, p.weight_decay, p.lam) == (250, 8, 1e-4, 1e-2, 2e-2)
    assert p.encoder.embed_dim == 1024 and p.decoder.embed_dim == 1024 and p.decoder.hidden_dim == 1024


def test_framework_scalars_initialised():
    fw = Framework(tiny_train_config())
    assert (fw.t, fw.b) == (10.0, -10.0)
    assert not any(n.startswith("dec.") for n, _ in fw.named("c"))
    assert not any(n.startswith("siglip.") for n, _ in fw.named("r"))


# -- losses on real data --------------------------------------------------------------------

def test_mode_c_does_no_rendering(tiny_dataset, monkeypatch):
    ds = NerfDataset(tiny_dataset)
    cfg = tiny_train_config(mode="c")
    fw = Framework(cfg)
    batch = training.pair_batches(ds.scenes("train"), ds.families, 4, np.random.default_rng(0))[0]

    def forbidden(*a, **k):
        raise AssertionError("rendering requested in mode c")
    monkeypatch.setattr(training, "nerf_targets", forbidden)
    out = training.batch_losses(fw, ds, batch, cfg, np.random.default_rng(0))
    assert out["L_R"] is None and out["L_C"] is not None
    backward(out["total"])
    assert all(p.grad is None for _, p in fw.decoder.params.items())
    assert fw.scalars["t"].grad is not None


def test_mode_rc_combines_with_lambda(tiny_dataset):
    ds = NerfDataset(tiny_dataset)
    cfg = tiny_train_config(mode="rc", lam=0.5)
    fw = Framework(cfg)
    batch = training.pair_batches(ds.scenes("train"), ds.families, 4, np.random.default_rng(0))[0]
    out = training.batch_losses(fw, ds, batch, cfg, np.random.default_rng(0))
    assert out["total"].item() == pytest.approx(out["L_R"].item() + 0.5 * out["L_C"].item(), rel=1e-6)
    backward(out["total"])
    assert any(p.grad is not None and np.any(p.grad) for _, p in fw.decoder.params.items())


def test_nerf_targets_reproduce_the_nerf(tiny_dataset):
    ds = NerfDataset(tiny_dataset)
    sid = ds.scenes("train")[0]
    rays = training.nerf_targets(ds, [(sid, "TRI"), (sid, "MLP")], 16, 8, np.random.default_rng(0))
    assert rays.target.shape == (32, 3) and rays.weights.sum() == pytest.approx(1.0)
    sel = rays.owner == 0
    with no_grad():
        color, _ = renderer.render_rays(ds.field(sid, "TRI"), rays.origins[sel], rays.dirs[sel],
                                        depths=(rays.depths[0][sel], rays.depths[1][sel]))
    np.testing.assert_allclose(rays.target[sel], color.data, rtol=1e-6)


# -- training loop --------------------------------------------------------------------------

def test_training_is_deterministic_and_logs(tiny_dataset, tmp_path):
    ds = NerfDataset(tiny_dataset)
    cfg = tiny_train_config()
    a = training.train_framework(ds, cfg, tmp_path / "a")
    b = training.train_framework(NerfDataset(tiny_dataset), cfg, tmp_path / "b")
    assert a.completed and len(a.log) == 2
    assert strip_wall(a.log) == strip_wall(b.log)
    assert (tmp_path / "a/encoder.ngc").read_bytes() == (tmp_path / "b/encoder.ngc").read_bytes()
    lines = [json.loads(x) for x in (tmp_path / "a" / training.LOG_FILE).read_text().splitlines()]
    assert strip_wall(lines) == strip_wall(a.log)
    for e in lines:
        assert {"step", "L_R", "L_C", "total", "lr", "t", "b", "wall_time"} <= set(e)
        assert e["L_R"] is not None and e["L_C"] is not None
    assert a.framework.t != 10.0


def test_resume_replays_identical_losses(tiny_dataset, tmp_path):
    cfg = tiny_train_config(epochs=3)
    full = training.train_framework(NerfDataset(tiny_dataset), cfg, tmp_path / "full")
    part = training.train_framework(NerfDataset(tiny_dataset), cfg, tmp_path / "part", stop_after_epoch=1)
    assert not part.completed and not (tmp_path / "part/encoder.ngc").exists()
    done = training.train_framework(NerfDataset(tiny_dataset), cfg, tmp_path / "part", resume=True)
    assert done.completed
    assert strip_wall(done.log) == strip_wall(full.log)
    assert (tmp_path / "part/encoder.ngc").read_bytes() == (tmp_path / "full/encoder.ngc").read_bytes()
    with pytest.raises(training.TrainingError, match="config differs"):
        training.train_framework(NerfDataset(tiny_dataset), tiny_train_config(epochs=4), tmp_path / "part",
                                 resume=True)


def test_single_architecture_modes(tiny_dataset):
    ds = NerfDataset(tiny_dataset, families=["MLP"])
    for mode in ("c", "rc"):
        with pytest.raises(ValueError, match="no positive pairs"):
            training.train_framework(ds, tiny_train_config(mode=mode))
    res = training.train_framework(ds, tiny_train_config(mode="r", epochs=1))
    assert all(e["L_C"] is None for e in res.log)


def test_non_finite_loss_aborts_with_last_good(tiny_dataset, tmp_path, monkeypatch):
    def nan_losses(*a, **k):
        return {"L_R": None, "L_C": None, "total": Tensor(np.array(np.nan))}
    monkeypatch.setattr(training, "batch_losses", nan_losses)
    with pytest.raises(training.TrainingError, match="non-finite"):
        training.train_framework(NerfDataset(tiny_dataset), tiny_train_config(), tmp_path)
    assert (tmp_path / "last_good.ngc").exists()
