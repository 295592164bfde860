"""Framework training: paired NeRF batches, rendering and SigLIP losses, AdamW with one-cycle.

Losses per step, for a batch of |B| scenes each contributing two NeRFs of
different architectures:

* rendering: the decoder, conditioned on each NeRF's embedding, renders the
  same rays as the NeRF itself; per-NeRF fg/bg-weighted smooth-L1 averaged
  over the 2|B| NeRFs.
* contrastive: ``-(1/|B|) sum_jk log sigmoid(l_jk (t u_j.v_k + b))`` with
  ``l_jk = +1`` on the diagonal and -1 elsewhere.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ngc, renderer
from .adkernel import AdamState, ParamSet, Tensor, adamw_step, backward, no_grad, onecycle_lr, ops
from .datagen import SceneSpec, load_manifest
from .decoder import PAPER_DECODER, Decoder, DecoderConfig
from .fields import NerfCheckpoint, NerfField
from .gmn import PAPER_ENCODER, EncoderConfig, GraphEncoder
from .paramgraph import ParamGraph, checkpoint_to_graph

log = logging.getLogger(__name__)

MODES = ("r", "rc", "c")
_MODE_ALIASES = {"r": "r", "rc": "rc", "c": "c", "r+c": "rc"}
FAMILY_PAIRS = (("MLP", "TRI"), ("TRI", "HASH"), ("MLP", "HASH"))


class TrainingError(RuntimeError):
    pass


def normalize_mode(mode: str) -> str:
    try:
        return _MODE_ALIASES[mode.lower()]
    except KeyError:
        raise ValueError(f"unknown loss mode {mode!r}; expected one of r, rc, c") from None


@dataclass
class TrainConfig:
    mode: str = "rc"
    epochs: int = 100
    batch_size: int = 8
    max_lr: float = 1e-4
    weight_decay: float = 1e-2
    lam: float = 2e-2
    rays_per_nerf: int = 512
    n_samples: int = 32
    t_init: float = 10.0
    b_init: float = -10.0
    pct_start: float = 0.3
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def __post_init__(self):
        self.mode = normalize_mode(self.mode)
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        # the decoder is conditioned on encoder outputs, so its input width follows the encoder
        dec = self.decoder if isinstance(self.decoder, dict) else asdict(self.decoder)
        self.decoder = DecoderConfig(**{**dec, "embed_dim": self.encoder.embed_dim})
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.epochs < 1 or self.batch_size < 1 or self.rays_per_nerf < 1 or self.n_samples < 1:
            raise ValueError("epochs, batch_size, rays_per_nerf and n_samples must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def paper_config(**overrides) -> TrainConfig:
    """Full-size schedule and dimensions (250 epochs, batch 8, 1024-d embeddings)."""
    base = {"epochs": 250, "batch_size": 8, "max_lr": 1e-4, "weight_decay": 1e-2,
            "encoder": PAPER_ENCODER, "decoder": PAPER_DECODER}
    return TrainConfig(**{**base, **overrides})


# -- dataset --------------------------------------------------------------------------------

class NerfDataset:
    """Read-only view of a generated dataset with per-checkpoint caches."""

    def __init__(self, root: str | Path, families: list[str] | None = None):
        self.root = Path(root)
        self.manifest = load_manifest(self.root)
        self.families = list(families or self.manifest["families"])
        self._scenes = {s["id"]: s for s in self.manifest["scenes"]}
        self._ckpt: dict[tuple[str, str], NerfCheckpoint] = {}
        self._graph: dict[tuple[str, str], ParamGraph] = {}
        self._field: dict[tuple[str, str], NerfField] = {}
        self._poses: dict[str, list] = {}

    @property
    def multi_arch(self) -> bool:
        return len(self.families) >= 2

    def scenes(self, split: str | None = None) -> list[str]:
        return [s["id"] for s in self.manifest["scenes"] if split is None or s["split"] == split]

    def scene(self, scene_id: str) -> dict:
        return self._scenes[scene_id]

    def label(self, scene_id: str) -> str:
        return self._scenes[scene_id]["label"]

    def has(self, scene_id: str, arch: str) -> bool:
        return arch in self._scenes[scene_id]["checkpoints"]

    def checkpoint(self, scene_id: str, arch: str) -> NerfCheckpoint:
        key = (scene_id, arch)
        if key not in self._ckpt:
            rel = self._scenes[scene_id]["checkpoints"].get(arch)
            if rel is None:
                raise KeyError(f"scene {scene_id} has no {arch} checkpoint")
            self._ckpt[key] = NerfCheckpoint.load(self.root / rel)
        return self._ckpt[key]

    def graph(self, scene_id: str, arch: str) -> ParamGraph:
        key = (scene_id, arch)
        if key not in self._graph:
            self._graph[key] = checkpoint_to_graph(self.checkpoint(scene_id, arch))
        return self._graph[key]

    def field(self, scene_id: str, arch: str) -> NerfField:
        key = (scene_id, arch)
        if key not in self._field:
            self._field[key] = NerfField.from_checkpoint(self.checkpoint(scene_id, arch))
        return self._field[key]

    def train_poses(self, scene_id: str):
        if scene_id not in self._poses:
            self._poses[scene_id] = SceneSpec.from_dict(self._scenes[scene_id]["spec"]).train_poses
        return self._poses[scene_id]


# -- losses ---------------------------------------------------------------------------------

def siglip_loss(u, v, t, b, tol: float = 1e-4) -> Tensor:
    """Pairwise sigmoid loss over the |B| x |B| grid of unit-norm rows of ``u`` and ``v``."""
    u = u if isinstance(u, Tensor) else Tensor(np.asarray(u, dtype=np.float64))
    v = v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=np.float64))
    if u.ndim != 2 or u.shape != v.shape:
        raise ValueError(f"siglip_loss: U {u.shape} and V {v.shape} must be equal-shape matrices")
    for name, m in (("U", u), ("V", v)):
        norms = np.linalg.norm(m.data.astype(np.float64), axis=1)
        if np.any(np.abs(norms - 1.0) > tol):
            raise ValueError(f"siglip_loss: rows of {name} must be L2-normalized "
                             f"(norms {norms.min():.4g}..{norms.max():.4g})")
    n = u.shape[0]
    signs = (2.0 * np.eye(n) - 1.0).astype(u.dtype)
    logits = ops.add(ops.mul(t, ops.matmul(u, ops.transpose(v))), b)
    return ops.mul(ops.sum(ops.log_sigmoid(ops.mul(logits, signs))), -1.0 / n)


@dataclass
class RayPack:
    origins: np.ndarray
    dirs: np.ndarray
    depths: tuple[np.ndarray, np.ndarray]
    target: np.ndarray
    weights: np.ndarray
    owner: np.ndarray


def nerf_targets(ds: NerfDataset, nerfs: list[tuple[str, str]], rays_per_nerf: int, n_samples: int,
                 rng: np.random.Generator) -> RayPack:
    """Sample rays from one random training view per NeRF and render each NeRF along them.

    Foreground is the NeRF's own accumulated opacity above 0.5. Weights fold the
    fg/bg split and the 1/(number of NeRFs) average into one per-ray factor.
    """
    os_, ds_, ts, deltas, tgts, ws, owners = [], [], [], [], [], [], []
    for j, (sid, arch) in enumerate(nerfs):
        poses = ds.train_poses(sid)
        pose = poses[int(rng.integers(len(poses)))]
        ids = np.sort(rng.choice(pose.num_pixels, size=min(rays_per_nerf, pose.num_pixels), replace=False))
        o, d = renderer.pixel_rays(pose, ids)
        near, far = renderer.sphere_bounds(o, d)
        t, dl = renderer.sample_depths(near, far, n_samples, rng)
        with no_grad():
            color, acc = renderer.render_rays(ds.field(sid, arch), o, d, depths=(t, dl))
        os_.append(o)
        ds_.append(d)
        ts.append(t)
        deltas.append(dl)
        tgts.append(color.data.astype(np.float64))
        ws.append(renderer.render_loss_weights(acc.data > 0.5) / len(nerfs))
        owners.append(np.full(len(ids), j))
    cat = np.concatenate
    return RayPack(cat(os_), cat(ds_), (cat(ts), cat(deltas)), cat(tgts), cat(ws), cat(owners))


def rendering_loss_batch(decoder: Decoder, embeddings: Tensor, rays: RayPack) -> Tensor:
    """Mean over NeRFs of the fg/bg-weighted smooth-L1 between decoder and NeRF renders."""
    n_samples = rays.depths[0].shape[1]
    fn = decoder.field(embeddings, rays.owner, n_samples)
    pred, _ = renderer.render_rays(fn, rays.origins, rays.dirs, depths=rays.depths)
    per_ray = ops.mean(ops.smooth_l1(pred, Tensor(rays.target.astype(pred.dtype))), axis=1)
    return ops.sum(ops.mul(per_ray, rays.weights.astype(pred.dtype)))


# -- batching -------------------------------------------------------------------------------

def family_pairs(families: list[str]) -> list[tuple[str, str]]:
    known = [p for p in FAMILY_PAIRS if p[0] in families and p[1] in families]
    if len(known) == len(list(itertools.combinations(families, 2))):
        return known
    return list(itertools.combinations(families, 2))


def pair_batches(scene_ids: list[str], families: list[str], batch_size: int,
                 rng: np.random.Generator) -> list[list[tuple[str, str, str | None]]]:
    """One epoch of batches: scenes without replacement, a uniformly drawn
    architecture pair per scene. Single-family data yields (scene, fam, None)."""
    order = [scene_ids[i] for i in rng.permutation(len(scene_ids))]
    pairs = family_pairs(families)
    out = []
    for lo in range(0, len(order), batch_size):
        batch = []
        for sid in order[lo:lo + batch_size]:
            if pairs:
                a, b = pairs[int(rng.integers(len(pairs)))]
                batch.append((sid, a, b))
            else:
                batch.append((sid, families[0], None))
        out.append(batch)
    return out


# -- model bundle ---------------------------------------------------------------------------

class Framework:
    """Encoder, decoder and the two SigLIP scalars."""

    def __init__(self, cfg: TrainConfig, dtype=np.float32):
        self.cfg = cfg
        self.encoder = GraphEncoder(cfg.encoder, np.random.default_rng([cfg.seed, 11]), dtype)
        self.decoder = Decoder(cfg.decoder, np.random.default_rng([cfg.seed, 12]), dtype)
        self.scalars = ParamSet(dtype)
        self.scalars.add("t", np.array(cfg.t_init))
        self.scalars.add("b", np.array(cfg.b_init))

    def named(self, mode: str) -> list[tuple[str, Tensor]]:
        out = [(f"enc.{k}", v) for k, v in self.encoder.params.items()]
        if mode in ("r", "rc"):
            out += [(f"dec.{k}", v) for k, v in self.decoder.params.items()]
        if mode in ("c", "rc"):
            out += [(f"siglip.{k}", v) for k, v in self.scalars.items()]
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named("rc")}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for prefix, ps in (("enc.", self.encoder.params), ("dec.", self.decoder.params),
                           ("siglip.", self.scalars)):
            ps.load_arrays({k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)})

    @property
    def t(self) -> float:
        return float(self.scalars["t"].data)

    @property
    def b(self) -> float:
        return float(self.scalars["b"].data)


def batch_losses(fw: Framework, ds: NerfDataset, batch, cfg: TrainConfig,
                 rng: np.random.Generator) -> dict[str, Tensor | None]:
    mode = cfg.mode
    a_side = [(sid, a) for sid, a, _ in batch]
    b_side = [(sid, b) for sid, _, b in batch if b is not None]
    nerfs = a_side + b_side
    emb = fw.encoder.encode([ds.graph(sid, arch) for sid, arch in nerfs])
    l_r = l_c = None
    if mode in ("c", "rc"):
        if len(b_side) != len(a_side):
            raise TrainingError("contrastive loss needs paired NeRFs of two architectures")
        n = len(a_side)
        u = ops.l2_normalize(emb[:n], axis=1)
        v = ops.l2_normalize(emb[n:], axis=1)
        l_c = siglip_loss(u, v, fw.scalars["t"], fw.scalars["b"])
    if mode in ("r", "rc"):
        rays = nerf_targets(ds, nerfs, cfg.rays_per_nerf, cfg.n_samples, rng)
        l_r = rendering_loss_batch(fw.decoder, emb, rays)
    if mode == "r":
        total = l_r
    elif mode == "c":
        total = l_c
    else:
        total = ops.add(l_r, ops.mul(l_c, cfg.lam))
    return {"L_R": l_r, "L_C": l_c, "total": total}


def _value(t: Tensor | None):
    return None if t is None else float(t.item())


def validation_loss(fw: Framework, ds: NerfDataset, cfg: TrainConfig) -> float | None:
    scenes = ds.scenes("val")
    if not scenes:
        return None
    rng = np.random.default_rng([cfg.seed, 2])
    totals, sizes = [], []
    with no_grad():
        for batch in pair_batches(scenes, ds.families, cfg.batch_size, rng):
            totals.append(batch_losses(fw, ds, batch, cfg, rng)["total"].item())
            sizes.append(len(batch))
    return float(np.average(totals, weights=sizes))


# -- training loop --------------------------------------------------------------------------

@dataclass
class TrainResult:
    framework: Framework
    log: list[dict]
    best_epoch: int
    best_val: float | None
    completed: bool


STATE_FILE = "train_state.ngc"
LOG_FILE = "train_log.jsonl"


def _save_state(path: Path, fw: Framework, opt: AdamState, names: list[str], meta: dict,
                best_arrays: dict[str, np.ndarray]) -> None:
    tensors = {f"fw.{k}": v for k, v in fw.arrays().items()}
    for i, name in enumerate(names):
        tensors[f"adam.m.{name}"] = opt.m[i]
        tensors[f"adam.v.{name}"] = opt.v[i]
    tensors.update({f"best.{k}": v for k, v in best_arrays.items()})
    ngc.save(path, {"kind": "train_state", "adam_step": opt.step, **meta}, tensors)


def _write_log(path: Path, entries: list[dict]) -> None:
    with open(path, "w") as fh:
        for e in entries:
            fh.write(json.dumps(e, sort_keys=True) + "\n")


def train_framework(ds: NerfDataset, cfg: TrainConfig, run_dir: str | Path | None = None,
                    resume: bool = False, stop_after_epoch: int | None = None) -> TrainResult:
    """Train encoder (and decoder unless mode c); keep the best-validation weights.

    Each epoch draws its own generator from (seed, epoch), so a run resumed from
    an epoch-boundary state replays exactly the losses of an uninterrupted run.
    """
    mode = cfg.mode
    if mode in ("c", "rc") and not ds.multi_arch:
        raise ValueError(f"mode {mode!r} needs a multi-architecture dataset: with a single "
                         "architecture there are no positive pairs to compute the contrastive loss")
    train = ds.scenes("train")
    if not train:
        raise ValueError("dataset has no training scenes")
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)

    fw = Framework(cfg)
    named = fw.named(mode)
    names = [n for n, _ in named]
    params = [p for _, p in named]
    decay = [p.ndim >= 2 for p in params]
    opt = AdamState.init(params)
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    entries: list[dict] = []
    best_val, best_epoch = math.inf, -1
    best_arrays = {k: v.copy() for k, v in fw.arrays().items()}
    start = 0

    state_path = run_dir / STATE_FILE if run_dir is not None else None
    if resume and state_path is not None and state_path.exists():
        meta, tensors = ngc.load(state_path)
        if meta.get("config") != json.loads(json.dumps(cfg.to_dict())):
            raise TrainingError(f"{state_path}: saved config differs from the requested one")
        fw.load_arrays({k[3:]: v for k, v in tensors.items() if k.startswith("fw.")})
        for i, name in enumerate(names):
            opt.m[i][...] = tensors[f"adam.m.{name}"]
            opt.v[i][...] = tensors[f"adam.v.{name}"]
        opt.step = int(meta["adam_step"])
        best_arrays = {k[5:]: v for k, v in tensors.items() if k.startswith("best.")}
        entries = meta["log"]
        start = int(meta["epochs_done"])
        best_val = math.inf if meta["best_val"] is None else float(meta["best_val"])
        best_epoch = int(meta["best_epoch"])
        log.info("resuming at epoch %d", start)

    log_path = run_dir / LOG_FILE if run_dir is not None else None
    if log_path is not None:
        _write_log(log_path, entries)

    completed = True
    wall0 = time.perf_counter() - (entries[-1]["wall_time"] if entries else 0.0)
    for epoch in range(start, cfg.epochs):
        rng = np.random.default_rng([cfg.seed, 1, epoch])
        t0 = time.perf_counter()
        for bi, batch in enumerate(pair_batches(train, ds.families, cfg.batch_size, rng)):
            step = epoch * steps_per_epoch + bi
            lr = onecycle_lr(step, total_steps, cfg.max_lr, cfg.pct_start)
            for p in params:
                p.grad = None
            losses = batch_losses(fw, ds, batch, cfg, rng)
            total = losses["total"].item()
            if not math.isfinite(total):
                if run_dir is not None:
                    ngc.save(run_dir / "last_good.ngc", {"kind": "framework", "step": step}, fw.arrays())
                raise TrainingError(f"non-finite loss at step {step}; last good weights kept")
            entry = {"step": step, "epoch": epoch, "L_R": _value(losses["L_R"]),
                     "L_C": _value(losses["L_C"]), "total": total, "lr": lr, "t": fw.t, "b": fw.b,
                     "wall_time": round(time.perf_counter() - wall0, 3)}
            backward(losses["total"])
            adamw_step(params, [p.grad for p in params], opt, lr, cfg.weight_decay, decay_mask=decay)
            entries.append(entry)
            if log_path is not None:
                with open(log_path, "a") as fh:
                    fh.write(json.dumps(entry, sort_keys=True) + "\n")
        val = validation_loss(fw, ds, cfg)
        score = val if val is not None else entries[-1]["total"]
        if score <= best_val:
            best_val, best_epoch = score, epoch
            best_arrays = {k: v.copy() for k, v in fw.arrays().items()}
        log.info("epoch %d: train %.5f val %s (%.1fs)", epoch, entries[-1]["total"],
                 "n/a" if val is None else f"{val:.5f}", time.perf_counter() - t0)
        if state_path is not None:
            _save_state(state_path, fw, opt, names,
                        {"config": cfg.to_dict(), "epochs_done": epoch + 1, "log": entries,
                         "best_val": best_val, "best_epoch": best_epoch}, best_arrays)
        if stop_after_epoch is not None and epoch + 1 >= stop_after_epoch and epoch + 1 < cfg.epochs:
            completed = False
            break

    if completed:
        fw.load_arrays(best_arrays)
        if run_dir is not None:
            extra = {"best_epoch": best_epoch, "mode": mode, "t": fw.t, "b": fw.b}
            fw.encoder.save(run_dir / "encoder.ngc", extra)
            fw.decoder.save(run_dir / "decoder.ngc", extra)
    return TrainResult(fw, entries, best_epoch, None if best_val == math.inf else best_val, completed)
