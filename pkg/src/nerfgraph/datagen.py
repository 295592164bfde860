"""Procedural primitive scenes, analytic ground-truth views and per-scene NeRF fitting."""

from __future__ import annotations

import json
import logging
import math
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import renderer
from .adkernel import AdamState, adamw_step, backward, onecycle_lr
from .fields import (DESK, FAMILIES, TABLE7, ArchDescriptor, NerfCheckpoint, NerfField, init_tensors,
                     unseen_variants)
from .renderer import CameraPose, look_at

log = logging.getLogger(__name__)

CLASSES = ("sphere", "box", "torus", "two_spheres")
BG_COLOR = (1.0, 1.0, 1.0)
LIGHT_DIR = np.array([0.35, -0.45, 0.82]) / np.linalg.norm([0.35, -0.45, 0.82])
AMBIENT = 0.35
RIG_RADIUS = 2.6


class FitError(RuntimeError):
    pass


@dataclass
class Primitive:
    shape: str            # sphere | box | torus
    center: list[float]
    size: list[float]     # sphere [r]; box half-extents [hx, hy, hz]; torus [R, r] around z
    albedo: list[float]


@dataclass
class SceneSpec:
    scene_id: str
    label: str
    primitives: list[Primitive]
    poses: list[CameraPose]
    resolution: int

    def to_dict(self) -> dict:
        return {"scene_id": self.scene_id, "label": self.label, "resolution": self.resolution,
                "primitives": [asdict(p) for p in self.primitives],
                "poses": [p.to_dict() for p in self.poses]}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(d["scene_id"], d["label"], [Primitive(**p) for p in d["primitives"]],
                   [CameraPose.from_dict(p) for p in d["poses"]], d["resolution"])

    @property
    def train_poses(self) -> list[CameraPose]:
        return self.poses[:-1]

    @property
    def holdout_pose(self) -> CameraPose:
        return self.poses[-1]


def camera_rig(num_views: int, resolution: int, radius: float = RIG_RADIUS) -> list[CameraPose]:
    """Views on a sphere around the origin (Fibonacci spiral over elevations -35..75 deg)."""
    if num_views < 8:
        raise ValueError("camera rig needs at least 8 views")
    golden = math.pi * (3.0 - math.sqrt(5.0))
    half_fov = math.asin(1.0 / radius) * 1.12
    focal = (resolution / 2.0) / math.tan(half_fov)
    lo, hi = math.sin(math.radians(-35)), math.sin(math.radians(75))
    poses = []
    for i in range(num_views):
        z = lo + (hi - lo) * (i + 0.5) / num_views
        r = math.sqrt(1.0 - z * z)
        az = golden * i
        pos = radius * np.array([r * math.cos(az), r * math.sin(az), z])
        poses.append(look_at(pos, focal=focal, width=resolution, height=resolution))
    return poses


def _fits(center, extent) -> bool:
    return float(np.linalg.norm(center)) + extent <= 0.95


def generate_scene(label: str, rng: np.random.Generator, scene_id: str = "scene",
                   num_views: int = 24, resolution: int = 64) -> SceneSpec:
    if label not in CLASSES:
        raise ValueError(f"unknown class {label!r}; expected one of {CLASSES}")
    albedo = rng.uniform(0.1, 0.9, size=3).tolist()
    prims: list[Primitive] = []
    if label == "sphere":
        r = rng.uniform(0.45, 0.7)
        c = rng.uniform(-0.15, 0.15, size=3) * (0.95 - r) / 0.5
        prims.append(Primitive("sphere", c.tolist(), [r], albedo))
    elif label == "box":
        h = rng.uniform(0.28, 0.45, size=3)
        c = rng.uniform(-0.06, 0.06, size=3)
        while not _fits(c, float(np.linalg.norm(h))):
            h *= 0.95
        prims.append(Primitive("box", c.tolist(), h.tolist(), albedo))
    elif label == "torus":
        big, small = rng.uniform(0.45, 0.6), rng.uniform(0.14, 0.22)
        c = rng.uniform(-0.1, 0.1, size=3)
        while not _fits(c, big + small):
            c *= 0.8
        prims.append(Primitive("torus", c.tolist(), [big, small], albedo))
    else:
        r1, r2 = rng.uniform(0.25, 0.38, size=2)
        az = rng.uniform(0, 2 * math.pi)
        axis = np.array([math.cos(az), math.sin(az), rng.uniform(-0.3, 0.3)])
        axis /= np.linalg.norm(axis)
        sep = 0.5 * (r1 + r2) + rng.uniform(0.05, 0.2)
        c1, c2 = axis * sep, -axis * sep
        for c, r in ((c1, r1), (c2, r2)):
            while not _fits(c, r):
                c *= 0.95
        prims += [Primitive("sphere", c1.tolist(), [r1], albedo),
                  Primitive("sphere", c2.tolist(), [r2], albedo)]
    return SceneSpec(scene_id, label, prims, camera_rig(num_views, resolution), resolution)


# -- analytic ray casting -------------------------------------------------------------

def _hit_sphere(o, d, prim):
    c, r = np.asarray(prim.center), prim.size[0]
    oc = o - c
    b = np.sum(oc * d, axis=1)
    disc = b * b - (np.sum(oc * oc, axis=1) - r * r)
    hit = disc >= 0
    t = -b - np.sqrt(np.where(hit, disc, 0.0))
    hit &= t > 0
    pts = o + d * t[:, None]
    n = (pts - c) / r
    return np.where(hit, t, np.inf), n


def _hit_box(o, d, prim):
    c, h = np.asarray(prim.center), np.asarray(prim.size)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (c - h - o) * inv
        t2 = (c + h - o) * inv
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    hit = (tmax >= tmin) & (tmin > 0)
    pts = o + d * np.where(hit, tmin, 0.0)[:, None]
    local = (pts - c) / h
    axis = np.argmax(np.abs(local), axis=1)
    n = np.zeros_like(pts)
    n[np.arange(len(pts)), axis] = np.sign(local[np.arange(len(pts)), axis])
    return np.where(hit, tmin, np.inf), n


def _torus_sdf(p, big, small):
    q = np.sqrt(p[:, 0] ** 2 + p[:, 1] ** 2) - big
    return np.sqrt(q * q + p[:, 2] ** 2) - small


def _hit_torus(o, d, prim, iters: int = 96):
    c = np.asarray(prim.center)
    big, small = prim.size
    oc = o - c
    near, far = renderer.sphere_bounds(oc, d, radius=big + small + 1e-3)
    t = near.copy()
    active = far > near
    for _ in range(iters):
        dist = _torus_sdf(oc + d * t[:, None], big, small)
        t = np.where(active, t + dist, t)
        active &= (dist > 1e-6) & (t < far)
    p = oc + d * t[:, None]
    hit = (far > near) & (np.abs(_torus_sdf(p, big, small)) < 1e-4) & (t <= far)
    ring = p.copy()
    ring[:, 2] = 0.0
    rn = np.linalg.norm(ring, axis=1, keepdims=True)
    ring = ring / np.where(rn > 0, rn, 1.0) * big
    n = p - ring
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
    return np.where(hit, t, np.inf), n


_HITTERS = {"sphere": _hit_sphere, "box": _hit_box, "torus": _hit_torus}


def cast_rays(scene: SceneSpec, origins: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Shaded colors [R, 3] and hit mask [R] for arbitrary rays."""
    best_t = np.full(len(origins), np.inf)
    color = np.tile(np.asarray(BG_COLOR, dtype=np.float64), (len(origins), 1))
    for prim in scene.primitives:
        t, n = _HITTERS[prim.shape](origins, dirs, prim)
        closer = t < best_t
        shade = AMBIENT + (1.0 - AMBIENT) * np.clip(n @ LIGHT_DIR, 0.0, 1.0)
        color[closer] = np.asarray(prim.albedo) * shade[closer, None]
        best_t = np.where(closer, t, best_t)
    return color, np.isfinite(best_t)


def render_gt(scene: SceneSpec, pose: CameraPose) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth image [H, W, 3] and alpha mask [H, W] (1 where a primitive is hit)."""
    origins, dirs = renderer.pixel_rays(pose)
    color, hit = cast_rays(scene, origins, dirs)
    shape = (pose.height, pose.width)
    return color.reshape(shape + (3,)), hit.reshape(shape).astype(np.float64)


# -- NeRF fitting -----------------------------------------------------------------------

@dataclass
class FitConfig:
    steps: int = 2000
    lr: dict = field(default_factory=lambda: {"MLP": 5e-3, "TRI": 5e-3, "HASH": 1e-2})
    rays_per_step: int = 512
    n_samples: int = 48
    weight_decay: float = 0.0
    psnr_threshold: float = 22.0
    init_seed: int = 0
    eval_samples: int = 64


def shared_init(arch: ArchDescriptor, init_seed: int) -> dict[str, np.ndarray]:
    """Initial weights shared by every NeRF of one architecture."""
    key = zlib.crc32(arch.name.encode())
    return init_tensors(arch, np.random.default_rng([init_seed, key]))


def _training_rays(scene: SceneSpec):
    origins, dirs, colors, fg = [], [], [], []
    for pose in scene.train_poses:
        img, alpha = render_gt(scene, pose)
        o, d = renderer.pixel_rays(pose)
        origins.append(o)
        dirs.append(d)
        colors.append(img.reshape(-1, 3))
        fg.append(alpha.reshape(-1) > 0.5)
    return np.concatenate(origins), np.concatenate(dirs), np.concatenate(colors), np.concatenate(fg)


def fit_nerf(scene: SceneSpec, arch: ArchDescriptor, steps: int, rng: np.random.Generator,
             cfg: FitConfig | None = None) -> NerfCheckpoint:
    """Fit one NeRF of ``arch`` to the scene's training views."""
    cfg = cfg or FitConfig()
    field_ = NerfField(arch, shared_init(arch, cfg.init_seed), dtype=np.float32)
    params = field_.params.tensors()
    state = AdamState.init(params)
    origins, dirs, colors, fg = _training_rays(scene)
    lr_max = cfg.lr[arch.family] if isinstance(cfg.lr, dict) else float(cfg.lr)
    loss_val = float("nan")
    for step in range(steps):
        ids = rng.choice(len(origins), size=min(cfg.rays_per_step, len(origins)), replace=False)
        pred, _ = renderer.render_rays(field_, origins[ids], dirs[ids], cfg.n_samples, BG_COLOR, rng)
        loss = renderer.render_loss(pred, colors[ids], fg[ids])
        loss_val = loss.item()
        if not math.isfinite(loss_val):
            raise FitError(f"{scene.scene_id}/{arch.name}: non-finite loss at step {step}")
        field_.params.zero_grad()
        backward(loss)
        adamw_step(params, [p.grad for p in params], state, onecycle_lr(step, steps, lr_max),
                   cfg.weight_decay)
    img, _ = renderer.render_image(field_, scene.holdout_pose, cfg.eval_samples, BG_COLOR)
    gt, _ = render_gt(scene, scene.holdout_pose)
    meta = {"scene_id": scene.scene_id, "label": scene.label, "arch": arch.name,
            "family": arch.family, "final_loss": loss_val, "psnr": renderer.psnr(img, gt),
            "steps": steps}
    return field_.to_checkpoint(meta)


# -- dataset ------------------------------------------------------------------------------

@dataclass
class DataConfig:
    num_scenes: int = 60
    classes: list[str] = field(default_factory=lambda: list(CLASSES))
    splits: dict = field(default_factory=lambda: {"train": 0.8, "val": 0.1, "test": 0.1})
    num_views: int = 24
    resolution: int = 64
    seed: int = 0
    preset: str = "desk"
    unseen_variants: bool = False
    write_images: bool = False
    families: list[str] | None = None


PRESETS = {"desk": DESK, "table7": {k: TABLE7[k] for k in FAMILIES}}


def preset_archs(cfg: DataConfig) -> tuple[dict[str, ArchDescriptor], dict[str, ArchDescriptor]]:
    """Training architectures and, when requested, their unseen variants."""
    try:
        base = PRESETS[cfg.preset]
    except KeyError:
        raise ValueError(f"unknown preset {cfg.preset!r}; expected one of {sorted(PRESETS)}") from None
    fams = list(cfg.families or base)
    unknown = [f for f in fams if f not in base]
    if unknown:
        raise ValueError(f"unknown families {unknown}")
    archs = {f: base[f] for f in fams}
    variants = {}
    if cfg.unseen_variants:
        variants = {k: v for k, v in unseen_variants(base).items() if v.family in fams}
    return archs, variants


def assign_labels(num_scenes: int, classes: list[str]) -> list[str]:
    """Round-robin class assignment: counts differ by at most one."""
    if len(classes) < 2:
        raise ValueError("need at least two classes")
    return [classes[i % len(classes)] for i in range(num_scenes)]


def _largest_remainder(n: int, fractions: list[float]) -> list[int]:
    quotas = [n * f / sum(fractions) for f in fractions]
    counts = [int(math.floor(q)) for q in quotas]
    order = sorted(range(len(quotas)), key=lambda k: -(quotas[k] - counts[k]))
    for k in order[:n - sum(counts)]:
        counts[k] += 1
    return counts


def split_scenes(labels: list[str], fractions: dict, rng: np.random.Generator) -> list[str]:
    """Per-class stratified split assignment, one split name per scene.

    Each class first receives the floor of its share per split; the leftover
    seats go, class by class, to the split furthest below its global target,
    so split totals match the global largest-remainder counts.
    """
    names = list(fractions)
    fr = [fractions[n] for n in names]
    classes = list(dict.fromkeys(labels))
    members = {}
    for cls in classes:
        idx = [i for i, lab in enumerate(labels) if lab == cls]
        members[cls] = [idx[j] for j in rng.permutation(len(idx))]
    total = sum(fr)
    floors = {cls: [int(math.floor(len(members[cls]) * f / total)) for f in fr] for cls in classes}
    deficit = [t - sum(floors[c][k] for c in classes)
               for k, t in enumerate(_largest_remainder(len(labels), fr))]
    out = [""] * len(labels)
    for cls in classes:
        counts = floors[cls]
        for _ in range(len(members[cls]) - sum(counts)):
            k = max(range(len(names)), key=lambda j: (deficit[j], -j))
            counts[k] += 1
            deficit[k] -= 1
        pos = 0
        for name, cnt in zip(names, counts):
            for i in members[cls][pos:pos + cnt]:
                out[i] = name
            pos += cnt
    return out


def _arch_seed(seed: int, scene_index: int, arch_name: str, attempt: int) -> list[int]:
    return [seed, scene_index, zlib.crc32(arch_name.encode()), attempt]


def _fit_job(args):
    scene_dict, scene_index, arch_dict, seed, fit_cfg_dict, out_path = args
    scene = SceneSpec.from_dict(scene_dict)
    arch = ArchDescriptor.from_dict(arch_dict)
    cfg = FitConfig(**fit_cfg_dict)
    result = None
    for attempt in range(2):
        rng = np.random.default_rng(_arch_seed(seed, scene_index, arch.name, attempt))
        ckpt = fit_nerf(scene, arch, cfg.steps, rng, cfg)
        ckpt.metadata["attempt"] = attempt
        result = ckpt
        if ckpt.metadata["psnr"] >= cfg.psnr_threshold:
            break
        log.warning("%s/%s: PSNR %.2f below gate %.1f (attempt %d)", scene.scene_id, arch.name,
                    ckpt.metadata["psnr"], cfg.psnr_threshold, attempt)
    result.metadata["passed_gate"] = bool(result.metadata["psnr"] >= cfg.psnr_threshold)
    result.save(out_path)
    return scene.scene_id, arch.name, result.metadata


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("NERFGRAPH_THREADS", "1")))
    except ValueError:
        return 1


def build_scenes(cfg: DataConfig) -> list[dict]:
    labels = assign_labels(cfg.num_scenes, cfg.classes)
    splits = split_scenes(labels, cfg.splits, np.random.default_rng([cfg.seed, 7]))
    scenes = []
    for i, (lab, split) in enumerate(zip(labels, splits)):
        spec = generate_scene(lab, np.random.default_rng([cfg.seed, i]), f"scene_{i:04d}",
                              cfg.num_views, cfg.resolution)
        scenes.append({"id": spec.scene_id, "index": i, "label": lab, "split": split,
                       "spec": spec.to_dict(), "checkpoints": {}, "fit": {}})
    return scenes


def fit_checkpoints(root: Path, manifest: dict, jobs: list[tuple[dict, ArchDescriptor]],
                    fit_cfg: FitConfig, seed: int) -> None:
    """Fit (scene, arch) jobs, writing checkpoints under ``root`` and recording them in ``manifest``."""
    work = []
    for scene, arch in jobs:
        rel = f"checkpoints/{scene['id']}/{arch.name}.ngc"
        work.append((scene["spec"], scene["index"], arch.to_dict(), seed, asdict(fit_cfg), str(root / rel)))
    by_id = {s["id"]: s for s in manifest["scenes"]}
    n = worker_count()
    if n > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(_fit_job, work))
    else:
        results = [_fit_job(w) for w in work]
    for (scene_id, arch_name, meta), w in zip(results, work):
        s = by_id[scene_id]
        s["checkpoints"][arch_name] = os.path.relpath(w[5], root)
        s["fit"][arch_name] = {k: meta[k] for k in ("psnr", "final_loss", "passed_gate", "attempt")}


def build_dataset(out_dir: str | Path, cfg: DataConfig, fit_cfg: FitConfig,
                  archs: dict[str, ArchDescriptor], variants: dict[str, ArchDescriptor] | None = None) -> dict:
    """Generate scenes, fit every architecture on every scene and persist the manifest."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    scenes = build_scenes(cfg)
    manifest = {
        "version": 1,
        "seed": cfg.seed,
        "config": {"data": asdict(cfg), "nerf_fit": asdict(fit_cfg)},
        "classes": list(cfg.classes),
        "families": list(archs),
        "archs": {name: a.to_dict() for name, a in archs.items()},
        "variants": {name: a.to_dict() for name, a in (variants or {}).items()},
        "scenes": scenes,
        "excluded": [],
    }
    jobs = [(s, a) for s in scenes for a in archs.values()]
    jobs += [(s, a) for s in scenes if s["split"] == "test" for a in (variants or {}).values()]
    fit_checkpoints(root, manifest, jobs, fit_cfg, cfg.seed)
    apply_quality_gate(manifest)
    if cfg.write_images:
        for s in scenes:
            spec = SceneSpec.from_dict(s["spec"])
            img, _ = render_gt(spec, spec.poses[0])
            renderer.write_png(root / "images" / f"{s['id']}.png", img)
    write_manifest(root, manifest)
    return manifest


def apply_quality_gate(manifest: dict) -> None:
    """Drop scenes whose training-family checkpoints failed the PSNR gate twice."""
    keep = []
    for s in manifest["scenes"]:
        failed = [a for a in manifest["families"] if not s["fit"].get(a, {}).get("passed_gate", True)]
        if failed:
            manifest["excluded"].append({"id": s["id"], "failed": failed})
        else:
            keep.append(s)
    manifest["scenes"] = keep


def write_manifest(root: Path, manifest: dict) -> Path:
    path = Path(root) / "manifest.json"
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    os.replace(tmp, path)
    return path


def load_manifest(root: str | Path) -> dict:
    return json.loads((Path(root) / "manifest.json").read_text())
