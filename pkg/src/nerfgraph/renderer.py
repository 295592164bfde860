"""Pinhole rays, volume rendering and the fg/bg-weighted smooth-L1 loss."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .adkernel import Tensor, no_grad, ops

FieldFn = Callable[[np.ndarray], tuple[Tensor, Tensor]]

DEFAULT_SAMPLES = 48
W_FG = 0.8
W_BG = 0.2


@dataclass(frozen=True)
class CameraPose:
    """Camera-to-world pose. Rotation columns are the camera right, down and
    forward axes; pixel (u, v) looks through its center."""

    position: np.ndarray
    rotation: np.ndarray
    focal: float
    width: int
    height: int

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        if r.shape != (3, 3) or not np.allclose(r.T @ r, np.eye(3), atol=1e-6):
            raise ValueError("rotation must be a 3x3 orthonormal matrix")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64))

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[:, 2]

    @property
    def num_pixels(self) -> int:
        return self.width * self.height

    def to_dict(self) -> dict:
        return {"position": self.position.tolist(), "rotation": self.rotation.tolist(),
                "focal": self.focal, "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraPose":
        return cls(np.array(d["position"]), np.array(d["rotation"]), d["focal"], d["width"], d["height"])


def look_at(position, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0), focal: float = 64.0,
            width: int = 64, height: int = 64) -> CameraPose:
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - position
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    if abs(fwd @ up) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return CameraPose(position, np.stack([right, down, fwd], axis=1), focal, width, height)


@dataclass
class RayBatch:
    origins: np.ndarray      # [R, 3]
    directions: np.ndarray   # [R, 3], unit
    pixel_ids: np.ndarray    # [R]
    colors: np.ndarray       # [R, 3] ground truth in [0, 1]
    fg: np.ndarray           # [R] bool

    def __len__(self) -> int:
        return len(self.pixel_ids)


def pixel_rays(pose: CameraPose, pixel_ids: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """World-space origins and unit directions for the given flat pixel ids (row-major)."""
    if pixel_ids is None:
        pixel_ids = np.arange(pose.num_pixels)
    pixel_ids = np.asarray(pixel_ids)
    v, u = np.divmod(pixel_ids, pose.width)
    cam = np.stack([(u + 0.5 - pose.width / 2.0) / pose.focal,
                    (v + 0.5 - pose.height / 2.0) / pose.focal,
                    np.ones(len(pixel_ids))], axis=1)
    dirs = cam @ pose.rotation.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return np.broadcast_to(pose.position, dirs.shape).copy(), dirs


def sample_rays(image: np.ndarray, pose: CameraPose, count: int, rng: np.random.Generator,
                alpha: np.ndarray | None = None) -> RayBatch:
    """A uniform pixel subset without replacement, one ray through each pixel center."""
    n = pose.num_pixels
    if count > n:
        raise ValueError(f"sample_rays: {count} rays requested from a {pose.width}x{pose.height} image")
    ids = np.sort(rng.choice(n, size=count, replace=False))
    origins, dirs = pixel_rays(pose, ids)
    flat = np.asarray(image).reshape(n, -1)[:, :3]
    fg = np.ones(count, dtype=bool) if alpha is None else np.asarray(alpha).reshape(n)[ids] > 0.5
    return RayBatch(origins, dirs, ids, flat[ids].astype(np.float64), fg)


def sphere_bounds(origins: np.ndarray, dirs: np.ndarray, radius: float = 1.0):
    """Entry/exit distances of each ray with the origin-centred sphere; misses get near == far."""
    b = np.sum(origins * dirs, axis=1)
    c = np.sum(origins * origins, axis=1) - radius * radius
    disc = b * b - c
    hit = disc > 0
    root = np.sqrt(np.where(hit, disc, 0.0))
    near = np.maximum(-b - root, 0.0)
    far = np.maximum(-b + root, near)
    far = np.where(hit, far, near)
    return near, far


def sample_depths(near: np.ndarray, far: np.ndarray, n_samples: int,
                  rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Stratified depths [R, S] and segment lengths [R, S].

    One depth per equal bin (jittered when ``rng`` is given, bin midpoints
    otherwise); each segment runs to the next depth, the last one to ``far``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    near = np.asarray(near, dtype=np.float64)[:, None]
    far = np.asarray(far, dtype=np.float64)[:, None]
    edges = np.linspace(0.0, 1.0, n_samples + 1)[None, :]
    jitter = 0.5 if rng is None else rng.random((near.shape[0], n_samples))
    u = edges[:, :-1] + jitter * (edges[:, 1:] - edges[:, :-1])
    t = near + (far - near) * u
    deltas = np.concatenate([t[:, 1:] - t[:, :-1], far - t[:, -1:]], axis=1)
    return t, deltas


def composite(rgb: Tensor, sigma: Tensor, deltas: np.ndarray, bg_color) -> tuple[Tensor, Tensor]:
    """Accumulate per-sample colors [R, S, 3] and densities [R, S] along rays.

    Returns the composited color [R, 3] and the accumulated opacity [R].
    """
    d = Tensor(np.asarray(deltas, dtype=sigma.dtype))
    tau = ops.mul(sigma, d)
    cum = ops.cumsum(tau, axis=1)
    trans = ops.exp(ops.neg(ops.sub(cum, tau)))           # T_i = prod_{j<i} (1 - alpha_j)
    alpha = ops.sub(1.0, ops.exp(ops.neg(tau)))
    weights = ops.mul(trans, alpha)
    color = ops.sum(ops.mul(rgb, ops.reshape(weights, weights.shape + (1,))), axis=1)
    residual = ops.exp(ops.neg(cum[:, -1]))                # prod_i (1 - alpha_i)
    bg = np.asarray(bg_color, dtype=sigma.dtype).reshape(1, 3)
    color = ops.add(color, ops.mul(ops.reshape(residual, (-1, 1)), bg))
    return color, ops.sum(weights, axis=1)


def render_rays(field: FieldFn, origins: np.ndarray, dirs: np.ndarray, n_samples: int = DEFAULT_SAMPLES,
                bg_color=(1.0, 1.0, 1.0), rng: np.random.Generator | None = None,
                near: np.ndarray | None = None, far: np.ndarray | None = None,
                depths: tuple[np.ndarray, np.ndarray] | None = None) -> tuple[Tensor, Tensor]:
    """Volume-render a batch of rays through ``field``.

    Depths default to stratified samples inside the unit bounding sphere;
    pass ``depths`` (from :func:`sample_depths`) to reuse a sampling.
    """
    if depths is None:
        if near is None or far is None:
            near, far = sphere_bounds(origins, dirs)
        depths = sample_depths(near, far, n_samples, rng)
    t, deltas = depths
    n_rays, s = t.shape
    pts = origins[:, None, :] + dirs[:, None, :] * t[..., None]
    rgb, sigma = field(pts.reshape(-1, 3))
    rgb = ops.reshape(rgb, (n_rays, s, 3))
    sigma = ops.reshape(sigma, (n_rays, s))
    return composite(rgb, sigma, deltas, bg_color)


def volume_render(field: FieldFn, origin, direction, n_samples: int = DEFAULT_SAMPLES,
                  t_near: float = 0.0, t_far: float = 1.0, bg_color=(1.0, 1.0, 1.0),
                  rng: np.random.Generator | None = None) -> Tensor:
    """Single-ray convenience wrapper around :func:`render_rays`."""
    if not t_near < t_far:
        raise ValueError("t_near must be < t_far")
    o = np.asarray(origin, dtype=np.float64).reshape(1, 3)
    d = np.asarray(direction, dtype=np.float64).reshape(1, 3)
    color, _ = render_rays(field, o, d, n_samples, bg_color, rng,
                           near=np.array([t_near]), far=np.array([t_far]))
    return color[0]


def render_loss_weights(fg: np.ndarray, w_fg: float = W_FG, w_bg: float = W_BG) -> np.ndarray:
    """Per-pixel weights turning a sum of per-pixel losses into the fg/bg-weighted mean.

    An empty partition contributes nothing.
    """
    fg = np.asarray(fg, dtype=bool)
    n_fg, n_bg = int(fg.sum()), int((~fg).sum())
    return np.where(fg, w_fg / max(n_fg, 1), w_bg / max(n_bg, 1))


def render_loss(pred: Tensor, gt: np.ndarray, fg: np.ndarray, w_fg: float = W_FG,
                w_bg: float = W_BG) -> Tensor:
    """w_fg * mean over fg pixels + w_bg * mean over bg pixels of the channel-mean smooth L1."""
    gt = Tensor(np.asarray(gt, dtype=pred.dtype))
    per_pixel = ops.mean(ops.smooth_l1(pred, gt), axis=1)
    w = render_loss_weights(fg, w_fg, w_bg).astype(pred.dtype)
    return ops.sum(ops.mul(per_pixel, w))


def render_image(field: FieldFn, pose: CameraPose, n_samples: int = DEFAULT_SAMPLES,
                 bg_color=(1.0, 1.0, 1.0), chunk: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """Full image [H, W, 3] and opacity [H, W] with midpoint sampling."""
    origins, dirs = pixel_rays(pose)
    cols, accs = [], []
    with no_grad():
        for lo in range(0, len(origins), chunk):
            c, a = render_rays(field, origins[lo:lo + chunk], dirs[lo:lo + chunk], n_samples, bg_color)
            cols.append(c.data)
            accs.append(a.data)
    shape = (pose.height, pose.width)
    return np.concatenate(cols).reshape(shape + (3,)), np.concatenate(accs).reshape(shape)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    return float("inf") if mse == 0 else -10.0 * np.log10(mse)


def write_png(path: str | Path, image: np.ndarray) -> None:
    from PIL import Image

    arr = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def read_png(path: str | Path) -> np.ndarray:
    from PIL import Image

    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
