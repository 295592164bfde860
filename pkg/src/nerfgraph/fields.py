"""Radiance fields of the three architecture families: MLP, tri-plane and hash grid.

All families map a point in [-1, 1]^3 to four raw values; color is
``sigmoid(raw[:3])`` and density ``softplus(raw[3])``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ngc
from .adkernel import ParamSet, Tensor, linear, ops

FAMILIES = ("MLP", "TRI", "HASH")
PLANES = ("xy", "xz", "yz")
PLANE_AXES = {"xy": (0, 1), "xz": (0, 2), "yz": (1, 2)}
HASH_PRIMES = (1, 2654435761, 805459861)
DEFAULT_NUM_FREQS = 6


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ArchDescriptor:
    family: str
    mlp_hidden_layers: int = 3
    mlp_hidden_dim: int = 64
    activation: str = "relu"
    frequency_encoding: bool = True
    num_freqs: int = DEFAULT_NUM_FREQS
    tri_resolution: int | None = None
    tri_channels: int | None = None
    hash_levels: int | None = None
    hash_table_size_log2: int | None = None
    hash_features: int | None = None
    hash_min_resolution: int | None = None
    hash_max_resolution: int | None = None
    name: str = ""

    def __post_init__(self):
        if not self.name:
            object.__setattr__(self, "name", self.family)
        self.validate()

    def validate(self) -> None:
        fam = self.family
        if fam not in FAMILIES:
            raise ValueError(f"unknown family {fam!r}")
        if self.mlp_hidden_layers < 1 or self.mlp_hidden_dim < 1:
            raise ValueError("MLP needs at least one hidden layer of width >= 1")
        tri = (self.tri_resolution, self.tri_channels)
        hsh = (self.hash_levels, self.hash_table_size_log2, self.hash_features,
               self.hash_min_resolution, self.hash_max_resolution)
        if (fam == "TRI") != all(v is not None for v in tri) or (fam != "TRI" and any(v is not None for v in tri)):
            raise ValueError(f"{self.name}: tri-plane fields must be set iff family is TRI")
        if (fam == "HASH") != all(v is not None for v in hsh) or (fam != "HASH" and any(v is not None for v in hsh)):
            raise ValueError(f"{self.name}: hash fields must be set iff family is HASH")
        expected_act = "sine" if fam == "TRI" else "relu"
        if self.activation != expected_act:
            raise ValueError(f"{self.name}: family {fam} uses {expected_act} activation")
        if self.frequency_encoding != (fam != "HASH"):
            raise ValueError(f"{self.name}: frequency encoding is on for MLP/TRI and off for HASH")
        if fam == "TRI" and self.tri_resolution < 2:
            raise ValueError("tri-plane resolution must be >= 2")
        if fam == "HASH" and self.hash_min_resolution > self.hash_max_resolution:
            raise ValueError("hash min resolution exceeds max resolution")

    @property
    def freq_dim(self) -> int:
        return 6 * self.num_freqs if self.frequency_encoding else 0

    @property
    def hash_table_size(self) -> int:
        return 1 << self.hash_table_size_log2

    @property
    def mlp_input_width(self) -> int:
        if self.family == "MLP":
            return self.freq_dim
        if self.family == "TRI":
            return self.freq_dim + self.tri_channels
        return self.hash_levels * self.hash_features

    @property
    def mlp_widths(self) -> list[int]:
        return [self.mlp_input_width] + [self.mlp_hidden_dim] * self.mlp_hidden_layers + [4]

    def hash_resolutions(self) -> list[int]:
        n, lo, hi = self.hash_levels, self.hash_min_resolution, self.hash_max_resolution
        if n == 1:
            return [lo]
        growth = math.exp((math.log(hi) - math.log(lo)) / (n - 1))
        return [int(round(lo * growth ** lvl)) for lvl in range(n)]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchDescriptor":
        return cls(**d)

    def replace(self, **changes) -> "ArchDescriptor":
        return dataclasses.replace(self, **changes)


def mlp_arch(hidden_layers=3, hidden_dim=64, num_freqs=DEFAULT_NUM_FREQS, name="MLP") -> ArchDescriptor:
    return ArchDescriptor("MLP", hidden_layers, hidden_dim, "relu", True, num_freqs, name=name)


def tri_arch(hidden_layers=3, hidden_dim=64, resolution=32, channels=16,
             num_freqs=DEFAULT_NUM_FREQS, name="TRI") -> ArchDescriptor:
    return ArchDescriptor("TRI", hidden_layers, hidden_dim, "sine", True, num_freqs,
                          tri_resolution=resolution, tri_channels=channels, name=name)


def hash_arch(hidden_layers=3, hidden_dim=64, levels=4, table_size_log2=12, features=2,
              min_resolution=16, max_resolution=128, name="HASH") -> ArchDescriptor:
    return ArchDescriptor("HASH", hidden_layers, hidden_dim, "relu", False, DEFAULT_NUM_FREQS,
                          hash_levels=levels, hash_table_size_log2=table_size_log2,
                          hash_features=features, hash_min_resolution=min_resolution,
                          hash_max_resolution=max_resolution, name=name)


# The thirteen architectures of the dataset table: three training families
# and ten unseen variants.
TABLE7 = {
    "MLP": mlp_arch(),
    "TRI": tri_arch(),
    "HASH": hash_arch(),
    "MLP-2L": mlp_arch(hidden_layers=2, name="MLP-2L"),
    "MLP-32H": mlp_arch(hidden_dim=32, name="MLP-32H"),
    "TRI-2L": tri_arch(hidden_layers=2, name="TRI-2L"),
    "TRI-32H": tri_arch(hidden_dim=32, name="TRI-32H"),
    "TRI-16W": tri_arch(resolution=16, name="TRI-16W"),
    "TRI-8C": tri_arch(channels=8, name="TRI-8C"),
    "HASH-2L": hash_arch(hidden_layers=2, name="HASH-2L"),
    "HASH-32H": hash_arch(hidden_dim=32, name="HASH-32H"),
    "HASH-3N": hash_arch(levels=3, name="HASH-3N"),
    "HASH-11T": hash_arch(table_size_log2=11, name="HASH-11T"),
}

# Reduced presets sized for a single desktop CPU: each Table 7 axis halved.
DESK = {
    "MLP": mlp_arch(hidden_dim=32, num_freqs=4),
    "TRI": tri_arch(hidden_dim=32, resolution=16, channels=8, num_freqs=4),
    "HASH": hash_arch(hidden_dim=32, table_size_log2=10, min_resolution=4, max_resolution=32),
}


def unseen_variants(base: dict[str, ArchDescriptor]) -> dict[str, ArchDescriptor]:
    """Unseen-architecture analogues of ``base``: one fewer hidden layer,
    half the hidden width, and one fewer hash level."""
    out = {}
    for fam in ("MLP", "TRI", "HASH"):
        a = base[fam]
        out[f"{fam}-{a.mlp_hidden_layers - 1}L"] = a.replace(
            mlp_hidden_layers=a.mlp_hidden_layers - 1, name=f"{fam}-{a.mlp_hidden_layers - 1}L")
        out[f"{fam}-{a.mlp_hidden_dim // 2}H"] = a.replace(
            mlp_hidden_dim=a.mlp_hidden_dim // 2, name=f"{fam}-{a.mlp_hidden_dim // 2}H")
    h = base["HASH"]
    out[f"HASH-{h.hash_levels - 1}N"] = h.replace(hash_levels=h.hash_levels - 1,
                                                  name=f"HASH-{h.hash_levels - 1}N")
    return out


def tensor_shapes(arch: ArchDescriptor) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    if arch.family == "TRI":
        r, c = arch.tri_resolution, arch.tri_channels
        for pl in PLANES:
            shapes[f"tri.plane{pl}"] = (r, r, c)
    elif arch.family == "HASH":
        for lvl in range(arch.hash_levels):
            shapes[f"hash.level{lvl}.table"] = (arch.hash_table_size, arch.hash_features)
    w = arch.mlp_widths
    for i in range(len(w) - 1):
        shapes[f"mlp.layer{i}.weight"] = (w[i + 1], w[i])
        shapes[f"mlp.layer{i}.bias"] = (w[i + 1],)
    return shapes


def param_count(arch: ArchDescriptor) -> int:
    return int(sum(math.prod(s) for s in tensor_shapes(arch).values()))


def init_tensors(arch: ArchDescriptor, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fresh float32 parameters for ``arch``."""
    out = {}
    for name, shape in tensor_shapes(arch).items():
        if name.startswith("tri."):
            out[name] = rng.normal(0.0, 0.1, size=shape)
        elif name.startswith("hash."):
            out[name] = rng.uniform(-1e-4, 1e-4, size=shape)
        else:
            fan_in = tensor_shapes(arch)[name.replace(".bias", ".weight")][1]
            if arch.activation == "sine":
                bound = math.sqrt(6.0 / fan_in)
            else:
                bound = 1.0 / math.sqrt(fan_in)
            out[name] = rng.uniform(-bound, bound, size=shape)
    return {k: v.astype(np.float32) for k, v in out.items()}


@dataclass
class NerfCheckpoint:
    arch: ArchDescriptor
    tensors: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        expected = tensor_shapes(self.arch)
        if list(self.tensors) != list(expected):
            missing = set(expected) - set(self.tensors)
            extra = set(self.tensors) - set(expected)
            if missing or extra:
                raise CheckpointError(f"{self.arch.name}: missing {sorted(missing)}, unexpected {sorted(extra)}")
            self.tensors = {k: self.tensors[k] for k in expected}
        for name, shape in expected.items():
            t = self.tensors[name]
            if tuple(t.shape) != shape:
                raise CheckpointError(f"{self.arch.name}: {name} has shape {tuple(t.shape)}, expected {shape}")
            if not np.all(np.isfinite(t)):
                raise CheckpointError(f"{self.arch.name}: {name} holds non-finite values")

    def param_count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def save(self, path) -> None:
        ngc.save(path, {"kind": "nerf", "arch": self.arch.to_dict(), "metadata": self.metadata},
                 self.tensors)

    @classmethod
    def load(cls, path) -> "NerfCheckpoint":
        header, tensors = ngc.load(path)
        if header.get("kind") != "nerf":
            raise CheckpointError(f"{path}: not a NeRF checkpoint")
        return cls(ArchDescriptor.from_dict(header["arch"]), tensors, header.get("metadata", {}))


# -- encodings -------------------------------------------------------------------------

def freq_encode(p: np.ndarray, num_freqs: int) -> np.ndarray:
    """sin/cos of 2^k * pi * p; per frequency k the block is [sin xyz, cos xyz]."""
    if num_freqs < 1:
        raise ValueError("num_freqs must be >= 1")
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    scales = (2.0 ** np.arange(num_freqs)) * np.pi
    arg = p[:, None, :] * scales[None, :, None]  # [P, K, 3]
    out = np.concatenate([np.sin(arg), np.cos(arg)], axis=2).reshape(len(p), 6 * num_freqs)
    return out[0] if single else out


def _spatial_hash(ijk: np.ndarray, table_size: int) -> np.ndarray:
    """xor of coordinate * prime with uint32 wraparound, reduced mod table_size."""
    v = ijk.astype(np.uint64)
    h = (v[..., 0] * np.uint64(HASH_PRIMES[0])) ^ (v[..., 1] * np.uint64(HASH_PRIMES[1])) \
        ^ (v[..., 2] * np.uint64(HASH_PRIMES[2]))
    h &= np.uint64(0xFFFFFFFF)
    return (h % np.uint64(table_size)).astype(np.int64)


_CORNERS3 = np.array([[a, b, c] for a in (0, 1) for b in (0, 1) for c in (0, 1)], dtype=np.int64)
_CORNERS2 = np.array([[a, b] for a in (0, 1) for b in (0, 1)], dtype=np.int64)


def hash_lookup(p: np.ndarray, resolution: int, table_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Row indices [P, 8] and trilinear weights [P, 8] for one level."""
    u = np.clip((np.atleast_2d(p) + 1.0) / 2.0, 0.0, 1.0) * resolution
    base = np.clip(np.floor(u), 0, resolution - 1).astype(np.int64)
    frac = u - base
    corners = base[:, None, :] + _CORNERS3[None]  # [P, 8, 3]
    wx, wy, wz = (np.stack([1.0 - frac[:, a], frac[:, a]], axis=1) for a in range(3))
    w = (wx[:, :, None, None] * wy[:, None, :, None] * wz[:, None, None, :]).reshape(-1, 8)
    return _spatial_hash(corners, table_size), w


def plane_lookup(p: np.ndarray, plane: str, resolution: int) -> tuple[np.ndarray, np.ndarray]:
    """Flat vertex indices [P, 4] and bilinear weights [P, 4] on one plane."""
    a, b = PLANE_AXES[plane]
    uv = np.clip((np.atleast_2d(p)[:, [a, b]] + 1.0) / 2.0, 0.0, 1.0) * (resolution - 1)
    base = np.clip(np.floor(uv), 0, resolution - 2).astype(np.int64)
    frac = uv - base
    corners = base[:, None, :] + _CORNERS2[None]
    wa, wb = (np.stack([1.0 - frac[:, k], frac[:, k]], axis=1) for k in range(2))
    w = (wa[:, :, None] * wb[:, None, :]).reshape(-1, 4)
    return corners[..., 0] * resolution + corners[..., 1], w


# -- differentiable field ---------------------------------------------------------------

class NerfField:
    """A NeRF whose parameters are autodiff leaves."""

    def __init__(self, arch: ArchDescriptor, tensors: dict[str, np.ndarray], dtype=np.float32):
        self.arch = arch
        self.params = ParamSet(dtype)
        for name, shape in tensor_shapes(arch).items():
            t = np.asarray(tensors[name])
            if tuple(t.shape) != shape:
                raise CheckpointError(f"{arch.name}: {name} has shape {tuple(t.shape)}, expected {shape}")
            self.params.add(name, t)

    @classmethod
    def from_checkpoint(cls, ckpt: NerfCheckpoint, dtype=np.float32) -> "NerfField":
        return cls(ckpt.arch, ckpt.tensors, dtype)

    def to_checkpoint(self, metadata: dict | None = None) -> NerfCheckpoint:
        tensors = {k: v.data.astype(np.float32) for k, v in self.params.items()}
        return NerfCheckpoint(self.arch, tensors, dict(metadata or {}))

    def features(self, p: np.ndarray) -> Tensor:
        arch = self.arch
        dtype = self.params.dtype
        if arch.family == "MLP":
            return Tensor(freq_encode(p, arch.num_freqs).astype(dtype))
        if arch.family == "TRI":
            return ops.concat([Tensor(freq_encode(p, arch.num_freqs).astype(dtype)),
                               triplane_sample(self.params, p, arch)], axis=1)
        return hash_sample(self.params, p, arch)

    def raw(self, p: np.ndarray) -> Tensor:
        return mlp_forward(self.arch, self.params, self.features(p))

    def __call__(self, p: np.ndarray) -> tuple[Tensor, Tensor]:
        raw = self.raw(np.atleast_2d(p))
        return heads(raw)


def heads(raw: Tensor) -> tuple[Tensor, Tensor]:
    """Split raw [P, 4] into color (sigmoid) and density (softplus)."""
    return ops.sigmoid(raw[:, :3]), ops.softplus(raw[:, 3])


def mlp_forward(arch: ArchDescriptor, params, features: Tensor) -> Tensor:
    w0 = params["mlp.layer0.weight"]
    if features.shape[-1] != w0.shape[1]:
        raise CheckpointError(f"{arch.name}: feature width {features.shape[-1]} != first-layer input {w0.shape[1]}")
    act = ops.sine if arch.activation == "sine" else ops.relu
    n_layers = arch.mlp_hidden_layers + 1
    x = features
    for i in range(n_layers):
        x = linear(x, params[f"mlp.layer{i}.weight"], params[f"mlp.layer{i}.bias"])
        if i < n_layers - 1:
            x = act(x)
    return x


def triplane_sample(params, p: np.ndarray, arch: ArchDescriptor) -> Tensor:
    """Bilinear lookups on the three planes, summed into C channels."""
    r, c = arch.tri_resolution, arch.tri_channels
    total = None
    for pl in PLANES:
        idx, w = plane_lookup(p, pl, r)
        flat = ops.reshape(params[f"tri.plane{pl}"], (r * r, c))
        val = ops.gather_interp(flat, idx, w)
        total = val if total is None else ops.add(total, val)
    return total


def hash_sample(params, p: np.ndarray, arch: ArchDescriptor) -> Tensor:
    """Per-level trilinear interpolation of hashed vertex features, concatenated."""
    levels = []
    for lvl, res in enumerate(arch.hash_resolutions()):
        idx, w = hash_lookup(p, res, arch.hash_table_size)
        levels.append(ops.gather_interp(params[f"hash.level{lvl}.table"], idx, w))
    return ops.concat(levels, axis=1)


def nerf_forward(ckpt: NerfCheckpoint, p: np.ndarray, dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate color [P, 3] and density [P] (or a single point) without recording."""
    from .adkernel import no_grad

    ckpt.validate()
    single = np.asarray(p).ndim == 1
    field_ = NerfField.from_checkpoint(ckpt, dtype)
    with no_grad():
        rgb, sigma = field_(np.atleast_2d(p))
    if single:
        return rgb.data[0], sigma.data[0]
    return rgb.data, sigma.data


def load_checkpoint(path: str | Path) -> NerfCheckpoint:
    return NerfCheckpoint.load(path)
