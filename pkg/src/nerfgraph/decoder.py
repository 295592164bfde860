"""Embedding-conditioned radiance-field decoder.

Input is ``freq_encode(p) | embedding``; hidden ReLU layers with a skip path
``relu(linear(input))`` added to the output of hidden layer ``skip_into_layer``
(1-based); a final linear layer gives four raw values mapped through the same
heads as the NeRF fields.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import ngc
from .adkernel import ParamSet, Tensor, init_linear, linear, ops
from .fields import freq_encode, heads


@dataclass
class DecoderConfig:
    freq_dim: int = 144
    hidden_dim: int = 256
    hidden_layers: int = 4
    skip_into_layer: int = 2
    embed_dim: int = 256

    def __post_init__(self):
        if self.freq_dim % 6 or self.freq_dim < 0:
            raise ValueError("freq_dim must be a non-negative multiple of 6 (sin and cos per axis)")
        if self.hidden_layers < 1 or self.hidden_dim < 1 or self.embed_dim < 1:
            raise ValueError("decoder dims must be >= 1")
        if not 1 <= self.skip_into_layer <= self.hidden_layers:
            raise ValueError(f"skip_into_layer {self.skip_into_layer} outside 1..{self.hidden_layers}")

    @property
    def num_freqs(self) -> int:
        return self.freq_dim // 6

    @property
    def input_dim(self) -> int:
        return self.freq_dim + self.embed_dim


PAPER_DECODER = DecoderConfig(freq_dim=144, hidden_dim=1024, hidden_layers=4, skip_into_layer=2, embed_dim=1024)


class Decoder:
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator | None = None, dtype=np.float32):
        self.cfg = cfg
        self.params = ParamSet(dtype)
        rng = rng if rng is not None else np.random.default_rng(0)
        init_linear(self.params, "layer0", cfg.input_dim, cfg.hidden_dim, rng)
        for i in range(1, cfg.hidden_layers):
            init_linear(self.params, f"layer{i}", cfg.hidden_dim, cfg.hidden_dim, rng)
        init_linear(self.params, "skip", cfg.input_dim, cfg.hidden_dim, rng)
        init_linear(self.params, "out", cfg.hidden_dim, 4, rng)

    @property
    def dtype(self):
        return self.params.dtype

    def _input_proj(self, name: str, emb: Tensor, enc: Tensor, owner: np.ndarray) -> Tensor:
        # Split the input matmul: the embedding part is computed once per embedding row.
        w = self.params[f"{name}.weight"]
        f = self.cfg.freq_dim
        w_f = ops.getitem(w, (slice(None), slice(0, f)))
        w_e = ops.getitem(w, (slice(None), slice(f, None)))
        per_emb = linear(emb, w_e, self.params[f"{name}.bias"])
        return ops.add(linear(enc, w_f), ops.take(per_emb, owner))

    def raw(self, emb, points: np.ndarray, owner: np.ndarray | None = None) -> Tensor:
        """Raw [P, 4] outputs. ``emb`` is [B, E] (or [E]); ``owner[p]`` picks the row for point p."""
        emb = emb if isinstance(emb, Tensor) else Tensor(np.asarray(emb, dtype=self.dtype))
        if emb.ndim == 1:
            emb = ops.reshape(emb, (1, -1))
        if emb.shape[1] != self.cfg.embed_dim:
            raise ValueError(f"embedding width {emb.shape[1]} != decoder embed_dim {self.cfg.embed_dim}")
        points = np.asarray(points)
        if points.ndim != 2 or points.shape[1] != 3:
            raise ValueError(f"points must be [P, 3], got {points.shape}")
        owner = np.zeros(len(points), dtype=np.int64) if owner is None else np.asarray(owner)
        enc = Tensor(freq_encode(points, self.cfg.num_freqs).astype(self.dtype))
        x = ops.relu(self._input_proj("layer0", emb, enc, owner))
        for i in range(1, self.cfg.hidden_layers + 1):
            if i == self.cfg.skip_into_layer:
                x = ops.add(x, ops.relu(self._input_proj("skip", emb, enc, owner)))
            if i < self.cfg.hidden_layers:
                x = ops.relu(linear(x, self.params[f"layer{i}.weight"], self.params[f"layer{i}.bias"]))
        return linear(x, self.params["out.weight"], self.params["out.bias"])

    def __call__(self, emb, points: np.ndarray, owner: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        return heads(self.raw(emb, points, owner))

    def field(self, emb, ray_owner: np.ndarray | None = None, n_samples: int | None = None):
        """A renderer field function. With ``ray_owner`` the renderer's points
        (rays major, samples minor) are routed to their own embedding row."""
        if ray_owner is None:
            return lambda pts: self(emb, pts)
        owner = np.repeat(np.asarray(ray_owner), n_samples)
        return lambda pts: self(emb, pts, owner)

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        ngc.save(path, {"kind": "DEC", "config": asdict(self.cfg), **(extra or {})}, self.params.arrays())

    @classmethod
    def load(cls, path: str | Path, dtype=np.float32) -> tuple["Decoder", dict]:
        meta, tensors = ngc.load(path)
        if meta.get("kind") != "DEC":
            raise ngc.ContainerError(f"{path}: not a DEC container")
        dec = cls(DecoderConfig(**meta["config"]), dtype=dtype)
        dec.params.load_arrays(tensors)
        return dec, meta


def decode(decoder: Decoder, embedding, p: np.ndarray) -> tuple[Tensor, Tensor]:
    return decoder(embedding, p)
