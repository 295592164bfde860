"""Graph meta-network: message passing over parameter graphs with edge states.

Per layer, with residual updates::

    m_v  = sum_{u->v} psi(h_u | e_uv) + sum_{v->w} psi'(h_w | e_vw)
    h_v' = h_v + phi_n(h_v | m_v)
    e_uv' = e_uv + phi_e(e_uv | h_u' | h_v')

Every MLP has two layers. First layers acting on a concatenation are applied
as a sum of per-block projections so node-side products are computed once per
node instead of once per edge; second layers of the message MLPs are applied
after aggregation (linear maps commute with sums). Readout: an MLP on edge
states, a mean over each graph's edges and a single linear map to the
embedding width.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ngc
from .adkernel import ParamSet, Tensor, init_linear, linear, no_grad, ops
from .paramgraph import EDGE_FEATURE_DIM, NODE_FEATURE_DIM, ParamGraph


@dataclass
class EncoderConfig:
    hidden_dim: int = 64
    num_layers: int = 4
    readout_layers: int = 2
    embed_dim: int = 256
    directed: bool = True

    def __post_init__(self):
        for k in ("hidden_dim", "num_layers", "readout_layers", "embed_dim"):
            if int(getattr(self, k)) < 1:
                raise ValueError(f"EncoderConfig.{k} must be >= 1")


PAPER_ENCODER = EncoderConfig(hidden_dim=128, num_layers=4, readout_layers=2, embed_dim=1024)


@dataclass
class Embedding:
    values: np.ndarray
    source: str = ""
    family: str = ""
    meta: dict = field(default_factory=dict)

    def normalized(self) -> np.ndarray:
        return self.values / np.linalg.norm(self.values)


@dataclass
class GraphBatch:
    """Disjoint union of parameter graphs with precomputed raw features."""

    node_x: np.ndarray
    edge_x: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    edge_graph: np.ndarray
    edge_counts: np.ndarray
    in_deg: np.ndarray
    out_deg: np.ndarray

    @property
    def num_graphs(self) -> int:
        return len(self.edge_counts)

    @property
    def num_nodes(self) -> int:
        return len(self.node_x)

    @classmethod
    def from_graphs(cls, graphs: list[ParamGraph]) -> "GraphBatch":
        if not graphs:
            raise ValueError("empty graph batch")
        nx, ex, src, dst, eg, counts = [], [], [], [], [], []
        offset = 0
        for gi, g in enumerate(graphs):
            if g.num_edges == 0:
                raise ValueError("cannot encode a graph without edges")
            nx.append(g.node_features())
            ex.append(g.edge_features())
            src.append(g.src + offset)
            dst.append(g.dst + offset)
            eg.append(np.full(g.num_edges, gi))
            counts.append(g.num_edges)
            offset += g.num_nodes
        src, dst = np.concatenate(src), np.concatenate(dst)
        return cls(np.concatenate(nx), np.concatenate(ex), src, dst, np.concatenate(eg),
                   np.array(counts), np.bincount(dst, minlength=offset).astype(np.float64),
                   np.bincount(src, minlength=offset).astype(np.float64))


def _mlp_names(prefix: str) -> list[str]:
    return [f"{prefix}.{i}" for i in range(2)]


class GraphEncoder:
    """Parameters plus forward pass. ``dtype`` fixes the compute precision."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator | None = None, dtype=np.float32):
        self.cfg = cfg
        self.params = ParamSet(dtype)
        rng = rng if rng is not None else np.random.default_rng(0)
        h = cfg.hidden_dim
        init_linear(self.params, "pre.node", NODE_FEATURE_DIM, h, rng)
        init_linear(self.params, "pre.edge", EDGE_FEATURE_DIM, h, rng)
        for layer in range(cfg.num_layers):
            fns = [("msg_in", 2), ("node", 2), ("edge", 3)]
            if cfg.directed:
                fns.insert(1, ("msg_out", 2))
            for name, blocks in fns:
                first, second = _mlp_names(f"layer{layer}.{name}")
                init_linear(self.params, first, blocks * h, h, rng)
                init_linear(self.params, second, h, h, rng)
        for i in range(cfg.readout_layers):
            init_linear(self.params, f"readout.{i}", h, h, rng)
        init_linear(self.params, "proj", h, cfg.embed_dim, rng)

    @property
    def dtype(self):
        return self.params.dtype

    def _w(self, name: str, block: int | None = None) -> Tensor:
        w = self.params[f"{name}.weight"]
        if block is None:
            return w
        h = self.cfg.hidden_dim
        return ops.getitem(w, (slice(None), slice(block * h, (block + 1) * h)))

    def _b(self, name: str) -> Tensor:
        return self.params[f"{name}.bias"]

    def pre_encode(self, batch: GraphBatch) -> tuple[Tensor, Tensor]:
        nx = Tensor(batch.node_x.astype(self.dtype))
        ex = Tensor(batch.edge_x.astype(self.dtype))
        h = linear(nx, self._w("pre.node"), self._b("pre.node"))
        e = linear(ex, self._w("pre.edge"), self._b("pre.edge"))
        return h, e

    def _message(self, name: str, h: Tensor, e: Tensor, gather_idx, scatter_idx, deg, n) -> Tensor:
        first, second = _mlp_names(name)
        node_part = linear(h, self._w(first, 0))
        edge_part = linear(e, self._w(first, 1), self._b(first))
        z = ops.gather_sum_relu(edge_part, [(node_part, gather_idx)])
        agg = ops.segment_sum(z, scatter_idx, n)
        bias = ops.mul(Tensor(deg[:, None].astype(self.dtype)), self._b(second))
        return ops.add(linear(agg, self._w(second)), bias)

    def message_pass(self, layer: int, h: Tensor, e: Tensor, batch: GraphBatch) -> tuple[Tensor, Tensor]:
        p = f"layer{layer}"
        n = batch.num_nodes
        m = self._message(f"{p}.msg_in", h, e, batch.src, batch.dst, batch.in_deg, n)
        out_name = f"{p}.msg_out" if self.cfg.directed else f"{p}.msg_in"
        m = ops.add(m, self._message(out_name, h, e, batch.dst, batch.src, batch.out_deg, n))
        first, second = _mlp_names(f"{p}.node")
        z = ops.relu(ops.add(linear(h, self._w(first, 0), self._b(first)), linear(m, self._w(first, 1))))
        h = ops.add(h, linear(z, self._w(second), self._b(second)))
        first, second = _mlp_names(f"{p}.edge")
        z = ops.gather_sum_relu(linear(e, self._w(first, 0), self._b(first)),
                                [(linear(h, self._w(first, 1)), batch.src),
                                 (linear(h, self._w(first, 2)), batch.dst)])
        e = ops.add(e, linear(z, self._w(second), self._b(second)))
        return h, e

    def encode_batch(self, batch: GraphBatch) -> Tensor:
        """[num_graphs, embed_dim] embeddings."""
        h, e = self.pre_encode(batch)
        for layer in range(self.cfg.num_layers):
            h, e = self.message_pass(layer, h, e, batch)
        r = e
        for i in range(self.cfg.readout_layers):
            r = ops.relu(linear(r, self._w(f"readout.{i}"), self._b(f"readout.{i}")))
        pooled = ops.segment_sum(r, batch.edge_graph, batch.num_graphs)
        pooled = ops.mul(pooled, Tensor((1.0 / batch.edge_counts)[:, None].astype(self.dtype)))
        return linear(pooled, self._w("proj"), self._b("proj"))

    def encode(self, graphs: ParamGraph | list[ParamGraph]) -> Tensor:
        single = isinstance(graphs, ParamGraph)
        out = self.encode_batch(GraphBatch.from_graphs([graphs] if single else graphs))
        return out[0] if single else out

    def embed(self, graph: ParamGraph) -> Embedding:
        with no_grad():
            v = self.encode(graph).data.astype(np.float64)
        return Embedding(v, str(graph.meta.get("scene_id", "")), str(graph.meta.get("family", "")),
                         {"arch": graph.meta.get("arch")})

    # -- persistence -------------------------------------------------------------------

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        meta = {"kind": "GMN", "config": asdict(self.cfg), **(extra or {})}
        ngc.save(path, meta, self.params.arrays())

    @classmethod
    def load(cls, path: str | Path, dtype=np.float32) -> tuple["GraphEncoder", dict]:
        meta, tensors = ngc.load(path)
        if meta.get("kind") != "GMN":
            raise ngc.ContainerError(f"{path}: not a GMN container")
        enc = cls(EncoderConfig(**meta["config"]), dtype=dtype)
        enc.params.load_arrays(tensors)
        return enc, meta
