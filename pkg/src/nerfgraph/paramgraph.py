"""Parameter graphs of NeRF checkpoints.

Every trainable scalar sits on exactly one edge. MLPs follow their
computation graph plus one bias node per non-input layer; a tri-plane adds one
node per spatial location and one per channel; a hash table adds, per level,
one node per table entry and one per feature dimension.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fields import PLANES, ArchDescriptor, NerfCheckpoint, tensor_shapes

NODE_NEURON, NODE_BIAS, NODE_TRIPLANAR, NODE_HASH = range(4)
EDGE_WEIGHT, EDGE_BIAS, EDGE_TRIPLANAR, EDGE_HASH = range(4)
NODE_TYPES = ("neuron", "bias", "triplanar", "hash_table")
EDGE_TYPES = ("linear_weight", "linear_bias", "triplanar", "hash_table")

NODE_FEATURE_DIM = 2 + len(NODE_TYPES)
EDGE_FEATURE_DIM = 1 + 1 + len(EDGE_TYPES) + 3 + 2


@dataclass
class ParamGraph:
    node_layer: np.ndarray
    node_neuron: np.ndarray
    node_type: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    weight: np.ndarray
    edge_layer: np.ndarray
    edge_type: np.ndarray
    ijk: np.ndarray
    table: np.ndarray
    entry: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def num_nodes(self) -> int:
        return len(self.node_type)

    @property
    def num_edges(self) -> int:
        return len(self.src)

    def validate(self) -> None:
        n, m = self.num_nodes, self.num_edges
        for name in ("node_layer", "node_neuron", "node_type"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length != {n}")
        for name in ("dst", "weight", "edge_layer", "edge_type", "table", "entry"):
            if len(getattr(self, name)) != m:
                raise ValueError(f"{name} length != {m}")
        if self.ijk.shape != (m, 3):
            raise ValueError("ijk must be [num_edges, 3]")
        if m and (self.src.min() < 0 or self.dst.min() < 0 or max(self.src.max(), self.dst.max()) >= n):
            raise ValueError("edge endpoint out of range")
        if np.any(self.node_type < 0) or np.any(self.node_type >= len(NODE_TYPES)):
            raise ValueError("unknown node type")

    def type_counts(self) -> dict[str, tuple[int, int]]:
        """(nodes, edges) per type name."""
        return {name: (int(np.sum(self.node_type == i)), int(np.sum(self.edge_type == i)))
                for i, name in enumerate(NODE_TYPES)}

    def node_features(self) -> np.ndarray:
        """[n, 6]: layer and neuron index scaled by their graph maxima, one-hot node type."""
        f = np.zeros((self.num_nodes, NODE_FEATURE_DIM))
        f[:, 0] = self.node_layer / max(int(self.node_layer.max(initial=0)), 1)
        f[:, 1] = self.node_neuron / max(int(self.node_neuron.max(initial=0)), 1)
        f[np.arange(self.num_nodes), 2 + self.node_type] = 1.0
        return f

    def edge_features(self) -> np.ndarray:
        """[m, 11]: weight, scaled layer, one-hot edge type, ijk, scaled table and entry index."""
        f = np.zeros((self.num_edges, EDGE_FEATURE_DIM))
        f[:, 0] = self.weight
        f[:, 1] = self.edge_layer / max(int(self.edge_layer.max(initial=0)), 1)
        f[np.arange(self.num_edges), 2 + self.edge_type] = 1.0
        f[:, 6:9] = self.ijk
        f[:, 9] = self.table / max(int(self.table.max(initial=0)), 1)
        f[:, 10] = self.entry / max(int(self.entry.max(initial=0)), 1)
        return f

    def permuted(self, node_perm: np.ndarray, edge_perm: np.ndarray | None = None) -> "ParamGraph":
        """Relabel node i as node_perm[i] and optionally reorder edges."""
        node_perm = np.asarray(node_perm)
        inv = np.argsort(node_perm)
        e = np.arange(self.num_edges) if edge_perm is None else np.asarray(edge_perm)
        return ParamGraph(self.node_layer[inv], self.node_neuron[inv], self.node_type[inv],
                          node_perm[self.src[e]], node_perm[self.dst[e]], self.weight[e],
                          self.edge_layer[e], self.edge_type[e], self.ijk[e], self.table[e],
                          self.entry[e], dict(self.meta))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["src", "dst", "weight", "edge_type", "layer", "i", "j", "k", "table", "entry"])
            for r in range(self.num_edges):
                w.writerow([int(self.src[r]), int(self.dst[r]), repr(float(self.weight[r])),
                            EDGE_TYPES[self.edge_type[r]], int(self.edge_layer[r]),
                            *(float(v) for v in self.ijk[r]), int(self.table[r]), int(self.entry[r])])


class _Builder:
    def __init__(self):
        self.nodes: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
        self.edges: list[dict] = []
        self.n = 0

    def add_nodes(self, layer, neuron, ntype) -> np.ndarray:
        neuron = np.asarray(neuron, dtype=np.int64)
        k = len(neuron)
        self.nodes.append((np.full(k, layer, dtype=np.int64), neuron, np.full(k, ntype, dtype=np.int64)))
        ids = np.arange(self.n, self.n + k)
        self.n += k
        return ids

    def add_edges(self, src, dst, weight, layer, etype, ijk=None, table=None, entry=None):
        m = len(src)
        self.edges.append({
            "src": np.asarray(src, dtype=np.int64), "dst": np.asarray(dst, dtype=np.int64),
            "weight": np.asarray(weight).reshape(m), "layer": np.full(m, layer, dtype=np.int64),
            "type": np.full(m, etype, dtype=np.int64),
            "ijk": np.zeros((m, 3)) if ijk is None else np.asarray(ijk, dtype=np.float64),
            "table": np.zeros(m, dtype=np.int64) if table is None else np.asarray(table, dtype=np.int64),
            "entry": np.zeros(m, dtype=np.int64) if entry is None else np.asarray(entry, dtype=np.int64),
        })

    def build(self, meta: dict) -> ParamGraph:
        cat = np.concatenate
        nl, nn, nt = (cat([n[i] for n in self.nodes]) for i in range(3))
        e = self.edges
        g = ParamGraph(nl, nn, nt, cat([x["src"] for x in e]), cat([x["dst"] for x in e]),
                       cat([x["weight"] for x in e]), cat([x["layer"] for x in e]),
                       cat([x["type"] for x in e]), cat([x["ijk"] for x in e]),
                       cat([x["table"] for x in e]), cat([x["entry"] for x in e]), meta)
        g.validate()
        return g


def _append_mlp(b: _Builder, layers, inputs: np.ndarray, layer_offset: int) -> None:
    """Weight edges input->output in (out, in) order, then bias edges, per linear layer."""
    prev = inputs
    for k, (w, bias) in enumerate(layers):
        out_dim, in_dim = w.shape
        if in_dim != len(prev):
            raise ValueError(f"linear layer {k} expects {in_dim} inputs, graph layer has {len(prev)}")
        outs = b.add_nodes(layer_offset + k + 1, np.arange(out_dim), NODE_NEURON)
        bias_node = b.add_nodes(layer_offset + k, [in_dim], NODE_BIAS)
        b.add_edges(np.tile(prev, out_dim), np.repeat(outs, in_dim), w, layer_offset + k, EDGE_WEIGHT)
        b.add_edges(np.repeat(bias_node, out_dim), outs, bias, layer_offset + k, EDGE_BIAS)
        prev = outs


def mlp_to_graph(layers) -> ParamGraph:
    """Graph of a plain MLP given as [(weight [out, in], bias [out]), ...]."""
    if not layers:
        raise ValueError("need at least one linear layer")
    b = _Builder()
    inputs = b.add_nodes(0, np.arange(layers[0][0].shape[1]), NODE_NEURON)
    _append_mlp(b, layers, inputs, 0)
    return b.build({"family": "MLP"})


def _plane_ijk(plane: str, r: int) -> np.ndarray:
    lin = np.linspace(-1.0, 1.0, r)
    a, bb = np.meshgrid(lin, lin, indexing="ij")
    a, bb = a.reshape(-1), bb.reshape(-1)
    zero = np.zeros_like(a)
    return {"xy": np.stack([a, bb, zero], 1),   # k = 0 on xy
            "xz": np.stack([a, zero, bb], 1),   # j = 0 on xz
            "yz": np.stack([zero, a, bb], 1)}[plane]  # i = 0 on yz


def triplane_to_graph(planes: dict[str, np.ndarray], mlp_layers=None, freq_dim: int = 0) -> ParamGraph:
    """Spatial nodes (3R^2) feed C shared channel nodes; the channel nodes join
    ``freq_dim`` coordinate nodes as the first MLP layer."""
    r, r2, c = planes["xy"].shape
    if r != r2 or any(planes[p].shape != (r, r, c) for p in PLANES):
        raise ValueError("tri-plane tensors must all be [R, R, C]")
    b = _Builder()
    spatial = b.add_nodes(0, np.arange(3 * r * r), NODE_TRIPLANAR)
    coords = b.add_nodes(1, np.arange(freq_dim), NODE_NEURON) if mlp_layers else np.arange(0)
    channels = b.add_nodes(1, freq_dim + np.arange(c), NODE_TRIPLANAR)
    for p_idx, pl in enumerate(PLANES):
        src = spatial[p_idx * r * r:(p_idx + 1) * r * r]
        b.add_edges(np.repeat(src, c), np.tile(channels, r * r), planes[pl].reshape(-1), 0,
                    EDGE_TRIPLANAR, ijk=np.repeat(_plane_ijk(pl, r), c, axis=0))
    if mlp_layers:
        _append_mlp(b, mlp_layers, np.concatenate([coords, channels]), 1)
    return b.build({"family": "TRI"})


def hash_to_graph(tables: list[np.ndarray], mlp_layers=None) -> ParamGraph:
    """Per level, T entry nodes each joined to F feature nodes; the N*F feature
    nodes form the first MLP layer."""
    if not tables:
        raise ValueError("need at least one hash table")
    t_size, f_dim = tables[0].shape
    b = _Builder()
    features = []
    for lvl, tab in enumerate(tables):
        if tab.shape != (t_size, f_dim):
            raise ValueError("hash tables must share shape [T, F]")
        entries = b.add_nodes(0, lvl * t_size + np.arange(t_size), NODE_HASH)
        feats = b.add_nodes(1, lvl * f_dim + np.arange(f_dim), NODE_HASH)
        e_idx = np.repeat(np.arange(t_size), f_dim)
        b.add_edges(entries[e_idx], np.tile(feats, t_size), tab.reshape(-1), 0, EDGE_HASH,
                    table=np.full(t_size * f_dim, lvl), entry=e_idx)
        features.append(feats)
    if mlp_layers:
        _append_mlp(b, mlp_layers, np.concatenate(features), 1)
    return b.build({"family": "HASH"})


def _mlp_layers(ckpt: NerfCheckpoint):
    n = ckpt.arch.mlp_hidden_layers + 1
    return [(ckpt.tensors[f"mlp.layer{i}.weight"], ckpt.tensors[f"mlp.layer{i}.bias"]) for i in range(n)]


def checkpoint_to_graph(ckpt: NerfCheckpoint) -> ParamGraph:
    arch = ckpt.arch
    layers = _mlp_layers(ckpt)
    if arch.family == "MLP":
        g = mlp_to_graph(layers)
    elif arch.family == "TRI":
        g = triplane_to_graph({p: ckpt.tensors[f"tri.plane{p}"] for p in PLANES}, layers, arch.freq_dim)
    elif arch.family == "HASH":
        g = hash_to_graph([ckpt.tensors[f"hash.level{i}.table"] for i in range(arch.hash_levels)], layers)
    else:
        raise ValueError(f"unknown family {arch.family!r}")
    g.meta.update({"arch": arch.name, **{k: ckpt.metadata[k] for k in ("scene_id", "label") if k in ckpt.metadata}})
    return g


def graph_to_tensors(g: ParamGraph, arch: ArchDescriptor) -> dict[str, np.ndarray]:
    """Invert the construction using only node and edge features."""
    shapes = tensor_shapes(arch)
    dtype = g.weight.dtype
    out = {k: np.zeros(s, dtype=dtype) for k, s in shapes.items()}
    offset = 0 if arch.family == "MLP" else 1
    nn_ = g.node_neuron
    for t in (EDGE_WEIGHT, EDGE_BIAS):
        sel = g.edge_type == t
        for k in np.unique(g.edge_layer[sel]):
            s = sel & (g.edge_layer == k)
            lin = int(k) - offset
            if t == EDGE_WEIGHT:
                out[f"mlp.layer{lin}.weight"][nn_[g.dst[s]], nn_[g.src[s]]] = g.weight[s]
            else:
                out[f"mlp.layer{lin}.bias"][nn_[g.dst[s]]] = g.weight[s]
    if arch.family == "TRI":
        r = arch.tri_resolution
        s = g.edge_type == EDGE_TRIPLANAR
        sp_idx = nn_[g.src[s]]
        plane, rem = np.divmod(sp_idx, r * r)
        a, bb = np.divmod(rem, r)
        ch = nn_[g.dst[s]] - arch.freq_dim
        for p_idx, pl in enumerate(PLANES):
            m = plane == p_idx
            out[f"tri.plane{pl}"][a[m], bb[m], ch[m]] = g.weight[s][m]
    elif arch.family == "HASH":
        f_dim = arch.hash_features
        s = g.edge_type == EDGE_HASH
        lvl, ent = g.table[s], g.entry[s]
        feat = nn_[g.dst[s]] - lvl * f_dim
        for level in range(arch.hash_levels):
            m = lvl == level
            out[f"hash.level{level}.table"][ent[m], feat[m]] = g.weight[s][m]
    return out
