"""Shared fixtures: a finite-difference oracle and a tiny generated dataset."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from nerfgraph import datagen, fields


def numeric_grad(f, x: np.ndarray, eps: float = 1e-5, entries: np.ndarray | None = None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (all entries, or the flat ``entries`` subset)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in (range(flat.size) if entries is None else entries):
        old = flat[i]
        flat[i] = old + eps
        hi = f(x)
        flat[i] = old - eps
        lo = f(x)
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def param_grad_errors(params, loss, rng: np.random.Generator | None = None, max_entries: int = 0) -> dict:
    """Relative error of backprop vs central differences for every tensor in a ParamSet.

    With ``max_entries`` set, larger tensors are probed on a random subset of entries.
    """
    from nerfgraph.adkernel import backward

    params.zero_grad()
    backward(loss())
    errors = {}
    for name, t in params.items():
        entries = None
        if max_entries and t.data.size > max_entries:
            entries = np.sort((rng or np.random.default_rng(0)).choice(t.data.size, max_entries, replace=False))

        def f(v, t=t):
            saved = t.data.copy()
            t.data[...] = v
            out = float(loss().data)
            t.data[...] = saved
            return out
        num = numeric_grad(f, t.data.copy(), entries=entries)
        got = np.zeros_like(t.data) if t.grad is None else t.grad
        if entries is not None:
            num, got = num.reshape(-1)[entries], got.reshape(-1)[entries]
        errors[name] = rel_err(got, num)
    return errors


def directional_errors(tensors, loss, rng: np.random.Generator, n_dirs: int = 3, eps: float = 1e-5) -> list[float]:
    """Backprop directional derivatives vs central differences along random unit directions.

    ``tensors`` are autodiff leaves; each direction perturbs all of them jointly.
    """
    from nerfgraph.adkernel import backward

    for t in tensors:
        t.grad = None
    backward(loss())
    grads = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    errors = []
    for _ in range(n_dirs):
        dirs = [rng.normal(size=t.data.shape) for t in tensors]
        scale = np.sqrt(sum(float((d * d).sum()) for d in dirs))
        dirs = [d / scale for d in dirs]
        saved = [t.data.copy() for t in tensors]

        def shifted(sign):
            for t, s0, d in zip(tensors, saved, dirs):
                t.data[...] = s0 + sign * eps * d
            out = float(loss().data)
            for t, s0 in zip(tensors, saved):
                t.data[...] = s0
            return out
        num = (shifted(1.0) - shifted(-1.0)) / (2 * eps)
        ana = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
        errors.append(abs(ana - num) / max(abs(ana), abs(num), 1e-12))
    return errors


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64).ravel(), np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


TINY_DATA = {"num_scenes": 8, "splits": {"train": 0.5, "val": 0.25, "test": 0.25}, "resolution": 16,
             "num_views": 8, "seed": 5, "unseen_variants": True}
TINY_FIT = {"steps": 12, "rays_per_step": 64, "n_samples": 8, "psnr_threshold": 0.0, "eval_samples": 8}
TINY_FRAMEWORK = {"mode": "rc", "epochs": 2, "batch_size": 4, "rays_per_nerf": 64, "n_samples": 8,
                  "max_lr": 1e-3, "encoder": {"hidden_dim": 8, "embed_dim": 16, "num_layers": 2},
                  "decoder": {"freq_dim": 12, "hidden_dim": 16}}
TINY_CLASSIFIER = {"epochs": 5, "max_lr": 1e-2}


def tiny_config(tmp: Path, **overrides) -> Path:
    raw = {"data": dict(TINY_DATA), "nerf_fit": dict(TINY_FIT), "framework": json.loads(json.dumps(TINY_FRAMEWORK)),
           "classifier": dict(TINY_CLASSIFIER), "paths": {"data_dir": "data", "run_dir": "runs"}}
    for section, vals in overrides.items():
        raw[section].update(vals)
    path = tmp / "config.json"
    path.write_text(json.dumps(raw))
    return path


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory) -> Path:
    """8 scenes x 3 families (+ variants on the test split), fitted for a handful of steps."""
    root = tmp_path_factory.mktemp("tiny") / "data"
    cfg = datagen.DataConfig(**TINY_DATA)
    archs, variants = datagen.preset_archs(cfg)
    datagen.build_dataset(root, cfg, datagen.FitConfig(**TINY_FIT), archs, variants)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_checkpoint(arch: fields.ArchDescriptor, seed: int = 0) -> fields.NerfCheckpoint:
    """Random weights; hash tables are O(1) so their gradients sit well above FD noise."""
    rng = np.random.default_rng(seed)
    tensors = fields.init_tensors(arch, rng)
    for name in tensors:
        if name.startswith("hash."):
            tensors[name] = rng.normal(0.0, 0.5, tensors[name].shape).astype(np.float32)
    return fields.NerfCheckpoint(arch, tensors, {"scene_id": f"s{seed}", "label": "sphere"})


SMALL = {
    "MLP": fields.mlp_arch(hidden_layers=2, hidden_dim=6, num_freqs=2),
    "TRI": fields.tri_arch(hidden_layers=2, hidden_dim=6, resolution=4, channels=3, num_freqs=2),
    "HASH": fields.hash_arch(hidden_layers=2, hidden_dim=6, levels=2, table_size_log2=5, features=2,
                             min_resolution=2, max_resolution=6),
}


def random_graph(rng: np.random.Generator, max_nodes: int = 12, max_edges: int = 30):
    """Arbitrary well-formed parameter graph: random topology, types and feature values."""
    from nerfgraph.paramgraph import ParamGraph

    n = int(rng.integers(2, max_nodes + 1))
    m = int(rng.integers(1, max_edges + 1))
    return ParamGraph(
        node_layer=rng.integers(0, 4, n), node_neuron=rng.integers(0, 8, n), node_type=rng.integers(0, 4, n),
        src=rng.integers(0, n, m), dst=rng.integers(0, n, m), weight=rng.normal(size=m),
        edge_layer=rng.integers(0, 4, m), edge_type=rng.integers(0, 4, m), ijk=rng.uniform(-1, 1, (m, 3)),
        table=rng.integers(0, 3, m), entry=rng.integers(0, 16, m), meta={"family": "MLP"})


# -- acceptance verdicts ----------------------------------------------------------------------

ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
