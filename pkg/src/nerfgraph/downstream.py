"""Frozen-encoder evaluation: embedding store, classifier, retrieval and reports."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ngc
from .adkernel import (AdamState, ParamSet, Tensor, adamw_step, backward, init_linear, linear, no_grad,
                       onecycle_lr, ops)
from .gmn import GraphEncoder

DEFAULT_K = (1, 5, 10)


# -- embedding store --------------------------------------------------------------------------

@dataclass
class EmbeddingStore:
    """Row-aligned embedding matrix and per-row records (scene_id, label, arch, family, split)."""

    matrix: np.ndarray
    rows: list[dict]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float32)
        if self.matrix.ndim != 2 or len(self.rows) != self.matrix.shape[0]:
            raise ValueError("embedding matrix and row index disagree")

    def __len__(self) -> int:
        return len(self.rows)

    def select(self, **conds) -> "EmbeddingStore":
        keep = [i for i, r in enumerate(self.rows) if all(r.get(k) == v for k, v in conds.items())]
        return EmbeddingStore(self.matrix[keep], [self.rows[i] for i in keep])

    def select_in(self, key: str, values) -> "EmbeddingStore":
        values = set(values)
        keep = [i for i, r in enumerate(self.rows) if r.get(key) in values]
        return EmbeddingStore(self.matrix[keep], [self.rows[i] for i in keep])

    def column(self, key: str) -> list:
        return [r[key] for r in self.rows]

    def save(self, path: str | Path) -> None:
        ngc.save(path, {"kind": "embeddings", "rows": self.rows, "meta": self.meta}, {"embeddings": self.matrix})

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingStore":
        meta, tensors = ngc.load(path)
        if meta.get("kind") != "embeddings":
            raise ngc.ContainerError(f"{path}: not an embedding store")
        return cls(tensors["embeddings"], meta["rows"], meta.get("meta", {}))


def embed_dataset(ds, encoder: GraphEncoder, archs: list[str] | None = None,
                  splits: list[str] | None = None, batch: int = 8) -> EmbeddingStore:
    """One embedding per available (scene, arch) checkpoint, in manifest order."""
    archs = list(archs or ds.families)
    items = []
    for sid in ds.scenes():
        s = ds.scene(sid)
        if splits is not None and s["split"] not in splits:
            continue
        for arch in archs:
            if ds.has(sid, arch):
                fam = ds.checkpoint(sid, arch).arch.family
                items.append((sid, arch, {"scene_id": sid, "label": s["label"], "arch": arch,
                                          "family": fam, "split": s["split"]}))
    if not items:
        return EmbeddingStore(np.zeros((0, encoder.cfg.embed_dim), dtype=np.float32), [])
    mats = []
    with no_grad():
        for lo in range(0, len(items), batch):
            chunk = items[lo:lo + batch]
            mats.append(encoder.encode([ds.graph(sid, arch) for sid, arch, _ in chunk]).data)
    return EmbeddingStore(np.concatenate(mats), [r for _, _, r in items])


# -- classifier --------------------------------------------------------------------------------

@dataclass
class ClassifierConfig:
    dims: list[int] | None = None     # default: embed_dim, embed_dim/2, embed_dim/4
    dropout: float = 0.2
    epochs: int = 150
    batch_size: int = 256
    max_lr: float = 1e-4
    weight_decay: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        if self.dims is not None and len(self.dims) < 1:
            raise ValueError("classifier needs at least one block")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    def block_dims(self, embed_dim: int) -> list[int]:
        return list(self.dims) if self.dims else [embed_dim, max(embed_dim // 2, 1), max(embed_dim // 4, 1)]


PAPER_CLASSIFIER = ClassifierConfig(dims=[1024, 512, 256])


class Classifier:
    """(linear -> batch-norm -> ReLU -> dropout) blocks and a linear head.

    Inputs are standardized per dimension with the training set's statistics.
    Encoder embeddings share a large common offset and differ by a small
    per-scene part; without this step the lag in the first batch-norm's
    running mean swamps that part in eval mode.
    """

    def __init__(self, in_dim: int, classes: list[str], cfg: ClassifierConfig, dtype=np.float64):
        self.cfg = cfg
        self.classes = list(classes)
        self.dims = cfg.block_dims(in_dim)
        self.params = ParamSet(dtype)
        self.buffers: dict[str, np.ndarray] = {"input.mean": np.zeros(in_dim, dtype=dtype),
                                                "input.std": np.ones(in_dim, dtype=dtype)}
        rng = np.random.default_rng([cfg.seed, 21])
        prev = in_dim
        for i, d in enumerate(self.dims):
            init_linear(self.params, f"block{i}.linear", prev, d, rng)
            self.params.add(f"block{i}.bn.gamma", np.ones(d))
            self.params.add(f"block{i}.bn.beta", np.zeros(d))
            self.buffers[f"block{i}.bn.mean"] = np.zeros(d, dtype=dtype)
            self.buffers[f"block{i}.bn.var"] = np.ones(d, dtype=dtype)
            prev = d
        init_linear(self.params, "head", prev, len(self.classes), rng)

    def logits(self, x: np.ndarray, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        x = (np.asarray(x, dtype=self.params.dtype) - self.buffers["input.mean"]) / self.buffers["input.std"]
        h = Tensor(x)
        p = self.params
        for i in range(len(self.dims)):
            h = linear(h, p[f"block{i}.linear.weight"], p[f"block{i}.linear.bias"])
            h = ops.batch_norm(h, p[f"block{i}.bn.gamma"], p[f"block{i}.bn.beta"],
                               self.buffers[f"block{i}.bn.mean"], self.buffers[f"block{i}.bn.var"], training)
            h = ops.dropout(ops.relu(h), self.cfg.dropout, rng, training)
        return linear(h, p["head.weight"], p["head.bias"])

    def predict(self, x: np.ndarray) -> list[str]:
        with no_grad():
            idx = np.argmax(self.logits(x).data, axis=1)
        return [self.classes[i] for i in idx]


def train_classifier(x: np.ndarray, labels: list[str], cfg: ClassifierConfig,
                     classes: list[str] | None = None) -> Classifier:
    """Softmax cross-entropy with AdamW and a one-cycle schedule."""
    classes = list(classes) if classes is not None else sorted(set(labels))
    if len(set(labels)) < 2:
        raise ValueError("train_classifier needs at least two classes in the training labels")
    x = np.asarray(x, dtype=np.float64)
    y = np.array([classes.index(lab) for lab in labels])
    clf = Classifier(x.shape[1], classes, cfg)
    std = x.std(axis=0)
    clf.buffers["input.mean"] = x.mean(axis=0)
    clf.buffers["input.std"] = np.where(std > 0, std, 1.0)
    params = clf.params.tensors()
    decay = [p.ndim >= 2 for p in params]
    opt = AdamState.init(params)
    rng = np.random.default_rng([cfg.seed, 22])
    n = len(x)
    bs = min(cfg.batch_size, n)
    per_epoch = [(lo, min(lo + bs, n)) for lo in range(0, n, bs)]
    # a trailing single-sample batch cannot be batch-normalized; fold it into its predecessor
    if len(per_epoch) > 1 and per_epoch[-1][1] - per_epoch[-1][0] < 2:
        per_epoch = per_epoch[:-2] + [(per_epoch[-2][0], n)]
    total = cfg.epochs * len(per_epoch)
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for lo, hi in per_epoch:
            idx = order[lo:hi]
            logp = ops.log_softmax(clf.logits(x[idx], True, rng), axis=1)
            onehot = np.zeros((len(idx), len(classes)))
            onehot[np.arange(len(idx)), y[idx]] = 1.0
            loss = ops.mul(ops.sum(ops.mul(logp, onehot)), -1.0 / len(idx))
            clf.params.zero_grad()
            backward(loss)
            adamw_step(params, [p.grad for p in params], opt, onecycle_lr(step, total, cfg.max_lr),
                       cfg.weight_decay, decay_mask=decay)
            step += 1
    return clf


def accuracy(pred: list[str], labels: list[str]) -> float:
    if len(pred) != len(labels):
        raise ValueError("prediction and label counts differ")
    if not labels:
        return float("nan")
    return 100.0 * float(np.mean([p == t for p, t in zip(pred, labels)]))


def evaluate_classifier(clf: Classifier, x: np.ndarray, labels: list[str]) -> float:
    unknown = set(labels) - set(clf.classes)
    if unknown:
        raise ValueError(f"labels {sorted(unknown)} not in the classifier's label space")
    return accuracy(clf.predict(x), list(labels))


def cross_accuracy(store: EmbeddingStore, train_archs: list[str], test_archs: list[str],
                   cfg: ClassifierConfig, classes: list[str] | None = None,
                   train_split: str = "train", test_split: str = "test") -> tuple[float, int]:
    """Train on the ``train_archs`` rows of one split, test on the ``test_archs`` rows of another."""
    classes = classes or sorted(set(store.column("label")))
    tr = store.select_in("arch", train_archs).select(split=train_split)
    te = store.select_in("arch", test_archs).select(split=test_split)
    clf = train_classifier(tr.matrix, tr.column("label"), cfg, classes)
    return evaluate_classifier(clf, te.matrix, te.column("label")), len(te)


def classification_matrix(store: EmbeddingStore, archs: list[str], cfg: ClassifierConfig,
                          train_split: str = "train", test_split: str = "test") -> list[dict]:
    """Train on one architecture, test on each, plus an ALL/ALL row: |archs|^2 + 1 rows."""
    classes = sorted(set(store.column("label")))
    rows = []
    for tr in archs + ["ALL"]:
        tr_archs = archs if tr == "ALL" else [tr]
        tr_store = store.select_in("arch", tr_archs).select(split=train_split)
        clf = train_classifier(tr_store.matrix, tr_store.column("label"), cfg, classes)
        for te in (archs if tr != "ALL" else ["ALL"]):
            te_store = store.select_in("arch", archs if te == "ALL" else [te]).select(split=test_split)
            rows.append({"train": tr, "test": te, "n_test": len(te_store),
                         "accuracy": evaluate_classifier(clf, te_store.matrix, te_store.column("label"))})
    return rows


# -- retrieval --------------------------------------------------------------------------------

@dataclass
class RetrievalResult:
    ranks: np.ndarray                 # [Q, G] gallery indices, nearest first
    recall: dict[int, float]
    random: dict[int, float]
    num_queries: int
    excluded: int
    gallery_size: int
    metric: str = "euclidean"

    def to_dict(self) -> dict:
        return {"recall": {str(k): v for k, v in self.recall.items()},
                "random": {str(k): v for k, v in self.random.items()},
                "num_queries": self.num_queries, "excluded": self.excluded,
                "gallery_size": self.gallery_size, "metric": self.metric}


def pairwise_distances(q: np.ndarray, g: np.ndarray, metric: str = "euclidean") -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ValueError(f"query {q.shape} and gallery {g.shape} must share the embedding width")
    if metric == "euclidean":
        return np.sqrt(np.sum((q[:, None, :] - g[None, :, :]) ** 2, axis=2))
    if metric == "cosine":
        qn = q / np.linalg.norm(q, axis=1, keepdims=True)
        gn = g / np.linalg.norm(g, axis=1, keepdims=True)
        return 1.0 - qn @ gn.T
    raise ValueError(f"unknown metric {metric!r}")


def random_recall(k: int, gallery_size: int) -> float:
    return 100.0 * k / gallery_size


def retrieve(queries: np.ndarray, gallery: np.ndarray, ks=DEFAULT_K, query_ids=None, gallery_ids=None,
             query_keys=None, gallery_keys=None, metric: str = "euclidean") -> RetrievalResult:
    """Exact nearest neighbours; ties break toward the lower gallery index.

    A query hits at k when a gallery item with its id ranks within the top k.
    ``*_keys`` identify checkpoints so a query never retrieves itself.
    Queries whose id is absent from the gallery are excluded and counted.
    """
    dist = pairwise_distances(queries, gallery, metric)
    nq, ng = dist.shape
    if ng == 0:
        raise ValueError("retrieve: empty gallery")
    if query_keys is not None and gallery_keys is not None:
        gk = {key: j for j, key in enumerate(gallery_keys)}
        for i, key in enumerate(query_keys):
            if key in gk:
                dist[i, gk[key]] = np.inf
    ranks = np.argsort(dist, axis=1, kind="stable")
    ks = [int(k) for k in ks]
    hits = {k: 0 for k in ks}
    excluded = 0
    if query_ids is None:
        query_ids = list(range(nq))
        gallery_ids = list(range(ng))
    gallery_ids = np.asarray(gallery_ids, dtype=object)
    for i in range(nq):
        match = gallery_ids[ranks[i]] == query_ids[i]
        if query_keys is not None and gallery_keys is not None:
            match &= np.isfinite(dist[i, ranks[i]])
        if not match.any():
            excluded += 1
            continue
        first = int(np.argmax(match))
        for k in ks:
            hits[k] += first < k
    counted = nq - excluded
    recall = {k: (100.0 * hits[k] / counted if counted else float("nan")) for k in ks}
    return RetrievalResult(ranks, recall, {k: random_recall(k, ng) for k in ks}, counted, excluded, ng, metric)


def retrieval_table(store: EmbeddingStore, archs: list[str], ks=DEFAULT_K, split: str = "test",
                    metric: str = "euclidean") -> list[dict]:
    """Query/gallery recall for every ordered pair of distinct architectures."""
    rows = []
    for qf in archs:
        for gf in archs:
            if qf == gf:
                continue
            q = store.select(split=split, arch=qf)
            g = store.select(split=split, arch=gf)
            res = retrieve(q.matrix, g.matrix, ks, q.column("scene_id"), g.column("scene_id"), metric=metric)
            rows.append({"query": qf, "gallery": gf, **res.to_dict()})
    return rows


# -- reports --------------------------------------------------------------------------------

def format_table(header: list[str], rows: list[list]) -> str:
    cells = [[str(h) for h in header]] + [[f"{c:.2f}" if isinstance(c, float) else str(c) for c in r]
                                          for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) if j else c.ljust(w) for j, (c, w) in enumerate(zip(r, widths)))
             for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def classification_text(rows: list[dict]) -> str:
    return format_table(["train", "test", "n", "acc%"],
                        [[r["train"], r["test"], r["n_test"], r["accuracy"]] for r in rows])


def retrieval_text(rows: list[dict], ks=DEFAULT_K) -> str:
    header = ["query/gallery"] + [f"R@{k}" for k in ks] + [f"rand@{k}" for k in ks]
    body = [[f"{r['query']}/{r['gallery']}"] + [r["recall"][str(k)] for k in ks]
            + [r["random"][str(k)] for k in ks] for r in rows]
    return format_table(header, body)


def same_family_accuracy(rows: list[dict]) -> float:
    diag = [r["accuracy"] for r in rows if r["train"] == r["test"] and r["train"] != "ALL"]
    return float(np.mean(diag))


def recall_at(rows: list[dict], query: str, gallery: str, k: int = 1) -> float:
    for r in rows:
        if r["query"] == query and r["gallery"] == gallery:
            return float(r["recall"][str(k)])
    raise KeyError(f"no retrieval row for {query}/{gallery}")
