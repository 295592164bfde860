"""Command-line pipeline: gen, fit, train, embed, classify, retrieve, eval.

Every subcommand reads one JSON run config (``--config``). Artifacts::

    <data_dir>/manifest.json, checkpoints/<scene>/<arch>.ngc
    <run_dir>/<mode>/encoder.ngc, decoder.ngc, train_log.jsonl, train_state.ngc,
                     embeddings.ngc, report.json, report.txt
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import shutil
import sys
from pathlib import Path

from . import datagen, downstream, training
from .config import ConfigError, RunConfig
from .fields import ArchDescriptor
from .gmn import GraphEncoder

log = logging.getLogger("nerfgraph")


class CliError(RuntimeError):
    pass


def _mode(cfg: RunConfig, mode: str | None) -> str:
    return training.normalize_mode(mode or cfg.framework.mode)


def _mode_dir(cfg: RunConfig, mode: str) -> Path:
    return cfg.run_dir / mode


def _dataset(cfg: RunConfig, families=None) -> training.NerfDataset:
    if not (cfg.data_dir / "manifest.json").exists():
        raise CliError(f"no dataset at {cfg.data_dir}; run `nerfgraph gen --config ...` first")
    return training.NerfDataset(cfg.data_dir, families)


def _variant_archs(manifest: dict) -> list[str]:
    return sorted(manifest.get("variants", {}))


def _base_arch(manifest: dict, family: str) -> str:
    for name, d in manifest["archs"].items():
        if d["family"] == family:
            return name
    raise CliError(f"no training architecture of family {family}")


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


# -- commands -----------------------------------------------------------------------------------

def cmd_gen(cfg: RunConfig, force: bool = False, unseen_variants: bool = False) -> dict:
    root = cfg.data_dir
    if (root / "manifest.json").exists() or (root / "checkpoints").exists():
        if not force:
            raise CliError(f"{root} already holds a dataset; pass --force to regenerate it")
        shutil.rmtree(root / "checkpoints", ignore_errors=True)
        (root / "manifest.json").unlink(missing_ok=True)
    data = dataclasses.replace(cfg.data, unseen_variants=cfg.data.unseen_variants or unseen_variants)
    archs, variants = datagen.preset_archs(data)
    manifest = datagen.build_dataset(root, data, cfg.nerf_fit, archs, variants)
    n_ckpt = sum(len(s["checkpoints"]) for s in manifest["scenes"])
    print(f"manifest: {root / 'manifest.json'}")
    print(f"scenes: {len(manifest['scenes'])} kept, {len(manifest['excluded'])} excluded; checkpoints: {n_ckpt}")
    return manifest


def cmd_fit(cfg: RunConfig, force: bool = False, unseen_variants: bool = False) -> dict:
    """Fit checkpoints missing from an existing dataset (all of them with ``force``)."""
    root = cfg.data_dir
    manifest = _dataset(cfg).manifest
    archs = {k: ArchDescriptor.from_dict(v) for k, v in manifest["archs"].items()}
    variants = {k: ArchDescriptor.from_dict(v) for k, v in manifest.get("variants", {}).items()}
    if unseen_variants and not variants:
        _, variants = datagen.preset_archs(dataclasses.replace(cfg.data, unseen_variants=True))
        manifest["variants"] = {k: v.to_dict() for k, v in variants.items()}
    jobs = []
    for s in manifest["scenes"]:
        wanted = list(archs.values()) + (list(variants.values()) if s["split"] == "test" else [])
        jobs += [(s, a) for a in wanted if force or a.name not in s["checkpoints"]]
    datagen.fit_checkpoints(root, manifest, jobs, cfg.nerf_fit, manifest["seed"])
    datagen.write_manifest(root, manifest)
    print(f"fitted {len(jobs)} checkpoints under {root}")
    return manifest


def cmd_train(cfg: RunConfig, mode: str | None = None, force: bool = False, resume: bool = False,
              stop_after_epoch: int | None = None) -> training.TrainResult | None:
    mode = _mode(cfg, mode)
    tc = dataclasses.replace(cfg.framework, mode=mode)
    ds = _dataset(cfg)
    out = _mode_dir(cfg, mode)
    enc_path = out / "encoder.ngc"
    if enc_path.exists() and not force and not resume:
        meta = GraphEncoder.load(enc_path)[1]
        if meta.get("train_config") == json.loads(json.dumps(tc.to_dict())) and \
                meta.get("data_manifest") == _file_digest(cfg.data_dir / "manifest.json"):
            print(f"{enc_path} is up to date; pass --force to retrain")
            return None
    res = training.train_framework(ds, tc, out, resume=resume, stop_after_epoch=stop_after_epoch)
    if res.completed:
        extra = {"mode": mode, "train_config": tc.to_dict(), "best_epoch": res.best_epoch,
                 "data_manifest": _file_digest(cfg.data_dir / "manifest.json"),
                 "t": res.framework.t, "b": res.framework.b}
        res.framework.encoder.save(enc_path, extra)
        res.framework.decoder.save(out / "decoder.ngc", extra)
        print(f"encoder: {enc_path} (best epoch {res.best_epoch})")
    else:
        print(f"stopped after {len(res.log)} steps; resume with --resume")
    return res


def _load_encoder(cfg: RunConfig, mode: str) -> tuple[GraphEncoder, Path]:
    path = _mode_dir(cfg, mode) / "encoder.ngc"
    if not path.exists():
        raise CliError(f"no trained encoder at {path}; run `nerfgraph train --mode {mode}` first")
    return GraphEncoder.load(path)[0], path


def cmd_embed(cfg: RunConfig, mode: str | None = None) -> downstream.EmbeddingStore:
    mode = _mode(cfg, mode)
    enc, enc_path = _load_encoder(cfg, mode)
    ds = _dataset(cfg)
    archs = list(ds.families) + _variant_archs(ds.manifest)
    store = downstream.embed_dataset(ds, enc, archs)
    store.meta = {"encoder": _file_digest(enc_path), "mode": mode}
    path = _mode_dir(cfg, mode) / "embeddings.ngc"
    store.save(path)
    print(f"embeddings: {path} ({len(store)} rows)")
    return store


def _embeddings(cfg: RunConfig, mode: str) -> downstream.EmbeddingStore:
    path = _mode_dir(cfg, mode) / "embeddings.ngc"
    _, enc_path = _load_encoder(cfg, mode)
    if path.exists():
        store = downstream.EmbeddingStore.load(path)
        if store.meta.get("encoder") == _file_digest(enc_path):
            return store
    return cmd_embed(cfg, mode)


def cmd_classify(cfg: RunConfig, mode: str | None, train_on: str, test_on: str) -> float:
    mode = _mode(cfg, mode)
    store = _embeddings(cfg, mode)
    known = set(store.column("arch"))
    for a in (train_on, test_on):
        if a not in known:
            raise CliError(f"no embeddings for architecture {a!r}; available: {sorted(known)}")
    acc, n = downstream.cross_accuracy(store, [train_on], [test_on], cfg.classifier)
    print(f"train {train_on} / test {test_on}: {acc:.2f}% on {n} NeRFs")
    return acc


def cmd_retrieve(cfg: RunConfig, mode: str | None, query: str, gallery: str, ks=None,
                 metric: str | None = None) -> downstream.RetrievalResult:
    mode = _mode(cfg, mode)
    store = _embeddings(cfg, mode)
    ks = list(ks or cfg.retrieval.ks)
    metric = metric or cfg.retrieval.metric
    q = store.select(split="test", arch=query)
    g = store.select(split="test", arch=gallery)
    if not len(q) or not len(g):
        raise CliError(f"empty query ({len(q)}) or gallery ({len(g)}) set for {query}/{gallery}")
    keys_q = [(r["scene_id"], r["arch"]) for r in q.rows]
    keys_g = [(r["scene_id"], r["arch"]) for r in g.rows]
    res = downstream.retrieve(q.matrix, g.matrix, ks, q.column("scene_id"), g.column("scene_id"),
                              keys_q, keys_g, metric)
    print(downstream.format_table(["k", "recall%", "random%"],
                                  [[k, res.recall[k], res.random[k]] for k in ks]))
    return res


def evaluate(cfg: RunConfig, mode: str) -> dict:
    store = _embeddings(cfg, mode)
    manifest = _dataset(cfg).manifest
    archs = list(manifest["families"])
    ks = list(cfg.retrieval.ks)
    report = {
        "mode": mode,
        "classes": manifest["classes"],
        "archs": archs,
        "classification": downstream.classification_matrix(store, archs, cfg.classifier),
        "retrieval": {m: downstream.retrieval_table(store, archs, ks, metric=m) for m in ("euclidean", "cosine")},
        "headline_metric": cfg.retrieval.metric,
    }
    report["same_family_accuracy"] = downstream.same_family_accuracy(report["classification"])
    classes = sorted(set(store.column("label")))
    variants = []
    for v in _variant_archs(manifest):
        fam = manifest["variants"][v]["family"]
        base = _base_arch(manifest, fam)
        if base not in archs or not len(store.select(arch=v)):
            continue
        acc, n = downstream.cross_accuracy(store, [base], [v], cfg.classifier, classes)
        variants.append({"variant": v, "train": base, "n_test": n, "accuracy": acc})
    report["variants"] = variants
    return report


def report_text(report: dict) -> str:
    parts = [f"mode: {report['mode']}", "", "classification (train -> test)",
             downstream.classification_text(report["classification"]),
             f"same-architecture mean: {report['same_family_accuracy']:.2f}%"]
    for metric, rows in report["retrieval"].items():
        parts += ["", f"retrieval ({metric})", downstream.retrieval_text(rows)]
    if report["variants"]:
        parts += ["", "unseen variants (classifier trained on the base architecture)",
                  downstream.format_table(["variant", "train", "n", "acc%"],
                                          [[r["variant"], r["train"], r["n_test"], r["accuracy"]]
                                           for r in report["variants"]])]
    return "\n".join(parts) + "\n"


def cmd_eval(cfg: RunConfig, mode: str | None = None) -> dict:
    mode = _mode(cfg, mode)
    report = evaluate(cfg, mode)
    out = _mode_dir(cfg, mode)
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    text = report_text(report)
    (out / "report.txt").write_text(text)
    print(text, end="")
    return report


# -- argument parsing -----------------------------------------------------------------------------

def _ks(text: str) -> list[int]:
    try:
        return [int(k) for k in text.split(",") if k]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad k list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, type=Path, help="run config JSON")
    common.add_argument("--seed", type=int, default=None, help="override every seed in the config")
    common.add_argument("--force", action="store_true", help="overwrite existing artifacts")
    common.add_argument("-v", "--verbose", action="store_true")
    moded = argparse.ArgumentParser(add_help=False)
    moded.add_argument("--mode", choices=["r", "rc", "c"], default=None,
                       help="loss mode: rendering, rendering + contrastive, contrastive")

    p = argparse.ArgumentParser(prog="nerfgraph", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen", parents=[common], help="generate scenes and fit NeRFs")
    g.add_argument("--unseen-variants", action="store_true", help="also fit reduced variant architectures")
    f = sub.add_parser("fit", parents=[common], help="fit checkpoints missing from an existing dataset")
    f.add_argument("--unseen-variants", action="store_true")
    t = sub.add_parser("train", parents=[common, moded], help="train encoder and decoder")
    t.add_argument("--resume", action="store_true", help="continue from the last epoch state")
    t.add_argument("--stop-after-epoch", type=int, default=None, help=argparse.SUPPRESS)
    sub.add_parser("embed", parents=[common, moded], help="embed every checkpoint")
    c = sub.add_parser("classify", parents=[common, moded], help="train on one architecture, test on another")
    c.add_argument("--train-on", required=True)
    c.add_argument("--test-on", required=True)
    r = sub.add_parser("retrieve", parents=[common, moded], help="cross-architecture retrieval")
    r.add_argument("--query", required=True)
    r.add_argument("--gallery", required=True)
    r.add_argument("--k", type=_ks, default=None)
    r.add_argument("--metric", choices=["euclidean", "cosine"], default=None)
    sub.add_parser("eval", parents=[common, moded], help="classification matrix and retrieval table")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.command == "gen":
            cmd_gen(cfg, args.force, args.unseen_variants)
        elif args.command == "fit":
            cmd_fit(cfg, args.force, args.unseen_variants)
        elif args.command == "train":
            cmd_train(cfg, args.mode, args.force, args.resume, args.stop_after_epoch)
        elif args.command == "embed":
            cmd_embed(cfg, args.mode)
        elif args.command == "classify":
            cmd_classify(cfg, args.mode, args.train_on, args.test_on)
        elif args.command == "retrieve":
            cmd_retrieve(cfg, args.mode, args.query, args.gallery, args.k, args.metric)
        elif args.command == "eval":
            cmd_eval(cfg, args.mode)
    except (CliError, ConfigError, ValueError, KeyError, FileNotFoundError, training.TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
