import hashlib
import json
import subprocess
import sys

import pytest

from nerfgraph import cli
from conftest import tiny_config


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Generated tiny dataset plus an rc-trained encoder, shared by the read-only tests."""
    tmp = tmp_path_factory.mktemp("cli")
    cfg = tiny_config(tmp)
    assert cli.main(["gen", "--config", str(cfg)]) == 0
    assert cli.main(["train", "--config", str(cfg), "--mode", "rc"]) == 0
    return cfg


def test_gen_counts_and_force(tmp_path, capsys):
    cfg = tiny_config(tmp_path, data={"num_scenes": 4, "unseen_variants": False})
    code, out, _ = run(capsys, "gen", "--config", cfg)
    assert code == 0 and "checkpoints: 12" in out
    manifest = tmp_path / "data" / "manifest.json"
    digest = hashlib.sha256(manifest.read_bytes()).hexdigest()
    code, _, err = run(capsys, "gen", "--config", cfg)
    assert code == 1 and "--force" in err
    code, _, _ = run(capsys, "gen", "--config", cfg, "--force")
    assert code == 0 and hashlib.sha256(manifest.read_bytes()).hexdigest() == digest


def test_gen_unseen_variants_flag(tmp_path, capsys):
    cfg = tiny_config(tmp_path, data={"num_scenes": 4, "unseen_variants": False, "families": ["TRI"]})
    code, out, _ = run(capsys, "gen", "--config", cfg, "--unseen-variants")
    assert code == 0
    m = json.loads((tmp_path / "data" / "manifest.json").read_text())
    assert sorted(m["variants"]) and all(v["family"] == "TRI" for v in m["variants"].values())


def test_train_rc_logs_both_losses(pipeline, capsys):
    log = pipeline.parent / "runs" / "rc" / "train_log.jsonl"
    entries = [json.loads(x) for x in log.read_text().splitlines()]
    assert entries and all(e["L_R"] is not None and e["L_C"] is not None for e in entries)
    code, out, _ = run(capsys, "train", "--config", pipeline, "--mode", "rc")
    assert code == 0 and "up to date" in out


def test_single_architecture_modes(tmp_path, capsys):
    cfg = tiny_config(tmp_path, data={"num_scenes": 4, "unseen_variants": False, "families": ["MLP"]},
                      framework={"epochs": 1})
    assert run(capsys, "gen", "--config", cfg)[0] == 0
    code, _, err = run(capsys, "train", "--config", cfg, "--mode", "c")
    assert code == 1 and "no positive pairs" in err
    code, _, err = run(capsys, "train", "--config", cfg, "--mode", "rc")
    assert code == 1 and "multi-architecture" in err
    code, out, _ = run(capsys, "train", "--config", cfg, "--mode", "r")
    assert code == 0 and (tmp_path / "runs" / "r" / "encoder.ngc").exists()


def test_interrupted_training_resumes_identically(pipeline, tmp_path, capsys):
    cfg = tiny_config(tmp_path, framework={"epochs": 3}, paths={"data_dir": str(pipeline.parent / "data"),
                                                                "run_dir": "runs"})
    code, out, _ = run(capsys, "train", "--config", cfg, "--mode", "r", "--stop-after-epoch", "1")
    assert code == 0 and "--resume" in out
    assert run(capsys, "train", "--config", cfg, "--mode", "r", "--resume")[0] == 0
    resumed = (tmp_path / "runs" / "r" / "train_log.jsonl").read_text().splitlines()
    cfg2 = tiny_config(tmp_path, framework={"epochs": 3}, paths={"data_dir": str(pipeline.parent / "data"),
                                                                 "run_dir": "runs2"})
    assert run(capsys, "train", "--config", cfg2, "--mode", "r")[0] == 0
    straight = (tmp_path / "runs2" / "r" / "train_log.jsonl").read_text().splitlines()

    def losses(lines):
        return [{k: v for k, v in json.loads(x).items() if k != "wall_time"} for x in lines]
    assert len(resumed) == 3 * 1 and losses(resumed) == losses(straight)
    assert (tmp_path / "runs/r/encoder.ngc").read_bytes() == (tmp_path / "runs2/r/encoder.ngc").read_bytes()


def test_missing_artifacts_give_hints(tmp_path, capsys):
    cfg = tiny_config(tmp_path)
    code, _, err = run(capsys, "train", "--config", cfg)
    assert code == 1 and "nerfgraph gen" in err
    (tmp_path / "data").mkdir()
    code, _, err = run(capsys, "eval", "--config", cfg, "--mode", "r")
    assert code == 1 and "nerfgraph train --mode r" in err


def test_embed_classify_retrieve(pipeline, capsys):
    code, out, _ = run(capsys, "embed", "--config", pipeline, "--mode", "rc")
    assert code == 0 and "rows" in out
    code, out, _ = run(capsys, "classify", "--config", pipeline, "--mode", "rc", "--train-on", "MLP",
                       "--test-on", "HASH")
    assert code == 0 and out.count("%") == 1 and out.startswith("train MLP / test HASH")
    code, out, _ = run(capsys, "retrieve", "--config", pipeline, "--mode", "rc", "--query", "MLP",
                       "--gallery", "TRI", "--k", "1,5,10")
    lines = out.strip().splitlines()
    assert code == 0 and lines[0].split() == ["k", "recall%", "random%"] and len(lines) == 2 + 3
    code, _, err = run(capsys, "classify", "--config", pipeline, "--mode", "rc", "--train-on", "XYZ",
                       "--test-on", "HASH")
    assert code == 1 and "available" in err


def test_eval_report_layout_and_idempotence(pipeline, capsys):
    assert run(capsys, "eval", "--config", pipeline, "--mode", "rc")[0] == 0
    out_dir = pipeline.parent / "runs" / "rc"
    first = (out_dir / "report.json").read_bytes()
    report = json.loads(first)
    fams = json.loads((pipeline.parent / "data" / "manifest.json").read_text())["families"]
    assert report["archs"] == fams
    assert len(report["classification"]) == len(fams) ** 2 + 1
    for metric in ("euclidean", "cosine"):
        pairs = [(r["query"], r["gallery"]) for r in report["retrieval"][metric]]
        assert len(pairs) == 6 and {p for q in pairs for p in q} == set(fams)
    assert report["variants"]
    text = (out_dir / "report.txt").read_text()
    assert all(f in text for f in fams)
    assert run(capsys, "eval", "--config", pipeline, "--mode", "rc")[0] == 0
    assert (out_dir / "report.json").read_bytes() == first


def test_bad_config_is_rejected_before_work(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"data": {"bogus": 1}}))
    code, _, err = run(capsys, "gen", "--config", p)
    assert code == 1 and "bogus" in err
    assert not (tmp_path / "data").exists()


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "nerfgraph", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for name in ("gen", "fit", "train", "embed", "classify", "retrieve", "eval"):
        assert name in out.stdout
