import json

import pytest

from nerfgraph.config import ConfigError, RunConfig


def test_empty_document_gives_defaults():
    cfg = RunConfig.from_dict({})
    assert cfg.framework.mode == "rc" and cfg.framework.lam == 2e-2
    assert cfg.retrieval.ks == [1, 5, 10] and cfg.retrieval.metric == "euclidean"
    assert cfg.framework.decoder.embed_dim == cfg.framework.encoder.embed_dim


@pytest.mark.parametrize("raw, match", [
    ({"extra": {}}, "unknown sections"),
    ({"data": {"num_scene": 3}}, r"data: unknown keys \['num_scene'\]"),
    ({"framework": {"encoder": {"width": 3}}}, "framework.encoder: unknown keys"),
    ({"framework": {"decoder": {"embed_dim": 8}}}, "framework.decoder: unknown keys"),
    ({"framework": {"lam": -1}}, "framework: lam"),
    ({"framework": {"mode": "x"}}, "unknown loss mode"),
    ({"retrieval": {"metric": "l1"}}, "unknown retrieval metric"),
    ({"paths": []}, "expected an object"),
    ([], "JSON object"),
])
def test_rejections(raw, match):
    with pytest.raises(ConfigError, match=match):
        RunConfig.from_dict(raw)


def test_invalid_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{nope")
    with pytest.raises(ConfigError, match="invalid JSON"):
        RunConfig.load(p)


def test_roundtrip_seed_and_digest(tmp_path):
    raw = {"data": {"num_scenes": 12}, "framework": {"mode": "r", "encoder": {"embed_dim": 32}},
           "paths": {"data_dir": "d", "run_dir": "r"}}
    p = tmp_path / "c.json"
    p.write_text(json.dumps(raw))
    cfg = RunConfig.load(p)
    assert cfg.data_dir == (tmp_path / "d").resolve() and cfg.run_dir == (tmp_path / "r").resolve()
    assert RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    assert cfg.framework.decoder.embed_dim == 32
    s = cfg.with_seed(7)
    assert (s.data.seed, s.framework.seed, s.classifier.seed) == (7, 7, 7)
    assert cfg.digest() == RunConfig.load(p).digest()
    assert s.digest() != cfg.digest()
    assert s.digest("paths") == cfg.digest("paths")
