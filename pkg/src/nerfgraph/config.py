"""Single-document run configuration with strict key checking."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .datagen import DataConfig, FitConfig
from .decoder import DecoderConfig
from .downstream import DEFAULT_K, ClassifierConfig
from .gmn import EncoderConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RetrievalConfig:
    ks: list[int] = field(default_factory=lambda: list(DEFAULT_K))
    metric: str = "euclidean"

    def __post_init__(self):
        if not self.ks or any(int(k) < 1 for k in self.ks):
            raise ValueError("retrieval ks must be positive integers")
        if self.metric not in ("euclidean", "cosine"):
            raise ValueError(f"unknown retrieval metric {self.metric!r}")


@dataclass
class PathsConfig:
    data_dir: str = "data"
    run_dir: str = "runs"


SECTIONS = {
    "data": DataConfig,
    "nerf_fit": FitConfig,
    "framework": TrainConfig,
    "classifier": ClassifierConfig,
    "retrieval": RetrievalConfig,
    "paths": PathsConfig,
}


def _check_keys(where: str, cls, raw: dict, exclude=()) -> None:
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object, got {type(raw).__name__}")
    names = {f.name for f in dataclasses.fields(cls)} - set(exclude)
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}; allowed: {sorted(names)}")


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    nerf_fit: FitConfig = field(default_factory=FitConfig)
    framework: TrainConfig = field(default_factory=TrainConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    base_dir: Path = field(default=Path("."), compare=False, repr=False)

    @classmethod
    def from_dict(cls, raw: dict, base_dir: str | Path = ".") -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(raw) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown sections {unknown}; allowed: {sorted(SECTIONS)}")
        kwargs = {}
        for name, scls in SECTIONS.items():
            sec = raw.get(name, {})
            _check_keys(name, scls, sec)
            sec = dict(sec)
            if name == "framework":
                for key, ncls in (("encoder", EncoderConfig), ("decoder", DecoderConfig)):
                    if key in sec:
                        # the decoder's embedding width always follows the encoder's
                        _check_keys(f"framework.{key}", ncls, sec[key],
                                    exclude=("embed_dim",) if key == "decoder" else ())
            try:
                kwargs[name] = scls(**sec)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{name}: {exc}") from None
        return cls(**kwargs, base_dir=Path(base_dir))

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(raw, path.parent)

    def to_dict(self) -> dict:
        out = {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}
        out["framework"]["decoder"].pop("embed_dim")
        return out

    def with_seed(self, seed: int) -> "RunConfig":
        """Reseed every stochastic stage."""
        raw = self.to_dict()
        raw["data"]["seed"] = seed
        raw["framework"]["seed"] = seed
        raw["classifier"]["seed"] = seed
        return RunConfig.from_dict(raw, self.base_dir)

    def digest(self, *sections: str) -> str:
        d = self.to_dict()
        sel = {k: d[k] for k in (sections or SECTIONS)}
        return hashlib.sha256(json.dumps(sel, sort_keys=True).encode()).hexdigest()[:16]

    @property
    def data_dir(self) -> Path:
        return (self.base_dir / self.paths.data_dir).resolve()

    @property
    def run_dir(self) -> Path:
        return (self.base_dir / self.paths.run_dir).resolve()
