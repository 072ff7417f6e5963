"""Run configuration: TOML in, deterministic digest out.

A single master seed derives every stage seed (see seeds.derive_seed), so one
integer reproduces a whole run. The config round-trips: parse -> serialize ->
parse yields an identical digest.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .attribution import MEAN_ABS, MEAN_SIGNED
from .dataset import PreprocessSpec
from .metrics import AuditConfig
from .model import TrainConfig
from .refine import GAUSSIAN_COPULA, MARGINAL_RESAMPLER, DEFAULT_DELTA, DEFAULT_TOP_K


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    real_path: str = ""
    syn_path: str = ""
    schema_path: str | None = None
    output_dir: str = "shapaudit-out"
    master_seed: int = 0

    # preprocess
    encoding: str = "label"
    normalization: str = "none"
    undersample: bool = True

    # train
    num_rounds: int = 100
    max_depth: int = 4
    learning_rate: float = 0.1
    min_child_cover: int = 5

    # metrics
    kl_bins: int = 32
    kl_epsilon: float = 1e-9
    pca_components: int = 2
    aggregation: str = MEAN_ABS
    max_explain_rows: int = 1000
    test_fraction: float = 0.2
    plot_top_k: int = 10

    # refine
    generator: str = MARGINAL_RESAMPLER
    epsilon: float = 0.01
    max_iters: int = 8
    top_k: int = DEFAULT_TOP_K
    delta: float = DEFAULT_DELTA
    sample_count: int = 1000

    def validate(self) -> None:
        if self.aggregation not in (MEAN_ABS, MEAN_SIGNED):
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")
        if self.generator not in (MARGINAL_RESAMPLER, GAUSSIAN_COPULA):
            raise ConfigError(f"unknown generator {self.generator!r}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if self.max_iters < 1 or self.top_k < 1 or self.sample_count < 1:
            raise ConfigError("max_iters, top_k, and sample_count must be positive")

    # -- section views -------------------------------------------------------

    def preprocess_spec(self) -> PreprocessSpec:
        from .seeds import derive_seed

        return PreprocessSpec(
            encoding=self.encoding,
            normalization=self.normalization,
            undersample=self.undersample,
            seed=derive_seed(self.master_seed, "undersample"),
        )

    def train_config(self) -> TrainConfig:
        from .seeds import derive_seed

        return TrainConfig(
            num_rounds=self.num_rounds,
            max_depth=self.max_depth,
            learning_rate=self.learning_rate,
            min_child_cover=self.min_child_cover,
            seed=derive_seed(self.master_seed, "train"),
        )

    def audit_config(self) -> AuditConfig:
        return AuditConfig(
            preprocess=self.preprocess_spec(),
            train=self.train_config(),
            kl_bins=self.kl_bins,
            kl_epsilon=self.kl_epsilon,
            pca_components=self.pca_components,
            aggregation=self.aggregation,
            max_explain_rows=self.max_explain_rows,
            test_fraction=self.test_fraction,
            master_seed=self.master_seed,
        )

    # -- (de)serialization ----------------------------------------------------

    _SECTIONS = {
        "preprocess": ("encoding", "normalization", "undersample"),
        "train": ("num_rounds", "max_depth", "learning_rate", "min_child_cover"),
        "metrics": (
            "kl_bins",
            "kl_epsilon",
            "pca_components",
            "aggregation",
            "max_explain_rows",
            "test_fraction",
            "plot_top_k",
        ),
        "refine": ("generator", "epsilon", "max_iters", "top_k", "delta", "sample_count"),
    }
    _TOP_LEVEL = ("real_path", "syn_path", "schema_path", "output_dir", "master_seed")

    def to_dict(self) -> dict:
        doc: dict = {k: getattr(self, k) for k in self._TOP_LEVEL if getattr(self, k) is not None}
        for section, keys in self._SECTIONS.items():
            doc[section] = {k: getattr(self, k) for k in keys}
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        kwargs: dict = {}
        known_top = set(cls._TOP_LEVEL)
        known_sections = set(cls._SECTIONS)
        for key, value in doc.items():
            if key in known_top:
                kwargs[key] = value
            elif key in known_sections:
                if not isinstance(value, dict):
                    raise ConfigError(f"section [{key}] must be a table")
                allowed = set(cls._SECTIONS[key])
                for k, v in value.items():
                    if k not in allowed:
                        raise ConfigError(f"unknown key {k!r} in section [{key}]")
                    kwargs[k] = v
            else:
                raise ConfigError(f"unknown top-level key {key!r}")
        try:
            config = cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        config.validate()
        return config

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def to_toml(self) -> str:
        def fmt(v) -> str:
            if isinstance(v, bool):
                return "true" if v else "false"
            if isinstance(v, (int, float)):
                return repr(v)
            return json.dumps(str(v))

        lines = [f"{k} = {fmt(getattr(self, k))}" for k in self._TOP_LEVEL if getattr(self, k) is not None]
        for section, keys in self._SECTIONS.items():
            lines.append("")
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {fmt(getattr(self, k))}" for k in keys)
        return "\n".join(lines) + "\n"


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"no such config file: {p}")
    try:
        with open(p, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {p}: {exc}") from exc
    return RunConfig.from_dict(doc)
