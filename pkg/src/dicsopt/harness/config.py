"""Experiment configuration: nested dataclasses with a strict JSON round-trip.

The canonical schema is documented in ``docs/config.md``. Unknown keys are
rejected so that typos never silently fall back to defaults.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ..engines import EngineConfig

EXPERIMENT_KINDS = ("consensus", "linreg", "logreg", "spectra", "theory")


class ConfigError(ValueError):
    """Invalid or unreadable configuration."""


@dataclass
class TopologyParams:
    n: int = 10
    p: float = 0.9
    drop: int = 2
    B: int = 1
    max_retries: int = 1000


@dataclass
class DataParams:
    m_i: int = 200
    d: int = 64
    noise_variance: float = 0.01
    mu_reg: float = 1e-2
    flip_prob: float = 0.1
    min_abs_row_sum: float = 1.0


@dataclass
class ConsensusParams:
    d: int = 64
    gamma: float = 0.05
    q: float = 1.0
    steps: int = 1000
    record_every: int = 1
    threshold: float = 1e-12


@dataclass
class SpectraParams:
    d: int = 64
    gamma: float = 0.05
    qs: list = field(default_factory=lambda: [1.0])
    windows: int = 20


@dataclass
class TheoryParams:
    calibration_windows: int = 20
    blocks: int = 200
    epoch_blocks: int = 50
    alpha: float | None = None
    slack: float = 0.05
    recursion_slack: float = 0.01


_SECTIONS = {
    "topology": TopologyParams,
    "data": DataParams,
    "engine": EngineConfig,
    "consensus": ConsensusParams,
    "spectra": SpectraParams,
    "theory": TheoryParams,
}


@dataclass
class ExperimentConfig:
    """One experiment: what to run, on which instance, how often, and where to write."""

    kind: str = "consensus"
    name: str | None = None
    seed: int = 0
    repeat: int = 1
    seed_stride: int = 1
    workers: int = 1
    out: str = "results"
    topology: TopologyParams = field(default_factory=TopologyParams)
    data: DataParams = field(default_factory=DataParams)
    engine: EngineConfig = field(default_factory=EngineConfig)
    consensus: ConsensusParams = field(default_factory=ConsensusParams)
    spectra: SpectraParams = field(default_factory=SpectraParams)
    theory: TheoryParams = field(default_factory=TheoryParams)

    @property
    def label(self) -> str:
        return self.name or self.kind

    def replica_seeds(self) -> list[int]:
        return [self.seed + r * self.seed_stride for r in range(self.repeat)]

    def epoch_length(self) -> int:
        e = self.engine
        return e.T if e.T is not None else 2 * self.data.m_i * e.B

    def steps(self) -> int:
        """Number of steps one replica runs (and the topology horizon it needs)."""
        if self.kind == "consensus":
            b = self.topology.B
            return math.ceil(self.consensus.steps / b) * b
        if self.kind in ("linreg", "logreg"):
            return self.engine.S * self.epoch_length()
        if self.kind == "spectra":
            return self.spectra.windows * self.topology.B
        th = self.theory
        run_blocks = math.ceil(th.blocks / th.epoch_blocks) * th.epoch_blocks
        return max(run_blocks, th.calibration_windows) * self.topology.B

    def validate(self) -> "ExperimentConfig":
        try:
            self._validate()
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def _validate(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigError(f"kind must be one of {EXPERIMENT_KINDS}, got {self.kind!r}")
        if self.repeat < 1 or self.workers < 1:
            raise ConfigError("repeat and workers must be positive")
        if self.seed < 0 or self.seed_stride < 0:
            raise ConfigError("seed and seed_stride must be nonnegative")
        t = self.topology
        if t.n < 2 or not 0 <= t.p <= 1 or t.drop < 0 or t.B < 1 or t.max_retries < 1:
            raise ConfigError("topology needs n >= 2, p in [0, 1], drop >= 0, B >= 1")
        if t.drop >= t.n * (t.n - 1):
            raise ConfigError("topology.drop must be below n(n-1)")
        dp = self.data
        if dp.m_i < 1 or dp.d < 1 or dp.noise_variance < 0 or dp.mu_reg < 0:
            raise ConfigError("data needs m_i >= 1, d >= 1 and nonnegative noise and mu_reg")
        if not 0 <= dp.flip_prob <= 1 or dp.min_abs_row_sum < 0:
            raise ConfigError("data.flip_prob must lie in [0, 1] and min_abs_row_sum be >= 0")
        if self.kind == "consensus":
            c = self.consensus
            if c.d < 1 or c.steps < 1 or c.record_every < 1:
                raise ConfigError("consensus needs d, steps, record_every >= 1")
            EngineConfig(kind="consensus", gamma=c.gamma, q=c.q).validate()
        if self.kind in ("linreg", "logreg", "theory"):
            e = self.engine
            e.validate()
            if e.kind == "consensus":
                raise ConfigError("engine.kind must be an optimizer for this experiment")
            if e.B != t.B:
                raise ConfigError(f"engine.B={e.B} must equal topology.B={t.B}")
            if self.kind == "theory" and self.data.d > 16:
                raise ConfigError("theory runs keep per-block snapshots; use data.d <= 16")
        if self.kind == "spectra":
            s = self.spectra
            if s.d < 1 or s.windows < 1 or not s.qs:
                raise ConfigError("spectra needs d >= 1, windows >= 1 and a nonempty qs list")
            for q in s.qs:
                EngineConfig(gamma=s.gamma, q=q).validate()
        if self.kind == "theory":
            th = self.theory
            if th.blocks < 2 or th.epoch_blocks < 1 or th.calibration_windows < 1:
                raise ConfigError("theory needs blocks >= 2 and positive epoch_blocks, calibration_windows")
            if th.alpha is not None and not th.alpha > 0:
                raise ConfigError("theory.alpha must be positive when given")

    # ----- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("configuration must be a JSON object")
        top = {f.name for f in fields(cls)}
        unknown = set(doc) - top
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        kw = {}
        for key, value in doc.items():
            if key in _SECTIONS:
                kw[key] = _section(key, _SECTIONS[key], value)
            else:
                kw[key] = value
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc
        return cls.from_dict(doc)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc.strerror or exc}") from exc
        return cls.from_json(text)


def _section(name, cls, value):
    if not isinstance(value, dict):
        raise ConfigError(f"section {name!r} must be an object")
    allowed = {f.name for f in fields(cls)}
    unknown = set(value) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    try:
        return cls(**value)
    except TypeError as exc:
        raise ConfigError(f"section {name!r}: {exc}") from exc


def default_config(kind: str) -> ExperimentConfig:
    """Defaults for each experiment kind (desk-scale sizes for ``theory``)."""
    cfg = ExperimentConfig(kind=kind)
    if kind == "logreg":
        cfg.engine = EngineConfig(kind="svrg", alpha=0.1, S=20)
        cfg.data = DataParams(m_i=100, d=16, mu_reg=1e-2)
    elif kind == "linreg":
        cfg.engine = EngineConfig(kind="svrg", alpha=0.002, T=400, S=50)
    elif kind == "theory":
        cfg.topology = TopologyParams(n=5)
        cfg.data = DataParams(m_i=20, d=4)
        cfg.engine = EngineConfig(kind="svrg")
        cfg.repeat = 100
    return cfg
