"""Run configuration: JSON schema with full defaults, seeding, fingerprint."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .decoder import DecoderConfig, DecoderLayerParams, gaussian_inputs, init_stack
from .errors import ConfigError
from .rng import RngState, derive_seed
from .stief import TrainConfig, candidate_ranks

POLICIES = ("uniform", "pareto", "weighted_pareto")
EPSILON_PRESETS = (0.015, 0.03, 0.045, 0.06, 0.09)
# Stream ids under the calibration seed.
_STACK_STREAM, _CALIB_STREAM, _EVAL_STREAM = 1, 2, 3


@dataclass
class RanksConfig:
    low: float = 0.5
    high: float = 0.9
    count: int = 5
    include_full: bool = True


@dataclass
class CalibrationConfig:
    n_sequences: int = 32
    seq_len: int = 128
    seed: int = 0


@dataclass
class EvalConfig:
    n_sequences: int = 64
    seq_len: int = 128


@dataclass
class PolicyConfig:
    kind: str = "weighted_pareto"
    epsilon: float = 0.03
    rank_k: int | None = None  # uniform policy; None means the middle candidate
    rank_v: int | None = None


@dataclass
class PathsConfig:
    out: str = "."


_SECTIONS = {"decoder": DecoderConfig, "train": TrainConfig, "ranks": RanksConfig,
             "calibration": CalibrationConfig, "eval": EvalConfig, "policy": PolicyConfig,
             "paths": PathsConfig}
_FINGERPRINTED = ("decoder", "train", "ranks", "calibration")


@dataclass
class RunConfig:
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ranks: RanksConfig = field(default_factory=RanksConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> "RunConfig":
        self.decoder.validate()
        self.train.validate()
        r = self.ranks
        if r.count < 1 or not 0 < r.low <= r.high <= 1:
            raise ConfigError("ranks: need 0 < low <= high <= 1 and count >= 1")
        for name, sec in (("calibration", self.calibration), ("eval", self.eval)):
            if sec.n_sequences < 1 or sec.seq_len < 1:
                raise ConfigError(f"{name}: n_sequences and seq_len must be positive")
        if self.policy.kind not in POLICIES:
            raise ConfigError(f"policy.kind must be one of {POLICIES}, got {self.policy.kind!r}")
        if not self.policy.epsilon > 0:
            raise ConfigError("policy.epsilon must be positive")
        return self

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in _SECTIONS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(doc) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, typ in _SECTIONS.items():
            section = doc.get(name, {})
            if not isinstance(section, dict):
                raise ConfigError(f"section {name!r} must be an object")
            try:
                kwargs[name] = typ(**section)
            except TypeError as exc:
                raise ConfigError(f"section {name!r}: {exc}") from None
        return cls(**kwargs).validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(doc)

    def with_seed(self, seed: int) -> "RunConfig":
        """Override the calibration and training seeds together."""
        return dataclasses.replace(self, calibration=dataclasses.replace(self.calibration, seed=seed),
                                   train=dataclasses.replace(self.train, seed=seed))

    def fingerprint(self) -> str:
        """sha256 over the sections that determine trained bases."""
        doc = {name: dataclasses.asdict(getattr(self, name)) for name in _FINGERPRINTED}
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def candidate_ranks(self) -> list[int]:
        r = self.ranks
        return candidate_ranks(self.decoder.d_h, r.low, r.high, r.count, r.include_full)

    def middle_rank(self) -> int:
        r = self.ranks
        trained = candidate_ranks(self.decoder.d_h, r.low, r.high, r.count, False)
        return trained[len(trained) // 2]

    def build_stack(self) -> list[DecoderLayerParams]:
        return init_stack(self.decoder, RngState(derive_seed(self.calibration.seed, _STACK_STREAM)))

    def calibration_inputs(self):
        c = self.calibration
        return gaussian_inputs(self.decoder, c.n_sequences, c.seq_len,
                               RngState(derive_seed(c.seed, _CALIB_STREAM)))

    def eval_inputs(self):
        """Held-out sequences from a stream disjoint from the calibration one."""
        return gaussian_inputs(self.decoder, self.eval.n_sequences, self.eval.seq_len,
                               RngState(derive_seed(self.calibration.seed, _EVAL_STREAM)))
