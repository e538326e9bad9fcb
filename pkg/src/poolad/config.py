"""Run configuration: one flat key=value (TOML) file, strictly validated.

Unknown keys are rejected; CLI flags override file values.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import DataError, ParseError


@dataclass
class Config:
    segment_length: int = 32
    stride: int = 16
    hidden: list[int] = field(default_factory=lambda: [16, 8, 16])
    epochs: int = 50
    learning_rate: float = 1e-2
    batch_size: int = 64
    beta: float = 0.3
    mu: float = 2.0
    eps_model: float = 0.8
    eps_judge_factor: float = 0.34
    eps_merge: int = 15
    eps_disscore: float = 0.01
    top_k: int = 3
    threshold_method: str = "mean_std"
    threshold_multiplier: float = 2.5
    anomaly_ratio: float = 0.05
    vus_width: int = 16
    seed: int = 0
    transfer: str = "last"
    merge_timing: str = "after_test"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.segment_length < 2:
            raise DataError("segment_length must be >= 2")
        if self.stride < 1:
            raise DataError("stride must be >= 1")
        if self.epochs < 1:
            raise DataError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise DataError("learning_rate must be positive")
        if self.batch_size < 1:
            raise DataError("batch_size must be >= 1")
        if not 0 <= self.beta < 1:
            raise DataError("beta must be in [0, 1)")
        if self.mu < 0:
            raise DataError("mu must be >= 0")
        if not 0 < self.eps_judge_factor <= 1:
            raise DataError("eps_judge_factor must be in (0, 1]")
        if self.eps_merge < 2:
            raise DataError("eps_merge must be >= 2")
        if self.eps_disscore <= 0:
            raise DataError("eps_disscore must be positive")
        if self.top_k < 1:
            raise DataError("top_k must be >= 1")
        if self.threshold_method not in ("mean_std", "epsilon", "percentile"):
            raise DataError("threshold_method must be mean_std, epsilon, "
                            "or percentile")
        if self.threshold_multiplier <= 0:
            raise DataError("threshold_multiplier must be positive")
        if not 0 < self.anomaly_ratio < 1:
            raise DataError("anomaly_ratio must be in (0, 1)")
        if self.vus_width < 0:
            raise DataError("vus_width must be >= 0")
        if self.transfer not in ("last", "average"):
            raise DataError("transfer must be last or average")
        if self.merge_timing not in ("before_test", "after_test"):
            raise DataError("merge_timing must be before_test or after_test")
        if any(h < 1 for h in self.hidden):
            raise DataError("hidden sizes must be positive")

    @classmethod
    def from_file(cls, path) -> "Config":
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ParseError(f"{path}: {exc}") from exc
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ParseError(f"{path}: unknown config keys {sorted(unknown)}")
        return cls(**raw)

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]
