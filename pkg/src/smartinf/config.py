"""Experiment configuration, read from JSON files and command-line flags."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .engine import MODES, EngineConfig
from .errors import ConfigError, ContractViolation
from .fabric import FabricTopology
from .numerics import OptimizerConfig

OUTPUT_ENV = "SMARTINF_OUTPUT_DIR"


@dataclass
class ExperimentConfig:
    mode: str = "su_o"
    optimizer: dict = field(default_factory=lambda: {"kind": "adam"})
    model_sizes: list = field(default_factory=lambda: [255, 255, 1])
    steps: int = 10
    seed: int = 0
    compression_pct: Optional[float] = None
    topology: Optional[str] = None
    devices: int = 1
    output_dir: str = "smartinf-out"
    deterministic: bool = False
    error_feedback: bool = False

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {', '.join(MODES)}")
        if self.mode == "su_o_c":
            if self.compression_pct is None:
                raise ConfigError("compression_pct is required for mode su_o_c")
            if not 0 < self.compression_pct <= 100:
                raise ConfigError("compression_pct must lie in (0, 100]")
        elif self.compression_pct is not None:
            raise ConfigError("compression_pct is only allowed with mode su_o_c")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.devices < 1:
            raise ConfigError("devices must be >= 1")
        self.optimizer_config()

    def optimizer_config(self) -> OptimizerConfig:
        try:
            return OptimizerConfig(**self.optimizer)
        except (TypeError, ContractViolation) as exc:
            raise ConfigError(f"bad optimizer settings: {exc}") from None

    def engine_config(self) -> EngineConfig:
        return EngineConfig(mode=self.mode, optimizer=self.optimizer_config(),
                            model_sizes=tuple(self.model_sizes), seed=self.seed,
                            compression_pct=self.compression_pct,
                            deterministic=self.deterministic,
                            error_feedback=self.error_feedback)

    def load_topology(self) -> FabricTopology:
        if self.topology is not None:
            return FabricTopology.load(self.topology)
        return FabricTopology.uniform(self.devices)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(extra))}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)
