"""Configuration dataclasses and the key=value config file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


@dataclass
class SolverConfig:
    method: str = "rk4"  # euler | rk4
    h_max: float = 0.25  # in normalized-age units

    def __post_init__(self):
        if self.method not in ("euler", "rk4"):
            raise ValueError(f"unknown solver method {self.method!r}")
        if not self.h_max > 0:
            raise ValueError("h_max must be positive")


@dataclass
class ModelConfig:
    q: int = 8
    feature_dim: int = 32
    n_classes: int = 3
    n_scores: int = 3
    ode_hidden: int = 64
    att_hidden: int = 16
    volume_extent: int = 0  # 0 = vector payloads, no 3D extractor
    ridge: float = 1e-4
    init_std: float = 0.01
    solver: SolverConfig = field(default_factory=SolverConfig)
    # ablation switches
    manifold: bool = True
    encoder: str = "rmm"  # rmm | flat
    time_aware: bool = True
    use_tnode: bool = True
    gate: str = "attention"  # attention | plain | none
    interval_scaling: bool = True

    def __post_init__(self):
        if isinstance(self.solver, dict):
            self.solver = SolverConfig(**self.solver)
        if self.q < 2:
            raise ValueError("manifold dimension q must be >= 2")
        if self.encoder not in ("rmm", "flat"):
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if self.gate not in ("attention", "plain", "none"):
            raise ValueError(f"unknown gate {self.gate!r}")

    @property
    def tangent_dim(self) -> int:
        return self.q * (self.q + 1) // 2


@dataclass
class LossConfig:
    alpha: tuple[float, ...] | None = None  # None -> inverse class frequency
    gamma: float = 2.0
    lambda_reg: float = 1.0
    lambda_ce: float = 1.0

    def __post_init__(self):
        if self.alpha is not None:
            self.alpha = tuple(float(a) for a in self.alpha)
            if any(a <= 0 for a in self.alpha):
                raise ValueError("class weights must be positive")
        if self.gamma < 0 or self.lambda_reg < 0 or self.lambda_ce < 0:
            raise ValueError("gamma and loss weights must be non-negative")


@dataclass
class ExperimentConfig:
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 16
    folds: int = 5
    seed: int = 0
    final_only: bool = False
    aux_ce: bool = True
    record_wall_time: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if self.folds < 2:
            raise ValueError("need at least 2 folds")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size >= 1 and epochs >= 0 required")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def _coerce(raw: str, current: Any) -> Any:
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if current is None or isinstance(current, tuple):
        if raw.lower() in ("", "none"):
            return None
        return tuple(float(x) for x in raw.split(","))
    return raw


def set_key(cfg: ExperimentConfig, key: str, raw: str) -> None:
    """Set a dotted key such as ``model.q`` or ``model.solver.method``."""
    target: Any = cfg
    parts = key.strip().split(".")
    for part in parts[:-1]:
        if not hasattr(target, part):
            raise KeyError(f"unknown config key {key!r}")
        target = getattr(target, part)
    leaf = parts[-1]
    if not dataclasses.is_dataclass(target) or leaf not in {
            f.name for f in dataclasses.fields(target)}:
        raise KeyError(f"unknown config key {key!r}")
    setattr(target, leaf, _coerce(raw.strip(), getattr(target, leaf)))


def load_config(path: str | Path | None = None,
                overrides: list[str] | None = None) -> ExperimentConfig:
    """Read a key=value file (``#`` comments allowed), then apply overrides."""
    cfg = ExperimentConfig()
    lines: list[str] = []
    if path is not None:
        lines += Path(path).read_text().splitlines()
    lines += overrides or []
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
        key, raw = line.split("=", 1)
        set_key(cfg, key, raw)
    # re-run validation after mutation
    cfg.model.solver.__post_init__()
    cfg.model.__post_init__()
    cfg.loss.__post_init__()
    cfg.__post_init__()
    return cfg
