"""Experiment configuration: JSON file with published-run defaults, presets and
fail-fast validation."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .federation import METHODS

DATASETS = ("mnist", "synth")
BUILTIN_SCHEDULES = ("ts1", "ts1-ts2")

PRESETS = {
    "full": {},
    # batch 50 keeps a useful number of SGD steps per epoch on the small split
    "desk": {"train_per_client": 2000, "test_per_client": 500, "epochs": 10, "train_batch": 50},
}


@dataclass
class ExperimentConfig:
    method: str = "proposed"
    dataset: str = "mnist"
    mnist_dir: str | None = None
    data_cache: str | None = None
    schedule: str = "ts1"
    second_slot_rounds: int = 0
    preset: str = "full"
    lr: float = 0.05
    decay: float = 0.99
    train_batch: int = 500
    test_batch: int = 128
    epochs: int = 20
    test_every: int = 2
    local_epochs: int = 1
    train_per_client: int = 12000
    test_per_client: int = 2000
    snr_db: float = -10.0
    seed: int = 1
    conv_channels: list[int] = field(default_factory=lambda: [8, 16])
    hidden: list[int] = field(default_factory=lambda: [64, 32])
    classes: int = 10
    synth_dim: int = 256
    synth_separation: float = 6.0
    synth_sigma: float = 1.0
    out: str = "runs"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def with_changes(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
_INT_KEYS = ("second_slot_rounds", "train_batch", "test_batch", "epochs", "test_every", "local_epochs",
             "train_per_client", "test_per_client", "seed", "classes", "synth_dim")
_FLOAT_KEYS = ("lr", "decay", "snr_db", "synth_separation", "synth_sigma")


def build_config(raw: dict | None = None, **overrides) -> ExperimentConfig:
    """Defaults, then the preset, then ``raw`` (file contents), then ``overrides``.

    ``None`` overrides are ignored. Raises :class:`ConfigError` listing every
    problem found.
    """
    raw = dict(raw or {})
    overrides = {k: v for k, v in overrides.items() if v is not None}
    problems = [f"unknown config key {k!r}" for k in sorted(set(raw) | set(overrides)) if k not in _FIELDS]
    if problems:
        raise ConfigError(problems)
    preset = overrides.get("preset", raw.get("preset", "full"))
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    values = {**PRESETS[preset], **raw, **overrides, "preset": preset}
    cfg = ExperimentConfig(**values)
    problems = validate_config(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path=None, **overrides) -> ExperimentConfig:
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
    return build_config(raw, **overrides)


def validate_config(cfg: ExperimentConfig) -> list[str]:
    problems = []
    if cfg.method not in METHODS:
        problems.append(f"method must be one of {list(METHODS)}, got {cfg.method!r}")
    if cfg.dataset not in DATASETS:
        problems.append(f"dataset must be one of {list(DATASETS)}, got {cfg.dataset!r}")
    for key in _INT_KEYS:
        v = getattr(cfg, key)
        if not isinstance(v, int) or isinstance(v, bool):
            problems.append(f"{key} must be an integer")
        elif key == "second_slot_rounds" and v < 0:
            problems.append(f"{key} must be >= 0")
        elif key not in ("seed", "second_slot_rounds") and v < 1:
            problems.append(f"{key} must be >= 1")
        elif key == "seed" and not 0 <= v < 2**64:
            problems.append("seed must be an unsigned 64-bit integer")
    for key in _FLOAT_KEYS:
        v = getattr(cfg, key)
        if not isinstance(v, (int, float)) or isinstance(v, bool):
            problems.append(f"{key} must be a number")
    if isinstance(cfg.lr, (int, float)) and cfg.lr <= 0:
        problems.append("lr must be positive")
    if isinstance(cfg.decay, (int, float)) and not 0 < cfg.decay <= 1:
        problems.append("decay must be in (0, 1]")
    if isinstance(cfg.epochs, int) and isinstance(cfg.local_epochs, int) and cfg.local_epochs >= 1 \
            and cfg.epochs % cfg.local_epochs:
        problems.append("epochs must be a multiple of local_epochs")
    for key in ("conv_channels", "hidden"):
        v = getattr(cfg, key)
        if not isinstance(v, list) or not all(isinstance(x, int) and x >= 1 for x in v):
            problems.append(f"{key} must be a list of positive integers")
    if not cfg.hidden:
        problems.append("hidden must name at least one layer width")
    if cfg.schedule not in BUILTIN_SCHEDULES and not Path(cfg.schedule).exists():
        problems.append(f"schedule {cfg.schedule!r} is neither {list(BUILTIN_SCHEDULES)} nor an existing file")
    return problems
