"""Training configuration: documented default grids, flat key=value config files."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace


class ConfigError(ValueError):
    pass


GRIDS = {
    "batch_size": {4, 8, 16},
    "lr": {1e-4, 5e-4, 1e-3},
    "num_layers": {3, 4, 5},
    "select_percent": {5.0, 10.0, 15.0, 20.0},
    "select_threshold": {0.5, 0.6, 0.7},
}


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr: float = 5e-4
    num_layers: int = 4
    hidden_dim: int = 64
    head_hidden: int = 128
    dropout_backbone: float = 0.2
    dropout_graph_head: float = 0.5
    dropout_node_head: float = 0.5
    lambda_weight: float = 0.5
    select_percent: float = 10.0
    select_threshold: float = 0.6
    finetune_lr: float | None = None  # defaults to lr / 10
    epochs_graph: int = 50
    epochs_node: int = 50
    epochs_finetune: int = 20
    early_stop_patience: int = 15
    optimizer: str = "adam"
    seed: int = 0
    allow_offgrid: bool = False

    def effective_finetune_lr(self) -> float:
        return self.finetune_lr if self.finetune_lr is not None else self.lr / 10.0

    def validate(self) -> None:
        if not (0.0 <= self.lambda_weight <= 1.0):
            raise ConfigError("lambda_weight outside [0,1]")
        if not (0.0 < self.select_percent <= 100.0):
            raise ConfigError("select_percent outside (0,100]")
        if not (0.0 <= self.select_threshold < 1.0):
            raise ConfigError("select_threshold outside [0,1)")
        for key in ("epochs_graph", "epochs_node", "epochs_finetune"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0")
        if self.lr < 0 or (self.finetune_lr is not None and self.finetune_lr < 0):
            raise ConfigError("learning rates must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if not self.allow_offgrid:
            for key, grid in GRIDS.items():
                value = getattr(self, key)
                if value not in grid:
                    raise ConfigError(f"{key} off-grid (value {value!r}; "
                                      f"set allow_offgrid=true to override)")


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if key == "allow_offgrid":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected boolean, got {raw!r}")
    if key == "optimizer":
        return raw
    if key == "finetune_lr" and raw.lower() in ("none", ""):
        return None
    try:
        if key in ("batch_size", "num_layers", "hidden_dim", "head_hidden",
                   "epochs_graph", "epochs_node", "epochs_finetune",
                   "early_stop_patience", "seed"):
            return int(raw)
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from exc


def load_config(path: str) -> TrainConfig:
    """Flat key=value text; unknown keys rejected, absent keys take defaults."""
    overrides = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep:
                raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
            if key not in _FIELD_TYPES:
                raise ConfigError(f"unknown config key {key!r}")
            overrides[key] = _parse_value(key, value)
    cfg = replace(TrainConfig(), **overrides)
    cfg.validate()
    return cfg
