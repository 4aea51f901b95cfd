#!/usr/bin/env python3
"""
Configuration Manager for the Tube Linker
=========================================
Handles loading, validating, and managing all configuration settings.

The config file is a single flat JSON object whose keys mirror the fields of
LinkerConfig, EvalThresholds, IngestSettings and ScoringSettings. Anything
missing falls back to the published defaults (alpha=3, delta=20, tau=2.2,
eta=0.1, max_paths=3, actionness threshold 0.003).
"""

import json
import logging
import math
from copy import deepcopy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

from .core_model import ValidationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LinkerConfig:
    """Parameters of both dynamic-programming passes and the tube filters."""
    lam: float = 1.0
    alpha: float = 3.0
    max_paths: Optional[int] = 3
    delta: int = 20
    tau: float = 2.2
    class_areas: Dict[str, float] = field(default_factory=dict)
    nms_iou: float = 0.3
    apply_nms: bool = True
    top_k_score: int = 10
    placeholder_score: float = 0.0
    background_score: Optional[float] = 0.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValidationError(f"lambda must be >= 0, got {self.lam}", field="lambda")
        if self.alpha < 0:
            raise ValidationError(f"alpha must be >= 0, got {self.alpha}", field="alpha")
        if self.max_paths is not None and self.max_paths < 1:
            raise ValidationError(f"max_paths must be >= 1, got {self.max_paths}", field="max_paths")
        if self.delta < 1:
            raise ValidationError(f"delta must be >= 1, got {self.delta}", field="delta")
        if self.tau <= 0:
            raise ValidationError(f"tau must be > 0, got {self.tau}", field="tau")
        if not 0.0 < self.nms_iou < 1.0:
            raise ValidationError(f"nms_iou must lie in (0, 1), got {self.nms_iou}", field="nms_iou")
        if self.top_k_score < 1:
            raise ValidationError(f"top_k_score must be >= 1, got {self.top_k_score}", field="top_k_score")

    def min_area(self, class_name: str) -> Optional[float]:
        """gamma = gamma_c / tau, or None when the class has no average area."""
        gamma_c = self.class_areas.get(class_name)
        if gamma_c is None:
            return None
        return gamma_c / self.tau

    @classmethod
    def from_dict(cls, data: Dict) -> "LinkerConfig":
        """Create LinkerConfig from a flat config dictionary."""
        return cls(
            lam=data.get("lambda", 1.0),
            alpha=data.get("alpha", 3.0),
            max_paths=data.get("max_paths", 3),
            delta=data.get("delta", 20),
            tau=data.get("tau", 2.2),
            class_areas=dict(data.get("class_areas", {})),
            nms_iou=data.get("nms_iou", 0.3),
            apply_nms=data.get("apply_nms", True),
            top_k_score=data.get("top_k_score", 10),
            placeholder_score=data.get("placeholder_score", 0.0),
            background_score=data.get("background_score", 0.0)
        )


@dataclass(frozen=True)
class EvalThresholds:
    """The four acceptance thresholds plus the integration settings."""
    t_sr: float = 0.1
    t_tr: float = 0.1
    t_sp: float = 0.1
    t_tp: float = 0.1
    eta: float = 0.1
    grid_step: float = 0.1

    def __post_init__(self):
        for name in ("t_sr", "t_tr", "t_sp", "t_tp", "eta"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {value}", field=name)
        if not 0.0 < self.grid_step <= 1.0:
            raise ValidationError(f"grid_step must lie in (0, 1], got {self.grid_step}", field="grid_step")
        steps = round(1.0 / self.grid_step)
        if not math.isclose(steps * self.grid_step, 1.0, abs_tol=1e-9):
            raise ValidationError(f"grid_step must divide 1 evenly, got {self.grid_step}", field="grid_step")

    @property
    def grid(self) -> List[float]:
        """Sweep thresholds 0, step, ..., 1 (both endpoints included)."""
        steps = round(1.0 / self.grid_step)
        return [i / steps for i in range(steps + 1)]

    def pinned(self, axis: str, value: float) -> "EvalThresholds":
        """All thresholds at eta except `axis`, which is set to `value`."""
        values = {"t_sr": self.eta, "t_tr": self.eta, "t_sp": self.eta, "t_tp": self.eta}
        values[f"t_{axis}"] = value
        return EvalThresholds(eta=self.eta, grid_step=self.grid_step, **values)

    @classmethod
    def from_dict(cls, data: Dict) -> "EvalThresholds":
        """Create EvalThresholds from a flat config dictionary."""
        return cls(
            t_sr=data.get("t_sr", 0.1),
            t_tr=data.get("t_tr", 0.1),
            t_sp=data.get("t_sp", 0.1),
            t_tp=data.get("t_tp", 0.1),
            eta=data.get("eta", 0.1),
            grid_step=data.get("grid_step", 0.1)
        )


@dataclass(frozen=True)
class IngestSettings:
    """Proposal pruning and power-set generation settings."""
    actionness_threshold: float = 0.003
    powerset_cap: int = 12

    def __post_init__(self):
        if not 0.0 <= self.actionness_threshold <= 1.0:
            raise ValidationError(
                f"actionness_threshold must lie in [0, 1], got {self.actionness_threshold}",
                field="actionness_threshold"
            )
        if self.powerset_cap < 1:
            raise ValidationError(f"powerset_cap must be >= 1, got {self.powerset_cap}", field="powerset_cap")

    @classmethod
    def from_dict(cls, data: Dict) -> "IngestSettings":
        return cls(
            actionness_threshold=data.get("actionness_threshold", 0.003),
            powerset_cap=data.get("powerset_cap", 12)
        )


@dataclass(frozen=True)
class ScoringSettings:
    """Feature fusion weights and training-example overlap rules."""
    w_appearance: float = 1.0
    w_flow: float = 1.0
    pos_iou: float = 0.75
    neg_iou: float = 0.3

    def __post_init__(self):
        if self.pos_iou <= self.neg_iou:
            raise ValidationError(
                f"pos_iou ({self.pos_iou}) must exceed neg_iou ({self.neg_iou})", field="pos_iou"
            )

    @classmethod
    def from_dict(cls, data: Dict) -> "ScoringSettings":
        return cls(
            w_appearance=data.get("w_appearance", 1.0),
            w_flow=data.get("w_flow", 1.0),
            pos_iou=data.get("pos_iou", 0.75),
            neg_iou=data.get("neg_iou", 0.3)
        )


DEFAULTS: Dict[str, Any] = {
    "lambda": 1.0,
    "alpha": 3.0,
    "max_paths": 3,
    "delta": 20,
    "tau": 2.2,
    "class_areas": {},
    "nms_iou": 0.3,
    "apply_nms": True,
    "top_k_score": 10,
    "placeholder_score": 0.0,
    "background_score": 0.0,
    "actionness_threshold": 0.003,
    "powerset_cap": 12,
    "t_sr": 0.1,
    "t_tr": 0.1,
    "t_sp": 0.1,
    "t_tp": 0.1,
    "eta": 0.1,
    "grid_step": 0.1,
    "w_appearance": 1.0,
    "w_flow": 1.0,
    "pos_iou": 0.75,
    "neg_iou": 0.3,
    "class_names": [],
    "threads": 1,
    "log_level": "INFO",
}

# keys whose default is None-able
NULLABLE = {"max_paths", "background_score"}


def _check_type(key: str, value: Any) -> Any:
    """Coerce `value` to the type of DEFAULTS[key], or raise ValidationError."""
    if key not in DEFAULTS:
        raise ValidationError(f"unknown config key '{key}'", field=key)
    if value is None and key in NULLABLE:
        return None

    default = DEFAULTS[key]
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, dict):
        if isinstance(value, dict) and all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value.values()
        ):
            return {str(k): float(v) for k, v in value.items()}
    elif isinstance(default, list):
        if isinstance(value, list) and all(isinstance(v, str) for v in value):
            return list(value)
    elif isinstance(default, str):
        if isinstance(value, str):
            return value

    raise ValidationError(
        f"expected {type(default).__name__}, got {type(value).__name__} ({value!r})", field=key
    )


class ConfigManager:
    """
    Manages all configuration for the tube linker.

    Features:
    - Loads from a flat JSON config file (or runs on defaults)
    - Type-checked overrides from the command line
    - Typed access to linker, evaluation, ingest and scoring settings
    - Dot-notation access into the per-class area table
    - Saves modified configs
    """

    DEFAULT_CONFIG_PATH = "./tubelink_config.json"

    def __init__(self, config_path: Optional[str] = None):
        """
        Initialize configuration manager.

        Args:
            config_path: Path to config file. Defaults only if not specified.
        """
        self.config_path = Path(config_path) if config_path else None
        self._raw_config: Dict[str, Any] = deepcopy(DEFAULTS)

        if self.config_path is not None:
            self.load()
        else:
            self._validate()

    @classmethod
    def resolve_path(cls, config_path: Optional[str] = None) -> Optional[str]:
        """The given path, else the default file if it exists, else None (built-in defaults)."""
        if config_path:
            return config_path
        return cls.DEFAULT_CONFIG_PATH if Path(cls.DEFAULT_CONFIG_PATH).exists() else None

    def load(self, config_path: Optional[str] = None) -> None:
        """
        Load configuration from file.

        Args:
            config_path: Optional override path
        """
        path = Path(config_path) if config_path else self.config_path
        if path is None:
            raise FileNotFoundError("No config file to load")
        if not path.exists():
            raise FileNotFoundError(f"Config file not found: {path}")

        with open(path, "r") as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as e:
                raise ValidationError(f"invalid JSON: {e.msg}", line=e.lineno) from e

        if not isinstance(data, dict):
            raise ValidationError("config file must hold a JSON object")

        raw = deepcopy(DEFAULTS)
        for key, value in data.items():
            raw[key] = _check_type(key, value)
        self._raw_config = raw
        self._validate()
        logger.info("Loaded config from: %s", path)

    def _validate(self) -> None:
        """Build every typed view once so bad values fail at load time."""
        self.linker_config
        self.eval_thresholds
        self.ingest_settings
        self.scoring_settings
        if self.threads < 1:
            raise ValidationError(f"threads must be >= 1, got {self.threads}", field="threads")

    def save(self, path: Optional[str] = None) -> None:
        """
        Save current configuration to file.

        Args:
            path: Optional output path. Uses original path if not specified.
        """
        output_path = Path(path) if path else self.config_path
        if output_path is None:
            output_path = Path(self.DEFAULT_CONFIG_PATH)
        output_path.parent.mkdir(parents=True, exist_ok=True)

        with open(output_path, "w") as f:
            json.dump(self._raw_config, f, indent=2, sort_keys=True)
            f.write("\n")

        logger.info("Saved config to: %s", output_path)

    # =========================================================================
    # Typed Views
    # =========================================================================

    @property
    def linker_config(self) -> LinkerConfig:
        return LinkerConfig.from_dict(self._raw_config)

    @property
    def eval_thresholds(self) -> EvalThresholds:
        return EvalThresholds.from_dict(self._raw_config)

    @property
    def ingest_settings(self) -> IngestSettings:
        return IngestSettings.from_dict(self._raw_config)

    @property
    def scoring_settings(self) -> ScoringSettings:
        return ScoringSettings.from_dict(self._raw_config)

    @property
    def class_names(self) -> List[str]:
        return list(self._raw_config.get("class_names", []))

    @property
    def threads(self) -> int:
        return self._raw_config.get("threads", 1)

    @property
    def log_level(self) -> str:
        return self._raw_config.get("log_level", "INFO")

    # =========================================================================
    # Configuration Modification Methods
    # =========================================================================

    def apply_overrides(self, overrides: Dict[str, Any]) -> None:
        """
        Apply command-line style overrides; None values are ignored.

        The whole batch is rejected if any value fails validation.
        """
        self.update({k: v for k, v in overrides.items() if v is not None})

    def update(self, values: Dict[str, Any]) -> None:
        """Set several keys at once, None included; all-or-nothing."""
        candidate = deepcopy(self._raw_config)
        for key, value in values.items():
            candidate[key] = _check_type(key, value)

        previous = self._raw_config
        self._raw_config = candidate
        try:
            self._validate()
        except ValidationError:
            self._raw_config = previous
            raise

    def set_value(self, key_path: str, value: Any) -> None:
        """
        Set a configuration value using dot notation.

        Args:
            key_path: Key, or "class_areas.<class name>"
            value: Value to set
        """
        key, _, sub_key = key_path.partition(".")
        if sub_key:
            if key != "class_areas":
                raise ValidationError(f"'{key}' has no sub-keys", field=key_path)
            areas = dict(self._raw_config.get("class_areas", {}))
            areas[sub_key] = value
            self.update({"class_areas": areas})
        else:
            self.update({key: value})

    def get_value(self, key_path: str, default: Any = None) -> Any:
        """
        Get a configuration value using dot notation.

        Args:
            key_path: Key, or "class_areas.<class name>"
            default: Default value if not found

        Returns:
            Configuration value or default
        """
        config: Any = self._raw_config
        for key in key_path.split("."):
            if isinstance(config, dict) and key in config:
                config = config[key]
            else:
                return default
        return config

    def set_class_areas(self, areas: Dict[str, float]) -> None:
        """Replace the per-class average area table."""
        self.apply_overrides({"class_areas": dict(areas)})

    def export_config(self) -> Dict:
        """Export full configuration as dictionary."""
        return deepcopy(self._raw_config)

    def print_summary(self) -> None:
        """Print configuration summary."""
        linker = self.linker_config
        th = self.eval_thresholds
        print(f"\n{'='*50}")
        print("TUBE LINKER CONFIGURATION")
        print(f"{'='*50}")
        print(f"Config file: {self.config_path or '(defaults)'}")
        print(f"\nLinking: lambda={linker.lam} alpha={linker.alpha} max_paths={linker.max_paths}")
        print(f"Filters: delta={linker.delta} tau={linker.tau} classes with areas={len(linker.class_areas)}")
        print(f"NMS IoU: {linker.nms_iou} | background score: {linker.background_score}")
        print(f"\nThresholds: t_sr={th.t_sr} t_tr={th.t_tr} t_sp={th.t_sp} t_tp={th.t_tp}")
        print(f"Integration: eta={th.eta} grid_step={th.grid_step}")
        print(f"{'='*50}\n")


# =============================================================================
# Convenience Functions
# =============================================================================

_default_config: Optional[ConfigManager] = None

def get_config(config_path: Optional[str] = None) -> ConfigManager:
    """
    Get the configuration manager (singleton pattern).

    Args:
        config_path: Optional path to load from

    Returns:
        ConfigManager instance
    """
    global _default_config

    if _default_config is None or config_path:
        _default_config = ConfigManager(config_path)

    return _default_config


def reload_config() -> Optional[ConfigManager]:
    """Reload configuration from disk."""
    global _default_config
    if _default_config and _default_config.config_path:
        _default_config.load()
    return _default_config
