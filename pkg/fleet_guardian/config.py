from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from .models import ConfigError

CONFIG_PATH_ENV = "GUARDIAN_CONFIG_PATH"
ARTIFACT_ROOT_ENV = "GUARDIAN_ARTIFACT_ROOT"


def load_config(path: Optional[str] = None) -> Dict[str, Any]:
    """Load YAML config file."""
    resolved = _resolve_path(path)
    if not resolved or not resolved.exists():
        return {}
    with resolved.open("r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"配置文件 {resolved} 顶层需要是一个对象。")
    return data


def _resolve_path(path: Optional[str]) -> Optional[Path]:
    if path:
        return Path(path).expanduser()
    env_path = os.getenv(CONFIG_PATH_ENV)
    if env_path:
        return Path(env_path).expanduser()
    default = Path("guardian.yaml")
    return default if default.exists() else None


def get_config_value(
    config: Dict[str, Any],
    key_path: str,
    env_var: str = "",
    default: Optional[Any] = None,
    *,
    cast=None,
) -> Optional[Any]:
    """Return env override if present, otherwise read nested config value."""
    if env_var:
        env_value = os.getenv(env_var)
        if env_value is not None:
            return cast(env_value) if cast else env_value
    value = _deep_get(config, key_path.split("."))
    if value is None:
        return default
    if cast:
        try:
            return cast(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"配置项 {key_path} 的值 {value!r} 无法解析: {exc}") from exc
    return value


def _deep_get(data: Dict[str, Any], keys) -> Optional[Any]:
    current: Any = data
    for key in keys:
        if not isinstance(current, dict):
            return None
        current = current.get(key)
        if current is None:
            return None
    return current


@dataclass
class TelemetrySettings:
    max_samples_per_series: Optional[int] = None
    collectors_path: str = "configs/collectors.yaml"


@dataclass
class DetectionSettings:
    job_z_threshold: float = 6.0
    min_baseline_samples: int = 30
    dominance_factor: float = 3.0
    persistence_windows: int = 2
    max_iterations: int = 8
    min_score: float = 3.0
    soak_windows: int = 10
    window_ticks: int = 1


@dataclass
class KbSettings:
    precision_floor: float = 0.95
    quantiles: List[float] = field(default_factory=lambda: [1, 5, 25, 50, 75, 95, 99])
    budget: int = 3
    top_features: int = 4
    holdout_seed: int = 0
    kb_dir: str = "kb"


@dataclass
class RemediationSettings:
    deallocate_after_h: float = 0.5
    migrate_after_h: float = 4.0
    quick_validation_h: float = 0.25
    comprehensive_validation_h: float = 1.0
    ticket_retries: int = 5
    ticket_backoff_s: float = 30.0
    ticket_poll_s: float = 600.0
    compute_min: float = 0.5
    sustained_min: float = 0.9
    loopback_min: float = 0.9
    playbooks: Optional[Dict[str, List[str]]] = None


@dataclass
class PolicySettings:
    operator_delay_h: float = 2.5
    history_h: float = 6.0
    evidence_ticks: int = 2
    lookback_ticks: int = 6
    snapshot_every_h: float = 12.0
    max_negatives: int = 12
    max_positives: int = 48


@dataclass
class NumericsSettings:
    threshold: float = 0.99
    steps: int = 10
    overrides: Dict[str, float] = field(default_factory=dict)


@dataclass
class HealthSettings:
    valley_threshold: float = 0.25
    collapse_persistence: int = 3
    straggler_threshold: float = 0.05


@dataclass
class KpiSettings:
    rounding: str = "truncate"  # truncate | half-even
    calendar_start: str = "2025-03-01"


@dataclass
class GuardianSettings:
    artifact_root: str = "artifacts"
    log_dir: str = "logs"
    telemetry: TelemetrySettings = field(default_factory=TelemetrySettings)
    detection: DetectionSettings = field(default_factory=DetectionSettings)
    kb: KbSettings = field(default_factory=KbSettings)
    remediation: RemediationSettings = field(default_factory=RemediationSettings)
    policy: PolicySettings = field(default_factory=PolicySettings)
    numerics: NumericsSettings = field(default_factory=NumericsSettings)
    health: HealthSettings = field(default_factory=HealthSettings)
    kpi: KpiSettings = field(default_factory=KpiSettings)

    @classmethod
    def from_config(cls, config: Optional[Dict[str, Any]] = None) -> "GuardianSettings":
        config = config or {}
        settings = cls(
            artifact_root=get_config_value(config, "artifact_root", ARTIFACT_ROOT_ENV, "artifacts"),
            log_dir=get_config_value(config, "log_dir", "", "logs"),
        )
        for section in ("telemetry", "detection", "kb", "remediation", "policy", "numerics", "health", "kpi"):
            target = getattr(settings, section)
            raw = config.get(section) or {}
            if not isinstance(raw, dict):
                raise ConfigError(f"配置段 {section} 需要是一个对象。")
            for key, value in raw.items():
                if not hasattr(target, key):
                    raise ConfigError(f"未知配置项 {section}.{key}")
                setattr(target, key, value)
        return settings
