"""Simulation configuration.

All keys live in one flat namespace so a ``key=value`` config file and CLI
flags of the same names map 1:1 onto SimConfig fields. Durations are seconds,
distances meters; the kernel converts to milliseconds internally.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass


class ConfigError(ValueError):
    pass


@dataclass
class SimConfig:
    # Geometry and radio
    area_width: float = 400.0
    area_height: float = 200.0
    # Smallest range covering diagonal-adjacent 40 m cells (2*sqrt(2)*40).
    radio_range: float = 113.2
    p_loss: float = 0.05
    mac_retries: int = 7
    per_hop_latency_ms: float = 2.0
    bandwidth_mbps: float = 6.0
    # Optional interference approximation: effective loss grows linearly with
    # concurrent in-range transmissions inside the window, capped.
    congestion_factor: float = 0.0
    congestion_window_ms: float = 10.0
    congestion_cap: float = 0.6

    # Run schedule
    seed: int = 1
    duration: float = 720.0
    join_start: float = 30.0
    join_length: float = 30.0
    cooldown: float = 60.0

    # Flooding materialization
    dv_update_interval: float = 15.0
    flood_dedup_capacity: int = 4096
    flood_jitter_ms: float = 20.0
    hop_limit: int = 64
    p_reply: float = 0.3
    reply_window: float = 0.5

    # Geographic materialization
    cell_size: float = 40.0
    beacon_interval: float = 1.0
    beacon_timeout_factor: float = 3.0
    stationary_detect: float = 5.0
    nack_hold: float = 30.0
    max_hops_factor: int = 4

    # Store / operations
    batch_n: int = 10
    fetch_more: str = "auto"  # auto | off
    op_timeout: float = 2.0
    op_retries: int = 3
    expiry_sweep: float = 10.0
    summary_size: int = 64

    # Mobility (v_max 0 disables)
    v_max: float = 0.0
    mobile_fraction: float = 0.6
    p_move: float = 0.8
    pause: float = 120.0
    mobility_tick: float = 1.0

    # Churn
    churn_mode: str = "none"  # none | permanent | transient
    churn_fraction: float = 0.0
    crash_window_start: float = 200.0
    crash_window_end: float = 300.0
    on_period: float = 120.0
    off_period: float = 60.0
    p_switch: float = 0.75

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.radio_range <= 0:
            raise ConfigError("radio_range must be positive")
        if not 0.0 <= self.p_loss < 1.0:
            raise ConfigError("p_loss must be in [0, 1)")
        if not 0.0 <= self.p_switch <= 1.0:
            raise ConfigError("p_switch must be in [0, 1]")
        if self.area_width <= 0 or self.area_height <= 0:
            raise ConfigError("area dimensions must be positive")
        if self.churn_mode not in ("none", "permanent", "transient"):
            raise ConfigError(f"unknown churn_mode {self.churn_mode!r}")
        if self.fetch_more not in ("auto", "off"):
            raise ConfigError(f"unknown fetch_more policy {self.fetch_more!r}")
        if not 0.0 <= self.churn_fraction <= 1.0:
            raise ConfigError("churn_fraction must be in [0, 1]")
        if self.mac_retries < 0 or self.op_retries < 0:
            raise ConfigError("retry counts must be non-negative")

    def replace(self, **kw) -> "SimConfig":
        return dataclasses.replace(self, **kw)

    @classmethod
    def field_types(cls) -> dict[str, type]:
        return {f.name: f.type if isinstance(f.type, type) else _resolve(f)
                for f in dataclasses.fields(cls)}

    @classmethod
    def from_mapping(cls, mapping: dict) -> "SimConfig":
        return cls().with_overrides(mapping)

    def with_overrides(self, mapping: dict) -> "SimConfig":
        kw = {}
        types = _FIELD_TYPES
        for key, value in mapping.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kw[key] = _coerce(key, value, types[key])
        return self.replace(**kw)

    @classmethod
    def from_file(cls, path) -> "SimConfig":
        return cls().with_overrides(read_config_file(path))


def _resolve(f):
    return {"float": float, "int": int, "str": str}[f.type]


_FIELD_TYPES = {f.name: _resolve(f) for f in dataclasses.fields(SimConfig)}


def _coerce(key, value, typ):
    if isinstance(value, typ):
        return value
    try:
        return typ(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {key}: {value!r} (expected {typ.__name__})")


def read_config_file(path) -> dict[str, str]:
    """Parse a key=value config file; '#' starts a comment."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out
