"""Flat key=value pipeline configuration.

Unknown keys are rejected by name; the effective configuration is echoed
into every run's output directory, so a run is reproducible from its
artifacts alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .medialness import FilterConfig

DEFAULT_SPHERE_RADII = tuple(float(r) for r in np.arange(1.0, 10.01, 0.5))


@dataclass
class PipelineConfig:
    grow_step_hu: float = 1.0
    leak_factor: float = 3.0
    grow_max_iterations: int = 400
    closing_iterations: int = 10
    cost_gradient_weight: float = 0.8
    cost_region_weight: float = 0.2
    pyramid_factor: float = 1.7
    n_scales: int = 4
    radii: tuple = (1.0, 1.3, 1.6, 1.9)
    response_floor: float = 0.05
    nms_radius: float = 1.0
    prune_min_voxels: int = 5
    airway_dilation: int = 2
    reconnect_epsilon: float = 0.05
    reconnect_lambda: float = 0.5
    sphere_radii: tuple = DEFAULT_SPHERE_RADII
    drop_threshold: float = 0.6
    air_reference_hu: float | str = "auto"
    dm_min_branch_mm: float = 10.0
    noise_seed: int = 0
    flip_lr: bool = False
    otsu_bins: int = 256
    tile_z: int = 0

    def filter_config(self) -> FilterConfig:
        return FilterConfig(n_scales=self.n_scales,
                            pyramid_factor=self.pyramid_factor,
                            radii=tuple(self.radii),
                            response_floor=self.response_floor)


_BOOL_TRUE = {"true", "1", "yes", "on"}
_BOOL_FALSE = {"false", "0", "no", "off"}


def _parse_value(name: str, text: str, default):
    text = text.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in _BOOL_TRUE:
            return True
        if low in _BOOL_FALSE:
            return False
        raise ValueError(f"config key {name}: expected a boolean, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, tuple):
        return tuple(float(v) for v in text.split(",") if v.strip())
    if name == "air_reference_hu":
        return "auto" if text.lower() == "auto" else float(text)
    if isinstance(default, float):
        return float(text)
    return text


def parse_config(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    """Parse "key = value" lines ('#' starts a comment). Raises on unknown
    keys, naming the offender."""
    cfg = base or PipelineConfig()
    known = {f.name: f for f in fields(PipelineConfig)}
    values = {f.name: getattr(cfg, f.name) for f in fields(PipelineConfig)}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value, "
                             f"got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ValueError(f"unknown config key {key!r} (line {lineno})")
        default = getattr(PipelineConfig(), key)
        values[key] = _parse_value(key, value, default)
    return PipelineConfig(**values)


def load_config(path: str, base: PipelineConfig | None = None) -> PipelineConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read(), base)


def serialize_config(cfg: PipelineConfig) -> str:
    lines = []
    for f in fields(PipelineConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            text = ",".join("%.6g" % x for x in v)
        elif isinstance(v, bool):
            text = "true" if v else "false"
        elif isinstance(v, float):
            text = "%.6g" % v
        else:
            text = str(v)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"
