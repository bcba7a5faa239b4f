"""Pipeline configuration: one flat JSON file, every field a CLI flag.

`PipelineConfig.add_arguments` registers one `--<name>` (or `--<name>.<sub>`
for dict fields) flag per field; values parse as JSON with a plain-string
fallback, so `--cameras global_snap` and `--tier_points.large 12800` both
work. Paths are checked by the commands that actually use them.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .util import dump_json, load_json


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    shape_library: str = "assets/shapes"
    layouts: str = "layouts"
    implicit_templates: str | None = "layouts/implicit_templates.json"
    output_root: str = "out"
    seed: int = 0
    small_object_count: int = 8
    tier_points: dict = field(default_factory=lambda: {
        "large": 102400, "medium": 51200, "small": 25600})
    cameras: str = "room_tour"              # room_tour | global_snap
    global_snap_views: int = 16
    resolution: list = field(default_factory=lambda: [1024, 1024])
    fov_deg: float = 60.0
    near: float = 0.05
    weights: str = "proximity"              # proximity | uniform
    visibility_epsilon: float | None = None  # None = scene-adaptive default
    superpoint_angle_deg: float = 15.0
    superpoint_distance: float | None = None  # None = 2.5 x mean spacing
    superpoint_min_size: int = 20
    normals_k: int = 16
    backend: str = "oracle"                 # oracle | external
    exchange_root: str = "exchange"
    timeout_s: float = 120.0
    min_pixels: int = 10
    jobs: int = 1

    def __post_init__(self):
        if self.cameras not in ("room_tour", "global_snap"):
            raise ConfigError(f"cameras must be room_tour|global_snap, got '{self.cameras}'")
        if self.weights not in ("proximity", "uniform"):
            raise ConfigError(f"weights must be proximity|uniform, got '{self.weights}'")
        if self.backend not in ("oracle", "external"):
            raise ConfigError(f"backend must be oracle|external, got '{self.backend}'")
        if isinstance(self.resolution, int):
            self.resolution = [self.resolution, self.resolution]
        self.resolution = [int(self.resolution[0]), int(self.resolution[1])]
        if min(self.resolution) < 16:
            raise ConfigError("resolution must be at least 16 pixels")
        if not (0.0 < self.fov_deg < 180.0):
            raise ConfigError("fov_deg must be in (0, 180)")
        for tier in ("large", "medium", "small"):
            if tier not in self.tier_points:
                raise ConfigError(f"tier_points missing '{tier}'")
            if int(self.tier_points[tier]) < 1:
                raise ConfigError(f"tier_points[{tier}] must be >= 1")
        self.tier_points = {k: int(v) for k, v in self.tier_points.items()}
        if self.small_object_count < 0:
            raise ConfigError("small_object_count must be >= 0")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")

    # ------------------------------------------------------------- plumbing

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_dict(load_json(path))

    def save(self, path) -> None:
        dump_json(self.to_dict(), path)

    @classmethod
    def add_arguments(cls, parser) -> None:
        defaults = cls()
        for f in fields(cls):
            value = getattr(defaults, f.name)
            if isinstance(value, dict):
                for sub in value:
                    parser.add_argument(f"--{f.name}.{sub}", dest=f"{f.name}.{sub}",
                                        metavar="V", default=None)
            parser.add_argument(f"--{f.name}", dest=f.name, metavar="V",
                                default=None)

    def apply_overrides(self, args_namespace) -> "PipelineConfig":
        """Fold parsed CLI flags (dotted names included) into a new config."""
        d = self.to_dict()
        for key, raw in vars(args_namespace).items():
            if raw is None:
                continue
            try:
                value = json.loads(raw) if isinstance(raw, str) else raw
            except json.JSONDecodeError:
                value = raw
            if "." in key:
                base, sub = key.split(".", 1)
                if base in d and isinstance(d[base], dict):
                    d[base][sub] = value
            elif key in d:
                d[key] = value
        return PipelineConfig.from_dict(d)

    # ------------------------------------------------------------ adapters

    def pipeline_settings(self):
        from .grouping import PipelineSettings
        return PipelineSettings(
            camera_strategy=self.cameras,
            global_snap_views=self.global_snap_views,
            resolution=(self.resolution[0], self.resolution[1]),
            vertical_fov=math.radians(self.fov_deg),
            near=self.near,
            weight_mode=self.weights,
            visibility_epsilon=self.visibility_epsilon,
            superpoint_angle=math.radians(self.superpoint_angle_deg),
            superpoint_distance=self.superpoint_distance,
            superpoint_min_size=self.superpoint_min_size,
            normals_k=self.normals_k,
            min_pixels=self.min_pixels)

    def segmenter_backend(self, exchange_subdir: str | None = None):
        from .segmenter import SegmenterBackend
        root = Path(self.exchange_root)
        if exchange_subdir:
            root = root / exchange_subdir
        return SegmenterBackend(kind=self.backend, exchange_root=root,
                                timeout_s=self.timeout_s,
                                min_pixels=self.min_pixels)
