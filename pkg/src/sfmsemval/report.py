"""Pipeline configuration and validation-report rendering."""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Mapping, Optional, TextIO

from .camera_geometry import Stats
from .filters import FilterReport

REPORT_SCHEMA = 1

STAT_ROWS = [
    ("Cameras", "cameras"),
    ("Images", "images"),
    ("Registered Images", "images"),
    ("Points", "points"),
    ("Observations", "observations"),
    ("Mean Track Length", "mean_track_length"),
    ("Mean Observations per Image", "mean_obs_per_image"),
    ("Mean Re-projection Error", "mean_reproj_error"),
]

STAGE_TITLES = {
    "motion": ("Motion Removal", "Motion Points Removed"),
    "consistency": ("Semantic Consistency Constraint", "Semantic Consistency Constraint Violation Points"),
    "occlusion": ("Occlusion Constraint", "Occlusion Constraint Violation Points"),
}


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    model_dir: Optional[str] = None
    format: str = "auto"
    labels_dir: Optional[str] = None
    label_scale: Optional[float] = None
    label_policy: str = "strict"
    palette: Optional[str] = None
    class_table: str = "cityscapes"
    policy: str = "majority"
    min_track: int = 2
    order: str = "motion-first"
    eps: Optional[float] = None
    trials: int = 200
    seed: int = 0
    min_inliers: int = 10
    depth_margin: Optional[float] = None
    extent_margin: Optional[float] = None
    aggregation: float = 0.5
    planes: Optional[str] = None
    out: Optional[str] = None

    def validate(self, check_paths: bool = True) -> "PipelineConfig":
        if self.format not in ("auto", "text", "binary"):
            raise ConfigError(f"format must be auto, text or binary, got {self.format!r}")
        if self.policy not in ("majority", "any"):
            raise ConfigError(f"policy must be majority or any, got {self.policy!r}")
        if self.label_policy not in ("strict", "skip"):
            raise ConfigError(f"label_policy must be strict or skip, got {self.label_policy!r}")
        if self.order not in ("motion-first", "consistency-first"):
            raise ConfigError(f"order must be motion-first or consistency-first, got {self.order!r}")
        for name in ("min_track", "trials", "min_inliers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("label_scale", "eps"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("depth_margin", "extent_margin"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 0 < self.aggregation <= 1:
            raise ConfigError("aggregation must lie in (0, 1]")
        if check_paths:
            for name in ("model_dir", "labels_dir"):
                v = getattr(self, name)
                if v is not None and not os.path.isdir(v):
                    raise ConfigError(f"{name}: no such directory {v!r}")
            for name in ("palette", "planes"):
                v = getattr(self, name)
                if v is not None and not os.path.isfile(v):
                    raise ConfigError(f"{name}: no such file {v!r}")
        return self

    def updated(self, **overrides) -> "PipelineConfig":
        values = asdict(self)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return PipelineConfig(**values)

    def to_dict(self) -> dict:
        return asdict(self)


def _coerce(name: str, raw: str):
    kinds = {f.name: f.type for f in fields(PipelineConfig)}
    if name not in kinds:
        raise ConfigError(f"unknown config key {name!r}")
    kind = kinds[name]
    if raw.lower() in ("", "none") and "Optional" in kind:
        return None
    try:
        if "int" in kind:
            return int(raw)
        if "float" in kind:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None
    return raw


def load_config(path) -> PipelineConfig:
    """Flat ``key = value`` file; ``#`` starts a comment, dashes in keys are accepted."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            try:
                values[key] = _coerce(key, value)
            except ConfigError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from None
    return PipelineConfig(**values)


def _stats_to_dict(s: Optional[Stats]) -> Optional[dict]:
    return None if s is None else asdict(s)


def _stats_from_dict(d: Optional[Mapping]) -> Optional[Stats]:
    return None if d is None else Stats(**d)


@dataclass
class ValidationReport:
    stages: List[FilterReport] = field(default_factory=list)
    initial: Optional[Stats] = None
    final: Optional[Stats] = None
    occlusion: Dict[str, Any] = field(default_factory=dict)
    config: Dict[str, Any] = field(default_factory=dict)
    seed: Optional[int] = None
    provenance: Dict[str, Any] = field(default_factory=dict)

    def check(self) -> None:
        """Stage k's output counts must be stage k+1's input counts."""
        for a, b in zip(self.stages, self.stages[1:]):
            if (a.points_after, a.observations_after) != (b.points_before, b.observations_before):
                raise ValueError(f"stage {b.stage} does not continue from stage {a.stage}")

    def to_dict(self, provenance: bool = True) -> dict:
        d = {
            "schema": REPORT_SCHEMA,
            "stages": [s.to_dict() for s in self.stages],
            "initial": _stats_to_dict(self.initial),
            "final": _stats_to_dict(self.final),
            "occlusion": dict(self.occlusion),
            "config": dict(self.config),
            "seed": self.seed,
        }
        if provenance:
            d["provenance"] = dict(self.provenance)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ValidationReport":
        if d.get("schema") != REPORT_SCHEMA:
            raise ValueError(f"unsupported report schema {d.get('schema')!r}")
        return cls(
            stages=[FilterReport.from_dict(s) for s in d.get("stages", [])],
            initial=_stats_from_dict(d.get("initial")),
            final=_stats_from_dict(d.get("final")),
            occlusion=dict(d.get("occlusion", {})),
            config=dict(d.get("config", {})),
            seed=d.get("seed"),
            provenance=dict(d.get("provenance", {})),
        )

    def to_json(self, provenance: bool = True) -> str:
        return json.dumps(self.to_dict(provenance), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ValidationReport":
        return cls.from_dict(json.loads(text))


def format_value(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, (int,)) and not isinstance(v, bool):
        return f"{v:,}"
    return f"{v:.6g}"


def _table(header: List[str], rows: List[List[str]]) -> str:
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    lines = []
    for r in [header] + rows:
        cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines) + "\n"


def render_stats(stats: Stats, title: str = "Reconstruction Statistics") -> str:
    rows = [[label, format_value(getattr(stats, attr))] for label, attr in STAT_ROWS]
    return _table([title, "Value"], rows)


def render_stage(stage: FilterReport) -> str:
    title, removed_label = STAGE_TITLES.get(stage.stage, (stage.stage, "Points Removed"))
    rows = [
        ["Points", format_value(stage.points_before), format_value(stage.points_after)],
        [removed_label, "", format_value(stage.violation_points)],
        ["Observations", format_value(stage.observations_before), format_value(stage.observations_after)],
        ["Observations Removed", "", format_value(stage.observations_removed)],
        ["Mean Track Length", format_value(stage.mean_track_length_before),
         format_value(stage.mean_track_length_after)],
    ]
    if stage.images:
        rows.append(["Mean Observations per Image", format_value(stage.stats_before().mean_obs_per_image),
                     format_value(stage.stats_after().mean_obs_per_image)])
    return _table([title, "Before", "After"], rows)


CSV_COLUMNS = ["stage", "points_before", "points_after", "violation_points", "observations_before",
               "observations_after", "observations_removed", "mean_track_length_before",
               "mean_track_length_after", "images", "inconsistent_points"]


def render_report(report: ValidationReport, format: str = "text", stream: Optional[TextIO] = None) -> str:
    """Render as "text" (aligned tables), "json" or "csv" (one row per stage)."""
    if format == "json":
        out = report.to_json()
    elif format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for s in report.stages:
            d = s.to_dict()
            writer.writerow(["" if d[c] is None else (f"{d[c]:.12g}" if isinstance(d[c], float) else d[c])
                             for c in CSV_COLUMNS])
        out = buf.getvalue()
    elif format == "text":
        parts = []
        if report.initial is not None:
            parts.append(render_stats(report.initial, "Input Model"))
        parts.extend(render_stage(s) for s in report.stages)
        if report.occlusion:
            rows = [[k.replace("_", " ").capitalize(), format_value(v)] for k, v in sorted(report.occlusion.items())]
            parts.append(_table(["Occlusion Summary", "Value"], rows))
        if report.final is not None:
            parts.append(render_stats(report.final, "Output Model"))
        out = "\n".join(parts) if parts else _table(["Reconstruction Statistics", "Value"], [])
    else:
        raise ValueError(f"unknown report format {format!r}")
    if stream is not None:
        stream.write(out)
    return out
