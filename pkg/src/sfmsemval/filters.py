"""Semantic-consistency and motion filtering of sparse-model tracks."""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .camera_geometry import Stats, mean_reprojection_stats
from .model_io import NULL_POINT3D_ID, SparseModel
from .semantics import UNKNOWN_ID, ClassTable, LabeledObservation, LabelError

LabelIndex = Dict[Tuple[int, int], int]


@dataclass
class FilterReport:
    """Before/after counts of one filtering stage.

    ``violation_points`` is the number of points the stage rejected.
    ``inconsistent_points`` counts points that lost at least one observation
    to a label disagreement, whether or not they survived.
    """

    stage: str
    points_before: int
    points_after: int
    observations_before: int
    observations_after: int
    violation_points: int
    images: int = 0
    inconsistent_points: int = 0

    def __post_init__(self):
        if self.points_after != self.points_before - self.violation_points:
            raise ValueError(
                f"{self.stage}: points_after {self.points_after} != "
                f"{self.points_before} - {self.violation_points}"
            )
        if self.observations_after > self.observations_before:
            raise ValueError(f"{self.stage}: observations increased")

    @classmethod
    def from_removal(cls, stage: str, points_before: int, points_removed: int, observations_before: int,
                     observations_removed: int, images: int = 0) -> "FilterReport":
        return cls(stage, points_before, points_before - points_removed, observations_before,
                   observations_before - observations_removed, points_removed, images)

    @property
    def points_removed(self) -> int:
        return self.points_before - self.points_after

    @property
    def observations_removed(self) -> int:
        return self.observations_before - self.observations_after

    @property
    def mean_track_length_before(self) -> Optional[float]:
        return self.observations_before / self.points_before if self.points_before else None

    @property
    def mean_track_length_after(self) -> Optional[float]:
        return self.observations_after / self.points_after if self.points_after else None

    def stats_before(self) -> Stats:
        return Stats.from_counts(self.points_before, self.observations_before, self.images)

    def stats_after(self) -> Stats:
        return Stats.from_counts(self.points_after, self.observations_after, self.images)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(
            points_removed=self.points_removed,
            observations_removed=self.observations_removed,
            mean_track_length_before=self.mean_track_length_before,
            mean_track_length_after=self.mean_track_length_after,
        )
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "FilterReport":
        keys = ("stage", "points_before", "points_after", "observations_before", "observations_after",
                "violation_points", "images", "inconsistent_points")
        return cls(**{k: d[k] for k in keys if k in d})


def majority_label(labels: Iterable[int]) -> Tuple[int, int]:
    """Most frequent class id and its count; ties go to the smallest id."""
    counts = Counter(int(v) for v in labels)
    if not counts:
        raise ValueError("majority of an empty label set")
    winner = min(counts, key=lambda c: (-counts[c], c))
    return winner, counts[winner]


def label_index(observations: Iterable[LabeledObservation]) -> LabelIndex:
    return {(o.image_id, o.point2d_idx): o.class_id for o in observations}


def _track_labels(model: SparseModel, point_id: int, labels: LabelIndex, strict: bool) -> List[int]:
    out = []
    for entry in model.points[point_id].track:
        if entry in labels:
            out.append(labels[entry])
        elif strict:
            raise LabelError(f"observation {entry} of point {point_id} has no label")
        else:
            out.append(UNKNOWN_ID)
    return out


def _unlink(model: SparseModel, entries: Iterable[Tuple[int, int]]) -> None:
    for image_id, idx in entries:
        model.images[image_id].point3d_ids[idx] = NULL_POINT3D_ID


def remove_points(model: SparseModel, point_ids: Iterable[int]) -> SparseModel:
    """Copy of ``model`` without the given points; their 2D observations are unlinked, not deleted."""
    out = model.copy()
    for pid in point_ids:
        point = out.points.pop(pid, None)
        if point is not None:
            _unlink(out, point.track)
    return out


def point_majorities(model: SparseModel, labels: LabelIndex, strict: bool = True) -> Dict[int, int]:
    """Majority class of every point's track."""
    return {pid: majority_label(_track_labels(model, pid, labels, strict))[0] for pid in model.points}


def consistency_filter(model: SparseModel, observations: Sequence[LabeledObservation], min_track: int = 2,
                       strict: bool = True) -> Tuple[SparseModel, FilterReport]:
    """Enforce one semantic class per track.

    Observations disagreeing with their track's majority label are unlinked;
    points left with fewer than ``min_track`` observations are deleted.

    Raises:
        LabelError: in strict mode, when a track entry has no label.
    """
    if min_track < 1:
        raise ValueError("min_track must be >= 1")
    labels = label_index(observations)
    out = model.copy()
    obs_before = model.num_observations
    removed = inconsistent = 0
    for pid in sorted(model.points):
        point = out.points[pid]
        track_labels = _track_labels(model, pid, labels, strict)
        winner, _ = majority_label(track_labels)
        keep = [e for e, c in zip(point.track, track_labels) if c == winner]
        drop = [e for e, c in zip(point.track, track_labels) if c != winner]
        if drop:
            inconsistent += 1
        if len(keep) < min_track:
            _unlink(out, point.track)
            del out.points[pid]
            removed += 1
        else:
            _unlink(out, drop)
            point.track = keep
    report = FilterReport("consistency", len(model.points), len(out.points), obs_before, out.num_observations,
                          removed, len(model.images), inconsistent)
    return out, report


def motion_filter(model: SparseModel, observations: Sequence[LabeledObservation], table: ClassTable,
                  policy: str = "majority", strict: bool = True) -> Tuple[SparseModel, FilterReport]:
    """Delete points belonging to dynamic classes.

    With policy "majority" a point goes when its majority label is dynamic;
    with "any" when any of its observations is.
    """
    if policy not in ("majority", "any"):
        raise ValueError(f"unknown motion policy {policy!r}")
    dynamic = table.dynamic_ids
    labels = label_index(observations)
    doomed = []
    for pid in sorted(model.points):
        track_labels = _track_labels(model, pid, labels, strict)
        if policy == "majority":
            hit = majority_label(track_labels)[0] in dynamic
        else:
            hit = any(c in dynamic for c in track_labels)
        if hit:
            doomed.append(pid)
    out = remove_points(model, doomed)
    report = FilterReport("motion", len(model.points), len(out.points), model.num_observations,
                          out.num_observations, len(doomed), len(model.images))
    return out, report


def exhaustive_pair_count(n: int) -> int:
    """Image pairs matched by exhaustive matching, C(n, 2)."""
    if n < 0:
        raise ValueError("n must be non-negative")
    return n * (n - 1) // 2


def model_stats(model: SparseModel) -> Stats:
    return mean_reprojection_stats(model)
