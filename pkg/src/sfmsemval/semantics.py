"""
Semantic labels for sparse-model observations.

Label maps are rasters of class ids produced by an upstream segmentation
network. Each 2D observation in a track is assigned the class of the pixel it
falls in.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, TextIO, Tuple, Union

import numpy as np
from PIL import Image

from .model_io import NULL_POINT3D_ID, SparseModel

logger = logging.getLogger(__name__)

UNKNOWN_ID = 255
UNKNOWN_NAME = "unknown"
LABEL_MAP_SUFFIXES = (".png", ".pgm")
CSV_HEADER = ["imageid", "X2D", "Y2D", "X3D", "Y3D", "Z3D", "INTENSITY", "SEMANTIC_LABEL"]


class LabelError(ValueError):
    pass


@dataclass(frozen=True)
class ClassEntry:
    class_id: int
    name: str
    opaque: bool = False
    dynamic: bool = False


class ClassTable:
    """Registry of semantic classes and their opacity / motion flags.

    The reserved UNKNOWN class (id 255) is always present and is neither
    opaque nor dynamic.
    """

    def __init__(self, entries: Iterable[ClassEntry]):
        entries = list(entries)
        if not any(e.class_id == UNKNOWN_ID for e in entries):
            entries.append(ClassEntry(UNKNOWN_ID, UNKNOWN_NAME))
        by_id, by_name = {}, {}
        for e in entries:
            if not 0 <= e.class_id <= 255:
                raise LabelError(f"class id {e.class_id} outside 0..255")
            if not e.name:
                raise LabelError(f"class {e.class_id} has an empty name")
            if e.class_id in by_id:
                raise LabelError(f"duplicate class id {e.class_id}")
            if e.name in by_name:
                raise LabelError(f"duplicate class name {e.name!r}")
            if e.class_id == UNKNOWN_ID and (e.opaque or e.dynamic):
                raise LabelError("reserved class 255 cannot be opaque or dynamic")
            by_id[e.class_id] = e
            by_name[e.name] = e
        self._by_id = dict(sorted(by_id.items()))
        self._by_name = by_name

    def __iter__(self):
        return iter(self._by_id.values())

    def __len__(self):
        return len(self._by_id)

    def __contains__(self, class_id) -> bool:
        return int(class_id) in self._by_id

    def __getitem__(self, class_id: int) -> ClassEntry:
        return self._by_id[int(class_id)]

    def __eq__(self, other):
        return isinstance(other, ClassTable) and list(self) == list(other)

    def by_name(self, name: str) -> ClassEntry:
        try:
            return self._by_name[name]
        except KeyError:
            raise LabelError(f"unknown class name {name!r}") from None

    def name(self, class_id: int) -> str:
        return self[class_id].name

    @property
    def ids(self) -> np.ndarray:
        return np.array(list(self._by_id), dtype=np.int64)

    @property
    def dynamic_ids(self) -> frozenset:
        return frozenset(e.class_id for e in self if e.dynamic)

    @property
    def opaque_ids(self) -> frozenset:
        return frozenset(e.class_id for e in self if e.opaque)


def _flag(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "y"):
        return True
    if v in ("0", "false", "no", "n"):
        return False
    raise LabelError(f"not a boolean: {value!r}")


def load_class_table(path: Union[str, os.PathLike]) -> ClassTable:
    """Parse a class table file.

    One class per line as key=value tokens, e.g.::

        id=11 name=building opaque=1 dynamic=0

    ``#`` starts a comment. ``opaque`` and ``dynamic`` default to 0.
    Names cannot contain whitespace.
    """
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                fields = dict(tok.split("=", 1) for tok in line.split())
                entries.append(ClassEntry(
                    class_id=int(fields["id"]),
                    name=fields["name"],
                    opaque=_flag(fields.get("opaque", "0")),
                    dynamic=_flag(fields.get("dynamic", "0")),
                ))
            except (KeyError, ValueError) as exc:
                raise LabelError(f"{path}:{lineno}: bad class entry ({exc})") from exc
    return ClassTable(entries)


def write_class_table(table: ClassTable, stream: TextIO) -> None:
    for e in table:
        stream.write(f"id={e.class_id} name={e.name} opaque={int(e.opaque)} dynamic={int(e.dynamic)}\n")


# Cityscapes label ids (full 34-class schema).
_CITYSCAPES = [
    "unlabeled", "ego_vehicle", "rectification_border", "out_of_roi", "static", "dynamic", "ground",
    "road", "sidewalk", "parking", "rail_track", "building", "wall", "fence", "guard_rail", "bridge",
    "tunnel", "pole", "polegroup", "traffic_light", "traffic_sign", "vegetation", "terrain", "sky",
    "person", "rider", "car", "truck", "bus", "caravan", "trailer", "train", "motorcycle", "bicycle",
]
CITYSCAPES_OPAQUE = ("building", "wall", "fence", "bridge", "tunnel")
CITYSCAPES_DYNAMIC = ("sky", "person", "rider", "car", "truck", "bus", "train", "motorcycle", "bicycle")


def cityscapes_table() -> ClassTable:
    """Default table: Cityscapes label ids with building-like classes opaque."""
    return ClassTable(
        ClassEntry(i, name, name in CITYSCAPES_OPAQUE, name in CITYSCAPES_DYNAMIC)
        for i, name in enumerate(_CITYSCAPES)
    )


def compact_table() -> ClassTable:
    """Small preset whose ids follow the example labelled-points export."""
    return ClassTable([
        ClassEntry(1, "road"),
        ClassEntry(2, "building", opaque=True),
        ClassEntry(3, "sky", dynamic=True),
        ClassEntry(4, "car", dynamic=True),
        ClassEntry(6, "foliage"),
        ClassEntry(9, "dynamic", dynamic=True),
    ])


PRESETS = {"cityscapes": cityscapes_table, "compact": compact_table}


def resolve_class_table(name: Optional[str]) -> ClassTable:
    """A preset name, a file path, or None for the default preset."""
    if name is None:
        return cityscapes_table()
    if name in PRESETS:
        return PRESETS[name]()
    return load_class_table(name)


# ---------------------------------------------------------------------------
# label maps


@dataclass
class LabelMap:
    name: str
    ids: np.ndarray  # (height, width) uint8

    @property
    def height(self) -> int:
        return self.ids.shape[0]

    @property
    def width(self) -> int:
        return self.ids.shape[1]

    def __eq__(self, other):
        return isinstance(other, LabelMap) and self.name == other.name and np.array_equal(self.ids, other.ids)


def _validate_ids(ids: np.ndarray, table: ClassTable, source: str) -> None:
    present = np.unique(ids)
    unknown = [int(v) for v in present if int(v) not in table]
    if unknown:
        raise LabelError(f"{source}: class id(s) {unknown} not in class table")


def load_label_map(path: Union[str, os.PathLike], table: ClassTable, name: Optional[str] = None,
                   palette: Optional[Mapping[Tuple[int, int, int], int]] = None) -> LabelMap:
    """Read an 8-bit class-id raster (PGM, grayscale or indexed PNG).

    With ``palette`` an RGB segmentation is converted through the given
    colour -> class id mapping instead.
    """
    path = Path(path)
    with Image.open(path) as img:
        img.load()
        if img.mode in ("L", "P"):
            ids = np.array(img, dtype=np.uint8)
        elif img.mode in ("RGB", "RGBA") and palette is not None:
            ids = _apply_palette(np.array(img.convert("RGB")), palette, path)
        else:
            raise LabelError(f"{path}: unsupported raster mode {img.mode!r}; need 8-bit single channel")
    if ids.ndim != 2 or ids.size == 0:
        raise LabelError(f"{path}: empty raster")
    _validate_ids(ids, table, str(path))
    return LabelMap(name or path.stem, ids)


def _apply_palette(rgb: np.ndarray, palette, path) -> np.ndarray:
    packed = (rgb[..., 0].astype(np.int64) << 16) | (rgb[..., 1].astype(np.int64) << 8) | rgb[..., 2]
    keys = {(r << 16) | (g << 8) | b: cid for (r, g, b), cid in palette.items()}
    out = np.full(packed.shape, -1, dtype=np.int64)
    for key, cid in keys.items():
        out[packed == key] = cid
    if (out < 0).any():
        raise LabelError(f"{path}: colour(s) without palette entry")
    return out.astype(np.uint8)


def load_palette(path: Union[str, os.PathLike]) -> Dict[Tuple[int, int, int], int]:
    """``r g b class_id`` per line."""
    palette = {}
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].split()
            if line:
                r, g, b, cid = (int(v) for v in line)
                palette[(r, g, b)] = cid
    return palette


def save_label_map(label_map: LabelMap, path: Union[str, os.PathLike]) -> None:
    """Write a raster as PNG or binary PGM, chosen by suffix."""
    Image.fromarray(np.ascontiguousarray(label_map.ids, dtype=np.uint8), mode="L").save(path)


def load_label_dir(directory: Union[str, os.PathLike], table: ClassTable, palette=None) -> Dict[str, LabelMap]:
    """All label maps in ``directory``, keyed by file stem."""
    maps = {}
    for path in sorted(Path(directory).iterdir()):
        if path.suffix.lower() in LABEL_MAP_SUFFIXES:
            maps[path.stem] = load_label_map(path, table, palette=palette)
    return maps


def label_at(label_map: LabelMap, x: float, y: float, scale: float = 1.0) -> int:
    """Class id under image point (x, y).

    Pixel (i, j) covers [i, i+1) x [j, j+1), so the centre of the top-left
    pixel is (0.5, 0.5). ``scale`` is label-map resolution over image
    resolution; indices are clamped to the raster.
    """
    if not (math.isfinite(x) and math.isfinite(y)):
        raise LabelError(f"non-finite keypoint ({x}, {y})")
    if not scale > 0:
        raise ValueError("scale must be positive")
    col = min(max(math.floor(x * scale), 0), label_map.width - 1)
    row = min(max(math.floor(y * scale), 0), label_map.height - 1)
    return int(label_map.ids[row, col])


def labels_at(label_map: LabelMap, xy: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Vectorized :func:`label_at` over (N, 2) points."""
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    if not np.all(np.isfinite(xy)):
        raise LabelError("non-finite keypoint")
    cols = np.clip(np.floor(xy[:, 0] * scale), 0, label_map.width - 1).astype(np.int64)
    rows = np.clip(np.floor(xy[:, 1] * scale), 0, label_map.height - 1).astype(np.int64)
    return label_map.ids[rows, cols].astype(np.int64)


@dataclass(frozen=True)
class LabeledObservation:
    image_id: int
    point2d_idx: int
    x: float
    y: float
    point3d_id: int
    class_id: int


def _find_map(maps: Mapping[str, LabelMap], image_name: str) -> Optional[LabelMap]:
    if image_name in maps:
        return maps[image_name]
    stem = Path(image_name).stem
    return maps.get(stem) or maps.get(Path(image_name).name)


def label_model(model: SparseModel, maps: Mapping[str, LabelMap], table: ClassTable,
                scale: Optional[float] = None, policy: str = "strict") -> List[LabeledObservation]:
    """Assign a class to every 2D observation that belongs to a track.

    Args:
        maps: label maps keyed by image name or file stem.
        scale: label-map / image resolution; None derives it per image from
            the map width over the camera width.
        policy: "strict" raises on a missing map; "skip" labels that image's
            observations UNKNOWN.

    Returns:
        Observations ordered by (image_id, point2d_idx).
    """
    if policy not in ("strict", "skip"):
        raise ValueError(f"unknown policy {policy!r}")
    out = []
    for image_id in sorted(model.images):
        image = model.images[image_id]
        linked = np.flatnonzero(image.point3d_ids != NULL_POINT3D_ID)
        if not linked.size:
            continue
        label_map = _find_map(maps, image.name)
        if label_map is None:
            if policy == "strict":
                raise LabelError(f"no label map for image {image_id} ({image.name})")
            classes = np.full(linked.size, UNKNOWN_ID)
        else:
            s = scale if scale is not None else label_map.width / model.cameras[image.camera_id].width
            classes = labels_at(label_map, image.xys[linked], s)
            _validate_ids(classes, table, label_map.name)
        for idx, cid in zip(linked, classes):
            x, y = image.xys[idx]
            out.append(LabeledObservation(image_id, int(idx), float(x), float(y),
                                          int(image.point3d_ids[idx]), int(cid)))
    return out


def _num(v: float) -> str:
    return f"{float(v):.12g}"


def export_labeled_csv(observations: Sequence[LabeledObservation], model: SparseModel, table: ClassTable,
                       stream: TextIO) -> None:
    """Write the labelled-points CSV, one row per observation.

    Columns: imageid, X2D, Y2D, X3D, Y3D, Z3D, INTENSITY (class id),
    SEMANTIC_LABEL (class name). Rows are ordered by (imageid, point2d_idx).
    """
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for obs in sorted(observations, key=lambda o: (o.image_id, o.point2d_idx)):
        point = model.points.get(obs.point3d_id)
        if point is None or obs.image_id not in model.images:
            raise LabelError(f"observation ({obs.image_id}, {obs.point2d_idx}) references missing model data")
        writer.writerow([obs.image_id, _num(obs.x), _num(obs.y), *(_num(v) for v in point.xyz),
                         obs.class_id, table.name(obs.class_id)])


def write_observations_csv(observations: Sequence[LabeledObservation], stream: TextIO) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["image_id", "point2d_idx", "x", "y", "point3d_id", "class_id"])
    for o in observations:
        writer.writerow([o.image_id, o.point2d_idx, _num(o.x), _num(o.y), o.point3d_id, o.class_id])


def read_observations_csv(stream: TextIO) -> List[LabeledObservation]:
    reader = csv.DictReader(stream)
    return [LabeledObservation(int(r["image_id"]), int(r["point2d_idx"]), float(r["x"]), float(r["y"]),
                               int(r["point3d_id"]), int(r["class_id"])) for r in reader]


def compute_iou(pred: LabelMap, truth: LabelMap, class_id: int) -> Optional[float]:
    """Intersection over union TP / (TP + FP + FN) for one class.

    Returns None when the class is absent from both maps.
    """
    if pred.ids.shape != truth.ids.shape:
        raise LabelError(f"label map sizes differ: {pred.ids.shape} vs {truth.ids.shape}")
    p = pred.ids == class_id
    t = truth.ids == class_id
    union = np.count_nonzero(p | t)
    if union == 0:
        return None
    return np.count_nonzero(p & t) / union


def mean_iou(pred: LabelMap, truth: LabelMap, class_ids: Iterable[int]) -> Optional[float]:
    values = [v for v in (compute_iou(pred, truth, c) for c in class_ids) if v is not None]
    return float(np.mean(values)) if values else None
