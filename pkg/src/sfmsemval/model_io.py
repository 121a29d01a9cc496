"""
COLMAP sparse model I/O.

Reads and writes cameras/images/points3D in the text and binary layouts
produced by COLMAP's model writer, and reads feature-match counts from the
reconstruction database.
"""

from __future__ import annotations

import csv
import io
import logging
import os
import sqlite3
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, TextIO, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

NULL_POINT3D_ID = -1
MAX_IMAGE_ID = 2147483647
QUAT_DRIFT_WARN = 1e-6
FLOAT_FMT = "{:.12g}"

# model name -> (COLMAP model id, number of params)
CAMERA_MODELS: Dict[str, Tuple[int, int]] = {
    "SIMPLE_PINHOLE": (0, 3),
    "PINHOLE": (1, 4),
    "SIMPLE_RADIAL": (2, 4),
    "RADIAL": (3, 5),
}
CAMERA_MODEL_NAMES = {model_id: name for name, (model_id, _) in CAMERA_MODELS.items()}


class ModelFormatError(ValueError):
    """Raised when a model file is missing, malformed or inconsistent.

    ``location`` names the offending file and line (text) or byte offset
    (binary) when known.
    """

    def __init__(self, message: str, location: Optional[str] = None):
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)


@dataclass
class CameraIntrinsics:
    camera_id: int
    model: str
    width: int
    height: int
    params: np.ndarray

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.model not in CAMERA_MODELS:
            raise ValueError(f"unknown camera model {self.model!r}")
        expected = CAMERA_MODELS[self.model][1]
        if self.params.shape != (expected,):
            raise ValueError(
                f"camera {self.camera_id}: {self.model} takes {expected} params, "
                f"got {self.params.size}"
            )
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"camera {self.camera_id}: non-positive size {self.width}x{self.height}")
        if np.any(self.focal_lengths <= 0):
            raise ValueError(f"camera {self.camera_id}: non-positive focal length")

    @property
    def model_id(self) -> int:
        return CAMERA_MODELS[self.model][0]

    @property
    def focal_lengths(self) -> np.ndarray:
        if self.model == "PINHOLE":
            return self.params[:2]
        return np.repeat(self.params[:1], 2)

    @property
    def principal_point(self) -> np.ndarray:
        if self.model == "PINHOLE":
            return self.params[2:4]
        return self.params[1:3]

    @property
    def radial(self) -> np.ndarray:
        """Radial distortion coefficients (k1[, k2]); empty for pinhole models."""
        if self.model == "SIMPLE_RADIAL":
            return self.params[3:4]
        if self.model == "RADIAL":
            return self.params[3:5]
        return self.params[:0]

    def calibration_matrix(self) -> np.ndarray:
        fx, fy = self.focal_lengths
        cx, cy = self.principal_point
        return np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])


@dataclass
class ImageRecord:
    image_id: int
    qvec: np.ndarray
    tvec: np.ndarray
    camera_id: int
    name: str
    xys: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    point3d_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.qvec = np.asarray(self.qvec, dtype=np.float64).reshape(4)
        self.tvec = np.asarray(self.tvec, dtype=np.float64).reshape(3)
        self.xys = np.asarray(self.xys, dtype=np.float64).reshape(-1, 2)
        self.point3d_ids = np.asarray(self.point3d_ids, dtype=np.int64).reshape(-1)
        if len(self.xys) != len(self.point3d_ids):
            raise ValueError(f"image {self.image_id}: xys and point3d_ids differ in length")

    @property
    def num_observations(self) -> int:
        return int(np.count_nonzero(self.point3d_ids != NULL_POINT3D_ID))

    def copy(self) -> "ImageRecord":
        return ImageRecord(
            self.image_id, self.qvec.copy(), self.tvec.copy(), self.camera_id,
            self.name, self.xys.copy(), self.point3d_ids.copy(),
        )


@dataclass
class Point3D:
    point3d_id: int
    xyz: np.ndarray
    rgb: Tuple[int, int, int]
    error: float
    track: List[Tuple[int, int]]

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(3)
        self.rgb = tuple(int(c) for c in self.rgb)
        self.error = float(self.error)
        self.track = [(int(i), int(j)) for i, j in self.track]

    def copy(self) -> "Point3D":
        return Point3D(self.point3d_id, self.xyz.copy(), self.rgb, self.error, list(self.track))


@dataclass
class SparseModel:
    cameras: Dict[int, CameraIntrinsics] = field(default_factory=dict)
    images: Dict[int, ImageRecord] = field(default_factory=dict)
    points: Dict[int, Point3D] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)

    @property
    def num_observations(self) -> int:
        return sum(len(p.track) for p in self.points.values())

    def copy(self) -> "SparseModel":
        return SparseModel(
            cameras=dict(self.cameras),
            images={k: v.copy() for k, v in self.images.items()},
            points={k: v.copy() for k, v in self.points.items()},
            warnings=list(self.warnings),
        )

    def allclose(self, other: "SparseModel", rtol: float = 1e-11, atol: float = 1e-9) -> bool:
        """Value equality: exact on integer fields, tolerant on reals."""
        return not model_differences(self, other, rtol=rtol, atol=atol)


def model_differences(a: SparseModel, b: SparseModel, rtol: float = 1e-11, atol: float = 1e-9) -> List[str]:
    """List human-readable differences between two models (empty if equal)."""

    def close(x, y):
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        return x.shape == y.shape and np.allclose(x, y, rtol=rtol, atol=atol)

    diffs = []
    if a.cameras.keys() != b.cameras.keys():
        diffs.append("camera ids differ")
    for cid in a.cameras.keys() & b.cameras.keys():
        ca, cb = a.cameras[cid], b.cameras[cid]
        if (ca.model, ca.width, ca.height) != (cb.model, cb.width, cb.height) or not close(ca.params, cb.params):
            diffs.append(f"camera {cid} differs")
    if a.images.keys() != b.images.keys():
        diffs.append("image ids differ")
    for iid in a.images.keys() & b.images.keys():
        ia, ib = a.images[iid], b.images[iid]
        if (ia.camera_id, ia.name) != (ib.camera_id, ib.name):
            diffs.append(f"image {iid} header differs")
        if not (close(ia.qvec, ib.qvec) and close(ia.tvec, ib.tvec) and close(ia.xys, ib.xys)):
            diffs.append(f"image {iid} values differ")
        if not np.array_equal(ia.point3d_ids, ib.point3d_ids):
            diffs.append(f"image {iid} point3d ids differ")
    if a.points.keys() != b.points.keys():
        diffs.append("point ids differ")
    for pid in a.points.keys() & b.points.keys():
        pa, pb = a.points[pid], b.points[pid]
        if pa.rgb != pb.rgb or pa.track != pb.track:
            diffs.append(f"point {pid} rgb/track differs")
        if not (close(pa.xyz, pb.xyz) and close(pa.error, pb.error)):
            diffs.append(f"point {pid} values differ")
    return diffs


# ---------------------------------------------------------------------------
# integrity


def check_integrity(model: SparseModel, locations: Optional[Dict[Tuple[str, int], str]] = None) -> None:
    """Verify that 2D observations and point tracks reference each other exactly.

    ``locations`` maps ("image"|"point"|"camera", id) to a file/offset string
    used in error messages.
    """
    locations = locations or {}

    def where(kind, key):
        return locations.get((kind, key))

    for image in model.images.values():
        if image.camera_id not in model.cameras:
            raise ModelFormatError(
                f"image {image.image_id} references unknown camera {image.camera_id}",
                where("image", image.image_id),
            )

    n_track = 0
    for point in model.points.values():
        if not point.track:
            raise ModelFormatError(f"point {point.point3d_id} has an empty track", where("point", point.point3d_id))
        seen = set()
        for image_id, idx in point.track:
            image = model.images.get(image_id)
            if image is None:
                raise ModelFormatError(
                    f"point {point.point3d_id} track references missing image {image_id}",
                    where("point", point.point3d_id),
                )
            if not 0 <= idx < len(image.point3d_ids):
                raise ModelFormatError(
                    f"point {point.point3d_id} track references point2D index {idx} "
                    f"out of range for image {image_id}",
                    where("point", point.point3d_id),
                )
            if image.point3d_ids[idx] != point.point3d_id:
                raise ModelFormatError(
                    f"point {point.point3d_id} track entry ({image_id}, {idx}) is linked to "
                    f"point {int(image.point3d_ids[idx])} in the image",
                    where("point", point.point3d_id),
                )
            if (image_id, idx) in seen:
                raise ModelFormatError(
                    f"point {point.point3d_id} has duplicate track entry ({image_id}, {idx})",
                    where("point", point.point3d_id),
                )
            seen.add((image_id, idx))
        n_track += len(point.track)

    n_obs = 0
    for image in model.images.values():
        linked = image.point3d_ids[image.point3d_ids != NULL_POINT3D_ID]
        for pid in linked:
            if int(pid) not in model.points:
                raise ModelFormatError(
                    f"image {image.image_id} observes missing point {int(pid)}",
                    where("image", image.image_id),
                )
        n_obs += len(linked)
    if n_obs != n_track:
        # every track entry maps to a distinct observation, so a surplus means
        # an observation that no track lists
        raise ModelFormatError(f"{n_obs} linked observations but {n_track} track entries")


def _normalize_quaternions(model: SparseModel) -> None:
    for image in model.images.values():
        norm = float(np.linalg.norm(image.qvec))
        if norm == 0.0:
            raise ModelFormatError(f"image {image.image_id} has a zero quaternion")
        if abs(norm - 1.0) > QUAT_DRIFT_WARN:
            msg = f"image {image.image_id}: quaternion norm {norm:.9g} renormalized"
            logger.warning(msg)
            model.warnings.append(msg)
        image.qvec = image.qvec / norm


# ---------------------------------------------------------------------------
# text format


def _data_lines(path: Path) -> Iterator[Tuple[int, str]]:
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if line.startswith("#"):
                continue
            yield lineno, line


def read_cameras_text(path: Path, locations=None) -> Dict[int, CameraIntrinsics]:
    cameras = {}
    for lineno, line in _data_lines(path):
        if not line:
            continue
        loc = f"{path.name}:{lineno}"
        elems = line.split()
        if len(elems) < 4:
            raise ModelFormatError("camera record needs at least 4 fields", loc)
        if elems[1] not in CAMERA_MODELS:
            raise ModelFormatError(f"unknown camera model {elems[1]!r}", loc)
        try:
            camera = CameraIntrinsics(int(elems[0]), elems[1], int(elems[2]), int(elems[3]),
                                      [float(v) for v in elems[4:]])
        except ValueError as exc:
            raise ModelFormatError(str(exc), loc) from exc
        cameras[camera.camera_id] = camera
        if locations is not None:
            locations[("camera", camera.camera_id)] = loc
    return cameras


def read_images_text(path: Path, locations=None) -> Dict[int, ImageRecord]:
    images = {}
    lines = _data_lines(path)
    for lineno, line in lines:
        if not line:
            continue
        loc = f"{path.name}:{lineno}"
        elems = line.split()
        if len(elems) < 10:
            raise ModelFormatError("image record needs 10 fields", loc)
        points_line = next(lines, (lineno + 1, ""))[1]
        try:
            image_id = int(elems[0])
            qvec = [float(v) for v in elems[1:5]]
            tvec = [float(v) for v in elems[5:8]]
            camera_id = int(elems[8])
            name = " ".join(elems[9:])
            obs = points_line.split()
            if len(obs) % 3:
                raise ValueError("POINTS2D entries must come in (X, Y, POINT3D_ID) triples")
            xys = np.array([[float(obs[i]), float(obs[i + 1])] for i in range(0, len(obs), 3)]).reshape(-1, 2)
            ids = np.array([int(obs[i + 2]) for i in range(0, len(obs), 3)], dtype=np.int64)
        except ValueError as exc:
            raise ModelFormatError(str(exc), loc) from exc
        images[image_id] = ImageRecord(image_id, qvec, tvec, camera_id, name, xys, ids)
        if locations is not None:
            locations[("image", image_id)] = loc
    return images


def read_points3d_text(path: Path, locations=None) -> Dict[int, Point3D]:
    points = {}
    for lineno, line in _data_lines(path):
        if not line:
            continue
        loc = f"{path.name}:{lineno}"
        elems = line.split()
        if len(elems) < 8 or (len(elems) - 8) % 2:
            raise ModelFormatError("point record needs 8 fields plus (IMAGE_ID, POINT2D_IDX) pairs", loc)
        try:
            pid = int(elems[0])
            xyz = [float(v) for v in elems[1:4]]
            rgb = tuple(int(v) for v in elems[4:7])
            error = float(elems[7])
            ids = [int(v) for v in elems[8:]]
        except ValueError as exc:
            raise ModelFormatError(str(exc), loc) from exc
        points[pid] = Point3D(pid, xyz, rgb, error, list(zip(ids[0::2], ids[1::2])))
        if locations is not None:
            locations[("point", pid)] = loc
    return points


def _fmt(values) -> str:
    return " ".join(FLOAT_FMT.format(float(v)) for v in values)


def write_model_text(model: SparseModel, directory: PathLike) -> None:
    """Write cameras.txt, images.txt and points3D.txt into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    with open(directory / "cameras.txt", "w", encoding="utf-8") as fh:
        fh.write("# Camera list with one line of data per camera:\n")
        fh.write("#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n")
        fh.write(f"# Number of cameras: {len(model.cameras)}\n")
        for cid in sorted(model.cameras):
            cam = model.cameras[cid]
            fh.write(f"{cid} {cam.model} {cam.width} {cam.height} {_fmt(cam.params)}\n")

    n_obs = sum(img.num_observations for img in model.images.values())
    mean_obs = n_obs / len(model.images) if model.images else 0
    with open(directory / "images.txt", "w", encoding="utf-8") as fh:
        fh.write("# Image list with two lines of data per image:\n")
        fh.write("#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n")
        fh.write("#   POINTS2D[] as (X, Y, POINT3D_ID)\n")
        fh.write(f"# Number of images: {len(model.images)}, mean observations per image: {mean_obs:.12g}\n")
        for iid in sorted(model.images):
            img = model.images[iid]
            fh.write(f"{iid} {_fmt(img.qvec)} {_fmt(img.tvec)} {img.camera_id} {img.name}\n")
            fh.write(" ".join(
                f"{FLOAT_FMT.format(x)} {FLOAT_FMT.format(y)} {int(pid)}"
                for (x, y), pid in zip(img.xys, img.point3d_ids)
            ))
            fh.write("\n")

    mean_track = model.num_observations / len(model.points) if model.points else 0
    with open(directory / "points3D.txt", "w", encoding="utf-8") as fh:
        fh.write("# 3D point list with one line of data per point:\n")
        fh.write("#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n")
        fh.write(f"# Number of points: {len(model.points)}, mean track length: {mean_track:.12g}\n")
        for pid in sorted(model.points):
            pt = model.points[pid]
            track = " ".join(f"{i} {j}" for i, j in pt.track)
            fh.write(f"{pid} {_fmt(pt.xyz)} {pt.rgb[0]} {pt.rgb[1]} {pt.rgb[2]} "
                     f"{FLOAT_FMT.format(pt.error)} {track}".rstrip() + "\n")


# ---------------------------------------------------------------------------
# binary format (little-endian, COLMAP writer field order)


class _Reader:
    def __init__(self, path: Path):
        self.path = path
        self.data = path.read_bytes()
        self.offset = 0

    @property
    def loc(self) -> str:
        return f"{self.path.name}@{self.offset}"

    def unpack(self, fmt: str):
        size = struct.calcsize("<" + fmt)
        if self.offset + size > len(self.data):
            raise ModelFormatError("truncated record", self.loc)
        values = struct.unpack_from("<" + fmt, self.data, self.offset)
        self.offset += size
        return values

    def array(self, dtype, count: int) -> np.ndarray:
        dtype = np.dtype(dtype)
        size = dtype.itemsize * count
        if self.offset + size > len(self.data):
            raise ModelFormatError("truncated array", self.loc)
        arr = np.frombuffer(self.data, dtype=dtype, count=count, offset=self.offset)
        self.offset += size
        return arr

    def cstring(self) -> str:
        end = self.data.find(b"\x00", self.offset)
        if end < 0:
            raise ModelFormatError("unterminated image name", self.loc)
        name = self.data[self.offset:end].decode("utf-8")
        self.offset = end + 1
        return name

    def done(self) -> None:
        if self.offset != len(self.data):
            raise ModelFormatError(f"{len(self.data) - self.offset} trailing bytes", self.loc)


def read_cameras_binary(path: Path, locations=None) -> Dict[int, CameraIntrinsics]:
    rd = _Reader(path)
    cameras = {}
    (count,) = rd.unpack("Q")
    for _ in range(count):
        loc = rd.loc
        camera_id, model_id, width, height = rd.unpack("iiQQ")
        if model_id not in CAMERA_MODEL_NAMES:
            raise ModelFormatError(f"unknown camera model id {model_id}", loc)
        name = CAMERA_MODEL_NAMES[model_id]
        params = rd.unpack("d" * CAMERA_MODELS[name][1])
        try:
            cameras[camera_id] = CameraIntrinsics(camera_id, name, width, height, params)
        except ValueError as exc:
            raise ModelFormatError(str(exc), loc) from exc
        if locations is not None:
            locations[("camera", camera_id)] = loc
    rd.done()
    return cameras


_POINT2D_DTYPE = np.dtype([("x", "<f8"), ("y", "<f8"), ("id", "<i8")])


def read_images_binary(path: Path, locations=None) -> Dict[int, ImageRecord]:
    rd = _Reader(path)
    images = {}
    (count,) = rd.unpack("Q")
    for _ in range(count):
        loc = rd.loc
        image_id, qw, qx, qy, qz, tx, ty, tz, camera_id = rd.unpack("idddddddi")
        name = rd.cstring()
        (n_points,) = rd.unpack("Q")
        pts = rd.array(_POINT2D_DTYPE, n_points)
        xys = np.stack([pts["x"], pts["y"]], axis=1) if n_points else np.zeros((0, 2))
        images[image_id] = ImageRecord(image_id, [qw, qx, qy, qz], [tx, ty, tz], camera_id, name,
                                       xys, pts["id"].astype(np.int64))
        if locations is not None:
            locations[("image", image_id)] = loc
    rd.done()
    return images


def read_points3d_binary(path: Path, locations=None) -> Dict[int, Point3D]:
    rd = _Reader(path)
    points = {}
    (count,) = rd.unpack("Q")
    for _ in range(count):
        loc = rd.loc
        pid, x, y, z, r, g, b, error = rd.unpack("QdddBBBd")
        (track_len,) = rd.unpack("Q")
        track = rd.array("<i4", 2 * track_len).reshape(-1, 2)
        points[pid] = Point3D(pid, [x, y, z], (r, g, b), error, [tuple(t) for t in track.tolist()])
        if locations is not None:
            locations[("point", pid)] = loc
    rd.done()
    return points


def write_model_binary(model: SparseModel, directory: PathLike) -> None:
    """Write cameras.bin, images.bin and points3D.bin into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    buf = io.BytesIO()
    buf.write(struct.pack("<Q", len(model.cameras)))
    for cid in sorted(model.cameras):
        cam = model.cameras[cid]
        buf.write(struct.pack("<iiQQ", cid, cam.model_id, cam.width, cam.height))
        buf.write(struct.pack("<" + "d" * len(cam.params), *cam.params))
    (directory / "cameras.bin").write_bytes(buf.getvalue())

    buf = io.BytesIO()
    buf.write(struct.pack("<Q", len(model.images)))
    for iid in sorted(model.images):
        img = model.images[iid]
        buf.write(struct.pack("<idddddddi", iid, *img.qvec, *img.tvec, img.camera_id))
        buf.write(img.name.encode("utf-8") + b"\x00")
        buf.write(struct.pack("<Q", len(img.point3d_ids)))
        pts = np.empty(len(img.point3d_ids), dtype=_POINT2D_DTYPE)
        pts["x"], pts["y"], pts["id"] = img.xys[:, 0], img.xys[:, 1], img.point3d_ids
        buf.write(pts.tobytes())
    (directory / "images.bin").write_bytes(buf.getvalue())

    buf = io.BytesIO()
    buf.write(struct.pack("<Q", len(model.points)))
    for pid in sorted(model.points):
        pt = model.points[pid]
        buf.write(struct.pack("<QdddBBBd", pid, *pt.xyz, *pt.rgb, pt.error))
        buf.write(struct.pack("<Q", len(pt.track)))
        buf.write(np.asarray(pt.track, dtype="<i4").reshape(-1).tobytes())
    (directory / "points3D.bin").write_bytes(buf.getvalue())


# ---------------------------------------------------------------------------
# loading


def detect_format(directory: PathLike) -> str:
    directory = Path(directory)
    if (directory / "cameras.bin").exists():
        return "binary"
    if (directory / "cameras.txt").exists():
        return "text"
    raise ModelFormatError(f"no cameras.bin or cameras.txt in {directory}")


def load_model(directory: PathLike, format: str = "auto") -> SparseModel:
    """Load a COLMAP sparse model directory.

    Args:
        directory: folder holding cameras/images/points3D files.
        format: "text", "binary" or "auto" (binary preferred when both exist).

    Returns:
        A referentially intact SparseModel with unit quaternions.

    Raises:
        ModelFormatError: missing file, malformed record, unknown camera model
            or dangling reference. The message names file and line/offset.
    """
    directory = Path(directory)
    if format == "auto":
        format = detect_format(directory)
    if format not in ("text", "binary"):
        raise ValueError(f"unknown model format {format!r}")
    ext = ".txt" if format == "text" else ".bin"
    readers = {
        "text": (read_cameras_text, read_images_text, read_points3d_text),
        "binary": (read_cameras_binary, read_images_binary, read_points3d_binary),
    }[format]
    paths = [directory / f"{stem}{ext}" for stem in ("cameras", "images", "points3D")]
    for path in paths:
        if not path.is_file():
            raise ModelFormatError(f"missing model file {path}")

    locations: Dict[Tuple[str, int], str] = {}
    model = SparseModel(
        cameras=readers[0](paths[0], locations),
        images=readers[1](paths[1], locations),
        points=readers[2](paths[2], locations),
    )
    _normalize_quaternions(model)
    check_integrity(model, locations)
    return model


# ---------------------------------------------------------------------------
# database


def pair_id(image_id1: int, image_id2: int) -> int:
    """COLMAP database key for an unordered image pair."""
    for image_id in (image_id1, image_id2):
        if not 0 <= image_id < MAX_IMAGE_ID:
            raise ValueError(f"image id {image_id} outside [0, {MAX_IMAGE_ID - 1}]")
    if image_id1 > image_id2:
        image_id1, image_id2 = image_id2, image_id1
    return MAX_IMAGE_ID * image_id1 + image_id2


def inverse_pair_id(pid: int) -> Tuple[int, int]:
    if pid < 0:
        raise ValueError(f"negative pair id {pid}")
    image_id2 = pid % MAX_IMAGE_ID
    image_id1 = (pid - image_id2) // MAX_IMAGE_ID
    if image_id1 >= MAX_IMAGE_ID:
        raise ValueError(f"pair id {pid} out of range")
    return image_id1, image_id2


@dataclass
class MatchMatrix:
    image_ids: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        self.image_ids = np.asarray(self.image_ids, dtype=np.int64)
        self.counts = np.asarray(self.counts, dtype=np.int64)

    def index(self, image_id: int) -> int:
        return int(np.searchsorted(self.image_ids, image_id))

    def __getitem__(self, key: Tuple[int, int]) -> int:
        i, j = key
        return int(self.counts[self.index(i), self.index(j)])

    def write_csv(self, stream: TextIO) -> None:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow([""] + [int(i) for i in self.image_ids])
        for image_id, row in zip(self.image_ids, self.counts):
            writer.writerow([int(image_id)] + [int(v) for v in row])


class MatchDatabaseError(ValueError):
    pass


def load_match_matrix(db: PathLike, source: str = "matches") -> MatchMatrix:
    """Build the image-by-image match-count matrix from a COLMAP database.

    ``source`` selects the raw ``matches`` table or the geometrically verified
    ``two_view_geometries`` table. Entry (i, j) is the stored row count.
    """
    if source not in ("matches", "two_view_geometries"):
        raise ValueError(f"unknown match source {source!r}")
    db = Path(db)
    try:
        with open(db, "rb") as fh:
            header = fh.read(16)
    except OSError as exc:
        raise MatchDatabaseError(f"cannot read database {db}: {exc}") from exc
    if header != b"SQLite format 3\x00":
        raise MatchDatabaseError(f"{db} is not an SQLite 3 database")

    conn = sqlite3.connect(f"file:{db}?mode=ro", uri=True)
    try:
        tables = {row[0] for row in conn.execute("SELECT name FROM sqlite_master WHERE type='table'")}
        if source not in tables:
            raise MatchDatabaseError(f"{db}: missing table {source!r}")
        pairs = conn.execute(f"SELECT pair_id, rows FROM {source}").fetchall()
        ids = set()
        if "images" in tables:
            ids.update(row[0] for row in conn.execute("SELECT image_id FROM images"))
    except sqlite3.DatabaseError as exc:
        raise MatchDatabaseError(f"{db}: {exc}") from exc
    finally:
        conn.close()

    decoded = []
    for key, rows in pairs:
        i, j = inverse_pair_id(int(key))
        ids.update((i, j))
        decoded.append((i, j, int(rows or 0)))
    image_ids = np.array(sorted(ids), dtype=np.int64)
    counts = np.zeros((len(image_ids), len(image_ids)), dtype=np.int64)
    pos = {int(v): k for k, v in enumerate(image_ids)}
    for i, j, rows in decoded:
        if i == j:
            continue
        counts[pos[i], pos[j]] = counts[pos[j], pos[i]] = rows
    return MatchMatrix(image_ids, counts)
