"""Labelled plane fitting and ray-casting occlusion checks."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, TextIO, Tuple, Union

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .camera_geometry import Pose, camera_center
from .filters import FilterReport, label_index, point_majorities, remove_points
from .model_io import SparseModel
from .semantics import UNKNOWN_ID, ClassTable, LabeledObservation

PARALLEL_TOL = 1e-12
MARGIN_FRACTION = 0.02
VALID, OCCLUDED = "valid", "occluded"


class PlaneError(ValueError):
    pass


def _canonical_u(normal: np.ndarray) -> np.ndarray:
    # least-aligned world axis gives a well-conditioned in-plane direction
    e = np.zeros(3)
    e[int(np.argmin(np.abs(normal)))] = 1.0
    u = np.cross(normal, e)
    return u / np.linalg.norm(u)


@dataclass
class LabeledPlane:
    """Finite plane patch: centre ``p0``, unit ``normal``, and a rectangle of
    half-extents (``extent_u``, ``extent_v``) along ``u_axis`` and
    ``normal x u_axis``, grown by ``margin`` on every side."""

    normal: np.ndarray
    p0: np.ndarray
    class_id: int = UNKNOWN_ID
    opaque: bool = False
    extent_u: float = np.inf
    extent_v: float = np.inf
    margin: float = 0.0
    u_axis: Optional[np.ndarray] = None
    plane_id: int = 0
    support: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(n)
        if not np.isfinite(norm) or norm < PARALLEL_TOL:
            raise PlaneError("plane normal must be a non-zero finite vector")
        self.normal = n / norm
        self.p0 = np.asarray(self.p0, dtype=np.float64).reshape(3)
        if self.u_axis is None:
            u = _canonical_u(self.normal)
        else:
            u = np.asarray(self.u_axis, dtype=np.float64).reshape(3)
            u = u - (u @ self.normal) * self.normal
            if np.linalg.norm(u) < 1e-9:
                raise PlaneError("u_axis is parallel to the normal")
            u = u / np.linalg.norm(u)
        self.u_axis = u
        if self.extent_u < 0 or self.extent_v < 0 or self.margin < 0:
            raise PlaneError("extents and margin must be non-negative")
        self.support = np.asarray(self.support, dtype=np.int64).reshape(-1)
        self.opaque = bool(self.opaque)

    @property
    def v_axis(self) -> np.ndarray:
        return np.cross(self.normal, self.u_axis)

    @property
    def offset(self) -> float:
        return float(self.normal @ self.p0)

    def signed_distance(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.p0) @ self.normal

    def in_plane(self, X: np.ndarray) -> np.ndarray:
        """(u, v) coordinates relative to the patch centre."""
        d = np.asarray(X, dtype=np.float64) - self.p0
        return np.stack([d @ self.u_axis, d @ self.v_axis], axis=-1)

    def contains(self, X: np.ndarray, extra_margin: Optional[float] = None) -> np.ndarray:
        m = self.margin if extra_margin is None else extra_margin
        uv = self.in_plane(X)
        return (np.abs(uv[..., 0]) <= self.extent_u + m) & (np.abs(uv[..., 1]) <= self.extent_v + m)

    def transformed(self, rotation: np.ndarray, translation: np.ndarray, scale: float = 1.0) -> "LabeledPlane":
        """The same patch under X -> s R X + t."""
        R = np.asarray(rotation, dtype=np.float64)
        return LabeledPlane(R @ self.normal, scale * (R @ self.p0) + translation, self.class_id, self.opaque,
                            scale * self.extent_u, scale * self.extent_v, scale * self.margin,
                            R @ self.u_axis, self.plane_id, self.support.copy())


def _fit_lstsq(points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    centroid = points.mean(axis=0)
    _, s, vt = np.linalg.svd(points - centroid, full_matrices=False)
    return vt[2], centroid, vt[0]


def _patch_from_inliers(normal, centroid, u, inliers: np.ndarray, margin_fraction: float) -> dict:
    v = np.cross(normal, u)
    d = inliers - centroid
    uu, vv = d @ u, d @ v
    cu, cv = (uu.max() + uu.min()) / 2, (vv.max() + vv.min()) / 2
    eu, ev = (uu.max() - uu.min()) / 2, (vv.max() - vv.min()) / 2
    p0 = centroid + cu * u + cv * v
    p0 = p0 - ((p0 - centroid) @ normal) * normal
    return dict(p0=p0, extent_u=float(eu), extent_v=float(ev), u_axis=u,
                margin=float(margin_fraction * 2.0 * np.hypot(eu, ev)))


def fit_plane_ransac(points: np.ndarray, eps: float, trials: int = 200, rng_seed: int = 0,
                     margin_fraction: float = MARGIN_FRACTION, refine_iters: int = 5) -> LabeledPlane:
    """RANSAC plane through 3D points, refit by least squares on the inliers.

    The returned plane carries ``support`` (indices into ``points``), a
    bounding rectangle of the inliers in the principal in-plane basis, and a
    margin of ``margin_fraction`` of the patch diameter. Class and opacity are
    left for the caller.
    """
    P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(P) < 3:
        raise PlaneError(f"need at least 3 points to fit a plane, got {len(P)}")
    if not eps > 0:
        raise PlaneError("eps must be positive")
    if trials < 1:
        raise PlaneError("trials must be >= 1")
    scale = np.ptp(P, axis=0).max()
    sv = np.linalg.svd(P - P.mean(axis=0), compute_uv=False)
    if sv[1] <= 1e-12 * max(scale, 1.0) * np.sqrt(len(P)):
        raise PlaneError("points are collinear")

    rng = np.random.default_rng(rng_seed)
    # distinct index triples per trial
    idx = np.empty((trials, 3), dtype=np.int64)
    idx[:, 0] = rng.integers(0, len(P), trials)
    idx[:, 1] = (idx[:, 0] + rng.integers(1, len(P), trials)) % len(P)
    third = rng.integers(0, len(P) - 2, trials)
    lo, hi = np.minimum(idx[:, 0], idx[:, 1]), np.maximum(idx[:, 0], idx[:, 1])
    third = third + (third >= lo)
    idx[:, 2] = third + (third >= hi)
    a, b, c = P[idx[:, 0]], P[idx[:, 1]], P[idx[:, 2]]
    normals = np.cross(b - a, c - a)
    norms = np.linalg.norm(normals, axis=1)
    good = norms > 1e-12 * max(scale, 1.0) ** 2
    normals[good] /= norms[good, None]
    if not good.any():
        raise PlaneError("no non-degenerate sample")
    counts = np.full(trials, -1, dtype=np.int64)
    chunk = max(1, 2_000_000 // len(P))
    for s0 in range(0, trials, chunk):
        sl = slice(s0, s0 + chunk)
        dist = np.abs(np.einsum("tnk,tk->tn", P[None, :, :] - a[sl, None, :], normals[sl]))
        counts[sl] = np.where(good[sl], (dist <= eps).sum(axis=1), -1)
    best = int(np.argmax(counts))  # first maximum: earliest trial wins ties
    mask = np.abs((P - a[best]) @ normals[best]) <= eps
    if mask.sum() < 3:
        raise PlaneError("no plane with at least 3 inliers")

    normal, centroid, u = normals[best], P[mask].mean(axis=0), None
    for _ in range(refine_iters):
        n_new, centroid, u = _fit_lstsq(P[mask])
        new_mask = np.abs((P - centroid) @ n_new) <= eps
        normal = n_new
        if new_mask.sum() < 3 or np.array_equal(new_mask, mask):
            break
        mask = new_mask
    # final inlier set is whatever lies within eps of the final plane
    final = np.abs((P - centroid) @ normal) <= eps
    if final.sum() >= 3:
        mask = final
    else:
        raise PlaneError("no plane with at least 3 inliers after refit")
    if u is None or abs(u @ normal) > 1e-9:
        u = _canonical_u(normal)
    # canonical sign for reproducibility
    k = int(np.argmax(np.abs(normal)))
    if normal[k] < 0:
        normal = -normal
    patch = _patch_from_inliers(normal, centroid, u, P[mask], margin_fraction)
    return LabeledPlane(normal, support=np.flatnonzero(mask), **patch)


def cluster_points(X: np.ndarray, radius: float) -> np.ndarray:
    """Connected-component labels under a fixed neighbour radius."""
    if len(X) == 0:
        return np.zeros(0, dtype=np.int64)
    pairs = cKDTree(X).query_pairs(radius, output_type="ndarray")
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(len(X), len(X)))
    _, labels = connected_components(graph, directed=False)
    return labels


def default_cluster_radius(X: np.ndarray) -> float:
    if len(X) < 2:
        return 0.0
    d, _ = cKDTree(X).query(X, k=2)
    return 5.0 * float(np.median(d[:, 1]))


def extract_semantic_planes(model: SparseModel, observations: Sequence[LabeledObservation], table: ClassTable,
                            eps: Optional[float] = None, min_inliers: int = 10,
                            classes: Optional[Iterable[int]] = None, trials: int = 200, rng_seed: int = 0,
                            cluster_radius: Optional[float] = None,
                            margin_fraction: float = MARGIN_FRACTION) -> List[LabeledPlane]:
    """One plane per spatial cluster of points sharing a majority class.

    Args:
        classes: class ids to fit; defaults to the table's opaque classes.
        eps: inlier distance; None uses 1% of each cluster's diameter.
        cluster_radius: neighbour radius; None uses five times the median
            nearest-neighbour spacing of that class's points.

    Plane ids count from 1 in output order; ``support`` holds point3D ids.
    """
    classes = sorted(table.opaque_ids if classes is None else {int(c) for c in classes})
    majority = point_majorities(model, label_index(observations), strict=False)
    planes: List[LabeledPlane] = []
    for cid in classes:
        pids = np.array(sorted(p for p, c in majority.items() if c == cid), dtype=np.int64)
        if len(pids) < max(min_inliers, 3):
            continue
        X = np.array([model.points[p].xyz for p in pids])
        r = default_cluster_radius(X) if cluster_radius is None else cluster_radius
        labels = cluster_points(X, r)
        for lab in range(labels.max() + 1):
            members = np.flatnonzero(labels == lab)
            if len(members) < max(min_inliers, 3):
                continue
            Xc = X[members]
            e = eps if eps is not None else 0.01 * float(np.linalg.norm(np.ptp(Xc, axis=0)))
            try:
                plane = fit_plane_ransac(Xc, e, trials, rng_seed + len(planes), margin_fraction)
            except PlaneError:
                continue
            if len(plane.support) < min_inliers:
                continue
            plane.class_id = cid
            plane.opaque = cid in table.opaque_ids
            plane.support = pids[members[plane.support]]
            plane.plane_id = len(planes) + 1
            planes.append(plane)
    return planes


def ray_plane_intersection(l0, l, plane: LabeledPlane) -> Optional[float]:
    """Distance ``d`` along the ray ``l0 + d l`` to the plane, None when parallel."""
    l0 = np.asarray(l0, dtype=np.float64)
    l = np.asarray(l, dtype=np.float64)
    denom = float(l @ plane.normal)
    if abs(denom) <= PARALLEL_TOL:
        return None
    return float((plane.p0 - l0) @ plane.normal / denom)


@dataclass(frozen=True)
class OcclusionVerdict:
    point3d_id: int
    image_id: int
    status: str
    plane_id: Optional[int] = None
    d: Optional[float] = None

    @property
    def occluded(self) -> bool:
        return self.status == OCCLUDED


@dataclass
class OcclusionResult:
    verdicts: List[OcclusionVerdict]
    report: FilterReport
    erroneous: List[int]
    depth_margin: float


def scene_diameter(model: SparseModel) -> float:
    """Twice the largest distance from the centroid of points and camera centres (rigid-invariant)."""
    pts = [p.xyz for p in model.points.values()]
    pts += [camera_center(Pose.from_image(im)) for im in model.images.values()]
    if len(pts) < 2:
        return 0.0
    P = np.array(pts)
    return float(2.0 * np.linalg.norm(P - P.mean(axis=0), axis=1).max())


def _ray_table(model: SparseModel):
    centers = {i: camera_center(Pose.from_image(im)) for i, im in model.images.items()}
    pids, iids, C, X = [], [], [], []
    for pid in sorted(model.points):
        point = model.points[pid]
        for image_id in sorted({img for img, _ in point.track}):
            pids.append(pid)
            iids.append(image_id)
            C.append(centers[image_id])
            X.append(point.xyz)
    return (np.array(pids, dtype=np.int64), np.array(iids, dtype=np.int64),
            np.array(C, dtype=np.float64).reshape(-1, 3), np.array(X, dtype=np.float64).reshape(-1, 3))


def occlusion_validate(model: SparseModel, planes: Sequence[LabeledPlane], depth_margin: Optional[float] = None,
                       extent_margin: Optional[float] = None, aggregation: float = 0.5) -> OcclusionResult:
    """Ray-cast every (camera, point) pair against the opaque planes.

    A ray is occluded when it crosses an opaque patch strictly between the
    camera centre and the point, beyond ``depth_margin`` from either end, and
    the crossing lies within the patch rectangle grown by its margin (or by
    ``extent_margin`` when given). A plane never occludes its own support
    points. The nearest blocking plane is recorded. Points occluded in at least
    ``aggregation`` of their rays are reported as erroneous.
    """
    if not 0.0 < aggregation <= 1.0:
        raise ValueError("aggregation must lie in (0, 1]")
    if depth_margin is None:
        depth_margin = max(1e-6, 1e-4 * scene_diameter(model))
    if depth_margin < 0:
        raise ValueError("depth_margin must be non-negative")
    pids, iids, C, X = _ray_table(model)
    seg = X - C
    length = np.linalg.norm(seg, axis=1)
    if np.any(length <= PARALLEL_TOL):
        k = int(np.argmax(length <= PARALLEL_TOL))
        raise ValueError(f"point {pids[k]} coincides with the centre of image {iids[k]}")
    L = seg / length[:, None]

    best_d = np.full(len(pids), np.inf)
    best_plane = np.zeros(len(pids), dtype=np.int64)
    for plane in planes:
        if not plane.opaque:
            continue
        denom = L @ plane.normal
        ok = np.abs(denom) > PARALLEL_TOL
        d = np.full(len(pids), np.nan)
        d[ok] = ((plane.p0 - C[ok]) @ plane.normal) / denom[ok]
        hit = ok & (d > depth_margin) & (d < length - depth_margin)
        if plane.support.size:
            hit &= ~np.isin(pids, plane.support)
        if hit.any():
            P = C[hit] + d[hit, None] * L[hit]
            inside = plane.contains(P, None if extent_margin is None else extent_margin)
            hit[np.flatnonzero(hit)[~inside]] = False
        closer = hit & (d < best_d)
        best_d[closer] = d[closer]
        best_plane[closer] = plane.plane_id

    occluded = np.isfinite(best_d)
    verdicts = [
        OcclusionVerdict(int(p), int(i), OCCLUDED, int(pl), float(dd)) if o else OcclusionVerdict(int(p), int(i), VALID)
        for p, i, o, pl, dd in zip(pids, iids, occluded, best_plane, best_d)
    ]
    erroneous = []
    if len(pids):
        uniq, start = np.unique(pids, return_index=True)
        n_rays = np.diff(np.append(start, len(pids)))
        n_occ = np.add.reduceat(occluded.astype(np.int64), start)
        erroneous = [int(p) for p, k, n in zip(uniq, n_occ, n_rays) if k > 0 and k >= aggregation * n]
    obs_removed = sum(len(model.points[p].track) for p in erroneous)
    report = FilterReport.from_removal("occlusion", len(model.points), len(erroneous), model.num_observations,
                                       obs_removed, len(model.images))
    return OcclusionResult(verdicts, report, erroneous, float(depth_margin))


def occlusion_filter(model: SparseModel, planes: Sequence[LabeledPlane], **opts):
    """``occlusion_validate`` followed by removal of the erroneous points."""
    result = occlusion_validate(model, planes, **opts)
    return remove_points(model, result.erroneous), result


def _fmt(v) -> str:
    return f"{float(v):.17g}"


def write_planes(planes: Sequence[LabeledPlane], stream: TextIO) -> None:
    """``nx ny nz px py pz class_id opaque extent_u extent_v margin [ux uy uz]``, one plane per line."""
    stream.write("# nx ny nz px py pz class_id opaque extent_u extent_v margin ux uy uz\n")
    for p in planes:
        fields = [*map(_fmt, p.normal), *map(_fmt, p.p0), str(p.class_id), str(int(p.opaque)),
                  _fmt(p.extent_u), _fmt(p.extent_v), _fmt(p.margin), *map(_fmt, p.u_axis)]
        stream.write(" ".join(fields) + "\n")


def read_planes(path: Union[str, os.PathLike]) -> List[LabeledPlane]:
    """Planes are numbered from 1 in file order."""
    planes = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].split()
            if not line:
                continue
            if len(line) not in (11, 14):
                raise PlaneError(f"{path}:{lineno}: expected 11 or 14 fields, got {len(line)}")
            try:
                v = [float(x) for x in line]
                planes.append(LabeledPlane(
                    v[0:3], v[3:6], int(line[6]), bool(int(line[7])), v[8], v[9], v[10],
                    v[11:14] if len(line) == 14 else None, len(planes) + 1,
                ))
            except (ValueError, PlaneError) as exc:
                raise PlaneError(f"{path}:{lineno}: {exc}") from None
    return planes


def write_verdicts_csv(verdicts: Sequence[OcclusionVerdict], stream: TextIO) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["point3d_id", "image_id", "status", "plane_id", "d"])
    for v in verdicts:
        writer.writerow([v.point3d_id, v.image_id, v.status,
                         "" if v.plane_id is None else v.plane_id, "" if v.d is None else f"{v.d:.12g}"])


def export_ply(model: SparseModel, path: Union[str, os.PathLike], status: Optional[Dict[int, int]] = None) -> None:
    """ASCII PLY of the point cloud; ``status`` maps point ids to an integer flag (0 when absent)."""
    status = status or {}
    ids = sorted(model.points)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(ids)}\n")
        for name in "xyz":
            fh.write(f"property double {name}\n")
        for name in ("red", "green", "blue"):
            fh.write(f"property uchar {name}\n")
        fh.write("property uchar status\nend_header\n")
        for pid in ids:
            p = model.points[pid]
            fh.write(" ".join([*map(_fmt, p.xyz), *(str(int(c)) for c in p.rgb), str(int(status.get(pid, 0)))]) + "\n")
