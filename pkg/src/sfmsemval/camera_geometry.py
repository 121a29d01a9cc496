"""Rotations, poses, camera projection and reprojection statistics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model_io import NULL_POINT3D_ID, CameraIntrinsics, ImageRecord, SparseModel

MIN_DEPTH = 1e-12


class ChiralityError(ValueError):
    """A point lies on or behind the image plane of the camera observing it."""


def quat_to_rotation(q) -> np.ndarray:
    """Rotation matrix of a Hamilton quaternion (w, x, y, z); q is normalized first."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q)
    if norm == 0.0:
        raise ValueError("zero-norm quaternion")
    w, x, y, z = q / norm
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotation_to_quat(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w >= 0) of a rotation matrix (Shepperd's method)."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def axis_angle_to_quat(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        # second-order expansion keeps the increment differentiable at 0
        q = np.array([1.0 - theta * theta / 8.0, *(0.5 * w)])
        return q / np.linalg.norm(q)
    axis = w / theta
    return np.array([np.cos(theta / 2), *(np.sin(theta / 2) * axis)])


def axis_angle_to_rotation(w) -> np.ndarray:
    return quat_to_rotation(axis_angle_to_quat(w))


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass
class Pose:
    """World-to-camera transform: X_cam = R X_world + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_image(cls, image: ImageRecord) -> "Pose":
        return cls(quat_to_rotation(image.qvec), image.tvec)

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other: apply ``other`` first."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return X @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M


def camera_center(pose: Pose) -> np.ndarray:
    """Camera centre in world coordinates, -R^T t."""
    return -pose.rotation.T @ pose.translation


def look_at(center, target, up=(0.0, -1.0, 0.0)) -> Pose:
    """Pose of a camera at ``center`` with its +z axis through ``target`` (y down)."""
    center = np.asarray(center, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - center
    z /= np.linalg.norm(z)
    x = np.cross(up, z)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross([1.0, 0.0, 0.0] if abs(z[0]) < 0.9 else [0.0, 1.0, 0.0], z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return Pose(R, -R @ center)


def distort(cam: CameraIntrinsics, uv: np.ndarray) -> np.ndarray:
    """Apply the model's radial distortion to normalized coordinates (N, 2)."""
    k = cam.radial
    if not k.size:
        return uv
    r2 = np.sum(uv * uv, axis=-1, keepdims=True)
    factor = k[0] * r2
    if k.size > 1:
        factor = factor + k[1] * r2 * r2
    return uv + uv * factor


def undistort(cam: CameraIntrinsics, uv_d: np.ndarray, iterations: int = 100) -> np.ndarray:
    """Invert :func:`distort` by fixed-point iteration."""
    if not cam.radial.size:
        return uv_d
    uv = uv_d.copy()
    for _ in range(iterations):
        r2 = np.sum(uv * uv, axis=-1, keepdims=True)
        factor = cam.radial[0] * r2
        if cam.radial.size > 1:
            factor = factor + cam.radial[1] * r2 * r2
        new = uv_d / (1.0 + factor)
        if np.max(np.abs(new - uv), initial=0.0) < 1e-15:
            return new
        uv = new
    return uv


def pixel_to_normalized(cam: CameraIntrinsics, xy) -> np.ndarray:
    xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
    uv_d = (xy - cam.principal_point) / cam.focal_lengths
    return undistort(cam, uv_d)


def project_points(pose: Pose, cam: CameraIntrinsics, X: np.ndarray) -> np.ndarray:
    """Vectorized :func:`project` over an (N, 3) array."""
    Xc = pose.transform(np.atleast_2d(X))
    z = Xc[:, 2]
    bad = np.flatnonzero(~(z > MIN_DEPTH))
    if bad.size:
        raise ChiralityError(f"{bad.size} point(s) with non-positive depth (first index {bad[0]}, z={z[bad[0]]:.3g})")
    uv = Xc[:, :2] / z[:, None]
    return distort(cam, uv) * cam.focal_lengths + cam.principal_point


def project(pose: Pose, cam: CameraIntrinsics, X) -> np.ndarray:
    """Project a world point to pixel coordinates.

    Pinhole division, then radial distortion in normalized coordinates, then
    focal scaling and principal-point offset (the COLMAP convention).

    Raises:
        ChiralityError: if the camera-frame depth is not above 1e-12.
    """
    return project_points(pose, cam, np.asarray(X, dtype=np.float64).reshape(1, 3))[0]


def lift(pose: Pose, cam: CameraIntrinsics, xy, depth: float) -> np.ndarray:
    """World point at camera-frame ``depth`` that projects to pixel ``xy``."""
    if depth <= 0:
        raise ValueError("depth must be positive")
    uv = pixel_to_normalized(cam, xy)[0]
    Xc = np.array([uv[0], uv[1], 1.0]) * depth
    return pose.rotation.T @ (Xc - pose.translation)


@dataclass
class Stats:
    cameras: int
    images: int
    points: int
    observations: int
    mean_track_length: Optional[float]
    mean_obs_per_image: Optional[float]
    mean_reproj_error: Optional[float]

    @classmethod
    def from_counts(cls, points: int, observations: int, images: int, cameras: Optional[int] = None,
                    mean_reproj_error: Optional[float] = None) -> "Stats":
        return cls(
            cameras=images if cameras is None else cameras,
            images=images,
            points=points,
            observations=observations,
            mean_track_length=observations / points if points else None,
            mean_obs_per_image=observations / images if images else None,
            mean_reproj_error=mean_reproj_error,
        )


def observation_errors(model: SparseModel) -> np.ndarray:
    """Pixel reprojection error of every linked observation, image by image."""
    errors = []
    for image_id in sorted(model.images):
        image = model.images[image_id]
        mask = image.point3d_ids != NULL_POINT3D_ID
        if not mask.any():
            continue
        X = np.array([model.points[int(pid)].xyz for pid in image.point3d_ids[mask]])
        proj = project_points(Pose.from_image(image), model.cameras[image.camera_id], X)
        errors.append(np.linalg.norm(proj - image.xys[mask], axis=1))
    return np.concatenate(errors) if errors else np.zeros(0)


def mean_reprojection_stats(model: SparseModel) -> Stats:
    """Counts and means reported for a sparse model.

    Means with a zero denominator are ``None``. The reprojection error is
    recomputed from geometry rather than read from the stored point errors.
    """
    errors = observation_errors(model)
    return Stats.from_counts(
        points=len(model.points),
        observations=model.num_observations,
        images=len(model.images),
        cameras=len(model.cameras),
        mean_reproj_error=float(errors.mean()) if errors.size else None,
    )
