"""Seeded synthetic scenes with exact observations, for verification."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .camera_geometry import Pose, look_at, project_points, rotation_to_quat
from .model_io import CameraIntrinsics, ImageRecord, Point3D, SparseModel


def default_camera(camera_id: int = 1, model: str = "PINHOLE", width: int = 1280, height: int = 720) -> CameraIntrinsics:
    f, cx, cy = 1000.0, width / 2, height / 2
    params = {
        "SIMPLE_PINHOLE": [f, cx, cy],
        "PINHOLE": [f, 1.02 * f, cx, cy],
        "SIMPLE_RADIAL": [f, cx, cy, 0.01],
        "RADIAL": [f, cx, cy, 0.01, -0.002],
    }[model]
    return CameraIntrinsics(camera_id, model, width, height, params)


@dataclass
class TwoViewScene:
    K1: np.ndarray
    K2: np.ndarray
    pose2: Pose  # camera 1 sits at the identity
    X: np.ndarray
    x1: np.ndarray
    x2: np.ndarray


def two_view_scene(n_points: int, seed: int, pure_translation: bool = False) -> TwoViewScene:
    """Two calibrated cameras observing ``n_points`` random points, zero noise."""
    rng = np.random.default_rng(seed)
    cam1 = default_camera(1)
    cam2 = CameraIntrinsics(2, "PINHOLE", 1280, 720, [900.0, 950.0, 630.0, 350.0])
    X = np.column_stack([
        rng.uniform(-2.0, 2.0, n_points),
        rng.uniform(-1.5, 1.5, n_points),
        rng.uniform(4.0, 9.0, n_points),
    ])
    direction = rng.normal(size=3)
    direction[2] *= 0.3
    baseline = direction / np.linalg.norm(direction) * rng.uniform(0.8, 1.5)
    if pure_translation:
        pose2 = Pose(np.eye(3), -baseline)
    else:
        target = np.array([0.0, 0.0, 6.5]) + rng.normal(scale=0.3, size=3)
        up = np.array([0.0, -1.0, 0.0]) + rng.normal(scale=0.05, size=3)
        pose2 = look_at(baseline, target, up)
    x1 = project_points(Pose.identity(), cam1, X)
    x2 = project_points(pose2, cam2, X)
    return TwoViewScene(cam1.calibration_matrix(), cam2.calibration_matrix(), pose2, X, x1, x2)


def multi_view_model(n_cameras: int, n_points: int, seed: int, camera_model: str = "PINHOLE",
                     extra_keypoints: int = 0, min_track: int = 2,
                     points: Optional[np.ndarray] = None) -> SparseModel:
    """A sparse model with exact observations.

    Cameras sit on an arc looking at the point cloud; each point is seen by a
    random subset of at least ``min_track`` cameras. ``extra_keypoints``
    unlinked keypoints are added per image.
    """
    rng = np.random.default_rng(seed)
    cam = default_camera(1, camera_model)
    if points is None:
        points = rng.uniform([-2.0, -1.5, -1.0], [2.0, 1.5, 1.0], size=(n_points, 3))
    n_points = len(points)
    poses = []
    for k in range(n_cameras):
        angle = np.deg2rad(-30 + 60 * k / max(n_cameras - 1, 1))
        center = np.array([8.0 * np.sin(angle), rng.normal(scale=0.3), -8.0 * np.cos(angle)])
        poses.append(look_at(center, rng.normal(scale=0.1, size=3)))

    visible = rng.random((n_points, n_cameras)) < 0.8
    for j in range(n_points):
        if visible[j].sum() < min_track:
            visible[j, rng.choice(n_cameras, min(min_track, n_cameras), replace=False)] = True

    model = SparseModel(cameras={1: cam})
    tracks = {j + 1: [] for j in range(n_points)}
    for k, pose in enumerate(poses):
        image_id = k + 1
        ids = np.flatnonzero(visible[:, k])
        xy = project_points(pose, cam, points[ids])
        pids = ids + 1
        if extra_keypoints:
            xy = np.vstack([xy, rng.uniform([0, 0], [cam.width, cam.height], size=(extra_keypoints, 2))])
            pids = np.concatenate([pids, np.full(extra_keypoints, -1)])
            order = rng.permutation(len(pids))
            xy, pids = xy[order], pids[order]
        for idx, pid in enumerate(pids):
            if pid > 0:
                tracks[int(pid)].append((image_id, idx))
        model.images[image_id] = ImageRecord(
            image_id, rotation_to_quat(pose.rotation), pose.translation, 1, f"frame{image_id:04d}.png", xy, pids
        )
    for j in range(n_points):
        pid = j + 1
        rgb = tuple(int(c) for c in rng.integers(0, 256, 3))
        model.points[pid] = Point3D(pid, points[j], rgb, 0.0, sorted(tracks[pid]))
    return model


@dataclass
class PipelineFixture:
    model: SparseModel
    labels: dict  # (image_id, point2d_idx) -> intended class id
    wall_ids: list
    car_ids: list
    behind_ids: list
    mislabelled_ids: list


def pipeline_fixture(directory=None, seed: int = 0, n_wall: int = 80, n_front: int = 30, n_car: int = 12,
                     n_behind: int = 10, n_mislabelled: int = 6) -> PipelineFixture:
    """Street-like scene for the compact class table.

    A building wall on z=0 faces six cameras; foliage stands in front of it,
    cars are dynamic, and a few road points lie behind the wall so every ray
    to them crosses it. ``n_mislabelled`` foliage points get one sky
    observation. With ``directory`` the text model goes to ``directory/model``
    and one PNG label map per image to ``directory/labels``.
    """
    from pathlib import Path

    from PIL import Image

    from .model_io import write_model_text

    rng = np.random.default_rng(seed)
    wall = np.column_stack([rng.uniform(-2, 2, n_wall), rng.uniform(-1.5, 1.5, n_wall), np.zeros(n_wall)])
    front = np.column_stack([rng.uniform(-2, 2, n_front), rng.uniform(-1, 1, n_front), rng.uniform(-3, -1.5, n_front)])
    cars = np.column_stack([rng.uniform(-1.5, 1.5, n_car), rng.uniform(0.8, 1.2, n_car), rng.uniform(-1.2, -0.8, n_car)])
    behind = np.column_stack([rng.uniform(-0.6, 0.6, n_behind), rng.uniform(-0.6, 0.6, n_behind),
                              rng.uniform(1.0, 2.0, n_behind)])
    X = np.vstack([wall, front, cars, behind])
    classes = np.concatenate([np.full(n_wall, 2), np.full(n_front, 6), np.full(n_car, 4), np.full(n_behind, 1)])
    model = multi_view_model(6, 0, seed, points=X, min_track=3)
    # tracks of at least 3 so one bad label never deletes a point
    offsets = np.cumsum([0, n_wall, n_front, n_car, n_behind])
    ids = [list(range(offsets[k] + 1, offsets[k + 1] + 1)) for k in range(4)]
    mislabelled = ids[1][:n_mislabelled]

    labels = {}
    for pid, point in model.points.items():
        for entry in point.track:
            labels[entry] = int(classes[pid - 1])
        if pid in mislabelled:
            labels[point.track[0]] = 3

    if directory is not None:
        root = Path(directory)
        write_model_text(model, root / "model")
        (root / "labels").mkdir(parents=True, exist_ok=True)
        cam = model.cameras[1]
        for image_id, image in model.images.items():
            raster = np.full((cam.height, cam.width), 1, dtype=np.uint8)
            seen = set()
            for idx, pid in enumerate(image.point3d_ids):
                if pid < 0:
                    continue
                col, row = (int(np.floor(v)) for v in image.xys[idx])
                if (row, col) in seen:
                    raise ValueError(f"seed {seed}: two observations share pixel {(col, row)}")
                seen.add((row, col))
                raster[row, col] = labels[(image_id, idx)]
            Image.fromarray(raster, mode="L").save(root / "labels" / (Path(image.name).stem + ".png"))
    return PipelineFixture(model, labels, ids[0], ids[2], ids[3], mislabelled)
