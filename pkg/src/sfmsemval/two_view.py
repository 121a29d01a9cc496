"""
Two-view geometry.

Normalized eight-point estimation of the fundamental matrix, a seeded RANSAC
wrapper around it, the essential matrix, linear triangulation and
chirality-based selection among the four pose decompositions of E.
"""

from __future__ import annotations

import math
from typing import List, Tuple

import numpy as np

from .camera_geometry import Pose, camera_center, pixel_to_normalized
from .model_io import CameraIntrinsics

MIN_SAMPLE = 8
# relative singular-value floor below which the design matrix is rank deficient
RANK_TOL = 1e-10
# homogeneous weight below which a triangulated point is at infinity
INFINITY_TOL = 1e-12


class TwoViewError(ValueError):
    """Degenerate input or failed estimation."""


def _to_homogeneous(x: np.ndarray) -> np.ndarray:
    return np.concatenate([x, np.ones(x.shape[:-1] + (1,))], axis=-1)


def _hartley(x: np.ndarray):
    """Batched similarity taking centroid to the origin and RMS distance to sqrt(2)."""
    centroid = x.mean(axis=-2, keepdims=True)
    rms = np.sqrt(np.mean(np.sum((x - centroid) ** 2, axis=-1), axis=-1))
    ok = rms > 0
    scale = np.where(ok, np.sqrt(2.0) / np.where(ok, rms, 1.0), 1.0)
    T = np.zeros(x.shape[:-2] + (3, 3))
    T[..., 0, 0] = scale
    T[..., 1, 1] = scale
    T[..., 0, 2] = -scale * centroid[..., 0, 0]
    T[..., 1, 2] = -scale * centroid[..., 0, 1]
    T[..., 2, 2] = 1.0
    xn = (x - centroid) * scale[..., None, None]
    return T, xn, ok


def _canonical_sign(F: np.ndarray) -> np.ndarray:
    flat = F.reshape(F.shape[:-2] + (9,))
    idx = np.argmax(np.abs(flat), axis=-1)
    sign = np.sign(np.take_along_axis(flat, idx[..., None], axis=-1))[..., 0]
    sign = np.where(sign == 0, 1.0, sign)
    return F * sign[..., None, None]


def _eight_point_batch(x1: np.ndarray, x2: np.ndarray):
    """Fundamental matrices for a batch of correspondence sets (B, N, 2).

    Returns (F, valid) where invalid entries are rank-deficient samples.
    """
    T1, n1, ok1 = _hartley(x1)
    T2, n2, ok2 = _hartley(x2)
    u1, v1 = n1[..., 0], n1[..., 1]
    u2, v2 = n2[..., 0], n2[..., 1]
    ones = np.ones_like(u1)
    A = np.stack([u2 * u1, u2 * v1, u2, v2 * u1, v2 * v1, v2, u1, v1, ones], axis=-1)
    full = A.shape[-2] < 9
    _, s, Vt = np.linalg.svd(A, full_matrices=full)
    sv = np.zeros(A.shape[:-2] + (9,))
    sv[..., : s.shape[-1]] = s
    valid = ok1 & ok2 & (sv[..., 7] > RANK_TOL * sv[..., 0])

    F = Vt[..., -1, :].reshape(A.shape[:-2] + (3, 3))
    U, S, Vt = np.linalg.svd(F)
    S[..., 2] = 0.0
    F = U @ (S[..., :, None] * Vt)
    F = np.swapaxes(T2, -1, -2) @ F @ T1
    norm = np.linalg.norm(F, axis=(-2, -1), keepdims=True)
    F = F / np.where(norm > 0, norm, 1.0)
    return _canonical_sign(F), valid


def eight_point(x1, x2) -> np.ndarray:
    """Least-squares fundamental matrix with x2^T F x1 = 0.

    Args:
        x1, x2: (N, 2) pixel coordinates in image 1 and 2, N >= 8.

    Returns:
        Rank-2 F with unit Frobenius norm.

    Raises:
        TwoViewError: fewer than 8 correspondences or a degenerate
            (rank-deficient) configuration.
    """
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x1.shape != x2.shape or x1.ndim != 2 or x1.shape[1] != 2:
        raise TwoViewError("correspondences must be two (N, 2) arrays")
    if len(x1) < MIN_SAMPLE:
        raise TwoViewError(f"need at least {MIN_SAMPLE} correspondences, got {len(x1)}")
    if not (np.all(np.isfinite(x1)) and np.all(np.isfinite(x2))):
        raise TwoViewError("non-finite correspondence")
    F, valid = _eight_point_batch(x1[None], x2[None])
    if not valid[0]:
        raise TwoViewError("degenerate correspondence configuration")
    return F[0]


def algebraic_residuals(F: np.ndarray, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """|x2^T F x1| per correspondence; F may be a batch (B, 3, 3)."""
    h1, h2 = _to_homogeneous(x1), _to_homogeneous(x2)
    return np.abs(np.einsum("ni,...ij,nj->...n", h2, F, h1))


def sampson_distances(F: np.ndarray, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """First-order geometric (Sampson) distance in pixels."""
    h1, h2 = _to_homogeneous(x1), _to_homogeneous(x2)
    Fx1 = np.einsum("...ij,nj->...ni", F, h1)
    Ftx2 = np.einsum("...ji,nj->...ni", F, h2)
    num = np.einsum("ni,...ni->...n", h2, Fx1)
    den = Fx1[..., 0] ** 2 + Fx1[..., 1] ** 2 + Ftx2[..., 0] ** 2 + Ftx2[..., 1] ** 2
    return np.abs(num) / np.sqrt(np.where(den > 0, den, np.inf))


_RESIDUALS = {"algebraic": algebraic_residuals, "sampson": sampson_distances}


def ransac_fundamental(x1, x2, eps: float, trials: int, rng_seed: int = 0,
                       residual: str = "algebraic", chunk: int = 256) -> Tuple[np.ndarray, np.ndarray]:
    """Robust fundamental matrix by RANSAC over minimal 8-point samples.

    Each trial fits F to 8 distinct random correspondences and counts those
    with residual <= eps. The trial with most inliers wins, the earliest on
    ties, and F is refit on its inliers.

    Args:
        x1, x2: (N, 2) pixel coordinates.
        eps: inlier threshold on the chosen residual ("algebraic" |x2^T F x1|
            with unit-norm F, or "sampson" distance in pixels).
        trials: number of minimal samples.
        rng_seed: seed for numpy's PCG64 generator.

    Returns:
        (F, inlier mask)
    """
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    n = len(x1)
    if x1.shape != x2.shape or n < MIN_SAMPLE:
        raise TwoViewError(f"need at least {MIN_SAMPLE} correspondences, got {n}")
    if eps <= 0 or trials < 1:
        raise ValueError("eps must be positive and trials >= 1")
    score = _RESIDUALS[residual]

    rng = np.random.default_rng(rng_seed)
    samples = np.stack([rng.choice(n, MIN_SAMPLE, replace=False) for _ in range(trials)])

    best_count, best_mask = -1, None
    for start in range(0, trials, chunk):
        idx = samples[start:start + chunk]
        F, valid = _eight_point_batch(x1[idx], x2[idx])
        masks = score(F, x1, x2) <= eps
        counts = np.where(valid, masks.sum(axis=1), -1)
        k = int(np.argmax(counts))
        if counts[k] > best_count:
            best_count, best_mask = int(counts[k]), masks[k]

    if best_count < MIN_SAMPLE:
        raise TwoViewError(f"no model with at least {MIN_SAMPLE} inliers (best {max(best_count, 0)})")
    F = eight_point(x1[best_mask], x2[best_mask])
    return F, best_mask.copy()


def ransac_trials(z: float, w: float, n: int) -> int:
    """Number of trials k = log(1 - z) / log(1 - w^n), rounded up."""
    if not 0 < z < 1:
        raise ValueError(f"success probability z={z} must lie in (0, 1)")
    if not 0 < w <= 1:
        raise ValueError(f"inlier ratio w={w} must lie in (0, 1]")
    if n < 1:
        raise ValueError("sample size must be >= 1")
    p = w ** n
    if p >= 1.0:
        return 1
    return max(1, math.ceil(math.log1p(-z) / math.log1p(-p)))


def essential_from_fundamental(F, K1, K2) -> np.ndarray:
    """E = K2^T F K1 projected onto the essential manifold (s, s, 0)."""
    F, K1, K2 = (np.asarray(a, dtype=np.float64) for a in (F, K1, K2))
    for K in (K1, K2):
        if abs(np.linalg.det(K)) < 1e-12:
            raise TwoViewError("singular calibration matrix")
    E = K2.T @ F @ K1
    U, S, Vt = np.linalg.svd(E)
    s = 0.5 * (S[0] + S[1])
    return U @ np.diag([s, s, 0.0]) @ Vt


def essential_from_pose(pose: Pose) -> np.ndarray:
    """[t]x R for the pose of camera 2 relative to camera 1."""
    t = pose.translation
    tx = np.array([[0, -t[2], t[1]], [t[2], 0, -t[0]], [-t[1], t[0], 0]])
    return tx @ pose.rotation


def fundamental_from_pose(pose: Pose, K1, K2) -> np.ndarray:
    F = np.linalg.inv(np.asarray(K2)).T @ essential_from_pose(pose) @ np.linalg.inv(np.asarray(K1))
    return F / np.linalg.norm(F)


def triangulate_normalized(P1: np.ndarray, P2: np.ndarray, n1: np.ndarray, n2: np.ndarray) -> np.ndarray:
    """Homogeneous DLT points (N, 4), unit norm, for normalized coords (N, 2)."""
    A = np.stack([
        n1[:, 0:1] * P1[2] - P1[0],
        n1[:, 1:2] * P1[2] - P1[1],
        n2[:, 0:1] * P2[2] - P2[0],
        n2[:, 1:2] * P2[2] - P2[1],
    ], axis=1)
    A = A / np.linalg.norm(A, axis=2, keepdims=True)
    _, _, Vt = np.linalg.svd(A)
    return Vt[:, -1, :]


def _projection(pose: Pose) -> np.ndarray:
    return np.hstack([pose.rotation, pose.translation[:, None]])


def triangulate(pose1: Pose, pose2: Pose, cam1: CameraIntrinsics, cam2: CameraIntrinsics, x1, x2) -> np.ndarray:
    """Linear least-squares 3D point from one correspondence.

    Raises:
        TwoViewError: coincident camera centres or parallel viewing rays.
    """
    c1, c2 = camera_center(pose1), camera_center(pose2)
    scale = 1.0 + max(np.linalg.norm(c1), np.linalg.norm(c2))
    if np.linalg.norm(c1 - c2) <= 1e-12 * scale:
        raise TwoViewError("camera centres coincide")
    n1 = pixel_to_normalized(cam1, x1)
    n2 = pixel_to_normalized(cam2, x2)
    d1 = pose1.rotation.T @ np.append(n1[0], 1.0)
    d2 = pose2.rotation.T @ np.append(n2[0], 1.0)
    d1 /= np.linalg.norm(d1)
    d2 /= np.linalg.norm(d2)
    if np.linalg.norm(np.cross(d1, d2)) <= 1e-12:
        raise TwoViewError("viewing rays are parallel")
    X = triangulate_normalized(_projection(pose1), _projection(pose2), n1, n2)[0]
    if abs(X[3]) <= INFINITY_TOL:
        raise TwoViewError("triangulated point at infinity")
    return X[:3] / X[3]


def decompose_essential(E) -> List[Pose]:
    """The four (R, t) candidates of E, t unit length, in a fixed order."""
    U, _, Vt = np.linalg.svd(np.asarray(E, dtype=np.float64))
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    Ra, Rb = U @ W @ Vt, U @ W.T @ Vt
    t = U[:, 2]
    return [Pose(Ra, t), Pose(Ra, -t), Pose(Rb, t), Pose(Rb, -t)]


def chirality_count(pose: Pose, n1: np.ndarray, n2: np.ndarray) -> int:
    """Points in front of both cameras, camera 1 at the origin."""
    X = triangulate_normalized(_projection(Pose.identity()), _projection(pose), n1, n2)
    w = X[:, 3]
    finite = np.abs(w) > INFINITY_TOL
    pts = X[finite, :3] / w[finite, None]
    depth1 = pts[:, 2]
    depth2 = pts @ pose.rotation[2] + pose.translation[2]
    return int(np.count_nonzero((depth1 > 0) & (depth2 > 0)))


def select_pose_chirality(E, x1, x2, K1, K2) -> Pose:
    """Pick the decomposition of E that puts most points in front of both cameras.

    ``x1``/``x2`` are pixel coordinates; K1/K2 map them to normalized image
    space. Ties go to the earlier candidate of :func:`decompose_essential`.
    """
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    x2 = np.atleast_2d(np.asarray(x2, dtype=np.float64))
    if len(x1) < 1 or x1.shape != x2.shape:
        raise TwoViewError("need at least one correspondence")
    n1 = (_to_homogeneous(x1) @ np.linalg.inv(np.asarray(K1, dtype=float)).T)[:, :2]
    n2 = (_to_homogeneous(x2) @ np.linalg.inv(np.asarray(K2, dtype=float)).T)[:, :2]
    candidates = decompose_essential(E)
    counts = [chirality_count(pose, n1, n2) for pose in candidates]
    best = int(np.argmax(counts))
    if counts[best] == 0:
        raise TwoViewError("no pose candidate places any point in front of both cameras")
    return candidates[best]
