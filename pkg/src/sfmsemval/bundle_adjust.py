"""
Dense Levenberg-Marquardt bundle adjustment at desk scale.

Poses are stored as unit quaternion + translation. Inside the solver each
pose moves by a local increment (axis-angle w, translation step dt) applied
as R <- exp(w) R, t <- t + dt; points move additively. Intrinsics are fixed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, FrozenSet, List, Optional, Tuple

import numpy as np

from .camera_geometry import (
    MIN_DEPTH,
    ChiralityError,
    axis_angle_to_quat,
    quat_multiply,
    quat_to_rotation,
)
from .model_io import NULL_POINT3D_ID, CameraIntrinsics, SparseModel

logger = logging.getLogger(__name__)

POSE_DOF = 6
POINT_DOF = 3


class LMError(RuntimeError):
    """The damped normal equations could not be solved at any damping level."""


@dataclass
class BAProblem:
    """Parameters and observations of a bundle-adjustment problem.

    Observations are kept sorted by (image_id, point_id) so that residual and
    Jacobian rows are reproducible. Residual k has rows 2k (x) and 2k+1 (y).
    """

    cameras: Dict[int, CameraIntrinsics]
    image_cameras: Dict[int, int]
    qvecs: Dict[int, np.ndarray]
    tvecs: Dict[int, np.ndarray]
    points: Dict[int, np.ndarray]
    observations: List[Tuple[int, int, np.ndarray]]
    fixed_images: FrozenSet[int] = frozenset()
    # (image_id, axis) translation components held constant, e.g. to fix scale
    fixed_translations: FrozenSet[Tuple[int, int]] = frozenset()
    fixed_points: FrozenSet[int] = frozenset()
    _index: Optional[dict] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.observations = sorted(
            ((int(i), int(p), np.asarray(xy, dtype=np.float64)) for i, p, xy in self.observations),
            key=lambda o: (o[0], o[1]),
        )
        for image_id, point_id, _ in self.observations:
            if image_id not in self.qvecs or point_id not in self.points:
                raise ValueError(f"observation ({image_id}, {point_id}) references a missing parameter")
        self.qvecs = {k: np.asarray(q, dtype=np.float64) / np.linalg.norm(q) for k, q in self.qvecs.items()}
        self.tvecs = {k: np.asarray(t, dtype=np.float64) for k, t in self.tvecs.items()}
        self.points = {k: np.asarray(x, dtype=np.float64) for k, x in self.points.items()}

    @classmethod
    def from_model(cls, model: SparseModel, **fixed) -> "BAProblem":
        observations = []
        for image_id, image in model.images.items():
            for xy, pid in zip(image.xys, image.point3d_ids):
                if pid != NULL_POINT3D_ID:
                    observations.append((image_id, int(pid), xy))
        return cls(
            cameras=dict(model.cameras),
            image_cameras={i: img.camera_id for i, img in model.images.items()},
            qvecs={i: img.qvec for i, img in model.images.items()},
            tvecs={i: img.tvec for i, img in model.images.items()},
            points={p: pt.xyz for p, pt in model.points.items()},
            observations=observations,
            **fixed,
        )

    def apply_to(self, model: SparseModel) -> SparseModel:
        """Copy of ``model`` carrying this problem's poses and points."""
        out = model.copy()
        for image_id, image in out.images.items():
            if image_id in self.qvecs:
                image.qvec = self.qvecs[image_id].copy()
                image.tvec = self.tvecs[image_id].copy()
        for point_id, point in out.points.items():
            if point_id in self.points:
                point.xyz = self.points[point_id].copy()
        return out

    # -- parameter layout -------------------------------------------------

    @property
    def index(self) -> dict:
        if self._index is None:
            image_ids = sorted(self.qvecs)
            point_ids = sorted(self.points)
            img_pos = {k: n for n, k in enumerate(image_ids)}
            pt_pos = {k: n for n, k in enumerate(point_ids)}
            obs_img = np.array([img_pos[o[0]] for o in self.observations], dtype=np.int64)
            obs_pt = np.array([pt_pos[o[1]] for o in self.observations], dtype=np.int64)
            obs_xy = np.array([o[2] for o in self.observations]).reshape(-1, 2)
            cams = [self.cameras[self.image_cameras[image_ids[i]]] for i in obs_img]
            intr = np.zeros((len(cams), 6))  # fx fy cx cy k1 k2
            for n, cam in enumerate(cams):
                intr[n, :2] = cam.focal_lengths
                intr[n, 2:4] = cam.principal_point
                intr[n, 4:4 + cam.radial.size] = cam.radial
            n_params = POSE_DOF * len(image_ids) + POINT_DOF * len(point_ids)
            free = np.ones(n_params, dtype=bool)
            for image_id in self.fixed_images:
                if image_id in img_pos:
                    free[POSE_DOF * img_pos[image_id]:POSE_DOF * (img_pos[image_id] + 1)] = False
            for image_id, axis in self.fixed_translations:
                if image_id in img_pos:
                    free[POSE_DOF * img_pos[image_id] + 3 + axis] = False
            offset = POSE_DOF * len(image_ids)
            for point_id in self.fixed_points:
                if point_id in pt_pos:
                    free[offset + POINT_DOF * pt_pos[point_id]:offset + POINT_DOF * (pt_pos[point_id] + 1)] = False
            self._index = dict(image_ids=image_ids, point_ids=point_ids, obs_img=obs_img, obs_pt=obs_pt,
                               obs_xy=obs_xy, intr=intr, n_params=n_params, free=free)
        return self._index

    @property
    def num_params(self) -> int:
        return self.index["n_params"]

    @property
    def free_mask(self) -> np.ndarray:
        return self.index["free"]

    def retract(self, delta: np.ndarray) -> "BAProblem":
        """New problem with the local increment ``delta`` (full length) applied."""
        idx = self.index
        delta = np.where(idx["free"], delta, 0.0)
        qvecs, tvecs, points = {}, {}, {}
        for n, image_id in enumerate(idx["image_ids"]):
            d = delta[POSE_DOF * n:POSE_DOF * (n + 1)]
            q = quat_multiply(axis_angle_to_quat(d[:3]), self.qvecs[image_id])
            qvecs[image_id] = q / np.linalg.norm(q)
            tvecs[image_id] = self.tvecs[image_id] + d[3:]
        offset = POSE_DOF * len(idx["image_ids"])
        for n, point_id in enumerate(idx["point_ids"]):
            points[point_id] = self.points[point_id] + delta[offset + POINT_DOF * n:offset + POINT_DOF * (n + 1)]
        out = replace(self, qvecs=qvecs, tvecs=tvecs, points=points, _index=None)
        out._index = idx
        return out

    # -- evaluation ---------------------------------------------------------

    def _camera_frame(self):
        idx = self.index
        R = np.array([quat_to_rotation(self.qvecs[i]) for i in idx["image_ids"]]).reshape(-1, 3, 3)
        T = np.array([self.tvecs[i] for i in idx["image_ids"]]).reshape(-1, 3)
        X = np.array([self.points[p] for p in idx["point_ids"]]).reshape(-1, 3)
        Ro = R[idx["obs_img"]]
        Xw = X[idx["obs_pt"]]
        Xc = np.einsum("nij,nj->ni", Ro, Xw) + T[idx["obs_img"]]
        bad = np.flatnonzero(~(Xc[:, 2] > MIN_DEPTH))
        if bad.size:
            image_id, point_id, _ = self.observations[bad[0]]
            raise ChiralityError(
                f"{bad.size} observation(s) with non-positive depth, first: image {image_id}, point {point_id}"
            )
        return Ro, Xw, Xc

    def residuals(self) -> np.ndarray:
        """Predicted minus measured pixel coordinates, interleaved x, y."""
        idx = self.index
        if not self.observations:
            return np.zeros(0)
        _, _, Xc = self._camera_frame()
        intr = idx["intr"]
        uv = Xc[:, :2] / Xc[:, 2:3]
        r2 = np.sum(uv * uv, axis=1, keepdims=True)
        uv_d = uv * (1.0 + intr[:, 4:5] * r2 + intr[:, 5:6] * r2 * r2)
        pix = uv_d * intr[:, 0:2] + intr[:, 2:4]
        return (pix - idx["obs_xy"]).reshape(-1)

    def cost(self) -> float:
        r = self.residuals()
        return float(r @ r)


def reprojection_cost(problem: BAProblem) -> float:
    """Sum of squared pixel residuals over all observations.

    Raises ChiralityError if any observed point has non-positive depth.
    """
    return problem.cost()


def analytic_jacobian(problem: BAProblem) -> np.ndarray:
    """Closed-form d(residuals)/d(increment), shape (2 * n_obs, n_params)."""
    idx = problem.index
    n_obs = len(problem.observations)
    J = np.zeros((2 * n_obs, idx["n_params"]))
    if not n_obs:
        return J
    Ro, Xw, Xc = problem._camera_frame()
    intr = idx["intr"]
    x, y, z = Xc[:, 0], Xc[:, 1], Xc[:, 2]
    u, v = x / z, y / z
    r2 = u * u + v * v
    k1, k2 = intr[:, 4], intr[:, 5]
    radial = 1.0 + k1 * r2 + k2 * r2 * r2
    dradial = 2.0 * (k1 + 2.0 * k2 * r2)  # d(radial)/du = dradial * u

    D = np.empty((n_obs, 2, 2))
    D[:, 0, 0] = radial + dradial * u * u
    D[:, 0, 1] = dradial * u * v
    D[:, 1, 0] = dradial * u * v
    D[:, 1, 1] = radial + dradial * v * v
    P = np.zeros((n_obs, 2, 3))
    P[:, 0, 0] = 1.0 / z
    P[:, 0, 2] = -x / (z * z)
    P[:, 1, 1] = 1.0 / z
    P[:, 1, 2] = -y / (z * z)
    dpix_dXc = intr[:, 0:2, None] * np.einsum("nij,njk->nik", D, P)

    RX = np.einsum("nij,nj->ni", Ro, Xw)
    skew_RX = np.zeros((n_obs, 3, 3))
    skew_RX[:, 0, 1], skew_RX[:, 0, 2] = -RX[:, 2], RX[:, 1]
    skew_RX[:, 1, 0], skew_RX[:, 1, 2] = RX[:, 2], -RX[:, 0]
    skew_RX[:, 2, 0], skew_RX[:, 2, 1] = -RX[:, 1], RX[:, 0]
    d_rot = -np.einsum("nij,njk->nik", dpix_dXc, skew_RX)
    d_pt = np.einsum("nij,njk->nik", dpix_dXc, Ro)

    rows = np.arange(n_obs)
    offset = POSE_DOF * len(idx["image_ids"])
    for a in range(2):
        rr = 2 * rows + a
        for c in range(3):
            J[rr, POSE_DOF * idx["obs_img"] + c] = d_rot[:, a, c]
            J[rr, POSE_DOF * idx["obs_img"] + 3 + c] = dpix_dXc[:, a, c]
            J[rr, offset + POINT_DOF * idx["obs_pt"] + c] = d_pt[:, a, c]
    return J


def numeric_jacobian(problem: BAProblem, step: float = 1e-6) -> np.ndarray:
    """Central finite-difference Jacobian of the residual vector."""
    if not step > 0:
        raise ValueError("finite-difference step must be positive")
    n = problem.num_params
    r0 = problem.residuals()
    J = np.zeros((r0.size, n))
    e = np.zeros(n)
    for k in range(n):
        e[k] = step
        J[:, k] = (problem.retract(e).residuals() - problem.retract(-e).residuals()) / (2 * step)
        e[k] = 0.0
    return J


def levenberg_marquardt(
    residual_fn: Callable[[object], np.ndarray],
    jacobian_fn: Callable[[object], np.ndarray],
    x0,
    retract: Callable[[object, np.ndarray], object],
    free: Optional[np.ndarray] = None,
    lambda0: float = 1e-3,
    max_iters: int = 100,
    cost_tol: float = 1e-12,
    cost_abs_tol: float = 1e-20,
    lambda_max: float = 1e12,
    lambda_min: float = 1e-12,
):
    """Generic LM loop with multiplicative damping (x0.1 on success, x10 on failure).

    Each step solves (J^T J + lambda I) dx = -J^T r. Only strictly decreasing
    costs are accepted. Iteration stops after ``max_iters`` accepted steps,
    when the cost falls to ``cost_abs_tol``, when a step would change the cost
    by less than ``cost_tol`` relative, or when damping exceeds
    ``lambda_max`` without a decrease.

    Returns:
        (x, trace of accepted costs starting with the initial cost)
    """
    x = x0
    r = residual_fn(x)
    cost = float(r @ r)
    if not np.isfinite(cost):
        raise ValueError("initial cost is not finite")
    trace = [cost]
    lam = lambda0
    for _ in range(max_iters):
        if cost <= cost_abs_tol:
            break
        J = jacobian_fn(x)
        cols = np.flatnonzero(free) if free is not None else np.arange(J.shape[1])
        Jf = J[:, cols]
        g = Jf.T @ r
        H = Jf.T @ Jf
        eye = np.eye(len(cols))
        solved_any = False
        accepted = None
        while lam <= lambda_max:
            try:
                step = np.linalg.solve(H + lam * eye, -g)
                solved_any = solved_any or np.all(np.isfinite(step))
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            delta = np.zeros(J.shape[1])
            delta[cols] = step
            x_new = retract(x, delta)
            try:
                r_new = residual_fn(x_new)
                cost_new = float(r_new @ r_new)
            except ChiralityError:
                cost_new = np.inf
            if cost_new < cost:
                accepted = (x_new, r_new, cost_new)
                lam = max(lam * 0.1, lambda_min)
                break
            lam *= 10.0
        if accepted is None:
            if not solved_any:
                raise LMError(f"normal equations unsolvable for every damping up to {lambda_max:g}")
            break
        x_new, r_new, cost_new = accepted
        if (cost - cost_new) / cost < cost_tol:
            break
        x, r, cost = x_new, r_new, cost_new
        trace.append(cost)
    return x, trace


def lm_refine(problem: BAProblem, lambda0: float = 1e-3, max_iters: int = 100, cost_tol: float = 1e-12,
              jacobian: str = "analytic") -> Tuple[BAProblem, List[float]]:
    """Refine poses and points of ``problem`` by Levenberg-Marquardt.

    Returns the refined problem and the accepted-cost trace, which is
    strictly decreasing and starts with the initial cost.
    """
    jac = {"analytic": analytic_jacobian, "numeric": numeric_jacobian}[jacobian]
    refined, trace = levenberg_marquardt(
        residual_fn=lambda p: p.residuals(),
        jacobian_fn=jac,
        x0=problem,
        retract=lambda p, d: p.retract(d),
        free=problem.free_mask,
        lambda0=lambda0,
        max_iters=max_iters,
        cost_tol=cost_tol,
    )
    logger.debug("lm_refine: %d accepted steps, cost %.3g -> %.3g", len(trace) - 1, trace[0], trace[-1])
    return refined, trace
