import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sfmsemval.camera_geometry import Pose, project, skew
from sfmsemval.model_io import CameraIntrinsics
from sfmsemval.synthetic import two_view_scene
from sfmsemval.two_view import (
    TwoViewError, algebraic_residuals, decompose_essential, eight_point, essential_from_fundamental,
    essential_from_pose, fundamental_from_pose, ransac_fundamental, ransac_trials, sampson_distances,
    select_pose_chirality, triangulate,
)


def planted(seed, n=200, outlier_frac=0.3):
    scene = two_view_scene(n, seed)
    rng = np.random.default_rng(seed + 1000)
    n_out = int(round(outlier_frac * n))
    out = rng.choice(n, n_out, replace=False)
    x2 = scene.x2.copy()
    x2[out] = rng.uniform([0, 0], [1280, 720], (n_out, 2))
    truth = np.ones(n, bool)
    truth[out] = False
    return scene, x2, truth


def same_up_to_scale(A, B):
    A, B = A / np.linalg.norm(A), B / np.linalg.norm(B)
    return min(np.abs(A - B).max(), np.abs(A + B).max())


@pytest.mark.parametrize("seed", range(5))
def test_eight_point_noiseless(seed):
    s = two_view_scene(20, seed)
    F = eight_point(s.x1, s.x2)
    assert algebraic_residuals(F, s.x1, s.x2).max() < 1e-9
    assert abs(np.linalg.det(F)) < 1e-9
    assert np.isclose(np.linalg.norm(F), 1.0)
    assert same_up_to_scale(F, fundamental_from_pose(s.pose2, s.K1, s.K2)) < 1e-6


def test_eight_point_pure_translation():
    s = two_view_scene(30, 7, pure_translation=True)
    F = eight_point(s.x1, s.x2)
    expected = np.linalg.inv(s.K2).T @ skew(s.pose2.translation) @ np.linalg.inv(s.K1)
    assert same_up_to_scale(F, expected) < 1e-6
    # epipoles are the images of the other camera's centre
    e1 = np.linalg.svd(F)[2][-1]
    e2 = np.linalg.svd(F.T)[2][-1]
    e1_true = s.K1 @ (-s.pose2.rotation.T @ s.pose2.translation)
    assert np.allclose(np.cross(e1, e1_true), 0, atol=1e-6 * np.linalg.norm(e1_true))
    e2_true = s.K2 @ s.pose2.translation
    assert np.allclose(np.cross(e2, e2_true), 0, atol=1e-6 * np.linalg.norm(e2_true))


def test_eight_point_degenerate():
    x = np.tile([[100.0, 200.0]], (8, 1))
    with pytest.raises(TwoViewError):
        eight_point(x, x + 3)
    with pytest.raises(TwoViewError):
        eight_point(np.zeros((7, 2)), np.zeros((7, 2)))


def test_sampson_zero_on_inliers():
    s = two_view_scene(50, 3)
    F = fundamental_from_pose(s.pose2, s.K1, s.K2)
    assert sampson_distances(F, s.x1, s.x2).max() < 1e-6


def test_ransac_all_inliers():
    s = two_view_scene(60, 11)
    F, mask = ransac_fundamental(s.x1, s.x2, eps=1e-8, trials=20, rng_seed=0)
    assert mask.all()
    assert abs(np.linalg.det(F)) < 1e-9


@pytest.mark.parametrize("seed", range(10))
def test_ransac_planted(seed):
    scene, x2, truth = planted(seed)
    F, mask = ransac_fundamental(scene.x1, x2, eps=1e-8, trials=200, rng_seed=seed)
    assert np.array_equal(mask, truth)
    assert algebraic_residuals(F, scene.x1[truth], x2[truth]).max() < 1e-9 * np.linalg.norm(F)


def test_ransac_sampson_option():
    scene, x2, truth = planted(4)
    _, mask = ransac_fundamental(scene.x1, x2, eps=1e-4, trials=200, rng_seed=1, residual="sampson")
    assert np.array_equal(mask, truth)


def test_ransac_deterministic_and_shuffle_invariant():
    scene, x2, truth = planted(21)
    a = ransac_fundamental(scene.x1, x2, 1e-8, 150, rng_seed=5)
    b = ransac_fundamental(scene.x1, x2, 1e-8, 150, rng_seed=5)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    perm = np.random.default_rng(0).permutation(len(x2))
    F, mask = ransac_fundamental(scene.x1[perm], x2[perm], 1e-8, 150, rng_seed=5)
    assert np.array_equal(mask, a[1][perm])
    assert same_up_to_scale(F, a[0]) < 1e-9


def test_ransac_earliest_trial_wins_ties():
    # noisy data with a loose threshold: many trials reach the same inlier
    # count with different inlier sets, and the first of them must win
    s = two_view_scene(40, 9)
    x2 = s.x2 + np.random.default_rng(9).normal(scale=1.5, size=s.x2.shape)
    saw_tie = False
    for seed in range(8):
        F, mask = ransac_fundamental(s.x1, x2, 1.0, 40, rng_seed=seed, residual="sampson")
        rng = np.random.default_rng(seed)
        samples = [rng.choice(40, 8, replace=False) for _ in range(40)]
        masks = [sampson_distances(eight_point(s.x1[i], x2[i]), s.x1, x2) <= 1.0 for i in samples]
        counts = [m.sum() for m in masks]
        first = int(np.argmax(counts))
        tied = [k for k, c in enumerate(counts) if c == counts[first]]
        saw_tie |= any(not np.array_equal(masks[k], masks[first]) for k in tied)
        assert np.array_equal(mask, masks[first])
    assert saw_tie


def test_ransac_errors():
    s = two_view_scene(7, 0)
    with pytest.raises(TwoViewError):
        ransac_fundamental(s.x1, s.x2, 1e-3, 10)
    rng = np.random.default_rng(0)
    with pytest.raises(TwoViewError):
        ransac_fundamental(rng.uniform(0, 1000, (30, 2)), rng.uniform(0, 1000, (30, 2)), 1e-12, 5)


def test_ransac_trials_examples():
    assert ransac_trials(0.99, 0.5, 8) == 1177
    assert ransac_trials(0.5, 0.5, 2) == 3
    assert ransac_trials(0.99, 1.0, 8) == 1
    assert ransac_trials(0.3, 1.0, 1) == 1
    assert ransac_trials(0.99, 0.5, 8) == math.ceil(math.log(1 - 0.99) / math.log(1 - 0.5 ** 8))
    for bad in ((0, 0.5, 8), (1, 0.5, 8), (0.9, 0, 8), (0.9, 1.2, 8), (0.9, 0.5, 0)):
        with pytest.raises(ValueError):
            ransac_trials(*bad)


@given(st.floats(0.01, 0.94), st.floats(0.001, 0.05), st.floats(0.05, 0.95), st.integers(1, 10))
def test_ransac_trials_monotone(z, dz, w, n):
    assert ransac_trials(z + dz, w, n) >= ransac_trials(z, w, n)
    assert ransac_trials(z, min(w + dz, 1.0), n) <= ransac_trials(z, w, n)


def test_essential_identity_calibration():
    s = two_view_scene(30, 5)
    F = eight_point(s.x1, s.x2)
    E = essential_from_fundamental(F, np.eye(3), np.eye(3))
    sv = np.linalg.svd(E, compute_uv=False)
    assert abs(sv[0] - sv[1]) < 1e-9 and sv[2] < 1e-9
    U, S, Vt = np.linalg.svd(F)
    assert np.allclose(E, U @ np.diag([(S[0] + S[1]) / 2] * 2 + [0]) @ Vt)


@pytest.mark.parametrize("seed", range(5))
def test_essential_matches_pose(seed):
    s = two_view_scene(40, seed)
    E = essential_from_fundamental(eight_point(s.x1, s.x2), s.K1, s.K2)
    assert same_up_to_scale(E, essential_from_pose(s.pose2)) < 1e-6
    sv = np.linalg.svd(E, compute_uv=False)
    assert abs(sv[0] - sv[1]) < 1e-9 * sv[0] and sv[2] < 1e-9 * sv[0]


def test_essential_singular_k():
    with pytest.raises(TwoViewError):
        essential_from_fundamental(np.eye(3), np.zeros((3, 3)), np.eye(3))


def test_triangulate_examples():
    cam = CameraIntrinsics(1, "PINHOLE", 640, 480, [500, 500, 320, 240])
    p1 = Pose(np.eye(3), [1.0, 0, 0])   # centre (-1, 0, 0)
    p2 = Pose(np.eye(3), [-1.0, 0, 0])  # centre (1, 0, 0)
    X = np.array([0.0, 0.0, 5.0])
    Y = triangulate(p1, p2, cam, cam, project(p1, cam, X), project(p2, cam, X))
    assert np.allclose(Y, X, atol=1e-9)
    with pytest.raises(TwoViewError):
        triangulate(p1, p1, cam, cam, [320, 240], [320, 240])


def test_triangulate_behind_both_cameras():
    cam = CameraIntrinsics(1, "PINHOLE", 640, 480, [500, 500, 320, 240])
    p1 = Pose(np.eye(3), [1.0, 0, 0])
    p2 = Pose(np.eye(3), [-1.0, 0, 0])
    X = np.array([0.3, 0.2, -5.0])
    # pixel positions of a point behind the cameras, from the pinhole formula
    x1 = 500 * (X[:2] + [1, 0]) / X[2] + [320, 240]
    x2 = 500 * (X[:2] - [1, 0]) / X[2] + [320, 240]
    Y = triangulate(p1, p2, cam, cam, x1, x2)
    assert np.allclose(Y, X, atol=1e-9)
    assert (p1.transform(Y[None])[0, 2] < 0) and (p2.transform(Y[None])[0, 2] < 0)


def test_triangulate_parallel_rays():
    cam = CameraIntrinsics(1, "PINHOLE", 640, 480, [500, 500, 320, 240])
    with pytest.raises(TwoViewError):
        triangulate(Pose(np.eye(3), [1.0, 0, 0]), Pose(np.eye(3), [-1.0, 0, 0]), cam, cam, [320, 240], [320, 240])


def test_decompose_candidates_valid():
    s = two_view_scene(10, 2)
    for pose in decompose_essential(essential_from_pose(s.pose2)):
        assert np.isclose(np.linalg.det(pose.rotation), 1.0)
        assert np.isclose(np.linalg.norm(pose.translation), 1.0)


def _matches_truth(pose, truth):
    t = truth.translation / np.linalg.norm(truth.translation)
    return np.allclose(pose.rotation, truth.rotation, atol=1e-8) and np.allclose(pose.translation, t, atol=1e-8)


@pytest.mark.parametrize("seed", range(10))
def test_chirality_ground_truth(seed):
    s = two_view_scene(50, seed)
    E = essential_from_pose(s.pose2)
    assert _matches_truth(select_pose_chirality(E, s.x1, s.x2, s.K1, s.K2), s.pose2)
    # a single correspondence is enough
    assert _matches_truth(select_pose_chirality(E, s.x1[:1], s.x2[:1], s.K1, s.K2), s.pose2)
    # positive scaling of t does not change the choice
    assert _matches_truth(select_pose_chirality(7.5 * E, s.x1, s.x2, s.K1, s.K2), s.pose2)


def test_chirality_corrupt_essential():
    # identical pixels in both views with a pure-translation E: the
    # untwisted candidates put every point at infinity and the twisted ones
    # put them behind a camera
    t = np.array([1.0, 0.0, 0.0])
    E = skew(t)
    rng = np.random.default_rng(0)
    x = rng.uniform(-0.5, 0.5, (20, 2))
    with pytest.raises(TwoViewError):
        select_pose_chirality(E, x, x, np.eye(3), np.eye(3))
