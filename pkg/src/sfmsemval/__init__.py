"""Semantic validation and correction of sparse Structure-from-Motion models."""

import os as _os

__version__ = "0.1.0"

# SFMSEMVAL_THREADS caps the BLAS/OpenMP pools; it has to be set before numpy loads.
_threads = _os.environ.get("SFMSEMVAL_THREADS")
if _threads and _threads.isdigit() and int(_threads) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .camera_geometry import Pose, Stats, camera_center, mean_reprojection_stats, project  # noqa: E402
from .filters import (FilterReport, consistency_filter, exhaustive_pair_count, majority_label,  # noqa: E402
                      model_stats, motion_filter)
from .model_io import (CameraIntrinsics, ImageRecord, Point3D, SparseModel, load_match_matrix,  # noqa: E402
                       load_model, pair_id, write_model_binary, write_model_text)
from .planes import (LabeledPlane, OcclusionVerdict, extract_semantic_planes, fit_plane_ransac,  # noqa: E402
                     occlusion_validate, ray_plane_intersection)
from .semantics import ClassTable, LabelMap, compute_iou, label_model  # noqa: E402
from .two_view import (eight_point, ransac_fundamental, ransac_trials, select_pose_chirality,  # noqa: E402
                       triangulate)
