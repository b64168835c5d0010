"""Expressive articulated body model with 2D-keypoint fitting.

The package bundles a linear-blend-skinned body/hands/face model, a pinhole
camera, pose priors (a latent-variable prior and a Gaussian-mixture baseline),
a triangle-level self-collision penalty, and an annealed L-BFGS fitter that
recovers model parameters from OpenPose-style keypoint detections.
"""

from bodyfit.assets import ModelAssets, load_container, save_container
from bodyfit.camera import Camera, init_camera, project
from bodyfit.collision import build_bvh, collision_energy, find_colliding_pairs
from bodyfit.fitting import (FitConfig, FitResult, StageConfig, default_stages,
                             fit)
from bodyfit.keypoints import (N_KEYPOINT_SLOTS, KeypointSet, parse_openpose,
                               sanitize, write_openpose)
from bodyfit.lbfgs import LbfgsSettings, lbfgs_minimize
from bodyfit.meshio import export_mesh, import_mesh
from bodyfit.metrics import (EvalReport, joint_error, procrustes_align,
                             v2v_error)
from bodyfit.model import ParamVector, forward, landmark_positions
from bodyfit.objective import FitObjective, TermWeights, geman_mcclure
from bodyfit.poseprior import (VposerModel, load_vposer, save_vposer,
                               train_vposer)
from bodyfit.priors import GmmPrior, fit_gmm
from bodyfit.synthetic import build_synthetic_assets, sample_pose_corpus

__version__ = "0.1.0"

__all__ = [
    "Camera",
    "EvalReport",
    "FitConfig",
    "FitObjective",
    "FitResult",
    "GmmPrior",
    "KeypointSet",
    "LbfgsSettings",
    "ModelAssets",
    "N_KEYPOINT_SLOTS",
    "ParamVector",
    "StageConfig",
    "TermWeights",
    "VposerModel",
    "build_bvh",
    "build_synthetic_assets",
    "collision_energy",
    "default_stages",
    "export_mesh",
    "find_colliding_pairs",
    "fit",
    "fit_gmm",
    "forward",
    "geman_mcclure",
    "import_mesh",
    "init_camera",
    "joint_error",
    "landmark_positions",
    "lbfgs_minimize",
    "load_container",
    "load_vposer",
    "parse_openpose",
    "procrustes_align",
    "project",
    "sample_pose_corpus",
    "sanitize",
    "save_container",
    "save_vposer",
    "train_vposer",
    "v2v_error",
    "write_openpose",
]
