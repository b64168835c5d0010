"""Pinhole camera: projection, its derivatives, and fit initialization.

The model stays in its own space; the camera carries the translation (and an
optional rotation, identity throughout the fitting pipeline).  Initialization
estimates depth from the torso's similar-triangles ratio, back-projects the
torso centroid for x/y, then refines the body's global orientation over four
yaw hypotheses to resolve the front/back ambiguity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from bodyfit import rotations as rot
from bodyfit.assets import ModelAssets
from bodyfit.keypoints import KeypointSet

MIN_DEPTH = 1e-6
DEFAULT_FOCAL = 5000.0


class BehindCameraError(ValueError):
    def __init__(self, indices):
        self.indices = np.atleast_1d(indices)
        super().__init__(f"{len(self.indices)} point(s) at or behind the camera plane")


class InitializationError(ValueError):
    """Camera/orientation initialization cannot proceed (missing/degenerate torso)."""


@dataclass
class Camera:
    focal: tuple[float, float] = (DEFAULT_FOCAL, DEFAULT_FOCAL)
    principal_point: tuple[float, float] = (0.0, 0.0)
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        fx, fy = self.focal
        if not (fx > 0 and fy > 0):
            raise ValueError("focal lengths must be positive")
        err = np.max(np.abs(self.rotation @ self.rotation.T - np.eye(3)))
        if err > 1e-8 or abs(np.linalg.det(self.rotation) - 1.0) > 1e-8:
            raise ValueError("camera rotation must be a proper rotation")

    def with_translation(self, t) -> "Camera":
        return Camera(self.focal, self.principal_point, self.rotation.copy(),
                      np.asarray(t, dtype=np.float64))


def _to_camera_frame(points: np.ndarray, camera: Camera) -> np.ndarray:
    return points @ camera.rotation.T + camera.translation


def project(points: np.ndarray, camera: Camera) -> np.ndarray:
    """Perspective-project (M, 3) model-space points to (M, 2) pixels."""
    q = _to_camera_frame(np.atleast_2d(points), camera)
    z = q[:, 2]
    behind = np.nonzero(z <= MIN_DEPTH)[0]
    if len(behind):
        raise BehindCameraError(behind)
    fx, fy = camera.focal
    cx, cy = camera.principal_point
    return np.column_stack((fx * q[:, 0] / z + cx, fy * q[:, 1] / z + cy))


def project_vjp(
    points: np.ndarray,
    camera: Camera,
    d_pixels: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Pull pixel-space gradients back to (d_points, d_translation)."""
    q = _to_camera_frame(np.atleast_2d(points), camera)
    x, y, z = q[:, 0], q[:, 1], q[:, 2]
    fx, fy = camera.focal
    # u = fx x / z + cx, v = fy y / z + cy
    d_q = np.empty_like(q)
    d_q[:, 0] = d_pixels[:, 0] * fx / z
    d_q[:, 1] = d_pixels[:, 1] * fy / z
    d_q[:, 2] = -(d_pixels[:, 0] * fx * x + d_pixels[:, 1] * fy * y) / (z * z)
    return d_q @ camera.rotation, d_q.sum(axis=0)


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

_YAW_HYPOTHESES = (0.0, 0.5 * np.pi, np.pi, 1.5 * np.pi)


def _torso_slots(assets: ModelAssets) -> np.ndarray:
    slot_of = {joint: slot for slot, joint in assets.landmark_joints}
    try:
        return np.array([slot_of[j] for j in assets.torso_joints])
    except KeyError as exc:
        raise InitializationError("model maps no keypoint slot to a torso joint") from exc


def _refine_orientation(torso_rest, root, pixels, weights, camera, yaw, iterations=20):
    """Gauss-Newton on the global orientation, translation frozen.

    Rotation acts about the rest root joint, matching the forward model.
    """
    omega = np.array([0.0, yaw, 0.0])
    arms = torso_rest - root
    fx, fy = camera.focal
    lam = 1e-6
    for _ in range(iterations):
        r = rot.rodrigues(omega)
        posed = arms @ r.T + root
        q = _to_camera_frame(posed, camera)
        if np.any(q[:, 2] <= MIN_DEPTH):
            return omega, np.inf
        uv = project(posed, camera)
        res = (uv - pixels) * weights[:, None]

        jac_r = rot.rodrigues_jacobian(omega)          # (3, 3, 3)
        d_q = np.einsum("iab,nb->nia", jac_r, arms)    # (M, 3 omega, 3 xyz)
        d_q = d_q @ camera.rotation.T
        z = q[:, 2]
        d_u = fx * (d_q[:, :, 0] * z[:, None] - q[:, 0, None] * d_q[:, :, 2]) / (z ** 2)[:, None]
        d_v = fy * (d_q[:, :, 1] * z[:, None] - q[:, 1, None] * d_q[:, :, 2]) / (z ** 2)[:, None]
        jac = np.stack([d_u, d_v], axis=1) * weights[:, None, None]  # (M, 2, 3)

        j = jac.reshape(-1, 3)
        g = j.T @ res.reshape(-1)
        h = j.T @ j + lam * np.eye(3)
        step = np.linalg.solve(h, -g)
        omega = omega + step
        if np.linalg.norm(step) < 1e-12:
            break
    r = rot.rodrigues(omega)
    uv = project(arms @ r.T + root, camera)
    loss = float(np.sum(((uv - pixels) * weights[:, None]) ** 2))
    return omega, loss


def init_camera(
    keypoints: KeypointSet,
    assets: ModelAssets,
    focal: tuple[float, float] | float = DEFAULT_FOCAL,
    principal_point: tuple[float, float] = (0.0, 0.0),
) -> tuple[Camera, np.ndarray]:
    """Estimate camera translation and body global orientation.

    Returns ``(camera, global_orient)``.  Depth comes from the ratio of the
    rest-pose torso height (shoulder midpoint to hip midpoint) to its pixel
    counterpart; orientation is fit afterwards with translation frozen.
    """
    if np.isscalar(focal):
        focal = (float(focal), float(focal))

    slots = _torso_slots(assets)
    conf = keypoints.confidence[slots]
    if np.any(conf <= 0.0):
        raise InitializationError("torso keypoints missing or zero-confidence")
    pixels = keypoints.points[slots]

    rest_joints = assets.joint_regressor @ assets.template
    torso_rest = rest_joints[assets.torso_joints]
    root = rest_joints[0]

    # torso_joints rows come as (shoulders..., hips...); both midpoints exist
    # by construction of the asset tables.
    mid_sh3, mid_hip3 = torso_rest[:2].mean(axis=0), torso_rest[2:].mean(axis=0)
    mid_sh2, mid_hip2 = pixels[:2].mean(axis=0), pixels[2:].mean(axis=0)
    length3 = np.linalg.norm(mid_sh3 - mid_hip3)
    length2 = np.linalg.norm(mid_sh2 - mid_hip2)
    if length2 < 1e-6:
        raise InitializationError("degenerate torso: zero pixel extent")

    depth = focal[0] * length3 / length2
    centroid2 = pixels.mean(axis=0)
    centroid3 = torso_rest.mean(axis=0)
    tx = (centroid2[0] - principal_point[0]) * depth / focal[0] - centroid3[0]
    ty = (centroid2[1] - principal_point[1]) * depth / focal[1] - centroid3[1]
    camera = Camera(focal, principal_point, np.eye(3), np.array([tx, ty, depth]))

    weights = conf / conf.sum()
    best = None
    for yaw in _YAW_HYPOTHESES:
        omega, loss = _refine_orientation(torso_rest, root, pixels, weights, camera, yaw)
        if best is None or loss < best[1]:
            best = (omega, loss)
    # Gauss-Newton can wander several windings out; return the minimal-norm
    # axis-angle so downstream optimization starts on the principal branch.
    return camera, rot.rotation_to_axis_angle(rot.rodrigues(best[0]))
