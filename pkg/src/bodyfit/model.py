"""Forward body model: parameters -> posed mesh vertices and 3D joints.

The mesh is produced by linear blend skinning of a template deformed by three
additive offset fields (shape, expression, pose-corrective), with rest joints
regressed from the shape-deformed template.  ``backward`` implements the exact
reverse-mode chain by hand, returning gradients with respect to every joint
rotation matrix plus the shape and expression coefficients; rotation-matrix
gradients are then pulled back to axis-angle (or hand PCA) parameters by
``param_gradients``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from bodyfit import rotations as rot
from bodyfit.assets import N_KEYPOINT_SLOTS, ModelAssets

DEFAULT_LATENT_DIM = 32


@dataclass
class ParamVector:
    """Optimizable state of one fit.

    Body pose is either explicit per-joint axis-angle (``body_pose``) or a
    latent code (``latent``) decoded by a pose prior — exactly one of the two
    is set.  ``camera_translation`` lives here for packing convenience but is
    consumed by the camera, never by ``forward``.
    """

    global_orient: np.ndarray
    body_pose: np.ndarray | None
    latent: np.ndarray | None
    jaw_pose: np.ndarray
    eye_poses: np.ndarray
    hand_left: np.ndarray
    hand_right: np.ndarray
    shape: np.ndarray
    expression: np.ndarray
    camera_translation: np.ndarray

    def __post_init__(self):
        if (self.body_pose is None) == (self.latent is None):
            raise ValueError("exactly one of body_pose / latent must be set")
        for name in ("global_orient", "body_pose", "latent", "jaw_pose", "eye_poses",
                     "hand_left", "hand_right", "shape", "expression",
                     "camera_translation"):
            val = getattr(self, name)
            if val is not None:
                setattr(self, name, np.asarray(val, dtype=np.float64))

    @classmethod
    def rest(cls, assets: ModelAssets, latent_dim: int | None = None) -> "ParamVector":
        n_body = len(assets.body_joint_ids)
        return cls(
            global_orient=np.zeros(3),
            body_pose=None if latent_dim is not None else np.zeros((n_body, 3)),
            latent=np.zeros(latent_dim) if latent_dim is not None else None,
            jaw_pose=np.zeros(3),
            eye_poses=np.zeros((2, 3)),
            hand_left=np.zeros(assets.n_hand_coeffs),
            hand_right=np.zeros(assets.n_hand_coeffs),
            shape=np.zeros(assets.n_shape),
            expression=np.zeros(assets.n_expr),
            camera_translation=np.zeros(3),
        )

    def copy(self) -> "ParamVector":
        return ParamVector(
            global_orient=self.global_orient.copy(),
            body_pose=None if self.body_pose is None else self.body_pose.copy(),
            latent=None if self.latent is None else self.latent.copy(),
            jaw_pose=self.jaw_pose.copy(),
            eye_poses=self.eye_poses.copy(),
            hand_left=self.hand_left.copy(),
            hand_right=self.hand_right.copy(),
            shape=self.shape.copy(),
            expression=self.expression.copy(),
            camera_translation=self.camera_translation.copy(),
        )

    def pose_param_count(self) -> int:
        """Model parameters excluding camera translation (119 by default)."""
        body = self.latent.size if self.body_pose is None else self.body_pose.size
        return (3 + body + self.jaw_pose.size + self.eye_poses.size
                + self.hand_left.size + self.hand_right.size
                + self.shape.size + self.expression.size)


# ---------------------------------------------------------------------------
# Blend functions
# ---------------------------------------------------------------------------

def shape_blend(assets: ModelAssets, shape: np.ndarray) -> np.ndarray:
    if shape.shape != (assets.n_shape,):
        raise ValueError(f"shape coefficients must be ({assets.n_shape},)")
    return (assets.shape_dirs @ shape).reshape(-1, 3)


def expression_blend(assets: ModelAssets, expression: np.ndarray) -> np.ndarray:
    if expression.shape != (assets.n_expr,):
        raise ValueError(f"expression coefficients must be ({assets.n_expr},)")
    return (assets.expr_dirs @ expression).reshape(-1, 3)


def pose_feature(articulated_rotations: np.ndarray) -> np.ndarray:
    """Flattened (R_k - I) over every articulated joint (root excluded)."""
    return (articulated_rotations - np.eye(3)).reshape(-1)


def pose_blend(assets: ModelAssets, articulated_rotations: np.ndarray) -> np.ndarray:
    k = assets.n_joints - 1
    if articulated_rotations.shape != (k, 3, 3):
        raise ValueError(f"expected ({k}, 3, 3) articulated rotations")
    return (assets.pose_dirs @ pose_feature(articulated_rotations)).reshape(-1, 3)


def hand_pca_to_pose(assets: ModelAssets, coeffs: np.ndarray, side: str) -> np.ndarray:
    """PCA coefficients -> per-finger-joint axis-angle, shape (finger joints, 3)."""
    basis = assets.hand_pca_left if side == "left" else assets.hand_pca_right
    mean = assets.hand_mean_left if side == "left" else assets.hand_mean_right
    if coeffs.shape != (basis.shape[1],):
        raise ValueError(f"hand coefficients must be ({basis.shape[1]},)")
    flat = basis @ coeffs
    if mean is not None:
        flat = flat + mean
    return flat.reshape(-1, 3)


def regress_joints(assets: ModelAssets, shaped_vertices: np.ndarray) -> np.ndarray:
    return assets.joint_regressor @ shaped_vertices


# ---------------------------------------------------------------------------
# Rotation assembly
# ---------------------------------------------------------------------------

def build_rotations(
    assets: ModelAssets,
    params: ParamVector,
    body_rotmats: np.ndarray | None = None,
) -> np.ndarray:
    """All K+1 joint rotations.  Latent-mode callers pass the decoded body
    rotation matrices; everything else comes from axis-angle fields."""
    k1 = assets.n_joints
    rots = np.broadcast_to(np.eye(3), (k1, 3, 3)).copy()
    rots[0] = rot.rodrigues(params.global_orient)
    if params.body_pose is not None:
        rots[assets.body_joint_ids] = rot.rodrigues(params.body_pose)
    elif body_rotmats is not None:
        rots[assets.body_joint_ids] = body_rotmats
    else:
        raise ValueError("latent-mode forward needs decoded body_rotmats")
    rots[assets.jaw_joint] = rot.rodrigues(params.jaw_pose)
    rots[assets.eye_joints] = rot.rodrigues(params.eye_poses)
    rots[assets.hand_joint_ids_left] = rot.rodrigues(hand_pca_to_pose(assets, params.hand_left, "left"))
    rots[assets.hand_joint_ids_right] = rot.rodrigues(hand_pca_to_pose(assets, params.hand_right, "right"))
    return rots


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

@dataclass
class ForwardResult:
    vertices: np.ndarray          # (N, 3) posed, model space
    joints: np.ndarray            # (K+1, 3) posed
    joint_transforms: np.ndarray  # (K+1, 4, 4) world transforms down the tree
    rotations: np.ndarray         # (K+1, 3, 3) as assembled
    rest_joints: np.ndarray       # (K+1, 3) regressed from the shaped template
    _cache: dict = field(default_factory=dict, repr=False)


def forward(
    assets: ModelAssets,
    params: ParamVector,
    body_rotmats: np.ndarray | None = None,
) -> ForwardResult:
    rots = build_rotations(assets, params, body_rotmats)

    shaped = assets.template + shape_blend(assets, params.shape)
    rest_joints = regress_joints(assets, shaped)
    posed_template = (
        shaped
        + expression_blend(assets, params.expression)
        + pose_blend(assets, rots[1:])
    )

    parents = assets.parents
    k1 = assets.n_joints
    locals_ = np.tile(np.eye(4), (k1, 1, 1))
    locals_[:, :3, :3] = rots
    locals_[0, :3, 3] = rest_joints[0]
    locals_[1:, :3, 3] = rest_joints[1:] - rest_joints[parents[1:]]

    world = np.empty_like(locals_)
    world[0] = locals_[0]
    for k in range(1, k1):
        world[k] = world[parents[k]] @ locals_[k]

    # Rest-joint subtraction folds the "rotate about your own joint" origin
    # shift into each world transform.
    skinning = world[:, :3, :].copy()
    skinning[:, :, 3] -= np.einsum("kij,kj->ki", world[:, :3, :3], rest_joints)

    per_vertex = np.einsum("nk,kij->nij", assets.skin_weights, skinning)
    vertices = np.einsum("nij,nj->ni", per_vertex[:, :, :3], posed_template) + per_vertex[:, :, 3]

    return ForwardResult(
        vertices=vertices,
        joints=world[:, :3, 3].copy(),
        joint_transforms=world,
        rotations=rots,
        rest_joints=rest_joints,
        _cache={
            "locals": locals_,
            "posed_template": posed_template,
            "per_vertex": per_vertex,
        },
    )


# ---------------------------------------------------------------------------
# Reverse mode
# ---------------------------------------------------------------------------

@dataclass
class ModelGrads:
    rotations: np.ndarray    # (K+1, 3, 3) d E / d R_k, raw matrix sense
    shape: np.ndarray
    expression: np.ndarray


def backward(
    assets: ModelAssets,
    result: ForwardResult,
    d_vertices: np.ndarray,
    d_joints: np.ndarray | None = None,
) -> ModelGrads:
    """Pull dE/dvertices (and optionally dE/djoints) back to rotation
    matrices and blend coefficients."""
    k1 = assets.n_joints
    parents = assets.parents
    world = result.joint_transforms
    locals_ = result._cache["locals"]
    posed_template = result._cache["posed_template"]
    per_vertex = result._cache["per_vertex"]
    rest_joints = result.rest_joints

    # vertices = P[:, :, :3] @ t + P[:, :, 3] with P the blended transforms.
    d_per_vertex = np.empty_like(per_vertex)
    d_per_vertex[:, :, :3] = d_vertices[:, :, None] * posed_template[:, None, :]
    d_per_vertex[:, :, 3] = d_vertices
    d_posed_template = np.einsum("nij,ni->nj", per_vertex[:, :, :3], d_vertices)

    d_skinning = np.einsum("nk,nij->kij", assets.skin_weights, d_per_vertex)

    # skinning = world[:, :3] minus the rotated rest joint in the last column.
    d_world = np.zeros((k1, 4, 4))
    d_world[:, :3, :] = d_skinning
    d_world[:, :3, :3] -= d_skinning[:, :, 3, None] * rest_joints[:, None, :]
    d_rest = -np.einsum("kij,ki->kj", world[:, :3, :3], d_skinning[:, :, 3])
    if d_joints is not None:
        d_world[:, :3, 3] += d_joints

    # Reverse the kinematic chain: world_k = world_parent @ local_k.
    d_locals = np.zeros_like(d_world)
    for k in range(k1 - 1, 0, -1):
        p = parents[k]
        d_locals[k] = world[p].T @ d_world[k]
        d_world[p] += d_world[k] @ locals_[k].T
    d_locals[0] = d_world[0]

    d_rotations = d_locals[:, :3, :3].copy()
    d_rest += d_locals[:, :3, 3]
    np.subtract.at(d_rest, parents[1:], d_locals[1:, :3, 3])

    # posed_template feeds the skinning everywhere; pose blend adds to the
    # articulated rotations, shape/expression to their coefficients.
    d_feature = assets.pose_dirs.T @ d_posed_template.reshape(-1)
    d_rotations[1:] += d_feature.reshape(-1, 3, 3)

    d_shaped = d_posed_template + (assets.joint_regressor.T @ d_rest)
    d_shape = assets.shape_dirs.T @ d_shaped.reshape(-1)
    d_expression = assets.expr_dirs.T @ d_posed_template.reshape(-1)

    return ModelGrads(rotations=d_rotations, shape=d_shape, expression=d_expression)


@dataclass
class ParamGrads:
    global_orient: np.ndarray
    body_pose: np.ndarray | None      # (21, 3) in axis-angle mode
    body_rotmats: np.ndarray | None   # (21, 3, 3) raw grads in latent mode
    jaw_pose: np.ndarray
    eye_poses: np.ndarray
    hand_left: np.ndarray
    hand_right: np.ndarray
    shape: np.ndarray
    expression: np.ndarray


def _axis_angle_pullback(axis_angle: np.ndarray, d_rotmats: np.ndarray) -> np.ndarray:
    """Contract dE/dR with the Rodrigues jacobian: (..., 3, 3) -> (..., 3)."""
    jac = rot.rodrigues_jacobian(axis_angle)
    return np.einsum("...iab,...ab->...i", jac, d_rotmats)


def param_gradients(
    assets: ModelAssets,
    params: ParamVector,
    grads: ModelGrads,
) -> ParamGrads:
    d_rot = grads.rotations
    body = None
    body_mats = None
    if params.body_pose is not None:
        body = _axis_angle_pullback(params.body_pose, d_rot[assets.body_joint_ids])
    else:
        body_mats = d_rot[assets.body_joint_ids].copy()

    d_theta_l = _axis_angle_pullback(
        hand_pca_to_pose(assets, params.hand_left, "left"),
        d_rot[assets.hand_joint_ids_left],
    )
    d_theta_r = _axis_angle_pullback(
        hand_pca_to_pose(assets, params.hand_right, "right"),
        d_rot[assets.hand_joint_ids_right],
    )

    return ParamGrads(
        global_orient=_axis_angle_pullback(params.global_orient, d_rot[0]),
        body_pose=body,
        body_rotmats=body_mats,
        jaw_pose=_axis_angle_pullback(params.jaw_pose, d_rot[assets.jaw_joint]),
        eye_poses=_axis_angle_pullback(params.eye_poses, d_rot[assets.eye_joints]),
        hand_left=assets.hand_pca_left.T @ d_theta_l.reshape(-1),
        hand_right=assets.hand_pca_right.T @ d_theta_r.reshape(-1),
        shape=grads.shape,
        expression=grads.expression,
    )


# ---------------------------------------------------------------------------
# Keypoint landmarks
# ---------------------------------------------------------------------------

def landmark_positions(
    assets: ModelAssets,
    vertices: np.ndarray,
    joints: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """3D positions for every mapped keypoint slot plus a coverage mask."""
    pos = np.zeros((N_KEYPOINT_SLOTS, 3))
    mask = np.zeros(N_KEYPOINT_SLOTS, dtype=bool)
    lj, lv = assets.landmark_joints, assets.landmark_verts
    if len(lj):
        pos[lj[:, 0]] = joints[lj[:, 1]]
        mask[lj[:, 0]] = True
    if len(lv):
        pos[lv[:, 0]] = vertices[lv[:, 1]]
        mask[lv[:, 0]] = True
    return pos, mask


def landmark_backward(
    assets: ModelAssets,
    n_vertices: int,
    n_joints: int,
    d_positions: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Scatter slot-position gradients back onto vertices and joints."""
    d_vertices = np.zeros((n_vertices, 3))
    d_joints = np.zeros((n_joints, 3))
    lj, lv = assets.landmark_joints, assets.landmark_verts
    if len(lj):
        np.add.at(d_joints, lj[:, 1], d_positions[lj[:, 0]])
    if len(lv):
        np.add.at(d_vertices, lv[:, 1], d_positions[lv[:, 0]])
    return d_vertices, d_joints
