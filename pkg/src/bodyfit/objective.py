"""Fitting objective: robust 2D reprojection plus weighted priors.

One FitObjective instance evaluates a single annealing stage. The parameter
vector packs, in order: global orientation (3), body pose (32-dim latent or
63-dim axis-angle depending on mode), jaw (3), eyes (6), hand PCA (12+12),
shape (10), expression (10), camera translation (3).

The data term applies a Geman-McClure robustifier to each keypoint's 2D
residual norm, weighted by detection confidence times a per-block gamma.
Collision pairs are frozen between ``refresh_collision`` calls so the energy
stays smooth along a line search; a behind-camera landmark makes the
objective return +inf, which the line search treats as a rejected step.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from bodyfit import model, priors
from bodyfit import rotations as rot
from bodyfit.camera import BehindCameraError, Camera, project, project_vjp
from bodyfit.collision import build_bvh, collision_energy, find_colliding_pairs
from bodyfit.keypoints import KeypointSet, N_KEYPOINT_SLOTS

DEFAULT_SIGMA_PER_FOCAL = 0.1      # 100 px at 1000 px focal


def geman_mcclure(residual, sigma: float):
    """rho(e) = sigma^2 e^2 / (sigma^2 + e^2): quadratic near 0, -> sigma^2."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    e2 = np.square(residual)
    return sigma * sigma * e2 / (sigma * sigma + e2)


@dataclass
class TermWeights:
    """Per-stage multipliers: gammas scale data blocks, lambdas scale priors."""

    gamma_body: float = 1.0
    gamma_hands: float = 1.0
    gamma_face: float = 1.0
    body_pose: float = 1.0
    face_pose: float = 1.0
    hands: float = 1.0
    angle: float = 1.0
    shape: float = 1.0
    expression: float = 1.0
    collision: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be >= 0")

    def scaled(self, **kw) -> "TermWeights":
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals.update(kw)
        return TermWeights(**vals)


TERM_NAMES = ("data", "body_pose", "face_pose", "hands", "angle", "shape",
              "expression", "collision")

_BLOCK_SLICES = {"body": slice(0, 25), "hands": slice(25, 67), "face": slice(67, 137)}


def slot_gammas(weights: TermWeights) -> np.ndarray:
    g = np.empty(N_KEYPOINT_SLOTS)
    g[_BLOCK_SLICES["body"]] = weights.gamma_body
    g[_BLOCK_SLICES["hands"]] = weights.gamma_hands
    g[_BLOCK_SLICES["face"]] = weights.gamma_face
    return g


class FitObjective:
    """Callable (f, grad) over the packed parameter vector for one stage."""

    def __init__(self, assets, keypoints: KeypointSet, camera: Camera,
                 weights: TermWeights, sigma: float | None = None,
                 mode: str = "vposer", vposer=None, gmm=None,
                 masked_pairs=None, latent_dim: int | None = None):
        if mode not in ("vposer", "axis-angle"):
            raise ValueError("mode must be 'vposer' or 'axis-angle'")
        if mode == "vposer" and vposer is None:
            raise ValueError("vposer mode needs a decoder model")
        self.assets = assets
        self.keypoints = keypoints
        self.camera = camera
        self.weights = weights
        self.sigma = float(sigma) if sigma is not None else \
            DEFAULT_SIGMA_PER_FOCAL * camera.focal[0]
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        self.mode = mode
        self.vposer = vposer
        self.gmm = gmm
        self.masked_pairs = masked_pairs
        self.pairs: list = []

        n_body = len(assets.body_joint_ids)
        self.latent_dim = latent_dim or (vposer.latent_dim if vposer else 0)
        self.body_dim = self.latent_dim if mode == "vposer" else 3 * n_body
        sizes = [3, self.body_dim, 3, 6,
                 assets.hand_pca_left.shape[1], assets.hand_pca_right.shape[1],
                 assets.shape_dirs.shape[1], assets.expr_dirs.shape[1], 3]
        names = ["global_orient", "body", "jaw_pose", "eye_poses",
                 "hand_left", "hand_right", "shape", "expression",
                 "camera_translation"]
        offsets = np.cumsum([0] + sizes)
        self.layout = {n: slice(int(a), int(b))
                       for n, a, b in zip(names, offsets[:-1], offsets[1:])}
        self.n_params = int(offsets[-1])

        # static data-term bookkeeping
        mapped = np.zeros(N_KEYPOINT_SLOTS, dtype=bool)
        if len(assets.landmark_joints):
            mapped[assets.landmark_joints[:, 0]] = True
        if len(assets.landmark_verts):
            mapped[assets.landmark_verts[:, 0]] = True
        gam = slot_gammas(weights)
        conf = keypoints.confidence
        wanted = (conf > 0) & (gam > 0)
        orphan = wanted & ~mapped
        if np.any(orphan):
            raise ValueError(
                f"keypoint slots {np.flatnonzero(orphan).tolist()} have no "
                "model landmark mapping")
        self.active = np.flatnonzero(wanted)
        self.data_weights = conf[self.active] * gam[self.active]

    # -- packing ------------------------------------------------------------
    def pack(self, params: model.ParamVector) -> np.ndarray:
        x = np.empty(self.n_params)
        lay = self.layout
        x[lay["global_orient"]] = params.global_orient
        if self.mode == "vposer":
            if params.latent is None:
                raise ValueError("vposer-mode objective needs a latent code")
            x[lay["body"]] = params.latent
        else:
            if params.body_pose is None:
                raise ValueError("axis-angle objective needs explicit body pose")
            x[lay["body"]] = params.body_pose.reshape(-1)
        x[lay["jaw_pose"]] = params.jaw_pose
        x[lay["eye_poses"]] = params.eye_poses.reshape(-1)
        x[lay["hand_left"]] = params.hand_left
        x[lay["hand_right"]] = params.hand_right
        x[lay["shape"]] = params.shape
        x[lay["expression"]] = params.expression
        x[lay["camera_translation"]] = params.camera_translation
        return x

    def unpack(self, x: np.ndarray) -> model.ParamVector:
        lay = self.layout
        vposer_mode = self.mode == "vposer"
        return model.ParamVector(
            global_orient=x[lay["global_orient"]],
            body_pose=None if vposer_mode else x[lay["body"]].reshape(-1, 3),
            latent=x[lay["body"]].copy() if vposer_mode else None,
            jaw_pose=x[lay["jaw_pose"]],
            eye_poses=x[lay["eye_poses"]].reshape(2, 3),
            hand_left=x[lay["hand_left"]],
            hand_right=x[lay["hand_right"]],
            shape=x[lay["shape"]],
            expression=x[lay["expression"]],
            camera_translation=x[lay["camera_translation"]],
        )

    # -- body pose decode ---------------------------------------------------
    def _decode_body(self, x):
        """(body_rotmats or None, decode context for the backward pass)"""
        if self.mode != "vposer":
            return None, None
        z = x[self.layout["body"]]
        raw, projected, cache = self.vposer.decode(z, with_cache=True)
        return projected, (z, raw, projected, cache)

    # -- collision pair freezing ---------------------------------------------
    def refresh_collision(self, x) -> None:
        """Recompute the frozen pair set at the current parameters."""
        if self.weights.collision == 0:
            self.pairs = []
            return
        params = self.unpack(x)
        body_rotmats, _ = self._decode_body(x)
        res = model.forward(self.assets, params, body_rotmats=body_rotmats)
        bvh = build_bvh(res.vertices, self.assets.faces)
        masked = self.masked_pairs
        if masked is None and len(self.assets.contact_mask_pairs):
            masked = self.assets.contact_mask_pairs
        self.pairs = find_colliding_pairs(bvh, res.vertices, self.assets.faces,
                                          masked_pairs=masked)

    # -- evaluation -----------------------------------------------------------
    def __call__(self, x):
        f, grad, _ = self._evaluate(np.asarray(x, dtype=np.float64))
        return f, grad

    def term_breakdown(self, x) -> dict:
        """Weighted contribution of each term; values sum to ``total``."""
        return self._evaluate(np.asarray(x, dtype=np.float64))[2]

    def _evaluate(self, x):
        w = self.weights
        try:
            return self._evaluate_inner(x, w)
        except BehindCameraError:
            terms = {name: float("inf") for name in TERM_NAMES}
            terms["total"] = float("inf")
            return float("inf"), np.zeros_like(x), terms

    def _evaluate_inner(self, x, w):
        assets = self.assets
        params = self.unpack(x)
        body_rotmats, decode_ctx = self._decode_body(x)
        result = model.forward(assets, params, body_rotmats=body_rotmats)
        cam = self.camera.with_translation(params.camera_translation)

        terms = dict.fromkeys(TERM_NAMES, 0.0)
        grad = np.zeros_like(x)
        lay = self.layout

        # --- data term ---
        d_positions = np.zeros((N_KEYPOINT_SLOTS, 3))
        d_cam_t = np.zeros(3)
        if len(self.active):
            lm, _ = model.landmark_positions(assets, result.vertices, result.joints)
            pix = project(lm[self.active], cam)
            delta = pix - self.keypoints.points[self.active]
            s = np.sum(delta * delta, axis=1)
            sig2 = self.sigma * self.sigma
            terms["data"] = float(np.sum(self.data_weights * sig2 * s / (sig2 + s)))
            drho_ds = sig2 * sig2 / (sig2 + s) ** 2
            d_pix = (2.0 * self.data_weights * drho_ds)[:, None] * delta
            d_lm, d_cam_t = project_vjp(lm[self.active], cam, d_pix)
            d_positions[self.active] = d_lm
        d_vertices, d_joints = model.landmark_backward(
            assets, len(result.vertices), len(result.joints), d_positions)

        # --- collision (frozen pair set) ---
        if w.collision > 0 and self.pairs:
            e_c, d_vc = collision_energy(self.pairs, result.vertices, assets.faces)
            terms["collision"] = e_c
            d_vertices = d_vertices + w.collision * d_vc

        grads = model.backward(assets, result, d_vertices, d_joints)
        pg = model.param_gradients(assets, params, grads)

        grad[lay["global_orient"]] = pg.global_orient
        grad[lay["jaw_pose"]] = pg.jaw_pose
        grad[lay["eye_poses"]] = pg.eye_poses.reshape(-1)
        grad[lay["hand_left"]] = pg.hand_left
        grad[lay["hand_right"]] = pg.hand_right
        grad[lay["shape"]] = pg.shape
        grad[lay["expression"]] = pg.expression
        grad[lay["camera_translation"]] = d_cam_t

        # --- body pose: prior + bending, then pull back to x ---
        if self.mode == "vposer":
            z, raw, projected, cache = decode_ctx
            d_projected = pg.body_rotmats
            if w.angle > 0:
                e_a, g_a = priors.angle_prior_rotmats(projected, assets)
                terms["angle"] = e_a
                d_projected = d_projected + w.angle * g_a
            d_raw = rot.nearest_rotation_vjp(raw, projected, d_projected)
            d_z = self.vposer.decode_backward(cache, d_raw)
            e_z, g_z = priors.l2_prior(z)
            terms["body_pose"] = e_z
            grad[lay["body"]] = d_z + w.body_pose * g_z
        else:
            theta = params.body_pose
            d_theta = pg.body_pose
            if w.angle > 0:
                e_a, g_a = priors.angle_prior(theta, assets)
                terms["angle"] = e_a
                d_theta = d_theta + w.angle * g_a
            if self.gmm is not None:
                e_b, g_b = self.gmm.energy(theta.reshape(-1))
            else:
                e_b, g_b = priors.l2_prior(theta.reshape(-1))
            terms["body_pose"] = e_b
            grad[lay["body"]] = d_theta.reshape(-1) + w.body_pose * g_b

        # --- plain quadratic priors ---
        for term, key, vec in (
            ("face_pose", "jaw_pose", params.jaw_pose),
            ("face_pose", "eye_poses", params.eye_poses.reshape(-1)),
            ("hands", "hand_left", params.hand_left),
            ("hands", "hand_right", params.hand_right),
            ("shape", "shape", params.shape),
            ("expression", "expression", params.expression),
        ):
            e, g = priors.l2_prior(vec)
            terms[term] += e
            grad[lay[key]] += getattr(w, term) * g

        lam = {"data": 1.0, "body_pose": w.body_pose, "face_pose": w.face_pose,
               "hands": w.hands, "angle": w.angle, "shape": w.shape,
               "expression": w.expression, "collision": w.collision}
        weighted = {k: lam[k] * terms[k] for k in TERM_NAMES}
        total = sum(weighted.values())
        weighted["total"] = total
        return total, grad, weighted
