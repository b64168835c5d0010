"""Staged fitting loop: camera init, then annealed robust optimization.

Fitting runs a fixed schedule of stages. Early stages keep the priors strong
and ignore hand/face keypoints so the torso and camera translation settle
first; later stages open up the extremity data terms, decay the priors, and
(optionally) switch on the interpenetration term. Each stage minimizes the
same objective class with its own weights via L-BFGS, warm-started from the
previous stage.

Everything here is deterministic: there is no sampling anywhere in the loop,
so a given (keypoints, assets, config) triple always produces the same fit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from bodyfit import model
from bodyfit.camera import DEFAULT_FOCAL, Camera, init_camera
from bodyfit.keypoints import KeypointSet, sanitize
from bodyfit.lbfgs import LbfgsSettings, lbfgs_minimize
from bodyfit.objective import FitObjective, TermWeights


@dataclass
class StageConfig:
    name: str
    iterations: int
    weights: TermWeights

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass
class FitConfig:
    focal: float = DEFAULT_FOCAL
    principal_point: tuple[float, float] = (0.0, 0.0)
    sigma: float | None = None          # None -> scaled from focal
    prior_kind: str = "vposer"          # or "gmm"
    collision: bool = False
    memory: int = 50                    # L-BFGS history; the problem is stiff
    trace_terms: bool = False           # per-iteration breakdowns cost one
                                        # extra objective evaluation each
    stages: list[StageConfig] = field(default_factory=list)

    def __post_init__(self):
        if self.prior_kind not in ("vposer", "gmm"):
            raise ValueError("prior_kind must be 'vposer' or 'gmm'")
        if not self.stages:
            self.stages = default_stages()


def default_stages() -> list[StageConfig]:
    """Three-stage annealing schedule.

    Stage 1 fits torso/limb placement with strong priors and no extremity
    data.  Stage 2 brings in hands and face at reduced prior strength.
    Stage 3 decays the priors an order of magnitude further so the data term
    dominates, and carries the collision weight (applied only when the run
    has collision handling enabled).
    """
    return [
        StageConfig("coarse", 40, TermWeights(
            gamma_body=1.0, gamma_hands=0.0, gamma_face=0.0,
            body_pose=4.0, face_pose=4.0, hands=4.0, angle=2.0,
            shape=2.0, expression=4.0, collision=0.0)),
        StageConfig("limbs", 60, TermWeights(
            gamma_body=1.0, gamma_hands=1.0, gamma_face=0.5,
            body_pose=0.4, face_pose=0.8, hands=0.4, angle=0.4,
            shape=0.4, expression=0.8, collision=0.0)),
        StageConfig("detail", 600, TermWeights(
            gamma_body=1.0, gamma_hands=1.0, gamma_face=1.0,
            body_pose=0.005, face_pose=0.02, hands=0.01, angle=0.02,
            shape=0.005, expression=0.02, collision=2.0)),
    ]


@dataclass
class StageTrace:
    name: str
    f_history: list
    term_history: list      # one term-breakdown dict per accepted iterate
    status: str
    iterations: int


@dataclass
class FitResult:
    params: model.ParamVector
    camera: Camera
    vertices: np.ndarray
    joints: np.ndarray
    stage_traces: list
    status: str

    @property
    def final_energy(self) -> float:
        return self.stage_traces[-1].f_history[-1] if self.stage_traces else 0.0


def fit(keypoints: KeypointSet, assets, config: FitConfig | None = None,
        vposer=None, gmm=None) -> FitResult:
    """Fit model parameters to one frame of 2D keypoints."""
    config = config or FitConfig()
    if config.prior_kind == "vposer" and vposer is None:
        raise ValueError("config.prior_kind is 'vposer' but no decoder given")
    if config.prior_kind == "gmm" and gmm is None:
        raise ValueError("config.prior_kind is 'gmm' but no mixture given")
    kps = sanitize(keypoints)

    latent_dim = vposer.latent_dim if config.prior_kind == "vposer" else None
    params = model.ParamVector.rest(assets, latent_dim=latent_dim)

    mode = "vposer" if config.prior_kind == "vposer" else "axis-angle"

    if not np.any(kps.confidence > 0):
        # nothing to fit against: report the rest pose at a nominal depth,
        # with each stage's energy evaluated once (prior terms only)
        params.camera_translation = np.array([0.0, 0.0, 3.0])
        camera = Camera(_focal_pair(config), config.principal_point,
                        np.eye(3), np.zeros(3))
        traces = []
        for stage in config.stages:
            weights = stage.weights if config.collision else \
                stage.weights.scaled(collision=0.0)
            obj = FitObjective(assets, kps, camera, weights, sigma=config.sigma,
                               mode=mode, vposer=vposer, gmm=gmm)
            bd = obj.term_breakdown(obj.pack(params))
            traces.append(StageTrace(stage.name, [bd["total"]], [bd],
                                     "no-keypoints", 0))
        res = model.forward(assets, params, body_rotmats=_decoded(vposer, params))
        return FitResult(params, camera.with_translation(params.camera_translation),
                         res.vertices, res.joints, traces, "no-keypoints")

    camera, global_orient = init_camera(
        kps, assets, focal=config.focal, principal_point=config.principal_point)
    params.global_orient = global_orient
    params.camera_translation = camera.translation.copy()
    base_cam = Camera(camera.focal, camera.principal_point, np.eye(3), np.zeros(3))

    traces = []
    x = None
    for stage in config.stages:
        weights = stage.weights
        if not config.collision:
            weights = weights.scaled(collision=0.0)
        obj = FitObjective(assets, kps, base_cam, weights, sigma=config.sigma,
                           mode=mode, vposer=vposer, gmm=gmm)
        x = obj.pack(params)
        term_history = []

        def hook(iteration, xk, fk, gk, obj=obj, term_history=term_history):
            if config.trace_terms:
                term_history.append(obj.term_breakdown(xk))
            if obj.weights.collision > 0:
                obj.refresh_collision(xk)
                return True     # pair set changed: objective value is stale
            return False

        obj.refresh_collision(x)
        settings = LbfgsSettings(memory=config.memory,
                                 max_iterations=stage.iterations)
        out = lbfgs_minimize(obj, x, settings, iteration_hook=hook)
        x = out.x
        params = obj.unpack(x)
        term_history.append(obj.term_breakdown(x))
        traces.append(StageTrace(stage.name, list(out.f_history), term_history,
                                 out.status, out.iterations))

    res = model.forward(assets, params, body_rotmats=_decoded(vposer, params))
    camera = base_cam.with_translation(params.camera_translation)
    return FitResult(params, camera, res.vertices, res.joints, traces,
                     traces[-1].status)


def _decoded(vposer, params):
    if params.latent is None:
        return None
    _, rots = vposer.decode(params.latent)
    return rots


def _focal_pair(config):
    f = config.focal
    return (float(f), float(f)) if np.isscalar(f) else f
