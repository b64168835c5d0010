"""Alignment and error metrics for fitted meshes and joints.

Internals stay in meters; errors are reported in millimeters at the boundary.
Procrustes alignment defaults to the similarity form (rotation + scale +
translation) with a proper rotation enforced; pass ``allow_scale=False`` for
the rigid variant.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from statistics import mean, median

import numpy as np


class DegenerateAlignmentError(ValueError):
    pass


@dataclass
class SimilarityTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * points @ self.rotation.T + self.translation


def procrustes_align(source, target, allow_scale=True) -> SimilarityTransform:
    """Least-squares similarity mapping source onto target (Umeyama form)."""
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if source.shape != target.shape or source.ndim != 2 or source.shape[1] != 3:
        raise ValueError("point sets must share an (M, 3) shape")
    if len(source) < 3:
        raise ValueError("need at least 3 points")

    mu_s = source.mean(axis=0)
    mu_t = target.mean(axis=0)
    xs = source - mu_s
    xt = target - mu_t
    cov = xt.T @ xs / len(source)
    u, s, vt = np.linalg.svd(cov)
    if s[1] <= 1e-12 * max(s[0], 1e-300):
        raise DegenerateAlignmentError("point set is collinear or coincident")
    d = np.sign(np.linalg.det(u @ vt))
    flip = np.diag([1.0, 1.0, d])
    rotation = u @ flip @ vt
    if allow_scale:
        var_s = np.mean(np.sum(xs ** 2, axis=1))
        scale = float(np.trace(np.diag(s) @ flip) / var_s)
    else:
        scale = 1.0
    translation = mu_t - scale * rotation @ mu_s
    return SimilarityTransform(scale, rotation, translation)


def v2v_error(pred, gt, align=True, allow_scale=True) -> float:
    """Mean vertex-to-vertex distance in millimeters."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("meshes must share topology")
    if align:
        pred = procrustes_align(pred, gt, allow_scale=allow_scale).apply(pred)
    return float(np.linalg.norm(pred - gt, axis=1).mean() * 1000.0)


def joint_error(pred, gt, subset=None, per_part_alignment=False,
                allow_scale=True) -> float:
    """Mean joint distance in millimeters over the chosen subset.

    With ``per_part_alignment`` the subset is a list of index groups, each
    aligned to the ground truth independently before measuring (the per-hand
    protocol); otherwise the subset is a flat index list measured as-is.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("joint sets must share shape")
    if per_part_alignment:
        dists = []
        for group in subset:
            idx = np.asarray(group, dtype=np.int64)
            t = procrustes_align(pred[idx], gt[idx], allow_scale=allow_scale)
            dists.append(np.linalg.norm(t.apply(pred[idx]) - gt[idx], axis=1))
        return float(np.concatenate(dists).mean() * 1000.0)
    idx = np.arange(len(pred)) if subset is None else np.asarray(subset, dtype=np.int64)
    return float(np.linalg.norm(pred[idx] - gt[idx], axis=1).mean() * 1000.0)


@dataclass
class FrameEval:
    name: str
    v2v_mm: float
    mpjpe_mm: float
    hand_mm: float = float("nan")
    align_scale: float = 1.0


@dataclass
class EvalReport:
    frames: list = field(default_factory=list)

    def add(self, frame: FrameEval):
        self.frames.append(frame)

    def mean_v2v(self) -> float:
        return mean(f.v2v_mm for f in self.frames)

    def mean_mpjpe(self) -> float:
        return mean(f.mpjpe_mm for f in self.frames)

    def to_csv(self, path) -> None:
        """Columns: frame, v2v_mm, mpjpe_mm, hand_mm, align_scale.

        Two trailing rows carry the aggregates (frame = mean / median).
        """
        if not self.frames:
            raise ValueError("empty report")
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "v2v_mm", "mpjpe_mm", "hand_mm", "align_scale"])
            for f in self.frames:
                w.writerow([f.name, repr(f.v2v_mm), repr(f.mpjpe_mm),
                            repr(f.hand_mm), repr(f.align_scale)])
            for tag, agg in (("mean", mean), ("median", median)):
                w.writerow([
                    tag,
                    repr(agg(f.v2v_mm for f in self.frames)),
                    repr(agg(f.mpjpe_mm for f in self.frames)),
                    repr(agg(f.hand_mm for f in self.frames)),
                    "",
                ])
