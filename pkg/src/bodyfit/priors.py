"""Closed-form regularizers: L2, elbow/knee bending, and a GMM body prior.

The bending prior reads one signed axis-angle component per elbow/knee, with
signs fixed by the asset's bend table so that natural flexion lowers the
energy and hyper-extension raises it exponentially.  The GMM is the classic
baseline body-pose prior: a full-covariance mixture fit by EM on a pose
corpus, evaluated as a shifted negative log density (shifted so the energy is
nonnegative everywhere).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from bodyfit import rotations as rot
from bodyfit.assets import ModelAssets, load_container, save_container

_LOG_2PI = np.log(2.0 * np.pi)


def l2_prior(x: np.ndarray) -> tuple[float, np.ndarray]:
    """Squared Euclidean norm and its gradient."""
    x = np.asarray(x, dtype=np.float64)
    return float(np.sum(x * x)), 2.0 * x


# ---------------------------------------------------------------------------
# Bending prior
# ---------------------------------------------------------------------------

def _bend_rows(assets: ModelAssets):
    if not assets.bend_joints:
        raise ValueError("asset bundle carries no bend-joint table")
    ids = list(assets.body_joint_ids)
    return [(ids.index(j), axis, sign) for j, (axis, sign) in sorted(assets.bend_joints.items())]


def angle_prior(body_pose: np.ndarray, assets: ModelAssets) -> tuple[float, np.ndarray]:
    """Sum of exp(signed bend) over elbows and knees, on axis-angle pose."""
    energy = 0.0
    grad = np.zeros_like(body_pose)
    for row, axis, sign in _bend_rows(assets):
        term = np.exp(sign * body_pose[row, axis])
        energy += term
        grad[row, axis] += sign * term
    return float(energy), grad


def angle_prior_rotmats(body_rotmats: np.ndarray, assets: ModelAssets) -> tuple[float, np.ndarray]:
    """Bending prior on rotation matrices (latent-mode body pose).

    The returned matrix gradient is the ambient-space one that composes with
    the orthogonal-projection VJP used by the decode chain.
    """
    energy = 0.0
    grad = np.zeros_like(body_rotmats)
    for row, axis, sign in _bend_rows(assets):
        omega = rot.rotation_to_axis_angle(body_rotmats[row])
        term = np.exp(sign * omega[axis])
        energy += term
        d_omega = np.zeros(3)
        d_omega[axis] = sign * term
        grad[row] = rot.rotation_log_vjp(body_rotmats[row], d_omega)
    return float(energy), grad


# ---------------------------------------------------------------------------
# Gaussian-mixture pose prior
# ---------------------------------------------------------------------------

@dataclass
class GmmPrior:
    """Full-covariance mixture with precomputed precision Cholesky factors.

    ``precision_chol[c]`` is lower-triangular L with Λ_c = L Lᵀ, so the
    component log-density needs only a triangular matvec.
    """

    weights: np.ndarray          # (C,)
    means: np.ndarray            # (C, D)
    precision_chol: np.ndarray   # (C, D, D)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.precision_chol = np.asarray(self.precision_chol, dtype=np.float64)
        self.validate()

    def validate(self):
        if np.any(self.weights <= 0.0) or abs(self.weights.sum() - 1.0) > 1e-8:
            raise ValueError("mixture weights must be positive and sum to 1")
        diag = np.diagonal(self.precision_chol, axis1=1, axis2=2)
        if np.any(diag <= 0.0):
            raise ValueError("precision factors need a positive diagonal")
        upper = np.triu(self.precision_chol, k=1)
        if np.max(np.abs(upper)) > 0.0:
            raise ValueError("precision factors must be lower-triangular")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def _component_log_probs(self, x: np.ndarray) -> np.ndarray:
        """log w_c + log N_c(x) per component; x is (D,) or a batch (M, D)."""
        d = self.dim
        half_log_det = np.log(np.diagonal(self.precision_chol, axis1=1, axis2=2)).sum(axis=1)
        delta = np.atleast_2d(x)[:, None, :] - self.means[None]        # (M, C, D)
        white = np.einsum("cji,mcj->mci", self.precision_chol, delta)  # Lᵀ(x-μ)
        quad = np.sum(white * white, axis=2)
        out = np.log(self.weights) + half_log_det - 0.5 * (d * _LOG_2PI + quad)
        return out if np.ndim(x) == 2 else out[0]

    def _shift(self) -> float:
        """Upper bound on the mixture's log density: energy stays ≥ 0."""
        half_log_det = np.log(np.diagonal(self.precision_chol, axis1=1, axis2=2)).sum(axis=1)
        return float(logsumexp(np.log(self.weights) + half_log_det - 0.5 * self.dim * _LOG_2PI))

    def energy(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        """Shifted negative log mixture density and its gradient."""
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        if x.shape != (self.dim,):
            raise ValueError(f"expected a {self.dim}-dim pose vector")
        log_probs = self._component_log_probs(x)
        total = logsumexp(log_probs)
        resp = np.exp(log_probs - total)
        delta = x[None, :] - self.means
        white = np.einsum("cji,cj->ci", self.precision_chol, delta)
        per_component = np.einsum("cij,cj->ci", self.precision_chol, white)  # Λ_c δ_c
        grad = np.einsum("c,ci->i", resp, per_component)
        return float(self._shift() - total), grad

    def log_likelihood(self, data: np.ndarray) -> float:
        return float(np.mean(logsumexp(self._component_log_probs(data), axis=1)))

    # -- persistence --------------------------------------------------------
    def to_dir(self, path) -> None:
        save_container(path, {
            "weights": self.weights,
            "means": self.means,
            "precision_chol": self.precision_chol,
        }, meta={"kind": "gmm-prior"})

    @classmethod
    def from_dir(cls, path) -> "GmmPrior":
        arrays, _ = load_container(path)
        return cls(arrays["weights"], arrays["means"], arrays["precision_chol"])


def _kmeans_pp_seeds(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [data[rng.integers(len(data))]]
    for _ in range(k - 1):
        d2 = np.min(
            [np.sum((data - c) ** 2, axis=1) for c in centers], axis=0
        )
        probs = d2 / d2.sum()
        centers.append(data[rng.choice(len(data), p=probs)])
    return np.stack(centers)


def fit_gmm(
    data: np.ndarray,
    n_components: int = 8,
    seed: int = 0,
    n_iter: int = 100,
    tol: float = 1e-6,
    reg_covar: float = 1e-6,
) -> GmmPrior:
    """Full-covariance EM with k-means++ seeding.  Deterministic per seed."""
    data = np.asarray(data, dtype=np.float64)
    m, d = data.shape
    if m < n_components:
        raise ValueError("need at least one sample per component")
    rng = np.random.default_rng(seed)

    means = _kmeans_pp_seeds(data, n_components, rng)
    assign = np.argmin(
        ((data[:, None, :] - means[None]) ** 2).sum(axis=2), axis=1
    )
    weights = np.full(n_components, 1.0 / n_components)
    covs = np.empty((n_components, d, d))
    for c in range(n_components):
        members = data[assign == c]
        if len(members) < 2:
            covs[c] = np.cov(data.T) + reg_covar * np.eye(d)
        else:
            covs[c] = np.cov(members.T) + reg_covar * np.eye(d)

    def chol_of_precision(cov):
        return np.linalg.cholesky(np.linalg.inv(cov))

    prec = np.stack([chol_of_precision(c) for c in covs])
    prev_ll = -np.inf
    for _ in range(n_iter):
        gmm = GmmPrior(weights, means, prec)
        log_probs = gmm._component_log_probs(data)  # (M, C)
        totals = logsumexp(log_probs, axis=1)
        ll = float(np.mean(totals))
        resp = np.exp(log_probs - totals[:, None])

        nk = resp.sum(axis=0) + 1e-12
        weights = nk / nk.sum()
        means = (resp.T @ data) / nk[:, None]
        for c in range(n_components):
            delta = data - means[c]
            cov = (resp[:, c, None] * delta).T @ delta / nk[c]
            covs[c] = cov + reg_covar * np.eye(d)
        prec = np.stack([chol_of_precision(c) for c in covs])

        if abs(ll - prev_ll) < tol:
            break
        prev_ll = ll
    return GmmPrior(weights, means, prec)
