"""Latent body-pose prior: a small VAE over per-joint rotation matrices.

Encoder maps the 21 flattened body rotations (189 values) through two
leaky-ReLU layers to a 32-dim Gaussian posterior; the decoder mirrors it.
Raw decoder outputs are generic 3x3 blocks — losses push them toward the
rotation group, and fit-time decoding projects each block to the nearest
proper rotation before it enters the kinematic chain.

Everything is plain numpy with hand-derived backpropagation and a hand-rolled
Adam loop, so the optimizer can differentiate through decode without any
autodiff dependency.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from bodyfit import rotations as rot
from bodyfit.assets import load_container, save_container

LATENT_DIM = 32
_LEAK = 0.2


class VaeTrainingError(RuntimeError):
    """Raised when training hits non-finite losses; carries diagnostics."""


@dataclass
class VaeLossWeights:
    """Multipliers c1..c5 for the five loss terms."""

    kl: float = 1.0
    rec: float = 4.0
    orth: float = 1.0
    det1: float = 1.0
    reg: float = 1e-4

    def __post_init__(self):
        if min(self.kl, self.rec, self.orth, self.det1, self.reg) <= 0:
            raise ValueError("all loss weights must be positive")


def _lrelu(a):
    return np.where(a > 0, a, _LEAK * a)


def _lrelu_grad(a):
    return np.where(a > 0, 1.0, _LEAK)


class VposerModel:
    """MLP weights plus forward/backward passes.

    ``params`` maps layer names to arrays; weight matrices are stored
    input-major so forward passes are plain ``x @ w + b``.
    """

    _LAYOUT = (
        ("enc1_w", "enc1_b"), ("enc2_w", "enc2_b"),
        ("mu_w", "mu_b"), ("ls_w", "ls_b"),
        ("dec1_w", "dec1_b"), ("dec2_w", "dec2_b"), ("out_w", "out_b"),
    )

    def __init__(self, params: dict[str, np.ndarray], n_joints: int = 21,
                 latent_dim: int = LATENT_DIM):
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self.n_joints = n_joints
        self.latent_dim = latent_dim
        expected = [name for pair in self._LAYOUT for name in pair]
        if sorted(self.params) != sorted(expected):
            raise ValueError("parameter set does not match the architecture")
        for name, arr in self.params.items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite weights in {name}")
        if self.params["enc1_w"].shape[0] != 9 * n_joints:
            raise ValueError("encoder input size must be 9 x joint count")
        if self.params["out_w"].shape[1] != 9 * n_joints:
            raise ValueError("decoder output size must be 9 x joint count")
        if self.params["mu_w"].shape[1] != latent_dim:
            raise ValueError("latent head size mismatch")

    @classmethod
    def init_random(cls, seed: int = 0, n_joints: int = 21,
                    latent_dim: int = LATENT_DIM, hidden: int = 512) -> "VposerModel":
        rng = np.random.default_rng(seed)
        d_in = 9 * n_joints

        def he(n_in, n_out, scale=None):
            std = scale if scale is not None else np.sqrt(2.0 / n_in)
            return rng.normal(size=(n_in, n_out)) * std

        params = {
            "enc1_w": he(d_in, hidden), "enc1_b": np.zeros(hidden),
            "enc2_w": he(hidden, hidden), "enc2_b": np.zeros(hidden),
            "mu_w": he(hidden, latent_dim, 0.01), "mu_b": np.zeros(latent_dim),
            "ls_w": he(hidden, latent_dim, 0.01), "ls_b": np.zeros(latent_dim),
            "dec1_w": he(latent_dim, hidden), "dec1_b": np.zeros(hidden),
            "dec2_w": he(hidden, hidden), "dec2_b": np.zeros(hidden),
            "out_w": he(hidden, d_in, 0.01), "out_b": np.zeros(d_in),
        }
        return cls(params, n_joints, latent_dim)

    # -- encoder ------------------------------------------------------------
    def encode(self, rotmats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(B, J, 3, 3) or (J, 3, 3) -> posterior (mu, log sigma)."""
        single = rotmats.ndim == 3
        r = rotmats[None] if single else rotmats
        ortho_err = np.max(np.abs(np.einsum("bjik,bjlk->bjil", r, r) - np.eye(3)))
        if ortho_err > 1e-3:
            raise ValueError("encoder inputs must be rotation matrices (to 1e-3)")
        x = r.reshape(len(r), -1)
        p = self.params
        h1 = _lrelu(x @ p["enc1_w"] + p["enc1_b"])
        h2 = _lrelu(h1 @ p["enc2_w"] + p["enc2_b"])
        mu = h2 @ p["mu_w"] + p["mu_b"]
        ls = h2 @ p["ls_w"] + p["ls_b"]
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(ls))):
            raise FloatingPointError("non-finite encoder activations")
        return (mu[0], ls[0]) if single else (mu, ls)

    @staticmethod
    def sample_latent(mu, log_sigma, rng: np.random.Generator) -> np.ndarray:
        return mu + np.exp(log_sigma) * rng.standard_normal(np.shape(mu))

    # -- decoder ------------------------------------------------------------
    def _decode_forward(self, z2d: np.ndarray) -> dict:
        p = self.params
        a1 = z2d @ p["dec1_w"] + p["dec1_b"]
        h1 = _lrelu(a1)
        a2 = h1 @ p["dec2_w"] + p["dec2_b"]
        h2 = _lrelu(a2)
        y = h2 @ p["out_w"] + p["out_b"]
        return {"z": z2d, "a1": a1, "h1": h1, "a2": a2, "h2": h2, "y": y}

    def decode(self, z: np.ndarray, with_cache: bool = False):
        """Latent -> (raw blocks, projected rotations[, cache])."""
        single = z.ndim == 1
        cache = self._decode_forward(np.atleast_2d(z))
        raw = cache["y"].reshape(-1, self.n_joints, 3, 3)
        projected = rot.nearest_rotation(raw)
        if single:
            raw, projected = raw[0], projected[0]
        return (raw, projected, cache) if with_cache else (raw, projected)

    def decode_backward(self, cache: dict, d_raw: np.ndarray) -> np.ndarray:
        """Pull dE/d(raw blocks) back to dE/dz."""
        p = self.params
        single = d_raw.ndim == 3
        d_y = d_raw.reshape(1 if single else len(d_raw), -1)
        d_h2 = d_y @ p["out_w"].T
        d_a2 = d_h2 * _lrelu_grad(cache["a2"])
        d_h1 = d_a2 @ p["dec2_w"].T
        d_a1 = d_h1 * _lrelu_grad(cache["a1"])
        d_z = d_a1 @ p["dec1_w"].T
        return d_z[0] if single else d_z


def prior_energy(z: np.ndarray) -> tuple[float, np.ndarray]:
    """Quadratic latent penalty ‖z‖² with gradient."""
    z = np.asarray(z, dtype=np.float64)
    return float(z @ z), 2.0 * z


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _det3(m):
    return (
        m[..., 0, 0] * (m[..., 1, 1] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 1])
        - m[..., 0, 1] * (m[..., 1, 0] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 0])
        + m[..., 0, 2] * (m[..., 1, 0] * m[..., 2, 1] - m[..., 1, 1] * m[..., 2, 0])
    )


def _cofactor3(m):
    """d det(M) / dM for a stack of 3x3 matrices."""
    c = np.empty_like(m)
    c[..., 0, 0] = m[..., 1, 1] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 1]
    c[..., 0, 1] = m[..., 1, 2] * m[..., 2, 0] - m[..., 1, 0] * m[..., 2, 2]
    c[..., 0, 2] = m[..., 1, 0] * m[..., 2, 1] - m[..., 1, 1] * m[..., 2, 0]
    c[..., 1, 0] = m[..., 0, 2] * m[..., 2, 1] - m[..., 0, 1] * m[..., 2, 2]
    c[..., 1, 1] = m[..., 0, 0] * m[..., 2, 2] - m[..., 0, 2] * m[..., 2, 0]
    c[..., 1, 2] = m[..., 0, 1] * m[..., 2, 0] - m[..., 0, 0] * m[..., 2, 1]
    c[..., 2, 0] = m[..., 0, 1] * m[..., 1, 2] - m[..., 0, 2] * m[..., 1, 1]
    c[..., 2, 1] = m[..., 0, 2] * m[..., 1, 0] - m[..., 0, 0] * m[..., 1, 2]
    c[..., 2, 2] = m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]
    return c


def weight_norm(model: VposerModel) -> float:
    return float(sum(np.sum(v * v) for v in model.params.values()))


def vae_losses(
    rotmats: np.ndarray,
    raw_decoded: np.ndarray,
    mu: np.ndarray,
    log_sigma: np.ndarray,
    model: VposerModel,
    weights: VaeLossWeights = VaeLossWeights(),
) -> dict[str, float]:
    """All five loss terms plus the weighted total, averaged over the batch."""
    r = rotmats.reshape(-1, model.n_joints, 3, 3)
    r_hat = raw_decoded.reshape(-1, model.n_joints, 3, 3)
    mu2 = np.atleast_2d(mu)
    ls2 = np.atleast_2d(log_sigma)
    b = len(r)

    kl = float(np.sum(0.5 * (mu2 ** 2 + np.exp(2 * ls2) - 1.0 - 2 * ls2)) / b)
    rec = float(np.sum((r - r_hat) ** 2) / b)
    gram = np.einsum("bjik,bjlk->bjil", r_hat, r_hat) - np.eye(3)
    orth = float(np.sum(gram ** 2) / b)
    det1 = float(np.sum(np.abs(_det3(r_hat) - 1.0)) / b)
    reg = weight_norm(model)
    total = (weights.kl * kl + weights.rec * rec + weights.orth * orth
             + weights.det1 * det1 + weights.reg * reg)
    return {"total": total, "kl": kl, "rec": rec, "orth": orth, "det1": det1, "reg": reg}


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)      # per-epoch validation losses
    initial: dict = field(default_factory=dict)     # epoch-0 validation losses
    best_epoch: int = -1


def _training_step_grads(model, x, eps, weights):
    """Forward the full VAE and return (losses, grads dict) for one batch."""
    p = model.params
    b = len(x)

    a1 = x @ p["enc1_w"] + p["enc1_b"]
    h1 = _lrelu(a1)
    a2 = h1 @ p["enc2_w"] + p["enc2_b"]
    h2 = _lrelu(a2)
    mu = h2 @ p["mu_w"] + p["mu_b"]
    ls = h2 @ p["ls_w"] + p["ls_b"]
    sigma = np.exp(ls)
    z = mu + sigma * eps
    dec = model._decode_forward(z)
    y = dec["y"]

    r = x.reshape(b, model.n_joints, 3, 3)
    r_hat = y.reshape(b, model.n_joints, 3, 3)
    losses = vae_losses(r, r_hat, mu, ls, model, weights)

    # --- backward ---
    gram = np.einsum("bjik,bjlk->bjil", r_hat, r_hat) - np.eye(3)
    det = _det3(r_hat)
    d_rhat = (
        weights.rec * 2.0 * (r_hat - r)
        + weights.orth * 4.0 * np.einsum("bjik,bjkl->bjil", gram, r_hat)
        + weights.det1 * np.sign(det - 1.0)[..., None, None] * _cofactor3(r_hat)
    ) / b
    d_y = d_rhat.reshape(b, -1)

    grads = {}
    d_h2d = d_y @ p["out_w"].T
    grads["out_w"] = dec["h2"].T @ d_y
    grads["out_b"] = d_y.sum(axis=0)
    d_a2d = d_h2d * _lrelu_grad(dec["a2"])
    grads["dec2_w"] = dec["h1"].T @ d_a2d
    grads["dec2_b"] = d_a2d.sum(axis=0)
    d_h1d = d_a2d @ p["dec2_w"].T
    d_a1d = d_h1d * _lrelu_grad(dec["a1"])
    grads["dec1_w"] = z.T @ d_a1d
    grads["dec1_b"] = d_a1d.sum(axis=0)
    d_z = d_a1d @ p["dec1_w"].T

    d_mu = d_z + weights.kl * mu / b
    d_ls = d_z * eps * sigma + weights.kl * (sigma ** 2 - 1.0) / b

    grads["mu_w"] = h2.T @ d_mu
    grads["mu_b"] = d_mu.sum(axis=0)
    grads["ls_w"] = h2.T @ d_ls
    grads["ls_b"] = d_ls.sum(axis=0)
    d_h2 = d_mu @ p["mu_w"].T + d_ls @ p["ls_w"].T
    d_a2 = d_h2 * _lrelu_grad(a2)
    grads["enc2_w"] = h1.T @ d_a2
    grads["enc2_b"] = d_a2.sum(axis=0)
    d_h1 = d_a2 @ p["enc2_w"].T
    d_a1 = d_h1 * _lrelu_grad(a1)
    grads["enc1_w"] = x.T @ d_a1
    grads["enc1_b"] = d_a1.sum(axis=0)

    for name in grads:
        grads[name] += 2.0 * weights.reg * p[name]
    return losses, grads


def validation_losses(model, rotmats, weights=VaeLossWeights()) -> dict[str, float]:
    """Deterministic pass: the posterior mean stands in for the sample."""
    mu, ls = model.encode(rotmats)
    raw, _ = model.decode(mu)
    return vae_losses(rotmats, raw, mu, ls, model, weights)


def train_vposer(
    poses: np.ndarray,
    epochs: int = 50,
    batch_size: int = 256,
    seed: int = 0,
    weights: VaeLossWeights = VaeLossWeights(),
    learning_rate: float = 1e-3,
    val_fraction: float = 0.06,
    hidden: int = 512,
    latent_dim: int = LATENT_DIM,
) -> tuple[VposerModel, TrainHistory]:
    """Fit the VAE on a corpus of body poses given as (M, 63) axis-angle.

    Adam on minibatches; the best-validation-total checkpoint is returned.
    Raises :class:`VaeTrainingError` the moment any loss goes non-finite.
    """
    poses = np.asarray(poses, dtype=np.float64)
    if poses.ndim != 2 or len(poses) < 2:
        raise ValueError("need a (M, 63) corpus with at least 2 poses")
    n_joints = poses.shape[1] // 3
    rotmats = rot.rodrigues(poses.reshape(len(poses), n_joints, 3))

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(poses))
    n_val = max(1, int(round(val_fraction * len(poses))))
    val = rotmats[order[:n_val]]
    train = rotmats[order[n_val:]]
    x_train = train.reshape(len(train), -1)

    model = VposerModel.init_random(seed=seed, n_joints=n_joints,
                                    latent_dim=latent_dim, hidden=hidden)
    history = TrainHistory()
    history.initial = validation_losses(model, val, weights)

    adam_m = {k: np.zeros_like(v) for k, v in model.params.items()}
    adam_v = {k: np.zeros_like(v) for k, v in model.params.items()}
    beta1, beta2, eps_adam = 0.9, 0.999, 1e-8
    t = 0

    best = (np.inf, None)
    for epoch in range(epochs):
        epoch_order = rng.permutation(len(x_train))
        for start in range(0, len(x_train), batch_size):
            batch = x_train[epoch_order[start:start + batch_size]]
            eps = rng.standard_normal((len(batch), latent_dim))
            losses, grads = _training_step_grads(model, batch, eps, weights)
            if not np.isfinite(losses["total"]):
                raise VaeTrainingError(
                    f"non-finite loss at epoch {epoch}, batch offset {start}: {losses}")
            t += 1
            for name, g in grads.items():
                adam_m[name] = beta1 * adam_m[name] + (1 - beta1) * g
                adam_v[name] = beta2 * adam_v[name] + (1 - beta2) * g * g
                m_hat = adam_m[name] / (1 - beta1 ** t)
                v_hat = adam_v[name] / (1 - beta2 ** t)
                model.params[name] -= learning_rate * m_hat / (np.sqrt(v_hat) + eps_adam)

        val_losses = validation_losses(model, val, weights)
        history.epochs.append(val_losses)
        if val_losses["total"] < best[0]:
            best = (val_losses["total"], {k: v.copy() for k, v in model.params.items()})
            history.best_epoch = epoch

    if best[1] is not None:
        model.params = best[1]
    return model, history


def sample_body_poses(model: VposerModel, n: int, seed: int = 0) -> np.ndarray:
    """Draw z ~ N(0, I), decode, and return (n, J*3) axis-angle poses."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, model.latent_dim))
    _, projected = model.decode(z)
    return rot.rotation_to_axis_angle(projected).reshape(n, -1)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_vposer(model: VposerModel, path) -> None:
    save_container(path, dict(model.params), meta={
        "kind": "pose-prior-vae",
        "n_joints": model.n_joints,
        "latent_dim": model.latent_dim,
        "activation": f"leaky_relu_{_LEAK}",
    })


def load_vposer(path) -> VposerModel:
    arrays, meta = load_container(path)
    return VposerModel(arrays, n_joints=int(meta.get("n_joints", 21)),
                       latent_dim=int(meta.get("latent_dim", LATENT_DIM)))
