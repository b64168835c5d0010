"""Axis-angle / rotation-matrix utilities with analytic derivatives.

All functions accept arbitrary leading batch dimensions and operate in
float64.  The derivative helpers return vector-Jacobian products so callers
can chain them without materialising full Jacobians.
"""

from __future__ import annotations

import numpy as np

# Below this angle the closed forms are replaced by their series expansions.
SMALL_ANGLE = 1e-8
_JACOBIAN_SERIES_CUTOFF = 1e-4


def skew(v: np.ndarray) -> np.ndarray:
    """Map vectors (..., 3) to antisymmetric matrices (..., 3, 3)."""
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3), dtype=np.float64)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    out[..., 0, 1] = -z
    out[..., 0, 2] = y
    out[..., 1, 0] = z
    out[..., 1, 2] = -x
    out[..., 2, 0] = -y
    out[..., 2, 1] = x
    return out


def axial(m: np.ndarray) -> np.ndarray:
    """Inverse of :func:`skew` applied to the antisymmetric part of ``m``."""
    m = np.asarray(m, dtype=np.float64)
    return np.stack(
        [
            m[..., 2, 1] - m[..., 1, 2],
            m[..., 0, 2] - m[..., 2, 0],
            m[..., 1, 0] - m[..., 0, 1],
        ],
        axis=-1,
    ) * 0.5


def rodrigues(axis_angle: np.ndarray) -> np.ndarray:
    """Exponential map from axis-angle vectors (..., 3) to rotation matrices.

    Uses the half-angle form for the cosine coefficient so the map stays
    accurate near the identity, and an explicit series branch below
    ``SMALL_ANGLE`` so the function is smooth through zero.

    Raises:
        ValueError: if any input component is non-finite.
    """
    aa = np.asarray(axis_angle, dtype=np.float64)
    if aa.shape[-1] != 3:
        raise ValueError(f"axis-angle vectors must have 3 components, got shape {aa.shape}")
    if not np.all(np.isfinite(aa)):
        raise ValueError("axis-angle input contains non-finite values")

    theta = np.linalg.norm(aa, axis=-1)
    w = skew(aa)
    w2 = w @ w
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)

    # sin(t)/t and (1 - cos t)/t^2 = 0.5 * (sin(t/2) / (t/2))^2
    sinc = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    half = safe / 2.0
    cosc = np.where(small, 0.5 - theta**2 / 24.0, 0.5 * (np.sin(half) / half) ** 2)

    eye = np.broadcast_to(np.eye(3), w.shape)
    return eye + sinc[..., None, None] * w + cosc[..., None, None] * w2


def rodrigues_jacobian(axis_angle: np.ndarray) -> np.ndarray:
    """Derivative of :func:`rodrigues`: output (..., 3, 3, 3).

    ``out[..., i, :, :]`` is dR/d(omega_i).  The exact expression
    dR/dw_i = (w_i [w]x + [w x ((I - R) e_i)]x) / |w|^2 . R
    is replaced by its second-order series near zero where it loses digits.
    """
    aa = np.asarray(axis_angle, dtype=np.float64)
    theta2 = np.einsum("...i,...i->...", aa, aa)
    small = theta2 < _JACOBIAN_SERIES_CUTOFF**2

    r = rodrigues(aa)
    w = skew(aa)
    eye = np.broadcast_to(np.eye(3), r.shape)

    # Exact branch.
    imr = eye - r  # (..., 3, 3); columns (I - R) e_i
    cross = np.cross(aa[..., None, :], np.swapaxes(imr, -1, -2))  # (..., 3(i), 3)
    terms = aa[..., :, None, None] * w[..., None, :, :] + skew(cross)
    denom = np.where(small, 1.0, theta2)
    exact = (terms @ r[..., None, :, :]) / denom[..., None, None, None]

    # Series branch: dR/dw_i ~ E_i + (E_i W + W E_i) / 2 with E_i = skew(e_i).
    basis = skew(np.eye(3))  # (3, 3, 3)
    series = np.broadcast_to(basis, aa.shape[:-1] + (3, 3, 3)).copy()
    series = series + 0.5 * (
        np.einsum("ijk,...kl->...ijl", basis, w) + np.einsum("...jk,ikl->...ijl", w, basis)
    )
    return np.where(small[..., None, None, None], series, exact)


def rotation_to_axis_angle(r: np.ndarray) -> np.ndarray:
    """Log map from rotation matrices (..., 3, 3) to axis-angle (..., 3)."""
    r = np.asarray(r, dtype=np.float64)
    batch = r.shape[:-2]
    rf = r.reshape((-1, 3, 3))

    s = axial(rf)  # sin(theta) * axis
    sin_norm = np.linalg.norm(s, axis=-1)
    cos = (np.einsum("bii->b", rf) - 1.0) / 2.0
    theta = np.arctan2(sin_norm, np.clip(cos, -1.0, 1.0))

    generic = sin_norm > 1e-7
    # Near the identity theta/sin(theta) -> 1 to within O(theta^2).
    scale = np.where(generic, theta / np.where(generic, sin_norm, 1.0), 1.0)
    out = s * scale[:, None]

    # theta ~ pi: the antisymmetric part vanishes; recover the axis from the
    # diagonal of (R + I) and fix relative signs with the off-diagonals.
    for i in np.nonzero(~generic & (cos < 0.0))[0]:
        b = (rf[i] + rf[i].T) / 2.0
        diag = np.clip((np.diag(b) + 1.0) / 2.0, 0.0, None)
        axis = np.sqrt(diag)
        k = int(np.argmax(diag))
        for j in range(3):
            if j != k and b[k, j] < 0.0:
                axis[j] = -axis[j]
        norm = np.linalg.norm(axis)
        if norm > 0.0:
            out[i] = axis / norm * theta[i]
    return out.reshape(batch + (3,))


def nearest_rotation(m: np.ndarray) -> np.ndarray:
    """Project matrices (..., 3, 3) to the closest proper rotation (Frobenius)."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=np.float64))
    sign = np.where(np.linalg.det(u @ vt) < 0.0, -1.0, 1.0)
    u = u.copy()
    u[..., :, 2] *= sign[..., None]
    return u @ vt


def nearest_rotation_vjp(m: np.ndarray, r: np.ndarray, d_r: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of :func:`nearest_rotation`.

    Given the projection ``r`` of ``m`` and an upstream gradient ``d_r``
    (only its tangential part matters), returns ``dE/dm``.  Derivation: with
    the polar form m = r s (s symmetric), a perturbation dm induces
    dr = r [h]x where ((tr s) I - s) h equals the axial part of r^T dm.
    """
    m = np.asarray(m, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    d_r = np.asarray(d_r, dtype=np.float64)

    s = np.swapaxes(r, -1, -2) @ m
    s = (s + np.swapaxes(s, -1, -2)) / 2.0
    tr = np.einsum("...ii->...", s)
    lmat = tr[..., None, None] * np.eye(3) - s

    b = np.swapaxes(r, -1, -2) @ d_r
    g = 2.0 * axial(b)  # axial() halves the antisymmetric part
    try:
        h = np.linalg.solve(lmat, g[..., None])[..., 0]
    except np.linalg.LinAlgError:
        # rank-deficient input (e.g. the zero matrix): the projection is not
        # differentiable there; take the minimum-norm subgradient instead
        h = np.einsum("...ij,...j->...i", np.linalg.pinv(lmat), g)
    return r @ skew(h)


def rotation_log_vjp(r: np.ndarray, d_omega: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of :func:`rotation_to_axis_angle`.

    Returns an ambient-space representative of dE/dR whose tangential part is
    exact; compose it with a projection VJP (or the model chain) that only
    consumes tangential components.
    """
    r = np.asarray(r, dtype=np.float64)
    d_omega = np.asarray(d_omega, dtype=np.float64)
    omega = rotation_to_axis_angle(r)
    theta2 = np.einsum("...i,...i->...", omega, omega)
    theta = np.sqrt(theta2)

    small = theta < 1e-3
    safe2 = np.where(small, 1.0, theta2)
    safe = np.sqrt(safe2)
    k_exact = 1.0 / safe2 - (1.0 + np.cos(safe)) / (2.0 * safe * np.sin(np.where(small, 1.0, safe)))
    k = np.where(small, 1.0 / 12.0 + theta2 / 720.0, k_exact)

    w = skew(omega)
    jl_inv = (
        np.broadcast_to(np.eye(3), w.shape)
        - 0.5 * w
        + k[..., None, None] * (w @ w)
    )
    h = np.einsum("...ji,...j->...i", jl_inv, d_omega)  # Jl^{-T} g
    return 0.5 * (skew(h) @ r)
