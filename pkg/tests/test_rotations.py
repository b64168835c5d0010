import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bodyfit import rotations


# ---------------------------------------------------------------------------
# Oracle: build the same rotation through unit quaternions.  Kept deliberately
# independent of the production code path (no shared helpers).
# ---------------------------------------------------------------------------

def quaternion_rotation(axis_angle):
    axis_angle = np.asarray(axis_angle, dtype=np.float64)
    theta = np.linalg.norm(axis_angle)
    if theta < 1e-12:
        w, x, y, z = 1.0, 0.0, 0.0, 0.0
    else:
        axis = axis_angle / theta
        w = np.cos(theta / 2.0)
        x, y, z = np.sin(theta / 2.0) * axis
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


finite_components = st.floats(-10.0, 10.0, allow_nan=False, allow_infinity=False)


@settings(max_examples=200, deadline=None)
@given(st.tuples(finite_components, finite_components, finite_components))
def test_rodrigues_matches_quaternion_oracle(omega):
    omega = np.array(omega)
    r = rotations.rodrigues(omega)
    assert np.allclose(r, quaternion_rotation(omega), atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.tuples(finite_components, finite_components, finite_components))
def test_rodrigues_is_proper_rotation(omega):
    r = rotations.rodrigues(np.array(omega))
    assert np.max(np.abs(r @ r.T - np.eye(3))) < 1e-10
    assert abs(np.linalg.det(r) - 1.0) < 1e-10


def test_rodrigues_zero_is_identity():
    assert np.array_equal(rotations.rodrigues(np.zeros(3)), np.eye(3))


def test_rodrigues_small_angle_branch_is_smooth():
    # The series branch and the closed form must agree around the cutoff.
    for mag in [1e-10, 5e-9, 1e-8, 2e-8, 1e-7, 1e-5]:
        omega = np.array([0.3, -0.5, 0.8]) * mag
        r = rotations.rodrigues(omega)
        assert np.allclose(r, quaternion_rotation(omega), atol=1e-14)


def test_rodrigues_rejects_non_finite():
    with pytest.raises(ValueError):
        rotations.rodrigues(np.array([np.nan, 0.0, 0.0]))
    with pytest.raises(ValueError):
        rotations.rodrigues(np.array([np.inf, 0.0, 1.0]))


def test_rodrigues_batched_matches_scalar():
    rng = np.random.default_rng(0)
    aa = rng.normal(size=(4, 5, 3))
    batched = rotations.rodrigues(aa)
    for i in range(4):
        for j in range(5):
            assert np.allclose(batched[i, j], rotations.rodrigues(aa[i, j]), atol=1e-15)


def test_rodrigues_jacobian_matches_finite_differences():
    rng = np.random.default_rng(1)
    h = 1e-6
    mags = [2.0, 1.0, 0.3, 1e-2, 1e-3, 2e-4, 1e-4, 5e-5, 1e-6, 1e-9, 0.0]
    for mag in mags:
        omega = rng.normal(size=3)
        omega = omega / np.linalg.norm(omega) * mag
        jac = rotations.rodrigues_jacobian(omega)
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            fd = (rotations.rodrigues(omega + e) - rotations.rodrigues(omega - e)) / (2 * h)
            assert np.max(np.abs(jac[i] - fd)) < 1e-7, f"mag={mag} comp={i}"


def test_rodrigues_jacobian_batched_matches_scalar():
    rng = np.random.default_rng(2)
    aa = rng.normal(size=(6, 3))
    batched = rotations.rodrigues_jacobian(aa)
    for i in range(6):
        assert np.allclose(batched[i], rotations.rodrigues_jacobian(aa[i]), atol=1e-15)


def test_log_map_round_trip():
    rng = np.random.default_rng(3)
    for mag in [0.5, 1.5, 2.5, 3.0, np.pi - 1e-4, 1e-5, 1e-9]:
        axis = rng.normal(size=3)
        omega = axis / np.linalg.norm(axis) * mag
        back = rotations.rotation_to_axis_angle(rotations.rodrigues(omega))
        assert np.allclose(back, omega, atol=1e-6), f"mag={mag}"


def test_log_map_near_pi():
    for axis in [np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]),
                 np.array([0.6, -0.8, 0.0]), np.array([0.36, 0.48, 0.8])]:
        omega = axis * np.pi
        back = rotations.rotation_to_axis_angle(rotations.rodrigues(omega))
        # Sign of the axis is ambiguous at exactly pi.
        assert min(np.linalg.norm(back - omega), np.linalg.norm(back + omega)) < 1e-6


def test_nearest_rotation_projects_and_fixes_reflections():
    rng = np.random.default_rng(4)
    m = rng.normal(size=(8, 3, 3))
    r = rotations.nearest_rotation(m)
    eye = np.eye(3)
    for i in range(8):
        assert np.max(np.abs(r[i] @ r[i].T - eye)) < 1e-10
        assert abs(np.linalg.det(r[i]) - 1.0) < 1e-10
    # A rotation is its own projection.
    r0 = rotations.rodrigues(np.array([0.3, 0.4, -0.2]))
    assert np.allclose(rotations.nearest_rotation(r0), r0, atol=1e-12)
    # Reflections must map to proper rotations.
    refl = np.diag([1.0, 1.0, -1.0])
    proj = rotations.nearest_rotation(refl)
    assert abs(np.linalg.det(proj) - 1.0) < 1e-10


def test_nearest_rotation_vjp_matches_finite_differences():
    rng = np.random.default_rng(5)
    h = 1e-7
    for trial in range(10):
        m = rng.normal(size=(3, 3)) * 0.8 + np.eye(3)  # generic, near-rotation-ish
        g = rng.normal(size=(3, 3))
        r = rotations.nearest_rotation(m)
        analytic = rotations.nearest_rotation_vjp(m, r, g)
        fd = np.zeros((3, 3))
        for i in range(3):
            for j in range(3):
                dm = np.zeros((3, 3))
                dm[i, j] = h
                fp = np.sum(g * rotations.nearest_rotation(m + dm))
                fm = np.sum(g * rotations.nearest_rotation(m - dm))
                fd[i, j] = (fp - fm) / (2 * h)
        assert np.max(np.abs(analytic - fd)) < 1e-5, f"trial={trial}"


def test_rotation_log_vjp_composes_with_projection():
    # E(m) = <g, log(polar(m))>; the ambient finite difference on m must match
    # the composed analytic chain.
    rng = np.random.default_rng(6)
    h = 1e-7
    for trial in range(10):
        omega = rng.normal(size=3)
        omega *= rng.uniform(0.1, 2.5) / np.linalg.norm(omega)
        m = rotations.rodrigues(omega) + 0.05 * rng.normal(size=(3, 3))
        g = rng.normal(size=3)

        r = rotations.nearest_rotation(m)
        d_r = rotations.rotation_log_vjp(r, g)
        analytic = rotations.nearest_rotation_vjp(m, r, d_r)

        fd = np.zeros((3, 3))
        for i in range(3):
            for j in range(3):
                dm = np.zeros((3, 3))
                dm[i, j] = h
                fp = g @ rotations.rotation_to_axis_angle(rotations.nearest_rotation(m + dm))
                fm = g @ rotations.rotation_to_axis_angle(rotations.nearest_rotation(m - dm))
                fd[i, j] = (fp - fm) / (2 * h)
        assert np.max(np.abs(analytic - fd)) < 1e-5, f"trial={trial}"


def test_skew_axial_round_trip():
    rng = np.random.default_rng(7)
    v = rng.normal(size=(5, 3))
    assert np.allclose(rotations.axial(rotations.skew(v)), v, atol=1e-15)
