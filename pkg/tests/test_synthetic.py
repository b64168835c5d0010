import numpy as np
import pytest

from bodyfit import skeleton
from bodyfit.assets import N_KEYPOINT_SLOTS
from bodyfit.synthetic import build_synthetic_assets, sample_pose_corpus


@pytest.fixture(scope="module")
def assets():
    return build_synthetic_assets(seed=0)


def test_generator_is_deterministic():
    a = build_synthetic_assets(seed=7)
    b = build_synthetic_assets(seed=7)
    assert a.template.tobytes() == b.template.tobytes()
    assert a.shape_dirs.tobytes() == b.shape_dirs.tobytes()
    assert np.array_equal(a.faces, b.faces)
    c = build_synthetic_assets(seed=8)
    assert not np.array_equal(a.shape_dirs, c.shape_dirs)
    assert np.array_equal(a.template, c.template)  # geometry ignores the seed


def test_every_part_is_closed_and_outward(assets):
    regions = assets.triangle_regions
    for part in np.unique(regions):
        faces = assets.faces[regions == part]
        # Watertight: every directed edge is matched by its reverse.
        edges = {}
        for tri in faces:
            for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                edges[(a, b)] = edges.get((a, b), 0) + 1
        for (a, b), count in edges.items():
            assert count == 1
            assert edges.get((b, a)) == 1
        # Positive signed volume = consistently outward winding.
        tri = assets.template[faces]
        volume = np.sum(np.linalg.det(tri)) / 6.0
        assert volume > 0.0


def test_skin_weights_are_dyadic(assets):
    w = assets.skin_weights
    allowed = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
    assert np.all(np.isin(w, allowed))
    # Exact partition of unity, not just within tolerance.
    assert np.all(w.sum(axis=1) == 1.0)
    assert np.all((w > 0).sum(axis=1) <= 2)


def test_regressor_tracks_designed_skeleton(assets):
    names, parents, design = skeleton.build_joint_tables(5)
    assert list(assets.joint_names) == names
    assert np.array_equal(assets.parents, parents)
    joints = assets.joint_regressor @ assets.template
    # Ring-based regression lands near the designed joint, the residual being
    # the deliberate end clearance along the bone.
    assert np.max(np.linalg.norm(joints - design, axis=1)) < 0.04
    assert np.all(assets.joint_regressor.sum(axis=1) == 1.0)


def test_regressed_joints_mirror_left_right(assets):
    names = list(assets.joint_names)
    joints = assets.joint_regressor @ assets.template
    mirror = np.array([-1.0, 1.0, 1.0])
    for name in names:
        if name.startswith("left_"):
            other = names.index("right_" + name[5:])
            assert np.allclose(joints[names.index(name)] * mirror, joints[other], atol=1e-12)


def test_shape_basis_is_orthonormal(assets):
    gram = assets.shape_dirs.T @ assets.shape_dirs
    assert np.max(np.abs(gram - np.eye(assets.n_shape))) < 1e-10


def test_expression_basis_lives_on_the_head(assets):
    gram = assets.expr_dirs.T @ assets.expr_dirs
    assert np.max(np.abs(gram - np.eye(assets.n_expr))) < 1e-10
    head_part = len(assets.meta["part_names"]) - 1
    head_tris = assets.faces[assets.triangle_regions == head_part]
    head_verts = np.unique(head_tris)
    moved = np.unique(np.nonzero(assets.expr_dirs)[0] // 3)
    assert set(moved) <= set(head_verts)


def test_landmark_tables_cover_every_slot(assets):
    slots = np.concatenate([assets.landmark_joints[:, 0], assets.landmark_verts[:, 0]])
    assert len(slots) == N_KEYPOINT_SLOTS
    assert np.array_equal(np.sort(slots), np.arange(N_KEYPOINT_SLOTS))


def test_fingertip_landmarks_sit_on_fingertips(assets):
    vert_of = dict(map(tuple, assets.landmark_verts))
    for side in ("left", "right"):
        base = skeleton.hand_slot_base(side)
        for finger in range(5):
            slot = base + 1 + 4 * finger + 3
            tip = assets.template[vert_of[slot]]
            assert np.linalg.norm(tip - skeleton.fingertip_target(side, finger)) < 0.01


def test_face_landmarks_sit_on_the_head_sphere(assets):
    vert_of = dict(map(tuple, assets.landmark_verts))
    for slot in range(67, 137):
        p = assets.template[vert_of[slot]]
        assert abs(np.linalg.norm(p - skeleton.HEAD_CENTER) - skeleton.HEAD_RADIUS) < 1e-9


def test_eye_keypoint_slots_use_eye_joints(assets):
    joint_of = dict(map(tuple, assets.landmark_joints))
    names = list(assets.joint_names)
    assert joint_of[15] == names.index("right_eye")
    assert joint_of[16] == names.index("left_eye")
    assert np.array_equal(np.sort(assets.eye_joints),
                          np.sort([joint_of[15], joint_of[16]]))


def test_reduced_finger_count():
    a = build_synthetic_assets(seed=0, fingers=3)
    assert a.n_joints == 25 + 6 * 3
    assert a.hand_pca_left.shape[0] == 9 * 3
    a.validate()
    slots = np.concatenate([a.landmark_joints[:, 0], a.landmark_verts[:, 0]])
    # The two missing fingers leave 4 slots unmapped per finger per hand.
    assert len(slots) == N_KEYPOINT_SLOTS - 2 * 2 * 4


def test_detail_knob_scales_vertex_count(assets):
    small = build_synthetic_assets(seed=0, detail=0.75)
    assert small.n_vertices < assets.n_vertices
    small.validate()


def test_pose_corpus_respects_joint_limits():
    poses = sample_pose_corpus(500, seed=11)
    assert poses.shape == (500, 63)
    limits = skeleton.body_joint_limits().reshape(63, 2)
    assert np.all(poses >= limits[:, 0]) and np.all(poses <= limits[:, 1])


def test_pose_corpus_is_seeded_and_non_degenerate():
    a = sample_pose_corpus(64, seed=1)
    b = sample_pose_corpus(64, seed=1)
    c = sample_pose_corpus(64, seed=2)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    # Every coordinate actually varies and rows are distinct poses.
    assert np.all(a.std(axis=0) > 1e-3)
    assert len(np.unique(a, axis=0)) == 64
