import dataclasses
import json

import numpy as np
import pytest

from bodyfit.assets import AssetError, ModelAssets, load_container, save_container
from bodyfit.synthetic import build_synthetic_assets


@pytest.fixture(scope="module")
def assets():
    return build_synthetic_assets(seed=0)


# ---------------------------------------------------------------------------
# Raw container
# ---------------------------------------------------------------------------

def test_container_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {
        "a_f64": rng.standard_normal((7, 3)),
        "b_f32": rng.standard_normal((4, 4, 2)).astype(np.float32),
        "c_i32": rng.integers(-5, 5, size=(9,)).astype(np.int32),
        "d_i64": rng.integers(0, 100, size=(2, 5)),
        "empty": np.zeros((0, 2), dtype=np.int64),
    }
    meta = {"note": "roundtrip", "nested": {"x": [1, 2, 3]}}
    save_container(tmp_path / "c", arrays, meta)
    back, meta_back = load_container(tmp_path / "c")

    assert meta_back == meta
    assert set(back) == set(arrays)
    for name, arr in arrays.items():
        assert back[name].dtype == arr.dtype
        assert back[name].shape == arr.shape
        assert back[name].tobytes() == arr.tobytes()


def test_container_rejects_bad_array_names(tmp_path):
    with pytest.raises(AssetError):
        save_container(tmp_path / "c", {"bad name": np.zeros(3)})
    with pytest.raises(AssetError):
        save_container(tmp_path / "c", {"1leading": np.zeros(3)})


def test_container_rejects_unsupported_dtype(tmp_path):
    with pytest.raises(AssetError):
        save_container(tmp_path / "c", {"z": np.zeros(3, dtype=np.complex128)})


def test_load_missing_manifest(tmp_path):
    with pytest.raises(AssetError):
        load_container(tmp_path)


def test_load_rejects_unknown_format(tmp_path):
    save_container(tmp_path / "c", {"a": np.zeros(2)})
    man = tmp_path / "c" / "manifest.json"
    doc = json.loads(man.read_text())
    doc["format"] = "something-else"
    man.write_text(json.dumps(doc))
    with pytest.raises(AssetError):
        load_container(tmp_path / "c")


def test_load_rejects_truncated_payload(tmp_path):
    save_container(tmp_path / "c", {"a": np.arange(10.0)})
    payload = tmp_path / "c" / "a.bin"
    payload.write_bytes(payload.read_bytes()[:-8])
    with pytest.raises(AssetError):
        load_container(tmp_path / "c")


# ---------------------------------------------------------------------------
# ModelAssets validation
# ---------------------------------------------------------------------------

def test_validate_accepts_generated_assets(assets):
    assets.validate()


def test_validate_rejects_broken_weight_rows(assets):
    w = assets.skin_weights.copy()
    w[5, 0] += 0.01
    bad = dataclasses.replace(assets, skin_weights=w)
    with pytest.raises(AssetError, match="sum to 1"):
        bad.validate()


def test_validate_rejects_negative_weights(assets):
    w = assets.skin_weights.copy()
    w[3] = 0.0
    w[3, 0] = -0.25
    w[3, 1] = 1.25  # row still sums to 1 so only the sign check can fire
    bad = dataclasses.replace(assets, skin_weights=w)
    with pytest.raises(AssetError, match="non-negative"):
        bad.validate()


def test_validate_rejects_parent_after_child(assets):
    p = assets.parents.copy()
    p[1] = 2
    bad = dataclasses.replace(assets, parents=p)
    with pytest.raises(AssetError, match="parent"):
        bad.validate()


def test_validate_rejects_out_of_range_faces(assets):
    f = assets.faces.copy()
    f[0, 0] = assets.n_vertices
    bad = dataclasses.replace(assets, faces=f)
    with pytest.raises(AssetError, match="face indices"):
        bad.validate()


def test_validate_enforces_orthonormal_flag(assets):
    dirs = assets.shape_dirs.copy()
    dirs[:, 0] *= 2.0
    bad = dataclasses.replace(assets, shape_dirs=dirs)
    with pytest.raises(AssetError, match="orthonormal"):
        bad.validate()


def test_validate_enforces_convex_regressor_flag(assets):
    reg = assets.joint_regressor.copy()
    reg[2] *= -1.0
    bad = dataclasses.replace(assets, joint_regressor=reg)
    with pytest.raises(AssetError, match="convex"):
        bad.validate()


def test_validate_rejects_bad_landmark_slots(assets):
    table = assets.landmark_verts.copy()
    table[0, 0] = 137
    bad = dataclasses.replace(assets, landmark_verts=table)
    with pytest.raises(AssetError, match="slot"):
        bad.validate()


# ---------------------------------------------------------------------------
# Full-model round trip
# ---------------------------------------------------------------------------

def test_model_round_trip_float32(assets, tmp_path):
    assets.to_dir(tmp_path / "model")
    back = ModelAssets.from_dir(tmp_path / "model")

    assert back.n_vertices == assets.n_vertices
    assert back.n_joints == assets.n_joints
    assert np.array_equal(back.faces, assets.faces)
    assert np.array_equal(back.parents, assets.parents)
    # float32 storage rounds coordinates but keeps the dyadic weights exact,
    # so the partition-of-unity invariant survives without slack.
    assert np.max(np.abs(back.skin_weights.sum(axis=1) - 1.0)) == 0.0
    assert np.array_equal(back.skin_weights, assets.skin_weights)
    assert np.max(np.abs(back.template - assets.template)) < 1e-6
    assert back.joint_names == assets.joint_names
    assert back.jaw_joint == assets.jaw_joint
    assert back.bend_joints == assets.bend_joints
    assert back.gender_tag == assets.gender_tag
    assert back.flags["orthonormal_bases"]
    assert np.array_equal(back.landmark_joints, assets.landmark_joints)
    assert np.array_equal(back.landmark_verts, assets.landmark_verts)
    assert np.array_equal(back.hand_joint_ids_left, assets.hand_joint_ids_left)
    assert np.array_equal(back.torso_joints, assets.torso_joints)


def test_model_round_trip_float64_is_bit_exact(assets, tmp_path):
    assets.to_dir(tmp_path / "model", dtype="float64")
    back = ModelAssets.from_dir(tmp_path / "model")
    for name in ("template", "skin_weights", "joint_regressor",
                 "shape_dirs", "expr_dirs", "pose_dirs"):
        assert np.array_equal(getattr(back, name), getattr(assets, name)), name


def test_from_dir_reports_missing_arrays(assets, tmp_path):
    assets.to_dir(tmp_path / "model")
    (tmp_path / "model" / "pose_dirs.bin").unlink()
    man = tmp_path / "model" / "manifest.json"
    doc = json.loads(man.read_text())
    del doc["arrays"]["pose_dirs"]
    man.write_text(json.dumps(doc))
    with pytest.raises(AssetError, match="pose_dirs"):
        ModelAssets.from_dir(tmp_path / "model")
