"""Model asset bundle and its on-disk container format.

A container is a directory with a ``manifest.json`` describing every array
(name, shape, dtype) plus free-form JSON metadata, and one raw little-endian
row-major binary file per array.  Round trips are bit exact.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CONTAINER_FORMAT = "array-container/v1"
MANIFEST_NAME = "manifest.json"

_DTYPES = {
    "float32": "<f4",
    "float64": "<f8",
    "int32": "<i4",
    "int64": "<i8",
}
_NAME_RE = re.compile(r"^[A-Za-z][A-Za-z0-9_]*$")


class AssetError(ValueError):
    """Raised for malformed containers or inconsistent model assets."""


def save_container(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write ``arrays`` and ``meta`` to directory ``path``.

    Array dtypes must be one of float32/float64/int32/int64; data is stored
    little-endian, row-major, one ``<name>.bin`` file per array.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        if not _NAME_RE.match(name):
            raise AssetError(f"invalid array name {name!r}")
        if arr.dtype.name not in _DTYPES:
            raise AssetError(f"array {name!r} has unsupported dtype {arr.dtype.name}")
        data = np.ascontiguousarray(arr).astype(_DTYPES[arr.dtype.name], copy=False)
        filename = f"{name}.bin"
        (path / filename).write_bytes(data.tobytes())
        entries[name] = {
            "dtype": arr.dtype.name,
            "shape": list(arr.shape),
            "file": filename,
        }
    manifest = {
        "format": CONTAINER_FORMAT,
        "arrays": entries,
        "meta": meta if meta is not None else {},
    }
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    (path / MANIFEST_NAME).write_text(text, encoding="utf-8")


def load_container(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a container directory back into ``(arrays, meta)``."""
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.is_file():
        raise AssetError(f"no {MANIFEST_NAME} under {path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise AssetError(f"unreadable manifest in {path}: {exc}") from exc
    if manifest.get("format") != CONTAINER_FORMAT:
        raise AssetError(f"unknown container format {manifest.get('format')!r}")

    arrays = {}
    for name, entry in manifest.get("arrays", {}).items():
        dtype_name = entry.get("dtype")
        if dtype_name not in _DTYPES:
            raise AssetError(f"array {name!r} has unsupported dtype {dtype_name!r}")
        shape = tuple(int(s) for s in entry["shape"])
        raw = (path / entry["file"]).read_bytes()
        dtype = np.dtype(_DTYPES[dtype_name])
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if len(raw) != expected:
            raise AssetError(
                f"array {name!r}: file holds {len(raw)} bytes, manifest implies {expected}"
            )
        arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return arrays, manifest.get("meta", {})


# ---------------------------------------------------------------------------
# Model assets
# ---------------------------------------------------------------------------

# Slot layout of the keypoint vector the fitter consumes: 25 body points,
# 21 per hand, 70 face points.
N_BODY_SLOTS = 25
N_HAND_SLOTS = 21
N_FACE_SLOTS = 70
N_KEYPOINT_SLOTS = N_BODY_SLOTS + 2 * N_HAND_SLOTS + N_FACE_SLOTS

_MODEL_ARRAYS = (
    "template",
    "faces",
    "skin_weights",
    "joint_regressor",
    "parents",
    "shape_dirs",
    "expr_dirs",
    "pose_dirs",
    "hand_pca_left",
    "hand_pca_right",
)


@dataclass
class ModelAssets:
    """Arrays plus skeleton semantics for one body model instance.

    Float arrays are converted to float64 at construction so downstream
    numerics are uniform regardless of on-disk precision.
    """

    template: np.ndarray          # (N, 3) rest vertices
    faces: np.ndarray             # (F, 3) int triangle indices
    skin_weights: np.ndarray      # (N, K+1), rows sum to one
    joint_regressor: np.ndarray   # (K+1, N), joints from shaped vertices
    parents: np.ndarray           # (K+1,), parents[0] == -1
    shape_dirs: np.ndarray        # (3N, S)
    expr_dirs: np.ndarray         # (3N, E)
    pose_dirs: np.ndarray         # (3N, 9K)
    hand_pca_left: np.ndarray     # (3*finger joints, H)
    hand_pca_right: np.ndarray
    hand_mean_left: np.ndarray | None = None
    hand_mean_right: np.ndarray | None = None
    # Slot tables: rows of (keypoint slot, joint index) / (slot, vertex index).
    landmark_joints: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    landmark_verts: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    triangle_regions: np.ndarray | None = None   # (F,) part label per triangle
    contact_mask_pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    joint_names: list[str] | None = None
    body_joint_ids: np.ndarray | None = None     # the 21 articulated body joints
    jaw_joint: int | None = None
    eye_joints: np.ndarray | None = None         # (2,)
    hand_joint_ids_left: np.ndarray | None = None
    hand_joint_ids_right: np.ndarray | None = None
    bend_joints: dict[int, tuple[int, float]] | None = None  # joint -> (axis, sign)
    torso_joints: np.ndarray | None = None       # (l_sh, r_sh, l_hip, r_hip)
    gender_tag: str = "neutral"
    flags: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.template = np.asarray(self.template, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.skin_weights = np.asarray(self.skin_weights, dtype=np.float64)
        self.joint_regressor = np.asarray(self.joint_regressor, dtype=np.float64)
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.shape_dirs = np.asarray(self.shape_dirs, dtype=np.float64)
        self.expr_dirs = np.asarray(self.expr_dirs, dtype=np.float64)
        self.pose_dirs = np.asarray(self.pose_dirs, dtype=np.float64)
        self.hand_pca_left = np.asarray(self.hand_pca_left, dtype=np.float64)
        self.hand_pca_right = np.asarray(self.hand_pca_right, dtype=np.float64)
        if self.hand_mean_left is not None:
            self.hand_mean_left = np.asarray(self.hand_mean_left, dtype=np.float64)
        if self.hand_mean_right is not None:
            self.hand_mean_right = np.asarray(self.hand_mean_right, dtype=np.float64)
        self.landmark_joints = np.asarray(self.landmark_joints, dtype=np.int64).reshape(-1, 2)
        self.landmark_verts = np.asarray(self.landmark_verts, dtype=np.int64).reshape(-1, 2)
        self.contact_mask_pairs = np.asarray(self.contact_mask_pairs, dtype=np.int64).reshape(-1, 2)
        if self.triangle_regions is not None:
            self.triangle_regions = np.asarray(self.triangle_regions, dtype=np.int64)
        for name in ("body_joint_ids", "eye_joints", "hand_joint_ids_left",
                     "hand_joint_ids_right", "torso_joints"):
            val = getattr(self, name)
            if val is not None:
                setattr(self, name, np.asarray(val, dtype=np.int64))

    # -- sizes ------------------------------------------------------------
    @property
    def n_vertices(self) -> int:
        return self.template.shape[0]

    @property
    def n_joints(self) -> int:
        """Total joint count including the root (K + 1)."""
        return self.parents.shape[0]

    @property
    def n_shape(self) -> int:
        return self.shape_dirs.shape[1]

    @property
    def n_expr(self) -> int:
        return self.expr_dirs.shape[1]

    @property
    def n_hand_coeffs(self) -> int:
        """Per-side PCA coefficient count."""
        return self.hand_pca_left.shape[1]

    # -- validation --------------------------------------------------------
    def validate(self) -> None:
        n, k1 = self.n_vertices, self.n_joints
        if self.template.shape != (n, 3) or not np.all(np.isfinite(self.template)):
            raise AssetError("template must be a finite (N, 3) array")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise AssetError("faces must be (F, 3)")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= n):
            raise AssetError("face indices out of vertex range")

        if self.skin_weights.shape != (n, k1):
            raise AssetError(f"skin_weights must be (N, K+1) = ({n}, {k1})")
        if np.any(self.skin_weights < -1e-9):
            raise AssetError("skin_weights must be non-negative")
        row_err = np.max(np.abs(self.skin_weights.sum(axis=1) - 1.0))
        if row_err > 1e-6:
            raise AssetError(f"skin_weights rows must sum to 1 (max error {row_err:.3e})")

        if self.parents[0] != -1:
            raise AssetError("parents[0] must be -1 (root)")
        for i in range(1, k1):
            if not 0 <= self.parents[i] < i:
                raise AssetError(f"parents[{i}]={self.parents[i]} breaks the parent<child ordering")

        if self.joint_regressor.shape != (k1, n):
            raise AssetError(f"joint_regressor must be (K+1, N) = ({k1}, {n})")
        if self.flags.get("joint_regressor_convex"):
            if np.any(self.joint_regressor < -1e-9):
                raise AssetError("joint_regressor flagged convex but has negative entries")
            err = np.max(np.abs(self.joint_regressor.sum(axis=1) - 1.0))
            if err > 1e-6:
                raise AssetError(f"joint_regressor flagged convex but rows sum off by {err:.3e}")

        for name, dirs in (("shape_dirs", self.shape_dirs), ("expr_dirs", self.expr_dirs)):
            if dirs.shape[0] != 3 * n:
                raise AssetError(f"{name} must have 3N rows")
            if self.flags.get("orthonormal_bases") and dirs.shape[1]:
                gram = dirs.T @ dirs
                err = np.max(np.abs(gram - np.eye(dirs.shape[1])))
                if err > 1e-4:
                    raise AssetError(f"{name} flagged orthonormal but Gram error is {err:.3e}")
        if self.pose_dirs.shape != (3 * n, 9 * (k1 - 1)):
            raise AssetError("pose_dirs must be (3N, 9K)")

        for side, pca, mean, ids in (
            ("left", self.hand_pca_left, self.hand_mean_left, self.hand_joint_ids_left),
            ("right", self.hand_pca_right, self.hand_mean_right, self.hand_joint_ids_right),
        ):
            if ids is not None and pca.shape[0] != 3 * len(ids):
                raise AssetError(f"hand_pca_{side} rows must equal 3x finger joint count")
            if mean is not None and mean.shape != (pca.shape[0],):
                raise AssetError(f"hand_mean_{side} must match hand_pca_{side} rows")

        for table, limit, what in (
            (self.landmark_joints, k1, "joint"),
            (self.landmark_verts, n, "vertex"),
        ):
            if table.size:
                if table[:, 0].min() < 0 or table[:, 0].max() >= N_KEYPOINT_SLOTS:
                    raise AssetError(f"landmark {what} table has slot ids outside the layout")
                if table[:, 1].min() < 0 or table[:, 1].max() >= limit:
                    raise AssetError(f"landmark {what} table has out-of-range {what} ids")
        if self.triangle_regions is not None and self.triangle_regions.shape != (self.faces.shape[0],):
            raise AssetError("triangle_regions must have one label per face")

    # -- container round trip ----------------------------------------------
    def to_dir(self, path: str | Path, dtype: str = "float32") -> None:
        """Serialise to a container directory (float arrays stored as ``dtype``)."""
        if dtype not in ("float32", "float64"):
            raise AssetError("dtype must be float32 or float64")
        fl = np.float32 if dtype == "float32" else np.float64
        arrays: dict[str, np.ndarray] = {
            "template": self.template.astype(fl),
            "faces": self.faces.astype(np.int32),
            "skin_weights": self.skin_weights.astype(fl),
            "joint_regressor": self.joint_regressor.astype(fl),
            "parents": self.parents.astype(np.int32),
            "shape_dirs": self.shape_dirs.astype(fl),
            "expr_dirs": self.expr_dirs.astype(fl),
            "pose_dirs": self.pose_dirs.astype(fl),
            "hand_pca_left": self.hand_pca_left.astype(fl),
            "hand_pca_right": self.hand_pca_right.astype(fl),
            "landmark_joints": self.landmark_joints.astype(np.int32),
            "landmark_verts": self.landmark_verts.astype(np.int32),
            "contact_mask_pairs": self.contact_mask_pairs.astype(np.int32),
        }
        if self.hand_mean_left is not None:
            arrays["hand_mean_left"] = self.hand_mean_left.astype(fl)
        if self.hand_mean_right is not None:
            arrays["hand_mean_right"] = self.hand_mean_right.astype(fl)
        if self.triangle_regions is not None:
            arrays["triangle_regions"] = self.triangle_regions.astype(np.int32)
        for name, ids in (
            ("body_joint_ids", self.body_joint_ids),
            ("eye_joints", self.eye_joints),
            ("hand_joint_ids_left", self.hand_joint_ids_left),
            ("hand_joint_ids_right", self.hand_joint_ids_right),
            ("torso_joints", self.torso_joints),
        ):
            if ids is not None:
                arrays[name] = np.asarray(ids, dtype=np.int32)

        meta = dict(self.meta)
        meta.update(
            {
                "kind": "body-model",
                "gender_tag": self.gender_tag,
                "flags": dict(self.flags),
                "units": "meters",
            }
        )
        if self.joint_names is not None:
            meta["joint_names"] = list(self.joint_names)
        if self.jaw_joint is not None:
            meta["jaw_joint"] = int(self.jaw_joint)
        if self.bend_joints is not None:
            meta["bend_joints"] = {
                str(j): [int(axis), float(sign)] for j, (axis, sign) in self.bend_joints.items()
            }
        save_container(path, arrays, meta)

    @classmethod
    def from_dir(cls, path: str | Path) -> "ModelAssets":
        arrays, meta = load_container(path)
        missing = [name for name in _MODEL_ARRAYS if name not in arrays]
        if missing:
            raise AssetError(f"container at {path} is missing arrays: {missing}")
        bend = None
        if "bend_joints" in meta:
            bend = {
                int(j): (int(spec[0]), float(spec[1]))
                for j, spec in meta["bend_joints"].items()
            }
        optional = {}
        for name in ("hand_mean_left", "hand_mean_right", "triangle_regions",
                     "body_joint_ids", "eye_joints", "hand_joint_ids_left",
                     "hand_joint_ids_right", "torso_joints"):
            if name in arrays:
                optional[name] = arrays[name]
        assets = cls(
            template=arrays["template"],
            faces=arrays["faces"],
            skin_weights=arrays["skin_weights"],
            joint_regressor=arrays["joint_regressor"],
            parents=arrays["parents"],
            shape_dirs=arrays["shape_dirs"],
            expr_dirs=arrays["expr_dirs"],
            pose_dirs=arrays["pose_dirs"],
            hand_pca_left=arrays["hand_pca_left"],
            hand_pca_right=arrays["hand_pca_right"],
            landmark_joints=arrays.get("landmark_joints", np.zeros((0, 2), dtype=np.int64)),
            landmark_verts=arrays.get("landmark_verts", np.zeros((0, 2), dtype=np.int64)),
            contact_mask_pairs=arrays.get("contact_mask_pairs", np.zeros((0, 2), dtype=np.int64)),
            joint_names=meta.get("joint_names"),
            jaw_joint=meta.get("jaw_joint"),
            bend_joints=bend,
            gender_tag=meta.get("gender_tag", "neutral"),
            flags=meta.get("flags", {}),
            meta=meta,
            **optional,
        )
        assets.validate()
        return assets
