"""Procedural synthetic body assets.

Builds a tube-and-sphere humanoid around the canonical skeleton: one closed
triangulated part per bone segment, dyadic skinning weights (so weight rows
sum to one exactly in float arithmetic), a 4-nearest-vertex joint regressor,
random orthonormal shape/expression bases, and the landmark tables that tie
the mesh to the 137-slot keypoint layout.  Everything is deterministic given
the seed.

Segment ends are pulled back from their joints by explicit clearances; with
the sampler ranges from :mod:`bodyfit.skeleton` the rest pose and any
in-range pose are free of self-contact, so the default contact mask is empty.
"""

from __future__ import annotations

import numpy as np

from bodyfit import skeleton
from bodyfit.assets import ModelAssets

_FL = np.float64


def _frame(direction: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic orthonormal frame (u, v) with u x v = direction."""
    d = direction / np.linalg.norm(direction)
    ref = np.array([0.0, 1.0, 0.0]) if abs(d[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(ref, d)
    u /= np.linalg.norm(u)
    v = np.cross(d, u)
    return u, v


def _tube(p0, p1, r0, r1, segments, rings, clear0, clear1):
    """Closed tapered tube from p0 to p1, shortened by the clearances.

    Returns (verts, faces, ring_index per vert, end_cap_local_index,
    ring_centers).  Cap centers carry ring index 0 (start) and rings-1 (end).
    Ring vertices are laid out contiguously, one ring after another.
    """
    p0 = np.asarray(p0, dtype=_FL)
    p1 = np.asarray(p1, dtype=_FL)
    axis = p1 - p0
    length = np.linalg.norm(axis)
    d = axis / length
    u, v = _frame(d)

    t0 = clear0 / length
    t1 = 1.0 - clear1 / length
    ts = np.linspace(t0, t1, rings)
    phis = np.linspace(0.0, 2.0 * np.pi, segments, endpoint=False)

    verts = []
    ring_of = []
    centers = []
    for i, t in enumerate(ts):
        center = p0 + axis * t
        centers.append(center)
        radius = r0 + (r1 - r0) * t
        for phi in phis:
            verts.append(center + radius * (np.cos(phi) * u + np.sin(phi) * v))
            ring_of.append(i)
    start_cap = len(verts)
    verts.append(p0 + axis * ts[0])
    ring_of.append(0)
    end_cap = len(verts)
    verts.append(p0 + axis * ts[-1])
    ring_of.append(rings - 1)

    faces = []
    for i in range(rings - 1):
        for j in range(segments):
            a = i * segments + j
            b = i * segments + (j + 1) % segments
            c = (i + 1) * segments + (j + 1) % segments
            e = (i + 1) * segments + j
            faces.append((a, b, c))
            faces.append((a, c, e))
    last = (rings - 1) * segments
    for j in range(segments):
        jn = (j + 1) % segments
        faces.append((start_cap, jn, j))
        faces.append((end_cap, last + j, last + jn))
    return (
        np.array(verts),
        np.array(faces, dtype=np.int64),
        np.array(ring_of),
        end_cap,
        np.array(centers),
    )


def _sphere(center, radius, n_lat, n_lon):
    center = np.asarray(center, dtype=_FL)
    verts = [center + np.array([0.0, radius, 0.0])]
    for i in range(1, n_lat + 1):
        theta = np.pi * i / (n_lat + 1)
        for j in range(n_lon):
            phi = 2.0 * np.pi * j / n_lon
            verts.append(
                center
                + radius
                * np.array(
                    [np.sin(theta) * np.cos(phi), np.cos(theta), np.sin(theta) * np.sin(phi)]
                )
            )
    bottom = len(verts)
    verts.append(center + np.array([0.0, -radius, 0.0]))

    faces = []
    for j in range(n_lon):
        jn = (j + 1) % n_lon
        faces.append((0, 1 + jn, 1 + j))
    for i in range(n_lat - 1):
        row = 1 + i * n_lon
        nxt = row + n_lon
        for j in range(n_lon):
            jn = (j + 1) % n_lon
            faces.append((row + j, row + jn, nxt + jn))
            faces.append((row + j, nxt + jn, nxt + j))
    row = 1 + (n_lat - 1) * n_lon
    for j in range(n_lon):
        jn = (j + 1) % n_lon
        faces.append((bottom, row + j, row + jn))
    return np.array(verts), np.array(faces, dtype=np.int64)


def _signed_volume(verts, faces):
    tri = verts[faces]
    return np.sum(np.linalg.det(tri)) / 6.0


def _orient_outward(verts, faces):
    if _signed_volume(verts, faces) < 0.0:
        faces = faces[:, ::-1].copy()
    return faces


def _orthonormal_columns(rng, rows, cols):
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q * np.sign(np.diag(r))


def _blend_levels(ring_of, rings, has_blend):
    """Dyadic blend level toward the child joint per vertex."""
    levels = np.zeros(len(ring_of))
    if not has_blend:
        return levels
    levels[ring_of == rings - 1] = 0.5
    if rings >= 3:
        levels[ring_of == rings - 2] = 0.25
    return levels


def build_synthetic_assets(
    seed: int = 0,
    detail: float = 1.0,
    fingers: int = 5,
    gender: str = "neutral",
    n_shape: int = 10,
    n_expr: int = 10,
    n_hand: int = 12,
) -> ModelAssets:
    """Generate a deterministic synthetic body model.

    ``detail`` scales ring/segment counts (vertex budget), ``fingers`` the
    finger chains per hand (joint count 24 + 6 * fingers + 1 with the root).
    """
    names, parents, design = skeleton.build_joint_tables(fingers)
    index = {name: i for i, name in enumerate(names)}
    n_joints = len(names)
    rng = np.random.default_rng(seed)

    # Ring segment counts stay even so every ring has antipodal vertex pairs
    # (the joint regressor relies on them).
    seg_body = max(6, 2 * int(round(4 * detail)))
    seg_finger = max(6, 2 * int(round(3 * detail)))
    n_lat = max(5, int(round(7 * detail)))
    n_lon = max(8, int(round(10 * detail)))

    def pos(name):
        return design[index[name]]

    # (name, p0, p1, r0, r1, rings, clear0, clear1, owner, blend, segments)
    tube_specs = [
        ("pelvis", (0.0, -0.08, 0.0), pos("spine1"), 0.125, 0.115, 3, 0.0, 0.015, "pelvis", "spine1", seg_body),
        ("spine1", pos("spine1"), pos("spine2"), 0.115, 0.105, 2, 0.015, 0.015, "spine1", "spine2", seg_body),
        ("spine2", pos("spine2"), pos("spine3"), 0.105, 0.10, 2, 0.015, 0.015, "spine2", "spine3", seg_body),
        ("spine3", pos("spine3"), pos("neck"), 0.10, 0.05, 3, 0.015, 0.012, "spine3", "neck", seg_body),
        ("neck", pos("neck"), pos("head"), 0.045, 0.04, 2, 0.012, 0.01, "neck", "head", seg_body),
    ]
    for side in ("left", "right"):
        s = 1.0 if side == "left" else -1.0
        tube_specs += [
            (f"{side}_thigh", pos(f"{side}_hip"), pos(f"{side}_knee"), 0.055, 0.048, 3, 0.03, 0.02, f"{side}_hip", f"{side}_knee", seg_body),
            (f"{side}_shin", pos(f"{side}_knee"), pos(f"{side}_ankle"), 0.046, 0.036, 3, 0.02, 0.012, f"{side}_knee", f"{side}_ankle", seg_body),
            (f"{side}_foot", (s * 0.10, -0.975, -0.05), (s * 0.11, -0.995, 0.15), 0.032, 0.027, 2, 0.004, 0.004, f"{side}_ankle", f"{side}_foot", seg_body),
            (f"{side}_collar", (s * 0.09, 0.48, 0.0), pos(f"{side}_shoulder"), 0.034, 0.034, 2, 0.0, 0.008, f"{side}_collar", f"{side}_shoulder", seg_body),
            (f"{side}_upper_arm", pos(f"{side}_shoulder"), pos(f"{side}_elbow"), 0.042, 0.036, 3, 0.022, 0.018, f"{side}_shoulder", f"{side}_elbow", seg_body),
            (f"{side}_forearm", pos(f"{side}_elbow"), pos(f"{side}_wrist"), 0.034, 0.028, 3, 0.018, 0.018, f"{side}_elbow", f"{side}_wrist", seg_body),
            (f"{side}_palm", pos(f"{side}_wrist"), pos(f"{side}_wrist") + np.array([s * 0.045, 0.0, 0.0]), 0.028, 0.028, 2, 0.004, 0.004, f"{side}_wrist", None, seg_body),
        ]
        for f in range(fingers):
            fname = skeleton.FINGER_NAMES[f]
            chain = [pos(f"{side}_{fname}{k}") for k in (1, 2, 3)]
            chain.append(skeleton.fingertip_target(side, f))
            for segi in range(3):
                owner = f"{side}_{fname}{segi + 1}"
                blend = f"{side}_{fname}{segi + 2}" if segi < 2 else None
                tube_specs.append(
                    (f"{side}_{fname}_seg{segi}", chain[segi], chain[segi + 1],
                     0.0062, 0.0055, 2, 0.002, 0.002, owner, blend, seg_finger)
                )

    all_verts: list[np.ndarray] = []
    all_faces: list[np.ndarray] = []
    regions: list[np.ndarray] = []
    part_names: list[str] = []
    weight_rows: list[tuple[int, int, int | None, float]] = []  # vert, owner, blend, level
    tip_vertices: dict[str, int] = {}
    part_vert_slices: dict[str, slice] = {}
    ring_quartets: list[np.ndarray] = []   # 4 global ids whose mean is the ring center
    ring_centers: list[np.ndarray] = []

    offset = 0
    for spec in tube_specs:
        name, p0, p1, r0, r1, rings, c0, c1, owner, blend, segments = spec
        verts, faces, ring_of, end_cap, centers = _tube(p0, p1, r0, r1, segments, rings, c0, c1)
        faces = _orient_outward(verts, faces)
        half = segments // 2
        for i in range(rings):
            base = offset + i * segments
            ring_quartets.append(np.array([base, base + half, base + 1, base + 1 + half]))
            ring_centers.append(centers[i])
        levels = _blend_levels(ring_of, rings, blend is not None)
        owner_id = index[owner]
        blend_id = index[blend] if blend is not None else None
        for v in range(len(verts)):
            weight_rows.append((offset + v, owner_id, blend_id, levels[v]))
        all_verts.append(verts)
        all_faces.append(faces + offset)
        regions.append(np.full(len(faces), len(part_names), dtype=np.int64))
        part_vert_slices[name] = slice(offset, offset + len(verts))
        if name.endswith("_seg2"):
            tip_vertices[name] = offset + end_cap
        part_names.append(name)
        offset += len(verts)

    # Head sphere with jaw / eye patches.
    sv, sf = _sphere(skeleton.HEAD_CENTER, skeleton.HEAD_RADIUS, n_lat, n_lon)
    sf = _orient_outward(sv, sf)
    head_id = index["head"]
    jaw_id = index["jaw"]
    eye_ids = (index["left_eye"], index["right_eye"])
    eye_surface = {}
    for side, jid in (("left", eye_ids[0]), ("right", eye_ids[1])):
        to_eye = design[jid] - skeleton.HEAD_CENTER
        eye_surface[side] = skeleton.HEAD_CENTER + skeleton.HEAD_RADIUS * to_eye / np.linalg.norm(to_eye)
    for v in range(len(sv)):
        p = sv[v]
        blend_id, level = None, 0.0
        if np.linalg.norm(p - eye_surface["left"]) < 0.035:
            blend_id, level = eye_ids[0], 0.5
        elif np.linalg.norm(p - eye_surface["right"]) < 0.035:
            blend_id, level = eye_ids[1], 0.5
        elif p[1] < 0.725 and p[2] > 0.025:
            blend_id, level = jaw_id, 0.5
        weight_rows.append((offset + v, head_id, blend_id, level))
    all_verts.append(sv)
    all_faces.append(sf + offset)
    regions.append(np.full(len(sf), len(part_names), dtype=np.int64))
    part_vert_slices["head"] = slice(offset, offset + len(sv))
    part_names.append("head")
    offset += len(sv)

    template = np.concatenate(all_verts)
    faces = np.concatenate(all_faces)
    triangle_regions = np.concatenate(regions)
    n = len(template)

    skin = np.zeros((n, n_joints))
    for v, owner_id, blend_id, level in weight_rows:
        if blend_id is None or level == 0.0:
            skin[v, owner_id] = 1.0
        else:
            skin[v, owner_id] = 1.0 - level
            skin[v, blend_id] = level

    # Joint regressor.  Each joint reads two antipodal vertex pairs of its
    # nearest tube ring, so the regressed joint sits on the bone axis; joints
    # far from every ring (jaw, eyes, inside the head sphere) fall back to the
    # single nearest vertex.
    centers_arr = np.stack(ring_centers)
    regressor = np.zeros((n_joints, n))
    for j in range(n_joints):
        d = np.linalg.norm(centers_arr - design[j], axis=1)
        i = int(np.argmin(d))
        if d[i] <= 0.05:
            regressor[j, ring_quartets[i]] = 0.25
        else:
            v = int(np.argmin(np.linalg.norm(template - design[j], axis=1)))
            regressor[j, v] = 1.0

    # Blend-shape bases.
    shape_dirs = _orthonormal_columns(rng, 3 * n, n_shape)
    head_slice = part_vert_slices["head"]
    head_rows = np.arange(head_slice.start * 3, head_slice.stop * 3)
    expr_dirs = np.zeros((3 * n, n_expr))
    expr_dirs[head_rows] = _orthonormal_columns(rng, len(head_rows), n_expr)
    pose_dirs = 0.002 * rng.standard_normal((3 * n, 9 * (n_joints - 1)))

    hand_rows = 9 * fingers
    n_hand_eff = min(n_hand, hand_rows)
    hand_pca_left = _orthonormal_columns(rng, hand_rows, n_hand_eff)
    hand_pca_right = _orthonormal_columns(rng, hand_rows, n_hand_eff)

    # Landmark tables.
    landmark_joints = []
    landmark_verts = []
    for slot, jname in skeleton.BODY_SLOT_JOINTS.items():
        landmark_joints.append((slot, index[jname]))

    def nearest_in_part(part, target):
        sl = part_vert_slices[part]
        d = np.linalg.norm(template[sl] - np.asarray(target), axis=1)
        return sl.start + int(np.argmin(d))

    part_for_target = {
        "head": "head",
        "left_foot": "left_foot",
        "right_foot": "right_foot",
    }
    for slot, (part_key, target) in skeleton.BODY_SLOT_TARGETS.items():
        landmark_verts.append((slot, nearest_in_part(part_for_target[part_key], target)))

    hand_joint_ids = {}
    for side in ("left", "right"):
        base = skeleton.hand_slot_base(side)
        landmark_joints.append((base, index[f"{side}_wrist"]))
        ids = []
        for f in range(fingers):
            fname = skeleton.FINGER_NAMES[f]
            for segi in range(3):
                jid = index[f"{side}_{fname}{segi + 1}"]
                ids.append(jid)
                landmark_joints.append((base + 1 + 4 * f + segi, jid))
            landmark_verts.append((base + 1 + 4 * f + 3, tip_vertices[f"{side}_{fname}_seg2"]))
        hand_joint_ids[side] = np.array(ids, dtype=np.int64)

    # Face slots: farthest-point sampling over the head part, seeded at the
    # vertex nearest the nose target; cycle if the mesh is coarser than the
    # slot count.
    head_verts = np.arange(head_slice.start, head_slice.stop)
    start = nearest_in_part("head", skeleton.BODY_SLOT_TARGETS[0][1])
    chosen = [start]
    dmin = np.linalg.norm(template[head_verts] - template[start], axis=1)
    while len(chosen) < min(70, len(head_verts)):
        nxt = head_verts[int(np.argmax(dmin))]
        chosen.append(int(nxt))
        dmin = np.minimum(dmin, np.linalg.norm(template[head_verts] - template[nxt], axis=1))
    face_targets = [chosen[i % len(chosen)] for i in range(70)]
    for i, vid in enumerate(face_targets):
        landmark_verts.append((67 + i, vid))

    bend_joints = {
        index[name]: spec for name, spec in skeleton.BEND_SPEC.items()
    }
    torso = np.array([index[nm] for nm in skeleton.TORSO_JOINT_NAMES], dtype=np.int64)
    body_ids = np.array([index[nm] for nm in skeleton.BODY_JOINT_NAMES], dtype=np.int64)

    assets = ModelAssets(
        template=template,
        faces=faces,
        skin_weights=skin,
        joint_regressor=regressor,
        parents=parents,
        shape_dirs=shape_dirs,
        expr_dirs=expr_dirs,
        pose_dirs=pose_dirs,
        hand_pca_left=hand_pca_left,
        hand_pca_right=hand_pca_right,
        landmark_joints=np.array(sorted(landmark_joints), dtype=np.int64),
        landmark_verts=np.array(sorted(landmark_verts), dtype=np.int64),
        triangle_regions=triangle_regions,
        contact_mask_pairs=np.zeros((0, 2), dtype=np.int64),
        joint_names=names,
        body_joint_ids=body_ids,
        jaw_joint=index["jaw"],
        eye_joints=np.array(eye_ids, dtype=np.int64),
        hand_joint_ids_left=hand_joint_ids["left"],
        hand_joint_ids_right=hand_joint_ids["right"],
        bend_joints=bend_joints,
        torso_joints=torso,
        gender_tag=gender,
        flags={"orthonormal_bases": True, "joint_regressor_convex": True},
        meta={
            "generator": {
                "seed": seed,
                "detail": detail,
                "fingers": fingers,
            },
            "part_names": part_names,
        },
    )
    assets.validate()
    return assets


# ---------------------------------------------------------------------------
# Procedural pose corpus
# ---------------------------------------------------------------------------

_MIXER_SEED = 1799  # fixed: the corpus manifold is part of the generator


def sample_pose_corpus(n: int, seed: int = 0, latent_dim: int = 8, noise: float = 0.35) -> np.ndarray:
    """Draw ``n`` body poses (n, 63) inside the sampler's joint limits.

    Poses live on a smooth ``latent_dim``-dimensional manifold (a fixed random
    mixing of per-joint ranges) plus small independent jitter, which makes the
    corpus both learnable by a latent prior and wide enough to be non-trivial.
    """
    limits = skeleton.body_joint_limits().reshape(63, 2)
    lo, hi = limits[:, 0], limits[:, 1]

    mixer = np.random.default_rng(_MIXER_SEED)
    w = mixer.standard_normal((63, latent_dim)) / np.sqrt(latent_dim)
    b = 0.3 * mixer.standard_normal(63)

    rng = np.random.default_rng(seed)
    c = rng.standard_normal((n, latent_dim))
    raw = c @ w.T + b + noise * rng.standard_normal((n, 63))
    u = 0.5 * (np.tanh(raw) + 1.0)
    return lo + (hi - lo) * u
