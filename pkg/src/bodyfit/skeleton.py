"""Canonical skeleton layout shared by the synthetic asset generator and tests.

The articulated tree has a pelvis root, 21 body joints, a jaw, two eyes, and
three joints per finger.  With five fingers per hand that is 54 articulated
joints besides the root.  Axis conventions: x to the model's left, y up,
z forward; the rest pose is a T-pose with the pelvis at the origin.
"""

from __future__ import annotations

import numpy as np

FINGER_NAMES = ("thumb", "index", "middle", "ring", "pinky")

# The 21 articulated body joints (root excluded), in tree order.
BODY_JOINT_NAMES = (
    "left_hip", "right_hip", "spine1",
    "left_knee", "right_knee", "spine2",
    "left_ankle", "right_ankle", "spine3",
    "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head",
    "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow",
    "left_wrist", "right_wrist",
)

_BODY_PARENTS = {
    "left_hip": "pelvis", "right_hip": "pelvis", "spine1": "pelvis",
    "left_knee": "left_hip", "right_knee": "right_hip", "spine2": "spine1",
    "left_ankle": "left_knee", "right_ankle": "right_knee", "spine3": "spine2",
    "left_foot": "left_ankle", "right_foot": "right_ankle",
    "neck": "spine3", "left_collar": "spine3", "right_collar": "spine3",
    "head": "neck",
    "left_shoulder": "left_collar", "right_shoulder": "right_collar",
    "left_elbow": "left_shoulder", "right_elbow": "right_shoulder",
    "left_wrist": "left_elbow", "right_wrist": "right_elbow",
    "jaw": "head", "left_eye": "head", "right_eye": "head",
}

# Rest-position design targets in meters (the generator's joint regressor
# reproduces these only approximately; the regressed positions are canonical).
_POSITIONS = {
    "pelvis": (0.0, 0.0, 0.0),
    "left_hip": (0.09, -0.06, 0.0), "right_hip": (-0.09, -0.06, 0.0),
    "spine1": (0.0, 0.11, 0.0),
    "left_knee": (0.10, -0.50, 0.0), "right_knee": (-0.10, -0.50, 0.0),
    "spine2": (0.0, 0.24, 0.0),
    "left_ankle": (0.10, -0.93, 0.0), "right_ankle": (-0.10, -0.93, 0.0),
    "spine3": (0.0, 0.36, 0.0),
    "left_foot": (0.11, -0.99, 0.12), "right_foot": (-0.11, -0.99, 0.12),
    "neck": (0.0, 0.55, 0.0),
    "left_collar": (0.06, 0.47, 0.0), "right_collar": (-0.06, 0.47, 0.0),
    "head": (0.0, 0.66, 0.0),
    "left_shoulder": (0.17, 0.50, 0.0), "right_shoulder": (-0.17, 0.50, 0.0),
    "left_elbow": (0.44, 0.50, 0.0), "right_elbow": (-0.44, 0.50, 0.0),
    "left_wrist": (0.70, 0.50, 0.0), "right_wrist": (-0.70, 0.50, 0.0),
    "jaw": (0.0, 0.70, 0.04),
    "left_eye": (0.033, 0.78, 0.075), "right_eye": (-0.033, 0.78, 0.075),
}

HEAD_CENTER = np.array([0.0, 0.76, 0.01])
HEAD_RADIUS = 0.095

# Finger chain geometry: palm length to the first knuckle, then two phalanx
# steps; lateral fan offsets in z per finger.
_FINGER_X = (0.05, 0.08, 0.105)
_FINGER_Z = (0.04, 0.02, 0.0, -0.02, -0.04)
FINGER_TIP_X = 0.125

# Per-joint bending prior: joint name -> (axis-angle component, sign).  Signs
# are chosen so natural flexion makes sign * angle negative.
BEND_SPEC = {
    "left_elbow": (1, 1.0),
    "right_elbow": (1, -1.0),
    "left_knee": (0, -1.0),
    "right_knee": (0, -1.0),
}

TORSO_JOINT_NAMES = ("left_shoulder", "right_shoulder", "left_hip", "right_hip")


def build_joint_tables(fingers: int = 5):
    """Return (names, parents, positions) for a skeleton with ``fingers`` per hand."""
    if not 1 <= fingers <= 5:
        raise ValueError("fingers must be between 1 and 5")
    names = ["pelvis", *BODY_JOINT_NAMES, "jaw", "left_eye", "right_eye"]
    positions = {name: np.array(_POSITIONS[name], dtype=np.float64) for name in names}
    parents_by_name = dict(_BODY_PARENTS)

    for side, sign in (("left", 1.0), ("right", -1.0)):
        wrist = np.array(_POSITIONS[f"{side}_wrist"])
        for f in range(fingers):
            prev = f"{side}_wrist"
            for seg in range(3):
                name = f"{side}_{FINGER_NAMES[f]}{seg + 1}"
                names.append(name)
                positions[name] = wrist + np.array(
                    [sign * _FINGER_X[seg], 0.0, _FINGER_Z[f]]
                )
                parents_by_name[name] = prev
                prev = name

    index = {name: i for i, name in enumerate(names)}
    parents = np.full(len(names), -1, dtype=np.int64)
    for name in names[1:]:
        parents[index[name]] = index[parents_by_name[name]]
    pos = np.stack([positions[name] for name in names])
    return names, parents, pos


def fingertip_target(side: str, finger: int) -> np.ndarray:
    sign = 1.0 if side == "left" else -1.0
    wrist = np.array(_POSITIONS[f"{side}_wrist"])
    return wrist + np.array([sign * FINGER_TIP_X, 0.0, _FINGER_Z[finger]])


# ---------------------------------------------------------------------------
# Joint angle ranges for the procedural pose sampler (axis-angle, radians).
# Rows are (lo, hi) per component; flexion directions agree with BEND_SPEC.
# ---------------------------------------------------------------------------

def body_joint_limits() -> np.ndarray:
    """(21, 3, 2) lo/hi table indexed like BODY_JOINT_NAMES.

    Ranges are deliberately conservative so that any in-range pose keeps
    adjacent mesh segments of the synthetic body out of contact: segment end
    clearances translate into a maximum relative bend per joint.
    """
    table = {name: np.array([[-0.1, 0.1]] * 3) for name in BODY_JOINT_NAMES}
    for side in ("left", "right"):
        s = 1.0 if side == "left" else -1.0
        table[f"{side}_hip"] = np.array(
            # z is adduction: allow an outward swing, almost no inward swing,
            # so the thighs can never cross.
            [[-0.5, 0.25], [-0.25, 0.25],
             [-0.04, 0.25] if s > 0 else [-0.25, 0.04]]
        )
        table[f"{side}_knee"] = np.array(
            [[-0.03, 0.6], [-0.04, 0.04], [-0.04, 0.04]]
        )
        table[f"{side}_ankle"] = np.array(
            [[-0.25, 0.25], [-0.1, 0.1], [-0.1, 0.1]]
        )
        table[f"{side}_foot"] = np.array(
            [[-0.1, 0.1], [-0.04, 0.04], [-0.04, 0.04]]
        )
        table[f"{side}_collar"] = np.array([[-0.08, 0.08]] * 3)
        table[f"{side}_shoulder"] = np.array(
            # z swings the arm in the frontal plane; keep the downswing small
            # so the upper arm stays clear of the torso.
            [[-0.4, 0.4], [-0.5, 0.5],
             [-0.25, 0.5] if s > 0 else [-0.5, 0.25]]
        )
        table[f"{side}_elbow"] = np.array(
            [[-0.08, 0.08],
             [-0.7, 0.04] if s > 0 else [-0.04, 0.7],
             [-0.08, 0.08]]
        )
        table[f"{side}_wrist"] = np.array([[-0.25, 0.25]] * 3)
    for name in ("spine1", "spine2", "spine3"):
        table[name] = np.array([[-0.15, 0.15], [-0.2, 0.2], [-0.1, 0.1]])
    table["neck"] = np.array([[-0.25, 0.25], [-0.3, 0.3], [-0.15, 0.15]])
    table["head"] = np.array([[-0.25, 0.25], [-0.3, 0.3], [-0.15, 0.15]])
    return np.stack([table[name] for name in BODY_JOINT_NAMES])


# ---------------------------------------------------------------------------
# Keypoint slot layout (body 25 + left hand 21 + right hand 21 + face 70).
# ---------------------------------------------------------------------------

BODY_SLOT_JOINTS = {
    1: "neck", 2: "right_shoulder", 3: "right_elbow", 4: "right_wrist",
    5: "left_shoulder", 6: "left_elbow", 7: "left_wrist",
    8: "pelvis", 9: "right_hip", 10: "right_knee", 11: "right_ankle",
    12: "left_hip", 13: "left_knee", 14: "left_ankle",
    15: "right_eye", 16: "left_eye",
}

# Remaining body slots are surface landmarks; target points resolved by the
# generator against its mesh.
BODY_SLOT_TARGETS = {
    0: ("head", (0.0, 0.755, 0.105)),        # nose
    17: ("head", (-0.095, 0.77, 0.0)),       # right ear
    18: ("head", (0.095, 0.77, 0.0)),        # left ear
    19: ("left_foot", (0.09, -1.02, 0.16)),  # big toe
    20: ("left_foot", (0.13, -1.02, 0.145)), # small toe
    21: ("left_foot", (0.10, -1.005, -0.06)),# heel
    22: ("right_foot", (-0.09, -1.02, 0.16)),
    23: ("right_foot", (-0.13, -1.02, 0.145)),
    24: ("right_foot", (-0.10, -1.005, -0.06)),
}


def hand_slot_base(side: str) -> int:
    """First keypoint slot of the given hand block."""
    return 25 if side == "left" else 46


def keypoint_slot_groups():
    """Slot index arrays for the body / hands / face blocks."""
    body = np.arange(0, 25)
    left = np.arange(25, 46)
    right = np.arange(46, 67)
    face = np.arange(67, 137)
    return body, left, right, face
