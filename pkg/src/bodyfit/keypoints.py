"""OpenPose-layout 2D keypoint files.

One detection = 137 slots: 25 body (feet included), 21 per hand, 70 face.
Each slot carries (x, y, confidence); confidence 0 marks a missing detection.
Floats pass through parsing bit-exactly (JSON doubles in, float64 out).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from bodyfit.assets import N_BODY_SLOTS, N_FACE_SLOTS, N_HAND_SLOTS, N_KEYPOINT_SLOTS

_BLOCKS = (
    ("pose_keypoints_2d", 0, N_BODY_SLOTS),
    ("hand_left_keypoints_2d", 25, N_HAND_SLOTS),
    ("hand_right_keypoints_2d", 46, N_HAND_SLOTS),
    ("face_keypoints_2d", 67, N_FACE_SLOTS),
)


class KeypointError(ValueError):
    """Raised for malformed keypoint files or empty detections."""


@dataclass
class KeypointSet:
    """Pixel positions and confidences for all 137 keypoint slots."""

    points: np.ndarray       # (137, 2)
    confidence: np.ndarray   # (137,)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(N_KEYPOINT_SLOTS, 2)
        self.confidence = np.asarray(self.confidence, dtype=np.float64).reshape(N_KEYPOINT_SLOTS)

    @classmethod
    def empty(cls) -> "KeypointSet":
        return cls(np.zeros((N_KEYPOINT_SLOTS, 2)), np.zeros(N_KEYPOINT_SLOTS))

    def copy(self) -> "KeypointSet":
        return KeypointSet(self.points.copy(), self.confidence.copy())


def sanitize(kps: KeypointSet) -> KeypointSet:
    """Zero out slots with non-finite coordinates or negative confidence."""
    out = kps.copy()
    bad = ~np.isfinite(out.points).all(axis=1) | ~np.isfinite(out.confidence)
    out.confidence[bad] = 0.0
    out.points[bad] = 0.0
    np.clip(out.confidence, 0.0, None, out=out.confidence)
    return out


def parse_openpose(source: str | Path) -> KeypointSet:
    """Read the first person of an OpenPose JSON detection file.

    Missing keypoint blocks parse as zero-confidence slots; a person must be
    present.  ``source`` is a path or a raw JSON string.
    """
    text = source if isinstance(source, str) and source.lstrip().startswith("{") \
        else Path(source).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise KeypointError(f"not valid JSON: {exc}") from exc

    people = doc.get("people")
    if not isinstance(people, list) or not people:
        raise KeypointError("no people in detection file")
    person = people[0]

    kps = KeypointSet.empty()
    for key, start, count in _BLOCKS:
        block = person.get(key)
        if block is None or block == []:
            continue
        flat = np.asarray(block, dtype=np.float64)
        if flat.shape != (3 * count,):
            raise KeypointError(f"{key} must hold {3 * count} floats, got {flat.size}")
        triples = flat.reshape(count, 3)
        kps.points[start:start + count] = triples[:, :2]
        kps.confidence[start:start + count] = triples[:, 2]
    return kps


def write_openpose(path: str | Path, kps: KeypointSet) -> None:
    """Write a single-person detection file the parser reads back losslessly."""
    person = {}
    for key, start, count in _BLOCKS:
        triples = np.concatenate(
            [kps.points[start:start + count],
             kps.confidence[start:start + count, None]],
            axis=1,
        )
        person[key] = [float(x) for x in triples.reshape(-1)]
    doc = {"version": 1.3, "people": [person]}
    Path(path).write_text(json.dumps(doc), encoding="utf-8")
