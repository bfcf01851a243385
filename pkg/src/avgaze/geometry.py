"""Head-pose and gaze representations, training losses and angular metrics.

Conventions: camera frame, the subject facing the camera looks along
``FRONTAL_AXIS = (0, 0, -1)``.  Pitch/yaw map to a unit vector as
``(-cos p sin y, -sin p, -cos p cos y)``.  Head-pose is a 6-vector of an
axis-angle rotation followed by a translation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DegenerateVectorError, InvalidInputError

FRONTAL_AXIS = np.array([0.0, 0.0, -1.0])
NORM_EPS = 1e-12


@dataclass(frozen=True)
class HeadPose6D:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise InvalidInputError("head-pose components must be finite")
        object.__setattr__(self, "rotation", canonical_rotvec(r))
        object.__setattr__(self, "translation", t)

    @classmethod
    def from_vector(cls, v) -> "HeadPose6D":
        v = np.asarray(v, dtype=np.float64).reshape(6)
        return cls(v[:3], v[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rotation, self.translation])

    def direction(self) -> np.ndarray:
        return head_direction(self.rotation)


@dataclass(frozen=True)
class PitchYaw:
    pitch: float
    yaw: float


def canonical_rotvec(r) -> np.ndarray:
    """Equivalent axis-angle vector with norm <= pi."""
    r = np.asarray(r, dtype=np.float64)
    if np.linalg.norm(r) <= np.pi:
        return r
    return Rotation.from_rotvec(r).as_rotvec()


def rotvec_from_angles(yaw: float, pitch: float, roll: float = 0.0) -> np.ndarray:
    """Rotation whose image of the frontal axis has the given pitch/yaw."""
    return Rotation.from_euler("YXZ", [yaw, -pitch, roll]).as_rotvec()


def head_direction(rotvec) -> np.ndarray:
    """Rotate the frontal axis by an axis-angle vector (or a batch of them)."""
    rotvec = np.asarray(rotvec, dtype=np.float64)
    return Rotation.from_rotvec(rotvec).apply(FRONTAL_AXIS)


def _norms(*vectors):
    out = []
    for v in vectors:
        n = np.linalg.norm(v, axis=-1)
        if np.any(n <= NORM_EPS):
            raise DegenerateVectorError("gaze vector has (near) zero norm")
        out.append(n)
    return out


def cosine_similarity(g, g2):
    g = np.asarray(g, dtype=np.float64)
    g2 = np.asarray(g2, dtype=np.float64)
    n1, n2 = _norms(g, g2)
    cos = np.sum(g * g2, axis=-1) / (n1 * n2)
    cos = np.clip(cos, -1.0, 1.0)
    return float(cos) if cos.ndim == 0 else cos


def gaze_loss(pred, target):
    """1 - cos(pred, target); 0 for aligned, 2 for antipodal."""
    return 1.0 - cosine_similarity(pred, target)


def gaze_loss_grad(pred, target) -> np.ndarray:
    """Analytic d gaze_loss / d pred for a single 3-vector."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    np_, nt = _norms(p, t)
    return -(t / (np_ * nt) - np.dot(p, t) * p / (np_ ** 3 * nt))


def _pose_vec(h) -> np.ndarray:
    if isinstance(h, HeadPose6D):
        return h.as_vector()
    return np.asarray(h, dtype=np.float64)


def headpose_loss(pred, target) -> float:
    """Mean squared error over the six pose components."""
    return float(np.mean((_pose_vec(pred) - _pose_vec(target)) ** 2))


def headpose_loss_grad(pred, target) -> np.ndarray:
    p, t = _pose_vec(pred), _pose_vec(target)
    return 2.0 * (p - t) / p.size


def total_loss(l_hp, l_pg, weights=(1.0, 1.0)):
    """Weighted sum of the head-pose and pseudo-gaze losses.

    A loss given as ``None`` is treated as disabled and contributes nothing.
    """
    if (l_hp is not None and l_hp < 0) or (l_pg is not None and l_pg < 0):
        raise InvalidInputError("losses must be non-negative")
    w_hp, w_pg = weights
    total = 0.0
    if l_hp is not None:
        total += w_hp * l_hp
    if l_pg is not None:
        total += w_pg * l_pg
    return total


def angular_error_deg(pred, target):
    cos = cosine_similarity(pred, target)
    out = np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))
    return float(out) if np.ndim(out) == 0 else out


def pitchyaw_to_vector(pitch, yaw) -> np.ndarray:
    if isinstance(pitch, PitchYaw):
        pitch, yaw = pitch.pitch, pitch.yaw
    pitch = np.asarray(pitch, dtype=np.float64)
    yaw = np.asarray(yaw, dtype=np.float64)
    return np.stack(
        [-np.cos(pitch) * np.sin(yaw), -np.sin(pitch), -np.cos(pitch) * np.cos(yaw)], axis=-1
    )


def vector_to_pitchyaw(g) -> tuple:
    """Inverse of :func:`pitchyaw_to_vector`; returns ``(pitch, yaw)`` arrays or floats."""
    g = np.asarray(g, dtype=np.float64)
    (n,) = _norms(g)
    u = g / np.expand_dims(n, -1)
    pitch = np.arcsin(np.clip(-u[..., 1], -1.0, 1.0))
    yaw = np.arctan2(-u[..., 0], -u[..., 2])
    if pitch.ndim == 0:
        return float(pitch), float(yaw)
    return pitch, yaw


def frontal_mask(gazes, threshold_deg: float) -> np.ndarray:
    if not 0.0 < threshold_deg <= 180.0:
        raise InvalidInputError("threshold must be in (0, 180]")
    gazes = np.atleast_2d(np.asarray(gazes, dtype=np.float64))
    if gazes.shape[0] == 0:
        return np.zeros(0, dtype=bool)
    err = angular_error_deg(gazes, np.broadcast_to(FRONTAL_AXIS, gazes.shape))
    return np.atleast_1d(err) <= threshold_deg + 1e-9


def read_pitchyaw_csv(path) -> dict:
    """CSV rows ``frame_id, pitch_rad, yaw_rad`` -> {frame_id: unit gaze vector}."""
    out = {}
    with open(Path(path), newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().lower() in ("frame_id", "#"):
                continue
            fid, p, y = row[0].strip(), float(row[1]), float(row[2])
            out[fid] = pitchyaw_to_vector(p, y)
    return out
