"""Pose algebra over translation + unit quaternion (w, x, y, z).

Quaternion helpers accept arrays of shape (..., 4) and broadcast, so the same
code handles single poses and large batches.  Poses are camera-to-world.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def normalize(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def canonical(q):
    """Normalize and flip into the w >= 0 hemisphere."""
    q = normalize(q)
    return np.where(q[..., :1] < 0.0, -q, q)


def quat_multiply(a, b):
    """Hamilton product a*b, renormalized."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    out = np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )
    return normalize(out)


def quat_inverse(q):
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def _abs_dot(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.clip(np.abs(np.sum(a * b, axis=-1)), 0.0, 1.0)


def angular_distance(a, b):
    """Normalized rotation geodesic in [0, 1]; 1 means 180 degrees apart."""
    return 2.0 * np.arccos(_abs_dot(a, b)) / np.pi


def rotation_error_degrees(a, b):
    """Rotation angle between a and b in degrees, in [0, 180].

    Equal to 2*arccos(|a.b|) but evaluated as 2*atan2(|v|, |w|) of the
    relative quaternion, which keeps full precision near zero where arccos
    bottoms out around 1e-6 degrees.
    """
    a = normalize(a)
    b = normalize(b)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    # conj(a) * b
    w = aw * bw + ax * bx + ay * by + az * bz
    x = aw * bx - ax * bw - ay * bz + az * by
    y = aw * by + ax * bz - ay * bw - az * bx
    z = aw * bz - ax * by + ay * bx - az * bw
    return np.degrees(2.0 * np.arctan2(np.sqrt(x * x + y * y + z * z), np.abs(w)))


def quat_to_rotation_matrix(q):
    w, x, y, z = np.moveaxis(normalize(q), -1, 0)
    m = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return m.reshape(m.shape[:-1] + (3, 3))


def rotation_matrix_to_quat(R):
    """Shepperd's method; result is canonical (w >= 0)."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    diag = np.diag(R)
    k = int(np.argmax([tr, *diag]))
    if k == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif k == 1:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif k == 2:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return canonical(q)


def quat_from_axis_angle(axis, angle):
    """Convenience constructor used by tests and the synthetic generator."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2.0)], np.sin(angle / 2.0) * axis])


@dataclass(frozen=True, eq=False)
class Pose:
    """Camera-to-world pose.  ``q`` is stored canonical (unit norm, w >= 0)."""

    t: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        q = np.asarray(self.q, dtype=np.float64).reshape(4)
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(q))):
            raise ValueError("pose components must be finite")
        if np.linalg.norm(q) == 0.0:
            raise ValueError("zero quaternion")
        t.setflags(write=False)
        q = canonical(q)
        q.setflags(write=False)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "q", q)

    @classmethod
    def identity(cls):
        return cls(np.zeros(3), IDENTITY_QUAT)

    @property
    def R(self):
        return quat_to_rotation_matrix(self.q)

    def to_text(self):
        """``tx ty tz qw qx qy qz`` with round-trippable floats."""
        return " ".join(repr(float(v)) for v in (*self.t, *self.q))

    @classmethod
    def from_text(cls, text):
        vals = [float(v) for v in text.split()]
        if len(vals) != 7:
            raise ValueError(f"expected 7 floats, got {len(vals)}")
        return cls(vals[:3], vals[3:])

    def as_array(self):
        return np.concatenate([self.t, self.q])

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(np.array_equal(self.t, other.t) and np.array_equal(self.q, other.q))

    def __repr__(self):
        return f"Pose(t={self.t.tolist()}, q={self.q.tolist()})"


@dataclass(frozen=True, eq=False)
class RelativePose:
    dt: np.ndarray
    dq: np.ndarray

    def __post_init__(self):
        dt = np.asarray(self.dt, dtype=np.float64).reshape(3)
        dq = canonical(np.asarray(self.dq, dtype=np.float64).reshape(4))
        if not (np.all(np.isfinite(dt)) and np.all(np.isfinite(dq))):
            raise ValueError("relative pose components must be finite")
        object.__setattr__(self, "dt", dt)
        object.__setattr__(self, "dq", dq)

    @classmethod
    def identity(cls):
        return cls(np.zeros(3), IDENTITY_QUAT)


def relative_pose_batch(t_db, q_db, t_q, q_q):
    """Array form of ``relative_pose``: (N, 3) / (N, 4) in, (dt, canonical dq) out."""
    t_db, t_q = np.asarray(t_db, dtype=np.float64), np.asarray(t_q, dtype=np.float64)
    return t_q - t_db, canonical(quat_multiply(quat_inverse(q_db), q_q))


def compose_absolute_batch(t_db, q_db, dt, dq):
    """Array form of ``compose_absolute``."""
    t_db, dt = np.asarray(t_db, dtype=np.float64), np.asarray(dt, dtype=np.float64)
    return t_db + dt, canonical(quat_multiply(q_db, dq))


def relative_pose(db: Pose, query: Pose) -> RelativePose:
    return RelativePose(*relative_pose_batch(db.t, db.q, query.t, query.q))


def compose_absolute(db: Pose, rel: RelativePose) -> Pose:
    return Pose(*compose_absolute_batch(db.t, db.q, rel.dt, rel.dq))


def pose_errors(gt: Pose, est: Pose):
    """(translation error in meters, rotation error in degrees)."""
    return float(np.linalg.norm(gt.t - est.t)), float(rotation_error_degrees(gt.q, est.q))
