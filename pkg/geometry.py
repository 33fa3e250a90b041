#!/usr/bin/env python3
"""
Spherical geometry for gaze directions.

Convention: x = cos(pitch) sin(yaw), y = sin(pitch), z = cos(pitch) cos(yaw),
so (0, 0) looks down +z and pitch +90 is the +y pole. Angles at the API
boundary are degrees; everything internal is radians.
"""
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from constants import UNIT_TOLERANCE, DEGENERATE_ANGLE, DEGENERATE_CHORD, DEGENERATE_NORM
from errors import RangeError, InvariantError, SingularConfigurationError, DegenerateError


@dataclass(frozen=True)
class YawPitch:
    yaw: float
    pitch: float

    def in_range(self) -> bool:
        return -180.0 <= self.yaw <= 180.0 and -90.0 <= self.pitch <= 90.0

    def check(self):
        if not self.in_range():
            raise RangeError(f'yaw/pitch ({self.yaw}, {self.pitch}) outside [-180, 180] x [-90, 90]')
        return self


def normalize(v, name='vector'):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n < DEGENERATE_NORM:
        raise DegenerateError(f'cannot normalize zero-length {name}')
    return v / n


def normalize_rows(m, name='vector'):
    m = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m, axis=-1, keepdims=True)
    if m.size and np.min(norms) < DEGENERATE_NORM:
        raise DegenerateError(f'cannot normalize zero-length {name}')
    return m / norms, norms


def check_unit(g, name='gaze vector'):
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (3,):
        raise InvariantError(f'{name} must have shape (3,), got {g.shape}')
    if abs(np.linalg.norm(g) - 1.0) > UNIT_TOLERANCE:
        raise InvariantError(f'{name} {g} is not unit length (norm {np.linalg.norm(g)})')
    return g


def clamped_dot(a, b):
    return float(np.clip(np.dot(a, b), -1.0, 1.0))


def arc(a, b) -> float:
    """Great-circle angle between two unit vectors, radians; accurate for tiny angles."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.arctan2(np.linalg.norm(np.cross(a, b)), np.dot(a, b)))


def yawpitch_to_vec(yp: YawPitch) -> np.ndarray:
    yp.check()
    yaw = np.radians(yp.yaw)
    pitch = np.radians(yp.pitch)
    return np.array([np.cos(pitch) * np.sin(yaw), np.sin(pitch), np.cos(pitch) * np.cos(yaw)])


def yawpitch_to_vecs(yaw, pitch) -> np.ndarray:
    """Vectorized form over arrays of degrees; no range check."""
    yaw = np.radians(np.asarray(yaw, dtype=np.float64))
    pitch = np.radians(np.asarray(pitch, dtype=np.float64))
    return np.stack([np.cos(pitch) * np.sin(yaw), np.sin(pitch), np.cos(pitch) * np.cos(yaw)], axis=-1)


def vec_to_yawpitch(g) -> YawPitch:
    x, y, z = check_unit(g)
    horizontal = np.hypot(x, z)
    pitch = float(np.degrees(np.arctan2(y, horizontal)))
    if horizontal < DEGENERATE_CHORD:
        # pole: yaw is undefined, report 0
        return YawPitch(0.0, 90.0 if y > 0 else -90.0)
    yaw = float(np.degrees(np.arctan2(x, z)))
    return YawPitch(yaw, pitch)


def angular_error(a, b) -> float:
    """Angle between two gaze vectors in degrees."""
    return float(np.degrees(np.arccos(clamped_dot(a, b))))


def angular_errors(a, b) -> np.ndarray:
    """Row-wise angular error in degrees for two (n, 3) arrays of unit vectors."""
    dots = np.clip(np.einsum('ij,ij->i', np.asarray(a), np.asarray(b)), -1.0, 1.0)
    return np.degrees(np.arccos(dots))


def slerp_coefficients(theta: float, t: float) -> Tuple[float, float]:
    """
    The two slerp coefficients for a great-circle arc of angle theta at parameter t.
    Falls back to linear weights once sin(theta) is no longer usable.
    """
    if theta < DEGENERATE_ANGLE:
        return 1.0 - t, t
    s = np.sin(theta)
    return float(np.sin((1.0 - t) * theta) / s), float(np.sin(t * theta) / s)


def check_not_antipodal(theta):
    if theta > np.pi - DEGENERATE_ANGLE:
        raise SingularConfigurationError('slerp endpoints are antipodal; the great circle is not unique')


def slerp_weights(g1, g2, gi) -> Tuple[float, float]:
    theta = arc(g1, g2)
    check_not_antipodal(theta)
    if theta < DEGENERATE_ANGLE:
        chord = np.linalg.norm(np.asarray(g2) - np.asarray(g1))
        if chord < DEGENERATE_CHORD:
            t = 0.0
        else:
            t = float(np.clip(np.linalg.norm(np.asarray(gi) - np.asarray(g1)) / chord, 0.0, 1.0))
        return 1.0 - t, t
    t = arc(g1, gi) / theta
    return slerp_coefficients(theta, t)


def slerp_point(g1, g2, t: float) -> np.ndarray:
    g1 = np.asarray(g1, dtype=np.float64)
    g2 = np.asarray(g2, dtype=np.float64)
    theta = arc(g1, g2)
    check_not_antipodal(theta)
    if theta < DEGENERATE_ANGLE:
        return normalize((1.0 - t) * g1 + t * g2)
    w1, w2 = slerp_coefficients(theta, t)
    return w1 * g1 + w2 * g2


def fibonacci_sphere(k: int) -> np.ndarray:
    """
    Deterministic Fibonacci lattice of k points on the unit sphere, shape (k, 3).
    """
    if k < 1:
        raise RangeError(f'fibonacci_sphere needs at least one point, got {k}')
    i = np.arange(k, dtype=np.float64)
    y = 1.0 - 2.0 * (i + 0.5) / k
    r = np.sqrt(1.0 - y * y)
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    return np.stack([r * np.cos(phi), y, r * np.sin(phi)], axis=1)


def uniform_patch(rng: np.random.Generator, n: int, max_yaw=90.0, max_pitch=60.0) -> np.ndarray:
    """
    n directions uniform in area on the patch |yaw| <= max_yaw, |pitch| <= max_pitch.
    """
    yaw = rng.uniform(-max_yaw, max_yaw, size=n)
    s = np.sin(np.radians(max_pitch))
    pitch = np.degrees(np.arcsin(rng.uniform(-s, s, size=n)))
    return yawpitch_to_vecs(yaw, pitch)


def random_unit_vectors(rng: np.random.Generator, n: int, dim=3) -> np.ndarray:
    v = rng.standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)
