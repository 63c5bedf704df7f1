"""Yaw-rotated 3D box geometry.

Boxes are ``(cx, cy, cz, l, w, h, yaw)`` with the z axis pointing up and yaw a
rotation about z. Vectorised helpers take ``(..., 7)`` arrays; the
:class:`Box3D` dataclass is the validated single-box form.

Corner order (box frame, before rotation): bottom face counter-clockwise
starting at ``(+l/2, +w/2)``, i.e. ``(+,+), (-,+), (-,-), (+,-)`` at
``z = -h/2``, then the top face in the same order at ``z = +h/2``.
The ninth keypoint is the center.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

COINCIDENT_EPS = 1e-9

_CORNER_SIGNS = np.array(
    [
        [1, 1, -1], [-1, 1, -1], [-1, -1, -1], [1, -1, -1],
        [1, 1, 1], [-1, 1, 1], [-1, -1, 1], [1, -1, 1],
    ],
    dtype=np.float64,
)


def wrap_angle(a):
    """Map angles to ``[-pi, pi)``."""
    out = np.mod(np.asarray(a, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi
    # fmod rounding can land exactly on +pi
    out = np.where(out >= np.pi, out - 2.0 * np.pi, out)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class Box3D:
    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    yaw: float = 0.0

    def __post_init__(self):
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise ValueError(f"box dimensions must be positive, got l={self.l} w={self.w} h={self.h}")
        vals = (self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"box has non-finite field: {vals}")
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    @classmethod
    def from_array(cls, arr) -> "Box3D":
        return cls(*(float(v) for v in np.asarray(arr).reshape(7)))

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw])

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz])

    @property
    def volume(self) -> float:
        return self.l * self.w * self.h


@dataclass(frozen=True)
class KeypointSet:
    corners: np.ndarray  # (8, 3)
    center: np.ndarray  # (3,)

    def as_array(self) -> np.ndarray:
        """Nine keypoints, center first then the eight corners."""
        return np.vstack([self.center[None], self.corners])


@dataclass(frozen=True)
class ResidualVec:
    dx: float
    dy: float
    dz: float
    dl: float
    dw: float
    dh: float
    dyaw: float

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dz, self.dl, self.dw, self.dh, self.dyaw])

    @classmethod
    def from_array(cls, arr) -> "ResidualVec":
        a = np.asarray(arr, dtype=np.float64).reshape(7)
        return cls(*(float(v) for v in a[:6]), wrap_angle(float(a[6])))


def _arr(box) -> np.ndarray:
    return box.as_array() if isinstance(box, Box3D) else np.asarray(box, dtype=np.float64)


def rotation_z(yaw):
    """``(..., 3, 3)`` rotation matrices about z."""
    c, s = np.cos(yaw), np.sin(yaw)
    z, o = np.zeros_like(c), np.ones_like(c)
    return np.stack([np.stack([c, -s, z], -1), np.stack([s, c, z], -1), np.stack([z, z, o], -1)], -2)


def corners_array(boxes) -> np.ndarray:
    """``(..., 7)`` boxes to ``(..., 8, 3)`` corners."""
    b = _arr(boxes)
    half = b[..., None, 3:6] * 0.5 * _CORNER_SIGNS
    rot = rotation_z(b[..., 6])
    return np.einsum("...ij,...kj->...ki", rot, half) + b[..., None, 0:3]


def keypoints_array(boxes) -> np.ndarray:
    """``(..., 7)`` boxes to ``(..., 9, 3)`` keypoints: center then 8 corners."""
    b = _arr(boxes)
    return np.concatenate([b[..., None, 0:3], corners_array(b)], axis=-2)


def corners(box: Box3D) -> KeypointSet:
    return KeypointSet(corners=corners_array(box), center=box.center)


def cylinder_contains(center_xy, radius: float, points) -> np.ndarray | bool:
    """Planar distance test against an infinitely tall cylinder; z is ignored."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    p = np.asarray(points, dtype=np.float64)
    d2 = (p[..., 0] - center_xy[0]) ** 2 + (p[..., 1] - center_xy[1]) ** 2
    inside = d2 <= radius * radius
    return bool(inside) if inside.ndim == 0 else inside


def roi_radius(box, alpha: float):
    """Scaled RoI radius ``alpha * sqrt((l/2)^2 + (w/2)^2)``."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    b = _arr(box)
    r = alpha * np.hypot(b[..., 3] * 0.5, b[..., 4] * 0.5)
    return float(r) if np.ndim(r) == 0 else r


# -- rotated IoU ---------------------------------------------------------

def bev_rectangle(box) -> np.ndarray:
    """Counter-clockwise BEV footprint ``(4, 2)``."""
    return corners_array(box)[:4, :2]


def _clip(subject: list, a: np.ndarray, b: np.ndarray) -> list:
    """Keep the part of ``subject`` left of the directed edge a->b."""
    ex, ey = b[0] - a[0], b[1] - a[1]

    def side(p):
        return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

    out = []
    n = len(subject)
    for i in range(n):
        cur, nxt = subject[i], subject[(i + 1) % n]
        sc, sn = side(cur), side(nxt)
        if sc >= 0:
            out.append(cur)
        if (sc >= 0) != (sn >= 0):
            t = sc / (sc - sn)
            out.append((cur[0] + t * (nxt[0] - cur[0]), cur[1] + t * (nxt[1] - cur[1])))
    return out


def _dedupe(poly: list) -> list:
    out = []
    for p in poly:
        if not out or abs(p[0] - out[-1][0]) > COINCIDENT_EPS or abs(p[1] - out[-1][1]) > COINCIDENT_EPS:
            out.append(p)
    while len(out) > 1 and abs(out[0][0] - out[-1][0]) <= COINCIDENT_EPS and abs(out[0][1] - out[-1][1]) <= COINCIDENT_EPS:
        out.pop()
    return out


def polygon_area(poly) -> float:
    """Shoelace area, positive for counter-clockwise order."""
    if len(poly) < 3:
        return 0.0
    p = np.asarray(poly, dtype=np.float64)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def convex_intersection(p: np.ndarray, q: np.ndarray) -> list:
    """Intersection polygon of two counter-clockwise convex polygons."""
    poly = [tuple(v) for v in p]
    m = len(q)
    for i in range(m):
        if not poly:
            return []
        poly = _dedupe(_clip(poly, q[i], q[(i + 1) % m]))
    return poly


def bev_intersection_area(a, b) -> float:
    a, b = _arr(a), _arr(b)
    reach = 0.5 * (np.hypot(a[3], a[4]) + np.hypot(b[3], b[4]))
    if np.hypot(a[0] - b[0], a[1] - b[1]) > reach:
        return 0.0
    poly = convex_intersection(bev_rectangle(a), bev_rectangle(b))
    return max(polygon_area(poly), 0.0)


def rotated_iou3d(a, b) -> float:
    a, b = _arr(a), _arr(b)
    zlo = max(a[2] - a[5] / 2, b[2] - b[5] / 2)
    zhi = min(a[2] + a[5] / 2, b[2] + b[5] / 2)
    dz = zhi - zlo
    if dz <= 0:
        return 0.0
    inter = bev_intersection_area(a, b) * dz
    if inter <= 0:
        return 0.0
    union = a[3] * a[4] * a[5] + b[3] * b[4] * b[5] - inter
    return float(min(max(inter / union, 0.0), 1.0))


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between ``(M, 7)`` and ``(K, 7)`` box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 7)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 7)
    out = np.zeros((len(a), len(b)))
    for i in range(len(a)):
        for j in range(len(b)):
            out[i, j] = rotated_iou3d(a[i], b[j])
    return out


# -- residual coding -----------------------------------------------------

def encode_residual_array(proposals, gts) -> np.ndarray:
    """Residuals ``(..., 7)``: center offsets over BEV diagonal (x, y) and height (z),
    log size ratios, wrapped yaw difference."""
    p, g = _arr(proposals), _arr(gts)
    diag = np.hypot(p[..., 3], p[..., 4])
    return np.stack(
        [
            (g[..., 0] - p[..., 0]) / diag,
            (g[..., 1] - p[..., 1]) / diag,
            (g[..., 2] - p[..., 2]) / p[..., 5],
            np.log(g[..., 3] / p[..., 3]),
            np.log(g[..., 4] / p[..., 4]),
            np.log(g[..., 5] / p[..., 5]),
            wrap_angle(g[..., 6] - p[..., 6]),
        ],
        axis=-1,
    )


def decode_residual_array(proposals, residuals) -> np.ndarray:
    p, r = _arr(proposals), np.asarray(residuals, dtype=np.float64)
    diag = np.hypot(p[..., 3], p[..., 4])
    return np.stack(
        [
            p[..., 0] + r[..., 0] * diag,
            p[..., 1] + r[..., 1] * diag,
            p[..., 2] + r[..., 2] * p[..., 5],
            p[..., 3] * np.exp(r[..., 3]),
            p[..., 4] * np.exp(r[..., 4]),
            p[..., 5] * np.exp(r[..., 5]),
            wrap_angle(p[..., 6] + r[..., 6]),
        ],
        axis=-1,
    )


def encode_residual(proposal: Box3D, gt: Box3D) -> ResidualVec:
    return ResidualVec.from_array(encode_residual_array(proposal, gt))


def decode_residual(proposal: Box3D, res: ResidualVec) -> Box3D:
    return Box3D.from_array(decode_residual_array(proposal, res.as_array()))
