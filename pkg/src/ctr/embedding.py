"""Per-point input embeddings for proposal refinement.

Two paths share the same raw geometric encoding, the offsets from every
sampled point to the proposal's nine keypoints:

* ``KeypointEmbedding`` projects ``[offsets (27), reflectance]`` linearly;
* ``FusionEmbedding`` appends bilinearly sampled BEV features and runs a
  two-layer MLP, and embeds the nine keypoints themselves the same way.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .geometry import Box3D, _arr, keypoints_array, roi_radius, rotation_z
from .nn import MLP, Linear, ParameterSet

N_POINTS_CT3D = 256
N_POINTS_CT3DPP = 255
RAW_DIM = 28

RADIUS_WAYMO = {"vehicle": 3.1, "pedestrian": 1.3, "cyclist": 1.3}
RADIUS_KITTI = {"car": 2.6, "pedestrian": 1.2, "cyclist": 1.2}

BEV_HEADER = b"ctr-bev v1\n"


class EmptyRoiError(Exception):
    """No scene point falls inside the proposal's sampling cylinder."""


@dataclass
class PointSet:
    points: np.ndarray  # (N, 3)
    reflectance: np.ndarray  # (N,)
    pad_count: int
    indices: np.ndarray = field(repr=False)  # (N,) scene indices, padding repeats indices[0]

    def __len__(self):
        return len(self.points)


@dataclass
class EmbeddedProposal:
    point_feats: Tensor  # (..., N, D)
    keypoint_feats: Tensor | None = None  # (..., 9, D)


# -- sampling ------------------------------------------------------------

def draw_indices(candidates: np.ndarray, n: int, rng_seed) -> tuple[np.ndarray, int]:
    """Sample ``n`` of ``candidates`` without replacement, padding with the first draw."""
    if len(candidates) == 0:
        raise EmptyRoiError("no points inside the sampling region")
    rng = np.random.default_rng(rng_seed)
    if len(candidates) >= n:
        return rng.choice(candidates, size=n, replace=False), 0
    drawn = rng.permutation(candidates)
    pad = n - len(drawn)
    return np.concatenate([drawn, np.full(pad, drawn[0], dtype=drawn.dtype)]), pad


def _point_set(scene_points: np.ndarray, idx: np.ndarray, pad: int) -> PointSet:
    pts = np.asarray(scene_points, dtype=np.float64)
    refl = pts[idx, 3] if pts.shape[1] > 3 else np.zeros(len(idx))
    return PointSet(points=pts[idx, :3].copy(), reflectance=refl.copy(), pad_count=pad, indices=idx)


def points_in_radius(scene_points, center_xy, radius: float) -> np.ndarray:
    """Sorted indices of points whose planar distance to ``center_xy`` is at most ``radius``."""
    p = np.asarray(scene_points)
    d2 = (p[:, 0] - center_xy[0]) ** 2 + (p[:, 1] - center_xy[1]) ** 2
    return np.flatnonzero(d2 <= radius * radius)


def ball_query(scene_points, centers_xy, radius, chunk: int = 64) -> list[np.ndarray]:
    """Sorted in-radius indices for many centers in one pass per chunk.

    ``radius`` is a scalar or one value per center.
    """
    p = np.asarray(scene_points)
    px, py = p[:, 0], p[:, 1]
    c = np.asarray(centers_xy, dtype=np.float64).reshape(-1, 2)
    r2 = np.broadcast_to(np.asarray(radius, dtype=np.float64) ** 2, (len(c),))
    out = []
    for s in range(0, len(c), chunk):
        dx = px - c[s:s + chunk, 0:1]
        dy = py - c[s:s + chunk, 1:2]
        mask = dx * dx + dy * dy <= r2[s:s + chunk, None]
        out.extend(np.flatnonzero(row) for row in mask)
    return out


def sample_points_object(scene_points, box: Box3D, alpha: float = 1.2, n: int = N_POINTS_CT3D,
                         rng_seed=0) -> PointSet:
    """Sample inside a cylinder whose radius scales with the proposal footprint."""
    b = _arr(box)
    idx = points_in_radius(scene_points, b[:2], roi_radius(b, alpha))
    chosen, pad = draw_indices(idx, n, rng_seed)
    return _point_set(scene_points, chosen, pad)


class GridIndex:
    """Uniform planar bucket grid for repeated fixed-radius queries.

    Points are sorted by a combined (column, row) cell key, so the three cells
    of one column in a 3x3 neighbourhood form one contiguous slice. Any radius
    up to ``cell`` is answered from that neighbourhood.
    """

    _SPAN = 1 << 20  # rows per column in the combined key

    def __init__(self, scene_points, cell: float):
        p = np.asarray(scene_points)
        self.points = p
        self.cell = float(cell)
        keys = self._key(np.floor(p[:, 0] / cell), np.floor(p[:, 1] / cell))
        self._order = np.argsort(keys, kind="stable")
        self._keys = keys[self._order]

    def _key(self, kx, ky):
        return (np.asarray(kx, np.int64) * self._SPAN) + np.asarray(ky, np.int64)

    def query(self, center_xy, radius: float) -> np.ndarray:
        if radius > self.cell:
            return points_in_radius(self.points, center_xy, radius)
        kx, ky = np.floor(center_xy[0] / self.cell), np.floor(center_xy[1] / self.cell)
        lo = self._key(kx + np.array([-1, 0, 1]), ky - 1)
        hi = self._key(kx + np.array([-1, 0, 1]), ky + 1)
        a = np.searchsorted(self._keys, lo, side="left")
        b = np.searchsorted(self._keys, hi, side="right")
        cand = np.concatenate([self._order[i:j] for i, j in zip(a, b)])
        p = self.points[cand]
        d2 = (p[:, 0] - center_xy[0]) ** 2 + (p[:, 1] - center_xy[1]) ** 2
        return np.sort(cand[d2 <= radius * radius])


def sample_points_category(scene_points, box: Box3D, category: str, radius_table=None,
                           n: int = N_POINTS_CT3DPP, rng_seed=0, index: GridIndex | None = None) -> PointSet:
    """Sample inside a cylinder of fixed radius looked up by category."""
    table = RADIUS_WAYMO if radius_table is None else radius_table
    if category not in table:
        raise KeyError(f"no sampling radius configured for category {category!r}")
    radius = float(table[category])
    b = _arr(box)
    if index is not None:
        idx = index.query(b[:2], radius)
    else:
        idx = points_in_radius(scene_points, b[:2], radius)
    chosen, pad = draw_indices(idx, n, rng_seed)
    return _point_set(scene_points, chosen, pad)


# -- raw geometric features ---------------------------------------------

def keypoint_offsets(points, boxes, canonical: bool = False) -> np.ndarray:
    """Offsets from points ``(..., N, 3)`` to their box's nine keypoints, ``(..., N, 27)``.

    Ordering: offset to the center, then to corners 1..8. With ``canonical``
    the offsets are rotated into the box frame.
    """
    pts = np.asarray(points, dtype=np.float64)
    b = _arr(boxes)
    kp = keypoints_array(b)  # (..., 9, 3)
    off = pts[..., :, None, :] - kp[..., None, :, :]  # (..., N, 9, 3)
    if canonical:
        rot = rotation_z(-b[..., 6])  # (..., 3, 3)
        off = np.einsum("...ij,...nkj->...nki", rot, off)
    return off.reshape(off.shape[:-2] + (27,))


def keypoint_subtraction_raw(ps: PointSet, box, canonical: bool = False) -> np.ndarray:
    """The 28-dim raw vector per point: 9 relative 3-vectors then reflectance."""
    off = keypoint_offsets(ps.points, box, canonical)
    return np.concatenate([off, np.asarray(ps.reflectance)[:, None]], axis=-1)


def keypoint_self_raw(boxes, canonical: bool = False) -> np.ndarray:
    """Raw vectors for the nine keypoints themselves (reflectance slot is zero), ``(..., 9, 28)``."""
    b = _arr(boxes)
    off = keypoint_offsets(keypoints_array(b), b, canonical)
    return np.concatenate([off, np.zeros(off.shape[:-1] + (1,))], axis=-1)


# -- BEV grid ------------------------------------------------------------

@dataclass
class BevGrid:
    origin_xy: tuple[float, float]
    cell_size: float
    values: np.ndarray  # (H, W, C); row index runs along y, column along x

    def __post_init__(self):
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise ValueError(f"BEV values must be (H, W, C), got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("BEV values must be finite")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def cell_center(self, ix: int, iy: int) -> tuple[float, float]:
        return (self.origin_xy[0] + (ix + 0.5) * self.cell_size,
                self.origin_xy[1] + (iy + 0.5) * self.cell_size)


def bev_bilinear(grid: BevGrid, xy) -> np.ndarray:
    """Bilinear blend of the four surrounding cell centers; outside queries clamp to the border.

    ``xy`` may be ``(2,)`` or ``(..., 2)``; returns ``(..., C)``.
    """
    q = np.asarray(xy, dtype=np.float64)
    u = (q[..., 0] - grid.origin_xy[0]) / grid.cell_size - 0.5
    v = (q[..., 1] - grid.origin_xy[1]) / grid.cell_size - 0.5
    u = np.clip(u, 0.0, grid.width - 1)
    v = np.clip(v, 0.0, grid.height - 1)
    i0 = np.minimum(np.floor(u).astype(np.int64), max(grid.width - 2, 0))
    j0 = np.minimum(np.floor(v).astype(np.int64), max(grid.height - 2, 0))
    i1 = np.minimum(i0 + 1, grid.width - 1)
    j1 = np.minimum(j0 + 1, grid.height - 1)
    fu = (u - i0)[..., None]
    fv = (v - j0)[..., None]
    g = grid.values
    top = g[j0, i0] * (1 - fu) + g[j0, i1].astype(np.float64) * fu
    bot = g[j1, i0] * (1 - fu) + g[j1, i1].astype(np.float64) * fu
    return top * (1 - fv) + bot * fv


def save_bev(path, grid: BevGrid):
    h, w, c = grid.values.shape
    with open(path, "wb") as fh:
        fh.write(BEV_HEADER)
        ox, oy = grid.origin_xy
        fh.write(f"{ox!r} {oy!r} {grid.cell_size!r} {h} {w} {c}\n".encode())
        fh.write(np.ascontiguousarray(grid.values, dtype="<f4").tobytes())


def load_bev(path) -> BevGrid:
    raw = Path(path).read_bytes()
    if not raw.startswith(BEV_HEADER):
        raise ValueError(f"{path}: not a ctr-bev v1 file")
    pos = len(BEV_HEADER)
    end = raw.index(b"\n", pos)
    ox, oy, cell, h, w, c = raw[pos:end].decode().split()
    h, w, c = int(h), int(w), int(c)
    vals = np.frombuffer(raw, dtype="<f4", count=h * w * c, offset=end + 1).reshape(h, w, c)
    return BevGrid((float(ox), float(oy)), float(cell), vals.copy())


# -- learnable embeddings -----------------------------------------------

class KeypointEmbedding:
    """Linear projection of the 28-dim keypoint-subtraction vector."""

    def __init__(self, params: ParameterSet, d_model: int, name: str = "embed"):
        self.proj = Linear(params, f"{name}.proj", RAW_DIM, d_model)

    def __call__(self, raw: Tensor) -> EmbeddedProposal:
        return EmbeddedProposal(point_feats=self.proj(raw))


class FusionEmbedding:
    """Two-layer MLP over concatenated geometric and BEV features, for points and keypoints."""

    def __init__(self, params: ParameterSet, d_model: int, bev_channels: int, name: str = "embed"):
        self.in_dim = RAW_DIM + bev_channels
        self.mlp = MLP(params, f"{name}.mlp", [self.in_dim, d_model, d_model])

    def __call__(self, point_raw: Tensor, keypoint_raw: Tensor) -> EmbeddedProposal:
        return EmbeddedProposal(point_feats=self.mlp(point_raw), keypoint_feats=self.mlp(keypoint_raw))


def fusion_inputs(ps: PointSet, box, grid: BevGrid | None, bev_channels: int = 3,
                  canonical: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Raw fusion inputs ``(N, 28 + C)`` and ``(9, 28 + C)`` for one proposal."""
    b = _arr(box)
    geo = keypoint_subtraction_raw(ps, b, canonical)
    kgeo = keypoint_self_raw(b, canonical)
    if grid is None:
        t = np.zeros((len(geo), bev_channels))
        tk = np.zeros((9, bev_channels))
    else:
        t = bev_bilinear(grid, ps.points[:, :2])
        tk = bev_bilinear(grid, keypoints_array(b)[:, :2])
    return np.concatenate([geo, t], axis=-1), np.concatenate([kgeo, tk], axis=-1)


def keypoint_subtraction_embed(ps: PointSet, box, proj: KeypointEmbedding,
                               canonical: bool = False) -> EmbeddedProposal:
    raw = Tensor(keypoint_subtraction_raw(ps, box, canonical))
    return proj(raw)


def fusion_embed(ps: PointSet, box, grid: BevGrid | None, mlp: FusionEmbedding,
                 canonical: bool = False) -> EmbeddedProposal:
    channels = mlp.in_dim - RAW_DIM
    pr, kr = fusion_inputs(ps, box, grid, channels, canonical)
    return mlp(Tensor(pr), Tensor(kr))

