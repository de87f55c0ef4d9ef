"""Parameter-free geometric primitives: FPS, kNN, relative grouping, IDW.

All functions are pure and operate on plain numpy arrays. Distances are
accumulated in float64 via explicit coordinate differences so results are
independent of input row order (up to genuine ties) and match brute-force
oracles bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class PointCloud:
    """Coordinates plus optional per-point extras (normals/color) and labels."""

    coords: np.ndarray                 # (N, 3)
    extras: np.ndarray | None = None   # (N, e)
    labels: np.ndarray | None = None   # (N,) per-point or () per-cloud

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float32)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ValueError(f"coords must be (N, 3), got {self.coords.shape}")
        if self.coords.shape[0] < 1:
            raise ValueError("point cloud must contain at least one point")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("coords contain non-finite values")
        if self.extras is not None:
            self.extras = np.asarray(self.extras, dtype=np.float32)
            if self.extras.shape[0] != self.coords.shape[0]:
                raise ValueError("extras row count differs from coords")

    @property
    def n(self) -> int:
        return self.coords.shape[0]


@dataclass
class NeighborIndex:
    """Per-center neighbor indices into a parent cloud, nearest first."""

    centers: np.ndarray    # (m,)
    neighbors: np.ndarray  # (m, K)
    sq_dists: np.ndarray   # (m, K), rows nondecreasing


def _sq_dists(query: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """(Q, N) squared distances, float64, order-independent per element."""
    q = np.asarray(query, dtype=np.float64)
    r = np.asarray(ref, dtype=np.float64)
    diff = q[:, None, :] - r[None, :, :]
    return np.einsum("qnd,qnd->qn", diff, diff)


def fps(points: np.ndarray, m: int) -> np.ndarray:
    """Greedy farthest point sampling, returned in selection order.

    The seed is the point farthest from the cloud centroid; every later pick
    maximizes the min squared distance to the already-selected set. Ties go
    to the lowest index. This geometric seed rule makes the selected
    coordinate set independent of input permutation (absent exact ties).
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if m < 1:
        raise ValueError("m must be at least 1")
    if m > n:
        raise ValueError(f"cannot sample {m} points from a cloud of {n}")
    centroid = pts.mean(axis=0)
    d = ((pts - centroid) ** 2).sum(axis=1)
    out = np.empty(m, dtype=np.int64)
    out[0] = int(np.argmax(d))
    min_d = ((pts - pts[out[0]]) ** 2).sum(axis=1)
    for i in range(1, m):
        out[i] = int(np.argmax(min_d))
        np.minimum(min_d, ((pts - pts[out[i]]) ** 2).sum(axis=1), out=min_d)
    return out


def fps_batch(points: np.ndarray, m: int) -> np.ndarray:
    """fps over a (B, N, 3) batch; row b equals fps(points[b], m)."""
    pts = np.asarray(points, dtype=np.float64)
    b, n, _ = pts.shape
    if m < 1 or m > n:
        raise ValueError(f"cannot sample {m} points from clouds of {n}")
    rows = np.arange(b)
    centroid = pts.mean(axis=1, keepdims=True)
    d = ((pts - centroid) ** 2).sum(axis=2)
    out = np.empty((b, m), dtype=np.int64)
    out[:, 0] = d.argmax(axis=1)
    min_d = ((pts - pts[rows, out[:, 0]][:, None, :]) ** 2).sum(axis=2)
    for i in range(1, m):
        out[:, i] = min_d.argmax(axis=1)
        np.minimum(min_d, ((pts - pts[rows, out[:, i]][:, None, :]) ** 2).sum(axis=2),
                   out=min_d)
    return out


def random_sample(points: np.ndarray, m: int, seed: int) -> np.ndarray:
    """m distinct indices drawn without replacement by a seeded PRNG."""
    n = np.asarray(points).shape[0]
    if m < 1:
        raise ValueError("m must be at least 1")
    if m > n:
        raise ValueError(f"cannot sample {m} points from a cloud of {n}")
    rng = np.random.default_rng(seed)
    return rng.choice(n, size=m, replace=False).astype(np.int64)


def knn(query: np.ndarray, ref: np.ndarray, k: int,
        centers: np.ndarray | None = None) -> NeighborIndex:
    """K nearest reference points per query by squared distance.

    Ties resolve to the lower index. When the reference cloud has fewer than
    K points, the nearest point is repeated to keep rows fixed-width.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    d = _sq_dists(np.atleast_2d(query), np.atleast_2d(ref))
    q, n = d.shape
    order = np.argsort(d, axis=1, kind="stable")
    if n >= k:
        nbr = order[:, :k]
    else:
        pad = np.repeat(order[:, :1], k - n, axis=1)
        nbr = np.concatenate([order, pad], axis=1)
    sq = np.take_along_axis(d, nbr, axis=1)
    if centers is None:
        centers = np.arange(q, dtype=np.int64)
    return NeighborIndex(centers=np.asarray(centers, dtype=np.int64),
                         neighbors=nbr.astype(np.int64), sq_dists=sq)


def knn_batch(query: np.ndarray, ref: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Batched kNN: (B, Q, 3) vs (B, N, 3) -> indices (B, Q, k), sq dists.

    Uses argpartition for speed; within the selected k, rows are ordered by
    (distance, index) so results match the single-cloud version whenever the
    partition boundary is tie-free.
    """
    q = np.asarray(query, dtype=np.float64)
    r = np.asarray(ref, dtype=np.float64)
    diff = q[:, :, None, :] - r[:, None, :, :]
    d = np.einsum("bqnd,bqnd->bqn", diff, diff)
    n = d.shape[2]
    if n <= k:
        order = np.argsort(d, axis=2, kind="stable")
        pad = np.repeat(order[:, :, :1], k - n, axis=2)
        nbr = np.concatenate([order, pad], axis=2)
    else:
        part = np.argpartition(d, k - 1, axis=2)[:, :, :k]
        part.sort(axis=2)  # index order first, so equal distances keep low index
        sq_part = np.take_along_axis(d, part, axis=2)
        order = np.argsort(sq_part, axis=2, kind="stable")
        nbr = np.take_along_axis(part, order, axis=2)
    sq = np.take_along_axis(d, nbr, axis=2)
    return nbr.astype(np.int64), sq


def relative_group(feats: np.ndarray, coords: np.ndarray,
                   nbr: NeighborIndex) -> np.ndarray:
    """Center-relative neighborhood features, (m, K, C+3).

    Each neighbor's concatenated [feature | coordinate] vector minus the
    center's; no learnable parameters involved.
    """
    feats = np.asarray(feats)
    coords = np.asarray(coords)
    n = coords.shape[0]
    if nbr.neighbors.size and (nbr.neighbors.min() < 0 or nbr.neighbors.max() >= n):
        raise IndexError("neighbor index out of range")
    if nbr.centers.size and (nbr.centers.min() < 0 or nbr.centers.max() >= n):
        raise IndexError("center index out of range")
    fx = np.concatenate([feats, coords.astype(feats.dtype)], axis=1)
    return fx[nbr.neighbors] - fx[nbr.centers][:, None, :]


def idw_interpolate(coarse_coords: np.ndarray, coarse_feats: np.ndarray,
                    fine_coords: np.ndarray, k: int = 3, power: float = 2.0,
                    eps: float = 1e-8) -> np.ndarray:
    """Inverse-distance-weighted feature interpolation onto finer points.

    Weights are 1 / (d^power + eps) over each fine point's k nearest coarse
    points (all of them when fewer than k exist); the result is the weighted
    average, so outputs stay inside the convex hull of the source features.
    """
    m = np.asarray(coarse_coords).shape[0]
    if m < 1:
        raise ValueError("need at least one coarse point")
    kk = min(k, m)
    nbr = knn(fine_coords, coarse_coords, kk)
    w = 1.0 / (nbr.sq_dists ** (power / 2.0) + eps)
    w = w / w.sum(axis=1, keepdims=True)
    feats = np.asarray(coarse_feats, dtype=np.float64)
    out = np.einsum("nk,nkc->nc", w, feats[nbr.neighbors])
    return out.astype(coarse_feats.dtype)


def idw_weights_batch(coarse_coords: np.ndarray, fine_coords: np.ndarray,
                      k: int = 3, power: float = 2.0,
                      eps: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    """Batched IDW neighbor indices and normalized weights.

    Returns (idx, w), both (B, N, k'), for applying interpolation to
    feature tensors whose gradients must flow.
    """
    m = coarse_coords.shape[1]
    kk = min(k, m)
    idx, sq = knn_batch(fine_coords, coarse_coords, kk)
    w = 1.0 / (sq ** (power / 2.0) + eps)
    w = w / w.sum(axis=2, keepdims=True)
    return idx, w


def normalize_cloud(coords: np.ndarray) -> np.ndarray:
    """Center on the centroid and scale the max radius to 1.

    Statistics accumulate in float64 and the result is cast back to the
    input dtype, so normalization is insensitive to point order.
    """
    pts = np.asarray(coords, dtype=np.float64)
    pts = pts - pts.mean(axis=0)
    radius = np.sqrt((pts ** 2).sum(axis=1).max())
    if radius > 0:
        pts = pts / radius
    return pts.astype(np.asarray(coords).dtype)
