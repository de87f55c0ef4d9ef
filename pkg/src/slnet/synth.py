"""Synthetic labeled point clouds sampled from analytic surfaces.

Deterministic for a fixed seed: a desk-scale stand-in for real scan data
when exercising the full train/eval pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geom import normalize_cloud

SHAPE_NAMES = ("sphere", "cube", "cylinder", "torus", "cone")


@dataclass
class SynthSpec:
    classes: tuple[str, ...] = ("sphere", "cube", "cylinder", "torus")
    n_points: int = 256
    per_class: int = 125
    noise: float = 0.02
    seed: int = 0

    def __post_init__(self):
        self.classes = tuple(self.classes)
        for name in self.classes:
            if name not in SHAPE_NAMES:
                raise ValueError(f"unknown shape class {name!r}")
        if self.n_points < 64:
            raise ValueError("n_points must be at least 64")


def _sphere(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _cube(rng: np.random.Generator, n: int) -> np.ndarray:
    # uniform over the surface of the side-2 cube centered at the origin
    face = rng.integers(0, 6, n)
    uv = rng.uniform(-1.0, 1.0, (n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    for a in range(3):
        mask = axis == a
        others = [i for i in range(3) if i != a]
        pts[mask, a] = sign[mask]
        pts[np.ix_(mask, others)] = uv[mask]
    return pts


def _cylinder(rng: np.random.Generator, n: int) -> np.ndarray:
    # radius 1, height 2; area split between the lateral wall and both caps
    lateral_area = 2 * np.pi * 2.0
    cap_area = 2 * np.pi
    p_lateral = lateral_area / (lateral_area + cap_area)
    on_wall = rng.random(n) < p_lateral
    theta = rng.uniform(0, 2 * np.pi, n)
    pts = np.empty((n, 3))
    pts[on_wall, 0] = np.cos(theta[on_wall])
    pts[on_wall, 1] = np.sin(theta[on_wall])
    pts[on_wall, 2] = rng.uniform(-1.0, 1.0, int(on_wall.sum()))
    n_cap = int((~on_wall).sum())
    rad = np.sqrt(rng.random(n_cap))
    pts[~on_wall, 0] = rad * np.cos(theta[~on_wall])
    pts[~on_wall, 1] = rad * np.sin(theta[~on_wall])
    pts[~on_wall, 2] = np.where(rng.random(n_cap) < 0.5, 1.0, -1.0)
    return pts


def _torus(rng: np.random.Generator, n: int, big: float = 1.0,
           small: float = 0.4) -> np.ndarray:
    # rejection sampling keeps the surface density uniform
    pts = np.empty((n, 3))
    filled = 0
    while filled < n:
        m = 2 * (n - filled) + 16
        u = rng.uniform(0, 2 * np.pi, m)
        v = rng.uniform(0, 2 * np.pi, m)
        keep = rng.random(m) < (big + small * np.cos(v)) / (big + small)
        u, v = u[keep][:n - filled], v[keep][:n - filled]
        take = len(u)
        pts[filled:filled + take, 0] = (big + small * np.cos(v)) * np.cos(u)
        pts[filled:filled + take, 1] = (big + small * np.cos(v)) * np.sin(u)
        pts[filled:filled + take, 2] = small * np.sin(v)
        filled += take
    return pts


def _cone(rng: np.random.Generator, n: int) -> np.ndarray:
    # base radius 1 at z=-1, apex at z=+1; lateral wall plus base disk
    slant = np.sqrt(1.0 + 4.0)
    lateral_area = np.pi * slant
    base_area = np.pi
    on_wall = rng.random(n) < lateral_area / (lateral_area + base_area)
    theta = rng.uniform(0, 2 * np.pi, n)
    pts = np.empty((n, 3))
    # uniform over the lateral surface: radius ~ sqrt(u)
    rad = np.sqrt(rng.random(int(on_wall.sum())))
    pts[on_wall, 0] = rad * np.cos(theta[on_wall])
    pts[on_wall, 1] = rad * np.sin(theta[on_wall])
    pts[on_wall, 2] = 1.0 - 2.0 * rad
    n_base = int((~on_wall).sum())
    rad = np.sqrt(rng.random(n_base))
    pts[~on_wall, 0] = rad * np.cos(theta[~on_wall])
    pts[~on_wall, 1] = rad * np.sin(theta[~on_wall])
    pts[~on_wall, 2] = -1.0
    return pts


_GENERATORS = {
    "sphere": _sphere,
    "cube": _cube,
    "cylinder": _cylinder,
    "torus": _torus,
    "cone": _cone,
}


def sample_shape(name: str, rng: np.random.Generator, n_points: int,
                 noise: float = 0.0) -> np.ndarray:
    """One raw surface sample (before normalization), float32 (N, 3)."""
    if name not in _GENERATORS:
        raise ValueError(f"unknown shape class {name!r}")
    pts = _GENERATORS[name](rng, n_points)
    if noise > 0:
        pts = pts + rng.normal(0.0, noise, pts.shape)
    return pts.astype(np.float32)


def synth_generate(spec: SynthSpec) -> tuple[np.ndarray, np.ndarray,
                                             np.ndarray, np.ndarray]:
    """Generate the dataset and split 80/20 by a seed-derived shuffle.

    Returns (train_clouds, train_labels, test_clouds, test_labels); clouds
    are unit-sphere normalized, shape (n, n_points, 3).
    """
    rng = np.random.default_rng(spec.seed)
    clouds = np.empty((len(spec.classes) * spec.per_class, spec.n_points, 3),
                      dtype=np.float32)
    labels = np.empty(len(clouds), dtype=np.int64)
    i = 0
    for label, name in enumerate(spec.classes):
        for _ in range(spec.per_class):
            clouds[i] = normalize_cloud(sample_shape(name, rng, spec.n_points,
                                                     spec.noise))
            labels[i] = label
            i += 1
    order = rng.permutation(len(clouds))
    split = int(round(len(clouds) * 0.8))
    tr, te = order[:split], order[split:]
    return clouds[tr], labels[tr], clouds[te], labels[te]
