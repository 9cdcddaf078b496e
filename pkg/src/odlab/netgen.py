"""Synthetic lattice networks and K-means aggregation into OD nodes."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .core import ModelError, Network, Node, Section

BASE_CAPACITY = 120.0


@dataclass(frozen=True)
class RawRoad:
    from_node: int
    to_node: int
    length: float
    speed: float


@dataclass(frozen=True)
class RawGraph:
    coords: np.ndarray  # (n_intersections, 2), meters
    roads: tuple[RawRoad, ...]

    @property
    def n_intersections(self) -> int:
        return len(self.coords)


def generate_raw(seed: int, grid_dim: int, spacing_m: float) -> RawGraph:
    """Square lattice with bidirectional roads between 4-neighbours.

    Speeds are drawn uniformly from [8, 16] m/s, independently per direction.
    """
    if grid_dim < 2 or spacing_m <= 0:
        raise ModelError("grid_dim must be >= 2 and spacing_m > 0")
    rng = np.random.default_rng(seed)
    idx = np.arange(grid_dim * grid_dim).reshape(grid_dim, grid_dim)
    coords = np.array([(c * spacing_m, r * spacing_m) for r in range(grid_dim) for c in range(grid_dim)], dtype=float)
    pairs = []
    for r in range(grid_dim):
        for c in range(grid_dim):
            if c + 1 < grid_dim:
                pairs.append((idx[r, c], idx[r, c + 1]))
            if r + 1 < grid_dim:
                pairs.append((idx[r, c], idx[r + 1, c]))
    speeds = rng.uniform(8.0, 16.0, size=2 * len(pairs))
    roads = []
    for k, (a, b) in enumerate(pairs):
        roads.append(RawRoad(int(a), int(b), float(spacing_m), float(speeds[2 * k])))
        roads.append(RawRoad(int(b), int(a), float(spacing_m), float(speeds[2 * k + 1])))
    return RawGraph(coords, tuple(roads))


def _farthest_point_init(pts: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    chosen = [int(rng.integers(len(pts)))]
    d = np.linalg.norm(pts - pts[chosen[0]], axis=1)
    for _ in range(n - 1):
        nxt = int(np.argmax(d))
        chosen.append(nxt)
        d = np.minimum(d, np.linalg.norm(pts - pts[nxt], axis=1))
    return pts[chosen].copy()


def kmeans(pts: np.ndarray, n: int, seed: int, max_iter: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd iterations from a seeded farthest-point start.

    Returns (labels, centers).  Raises if no attempt within 10 re-seeds ends
    without an empty cluster.
    """
    for attempt in range(10):
        rng = np.random.default_rng([seed, attempt])
        centers = _farthest_point_init(pts, n, rng)
        labels = None
        for _ in range(max_iter):
            dist = np.linalg.norm(pts[:, None, :] - centers[None, :, :], axis=2)
            new = np.argmin(dist, axis=1)
            if labels is not None and np.array_equal(new, labels):
                break
            labels = new
            for c in range(n):
                members = pts[labels == c]
                if len(members):
                    centers[c] = members.mean(axis=0)
        if len(np.unique(labels)) == n:
            return labels, centers
    raise ModelError(f"k-means left an empty cluster after 10 attempts (n={n})")


def cluster_to_network(raw: RawGraph, n_od: int, seed: int, base_capacity: float = BASE_CAPACITY) -> Network:
    if not 2 <= n_od <= raw.n_intersections:
        raise ModelError(f"n_od must lie in [2, {raw.n_intersections}]")
    labels, centers = kmeans(raw.coords, n_od, seed)
    crossing = defaultdict(list)
    for road in raw.roads:
        a, b = int(labels[road.from_node]), int(labels[road.to_node])
        if a != b:
            crossing[(a, b)].append(road)
    nodes = tuple(Node(c, float(centers[c, 0]), float(centers[c, 1])) for c in range(n_od))
    sections = []
    for sid, (a, b) in enumerate(sorted(crossing)):
        roads = crossing[(a, b)]
        sections.append(
            Section(
                sid,
                a,
                b,
                float(np.mean([r.length for r in roads])),
                float(np.mean([r.speed for r in roads])),
                len(roads) * base_capacity,
            )
        )
    return Network(nodes, tuple(sections))
