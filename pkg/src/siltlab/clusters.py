"""Scale-L cluster partitions of finite lattice sets and the translation map.

All distances are l1.  A partition is built by a bootstrap: points within
``4L`` are linked first, then clusters are merged while two of them sit within
four times the largest of their diameters and ``L``.  At the fixed point every
pair of clusters is far apart relative to its own size.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .errors import EmptyInput, InvalidConfig

Point = tuple


def _as_points(points: Iterable) -> list[Point]:
    pts = sorted({tuple(int(v) for v in np.atleast_1d(p)) for p in points})
    if pts and len({len(p) for p in pts}) != 1:
        raise InvalidConfig("points have mixed dimensions")
    return pts


def set_dist(a, b) -> int:
    """l1 distance between two finite sets."""
    A = np.asarray(a, dtype=np.int64).reshape(len(a), -1)
    B = np.asarray(b, dtype=np.int64).reshape(len(b), -1)
    return int(np.abs(A[:, None, :] - B[None, :, :]).sum(axis=2).min())


def diam(c) -> int:
    if len(c) <= 1:
        return 0
    A = np.asarray(c, dtype=np.int64)
    return int(np.abs(A[:, None, :] - A[None, :, :]).sum(axis=2).max())


def closest_pair(a, b) -> tuple[Point, Point, int]:
    """Lexicographically first pair ``(x in a, y in b)`` realizing ``set_dist``."""
    A = np.asarray(a, dtype=np.int64)
    B = np.asarray(b, dtype=np.int64)
    D = np.abs(A[:, None, :] - B[None, :, :]).sum(axis=2)
    i, j = np.unravel_index(int(np.argmin(D)), D.shape)
    return tuple(int(v) for v in A[i]), tuple(int(v) for v in B[j]), int(D[i, j])


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, i: int, j: int) -> bool:
        ri, rj = self.find(i), self.find(j)
        if ri == rj:
            return False
        if rj < ri:
            ri, rj = rj, ri
        self.parent[rj] = ri
        return True


@dataclass
class ClusterPartition:
    L: int
    clusters: list[list[Point]]
    source: list[Point]
    rounds: int = 0

    @property
    def d(self) -> int:
        return len(self.source[0])

    def diameters(self) -> list[int]:
        return [diam(c) for c in self.clusters]

    def cluster_of(self, x) -> Optional[int]:
        x = tuple(int(v) for v in x)
        for i, c in enumerate(self.clusters):
            if x in c:
                return i
        return None

    def separation_violations(self) -> list[tuple[int, int]]:
        """Cluster pairs closer than four times their largest diameter (or L)."""
        diams = self.diameters()
        bad = []
        for i in range(len(self.clusters)):
            for j in range(i + 1, len(self.clusters)):
                need = 4 * max(diams[i], diams[j], self.L)
                if set_dist(self.clusters[i], self.clusters[j]) < need:
                    bad.append((i, j))
        return bad

    def diameter_bound(self) -> int:
        k = len(self.source)
        return (5 * k) ** k * self.L

    def to_json(self) -> str:
        return json.dumps(
            {"scale": self.L, "clusters": [[list(p) for p in c] for c in self.clusters]},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "ClusterPartition":
        obj = json.loads(text)
        clusters = [sorted(tuple(p) for p in c) for c in obj["clusters"]]
        source = sorted(p for c in clusters for p in c)
        return cls(int(obj["scale"]), clusters, source)


def partition(points: Iterable, L: int) -> ClusterPartition:
    """Bootstrap partition of ``points`` into L-clusters."""
    pts = _as_points(points)
    if not pts:
        raise EmptyInput("cannot partition an empty set")
    if L < 1:
        raise InvalidConfig(f"scale L must be >= 1, got {L}")
    X = np.asarray(pts, dtype=np.int64)
    D = np.abs(X[:, None, :] - X[None, :, :]).sum(axis=2)
    uf = _UnionFind(len(pts))
    for i, j in zip(*np.nonzero(np.triu(D <= 4 * L, k=1))):
        uf.union(int(i), int(j))
    rounds = 0
    while True:
        groups: dict[int, list[int]] = {}
        for i in range(len(pts)):
            groups.setdefault(uf.find(i), []).append(i)
        members = sorted(groups.values())
        diams = [int(D[np.ix_(g, g)].max()) for g in members]
        merged = False
        for a in range(len(members)):
            for b in range(a + 1, len(members)):
                dist = int(D[np.ix_(members[a], members[b])].min())
                if dist <= 4 * max(diams[a], diams[b], L):
                    merged |= uf.union(members[a][0], members[b][0])
        rounds += 1
        if not merged:
            break
    clusters = [[pts[i] for i in g] for g in members]
    return ClusterPartition(L, clusters, pts, rounds)


def shell_membership(cluster, L: int, z) -> bool:
    """Whether ``z`` lies within ``max(L, diam C)`` of the cluster."""
    z = np.asarray(z, dtype=np.int64)[None, :]
    return set_dist(cluster, z) <= max(L, diam(cluster))


@dataclass
class TransformRecord:
    moved_cluster_index: Optional[int] = None
    anchor_cluster_index: Optional[int] = None
    translation: Optional[tuple] = None
    pair: Optional[tuple] = None
    distance_before: Optional[int] = None

    @property
    def empty(self) -> bool:
        return self.moved_cluster_index is None

    def to_dict(self) -> dict:
        return {
            "moved": self.moved_cluster_index,
            "anchor": self.anchor_cluster_index,
            "u": None if self.translation is None else list(self.translation),
            "pair": None if self.pair is None else [list(p) for p in self.pair],
            "distance_before": self.distance_before,
        }


def translation_vector(x0: Point, x1: Point, diam_sum: int) -> tuple:
    """Integer part (toward zero) of the vector bringing ``x1`` next to ``x0``.

    The moved cluster ends at distance about ``diam_sum`` from the anchor; for
    two singletons it lands at distance between 1 and ``d``.
    """
    v = np.asarray(x0, dtype=np.int64) - np.asarray(x1, dtype=np.int64)
    dist = int(np.abs(v).sum())
    keep = diam_sum if diam_sum > 0 else 1
    if dist <= keep:
        return tuple(0 for _ in x0)
    # exact rational scaling, then truncation toward zero
    num = v * (dist - keep)
    u = np.sign(num) * (np.abs(num) // dist)
    return tuple(int(c) for c in u)


def transform(part: ClusterPartition) -> tuple[ClusterPartition, TransformRecord]:
    """Translate one cluster of the closest pair next to the other."""
    k = len(part.clusters)
    if k < 2:
        return part, TransformRecord()
    best = None
    for i in range(k):
        for j in range(i + 1, k):
            dist = set_dist(part.clusters[i], part.clusters[j])
            if best is None or dist < best[0]:
                best = (dist, i, j)
    dist, i, j = best
    di, dj = diam(part.clusters[i]), diam(part.clusters[j])
    moved, anchor = (i, j) if di <= dj else (j, i)
    x0, x1, _ = closest_pair(part.clusters[anchor], part.clusters[moved])
    u = translation_vector(x0, x1, di + dj)
    shifted = sorted(tuple(a + b for a, b in zip(p, u)) for p in part.clusters[moved])
    clusters = [list(c) for c in part.clusters]
    clusters[moved] = shifted
    source = sorted({p for c in clusters for p in c})
    rec = TransformRecord(moved, anchor, u, (x0, x1), dist)
    return ClusterPartition(part.L, clusters, source, part.rounds), rec


@dataclass
class TransformCheck:
    gap: int
    gap_ok: bool
    factor_two_ok: bool
    spectators_unchanged: bool
    diameter_clearance_ok: bool
    congruent: bool


def check_transform(before: ClusterPartition, after: ClusterPartition, rec: TransformRecord) -> TransformCheck:
    """Evaluate the post-conditions of :func:`transform`."""
    d = before.d
    m, a = rec.moved_cluster_index, rec.anchor_cluster_index
    C1 = before.clusters[m]
    T1 = after.clusters[m]
    C0 = before.clusters[a]
    gap = set_dist(C0, T1) - (diam(C0) + diam(T1))
    congruent = sorted(tuple(p + q for p, q in zip(x, rec.translation)) for x in C1) == sorted(T1)
    spect = all(
        after.clusters[i] == before.clusters[i] for i in range(len(before.clusters)) if i != m
    )
    f2 = True
    clear = True
    for i, C in enumerate(before.clusters):
        if i in (m, a):
            continue
        dn = set_dist(C, T1)
        f2 &= dn <= 2 * set_dist(C, C1)
        clear &= dn >= diam(C) + diam(T1)
    return TransformCheck(gap, 0 <= gap <= 2 * d, f2, spect, clear, congruent)


@dataclass
class IterationLog:
    steps: list[TransformRecord] = field(default_factory=list)
    cluster_counts: list[int] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.steps)


def iterate_to_single(points: Iterable, L: int, max_rounds: Optional[int] = None) -> tuple[list[Point], IterationLog]:
    """Alternate :func:`transform` and re-partitioning until one cluster is left.

    Stops early (returning the current set) if a round fails to reduce the
    cluster count or ``max_rounds`` is reached.
    """
    part = partition(points, L)
    log = IterationLog(cluster_counts=[len(part.clusters)])
    limit = len(part.clusters) if max_rounds is None else max_rounds
    while len(part.clusters) > 1 and log.iterations < limit:
        moved, rec = transform(part)
        log.steps.append(rec)
        nxt = partition([p for c in moved.clusters for p in c], L)
        log.cluster_counts.append(len(nxt.clusters))
        if len(nxt.clusters) >= len(part.clusters):
            part = nxt
            break
        part = nxt
    return sorted(p for c in part.clusters for p in c), log


def replay(points: Iterable, L: int, log: IterationLog) -> list[Point]:
    """Re-apply the recorded translations to ``points``."""
    part = partition(points, L)
    for rec in log.steps:
        clusters = [list(c) for c in part.clusters]
        clusters[rec.moved_cluster_index] = sorted(
            tuple(a + b for a, b in zip(p, rec.translation)) for p in clusters[rec.moved_cluster_index]
        )
        part = partition([p for c in clusters for p in c], L)
    return sorted(p for c in part.clusters for p in c)
