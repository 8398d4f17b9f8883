"""Local-time fields, self-intersection counts, q-norms and level sets.

Convention: ``l_n`` counts the positions ``S_0, ..., S_{n-1}``, so a path with
``n`` steps (``n + 1`` positions) yields a field whose total mass is ``n``.
``l_{[k, n[}`` counts ``S_k, ..., S_{n-1}``.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .errors import InvalidConfig
from .walk_core import WalkPath

_INT63 = 2**63 - 1


# ---------------------------------------------------------------------------
# packed site keys


def packing(lo: np.ndarray, hi: np.ndarray) -> Optional[np.ndarray]:
    """Mixed-radix multipliers packing boxes ``[lo, hi]`` into int64, or None."""
    span = [int(h) - int(l) + 1 for l, h in zip(lo, hi)]
    mult = []
    acc = 1
    for s in span:
        mult.append(acc)
        acc *= s
    if acc > _INT63:
        return None
    return np.array(mult, dtype=np.int64)


def site_keys(positions: np.ndarray, lo: Optional[np.ndarray] = None, hi: Optional[np.ndarray] = None) -> np.ndarray:
    """One sortable key per row of ``positions`` (last axis = coordinates).

    Keys are packed int64 when the bounding box allows it, structured rows
    otherwise.  Equal keys iff equal sites, for rows keyed with the same box.
    """
    positions = np.asarray(positions, dtype=np.int64)
    d = positions.shape[-1]
    flat = positions.reshape(-1, d)
    if flat.shape[0] == 0:
        return np.zeros(positions.shape[:-1], dtype=np.int64)
    if lo is None:
        lo = flat.min(axis=0)
    if hi is None:
        hi = flat.max(axis=0)
    mult = packing(lo, hi)
    if mult is not None:
        return ((positions - lo) * mult).sum(axis=-1)
    flat = np.ascontiguousarray(flat)
    view = flat.view(np.dtype([(f"x{i}", np.int64) for i in range(d)]))
    return view.reshape(positions.shape[:-1])


def sorted_run_stats(keys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise ``(sum of c^2, sum of c(c-1)/2)`` over the multiplicities ``c``
    of equal keys in each row of a 2-D key array."""
    keys = np.sort(keys, axis=-1)
    m, n = keys.shape
    if n == 0:
        z = np.zeros(m, dtype=np.int64)
        return z, z.copy()
    new = np.ones((m, n), dtype=bool)
    new[:, 1:] = keys[:, 1:] != keys[:, :-1]
    idx = np.broadcast_to(np.arange(n, dtype=np.int64), (m, n))
    start = np.maximum.accumulate(np.where(new, idx, 0), axis=1)
    rank = idx - start
    pairs = rank.sum(axis=1)
    # sum over runs of c^2 == sum over elements of 2 * rank + 1
    return 2 * pairs + n, pairs


def batch_norm2(positions: np.ndarray, n: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
    """``(||l_n||_2^2, B_n)`` for each path in an ``(m, >=n, d)`` batch."""
    if n is None:
        n = positions.shape[1]
    if n == 0:
        z = np.zeros(positions.shape[0], dtype=np.int64)
        return z, z.copy()
    keys = site_keys(positions[:, :n, :])
    if keys.dtype.kind == "V":
        out = [sorted_run_stats(keys[i : i + 1]) for i in range(keys.shape[0])]
        return np.concatenate([o[0] for o in out]), np.concatenate([o[1] for o in out])
    return sorted_run_stats(keys)


# ---------------------------------------------------------------------------
# fields


@dataclass
class LocalTimeField:
    """Sparse occupation counts ``site -> l(site)`` with elapsed time ``n``."""

    sites: np.ndarray
    counts: np.ndarray
    elapsed: int
    _lookup: Optional[dict] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.sites = np.asarray(self.sites, dtype=np.int64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.sites.ndim != 2 or self.sites.shape[0] != self.counts.shape[0]:
            raise InvalidConfig("sites must be (k, d) with one count per site")
        if np.any(self.counts < 0):
            raise InvalidConfig("counts must be nonnegative")

    @property
    def d(self) -> int:
        return self.sites.shape[1]

    def __len__(self) -> int:
        return self.sites.shape[0]

    def as_dict(self) -> dict[tuple, int]:
        if self._lookup is None:
            self._lookup = {tuple(int(v) for v in s): int(c) for s, c in zip(self.sites, self.counts)}
        return self._lookup

    def __getitem__(self, x) -> int:
        return self.as_dict().get(tuple(int(v) for v in np.atleast_1d(x)), 0)

    def total(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def empty(cls, d: int) -> "LocalTimeField":
        return cls(np.zeros((0, d), dtype=np.int64), np.zeros(0, dtype=np.int64), 0)

    @classmethod
    def from_dict(cls, counts: Mapping, elapsed: Optional[int] = None, d: Optional[int] = None) -> "LocalTimeField":
        items = [(tuple(np.atleast_1d(k).tolist()), int(v)) for k, v in counts.items() if int(v) != 0]
        if not items:
            return cls.empty(d or 1)
        sites = np.array([k for k, _ in items], dtype=np.int64)
        vals = np.array([v for _, v in items], dtype=np.int64)
        total = int(vals.sum())
        return cls(sites, vals, total if elapsed is None else int(elapsed))

    def merge(self, other: "LocalTimeField") -> "LocalTimeField":
        """Pointwise sum of two fields (elapsed times add)."""
        if len(self) == 0:
            return LocalTimeField(other.sites.copy(), other.counts.copy(), self.elapsed + other.elapsed)
        if len(other) == 0:
            return LocalTimeField(self.sites.copy(), self.counts.copy(), self.elapsed + other.elapsed)
        sites = np.concatenate([self.sites, other.sites])
        counts = np.concatenate([self.counts, other.counts])
        uniq, inv = np.unique(sites, axis=0, return_inverse=True)
        summed = np.zeros(uniq.shape[0], dtype=np.int64)
        np.add.at(summed, inv.ravel(), counts)
        return LocalTimeField(uniq, summed, self.elapsed + other.elapsed)

    def to_csv(self, dest=None) -> Optional[str]:
        """Write rows ``x_1,...,x_d,count``; returns the text when ``dest`` is None."""
        buf = io.StringIO() if dest is None else dest
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"x_{i + 1}" for i in range(self.d)] + ["count"])
        order = np.lexsort(self.sites.T[::-1]) if len(self) else []
        for i in order:
            w.writerow([int(v) for v in self.sites[i]] + [int(self.counts[i])])
        return buf.getvalue() if dest is None else None

    @classmethod
    def from_csv(cls, text: str, elapsed: Optional[int] = None) -> "LocalTimeField":
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], rows[1:]
        d = len(header) - 1
        if not body:
            return cls.empty(d)
        arr = np.array([[int(v) for v in r] for r in body], dtype=np.int64)
        total = int(arr[:, -1].sum())
        return cls(arr[:, :d], arr[:, d], total if elapsed is None else elapsed)


@dataclass(frozen=True)
class IntersectionStats:
    b_n: int
    norm2_sq: int
    n: int


def _positions_of(path) -> tuple[np.ndarray, Optional[int]]:
    if isinstance(path, WalkPath):
        return path.positions, path.n_steps
    return np.asarray(path, dtype=np.int64), None


def accumulate(path: Union[WalkPath, np.ndarray, Sequence], n: Optional[int] = None, start: int = 0) -> LocalTimeField:
    """Local times ``l_{[start, n[}`` of a path.

    For a :class:`WalkPath` ``n`` defaults to its step count (positions
    ``S_0..S_{n-1}`` are counted); for a bare position array every row is
    counted by default.
    """
    pos, default_n = _positions_of(path)
    if pos.ndim == 1:
        pos = pos[:, None]
    if n is None:
        n = default_n if default_n is not None else pos.shape[0]
    if not 0 <= start <= n <= pos.shape[0]:
        raise InvalidConfig(f"window [{start}, {n}[ outside the path")
    window = pos[start:n]
    if window.shape[0] == 0:
        return LocalTimeField(np.zeros((0, pos.shape[1]), dtype=np.int64), np.zeros(0, dtype=np.int64), 0)
    sites, counts = np.unique(window, axis=0, return_counts=True)
    return LocalTimeField(sites, counts.astype(np.int64), n - start)


def accumulate_stream(chunks: Iterable[np.ndarray], n: int) -> LocalTimeField:
    """Local times ``l_n`` from a chunked position stream (time order)."""
    field_ = None
    seen = 0
    for chunk in chunks:
        if seen >= n:
            break
        take = chunk[: n - seen]
        seen += take.shape[0]
        part = accumulate(take)
        field_ = part if field_ is None else field_.merge(part)
    if seen < n:
        raise InvalidConfig(f"stream ended after {seen} positions, needed {n}")
    if field_ is None:
        return LocalTimeField.empty(1)
    return field_


def intersection_stats(f: LocalTimeField) -> IntersectionStats:
    c = f.counts.astype(object) if f.counts.size and int(f.counts.max()) > 3_000_000_000 else f.counts
    norm2 = int((c * c).sum())
    b = int((c * (c - 1) // 2).sum())
    return IntersectionStats(b_n=b, norm2_sq=norm2, n=f.elapsed)


class RunningB:
    """Online self-intersection count: feed positions in time order.

    After ``k + 1`` pushes the value equals ``B_{k+1}`` of the prefix.
    """

    def __init__(self):
        self._counts: dict[tuple, int] = {}
        self.value = 0
        self.n = 0

    def push(self, x) -> int:
        key = tuple(int(v) for v in np.atleast_1d(x))
        c = self._counts.get(key, 0)
        self.value += c
        self._counts[key] = c + 1
        self.n += 1
        return self.value


def incremental_b(stream: Iterable) -> Iterable[int]:
    """Yield the running ``B`` after each consumed position."""
    rb = RunningB()
    for x in stream:
        yield rb.push(x)


def running_b(positions: np.ndarray) -> np.ndarray:
    """Vectorized running ``B``: entry ``k`` is ``B_{k+1}`` on ``positions[:k+1]``."""
    positions = np.asarray(positions, dtype=np.int64)
    if positions.ndim == 1:
        positions = positions[:, None]
    n = positions.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    keys = site_keys(positions)
    order = np.argsort(keys, kind="stable")
    sk = keys[order]
    new = np.ones(n, dtype=bool)
    new[1:] = sk[1:] != sk[:-1]
    idx = np.arange(n)
    start = np.maximum.accumulate(np.where(new, idx, 0))
    prior = np.empty(n, dtype=np.int64)
    prior[order] = idx - start
    return np.cumsum(prior)


def q_norm(f: LocalTimeField, q: float) -> float:
    """``(sum_x l(x)^q)^(1/q)``."""
    if q < 1:
        raise InvalidConfig(f"q must be >= 1, got {q}")
    if q == 1:
        return float(f.total())
    if q == 2:
        return math.sqrt(intersection_stats(f).norm2_sq)
    c = f.counts[f.counts > 0].astype(np.float64)
    if c.size == 0:
        return 0.0
    return math.fsum(np.power(c, q)) ** (1.0 / q)


# ---------------------------------------------------------------------------
# level sets


@dataclass(frozen=True)
class LevelSetSpec:
    """``kind`` is ``"D"`` (window ``[xi/A, A xi)``), ``"R"`` (``n^(1/2 -+ eps0)``)
    or ``"Dbar"`` (``l >= threshold``)."""

    kind: str
    A: float = 0.0
    xi: float = 0.0
    eps0: float = 0.0
    threshold: float = 0.0

    def __post_init__(self):
        if self.kind == "D":
            if not (self.A > 1 and self.xi > 0):
                raise InvalidConfig("D(A, xi) needs A > 1 and xi > 0")
        elif self.kind == "R":
            if not self.eps0 > 0:
                raise InvalidConfig("R_n needs eps0 > 0")
        elif self.kind == "Dbar":
            if not self.threshold > 0:
                raise InvalidConfig("Dbar needs a positive threshold")
        else:
            raise InvalidConfig(f"unknown level-set kind {self.kind!r}")

    @classmethod
    def window(cls, A: float, xi: float) -> "LevelSetSpec":
        return cls("D", A=A, xi=xi)

    @classmethod
    def typical(cls, eps0: float) -> "LevelSetSpec":
        return cls("R", eps0=eps0)

    @classmethod
    def high(cls, threshold: float) -> "LevelSetSpec":
        return cls("Dbar", threshold=threshold)

    def mask(self, counts: np.ndarray, n: int) -> np.ndarray:
        c = counts
        if self.kind == "D":
            return (c >= self.xi / self.A) & (c < self.A * self.xi)
        if self.kind == "R":
            return (c >= n ** (0.5 - self.eps0)) & (c <= n ** (0.5 + self.eps0))
        return c >= self.threshold


def level_set(f: LocalTimeField, spec: LevelSetSpec) -> frozenset:
    m = spec.mask(f.counts, f.elapsed) & (f.counts > 0)
    return frozenset(tuple(int(v) for v in s) for s in f.sites[m])


def restricted_stats(f: LocalTimeField, site_set: Iterable, q: float) -> float:
    """q-norm of ``1_set * l``."""
    if q < 1:
        raise InvalidConfig(f"q must be >= 1, got {q}")
    wanted = {tuple(int(v) for v in np.atleast_1d(s)) for s in site_set}
    lookup = f.as_dict()
    vals = [lookup[s] for s in wanted if s in lookup]
    if q == 1:
        return float(sum(vals))
    if q == 2:
        return math.sqrt(sum(v * v for v in vals))
    return math.fsum(float(v) ** q for v in vals) ** (1.0 / q)
