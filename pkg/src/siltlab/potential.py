"""Truncated lattice Green's function and hitting probabilities.

The series ``G(z) = sum_{n<=N} p_n(z)`` is evaluated by repeated application
of the one-step kernel on the box ``[-R, R]^d``; mass leaving the box is
dropped, so every partial sum is a lower bound of the full Green's function.

The kernel is invariant under coordinate permutations and sign flips, so the
iteration runs on the reduced domain ``0 <= a_1 <= ... <= a_d <= R`` of sorted
absolute coordinates.  Points of that domain are indexed by the combinatorial
number system, and the transfer operator is stored as a scipy sparse matrix.
"""
from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.special import comb

from ._parallel import ordered_map
from .errors import BudgetExceeded, DimensionTooLow, InvalidConfig
from .walk_core import block_layout, draw_moves, make_rng, step_table

# reduced-domain points allowed in a table (sparse operator ~ (2d+1) entries each)
MAX_REDUCED_POINTS = 5_000_000


def reduced_size(d: int, R: int) -> int:
    return int(comb(R + d, d, exact=True))


def _rank(sorted_pts: np.ndarray) -> np.ndarray:
    """Index of each sorted point (rows ``a_1 <= ... <= a_d``) in the reduced domain."""
    d = sorted_pts.shape[1]
    out = np.zeros(sorted_pts.shape[0], dtype=np.int64)
    for i in range(d):
        b = sorted_pts[:, i] + i
        out += comb(b, i + 1, exact=False).round().astype(np.int64)
    return out


def _reduced_points(d: int, R: int) -> np.ndarray:
    """All nondecreasing ``d``-tuples in ``[0, R]`` ordered by rank."""
    pts = np.array(list(itertools.combinations_with_replacement(range(R + 1), d)), dtype=np.int64)
    order = np.argsort(_rank(pts), kind="stable")
    return pts[order]


def orbit_size(pt: Sequence[int]) -> int:
    """Number of lattice points sharing the sorted absolute coordinates ``pt``."""
    d = len(pt)
    perms = math.factorial(d)
    for _, grp in itertools.groupby(sorted(pt)):
        perms //= math.factorial(len(list(grp)))
    return perms * 2 ** sum(1 for v in pt if v != 0)


def _canon(pts: np.ndarray) -> np.ndarray:
    return np.sort(np.abs(pts), axis=1)


@lru_cache(maxsize=4)
def _operator(d: int, R: int):
    pts = _reduced_points(d, R)
    k = pts.shape[0]
    w = 1.0 / (2 * d + 1)
    rows = [np.arange(k)]
    cols = [np.arange(k)]
    for i in range(d):
        for s in (1, -1):
            nb = pts.copy()
            nb[:, i] += s
            ok = np.abs(nb[:, i]) <= R
            c = _canon(nb[ok])
            rows.append(np.nonzero(ok)[0])
            cols.append(_rank(c))
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    # p_{n+1}(w) = sum_v p_n(v) K(v, w) = (1/(2d+1)) sum over neighbours of w, by symmetry
    M = sparse.csr_matrix((np.full(r.shape[0], w), (r, c)), shape=(k, k))
    M.sum_duplicates()
    return pts, M


@dataclass
class GreenTable:
    """Values of the truncated Green's function on the reduced domain.

    ``points`` holds sorted absolute coordinates; :meth:`value` accepts any
    lattice point.  ``tail_gap`` is ``max |G_N - G_{N/2}|``.
    """

    d: int
    box_radius: int
    horizon: int
    points: np.ndarray
    values: np.ndarray
    tail_gap: float = 0.0
    escaped_mass: float = 0.0
    _index: Optional[dict] = field(default=None, repr=False, compare=False)

    @property
    def g0(self) -> float:
        return float(self.values[0])

    @property
    def gamma_d(self) -> float:
        return 2.0 * self.g0 - 1.0

    def value(self, z) -> float:
        key = tuple(sorted(abs(int(v)) for v in np.atleast_1d(z)))
        if len(key) != self.d:
            raise InvalidConfig("point has wrong dimension")
        if self._index is None:
            self._index = {tuple(int(v) for v in p): i for i, p in enumerate(self.points)}
        i = self._index.get(key)
        return 0.0 if i is None else float(self.values[i])

    def multiplicities(self) -> np.ndarray:
        return np.array([orbit_size(p) for p in self.points], dtype=np.float64)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# d={self.d} R={self.box_radius} N={self.horizon} tail_gap={self.tail_gap!r}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"a_{i + 1}" for i in range(self.d)] + ["value"])
        for p, v in zip(self.points, self.values):
            w.writerow([int(x) for x in p] + [repr(float(v))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "GreenTable":
        lines = text.splitlines()
        meta = dict(tok.split("=") for tok in lines[0].lstrip("# ").split())
        rows = list(csv.reader(lines[2:]))
        d = int(meta["d"])
        pts = np.array([[int(x) for x in r[:d]] for r in rows], dtype=np.int64)
        vals = np.array([float(r[d]) for r in rows])
        return cls(d, int(meta["R"]), int(meta["N"]), pts, vals, float(meta["tail_gap"]))


def green_truncated(d: int, R: int, N: int, max_points: int = MAX_REDUCED_POINTS) -> GreenTable:
    """Partial sums ``sum_{n=0}^{N} p_n`` of the box-truncated kernel powers."""
    if d < 3:
        raise DimensionTooLow(f"the Green's function needs a transient walk (d >= 3), got d={d}")
    if R < 0 or N < 0:
        raise InvalidConfig("box radius and horizon must be nonnegative")
    k = reduced_size(d, R)
    if k > max_points:
        raise BudgetExceeded(f"reduced box has {k} points, budget is {max_points}")
    pts, M = _operator(d, R)
    p = np.zeros(k)
    p[0] = 1.0
    g = p.copy()
    half = None
    for n in range(1, N + 1):
        p = M @ p
        g += p
        if n == N // 2:
            half = g.copy()
    if half is None:
        half = g.copy()
    mult = np.array([orbit_size(q) for q in pts], dtype=np.float64)
    escaped = 1.0 - float(mult @ p)
    return GreenTable(d, R, N, pts, g, float(np.max(np.abs(g - half))), escaped)


def gamma_d(table: GreenTable) -> float:
    """``2 G(0) - 1``."""
    return table.gamma_d


def sum_green_sq(table: GreenTable) -> float:
    """``sum_z G(z)^2`` over the box (each reduced point weighted by its orbit)."""
    if table.d < 5:
        raise DimensionTooLow(f"G is square summable only for d >= 5, got d={table.d}")
    return float(table.multiplicities() @ (table.values**2))


# ---------------------------------------------------------------------------
# hitting probabilities


@dataclass(frozen=True)
class HitEstimate:
    p_hat: float
    stderr: float
    samples: int
    horizon: int


def _hit_block(task) -> int:
    seed, block, count, start, target, horizon = task
    d = len(start)
    rng = make_rng(seed, 2, block)
    table = step_table(d)
    tgt = np.array(sorted(target), dtype=np.int64)
    pos = np.tile(np.asarray(start, dtype=np.int64), (count, 1))
    alive = np.ones(count, dtype=bool)
    hits = 0
    chunk = 256
    done = 0
    lo = tgt.min(axis=0)
    span = tgt.max(axis=0) - lo + 1
    mult = np.cumprod(np.concatenate([[1], span[:-1]]))
    tkeys = np.sort(((tgt - lo) * mult).sum(axis=1))
    while done < horizon and alive.any():
        m = min(chunk, horizon - done)
        idx = np.nonzero(alive)[0]
        traj = pos[idx][:, None, :] + np.cumsum(table[draw_moves(rng, d, (idx.size, m))], axis=1)
        inside = np.all((traj >= lo) & (traj < lo + span), axis=2)
        keys = ((traj - lo) * mult).sum(axis=2)
        hit = inside & np.isin(keys, tkeys)
        anyhit = hit.any(axis=1)
        hits += int(anyhit.sum())
        alive[idx[anyhit]] = False
        pos[idx] = traj[:, -1, :]
        done += m
    return hits


def hitting_prob_mc(
    start: Sequence[int],
    target: Iterable[Sequence[int]],
    horizon: int,
    samples: int,
    seed: int = 0,
    workers: Optional[int] = None,
) -> HitEstimate:
    """Estimate ``P_start(walk visits target at some time 1..horizon)``."""
    tgt = {tuple(int(v) for v in t) for t in target}
    start = tuple(int(v) for v in start)
    if not tgt:
        raise InvalidConfig("target set is empty")
    if start in tgt:
        raise InvalidConfig("start point lies in the target")
    if horizon <= 0 or samples <= 0:
        return HitEstimate(0.0, 0.0, max(samples, 0), max(horizon, 0))
    tasks = [(seed, b, c, start, tgt, horizon) for b, c in block_layout(samples, min(horizon, 4096))]
    hits = sum(ordered_map(_hit_block, tasks, workers))
    p = hits / samples
    return HitEstimate(p, math.sqrt(max(p * (1 - p), 0.0) / samples), samples, horizon)


# ---------------------------------------------------------------------------
# profiles on the whole lattice (used to build walk proposals)


@dataclass
class LatticeProfile:
    """Nonnegative function on Z^d given by reduced-box tables.

    ``values`` has shape ``(rows, k)``: one table per row (for instance per
    time step).  Outside the box the value at the nearest box point is damped
    by ``exp(-decay * excess)`` so that the profile never vanishes there
    unless it already vanished at the edge.
    """

    d: int
    box_radius: int
    values: np.ndarray
    decay: float = 1.0

    def at(self, pts: np.ndarray, rows=0) -> np.ndarray:
        """Profile at ``pts``; ``rows`` must broadcast to ``pts.shape[:-1]``."""
        pts = np.asarray(pts, dtype=np.int64)
        shape = pts.shape[:-1]
        a = np.sort(np.abs(pts.reshape(-1, self.d)), axis=1)
        edge = np.minimum(a, self.box_radius)
        idx = _rank(np.sort(edge, axis=1))
        excess = (a - edge).sum(axis=1)
        r = np.broadcast_to(np.asarray(rows, dtype=np.int64), shape).reshape(-1)
        out = self.values[r, idx] * np.exp(-self.decay * excess)
        return out.reshape(shape)


def _edge_decay(pts: np.ndarray, vals: np.ndarray, R: int) -> float:
    far = vals[pts[:, -1] == R].mean()
    near = vals[pts[:, -1] == R - 1].mean()
    if far <= 0 or near <= 0:
        return 1.0
    return max(math.log(near / far), 0.1)


@lru_cache(maxsize=8)
def green_profile(d: int, R: int = 12, N: int = 2000) -> LatticeProfile:
    """Truncated Green's function as a lattice profile."""
    t = green_truncated(d, R, N)
    return LatticeProfile(d, R, t.values[None, :], _edge_decay(t.points, t.values, R))


@lru_cache(maxsize=8)
def return_probabilities(d: int, n: int) -> np.ndarray:
    """Exact ``P(S_t = 0)`` for ``t = 0..n`` from integer counts of closed walks.

    Closed simple walks in ``d`` dimensions are built axis by axis with the
    binomial convolution ``W_{a+b}(j) = sum_i C(j, i) W_a(i) W_b(j - i)``; the
    lazy step adds a second binomial sum.  No box truncation is involved.
    """
    if d < 1 or n < 0:
        raise InvalidConfig("need d >= 1 and n >= 0")
    binom = [[math.comb(j, i) for i in range(j + 1)] for j in range(n + 1)]
    one = [math.comb(j, j // 2) if j % 2 == 0 else 0 for j in range(n + 1)]
    walks = one
    for _ in range(d - 1):
        walks = [sum(binom[j][i] * walks[i] * one[j - i] for i in range(0, j + 1, 2)) for j in range(n + 1)]
    k = 2 * d + 1
    out = np.empty(n + 1)
    for t in range(n + 1):
        closed = sum(binom[t][j] * walks[j] for j in range(0, t + 1, 2))
        out[t] = float(Fraction(closed, k**t))
    return out


@lru_cache(maxsize=8)
def transition_profiles(d: int, R: int, n: int) -> LatticeProfile:
    """Row ``s`` holds ``p_s(z) = P(S_s = z)`` for ``s = 0..n`` (box-truncated)."""
    if n < 0:
        raise InvalidConfig("n must be nonnegative")
    pts, M = _operator(d, R)
    out = np.zeros((n + 1, pts.shape[0]))
    out[0, 0] = 1.0
    for s in range(1, n + 1):
        out[s] = M @ out[s - 1]
    return LatticeProfile(d, R, out, _edge_decay(pts, out[n], R))
