"""Circuits over a marked set, loop/trip annotation and loop-exchange surgery.

A circuit is the ordered list of marked sites a walk visits.  Given a cluster
``C`` and its translate ``C~ = C + u``, the word splits into *loops* (maximal
runs inside one cluster) joined by *trips* (changes of cluster).  The surgery
maps exchange the roles of ``C`` and ``C~``:

* isolated ``C``/``C~`` loops of one type are permuted and translated using a
  dominance-respecting bijection between binary words (``f_p``);
* chains of consecutive ``C``/``C~`` loops are rewritten in place (``f_i``).

Binary words are tuples of 0/1.  ``Omega(n, m)`` is the set of words with
``n`` ones and ``m`` zeros.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from ._parallel import ordered_map
from .errors import BudgetExceeded, ClustersNotTranslates, InvalidConfig, MatchingFailure, SiteNotCovered
from .walk_core import WalkPath, block_layout, draw_moves, make_rng, step_table

Site = tuple
Word = tuple

OMEGA_MAX_LENGTH = 20
AUDIT_MAX_FAMILY = 2_000_000


def _site(x) -> Site:
    return tuple(int(v) for v in np.atleast_1d(x))


def _shift(x: Site, u: Sequence[int], sign: int = 1) -> Site:
    return tuple(a + sign * b for a, b in zip(x, u))


# ---------------------------------------------------------------------------
# visit vectors and circuits


@dataclass
class VisitVector:
    """Target local times ``k`` on ``Lambda'`` with the parameters ``(A, n, xi)``.

    ``base`` is the subset ``Lambda`` on which the lower bound and the squared
    mass are checked; it defaults to every site of ``site_targets``.
    """

    site_targets: dict
    A: float
    n: int
    xi: float
    base: Optional[frozenset] = None

    def __post_init__(self):
        self.site_targets = {_site(k): int(v) for k, v in self.site_targets.items()}
        if any(v < 0 for v in self.site_targets.values()):
            raise InvalidConfig("visit targets must be nonnegative")
        self.base = frozenset(self.site_targets) if self.base is None else frozenset(_site(s) for s in self.base)

    @property
    def total(self) -> int:
        return sum(self.site_targets.values())

    def is_member(self) -> bool:
        root = math.sqrt(self.n)
        k = self.site_targets
        lo = min((k.get(x, 0) for x in self.base), default=math.inf)
        hi = max(k.values(), default=0)
        sq = sum(k.get(x, 0) ** 2 for x in self.base)
        return lo >= root / self.A and hi <= self.A * root and sq >= self.n * self.xi


@dataclass
class Circuit:
    word: Word
    long_jump_budget: Optional[int] = None
    L: int = 1

    def __post_init__(self):
        self.word = tuple(_site(x) for x in self.word)

    def __len__(self) -> int:
        return len(self.word)

    def occurrences(self) -> Counter:
        return Counter(self.word)

    def long_jumps(self) -> int:
        thr = math.sqrt(self.L)
        w = self.word
        return sum(1 for a, b in zip(w, w[1:]) if sum(abs(p - q) for p, q in zip(a, b)) > thr)

    def within_budget(self) -> bool:
        return self.long_jump_budget is None or self.long_jumps() <= self.long_jump_budget

    def matches(self, visits: VisitVector) -> bool:
        occ = self.occurrences()
        keys = set(occ) | set(visits.site_targets)
        return all(occ.get(x, 0) == visits.site_targets.get(x, 0) for x in keys)

    def to_json(self) -> str:
        return json.dumps({"word": [list(x) for x in self.word], "long_jump_budget": self.long_jump_budget, "L": self.L})

    @classmethod
    def from_json(cls, text: str) -> "Circuit":
        obj = json.loads(text)
        return cls(tuple(tuple(x) for x in obj["word"]), obj.get("long_jump_budget"), obj.get("L", 1))


def extract_circuit(path, marked: Iterable, n: Optional[int] = None) -> Circuit:
    """Marked sites visited by ``S_0..S_{n-1}``, in time order."""
    marked = {_site(x) for x in marked}
    if not marked:
        raise InvalidConfig("marked set is empty")
    pos = path.positions if isinstance(path, WalkPath) else np.asarray(path, dtype=np.int64)
    if n is None:
        n = path.n_steps if isinstance(path, WalkPath) else pos.shape[0]
    pos = pos[:n]
    M = np.array(sorted(marked), dtype=np.int64)
    hit = (pos[:, None, :] == M[None, :, :]).all(axis=2).any(axis=1) if pos.shape[0] else np.zeros(0, bool)
    return Circuit(tuple(tuple(int(v) for v in p) for p in pos[hit]))


# ---------------------------------------------------------------------------
# annotation


@dataclass(frozen=True)
class Loop:
    start: int
    stop: int  # exclusive
    label: object  # "C", "T" (translate) or the index of another cluster
    kind: Optional[Site] = None  # (entry, exit), translate loops mapped back to C
    proper: Optional[bool] = None

    @property
    def special(self) -> bool:
        return self.label in ("C", "T")


@dataclass
class LoopAnnotation:
    word: Word
    loops: list[Loop]
    trips: list[tuple[int, int]]
    cluster: tuple
    translate: tuple
    u: tuple
    chains: list[tuple[int, int]] = field(default_factory=list)  # loop-index ranges, length >= 2

    def isolated(self) -> list[int]:
        """Indices of C/C~ loops that are not part of a chain."""
        in_chain = {i for a, b in self.chains for i in range(a, b)}
        return [i for i, lp in enumerate(self.loops) if lp.special and i not in in_chain]

    def nu(self) -> dict:
        """``type -> (#isolated C-loops, #isolated C~-loops)``."""
        out: dict = {}
        for i in self.isolated():
            lp = self.loops[i]
            c = out.setdefault(lp.kind, [0, 0])
            c[0 if lp.label == "C" else 1] += 1
        return {k: tuple(v) for k, v in out.items()}

    def pattern(self, kind) -> Word:
        """Marks of the isolated loops of a type: 1 for C, 0 for C~."""
        return tuple(1 if self.loops[i].label == "C" else 0 for i in self.isolated() if self.loops[i].kind == kind)

    def improper_count(self) -> int:
        return sum(1 for lp in self.loops if lp.special and not lp.proper)

    def types(self) -> set:
        return {lp.kind for lp in self.loops if lp.special}

    def pieces(self) -> list[Word]:
        return [self.word[lp.start : lp.stop] for lp in self.loops]

    def to_json(self) -> str:
        return json.dumps(
            {
                "word": [list(x) for x in self.word],
                "u": list(self.u),
                "loops": [
                    {
                        "start": lp.start,
                        "stop": lp.stop,
                        "label": lp.label,
                        "type": None if lp.kind is None else [list(x) for x in lp.kind],
                        "proper": lp.proper,
                    }
                    for lp in self.loops
                ],
                "trips": [list(t) for t in self.trips],
                "chains": [list(c) for c in self.chains],
            }
        )


def _clusters_of(partition) -> list[list[Site]]:
    cl = getattr(partition, "clusters", partition)
    return [[_site(x) for x in c] for c in cl]


def translation_between(cluster: Iterable, translate: Iterable) -> tuple:
    """The vector ``u`` with ``translate = cluster + u``; raises if none exists."""
    a = sorted(_site(x) for x in cluster)
    b = sorted(_site(x) for x in translate)
    if not a or len(a) != len(b):
        raise ClustersNotTranslates("designated clusters differ in size")
    u = tuple(q - p for p, q in zip(a[0], b[0]))
    if sorted(_shift(x, u) for x in a) != b or not any(u):
        raise ClustersNotTranslates("designated clusters are not translates of each other")
    return u


def annotate(circuit, partition, special: tuple) -> LoopAnnotation:
    """Split a circuit into loops and trips relative to ``special = (C, C~)``.

    ``partition`` supplies the remaining clusters (a ClusterPartition or a
    list of site lists).  Sites of ``C`` and ``C~`` take precedence.
    """
    word = circuit.word if isinstance(circuit, Circuit) else tuple(_site(x) for x in circuit)
    C = frozenset(_site(x) for x in special[0])
    Ct = frozenset(_site(x) for x in special[1])
    u = translation_between(C, Ct)
    if C & Ct:
        raise ClustersNotTranslates("cluster and translate overlap")
    label: dict = {}
    for i, c in enumerate(_clusters_of(partition)):
        for x in c:
            label.setdefault(x, i)
    for x in C:
        label[x] = "C"
    for x in Ct:
        label[x] = "T"
    loops: list[Loop] = []
    i = 0
    while i < len(word):
        lab = label.get(word[i])
        if lab is None:
            raise SiteNotCovered(f"site {word[i]} lies in no cluster")
        j = i + 1
        while j < len(word) and label.get(word[j]) == lab:
            j += 1
        if lab in ("C", "T"):
            entry, exit_ = word[i], word[j - 1]
            if lab == "T":
                entry, exit_ = _shift(entry, u, -1), _shift(exit_, u, -1)
            prev = loops[-1].label if loops else None
            proper = prev not in ("C", "T")
            loops.append(Loop(i, j, lab, (entry, exit_), proper))
        else:
            loops.append(Loop(i, j, lab))
        i = j
    trips = [(lp.stop - 1, lp.stop) for lp in loops[:-1]]
    chains = []
    k = 0
    while k < len(loops):
        if loops[k].special:
            s = k
            while k < len(loops) and loops[k].special:
                k += 1
            if k - s >= 2:
                chains.append((s, k))
        else:
            k += 1
    return LoopAnnotation(word, loops, trips, tuple(sorted(C)), tuple(sorted(Ct)), u, chains)


# ---------------------------------------------------------------------------
# binary words and the dominance matching


def omega_enumerate(n: int, m: int) -> list[Word]:
    """All words with ``n`` ones and ``m`` zeros, ones placed earliest first."""
    if n < 0 or m < 0:
        raise InvalidConfig("word counts must be nonnegative")
    if n + m > OMEGA_MAX_LENGTH:
        raise BudgetExceeded(f"word length {n + m} exceeds {OMEGA_MAX_LENGTH}")
    out = []
    for ones in itertools.combinations(range(n + m), n):
        w = [0] * (n + m)
        for i in ones:
            w[i] = 1
        out.append(tuple(w))
    return out


def dominates(eta: Word, zeta: Word) -> bool:
    return all(z <= e for e, z in zip(eta, zeta))


@dataclass
class FrobeniusMatching:
    n: int
    m: int
    table: dict

    def __call__(self, eta: Word) -> Word:
        return self.table[tuple(eta)]

    def inverse(self) -> dict:
        return {v: k for k, v in self.table.items()}

    def verify(self) -> dict:
        """Bijectivity and pointwise dominance over the whole of ``Omega(n, m)``."""
        left = omega_enumerate(self.n, self.m)
        right = set(omega_enumerate(self.m, self.n))
        images = [self.table.get(w) for w in left]
        bijective = len(self.table) == len(left) and set(images) == right and len(set(images)) == len(left)
        dominance = all(img is not None and dominates(w, img) for w, img in zip(left, images))
        identity = self.n != self.m or all(self.table[w] == w for w in left)
        return {"n": self.n, "m": self.m, "size": len(left), "bijective": bijective, "dominance": dominance, "identity_ok": identity}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["eta", "phi_eta"])
        for eta in omega_enumerate(self.n, self.m):
            w.writerow(["".join(map(str, eta)), "".join(map(str, self.table[eta]))])
        return buf.getvalue()


def dominance_degrees(n: int, m: int) -> tuple[set, set]:
    """Distinct vertex degrees on each side of the dominance graph (brute force)."""
    left = omega_enumerate(n, m)
    right = omega_enumerate(m, n)
    ldeg = Counter()
    rdeg = Counter()
    for e in left:
        for z in right:
            if dominates(e, z):
                ldeg[e] += 1
                rdeg[z] += 1
    return set(ldeg[e] for e in left), set(rdeg[z] for z in right)


def _kuhn(adj: list[list[int]], n_right: int, match_r: list[int], match_l: list[int]) -> None:
    """Complete ``match_l``/``match_r`` to a maximum matching by augmenting paths."""
    stamp = [0] * n_right
    for epoch, root in enumerate(range(len(adj)), start=1):
        if match_l[root] != -1:
            continue
        # iterative DFS; path[i] is the right vertex entered from stack[i]
        stack = [(root, iter(adj[root]))]
        path: list[int] = []
        while stack:
            v, it = stack[-1]
            for r in it:
                if stamp[r] == epoch:
                    continue
                stamp[r] = epoch
                path.append(r)
                if match_r[r] == -1:
                    for (vv, _), rr in zip(stack, path):
                        match_l[vv] = rr
                        match_r[rr] = vv
                    stack = []
                else:
                    stack.append((match_r[r], iter(adj[match_r[r]])))
                break
            else:
                stack.pop()
                if path:
                    path.pop()


@lru_cache(maxsize=64)
def _matching_cached(n: int, m: int, fixed: tuple) -> FrobeniusMatching:
    left = omega_enumerate(n, m)
    if n == m and not fixed:
        return FrobeniusMatching(n, m, {w: w for w in left})
    right = omega_enumerate(m, n)
    r_index = {w: i for i, w in enumerate(right)}
    N = n + m
    adj = []
    for w in left:
        ones = [i for i in range(N) if w[i]]
        nb = []
        for keep in itertools.combinations(ones, m):
            z = [0] * N
            for i in keep:
                z[i] = 1
            nb.append(r_index[tuple(z)])
        adj.append(nb)
    l_index = {w: i for i, w in enumerate(left)}
    match_l = [-1] * len(left)
    match_r = [-1] * len(right)
    for eta, zeta in fixed:
        li, ri = l_index.get(eta), r_index.get(zeta)
        if li is None or ri is None or not dominates(eta, zeta) or match_r[ri] != -1:
            raise InvalidConfig(f"cannot fix pair {eta} -> {zeta}")
        match_l[li], match_r[ri] = ri, li
        adj[li] = [ri]
    # a fixed right vertex must not be reachable by other left vertices
    taken = {r_index[z] for _, z in fixed}
    fixed_l = {l_index[e] for e, _ in fixed}
    for i in range(len(adj)):
        if i not in fixed_l:
            adj[i] = [r for r in adj[i] if r not in taken]
    # greedy pass in canonical order, then augmenting paths
    for i, nb in enumerate(adj):
        if match_l[i] == -1:
            for r in nb:
                if match_r[r] == -1:
                    match_l[i], match_r[r] = r, i
                    break
    _kuhn(adj, len(right), match_r, match_l)
    if any(r == -1 for r in match_l):
        raise MatchingFailure(f"no perfect matching found for ({n}, {m})")
    return FrobeniusMatching(n, m, {left[i]: right[match_l[i]] for i in range(len(left))})


def frobenius_matching(n: int, m: int, fixed: Optional[Mapping] = None) -> FrobeniusMatching:
    """Dominance-respecting bijection ``Omega(n, m) -> Omega(m, n)``.

    Deterministic: a greedy pass in enumeration order followed by augmenting
    paths.  ``fixed`` pins chosen pairs before the search.
    """
    if not n >= m >= 0:
        raise InvalidConfig(f"need n >= m >= 0, got ({n}, {m})")
    if n + m > OMEGA_MAX_LENGTH:
        raise BudgetExceeded(f"word length {n + m} exceeds {OMEGA_MAX_LENGTH}")
    pinned = tuple(sorted((tuple(k), tuple(v)) for k, v in (fixed or {}).items()))
    return _matching_cached(n, m, pinned)


# ---------------------------------------------------------------------------
# surgery


MatchingProvider = Callable[[int, int], FrobeniusMatching]


def _translate_piece(piece: Word, u, sign: int) -> Word:
    return tuple(_shift(x, u, sign) for x in piece)


def _rebuild(ann: LoopAnnotation, replaced: dict) -> Word:
    out = []
    for i, lp in enumerate(ann.loops):
        out.extend(replaced.get(i, ann.word[lp.start : lp.stop]))
    return tuple(out)


@dataclass
class SurgeryReport:
    word: Word
    moved: list[int]
    exact: bool
    cases: dict = field(default_factory=dict)


def _proper_moves(ann: LoopAnnotation, kind, matching: MatchingProvider) -> tuple[dict, bool]:
    slots = [i for i in ann.isolated() if ann.loops[i].kind == kind]
    if not slots:
        return {}, True
    u = ann.u
    pieces = ann.pieces()
    c_loops = [i for i in slots if ann.loops[i].label == "C"]
    t_loops = [i for i in slots if ann.loops[i].label == "T"]
    n, m = len(c_loops), len(t_loops)
    out = {}
    if n >= m:
        eta = tuple(1 if ann.loops[i].label == "C" else 0 for i in slots)
        zeta = matching(n, m)(eta)
        ones = iter(t_loops)
        zeros = iter(c_loops)
        for slot, bit in zip(slots, zeta):
            if bit == 0:
                out[slot] = _translate_piece(pieces[next(zeros)], u, 1)
            else:
                out[slot] = _translate_piece(pieces[next(ones)], u, -1)
        return out, True
    for a, b in zip(c_loops, t_loops[:n]):
        out[b] = _translate_piece(pieces[a], u, 1)
        out[a] = _translate_piece(pieces[b], u, -1)
    return out, False


def surgery_proper(ann: LoopAnnotation, kind=None, matching: MatchingProvider = frobenius_matching) -> SurgeryReport:
    """Exchange isolated C/C~ loops of one type (all types when ``kind`` is None)."""
    _check_translates(ann)
    kinds = sorted({ann.loops[i].kind for i in ann.isolated()}) if kind is None else [tuple(_site(x) for x in kind)]
    replaced: dict = {}
    exact = True
    cases = {}
    for k in kinds:
        moves, ex = _proper_moves(ann, k, matching)
        replaced.update(moves)
        exact &= ex
        cases[k] = "matched" if ex else "deficit"
    return SurgeryReport(_rebuild(ann, replaced), sorted(replaced), exact, cases)


def _chain_moves(ann: LoopAnnotation, a: int, b: int) -> tuple[dict, str]:
    u = ann.u
    pieces = ann.pieces()
    idx = list(range(a, b))
    out = {}
    length = b - a
    if length % 2 == 0:
        for s, t in zip(idx[::2], idx[1::2]):
            out[s] = _translate_piece(pieces[t], u, 1 if ann.loops[t].label == "C" else -1)
            out[t] = _translate_piece(pieces[s], u, 1 if ann.loops[s].label == "C" else -1)
        return out, "balanced"
    if ann.loops[a].label == "C":
        for i in idx:
            out[i] = _translate_piece(pieces[i], u, 1 if ann.loops[i].label == "C" else -1)
        return out, "surplus-C"
    rest = idx[1:]
    for s, t in zip(rest[::2], rest[1::2]):
        out[s] = _translate_piece(pieces[t], u, 1 if ann.loops[t].label == "C" else -1)
        out[t] = _translate_piece(pieces[s], u, 1 if ann.loops[s].label == "C" else -1)
    return out, "surplus-translate"


def surgery_improper(ann: LoopAnnotation) -> SurgeryReport:
    """Rewrite every chain of consecutive C/C~ loops in place."""
    _check_translates(ann)
    replaced: dict = {}
    cases = {}
    exact = True
    for a, b in ann.chains:
        moves, case = _chain_moves(ann, a, b)
        replaced.update(moves)
        cases[(a, b)] = case
        exact &= case != "surplus-translate"
    return SurgeryReport(_rebuild(ann, replaced), sorted(replaced), exact, cases)


def _check_translates(ann: LoopAnnotation) -> None:
    if sorted(_shift(x, ann.u) for x in ann.cluster) != sorted(ann.translate):
        raise ClustersNotTranslates("recorded vector does not map the cluster onto its translate")


def apply_f(ann: LoopAnnotation, matching: MatchingProvider = frobenius_matching) -> SurgeryReport:
    """The composed map: all ``f_p`` together with ``f_i``.

    The two parts act on disjoint loops, so the order does not matter.
    """
    _check_translates(ann)
    p_cases = {}
    exact = True
    moves: dict = {}
    for k in sorted({ann.loops[j].kind for j in ann.isolated()}):
        mv, ex = _proper_moves(ann, k, matching)
        moves.update(mv)
        exact &= ex
        p_cases[k] = "matched" if ex else "deficit"
    for a, b in ann.chains:
        mv, case = _chain_moves(ann, a, b)
        moves.update(mv)
        exact &= case != "surplus-translate"
        p_cases[(a, b)] = case
    return SurgeryReport(_rebuild(ann, moves), sorted(moves), exact, p_cases)


# ---------------------------------------------------------------------------
# count relations and audits


def count_relations(before: Word, after: Word, cluster: Iterable, u, outside: Optional[Iterable] = None) -> dict:
    """Compare occurrence counts of a word and its image.

    ``exact``: counts on C and C~ are swapped exactly.  ``inequalities``: the
    image has at least as many visits to each ``T(x)`` as the source had to
    ``x``, and at most as many visits to ``x`` as the source had to ``T(x)``.
    ``outside_ok``: counts away from C and C~ are unchanged.
    """
    cb, ca = Counter(before), Counter(after)
    cluster = [_site(x) for x in cluster]
    exact = all(ca[_shift(x, u)] == cb[x] and ca[x] == cb[_shift(x, u)] for x in cluster)
    ineq = all(ca[_shift(x, u)] >= cb[x] and ca[x] <= cb[_shift(x, u)] for x in cluster)
    special = set(cluster) | {_shift(x, u) for x in cluster}
    sites = set(cb) | set(ca) if outside is None else {_site(x) for x in outside}
    outside_ok = all(ca[x] == cb[x] for x in sites if x not in special)
    return {"exact": exact, "inequalities": ineq, "outside_ok": outside_ok, "length_ok": len(before) == len(after)}


@dataclass
class AuditReport:
    family_size: int
    images: int
    max_preimages: int
    bound_violations: int
    worst: Optional[Word] = None
    rows: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["image", "preimages", "types", "improper", "bound"])
        for r in self.rows:
            w.writerow(r)
        return buf.getvalue()


def preimage_audit(family: Iterable, f: Callable[[Word], Word], bound: Callable[[Word], int], max_family: int = AUDIT_MAX_FAMILY, keep_rows: bool = False) -> AuditReport:
    """Count pre-images of every image of ``f`` over an enumerable family."""
    counts: Counter = Counter()
    size = 0
    for w in family:
        size += 1
        if size > max_family:
            raise BudgetExceeded(f"family larger than {max_family}")
        counts[f(tuple(w))] += 1
    violations = 0
    worst = None
    best = 0
    rows = []
    for img, c in counts.items():
        b = bound(img)
        if c > b:
            violations += 1
        if c > best:
            best, worst = c, img
        if keep_rows:
            rows.append(["|".join(",".join(map(str, x)) for x in img), c, "", "", b])
    return AuditReport(size, len(counts), best, violations, worst, rows)


@dataclass
class SurgeryFamily:
    """All words of given lengths over ``C``, ``C~`` and some outside sites."""

    cluster: tuple
    u: tuple
    outside: tuple
    outside_clusters: Optional[list] = None

    def __post_init__(self):
        self.cluster = tuple(_site(x) for x in self.cluster)
        self.outside = tuple(_site(x) for x in self.outside)
        self.u = tuple(int(v) for v in self.u)
        if self.outside_clusters is None:
            self.outside_clusters = [[x] for x in self.outside]

    @property
    def translate(self) -> tuple:
        return tuple(_shift(x, self.u) for x in self.cluster)

    @property
    def alphabet(self) -> tuple:
        return self.cluster + self.translate + self.outside

    def words(self, length: int) -> Iterable[Word]:
        return itertools.product(self.alphabet, repeat=length)

    def annotate(self, word: Word) -> LoopAnnotation:
        return annotate(word, self.outside_clusters, (self.cluster, self.translate))

    def f(self, word: Word) -> Word:
        return apply_f(self.annotate(word)).word

    def bound(self, word: Word) -> int:
        ann = self.annotate(word)
        return 2 ** (len(self.cluster) ** 2) * 2 ** ann.improper_count()


# ---------------------------------------------------------------------------
# trip weights


def _first_entry_block(task) -> np.ndarray:
    seed, block, count, start, marked, horizon = task
    d = len(start)
    rng = make_rng(seed, 3, block)
    table = step_table(d)
    M = np.array(marked, dtype=np.int64)
    pos = np.tile(np.asarray(start, dtype=np.int64), (count, 1))
    result = np.full(count, -1, dtype=np.int64)
    alive = np.ones(count, dtype=bool)
    done = 0
    while done < horizon and alive.any():
        m = min(256, horizon - done)
        idx = np.nonzero(alive)[0]
        traj = pos[idx][:, None, :] + np.cumsum(table[draw_moves(rng, d, (idx.size, m))], axis=1)
        eq = (traj[:, :, None, :] == M[None, None, :, :]).all(axis=3)  # (k, m, |M|)
        anyhit = eq.any(axis=2)
        has = anyhit.any(axis=1)
        first_t = np.argmax(anyhit, axis=1)
        which = np.argmax(eq[np.arange(idx.size), first_t], axis=1)
        result[idx[has]] = which[has]
        alive[idx[has]] = False
        pos[idx] = traj[:, -1, :]
        done += m
    return result


@dataclass(frozen=True)
class TripWeight:
    p_hat: float
    stderr: float
    unfinished: float
    samples: int


def trip_weight_mc(x, y, marked: Iterable, horizon: int, samples: int, seed: int = 0, workers: Optional[int] = None) -> TripWeight:
    """Estimate ``P_x(S_T = y)`` with ``T`` the first time ``>= 1`` in the marked set.

    ``unfinished`` is the fraction of walks that had not reached the marked set
    by the horizon (a bound on the truncation error).
    """
    marked = sorted({_site(v) for v in marked})
    x, y = _site(x), _site(y)
    if y not in marked:
        raise InvalidConfig("target site is not marked")
    if horizon <= 0 or samples <= 0:
        return TripWeight(0.0, 0.0, 1.0, max(samples, 0))
    tasks = [(seed, b, c, x, marked, horizon) for b, c in block_layout(samples, min(horizon, 4096))]
    res = np.concatenate(ordered_map(_first_entry_block, tasks, workers))
    j = marked.index(y)
    p = float(np.mean(res == j))
    return TripWeight(p, math.sqrt(p * (1 - p) / samples), float(np.mean(res < 0)), samples)
