"""Tail probabilities of the self-intersection excess and related functionals.

All estimators work on the statistic ``||l_n||_2^2`` (``l_n`` counts
``S_0..S_{n-1}``) and report :class:`TailEstimate` records.  Randomness is
organised in fixed replica blocks (see :func:`walk_core.block_layout`), each
with its own Philox substream, so results never depend on the worker count.
"""
from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Optional, Sequence

import numpy as np

from ._parallel import ordered_map
from .errors import InsufficientData, InvalidConfig
from .local_time import batch_norm2, site_keys
from .potential import green_profile, return_probabilities, transition_profiles
from .walk_core import block_layout, draw_moves, make_rng, step_table, walk_batch

# substream tags
_PILOT, _NAIVE, _IS, _CERT, _PIN, _MUTUAL = 11, 12, 13, 14, 15, 16

CSV_FIELDS = ["method", "d", "n", "xi", "p_hat", "stderr", "log_p", "normalized_rate", "ess"]


@dataclass
class TailEstimate:
    method: str
    d: int
    n: int
    xi: float
    p_hat: float
    stderr: float
    log_p: float
    normalized_rate: float
    ess: float
    samples: int = 0
    censored: bool = False
    upper: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def row(self) -> list:
        return [getattr(self, k) for k in CSV_FIELDS]


def estimates_to_csv(rows: Iterable[TailEstimate], extra_cols: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS + ["censored", "upper"] + list(extra_cols))
    for e in rows:
        w.writerow(
            [_fmt(v) for v in e.row()]
            + [int(e.censored), _fmt(e.upper)]
            + [_fmt(e.extra.get(c)) for c in extra_cols]
        )
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else v


def _speed(n: int, xi: float) -> float:
    return math.sqrt(n * xi) if n * xi > 0 else float("nan")


def _finish(method, d, n, xi, log_terms: np.ndarray, samples: int, extra=None) -> TailEstimate:
    """Build an estimate from per-sample log contributions (``-inf`` for misses)."""
    hits = np.isfinite(log_terms)
    extra = dict(extra or {})
    if not hits.any():
        upper = 3.0 / samples
        return TailEstimate(method, d, n, xi, float("nan"), float("nan"), float("nan"), float("nan"), 0.0,
                            samples, True, upper, extra)
    lmax = float(log_terms[hits].max())
    scaled = np.where(hits, np.exp(log_terms - lmax), 0.0)
    mean_s = scaled.mean()
    sd_s = scaled.std(ddof=1) if samples > 1 else 0.0
    log_p = lmax + math.log(mean_s)
    p = math.exp(log_p)
    stderr = math.exp(lmax) * sd_s / math.sqrt(samples)
    ess = float(scaled.sum() ** 2 / (scaled**2).sum())
    rate = -log_p / _speed(n, xi) if n * xi > 0 else float("nan")
    return TailEstimate(method, d, n, xi, min(p, 1.0), float(stderr), log_p, rate, ess, samples, False, None, extra)


# ---------------------------------------------------------------------------
# shared sampling


def _norm2_block(task) -> np.ndarray:
    d, n, seed, tag, block, count = task
    rng = make_rng(seed, tag, n, block)
    return batch_norm2(walk_batch(rng, d, count, n), n)[0]


def sample_norm2(d: int, n: int, samples: int, seed: int, tag: int = _NAIVE, workers=None) -> np.ndarray:
    """``||l_n||_2^2`` for ``samples`` independent walks."""
    tasks = [(d, n, seed, tag, b, c) for b, c in block_layout(samples, n)]
    out = ordered_map(_norm2_block, tasks, workers)
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def pilot_mean(d: int, n: int, samples: int, seed: int, workers=None) -> float:
    """Pilot estimate of ``E ||l_n||_2^2`` from its own substream."""
    if samples < 1:
        raise InsufficientData("pilot needs at least one sample")
    return float(sample_norm2(d, n, samples, seed, _PILOT, workers).mean())


# ---------------------------------------------------------------------------
# naive Monte Carlo


def naive_tail(
    d: int,
    n: int,
    xi,
    samples: int,
    seed: int = 0,
    center: Optional[float] = None,
    pilot_samples: Optional[int] = None,
    workers=None,
):
    """Fraction of walks with ``||l_n||^2 - E||l_n||^2 >= n xi``.

    ``E||l_n||^2`` is ``center`` if given, else a pilot mean over
    ``pilot_samples`` (default ``samples``) independent walks.  ``xi`` may be a
    sequence, in which case all levels share the same sample and a list is
    returned.
    """
    if samples < 1:
        raise InsufficientData("need at least one sample")
    if center is None:
        center = pilot_mean(d, n, pilot_samples or samples, seed, workers)
    vals = sample_norm2(d, n, samples, seed, _NAIVE, workers)
    grid = np.atleast_1d(np.asarray(xi, dtype=float))
    out = []
    for x in grid:
        hit = vals - center >= n * x
        k = int(hit.sum())
        logs = np.where(hit, 0.0, -np.inf)
        est = _finish("naive", d, n, float(x), logs, samples, {"center": center, "hits": k})
        if not est.censored:
            p = k / samples
            est.stderr = math.sqrt(p * (1 - p) / samples)
        out.append(est)
    return out if np.ndim(xi) else out[0]


# ---------------------------------------------------------------------------
# importance sampling


@dataclass(frozen=True)
class Proposal:
    """Importance-sampling proposal for walks started at the origin.

    ``kind="set"``: for the first ``min(n, floor(alpha sqrt n))`` steps, when
    the ball ``B(x)`` of candidate moves meets ``tilt_set`` in a proper
    nonempty subset, those candidates share total mass ``q_stay`` and the
    others ``1 - q_stay``.  ``q_stay = |B(x) & tilt_set| / (2d + 1)``
    recovers the plain walk.  ``tilted_steps`` overrides the ``alpha`` rule.
    With ``visit_cap`` set, a walk stops being tilted after that many visits
    to ``tilt_set`` (a predictable rule, so weights stay exact).

    ``kind="attract"``: as above, but the favoured candidates are those
    strictly closer to the origin in l1 (the origin itself when standing on
    it) and ``visit_cap`` counts visits to the origin.

    ``kind="doob"``: the walk moves with the Doob transform by the Green's
    function, ``Q(x, y) ~ p(x, y) G(y)``, until it has made ``visit_cap``
    visits to the origin.  Each return then costs exactly the escape factor
    ``1 - 1/G(0)`` in the weight.  Afterwards it is either free or, when the
    event pins ``S_n = 0``, a bridge ``Q(x, y) ~ p(x, y) p_{s-1}(y)`` back
    to the origin.  ``profile_radius`` is the box used for ``G`` and ``p_s``.
    ``defensive`` mixes in the plain walk with that probability; the weight
    is then ``P / (defensive P + (1 - defensive) Q)``, which is at most
    ``1 / defensive``.
    """

    q_stay: float = 0.5
    alpha: float = 1.0
    tilt_set: tuple = ()
    tilted_steps: Optional[int] = None
    visit_cap: Optional[int] = None
    kind: str = "set"
    profile_radius: int = 12
    defensive: float = 0.0

    def __post_init__(self):
        if self.kind not in ("set", "attract", "doob"):
            raise InvalidConfig(f"unknown proposal kind {self.kind!r}")
        if not 0 < self.q_stay < 1:
            raise InvalidConfig(f"q_stay must lie in (0, 1), got {self.q_stay}")
        if self.alpha < 0:
            raise InvalidConfig("alpha must be nonnegative")
        if not 0 <= self.defensive < 1:
            raise InvalidConfig(f"defensive must lie in [0, 1), got {self.defensive}")
        if self.defensive and self.kind != "doob":
            raise InvalidConfig("defensive mixing is only implemented for the doob proposal")
        if self.kind == "doob" and (self.visit_cap is None or self.visit_cap < 1):
            raise InvalidConfig("the doob proposal needs visit_cap >= 1")

    def steps(self, n: int) -> int:
        if self.tilted_steps is not None:
            return min(n, int(self.tilted_steps))
        return min(n, int(math.floor(self.alpha * math.sqrt(n))))

    def targets(self, d: int) -> np.ndarray:
        if not self.tilt_set:
            return np.zeros((1, d), dtype=np.int64)
        return np.array(self.tilt_set, dtype=np.int64).reshape(-1, d)


def tilted_walks(rng, d: int, m: int, n: int, prop: Proposal, tilted: Optional[int] = None, pin_end: bool = False):
    """Sample ``m`` walks from the proposal; returns positions and log weights."""
    if prop.kind == "doob":
        pos, log_r, _ = doob_paths(rng, d, m, n, prop, pin_end)
        return pos, mixture_log_weight(log_r, prop.defensive)
    table = step_table(d)
    k = 2 * d + 1
    K = prop.steps(n) if tilted is None else tilted
    tgt = prop.targets(d)
    lo = tgt.min(axis=0) - 1
    hi = tgt.max(axis=0) + 1
    tkeys = np.sort(site_keys(tgt, lo, hi))
    attract = prop.kind == "attract"
    pos = np.empty((m, n + 1, d), dtype=np.int64)
    pos[:, 0, :] = 0
    logw = np.zeros(m)
    log_target = -math.log(k)
    q = prop.q_stay
    cur = pos[:, 0, :].copy()
    visits = np.isin(site_keys(cur, lo, hi), tkeys) & np.all((cur >= lo) & (cur <= hi), axis=1)
    visits = visits.astype(np.int64)
    cap = np.inf if prop.visit_cap is None else prop.visit_cap
    for t in range(K):
        cand = cur[:, None, :] + table[None, :, :]  # (m, k, d)
        capped = visits >= cap
        if attract:
            r_cand = np.abs(cand).sum(axis=2)
            closer = r_cand < np.abs(cur).sum(axis=1)[:, None]
            in_set = closer | ((r_cand == 0) & ~capped[:, None])
        else:
            inside = np.all((cand >= lo) & (cand <= hi), axis=2)
            in_set = inside & np.isin(site_keys(cand, lo, hi), tkeys)
        s = in_set.sum(axis=1)
        tilt = (s > 0) & (s < k) & ~capped
        u1 = rng.random(m)
        u2 = rng.random(m)
        pick_set = tilt & (u1 < q)
        allowed = np.where(tilt[:, None], np.where(pick_set[:, None], in_set, ~in_set), True)
        cnt = allowed.sum(axis=1)
        j = np.minimum((u2 * cnt).astype(np.int64), cnt - 1)
        choice = np.argmax(np.cumsum(allowed, axis=1) > j[:, None], axis=1)
        chosen_in = in_set[np.arange(m), choice]
        prob = np.where(tilt, np.where(chosen_in, q / np.maximum(s, 1), (1 - q) / np.maximum(k - s, 1)), 1.0 / k)
        logw += log_target - np.log(prob)
        cur = cand[np.arange(m), choice]
        visits += ~np.any(cur, axis=1) if attract else chosen_in
        pos[:, t + 1, :] = cur
    if K < n:
        inc = table[draw_moves(rng, d, (m, n - K))]
        pos[:, K + 1 :, :] = np.cumsum(inc, axis=1) + cur[:, None, :]
    return pos, logw


def _pick(rng, probs: np.ndarray) -> np.ndarray:
    """One categorical draw per row of a row-stochastic matrix."""
    cum = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0]) * cum[:, -1]
    return np.minimum((cum <= u[:, None]).sum(axis=1), probs.shape[1] - 1)


def mixture_log_weight(log_r: np.ndarray, defensive: float) -> np.ndarray:
    """``log P/(lam P + (1 - lam) Q)`` from ``log_r = log Q/P``.

    Without mixing, ``Q = 0`` only happens in the bridge phase once the walk
    can no longer be back at the origin by time ``n``; the pinned event is
    then impossible and the weight is set to zero.
    """
    if not defensive:
        return np.where(np.isfinite(log_r), -log_r, -np.inf)
    with np.errstate(divide="ignore"):
        return -np.logaddexp(math.log(defensive), math.log1p(-defensive) + log_r)


def doob_paths(rng, d: int, m: int, n: int, prop: Proposal, pin_end: bool):
    """Sample from the (possibly defensive) Doob proposal.

    Returns positions, ``log Q/P`` of the pure Doob law along every path
    (``-inf`` where ``Q`` vanishes) and the mask of rows drawn from ``P``.
    """
    table = step_table(d)
    k = 2 * d + 1
    G = green_profile(d, prop.profile_radius)
    B = transition_profiles(d, prop.profile_radius, n) if pin_end else None
    plain = rng.random(m) < prop.defensive if prop.defensive else np.zeros(m, dtype=bool)
    pos = np.zeros((m, n + 1, d), dtype=np.int64)
    log_r = np.zeros(m)
    cur = pos[:, 0, :].copy()
    visits = np.ones(m, dtype=np.int64)
    rows = np.arange(m)
    uniform = np.full((m, k), 1.0 / k)
    for t in range(n):
        cand = cur[:, None, :] + table[None, :, :]
        phase1 = visits < prop.visit_cap
        q = uniform.copy()
        if phase1.any():
            h = G.at(cand[phase1])
            q[phase1] = h / h.sum(axis=1, keepdims=True)
        if B is not None and (~phase1).any():
            h = B.at(cand[~phase1], n - t - 1)
            z = h.sum(axis=1, keepdims=True)
            dead = z[:, 0] <= 0
            q[~phase1] = np.where(dead[:, None], 0.0, h / np.where(z > 0, z, 1.0))
        alive = q.sum(axis=1) > 0
        draw = np.where((plain | ~alive)[:, None], uniform, q)
        choice = _pick(rng, draw)
        with np.errstate(divide="ignore"):
            log_r += np.log(q[rows, choice]) + math.log(k)
        cur = cand[rows, choice]
        pos[:, t + 1, :] = cur
        if t + 1 < n:
            visits += ~np.any(cur, axis=1)
    return pos, log_r, plain


def _is_block(task):
    d, n, seed, block, count, prop = task
    rng = make_rng(seed, _IS, n, block)
    pos, logw = tilted_walks(rng, d, count, n, prop)
    return batch_norm2(pos, n)[0], logw


def importance_tail(
    d: int,
    n: int,
    xi,
    proposal: Proposal,
    samples: int,
    seed: int = 0,
    center: Optional[float] = None,
    pilot_samples: Optional[int] = None,
    workers=None,
):
    """Importance-sampling estimate of ``P(||l_n||^2 - E||l_n||^2 >= n xi)``.

    Weights are exact products of one-step likelihood ratios, kept in log
    form.  Accepts a sequence of levels (common samples) like
    :func:`naive_tail`.
    """
    if samples < 1:
        raise InsufficientData("need at least one sample")
    if center is None:
        center = pilot_mean(d, n, pilot_samples or samples, seed, workers)
    tasks = [(d, n, seed, b, c, proposal) for b, c in block_layout(samples, n)]
    parts = ordered_map(_is_block, tasks, workers)
    vals = np.concatenate([p[0] for p in parts])
    logw = np.concatenate([p[1] for p in parts])
    grid = np.atleast_1d(np.asarray(xi, dtype=float))
    out = []
    for x in grid:
        hit = vals - center >= n * x
        logs = np.where(hit, logw, -np.inf)
        est = _finish("importance", d, n, float(x), logs, samples,
                      {"center": center, "hits": int(hit.sum()), "q_stay": proposal.q_stay,
                       "alpha": proposal.alpha, "tilted_steps": proposal.steps(n)})
        if est.censored and hit.size:
            est.upper = 3.0 / samples * float(np.exp(logw.max()))
        out.append(est)
    return out if np.ndim(xi) else out[0]


# ---------------------------------------------------------------------------
# certificate


@dataclass(frozen=True)
class CertificateParts:
    """Exact ingredients of the certificate ``(2d+1)^{-(r-1)} * tail_fraction``."""

    r: int
    base: int
    tail_fraction: Fraction

    @property
    def log_value(self) -> float:
        if self.tail_fraction == 0:
            return float("-inf")
        return -(self.r - 1) * math.log(self.base) + math.log(self.tail_fraction)


def stay_length(n: int, xi: float, gamma: float) -> int:
    """Smallest integer ``r >= 1`` with ``r^2 >= n xi + r gamma``."""
    c = n * xi
    r = max(1, int(math.floor((gamma + math.sqrt(max(gamma * gamma + 4 * c, 0.0))) / 2)) - 1)
    while r * r < c + r * gamma:
        r += 1
    while r > 1 and (r - 1) ** 2 >= c + (r - 1) * gamma:
        r -= 1
    return r


def certificate_lower_bound(
    d: int,
    n: int,
    xi: float,
    pilot_samples: int,
    seed: int = 0,
    center: Optional[float] = None,
    gamma: Optional[float] = None,
    workers=None,
) -> TailEstimate:
    """Lower bound from the scenario "stay at the origin for ``r`` steps, then walk".

    Staying ``r`` steps puts ``r^2`` into ``||l_n||^2``; by pointwise
    superadditivity the event then holds as soon as an independent
    ``(n - r)``-step walk reaches ``E||l_n||^2 + n xi - r^2``.  ``gamma``
    defaults to the pilot estimate of ``E||l_n||^2 / n``.
    """
    if d < 1:
        raise InvalidConfig("dimension must be >= 1")
    if pilot_samples < 1:
        raise InsufficientData("pilot needs at least one sample")
    if center is None:
        center = pilot_mean(d, n, pilot_samples, seed, workers)
    if gamma is None:
        gamma = center / n if n else 1.0
    r = stay_length(n, xi, gamma)
    base = 2 * d + 1
    if r >= n:
        est = TailEstimate("certificate", d, n, xi, 0.0, 0.0, float("-inf"), float("inf"), 0.0,
                           pilot_samples, True, None, {"feasible": False, "r": r})
        return est
    rest = sample_norm2(d, n - r, pilot_samples, seed, _CERT, workers)
    need = center + n * xi - r * r
    hits = int((rest >= need).sum())
    parts = CertificateParts(r, base, Fraction(hits, pilot_samples))
    log_p = parts.log_value
    if not math.isfinite(log_p):
        return TailEstimate("certificate", d, n, xi, 0.0, 0.0, log_p, float("inf"), 0.0, pilot_samples, True,
                            None, {"feasible": True, "r": r, "parts": parts, "center": center})
    f = float(parts.tail_fraction)
    p = math.exp(log_p)
    se = math.exp(-(r - 1) * math.log(base)) * math.sqrt(f * (1 - f) / pilot_samples)
    return TailEstimate("certificate", d, n, xi, p, se, log_p, -log_p / _speed(n, xi), float(pilot_samples),
                        pilot_samples, False, None, {"feasible": True, "r": r, "parts": parts, "center": center})


def certificate_rate_bound(est: TailEstimate) -> float:
    """``log(2d+1) (r-1)/sqrt(n xi) - log(tail_fraction)/sqrt(n xi)``, the exact
    value the certificate's normalized rate must not exceed."""
    parts: CertificateParts = est.extra["parts"]
    s = _speed(est.n, est.xi)
    return math.log(parts.base) * (parts.r - 1) / s - math.log(parts.tail_fraction) / s


# ---------------------------------------------------------------------------
# rate fits


@dataclass
class RateFit:
    d: int
    slope: float
    residuals: list
    affine_slope: Optional[float]
    affine_intercept: Optional[float]
    points: list
    bracket_ok: bool
    tol: float

    def rows(self) -> list:
        return [[n, xi, x, y, r] for (n, xi, x, y), r in zip(self.points, self.residuals)]


def fit_rate(estimates: Sequence[TailEstimate], d: int, tol: float = 0.1) -> RateFit:
    """Least-squares fit of ``-log p`` against ``sqrt(n xi)`` through the origin.

    Also reports the affine fit when two or more distinct abscissae exist.
    ``bracket_ok`` checks ``0 < slope <= (1 + tol) log(2d + 1)``.
    """
    pts = [(e.n, e.xi, _speed(e.n, e.xi), -e.log_p) for e in estimates
           if not e.censored and math.isfinite(e.log_p) and e.n * e.xi > 0]
    if not pts:
        raise InsufficientData("no finite estimates to fit")
    x = np.array([p[2] for p in pts])
    y = np.array([p[3] for p in pts])
    slope = float(x @ y / (x @ x))
    resid = (y - slope * x).tolist()
    a_s = a_i = None
    if np.unique(x).size >= 2:
        A = np.vstack([x, np.ones_like(x)]).T
        (a_s, a_i), *_ = np.linalg.lstsq(A, y, rcond=None)
        a_s, a_i = float(a_s), float(a_i)
    ok = 0 < slope <= (1 + tol) * math.log(2 * d + 1)
    return RateFit(d, slope, resid, a_s, a_i, pts, ok, tol)


def rate_scan(
    d: int,
    xi_grid: Sequence[float],
    n_grid: Sequence[int],
    method: str,
    samples: int,
    seed: int = 0,
    proposal: Optional[Proposal] = None,
    tol: float = 0.1,
    workers=None,
) -> tuple[list[TailEstimate], RateFit]:
    """Run one estimator over a grid and fit the normalized rate."""
    ests: list[TailEstimate] = []
    for n in n_grid:
        if method == "naive":
            ests += naive_tail(d, n, list(xi_grid), samples, seed, workers=workers)
        elif method == "importance":
            ests += importance_tail(d, n, list(xi_grid), proposal or Proposal(), samples, seed, workers=workers)
        elif method == "certificate":
            ests += [certificate_lower_bound(d, n, x, samples, seed, workers=workers) for x in xi_grid]
        else:
            raise InvalidConfig(f"unknown method {method!r}")
    return ests, fit_rate(ests, d, tol)


# ---------------------------------------------------------------------------
# pinned events and subadditivity


@dataclass(frozen=True)
class PinnedEventSpec:
    """``{ ||1_sites l_n||_q >= n xi, S_n = 0 }``."""

    sites: tuple
    xi: float
    q: float
    n: int

    def __post_init__(self):
        if not self.sites:
            raise InvalidConfig("site set is empty")
        d = len(self.sites[0])
        if tuple([0] * d) not in {tuple(s) for s in self.sites}:
            raise InvalidConfig("site set must contain the origin")
        if self.q < 1:
            raise InvalidConfig("q must be >= 1")

    @property
    def d(self) -> int:
        return len(self.sites[0])

    def statistic(self, pos: np.ndarray) -> np.ndarray:
        """``||1_sites l_n||_q`` for each path in a batch."""
        n = self.n
        S = np.array(self.sites, dtype=np.int64)
        lo = np.minimum(S.min(axis=0), pos[:, :n].min(axis=(0, 1)))
        hi = np.maximum(S.max(axis=0), pos[:, :n].max(axis=(0, 1)))
        keys = site_keys(pos[:, :n], lo, hi)
        skeys = site_keys(S, lo, hi)
        counts = np.stack([(keys == k).sum(axis=1) for k in skeys], axis=1).astype(float)
        return (counts**self.q).sum(axis=1) ** (1.0 / self.q)

    def occurs(self, pos: np.ndarray) -> np.ndarray:
        end0 = np.all(pos[:, self.n, :] == 0, axis=1)
        return end0 & (self.statistic(pos) >= self.n * self.xi - 1e-9)


def _pin_block(task):
    spec, prop, seed, block, count = task
    rng = make_rng(seed, _PIN, spec.n, block)
    if prop is None:
        pos = walk_batch(rng, spec.d, count, spec.n)
        logw = np.zeros(count)
    else:
        pos, logw = tilted_walks(rng, spec.d, count, spec.n, prop, tilted=spec.n, pin_end=True)
    return np.where(spec.occurs(pos), logw, -np.inf)


def pinned_estimate(spec: PinnedEventSpec, samples: int, seed: int = 0, proposal: Optional[Proposal] = None, workers=None) -> TailEstimate:
    """Estimate ``P(A_n)``; with a proposal every step is tilted."""
    tasks = [(spec, proposal, seed, b, c) for b, c in block_layout(samples, spec.n)]
    logs = np.concatenate(ordered_map(_pin_block, tasks, workers))
    est = _finish("pinned" if proposal is None else "pinned-importance", spec.d, spec.n, spec.xi, logs, samples)
    return est


def pinned_origin_series(d: int, n: int, xi: float) -> float:
    """``log P(l_n(0) >= n xi, S_n = 0)`` from the renewal decomposition at the origin.

    With ``f`` the first-return law, the probability is ``sum_{j >= k} f^{*j}(n)``
    where ``k = ceil(n xi)``.  Return probabilities are exact closed-walk counts.
    """
    k = max(1, math.ceil(n * xi - 1e-9))
    if k > n:
        return float("-inf")
    u = return_probabilities(d, n)
    f = np.zeros(n + 1)
    for t in range(1, n + 1):
        f[t] = u[t] - f[1:t] @ u[t - 1 : 0 : -1]
    # A_j = f^{*j}, renormalised each round to avoid underflow
    A = f.copy()
    log_scale = 0.0
    total_log = float("-inf")
    for j in range(1, n + 1):
        if j >= k and A[n] > 0:
            total_log = np.logaddexp(total_log, math.log(A[n]) + log_scale)
        A = np.convolve(A, f)[: n + 1]
        peak = A.max()
        if peak <= 0:
            break
        A /= peak
        log_scale += math.log(peak)
    return float(total_log)


@dataclass
class SubadditivityRow:
    n: int
    a_n: float
    a_2n: float
    err_n: float
    err_2n: float
    defect: float  # a_2n - 2 a_n
    slack: float
    ok: bool


def subadditivity_probe(
    specs: Sequence[PinnedEventSpec],
    samples: int,
    seed: int = 0,
    proposal: Optional[Proposal] = None,
    slack_factor: float = 1.0,
    workers=None,
) -> tuple[list[TailEstimate], list[SubadditivityRow]]:
    """Estimate ``a_n = -log P(A_n)`` and compare ``a_{2n}`` with ``2 a_n``.

    The allowed slack for each doubling is
    ``3 * (err(a_2n) + 2 err(a_n) + slack_factor * log(2n))`` where the
    errors are delta-method standard errors ``stderr / p``.
    """
    ests = {s.n: pinned_estimate(s, samples, seed, proposal, workers) for s in specs}
    rows = []
    for n, e in sorted(ests.items()):
        if 2 * n not in ests:
            continue
        e2 = ests[2 * n]
        if e.censored or e2.censored:
            rows.append(SubadditivityRow(n, float("nan"), float("nan"), float("nan"), float("nan"), float("nan"), float("nan"), False))
            continue
        a, a2 = -e.log_p, -e2.log_p
        err, err2 = e.stderr / e.p_hat, e2.stderr / e2.p_hat
        slack = 3 * (err2 + 2 * err + slack_factor * math.log(2 * n))
        rows.append(SubadditivityRow(n, a, a2, err, err2, a2 - 2 * a, slack, a2 - 2 * a <= slack))
    return list(ests.values()), rows


# ---------------------------------------------------------------------------
# mutual intersections


@dataclass
class MutualStats:
    q: float
    T: int
    zeta_value: float
    filtered: Optional[float] = None
    filter_threshold: Optional[float] = None
    sites: Optional[np.ndarray] = None
    contributions: Optional[np.ndarray] = None


def _field(pos: np.ndarray, lo, hi):
    keys = site_keys(pos, lo, hi)
    return np.unique(keys, return_counts=True)


def mutual_from_paths(pa: np.ndarray, pb: np.ndarray, q: float, thresholds=None, keep_sites: bool = False) -> MutualStats:
    """``sum_z l(z) l~(z)^(q-1)`` for two position arrays (each of length ``T``)."""
    T = pa.shape[0]
    lo = np.minimum(pa.min(axis=0), pb.min(axis=0))
    hi = np.maximum(pa.max(axis=0), pb.max(axis=0))
    ka, ca = _field(pa, lo, hi)
    kb, cb = _field(pb, lo, hi)
    common, ia, ib = np.intersect1d(ka, kb, assume_unique=True, return_indices=True)
    la = ca[ia].astype(float)
    lb = cb[ib].astype(float)
    contrib = la * lb ** (q - 1)
    zeta = float(math.fsum(contrib)) if q != 2 else float(int((ca[ia] * cb[ib]).sum()))
    st = MutualStats(q, T, zeta)
    if thresholds is not None:
        mins = np.minimum(la, lb)
        th = np.atleast_1d(np.asarray(thresholds, dtype=float))
        st.filter_threshold = th if th.size > 1 else float(th[0])
        vals = np.array([math.fsum(contrib[mins < t]) for t in th])
        st.filtered = vals if th.size > 1 else float(vals[0])
    if keep_sites:
        st.sites = common
        st.contributions = contrib
    return st


def _mutual_block(task):
    d, q, T, seed, block, count, thresholds = task
    rng = make_rng(seed, _MUTUAL, T, block)
    out = []
    for _ in range(count):
        w = walk_batch(rng, d, 2, T)
        out.append(mutual_from_paths(w[0, :T], w[1, :T], q, thresholds))
    return out


def zeta_q(d: int, q: float, T: int, samples: int, seed: int = 0, filter_eps=None, workers=None) -> list[MutualStats]:
    """Mixed mutual intersection of two independent ``T``-step walks, per replica pair.

    With ``filter_eps`` (scalar or grid) the filtered sum over sites with
    ``min(l, l~) < eps sqrt(T)`` is also reported.
    """
    if not 1 < q <= 2:
        raise InvalidConfig(f"q must lie in (1, 2], got {q}")
    thresholds = None
    if filter_eps is not None:
        thresholds = np.atleast_1d(np.asarray(filter_eps, dtype=float)) * math.sqrt(T)
        if thresholds.size == 1:
            thresholds = float(thresholds[0])
    tasks = [(d, q, T, seed, b, c, thresholds) for b, c in block_layout(samples, 2 * T)]
    return [s for part in ordered_map(_mutual_block, tasks, workers) for s in part]


@dataclass
class MomentReport:
    q: float
    moments: list
    fitted: list
    ratio: float
    bounded: bool
    jensen_ok: bool


def moment_growth_check(values, q: float, max_order: int = 4, max_ratio: float = 10.0) -> MomentReport:
    """Sample moments ``m_k`` and ``C_k = (m_k / (k!)^q)^(1/k)`` for ``k <= max_order``.

    ``bounded`` holds when ``max C_k / C_1 <= max_ratio``.  ``values`` are the
    per-replica statistics (a sequence of floats or of :class:`MutualStats`).
    """
    if not 1 <= max_order <= 4:
        raise InvalidConfig("max_order must lie in 1..4")
    x = np.array([v.zeta_value if isinstance(v, MutualStats) else float(v) for v in values], dtype=float)
    if x.size < 2:
        raise InsufficientData("need at least two samples")
    moments = [float(np.mean(x**k)) for k in range(1, max_order + 1)]
    fitted = [(m / math.factorial(k) ** q) ** (1.0 / k) if m > 0 else 0.0 for k, m in enumerate(moments, start=1)]
    ratio = max(fitted) / fitted[0] if fitted[0] > 0 else float("inf")
    jensen = max_order < 2 or moments[1] >= moments[0] ** 2 * (1 - 1e-12)
    return MomentReport(q, moments, fitted, ratio, ratio <= max_ratio, jensen)


# ---------------------------------------------------------------------------
# exhaustive oracle for tiny walks


def enumerate_paths(d: int, n: int) -> np.ndarray:
    """All ``(2d+1)^n`` paths of ``n`` steps as an array ``(count, n+1, d)``."""
    k = 2 * d + 1
    if k**n > 5_000_000:
        raise InvalidConfig("too many paths to enumerate")
    table = step_table(d)
    moves = np.array(list(itertools.product(range(k), repeat=n)), dtype=np.int64).reshape(-1, n)
    pos = np.zeros((moves.shape[0], n + 1, d), dtype=np.int64)
    if n:
        pos[:, 1:, :] = np.cumsum(table[moves], axis=1)
    return pos


def exact_norm2_law(d: int, n: int) -> dict:
    """Exact law of ``||l_n||^2`` as ``{value: Fraction}``."""
    pos = enumerate_paths(d, n)
    vals, counts = np.unique(batch_norm2(pos, n)[0], return_counts=True)
    total = (2 * d + 1) ** n
    return {int(v): Fraction(int(c), total) for v, c in zip(vals, counts)}


def exact_tail(law: dict, threshold: float) -> Fraction:
    return sum((p for v, p in law.items() if v >= threshold), Fraction(0))


def exact_mean(law: dict) -> Fraction:
    return sum((v * p for v, p in law.items()), Fraction(0))
