"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v``; the verdict lines
go straight to the terminal even when output capture is on.
"""
import itertools
import math
import time
from collections import Counter
from fractions import Fraction

import numpy as np
import pytest

from siltlab.circuits import (
    SurgeryFamily,
    annotate,
    apply_f,
    count_relations,
    frobenius_matching,
    omega_enumerate,
    surgery_proper,
)
from siltlab.clusters import check_transform, iterate_to_single, partition, transform
from siltlab.local_time import accumulate, incremental_b, running_b
from siltlab.potential import gamma_d, sum_green_sq
from siltlab.rare_events import (
    PinnedEventSpec,
    Proposal,
    certificate_lower_bound,
    certificate_rate_bound,
    exact_mean,
    exact_norm2_law,
    exact_tail,
    fit_rate,
    importance_tail,
    naive_tail,
    pinned_estimate,
    pinned_origin_series,
    sample_norm2,
    zeta_q,
)
from siltlab.rwrs import SceneryConfig, exponent_table, gamma_inf, gamma_log_laplace, legendre_value
from siltlab.walk_core import make_rng, walk_batch


@pytest.fixture
def report(capsys):
    def emit(k, ok, detail, t0):
        with capsys.disabled():
            print(f"\nCriterion {k}: {'PASS' if ok else 'FAIL'}  {detail}  [{time.time() - t0:.1f}s]")
        assert ok, detail

    return emit


# ---------------------------------------------------------------------------
# 1. exact identity


def test_criterion_1_identity(report):
    t0 = time.time()
    rng = make_rng(2024, 1)
    # 10^4 paths per dimension, lengths log-uniform within each decade up to 10^5
    per_decade = [4000, 3000, 2000, 900, 100]
    bad = checked = longest = 0
    for d in (1, 3, 5):
        for k, count in enumerate(per_decade):
            ns = np.unique(np.round(10 ** rng.uniform(k, k + 1, size=count)).astype(int), return_counts=True)
            for n, reps in zip(*ns):
                n = int(min(n, 10**5))
                for path in walk_batch(rng, d, int(reps), n):
                    counts = accumulate(path, n).counts.astype(np.int64)
                    b = int(running_b(path[:n])[-1])
                    bad += int((counts * counts).sum()) != 2 * b + n
                    checked += 1
                    longest = max(longest, n)
        path = walk_batch(rng, d, 1, 10**5)[0]
        counts = accumulate(path, 10**5).counts.astype(np.int64)
        bad += int((counts * counts).sum()) != 2 * int(running_b(path[:-1])[-1]) + 10**5
        checked += 1
        longest = 10**5

    # incremental B against the pairwise count on 100 paths of 10^3 steps
    n = 1000
    mism = 0
    for path in walk_batch(make_rng(2024, 2), 5, 100, n):
        s = path[:n]
        eq = np.all(s[:, None, :] == s[None, :, :], axis=2)
        pairs = int(np.triu(eq, 1).sum())
        online = list(incremental_b(s))[-1]
        mism += not (pairs == online == int(running_b(s)[-1]))
    ok = bad == 0 and mism == 0
    report(1, ok, f"identity violations {bad}/{checked} paths (n<= {longest}); B mismatches {mism}/100", t0)


# ---------------------------------------------------------------------------
# 2. gamma_d from the Green's function


def test_criterion_2_gamma(report, green_ref, green_big):
    t0 = time.time()
    g_ref = gamma_d(green_ref)
    g0a, g0b = green_ref.values[0], green_big.values[0]
    conv = f"{g0a:.4g}" == f"{g0b:.4g}"
    n = 10**5
    vals = sample_norm2(5, n, 1000, seed=11) / n
    rel = abs(vals.mean() - g_ref) / g_ref
    ok = conv and rel <= 0.02
    report(2, ok, f"mean ||l||^2/n = {vals.mean():.5f} +- {vals.std(ddof=1) / math.sqrt(vals.size):.5f}, "
                  f"2G(0)-1 = {g_ref:.5f}, rel err {rel:.4f}; G(0) {g0a:.6f} vs {g0b:.6f}", t0)


# ---------------------------------------------------------------------------
# 3. mutual intersection mean


def test_criterion_3_mutual(report, green_ref):
    t0 = time.time()
    stats = zeta_q(5, 2.0, 10**5, 1000, seed=13)
    vals = np.array([s.zeta_value for s in stats])
    ref = sum_green_sq(green_ref)
    rel = abs(vals.mean() - ref) / ref
    se = vals.std(ddof=1) / math.sqrt(vals.size)
    report(3, rel <= 0.05, f"mean <l,l~> = {vals.mean():.4f} +- {se:.4f}, sum G^2 = {ref:.4f}, rel err {rel:.4f}", t0)


# ---------------------------------------------------------------------------
# 4. cluster invariants


def random_set(rng, L):
    size = int(rng.integers(1, 13))
    groups = int(rng.integers(1, size + 1))
    centres = rng.integers(0, 10**6 + 1, size=(groups, 5))
    spread = rng.choice([1, L, 4 * L, 100 * L, 10**6], size=groups)
    pts = set()
    while len(pts) < size:
        g = int(rng.integers(groups))
        p = centres[g] + rng.integers(-spread[g], spread[g] + 1, size=5)
        pts.add(tuple(int(v) for v in np.clip(p, 0, 10**6)))
    return sorted(pts)


def test_criterion_4_clusters(report):
    t0 = time.time()
    rng = make_rng(2024, 4)
    problems = Counter()
    transforms = 0
    for i in range(1000):
        L = 4 if i % 2 == 0 else 16
        pts = random_set(rng, L)
        part = partition(pts, L)
        problems["separation"] += bool(part.separation_violations())
        problems["diameter"] += any(dm > part.diameter_bound() for dm in part.diameters())
        if len(part.clusters) > 1:
            moved, rec = transform(part)
            chk = check_transform(part, moved, rec)
            transforms += 1
            problems["gap"] += not chk.gap_ok
            problems["factor_two"] += not chk.factor_two_ok
            problems["spectators"] += not chk.spectators_unchanged
        final, log = iterate_to_single(pts, L)
        problems["rounds"] += log.iterations > log.cluster_counts[0]
        problems["not_single"] += len(partition(final, L).clusters) != 1
        problems["size"] += len(final) != len(pts)
    total = sum(problems.values())
    report(4, total == 0, f"1000 sets, {transforms} transforms, violations {dict(problems)}", t0)


# ---------------------------------------------------------------------------
# 5. Frobenius matching


def dominance_matrix(n, m):
    left = np.array(omega_enumerate(n, m), dtype=np.int8)
    right = np.array(omega_enumerate(m, n), dtype=np.int8)
    # eta dominates zeta iff zeta <= eta letterwise
    return np.all(right[None, :, :] <= left[:, None, :], axis=2)


def test_criterion_5_frobenius(report):
    t0 = time.time()
    bad = []
    cases = 0
    for total in range(1, 15):
        for m in range(0, total // 2 + 1):
            n = total - m
            phi = frobenius_matching(n, m)
            left = omega_enumerate(n, m)
            right = omega_enumerate(m, n)
            ridx = {w: j for j, w in enumerate(right)}
            images = [ridx.get(phi(w)) for w in left]
            dom = dominance_matrix(n, m)
            bijective = None not in images and len(set(images)) == len(right) == len(left)
            dominance = bijective and all(dom[i, j] for i, j in enumerate(images))
            degree = math.comb(n, m)
            regular = set(dom.sum(axis=1)) == {degree} and set(dom.sum(axis=0)) == {degree}
            identity = n != m or all(phi(w) == w for w in left)
            if not (bijective and dominance and regular and identity):
                bad.append((n, m))
            cases += 1
    report(5, not bad, f"{cases} (n, m) pairs with n+m<=14, failures {bad}", t0)


# ---------------------------------------------------------------------------
# 6. surgery


FAMILIES = [
    (((0, 0),), ((1, 5),), 10),
    (((0, 0),), ((1, 5), (2, 5)), 8),
    (((0, 0), (1, 0)), ((1, 5),), 7),
    (((0, 0), (1, 0)), ((1, 5), (2, 5)), 6),
]


def worked_example_ok():
    C = ((0, 0), (1, 0))
    U = (10, 0)
    CT = tuple((x + 10, y) for x, y in C)
    Y = [(5, 5 + i) for i in range(8)]

    def T(piece, sign=1):
        return tuple((x + sign * U[0], y) for x, y in piece)

    L1, L2, L3 = ((0, 0), (1, 0)), ((0, 0), (0, 0), (1, 0)), ((0, 0), (1, 0), (0, 0), (1, 0))
    Lt1 = T(((0, 0), (1, 0), (1, 0)))
    seq = [Y[0], L1, Y[1], Y[2], L2, Y[3], Y[4], Lt1, Y[5], Y[6], L3, Y[7]]
    z = tuple(itertools.chain.from_iterable(p if isinstance(p[0], tuple) else [p] for p in seq))
    ann = annotate(z, [[y] for y in Y], (C, CT))
    kind = ((0, 0), (1, 0))
    if ann.nu() != {kind: (3, 1)} or ann.pattern(kind) != (1, 1, 0, 1):
        return False
    match = lambda n, m: frobenius_matching(n, m, fixed={(1, 1, 0, 1): (0, 1, 0, 0)})
    rep = surgery_proper(ann, matching=match)
    out = [Y[0], T(L1), Y[1], Y[2], T(Lt1, -1), Y[3], Y[4], T(L2), Y[5], Y[6], T(L3), Y[7]]
    expect = tuple(itertools.chain.from_iterable(p if isinstance(p[0], tuple) else [p] for p in out))
    return rep.word == expect and rep.exact


def test_criterion_6_surgery(report):
    t0 = time.time()
    words = 0
    relation_bad = audit_bad = 0
    worst = 0
    for cluster, outside, max_len in FAMILIES:
        fam = SurgeryFamily(cluster, (3, 0), outside)
        images = Counter()
        for length in range(1, max_len + 1):
            for w in fam.words(length):
                rep = apply_f(fam.annotate(w))
                rel = count_relations(w, rep.word, fam.cluster, fam.u, outside=fam.alphabet)
                ok = rel["length_ok"] and rel["outside_ok"] and rel["inequalities"]
                if rep.exact:
                    ok &= rel["exact"]
                relation_bad += not ok
                images[rep.word] += 1
                words += 1
        for img, c in images.items():
            a = fam.annotate(img)
            audit_bad += c > 2 ** len(a.types()) * 2 ** a.improper_count()
            worst = max(worst, c)
    example = worked_example_ok()
    ok = relation_bad == 0 and audit_bad == 0 and example
    report(6, ok, f"{words} words over alphabets of 3-6 letters; relation failures {relation_bad}, "
                  f"audit violations {audit_bad} (max pre-images {worst}); worked example {'ok' if example else 'wrong'}", t0)


# ---------------------------------------------------------------------------
# 7. estimator correctness on exact d = 1 instances

XI_GRID = [-0.5, 0.5, 1.5, 2.5, 3.5]
PROPOSALS = [Proposal(q_stay=0.4, alpha=2.0), Proposal(q_stay=0.55, alpha=2.0), Proposal(q_stay=0.3, alpha=1.5)]


def test_criterion_7_estimators(report):
    t0 = time.time()
    misses = []
    cert_bad = []
    checks = 0
    for n in range(1, 9):
        law = exact_norm2_law(1, n)
        mean = exact_mean(law)
        truth = [float(exact_tail(law, mean + Fraction(xi) * n)) for xi in XI_GRID]
        runs = [("naive", naive_tail(1, n, XI_GRID, 20000, seed=n, center=float(mean)))]
        for j, prop in enumerate(PROPOSALS):
            runs.append((f"is{j}", importance_tail(1, n, XI_GRID, prop, 20000, seed=100 + n, center=float(mean))))
        for name, ests in runs:
            for xi, p, e in zip(XI_GRID, truth, ests):
                got = 0.0 if e.censored else e.p_hat
                checks += 1
                if abs(got - p) > 3 * e.stderr + 1e-12:
                    misses.append((name, n, xi, got, p, e.stderr))
        for xi, p in zip(XI_GRID, truth):
            c = certificate_lower_bound(1, n, xi, 20000, seed=n, center=float(mean), gamma=float(mean) / n)
            if not c.censored and c.p_hat > p + 1e-12:
                cert_bad.append((n, xi, c.p_hat, p))
    ok = not misses and not cert_bad
    report(7, ok, f"{checks} estimator checks, outside 3 SE: {misses}; certificate above truth: {cert_bad}", t0)


# ---------------------------------------------------------------------------
# 8. rate bracket


def test_criterion_8_rate_bracket(report):
    t0 = time.time()
    d, xi = 5, 1.0
    ests, certs = [], []
    for n in (400, 1600, 6400):
        prop = Proposal(q_stay=0.7, alpha=3.0, visit_cap=math.ceil(math.sqrt(n)))
        ests.append(importance_tail(d, n, xi, prop, 20000, seed=8, pilot_samples=2000))
        certs.append(certificate_lower_bound(d, n, xi, 2000, seed=8))
    ps = [e.p_hat for e in ests]
    monotone = all(not e.censored for e in ests) and all(a >= b for a, b in zip(ps, ps[1:]))
    fit = fit_rate(ests, d, tol=0.1)
    bracket = 0 < fit.slope <= 1.1 * math.log(11)
    cert_ok = True
    lines = []
    for c in certs:
        bound = certificate_rate_bound(c)
        cert_ok &= (not c.censored) and c.normalized_rate <= bound * (1 + 1e-12)
        corr = bound - math.log(11)
        lines.append(f"n={c.n}: rate {c.normalized_rate:.4f} <= log 11 + {corr:.4f}")
    detail = (f"p_hat {['%.3g' % p for p in ps]} (ESS {[round(e.ess, 1) for e in ests]}), "
              f"slope {fit.slope:.4f} in (0, {1.1 * math.log(11):.4f}]; certificates: " + "; ".join(lines))
    report(8, monotone and bracket and cert_ok, detail, t0)


# ---------------------------------------------------------------------------
# 9. RWRS log-Laplace asymptotics


def test_criterion_9_gamma_asymptotics(report):
    t0 = time.time()
    cfg = SceneryConfig(2.0, 1.0)
    x = 0.01
    small = gamma_log_laplace(cfg, x) / x**2
    small_ok = abs(small - cfg.variance / 2) <= 0.05 * cfg.variance / 2
    X = 50.0
    a_star = 2.0
    large = gamma_log_laplace(cfg, X) / X**a_star
    g_inf = gamma_inf(2.0, 1.0)
    leg = legendre_value(2.0, 1.0, X) / X**a_star
    large_ok = abs(large - g_inf) <= 0.1 * g_inf and abs(leg - g_inf) <= 0.1 * g_inf
    p = exponent_table(2, 0.9, 5)
    table_ok = (p.zeta, p.b, p.alpha_star) == (Fraction(3, 5), Fraction(3, 10), 2)
    ok = small_ok and large_ok and table_ok
    report(9, ok, f"Gamma(0.01)/x^2 = {small:.6f} vs Var/2 = {cfg.variance / 2:.6f}; "
                  f"Gamma(50)/x^2 = {large:.6f}, Legendre {leg:.6f}, Gamma_inf = {g_inf:.6f}; "
                  f"(zeta, b, alpha*) = ({float(p.zeta)}, {float(p.b)}, {float(p.alpha_star)})", t0)


# ---------------------------------------------------------------------------
# 10. subadditivity probe (soft)


def test_criterion_10_subadditivity(report):
    t0 = time.time()
    xi = 0.2
    origin = ((0,) * 5,)
    ests, rows = [], []
    # the visit cap scales with n, so each length gets its own proposal
    for n in (100, 200, 400):
        prop = Proposal(kind="doob", visit_cap=math.ceil(n * xi))
        ests.append(pinned_estimate(PinnedEventSpec(origin, xi, 2.0, n), 4000, seed=10, proposal=prop))
    by_n = {e.n: e for e in ests}
    oracle = {n: -pinned_origin_series(5, n, xi) for n in by_n}
    for n in (100, 200):
        a, a2 = -by_n[n].log_p, -by_n[2 * n].log_p
        err, err2 = by_n[n].stderr / by_n[n].p_hat, by_n[2 * n].stderr / by_n[2 * n].p_hat
        slack = 3 * (err2 + 2 * err + math.log(2 * n))
        rows.append((n, a, a2, a2 - 2 * a, slack, a2 - 2 * a <= slack))
    parts = [f"n={n}: a_n {a:.3f}, a_2n {a2:.3f}, defect {df:.3f} <= {s:.3f}" for n, a, a2, df, s, _ in rows]
    parts += [f"a_{n} renewal {oracle[n]:.3f} vs MC {-by_n[n].log_p:.3f} (ESS {by_n[n].ess:.0f})" for n in sorted(by_n)]
    report(10, all(r[-1] for r in rows), "; ".join(parts), t0)
