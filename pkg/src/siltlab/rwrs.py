"""Random walk in random scenery.

The scenery ``eta`` is an i.i.d. field with the exponential-power law
``p(t) ~ exp(-c |t|^alpha)``: symmetric, unimodal and with tail exponent
exactly ``alpha``.  It is never materialised.  Each site value is a pure
function of ``(seed, replica, z)``: a splitmix64 hash gives a uniform ``v``
and a sign bit, and ``|eta| = (Q^{-1}(1/alpha, v) / c)^{1/alpha}`` where
``Q^{-1}`` inverts the regularised upper incomplete gamma function.  This is
the gamma-power representation: ``c |eta|^alpha ~ Gamma(1/alpha, 1)``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np
from scipy import integrate, optimize
from scipy.special import gammainccinv, gammaln

from ._parallel import ordered_map
from .errors import InsufficientData, InvalidConfig
from .local_time import accumulate, site_keys
from .rare_events import Proposal, TailEstimate, _finish, doob_paths, mixture_log_weight, tilted_walks
from .walk_core import WalkConfig, block_layout, make_rng, simulate, walk_batch

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_RWRS = 17
# share of replicas drawn from the unbiased law in the default importance sampler
DEFENSIVE = 0.2


@dataclass(frozen=True)
class SceneryConfig:
    """Exponential-power scenery; ``constant`` replaces it by a flat field (for tests)."""

    alpha: float = 2.0
    c_alpha: float = 1.0
    seed: int = 0
    constant: Optional[float] = None

    def __post_init__(self):
        if not self.alpha > 1:
            raise InvalidConfig(f"alpha must exceed 1, got {self.alpha}")
        if not self.c_alpha > 0:
            raise InvalidConfig(f"c_alpha must be positive, got {self.c_alpha}")

    @property
    def log_norm(self) -> float:
        """``log`` of the density normaliser ``2 Gamma(1 + 1/alpha) c^{-1/alpha}``."""
        a = self.alpha
        return math.log(2.0) + gammaln(1 + 1 / a) - math.log(self.c_alpha) / a

    def density(self, t):
        t = np.asarray(t, dtype=float)
        return np.exp(-self.c_alpha * np.abs(t) ** self.alpha - self.log_norm)

    def log_density(self, t):
        t = np.asarray(t, dtype=float)
        return -self.c_alpha * np.abs(t) ** self.alpha - self.log_norm

    @property
    def variance(self) -> float:
        a, c = self.alpha, self.c_alpha
        return math.exp(gammaln(3 / a) - gammaln(1 / a)) / c ** (2 / a)


# ---------------------------------------------------------------------------
# hash-keyed field


def _splitmix(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (x + np.uint64(0x9E3779B97F4A7C15)) & _MASK
        z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _MASK
        z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _MASK
        return z ^ (z >> np.uint64(31))


def _site_hash(seed: int, replica, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.int64)
    h = _splitmix(np.full(z.shape[:-1], np.uint64(seed & 0xFFFFFFFFFFFFFFFF), dtype=np.uint64))
    h = _splitmix(h ^ np.asarray(replica, dtype=np.int64).astype(np.uint64))
    for i in range(z.shape[-1]):
        h = _splitmix(h ^ z[..., i].astype(np.uint64))
    return h


def sample_eta(config: SceneryConfig, z, replica=0) -> np.ndarray:
    """Scenery value(s) at site(s) ``z`` (last axis = coordinates).

    ``replica`` (scalar or broadcastable to the site shape) selects an
    independent scenery under the same seed.
    """
    z = np.asarray(z, dtype=np.int64)
    scalar = z.ndim == 1
    if scalar:
        z = z[None, :]
    if config.constant is not None:
        out = np.full(z.shape[:-1], float(config.constant))
    else:
        h = _site_hash(config.seed, replica, z)
        v = ((h >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
        sign = np.where(_splitmix(h) >> np.uint64(63), -1.0, 1.0)
        a = config.alpha
        out = sign * (gammainccinv(1.0 / a, v) / config.c_alpha) ** (1.0 / a)
    return out[0] if scalar else out


def tail_quadrature(config: SceneryConfig, t: float) -> float:
    """``P(eta > t)`` by numerical integration of the density."""
    if t <= 0:
        return 0.5 + integrate.quad(config.density, t, 0)[0]
    val, _ = integrate.quad(config.density, t, np.inf)
    return val


# ---------------------------------------------------------------------------
# log-Laplace transform


@dataclass
class LogLaplace:
    xs: np.ndarray
    values: np.ndarray
    errors: np.ndarray
    gamma0: float  # Var / 2
    gamma_inf: float

    def second_differences(self) -> np.ndarray:
        return self.values[2:] - 2 * self.values[1:-1] + self.values[:-2]

    def convex(self, tol: Optional[float] = None) -> bool:
        tol = float(self.errors.max()) * 4 + 1e-12 if tol is None else tol
        return bool(np.all(self.second_differences() >= -tol))


def _log_laplace(config: SceneryConfig, x: float) -> tuple[float, float]:
    a, c = config.alpha, config.c_alpha
    scale = c ** (-1 / a)
    if x * scale < 0.5:
        # E[e^{x eta}] - 1 = 2 int_0^inf (cosh(xt) - 1) p(t) dt and 2 (cosh(y) - 1) = e^y (1 - e^{-y})^2
        f = lambda t: math.expm1(-x * t) ** 2 * math.exp(x * t - c * t**a - config.log_norm)
        m, err = integrate.quad(f, 0, np.inf, epsabs=0, epsrel=1e-12, limit=200)
        return math.log1p(m), err / (1 + m)
    # shift by the Laplace maximiser of x t - c t^a
    ts = (x / (a * c)) ** (1 / (a - 1))
    fs = x * ts - c * ts**a
    width = 1.0 / math.sqrt(c * a * (a - 1) * ts ** (a - 2))
    g = lambda t: math.exp(x * t - c * abs(t) ** a - fs)
    parts = [(-np.inf, 0.0), (0.0, ts), (ts, np.inf)]
    tot = 0.0
    err = 0.0
    for lo, hi in parts:
        with warnings.catch_warnings():
            # roundoff warnings are reflected in the returned error estimate
            warnings.simplefilter("ignore", integrate.IntegrationWarning)
            v, e = integrate.quad(g, lo, hi, epsabs=0, epsrel=1e-11, limit=200, points=None if np.isinf(lo) or np.isinf(hi) else [min(hi, lo + width)])
        tot += v
        err += e
    if not np.isfinite(tot) or tot <= 0:
        raise ArithmeticError("divergent log-Laplace integral")
    return fs + math.log(tot) - config.log_norm, err / tot


def gamma_log_laplace(config: SceneryConfig, x: float, with_error: bool = False):
    """``Gamma(x) = log E exp(x eta(0))`` by quadrature (``x >= 0``)."""
    if x < 0:
        raise InvalidConfig("x must be nonnegative")
    if x == 0:
        return (0.0, 0.0) if with_error else 0.0
    val, err = _log_laplace(config, float(x))
    return (val, err) if with_error else val


def gamma_inf(alpha: float, c_alpha: float) -> float:
    """Leading constant of ``Gamma(x) ~ Gamma_inf x^{alpha*}`` as ``x -> infinity``."""
    a_star = alpha / (alpha - 1)
    return 1.0 / (a_star * (alpha * c_alpha) ** (a_star - 1))


def legendre_value(alpha: float, c_alpha: float, x: float) -> float:
    """``sup_t (x t - c t^alpha)`` by bounded scalar maximisation."""
    hi = 2.0 * (x / c_alpha) ** (1 / (alpha - 1)) + 1.0
    res = optimize.minimize_scalar(lambda t: -(x * t - c_alpha * t**alpha), bounds=(0.0, hi),
                                   method="bounded", options={"xatol": 1e-12})
    return float(-res.fun)


def log_laplace_grid(config: SceneryConfig, xs: Sequence[float]) -> LogLaplace:
    xs = np.asarray(xs, dtype=float)
    pairs = [gamma_log_laplace(config, float(x), with_error=True) for x in xs]
    return LogLaplace(xs, np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs]),
                      config.variance / 2, gamma_inf(config.alpha, config.c_alpha))


# ---------------------------------------------------------------------------
# exponents


@dataclass(frozen=True)
class RwrsParams:
    alpha: object
    beta: object
    d: int
    zeta: object
    b: object
    alpha_star: object
    region_ii: bool

    @property
    def alpha_star_above_critical(self) -> bool:
        """``alpha* > d/(d-2)``; expected whenever ``alpha < d/2``."""
        return self.d > 2 and self.alpha_star > Fraction(self.d, self.d - 2)


def _rational(v) -> Fraction:
    if isinstance(v, float):
        if not math.isfinite(v):
            raise InvalidConfig("exponents must be finite")
        return Fraction(repr(v))
    return Fraction(v)


def exponent_table(alpha, beta, d: int = 5) -> RwrsParams:
    """Speeds and exponents for ``P(<eta, l_n> >= xi n^beta)``.

    Arithmetic is exact: ints and Fractions are kept, and floats are read
    as the shortest decimal they print as (``0.9`` becomes ``9/10``).
    ``zeta`` is formed as ``beta - b`` so that identity is exact.
    """
    alpha, beta = _rational(alpha), _rational(beta)
    if alpha <= 1:
        raise InvalidConfig("alpha must exceed 1")
    b = beta / (alpha + 1)
    zeta = beta - b
    a_star = alpha / (alpha - 1)
    region = (1 < alpha < Fraction(d, 2)) and (
        1 - 1 / (alpha + 2) < beta < 1 + 1 / alpha
    )
    return RwrsParams(alpha, beta, d, zeta, b, a_star, bool(region))


# ---------------------------------------------------------------------------
# the RWRS itself


@dataclass
class RwrsValue:
    path_sum: float
    inner_product: float
    n: int

    @property
    def agree(self) -> bool:
        return self.path_sum == self.inner_product


def rwrs_value(walk: WalkConfig, scenery: SceneryConfig, n: Optional[int] = None, replica: int = 0) -> RwrsValue:
    """``<eta, l_n>`` computed both as ``sum_t eta(S_t)`` and ``sum_z eta(z) l_n(z)``.

    Both sums are evaluated exactly (rationals) and rounded once, so the two
    forms agree bit for bit.
    """
    n = walk.n_steps if n is None else n
    if n == 0:
        return RwrsValue(0.0, 0.0, 0)
    path = simulate(walk, max_positions=n + 1)
    pos = path.positions[:n]
    along = sample_eta(scenery, pos, replica)
    path_sum = float(math.fsum(along.tolist()))
    field_ = accumulate(pos, n)
    eta = sample_eta(scenery, field_.sites, replica)
    exact = sum((Fraction(float(e)) * int(c) for e, c in zip(eta, field_.counts)), Fraction(0))
    return RwrsValue(path_sum, float(exact), n)


# ---------------------------------------------------------------------------
# moderate-deviation scan


def _site_counts(pos: np.ndarray, n: int):
    """Distinct sites and counts of each row: returns (row index, site, count)."""
    m, _, d = pos.shape
    P = pos[:, :n]
    tag = np.broadcast_to(np.arange(m, dtype=np.int64)[:, None, None], (m, n, 1))
    keys = site_keys(np.concatenate([tag, P], axis=2))
    _, first, counts = np.unique(keys.ravel(), return_index=True, return_counts=True)
    rows = first // n
    sites = P.reshape(-1, d)[first]
    return rows, sites, counts


def _md_block(task):
    d, n, params, scenery, level, method, prop, seed, block, count, eps = task
    rng = make_rng(seed, _RWRS, n, block)
    plain = np.ones(count, dtype=bool)
    log_r = np.zeros(count)
    if method == "importance":
        if prop.kind == "doob":
            pos, log_r, plain = doob_paths(rng, d, count, n, prop, False)
        else:
            pos, logw = tilted_walks(rng, d, count, n, prop)
            log_r = -logw
            plain = np.zeros(count, dtype=bool)
    else:
        pos = walk_batch(rng, d, count, n)
    rows, sites, counts = _site_counts(pos, n)
    replica = block * (1 << 20) + rows
    eta = sample_eta(scenery, sites, replica)
    if method == "importance" and scenery.constant is None:
        # deterministic mean shift given the local times: mu_z ~ l(z)^{1/(alpha-1)},
        # scaled so that sum_z l(z) mu_z hits the level on average
        a = float(params.alpha)
        shape = counts.astype(float) ** (1.0 / (a - 1.0))
        denom = np.bincount(rows, weights=counts * shape, minlength=count)
        kappa = level / np.where(denom > 0, denom, 1.0)
        mu = kappa[rows] * shape
        eta = np.where(plain[rows], eta, eta + mu)
        log_r += np.bincount(rows, weights=scenery.log_density(eta - mu) - scenery.log_density(eta), minlength=count)
    logw = mixture_log_weight(log_r, prop.defensive if method == "importance" else 0.0)
    value = np.bincount(rows, weights=eta * counts, minlength=count)
    nb = float(params.b)
    high = counts >= n ** (nb + eps)
    low = counts < n ** (nb - eps)
    parts = np.stack([
        np.bincount(rows, weights=np.where(high, eta * counts, 0.0), minlength=count),
        np.bincount(rows, weights=np.where(~high & ~low, eta * counts, 0.0), minlength=count),
        np.bincount(rows, weights=np.where(low, eta * counts, 0.0), minlength=count),
    ], axis=1)
    return value, logw, parts


def md_scan(
    params: RwrsParams,
    xi: float,
    n_grid: Sequence[int],
    samples: int,
    sampler: str = "naive",
    scenery: Optional[SceneryConfig] = None,
    seed: int = 0,
    proposal: Optional[Proposal] = None,
    level_eps: float = 0.1,
    workers=None,
) -> list[TailEstimate]:
    """Estimate ``P(<eta, l_n> >= xi n^beta)`` over ``n_grid`` (annealed: fresh walk and scenery per replica).

    ``normalized_rate`` is ``-log p / n^zeta``.  ``extra`` carries the
    weighted means of the partial sums over the high (``l >= n^{b+eps}``),
    middle and low (``l < n^{b-eps}``) level sets among hits.
    """
    if sampler not in ("naive", "importance"):
        raise InvalidConfig(f"unknown sampler {sampler!r}")
    if samples < 1:
        raise InsufficientData("need at least one sample")
    scenery = scenery or SceneryConfig(float(params.alpha), 1.0, seed)
    if abs(scenery.alpha - float(params.alpha)) > 1e-12:
        raise InvalidConfig("scenery alpha differs from the exponent table")
    out = []
    for n in n_grid:
        level = xi * n ** float(params.beta)
        prop = proposal
        if sampler == "importance" and prop is None:
            # confinement: about n^zeta returns to the origin, then free
            prop = Proposal(kind="doob", visit_cap=max(1, math.ceil(n ** float(params.zeta))), defensive=DEFENSIVE)
        tasks = [(params.d, n, params, scenery, level, sampler, prop, seed, b, c, level_eps)
                 for b, c in block_layout(samples, n)]
        res = ordered_map(_md_block, tasks, workers)
        value = np.concatenate([r[0] for r in res])
        logw = np.concatenate([r[1] for r in res])
        parts = np.concatenate([r[2] for r in res])
        hit = value >= level
        logs = np.where(hit, logw, -np.inf)
        extra = {"alpha": float(params.alpha), "beta": float(params.beta), "zeta": float(params.zeta)}
        if hit.any():
            w = np.exp(logw[hit] - logw[hit].max())
            means = (parts[hit] * w[:, None]).sum(axis=0) / w.sum()
            extra.update({"high_part": float(means[0]), "mid_part": float(means[1]), "low_part": float(means[2])})
        est = _finish(sampler, params.d, n, xi, logs, samples, extra)
        if not est.censored:
            est.normalized_rate = -est.log_p / n ** float(params.zeta)
        out.append(est)
    return out
