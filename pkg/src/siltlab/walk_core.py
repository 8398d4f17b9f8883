"""Lazy symmetric random walk on Z^d.

At each step the walk jumps to a uniformly chosen site of the closed l1 ball
of radius one around its current position, so there are ``2d + 1`` equally
likely moves, staying put included.

Randomness comes from numpy's counter-based Philox generator.  A stream is
identified by ``(seed, *stream_key)`` through :class:`numpy.random.SeedSequence`
spawn keys, which gives independent, platform independent substreams for
replicas and replica blocks.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import BudgetExceeded, InvalidConfig

# positions kept in memory by :func:`simulate` (rows of d int64)
MAX_STORED_POSITIONS = 50_000_000
STREAM_CHUNK = 1 << 16


def make_rng(seed: int, *stream_key: int) -> np.random.Generator:
    """Generator for the substream ``(seed, *stream_key)``."""
    if seed < 0:
        raise InvalidConfig("seed must be nonnegative")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in stream_key))
    return np.random.Generator(np.random.Philox(ss))


@lru_cache(maxsize=None)
def step_table(d: int) -> np.ndarray:
    """The ``2d + 1`` admissible increments; row 0 is the lazy move.

    Rows ``1..d`` are ``+e_i`` and rows ``d+1..2d`` are ``-e_i``.
    """
    if d < 1:
        raise InvalidConfig(f"dimension must be >= 1, got {d}")
    table = np.zeros((2 * d + 1, d), dtype=np.int64)
    eye = np.eye(d, dtype=np.int64)
    table[1 : d + 1] = eye
    table[d + 1 :] = -eye
    table.setflags(write=False)
    return table


def draw_moves(rng: np.random.Generator, d: int, size) -> np.ndarray:
    """Indices into :func:`step_table`, uniform on ``0..2d``."""
    dtype = np.uint8 if 2 * d + 1 <= 255 else np.int64
    return rng.integers(0, 2 * d + 1, size=size, dtype=dtype)


def step(current: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    """One step of the walk from ``current``."""
    current = np.asarray(current, dtype=np.int64)
    table = step_table(current.shape[0])
    return current + table[int(draw_moves(rng, current.shape[0], None))]


@dataclass(frozen=True)
class WalkConfig:
    d: int
    n_steps: int
    seed: int = 0
    stream_id: int = 0

    def __post_init__(self):
        if self.d < 1:
            raise InvalidConfig(f"dimension must be >= 1, got {self.d}")
        if self.n_steps < 0:
            raise InvalidConfig(f"n_steps must be >= 0, got {self.n_steps}")
        if not 0 <= self.seed < 2**64:
            raise InvalidConfig("seed must be a 64-bit unsigned integer")

    def rng(self) -> np.random.Generator:
        return make_rng(self.seed, 0, self.stream_id)


@dataclass
class WalkPath:
    """Positions ``S_0, ..., S_n`` of one walk."""

    positions: np.ndarray
    config: WalkConfig

    @property
    def n_steps(self) -> int:
        return self.positions.shape[0] - 1

    @property
    def d(self) -> int:
        return self.positions.shape[1]

    def __len__(self) -> int:
        return self.positions.shape[0]


def iter_positions(
    config: WalkConfig,
    start: Optional[Sequence[int]] = None,
    chunk: int = STREAM_CHUNK,
) -> Iterator[np.ndarray]:
    """Stream ``S_0, ..., S_n`` in consecutive chunks without storing the path.

    The concatenation of the chunks equals ``simulate(config).positions`` for
    the default chunk size.
    """
    d = config.d
    table = step_table(d)
    rng = config.rng()
    pos = np.zeros(d, dtype=np.int64) if start is None else np.asarray(start, dtype=np.int64).copy()
    if pos.shape != (d,):
        raise InvalidConfig("start point has wrong dimension")
    yield pos[None, :].copy()
    remaining = config.n_steps
    while remaining > 0:
        m = min(chunk, remaining)
        inc = table[draw_moves(rng, d, m)]
        block = np.cumsum(inc, axis=0)
        block += pos
        pos = block[-1].copy()
        remaining -= m
        yield block


def simulate(
    config: WalkConfig,
    start: Optional[Sequence[int]] = None,
    max_positions: int = MAX_STORED_POSITIONS,
) -> WalkPath:
    """Materialize a path of ``n_steps + 1`` positions starting at ``start``
    (the origin by default).

    Raises BudgetExceeded when the path would not fit in the position budget;
    use :func:`iter_positions` for longer walks.
    """
    if config.n_steps + 1 > max_positions:
        raise BudgetExceeded(
            f"{config.n_steps + 1} positions exceed the budget of {max_positions}; "
            "use streaming mode"
        )
    chunks = list(iter_positions(config, start=start))
    return WalkPath(np.concatenate(chunks, axis=0), config)


def walk_batch(
    rng: np.random.Generator,
    d: int,
    m: int,
    n: int,
    start: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """``m`` independent paths of ``n`` steps as an ``(m, n + 1, d)`` array."""
    table = step_table(d)
    out = np.empty((m, n + 1, d), dtype=np.int64)
    out[:, 0, :] = 0 if start is None else np.asarray(start, dtype=np.int64)
    if n > 0:
        np.cumsum(table[draw_moves(rng, d, (m, n))], axis=1, out=out[:, 1:, :])
        out[:, 1:, :] += out[:, :1, :]
    return out


def block_size(n: int, budget: int = 1 << 20) -> int:
    """Replicas per random-number block for walks of ``n`` steps.

    Depends only on ``n`` so that estimates never depend on how blocks are
    spread across workers.
    """
    return int(max(1, min(4096, budget // (n + 1))))


def block_layout(samples: int, n: int) -> list[tuple[int, int]]:
    """``(block_index, replicas_in_block)`` pairs covering ``samples`` replicas."""
    size = block_size(n)
    out = []
    b = 0
    left = samples
    while left > 0:
        k = min(size, left)
        out.append((b, k))
        left -= k
        b += 1
    return out
