"""Profiling-guided page-pool workspace allocation.

The pool is a ledger over a fixed number of fixed-size abstract pages:
allocation grants a contiguous block (first fit, lowest page index),
release returns it, and callers that cannot be satisfied wait FIFO. The
pool tracks simulated capacity only; actual buffers are sized from granted
blocks by the caller, which keeps correctness testing independent of
platform memory behavior.

Waiting is strictly head-of-line: a release wakes the queue and waiters
re-check, but only the queue head may take pages. That makes the policy
starvation-free at the cost of head-of-line blocking, which is the
fairness trade this allocator deliberately makes.

Provisioning reads an offline profile of packed-row counts per batch: pick a
quantile, convert it to pages through the workspace-size formula (rows times
row footprint, rounded up to whole pages), and multiply by the expected
concurrency level.
"""

from __future__ import annotations

import math
import threading
import time
from collections import deque
from dataclasses import dataclass, field

from .errors import ConfigError, PoolError, PoolTimeout, StateError

__all__ = [
    "LoadProfile",
    "PageBlock",
    "ReplayResult",
    "WorkspacePool",
    "provision",
    "required_pages",
    "simulate_replay",
]


def required_pages(
    n_act: int, d_in: int, d_out: int, elem_bytes: int = 8, page_size: int = 4096
) -> int:
    """Pages needed to hold packed inputs and outputs for ``n_act`` rows.

    The workspace is n_act * (d_in + d_out) elements; element width and
    page size are explicit because the proportionality alone fixes neither.
    """
    if n_act < 0:
        raise ConfigError(f"packed row count must be non-negative, got {n_act}")
    if d_in <= 0 or d_out <= 0 or elem_bytes <= 0 or page_size <= 0:
        raise ConfigError("dimensions, element width and page size must be positive")
    total_bytes = n_act * (d_in + d_out) * elem_bytes
    return (total_bytes + page_size - 1) // page_size


@dataclass(frozen=True)
class PageBlock:
    """Handle for a granted contiguous block; release through the pool."""

    start: int
    num_pages: int
    serial: int


class WorkspacePool:
    """Fixed pool of fixed-size pages with first-fit contiguous allocation.

    Thread-safe: allocate/release may be called from arbitrary threads, and
    waiting never holds the internal lock (condition wait releases it).
    """

    def __init__(self, page_count: int, page_size: int = 4096) -> None:
        if page_count <= 0 or page_size <= 0:
            raise ConfigError("page_count and page_size must be positive")
        self.page_count = page_count
        self.page_size = page_size
        self._lock = threading.Lock()
        self._available = threading.Condition(self._lock)
        self._held: dict[int, tuple[int, int]] = {}   # serial -> (start, num_pages)
        self._waiters: deque[int] = deque()           # FIFO of waiter tokens
        self._next_serial = 0
        self._next_token = 0
        self.allocations = 0
        self.releases = 0
        self.wait_events = 0
        self.peak_pages_in_use = 0

    @property
    def pages_in_use(self) -> int:
        with self._lock:
            return self._pages_in_use_locked()

    def _pages_in_use_locked(self) -> int:
        return sum(n for _, n in self._held.values())

    def _first_fit_locked(self, pages: int) -> int | None:
        """Lowest start index of a free gap of at least ``pages`` pages."""
        cursor = 0
        for start, num in sorted(self._held.values()):
            if start - cursor >= pages:
                return cursor
            cursor = max(cursor, start + num)
        if self.page_count - cursor >= pages:
            return cursor
        return None

    def _grant_locked(self, pages: int, start: int) -> PageBlock:
        serial = self._next_serial
        self._next_serial += 1
        self._held[serial] = (start, pages)
        self.allocations += 1
        self.peak_pages_in_use = max(self.peak_pages_in_use, self._pages_in_use_locked())
        return PageBlock(start=start, num_pages=pages, serial=serial)

    def try_allocate(self, pages_needed: int) -> PageBlock | None:
        """Non-blocking allocation; defers to queued waiters (returns None
        while any thread is waiting, to preserve FIFO order)."""
        self._check_feasible(pages_needed)
        with self._lock:
            if self._waiters:
                return None
            start = self._first_fit_locked(pages_needed)
            if start is None:
                return None
            return self._grant_locked(pages_needed, start)

    def _check_feasible(self, pages_needed: int) -> None:
        if pages_needed < 0:
            raise PoolError(f"cannot allocate {pages_needed} pages")
        if pages_needed > self.page_count:
            raise PoolError(
                f"request for {pages_needed} pages can never be satisfied by a "
                f"{self.page_count}-page pool"
            )

    def allocate(self, pages_needed: int, timeout: float | None = None) -> PageBlock:
        """Contiguous block of ``pages_needed`` pages, waiting FIFO if necessary.

        Raises PoolError for permanently infeasible requests and PoolTimeout
        when the deadline passes first.
        """
        self._check_feasible(pages_needed)
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._lock:
            if not self._waiters:
                start = self._first_fit_locked(pages_needed)
                if start is not None:
                    return self._grant_locked(pages_needed, start)
            token = self._next_token
            self._next_token += 1
            self._waiters.append(token)
            self.wait_events += 1
            try:
                while True:
                    if self._waiters[0] == token:
                        start = self._first_fit_locked(pages_needed)
                        if start is not None:
                            self._waiters.popleft()
                            block = self._grant_locked(pages_needed, start)
                            self._available.notify_all()
                            return block
                    remaining = None
                    if deadline is not None:
                        remaining = deadline - time.monotonic()
                        if remaining <= 0:
                            raise PoolTimeout(
                                f"timed out waiting for {pages_needed} pages"
                            )
                    self._available.wait(remaining)
            except BaseException:
                self._waiters.remove(token)
                self._available.notify_all()
                raise

    def release(self, block: PageBlock) -> None:
        """Return a block's pages; wakes waiting allocators."""
        with self._lock:
            if block.serial not in self._held:
                raise PoolError(
                    f"block serial {block.serial} is unknown or already released"
                )
            if self._held[block.serial] != (block.start, block.num_pages):
                raise PoolError(f"block serial {block.serial} does not match the ledger")
            del self._held[block.serial]
            self.releases += 1
            self._available.notify_all()

    def held_blocks(self) -> list[tuple[int, int]]:
        """Snapshot of (start, num_pages) for every held block."""
        with self._lock:
            return sorted(self._held.values())


@dataclass
class LoadProfile:
    """Empirical packed-row counts observed per batch, for provisioning."""

    samples: list[int] = field(default_factory=list)

    def add(self, n_act: int) -> None:
        if n_act < 0:
            raise ConfigError(f"profile samples must be non-negative, got {n_act}")
        self.samples.append(int(n_act))

    def quantile(self, q: float) -> int:
        """Nearest-rank quantile: smallest sample with rank >= ceil(q * n)."""
        if not self.samples:
            raise StateError("load profile is empty")
        if not 0.0 < q <= 1.0:
            raise ConfigError(f"quantile must lie in (0, 1], got {q}")
        n = len(self.samples)
        rank = _nearest_rank(q, n)
        return sorted(self.samples)[rank - 1]

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            for s in self.samples:
                handle.write(f"{s}\n")

    @classmethod
    def load(cls, path: str) -> "LoadProfile":
        profile = cls()
        with open(path, "r", encoding="utf-8") as handle:
            for lineno, line in enumerate(handle, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    profile.add(int(line))
                except ValueError:
                    raise ConfigError(
                        f"{path}: line {lineno}: expected an integer, got '{line}'"
                    ) from None
        return profile


def _nearest_rank(q: float, n: int) -> int:
    # snap q*n to the nearest integer when it is one up to float noise,
    # so 0.99 * 100 lands on rank 99 rather than 100
    x = q * n
    nearest = round(x)
    rank = nearest if abs(x - nearest) < 1e-9 else math.ceil(x)
    return min(max(rank, 1), n)


def provision(
    profile: LoadProfile,
    q: float,
    d_in: int,
    d_out: int,
    concurrency: int,
    elem_bytes: int = 8,
    page_size: int = 4096,
) -> int:
    """Recommended pool capacity: concurrency times the block size at the
    q-quantile of the observed load. A recommendation, not a hard bound."""
    if concurrency <= 0:
        raise ConfigError(f"concurrency must be positive, got {concurrency}")
    block = required_pages(profile.quantile(q), d_in, d_out, elem_bytes, page_size)
    return concurrency * block


@dataclass(frozen=True)
class ReplayResult:
    wait_events: int
    peak_pages_in_use: int
    completed: int


def simulate_replay(
    page_count: int, requests: list[int], workers: int, page_size: int = 4096
) -> ReplayResult:
    """Deterministic virtual-time replay of a block-size sequence.

    ``workers`` batches may be in flight at once, each occupying its block
    for one time unit; requests start in order (head-of-line, matching the
    pool's FIFO policy) and a request that cannot start when a worker is
    free counts one wait event. Used by the profiling harness so replay
    reports are reproducible byte for byte.
    """
    if workers <= 0:
        raise ConfigError(f"workers must be positive, got {workers}")
    pool = WorkspacePool(page_count=page_count, page_size=page_size)
    pending = deque(int(r) for r in requests)
    running: list[tuple[float, int, PageBlock]] = []  # (finish time, seq, block)
    now = 0.0
    seq = 0
    waits = 0
    waited_current = False
    completed = 0
    while pending or running:
        # finish everything due at the current time before starting new work
        for finish, _, block in sorted(running):
            if finish <= now:
                pool.release(block)
                completed += 1
        running = [r for r in running if r[0] > now]
        while pending and len(running) < workers:
            block = pool.try_allocate(pending[0])
            if block is None:
                if not waited_current:
                    waits += 1
                    waited_current = True
                break
            pending.popleft()
            waited_current = False
            running.append((now + 1.0, seq, block))
            seq += 1
        if running:
            now = min(r[0] for r in running)
        elif pending:
            raise PoolError(
                f"replay deadlock: request for {pending[0]} pages can never start"
            )
    return ReplayResult(
        wait_events=waits, peak_pages_in_use=pool.peak_pages_in_use, completed=completed
    )
