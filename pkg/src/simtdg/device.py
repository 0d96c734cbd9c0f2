"""Emulated SIMT device with instrumented memory traffic.

Kernels run one thread block at a time; within a block, every thread
executes each statement in lockstep on vectors indexed by linear thread
id, with inactive threads masked out.  That bulk-synchronous execution is
a faithful model for the kernels here, which synchronize only through
barriers, and it makes results bit-identical regardless of the order the
blocks are emulated in.

Counted quantities, all in 32-bit words:

* shared memory: 16 banks, bank = word address mod 16.  A half-warp's
  access costs the larger of (a) the most distinct addresses landing in
  one bank and (b) the number of addresses read by more than one thread --
  the hardware broadcasts a single word per cycle, so a "double broadcast"
  serializes even across banks.  Since a stalled half-warp stalls its
  whole warp, the recorded cycles charge every half-warp of a warp with
  the warp's worst cost.
* global memory: one transaction per 16-aligned 16-word window touched by
  a half-warp; requested bytes are counted at 4 per active lane.
* texture fetches: same transaction rule, separate counters, no cache
  model.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

WORD_BYTES = 4


class DeviceError(RuntimeError):
    pass


class SharedOverflowError(DeviceError):
    pass


class BarrierDivergenceError(DeviceError):
    pass


class WriteCollisionError(DeviceError):
    pass


@dataclass(frozen=True)
class DeviceSpec:
    warp_size: int = 32
    banks: int = 16
    shared_bytes: int = 16384
    max_block_threads: int = 512

    @property
    def shared_words(self) -> int:
        return self.shared_bytes // WORD_BYTES

    @property
    def half_warp(self) -> int:
        return self.warp_size // 2


DEFAULT_SPEC = DeviceSpec()


@dataclass
class MemStats:
    shared_cycles: int = 0
    global_transactions: int = 0
    global_bytes: int = 0
    texture_transactions: int = 0
    texture_bytes: int = 0

    def add(self, other: "MemStats") -> "MemStats":
        self.shared_cycles += other.shared_cycles
        self.global_transactions += other.global_transactions
        self.global_bytes += other.global_bytes
        self.texture_transactions += other.texture_transactions
        self.texture_bytes += other.texture_bytes
        return self

    def weighted_cost(self, shared_weight: float = 1.0, transaction_weight: float = 4.0) -> float:
        return (
            shared_weight * self.shared_cycles
            + transaction_weight * (self.global_transactions + self.texture_transactions)
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MemStats":
        return cls(**d)


@dataclass
class KernelConfig:
    """Work distribution of one kernel launch.

    ``parallel`` / ``inline`` / ``sequential`` are the work units one block
    handles in separate threads, in one thread's registers, and one after
    another.  ``segment_rows`` only applies to the segmented-matrix
    differentiation strategy.
    """

    parallel: int = 1
    inline: int = 1
    sequential: int = 1
    block_microblocks: int | None = None
    strategy: str | None = None
    segment_rows: int | None = None

    def __post_init__(self):
        if min(self.parallel, self.inline, self.sequential) < 1:
            raise ValueError("work distribution parameters must be >= 1")
        if self.segment_rows is not None and self.segment_rows % 16 != 0:
            raise ValueError("segment_rows must be a multiple of the half-warp size")


@dataclass
class TraceEvent:
    kind: str          # "shared_read", "shared_write", "global_read", ...
    label: str
    block: tuple
    halfwarp_costs: dict  # half-warp id -> cost (shared) or transactions


def shared_conflict_cost(addresses) -> int:
    """Serialization cycles of one half-warp's shared-memory access.

    Cost is the max over banks of distinct addresses in that bank, but at
    least the number of multicast words (words read by several threads):
    only one word per cycle can be broadcast.  A full broadcast (all
    threads on one address) costs 1.
    """
    addr = np.asarray(addresses, dtype=np.int64).ravel()
    if addr.size == 0:
        return 0
    words, counts = np.unique(addr, return_counts=True)
    bank_load = np.bincount(words % 16, minlength=16).max()
    multicast = int((counts > 1).sum())
    return int(max(bank_load, multicast, 1))


def global_transaction_count(addresses) -> int:
    """Memory transactions of one half-warp's global access.

    A 16-aligned window of 16 words is served by one transaction no matter
    how the threads permute within it; every distinct window touched costs
    one transaction.
    """
    addr = np.asarray(addresses, dtype=np.int64).ravel()
    if addr.size == 0:
        return 0
    return int(len(np.unique(addr // 16)))


class GlobalArray:
    """Per-launch view of a numpy array in emulated global memory."""

    def __init__(self, data: np.ndarray, ctx: "BlockContext", texture: bool = False, name: str = ""):
        self._data = data
        self._ctx = ctx
        self._texture = texture
        self._name = name

    def read(self, addr, mask=None, label: str = "") -> np.ndarray:
        addr, mask = self._ctx._prepare(addr, mask)
        self._check(addr, mask)
        self._ctx._count_transactions(addr, mask, self._texture, "read", label or self._name)
        out = np.zeros(self._ctx.nthreads, dtype=np.float64)
        out[mask] = self._data[addr[mask]]
        return out

    def write(self, addr, values, mask=None, label: str = ""):
        if self._texture:
            raise DeviceError("texture memory is read-only")
        addr, mask = self._ctx._prepare(addr, mask)
        self._check(addr, mask)
        self._ctx._count_transactions(addr, mask, False, "write", label or self._name)
        vals = np.broadcast_to(np.asarray(values, dtype=np.float64), (self._ctx.nthreads,))
        if self._ctx.device.collision_check:
            _check_collisions(addr[mask], vals[mask], self._name)
        self._data[addr[mask]] = vals[mask]

    def _check(self, addr, mask):
        a = addr[mask]
        if a.size and (a.min() < 0 or a.max() >= self._data.size):
            raise DeviceError(f"{self._name or 'global array'}: address out of range")


def _check_collisions(addr, vals, name):
    order = np.argsort(addr, kind="stable")
    a, v = addr[order], vals[order]
    same = a[1:] == a[:-1]
    if same.any() and not np.array_equal(v[1:][same], v[:-1][same]):
        raise WriteCollisionError(f"{name or 'array'}: conflicting same-address writes")


class SharedMemory:
    """Banked per-block scratch space with a bump allocator."""

    def __init__(self, ctx: "BlockContext", words: int):
        self._ctx = ctx
        self.words = words
        self.data = np.zeros(words, dtype=np.float64)
        self._next = 0

    def alloc(self, words: int) -> int:
        words = int(words)
        if self._next + words > self.words:
            raise SharedOverflowError(
                f"shared allocation of {words} words exceeds the declared "
                f"{self.words}-word budget"
            )
        off = self._next
        self._next += words
        return off

    def read(self, addr, mask=None, label: str = "") -> np.ndarray:
        addr, mask = self._ctx._prepare(addr, mask)
        self._check(addr, mask)
        self._ctx._count_shared(addr, mask, "shared_read", label)
        out = np.zeros(self._ctx.nthreads, dtype=np.float64)
        out[mask] = self.data[addr[mask]]
        return out

    def write(self, addr, values, mask=None, label: str = ""):
        addr, mask = self._ctx._prepare(addr, mask)
        self._check(addr, mask)
        self._ctx._count_shared(addr, mask, "shared_write", label)
        vals = np.broadcast_to(np.asarray(values, dtype=np.float64), (self._ctx.nthreads,))
        if self._ctx.device.collision_check:
            _check_collisions(addr[mask], vals[mask], "shared")
        self.data[addr[mask]] = vals[mask]

    def _check(self, addr, mask):
        a = addr[mask]
        if a.size and (a.min() < 0 or a.max() >= self.words):
            raise SharedOverflowError("shared-memory address out of range")


class BlockContext:
    """Execution context of one thread block."""

    def __init__(self, device, block_idx, dims, shared_words, globals_, textures_, stats, trace):
        self.device = device
        self.block = block_idx
        self.dims = dims
        nx, ny, nz = dims
        self.nthreads = nx * ny * nz
        lin = np.arange(self.nthreads, dtype=np.int64)
        self.lin = lin
        self.tx = lin % nx
        self.ty = (lin // nx) % ny
        self.tz = lin // (nx * ny)
        self.shared = SharedMemory(self, shared_words)
        self.stats = stats
        self.trace = trace
        self.g = {name: GlobalArray(arr, self, False, name) for name, arr in globals_.items()}
        self.t = {name: GlobalArray(arr, self, True, name) for name, arr in textures_.items()}
        self._all = np.ones(self.nthreads, dtype=bool)

    @property
    def bx(self) -> int:
        return self.block[0]

    @property
    def by(self) -> int:
        return self.block[1]

    def barrier(self, active=None):
        """Block-wide synchronization point.

        In lockstep emulation the barrier has no data effect, but a kernel
        that would reach it with only part of the block raises, matching
        the hardware contract that every thread must arrive.
        """
        if active is not None and not np.asarray(active, dtype=bool).all():
            raise BarrierDivergenceError("not all threads of the block reached the barrier")

    def _prepare(self, addr, mask):
        addr = np.asarray(addr)
        if addr.ndim == 0:
            addr = np.broadcast_to(addr, (self.nthreads,))
        addr = addr.astype(np.int64, copy=False)
        if mask is None:
            mask = self._all
        else:
            mask = np.asarray(mask, dtype=bool)
            if mask.ndim == 0:
                mask = np.broadcast_to(mask, (self.nthreads,))
        # clamp masked-off lanes so address checks look at live lanes only
        addr = np.where(mask, addr, 0)
        return addr, mask

    def _count_shared(self, addr, mask, kind, label):
        hw = self.lin // 16
        costs = {}
        for h in np.unique(hw[mask]):
            sel = mask & (hw == h)
            costs[int(h)] = shared_conflict_cost(addr[sel])
        # a conflicting half-warp stalls its entire warp
        total = 0
        warp_of = {h: h // 2 for h in costs}
        for w in set(warp_of.values()):
            members = [c for h, c in costs.items() if warp_of[h] == w]
            total += max(members) * len(members)
        self.stats.shared_cycles += total
        if self.trace is not None:
            self.trace.append(TraceEvent(kind, label, self.block, costs))

    def _count_transactions(self, addr, mask, texture, rw, label):
        hw = self.lin // 16
        tx = 0
        nbytes = int(mask.sum()) * WORD_BYTES
        costs = {}
        for h in np.unique(hw[mask]):
            sel = mask & (hw == h)
            t = global_transaction_count(addr[sel])
            costs[int(h)] = t
            tx += t
        if texture:
            self.stats.texture_transactions += tx
            self.stats.texture_bytes += nbytes
            kind = "texture_read"
        else:
            self.stats.global_transactions += tx
            self.stats.global_bytes += nbytes
            kind = f"global_{rw}"
        if self.trace is not None:
            self.trace.append(TraceEvent(kind, label, self.block, costs))


class Device:
    """Grid/block kernel executor over emulated memory."""

    def __init__(self, spec: DeviceSpec = DEFAULT_SPEC, collision_check: bool = False):
        self.spec = spec
        self.collision_check = collision_check

    def launch(
        self,
        grid,
        block_dims,
        kernel,
        global_arrays: dict | None = None,
        texture_arrays: dict | None = None,
        shared_words: int = 0,
        block_order=None,
        trace=None,
    ) -> MemStats:
        """Run ``kernel(ctx)`` once per block; returns the traffic counters.

        Blocks share no state, so any ``block_order`` yields bit-identical
        results; the default order is row-major over the grid.
        """
        gx, gy = (grid if isinstance(grid, tuple) else (grid, 1))
        nx, ny, nz = block_dims
        if nx * ny * nz > self.spec.max_block_threads:
            raise ValueError(
                f"block of {nx * ny * nz} threads exceeds the {self.spec.max_block_threads}-thread limit"
            )
        if nx * ny * nz < 1 or gx < 1 or gy < 1:
            raise ValueError("grid and block dimensions must be positive")
        if shared_words > self.spec.shared_words:
            raise SharedOverflowError(
                f"{shared_words} shared words requested, device has {self.spec.shared_words}"
            )

        order = block_order
        if order is None:
            order = [(bx, by) for by in range(gy) for bx in range(gx)]
        stats = MemStats()
        for block_idx in order:
            ctx = BlockContext(
                self, tuple(block_idx), (nx, ny, nz), shared_words,
                global_arrays or {}, texture_arrays or {}, stats, trace,
            )
            kernel(ctx)
        return stats
