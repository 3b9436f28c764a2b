"""Simulated GPU device: MMIO register file, two-level MMU, autonomous job
chains, interrupts, and a virtual nanosecond clock.

The device is the single source of time. Nothing here touches the wall
clock: callers advance time explicitly with :meth:`Device.tick`, and all
device-side work (job execution, cache flushes) completes at scheduled
virtual instants. Interrupts are returned from ``tick`` as values; they
are never delivered asynchronously.

Nondeterminism is confined to one seeded RNG stream per device: job and
flush durations carry a uniform jitter factor, and the JOB_PROGRESS
register returns fresh draws. Two devices with the same profile, seed and
input sequence stay bit-identical; computed data never depends on the
seed, only timing does.

Shader stores do not hit physical memory directly. They are buffered as
pending cache writebacks and commit only when a CACHE_FLUSH completes,
which is when the GPU_STATUS dirty bit clears. Host-side reads through
:meth:`Device.mem_read` never see uncommitted writebacks.
"""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass, field

from .shader import ShaderFault, execute

PAGE_SIZE = 4096
PAGE_SHIFT = 12
MEM_BYTES = 16 * 1024 * 1024
U32 = 0xFFFFFFFF

# Interrupt bits (GPU_IRQ_RAWSTAT / GPU_IRQ_MASK / GPU_IRQ_CLEAR).
IRQ_JOB_DONE = 1 << 0
IRQ_MMU_FAULT = 1 << 1
IRQ_RESET_DONE = 1 << 2
IRQ_ALL = IRQ_JOB_DONE | IRQ_MMU_FAULT | IRQ_RESET_DONE

# GPU_STATUS bits. The powered-core mask is mirrored into bits 8..15 so a
# single status read exposes core power state.
STATUS_BUSY = 1 << 0
STATUS_DIRTY = 1 << 1  # writeback pending or flush in flight
STATUS_CORES_SHIFT = 8

# GPU_CMD encodings.
CMD_SOFT_RESET = 1
CMD_CACHE_FLUSH = 2
CMD_TLB_INVALIDATE = 3

# JOB_STATUS encodings.
JOB_IDLE = 0
JOB_RUNNING = 1
JOB_DONE = 2
JOB_BAD_STATE = 3   # kick while busy, or shader ran off its step budget
JOB_MMU_FAULT = 4

# Cost model. Arbitrary but fixed; only ratios matter for timing claims.
JOB_BASE_COST_NS = 200
JOB_INSTR_COST_NS = 2
FLUSH_BASE_COST_NS = 300
FLUSH_BYTE_COST_NS = 0.25
JITTER_LO = 0.9
JITTER_HI = 1.3

SHADER_STEP_BUDGET = 1 << 24
CHAIN_MAX_JOBS = 4096
SHADER_MAX_BYTES = 64 * 1024

# Job descriptor layout in GPU memory: 12 little-endian u32 words.
#   [0] next_va  [1] shader_va  [2] shader_len  [3] affinity  [4..11] params
DESCRIPTOR_BYTES = 48


class Perm(enum.Flag):
    """Page permission bits, position-independent; a SkuProfile decides the
    bit layout inside a PTE."""

    VALID = enum.auto()
    READ = enum.auto()
    WRITE = enum.auto()
    EXEC = enum.auto()


class Access(enum.Enum):
    RO = "ro"
    WO = "wo"
    RW = "rw"


class StateClass(enum.Enum):
    STATE_CHANGING = "state_changing"  # reads carry side effects (none in default map)
    PURE_READ = "pure_read"
    NONDET_READ = "nondet_read"


class BusError(Exception):
    """Register access outside the map or against its access direction."""

    def __init__(self, offset: int, why: str):
        self.offset = offset
        super().__init__(f"bus error at reg offset {offset:#x}: {why}")


class MmuFault(Exception):
    """Translation failure; carries the faulting GPU VA."""

    def __init__(self, va: int, access: Perm):
        self.va = va
        self.access = access
        super().__init__(f"MMU fault at VA {va:#010x} ({access})")


class SkuMismatch(Exception):
    pass


class DeviceOwned(Exception):
    pass


@dataclass(frozen=True)
class SkuProfile:
    """Per-GPU-model interface description.

    ``perm_bit_layout`` assigns each of VALID/READ/WRITE/EXEC to one of PTE
    bits 0..3; it must be a bijection. Models of the same family share
    register names and semantics but differ here and in the expected
    register values.
    """

    sku_id: int
    core_count: int
    perm_bit_layout: tuple[Perm, Perm, Perm, Perm]
    expected_mmu_config: int
    gpu_id_value: int

    def __post_init__(self):
        if not 1 <= self.core_count <= 32:
            raise ValueError(f"core_count {self.core_count} out of [1, 32]")
        if set(self.perm_bit_layout) != {Perm.VALID, Perm.READ, Perm.WRITE, Perm.EXEC}:
            raise ValueError("perm_bit_layout must be a permutation of V,R,W,X")

    @property
    def full_core_mask(self) -> int:
        return (1 << self.core_count) - 1

    def encode_perms(self, perms: Perm) -> int:
        bits = 0
        for pos, p in enumerate(self.perm_bit_layout):
            if p in perms:
                bits |= 1 << pos
        return bits

    def decode_perms(self, bits: int) -> Perm:
        perms = Perm(0)
        for pos, p in enumerate(self.perm_bit_layout):
            if bits & (1 << pos):
                perms |= p
        return perms


SKU_A = SkuProfile(
    sku_id=0x0B31,
    core_count=1,
    perm_bit_layout=(Perm.VALID, Perm.READ, Perm.WRITE, Perm.EXEC),
    expected_mmu_config=0x0,
    gpu_id_value=0x0B31,
)

SKU_B = SkuProfile(
    sku_id=0x0B71,
    core_count=8,
    perm_bit_layout=(Perm.VALID, Perm.EXEC, Perm.READ, Perm.WRITE),
    expected_mmu_config=0x8,
    gpu_id_value=0x0B71,
)

SKUS = {"A": SKU_A, "B": SKU_B}
SKUS_BY_ID = {p.sku_id: p for p in SKUS.values()}


@dataclass(frozen=True)
class RegDef:
    name: str
    offset: int
    access: Access
    state_class: StateClass = StateClass.PURE_READ


@dataclass(frozen=True)
class RegisterMap:
    """Named register layout; recordings refer to registers by name and the
    replayer resolves names against its own map."""

    entries: tuple[RegDef, ...]

    def __post_init__(self):
        names = [e.name for e in self.entries]
        offsets = [e.offset for e in self.entries]
        if len(set(names)) != len(names) or len(set(offsets)) != len(offsets):
            raise ValueError("register names and offsets must be unique")
        for e in self.entries:
            if e.state_class is StateClass.NONDET_READ and e.access is not Access.RO:
                raise ValueError(f"NONDET_READ register {e.name} must be read-only")

    def by_name(self, name: str) -> RegDef | None:
        return self._name_index.get(name)

    def by_offset(self, offset: int) -> RegDef | None:
        return self._offset_index.get(offset)

    @property
    def _name_index(self):
        idx = self.__dict__.get("_name_idx")
        if idx is None:
            idx = {e.name: e for e in self.entries}
            object.__setattr__(self, "_name_idx", idx)
        return idx

    @property
    def _offset_index(self):
        idx = self.__dict__.get("_offset_idx")
        if idx is None:
            idx = {e.offset: e for e in self.entries}
            object.__setattr__(self, "_offset_idx", idx)
        return idx

    def digest(self) -> bytes:
        import hashlib

        h = hashlib.sha256()
        for e in sorted(self.entries, key=lambda e: e.offset):
            h.update(f"{e.name}:{e.offset}:{e.access.value}:{e.state_class.value}\n".encode())
        return h.digest()


def default_register_map() -> RegisterMap:
    R, W, RW = Access.RO, Access.WO, Access.RW
    return RegisterMap(entries=(
        RegDef("GPU_ID", 0x00, R),
        RegDef("GPU_STATUS", 0x04, R),
        RegDef("GPU_IRQ_RAWSTAT", 0x08, R),
        RegDef("GPU_IRQ_CLEAR", 0x0C, W),
        RegDef("GPU_IRQ_MASK", 0x10, RW),
        RegDef("GPU_CMD", 0x14, W),
        RegDef("MMU_TABLE_BASE_LO", 0x18, RW),
        RegDef("MMU_TABLE_BASE_HI", 0x1C, RW),
        RegDef("MMU_CONFIG", 0x20, RW),
        RegDef("JOB_HEAD_LO", 0x24, RW),
        RegDef("JOB_HEAD_HI", 0x28, RW),
        RegDef("JOB_START", 0x2C, W),
        RegDef("JOB_STATUS", 0x30, R),
        RegDef("JOB_AFFINITY", 0x34, RW),
        RegDef("JOB_PROGRESS", 0x38, R, StateClass.NONDET_READ),
        RegDef("CLOCK_DIV", 0x3C, RW),
        RegDef("PWR_CORES_ON", 0x40, R),
        RegDef("MMU_FAULT_ADDR", 0x44, R),
    ))


DEFAULT_REGISTER_MAP = default_register_map()


def parse_register_map(text: str) -> RegisterMap:
    """Line format: ``NAME OFFSET ro|wo|rw [state_changing|pure_read|nondet_read]``."""
    entries = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (3, 4):
            raise ValueError(f"register map line {lineno}: {raw!r}")
        name, offset, access = parts[0], int(parts[1], 0), Access(parts[2].lower())
        cls = StateClass(parts[3].lower()) if len(parts) == 4 else StateClass.PURE_READ
        entries.append(RegDef(name, offset, access, cls))
    return RegisterMap(tuple(entries))


@dataclass(frozen=True)
class InterruptEvent:
    t_ns: int
    bits: int  # raised bits that passed the mask


@dataclass
class _PendingJob:
    finish_ns: int | None  # None: stalled with no powered core in affinity
    stores: dict[int, int]
    instr_count: int
    fault_va: int | None
    status: int  # JOB_STATUS value to latch on completion


@dataclass
class _PendingFlush:
    finish_ns: int


@dataclass
class DeviceSnapshot:
    """Copyable device state minus the RAM array.

    Covers registers, protocol state, buffered writebacks, pending work and
    the RNG stream position. RAM contents are restored separately by
    whoever owns the memory (the replayer's checkpoints copy the mapped
    ranges and page tables); a restore therefore reproduces the original
    run exactly as long as RAM was not mutated in between.
    """

    sku_id: int
    vclock_ns: int
    regs: dict[str, int]
    irq_rawstat: int
    irq_mask: int
    cores_on: int
    clock_div: int
    job_state: int
    fault_addr: int
    writeback: dict[int, int]
    tlb: dict[int, tuple[int, int]]
    pending_job: _PendingJob | None
    pending_flush: _PendingFlush | None
    rng_state: tuple
    busy_since: int | None


class FaultKind(enum.Enum):
    OFFLINE_CORES = "offline_cores"
    CORRUPT_PTE = "corrupt_pte"
    STALL = "stall"


class Device:
    """One simulated GPU instance. Single-owner: exactly one session mutates
    a device at a time (ownership is advisory, via claim/release)."""

    def __init__(self, sku: SkuProfile = SKU_A, env_seed: int = 0,
                 reg_map: RegisterMap = DEFAULT_REGISTER_MAP):
        self.sku = sku
        self.reg_map = reg_map
        self.mem = bytearray(MEM_BYTES)
        self.rng = random.Random(env_seed)
        self.vclock_ns = 0
        self.owner: object | None = None
        # busy periods as [start, end] pairs; end None while open
        self._busy_periods: list[list[int | None]] = []
        self._stored: dict[str, int] = {}
        self._power_on_state()

    # -- lifecycle ---------------------------------------------------------

    def _power_on_state(self):
        self._stored.update({
            "GPU_IRQ_MASK": 0,
            "MMU_TABLE_BASE_LO": 0,
            "MMU_TABLE_BASE_HI": 0,
            "MMU_CONFIG": 0,
            "JOB_HEAD_LO": 0,
            "JOB_HEAD_HI": 0,
            "JOB_AFFINITY": 0,
        })
        self.irq_rawstat = 0
        self.cores_on = self.sku.full_core_mask
        self.clock_div = getattr(self, "clock_div", 1)
        self.job_state = JOB_IDLE
        self.fault_addr = 0
        self.writeback: dict[int, int] = {}
        self.tlb: dict[int, tuple[int, int]] = {}  # vpn -> (ppn, perm bits raw)
        self._pending_job: _PendingJob | None = None
        self._pending_flush: _PendingFlush | None = None
        self._set_busy(False)

    def _soft_reset(self):
        # The clock divider survives: it models the SoC clock tree, which is
        # outside the GPU reset domain. RAM is likewise untouched.
        self._power_on_state()
        self.irq_rawstat = IRQ_RESET_DONE

    def claim(self, owner: object):
        if self.owner is not None:
            raise DeviceOwned("device already owned")
        self.owner = owner

    def release(self, owner: object):
        if self.owner is owner:
            self.owner = None

    # -- registers ---------------------------------------------------------

    def reg_read(self, offset: int) -> int:
        reg = self.reg_map.by_offset(offset)
        if reg is None:
            raise BusError(offset, "unknown register")
        if reg.access is Access.WO:
            raise BusError(offset, f"{reg.name} is write-only")
        return self._read_named(reg) & U32

    def _read_named(self, reg: RegDef) -> int:
        name = reg.name
        if name == "GPU_ID":
            return self.sku.gpu_id_value
        if name == "GPU_STATUS":
            v = 0
            if self.job_state == JOB_RUNNING:
                v |= STATUS_BUSY
            if self.writeback or self._pending_flush:
                v |= STATUS_DIRTY
            v |= (self.cores_on & 0xFF) << STATUS_CORES_SHIFT
            return v
        if name == "GPU_IRQ_RAWSTAT":
            return self.irq_rawstat
        if name == "GPU_IRQ_MASK":
            return self._stored["GPU_IRQ_MASK"]
        if name == "JOB_STATUS":
            return self.job_state
        if name == "JOB_AFFINITY":
            # reads report the effective affinity: requested cores that are
            # actually powered
            return self._stored["JOB_AFFINITY"] & self.cores_on
        if name == "JOB_PROGRESS":
            return self.rng.getrandbits(32)
        if name == "CLOCK_DIV":
            return self.clock_div
        if name == "PWR_CORES_ON":
            return self.cores_on
        if name == "MMU_FAULT_ADDR":
            return self.fault_addr
        return self._stored[name]

    def reg_write(self, offset: int, value: int) -> None:
        reg = self.reg_map.by_offset(offset)
        if reg is None:
            raise BusError(offset, "unknown register")
        if reg.access is Access.RO:
            raise BusError(offset, f"{reg.name} is read-only")
        value &= U32
        name = reg.name
        if name == "GPU_IRQ_CLEAR":
            self.irq_rawstat &= ~value
        elif name == "GPU_CMD":
            self._command(value)
        elif name == "JOB_START":
            if value & 1:
                self._kick()
        elif name == "CLOCK_DIV":
            self.clock_div = max(1, value)
        else:
            self._stored[name] = value

    def _command(self, cmd: int):
        if cmd == CMD_SOFT_RESET:
            self._soft_reset()
        elif cmd == CMD_CACHE_FLUSH:
            self._start_flush()
        elif cmd == CMD_TLB_INVALIDATE:
            self.tlb.clear()
        # unknown commands are ignored, as real hardware tends to

    # -- MMU ----------------------------------------------------------------

    @property
    def mmu_base(self) -> int:
        return (self._stored["MMU_TABLE_BASE_HI"] << 32) | self._stored["MMU_TABLE_BASE_LO"]

    def _mem_u32(self, pa: int) -> int:
        return int.from_bytes(self.mem[pa:pa + 4], "little")

    def _walk(self, va: int, access: Perm) -> int:
        """Pure two-level walk; returns the physical address or raises
        MmuFault without touching device state (other than the TLB fill)."""
        va &= U32
        vpn = va >> PAGE_SHIFT
        cached = self.tlb.get(vpn)
        if cached is not None:
            ppn, raw_bits = cached
        else:
            base = self.mmu_base
            if base == 0 or base + PAGE_SIZE > MEM_BYTES:
                raise MmuFault(va, access)
            l1_idx = (va >> 22) & 0x3FF
            l1_entry = self._mem_u32(base + l1_idx * 4)
            if Perm.VALID not in self.sku.decode_perms(l1_entry & 0xF):
                raise MmuFault(va, access)
            l2_base = l1_entry & ~(PAGE_SIZE - 1)
            if l2_base + PAGE_SIZE > MEM_BYTES:
                raise MmuFault(va, access)
            l2_idx = (va >> 12) & 0x3FF
            l2_entry = self._mem_u32(l2_base + l2_idx * 4)
            raw_bits = l2_entry & 0xF
            if Perm.VALID not in self.sku.decode_perms(raw_bits):
                raise MmuFault(va, access)
            ppn = l2_entry >> PAGE_SHIFT
            self.tlb[vpn] = (ppn, raw_bits)
        perms = self.sku.decode_perms(raw_bits)
        if access not in perms:
            raise MmuFault(va, access)
        pa = (ppn << PAGE_SHIFT) | (va & (PAGE_SIZE - 1))
        if pa >= MEM_BYTES:
            raise MmuFault(va, access)
        return pa

    def translate(self, va: int, access: Perm) -> int:
        """Walk the page tables for ``va``. On failure the fault is latched
        device-wide: MMU_FAULT raised, VA stored, a running job faults."""
        try:
            return self._walk(va, access)
        except MmuFault:
            self.fault_addr = va & U32
            self.irq_rawstat |= IRQ_MMU_FAULT
            if self.job_state == JOB_RUNNING:
                self._pending_job = None
                self.job_state = JOB_MMU_FAULT
                self._update_busy()
            raise

    # -- host-visible shared memory ------------------------------------------

    def mem_read(self, pa: int, n: int) -> bytes:
        if pa < 0 or n < 0 or pa + n > MEM_BYTES:
            raise ValueError(f"physical range {pa:#x}+{n:#x} out of bounds")
        return bytes(self.mem[pa:pa + n])

    def mem_write(self, pa: int, data: bytes) -> None:
        if pa < 0 or pa + len(data) > MEM_BYTES:
            raise ValueError(f"physical range {pa:#x}+{len(data):#x} out of bounds")
        self.mem[pa:pa + len(data)] = data

    # -- job chains ----------------------------------------------------------

    def _kick(self):
        if self.job_state == JOB_RUNNING:
            # protocol violation: kicking a busy GPU wedges the job unit
            self._pending_job = None
            self.job_state = JOB_BAD_STATE
            self._update_busy()
            return
        head = ((self._stored["JOB_HEAD_HI"] << 32) | self._stored["JOB_HEAD_LO"]) & U32
        affinity = self._stored["JOB_AFFINITY"]
        if affinity & self.cores_on == 0:
            # no powered core may take the job: it stalls indefinitely
            self.job_state = JOB_RUNNING
            self._pending_job = _PendingJob(None, {}, 0, None, JOB_DONE)
            self._update_busy()
            return
        pending = self._run_chain(head)
        jitter = self.rng.uniform(JITTER_LO, JITTER_HI)
        cost = JOB_BASE_COST_NS + JOB_INSTR_COST_NS * pending.instr_count
        pending.finish_ns = self.vclock_ns + round(cost * self.clock_div * jitter)
        self.job_state = JOB_RUNNING
        self._pending_job = pending
        self._update_busy()

    def _run_chain(self, head_va: int) -> _PendingJob:
        """Execute a whole descriptor chain against current memory. Effects
        (stores, fault, status) are latched and applied at finish time."""
        stores: dict[int, int] = {}
        total_instr = 0
        va = head_va

        def load_word(a):
            pa = self._walk(a, Perm.READ)
            b0 = stores.get(pa, self.writeback.get(pa, self.mem[pa]))
            b1 = stores.get(pa + 1, self.writeback.get(pa + 1, self.mem[pa + 1]))
            b2 = stores.get(pa + 2, self.writeback.get(pa + 2, self.mem[pa + 2]))
            b3 = stores.get(pa + 3, self.writeback.get(pa + 3, self.mem[pa + 3]))
            return b0 | (b1 << 8) | (b2 << 16) | (b3 << 24)

        def store_word(a, val):
            pa = self._walk(a, Perm.WRITE)
            stores[pa] = val & 0xFF
            stores[pa + 1] = (val >> 8) & 0xFF
            stores[pa + 2] = (val >> 16) & 0xFF
            stores[pa + 3] = (val >> 24) & 0xFF

        try:
            seen = 0
            while va != 0:
                seen += 1
                if seen > CHAIN_MAX_JOBS:
                    return _PendingJob(None, {}, total_instr, va, JOB_BAD_STATE)
                if va % 4 != 0:
                    raise MmuFault(va, Perm.READ)
                desc = [load_word(va + 4 * i) for i in range(DESCRIPTOR_BYTES // 4)]
                next_va, shader_va, shader_len, _affinity = desc[0], desc[1], desc[2], desc[3]
                params = desc[4:12]
                if shader_va % 4 != 0 or shader_len % 4 != 0 or shader_len > SHADER_MAX_BYTES:
                    raise MmuFault(shader_va, Perm.EXEC)
                words = []
                for off in range(0, shader_len, 4):
                    a = shader_va + off
                    pa = self._walk(a, Perm.EXEC)
                    words.append(int.from_bytes(self.mem[pa:pa + 4], "little"))
                n, halted = execute(words, list(params), load_word, store_word,
                                    SHADER_STEP_BUDGET)
                total_instr += n
                if not halted:
                    return _PendingJob(None, {}, total_instr, None, JOB_BAD_STATE)
                va = next_va
        except MmuFault as f:
            return _PendingJob(None, {}, total_instr, f.va, JOB_MMU_FAULT)
        except ShaderFault:
            return _PendingJob(None, {}, total_instr, None, JOB_BAD_STATE)
        return _PendingJob(None, stores, total_instr, None, JOB_DONE)

    def _start_flush(self):
        if self._pending_flush is not None or not self.writeback:
            return
        jitter = self.rng.uniform(JITTER_LO, JITTER_HI)
        cost = FLUSH_BASE_COST_NS + FLUSH_BYTE_COST_NS * len(self.writeback)
        self._pending_flush = _PendingFlush(
            self.vclock_ns + round(cost * self.clock_div * jitter))
        self._update_busy()

    # -- virtual time ---------------------------------------------------------

    def next_event_ns(self) -> int | None:
        times = []
        if self._pending_job is not None and self._pending_job.finish_ns is not None:
            times.append(self._pending_job.finish_ns)
        if self._pending_flush is not None:
            times.append(self._pending_flush.finish_ns)
        return min(times) if times else None

    def tick(self, dt_ns: int) -> list[InterruptEvent]:
        if dt_ns < 0:
            raise ValueError("dt_ns must be >= 0")
        end = self.vclock_ns + dt_ns
        events: list[InterruptEvent] = []
        while True:
            t = self.next_event_ns()
            if t is None or t > end:
                break
            self.vclock_ns = max(self.vclock_ns, t)
            events.extend(self._complete_due(t))
        self.vclock_ns = end
        return events

    def _complete_due(self, t: int) -> list[InterruptEvent]:
        events = []
        job = self._pending_job
        if job is not None and job.finish_ns is not None and job.finish_ns <= t:
            self._pending_job = None
            self.job_state = job.status
            raised = 0
            if job.status == JOB_DONE:
                self.writeback.update(job.stores)
                raised = IRQ_JOB_DONE
            elif job.status == JOB_MMU_FAULT:
                self.fault_addr = (job.fault_va or 0) & U32
                raised = IRQ_MMU_FAULT
            # JOB_BAD_STATE raises nothing; the driver watchdog catches it
            if raised:
                self.irq_rawstat |= raised
                delivered = raised & self._stored["GPU_IRQ_MASK"]
                if delivered:
                    events.append(InterruptEvent(t, delivered))
            self._update_busy()
        flush = self._pending_flush
        if flush is not None and flush.finish_ns <= t:
            self._pending_flush = None
            for pa, b in self.writeback.items():
                self.mem[pa] = b
            self.writeback = {}
            self._update_busy()
        return events

    # -- busy/idle trace -------------------------------------------------------

    def _update_busy(self):
        self._set_busy(self.job_state == JOB_RUNNING or self._pending_flush is not None)

    def _set_busy(self, busy: bool):
        periods = self._busy_periods
        open_period = bool(periods) and periods[-1][1] is None
        if busy and not open_period:
            periods.append([self.vclock_ns, None])
        elif not busy and open_period:
            periods[-1][1] = self.vclock_ns

    def was_idle_between(self, t0: int, t1: int) -> bool:
        """True iff the device was provably idle for all of [t0, t1]."""
        if t1 <= t0:
            return True
        for start, end in self._busy_periods:
            if end is None:
                end = self.vclock_ns
            if start < t1 and end > t0:
                return False
        return True

    # -- snapshot / restore ------------------------------------------------------

    def snapshot(self) -> DeviceSnapshot:
        import copy

        return DeviceSnapshot(
            sku_id=self.sku.sku_id,
            vclock_ns=self.vclock_ns,
            regs=dict(self._stored),
            irq_rawstat=self.irq_rawstat,
            irq_mask=self._stored["GPU_IRQ_MASK"],
            cores_on=self.cores_on,
            clock_div=self.clock_div,
            job_state=self.job_state,
            fault_addr=self.fault_addr,
            writeback=dict(self.writeback),
            tlb=dict(self.tlb),
            pending_job=copy.deepcopy(self._pending_job),
            pending_flush=copy.deepcopy(self._pending_flush),
            rng_state=self.rng.getstate(),
            busy_since=self._busy_periods[-1][0]
            if self._busy_periods and self._busy_periods[-1][1] is None else None,
        )

    def restore(self, snap: DeviceSnapshot) -> None:
        import copy

        if snap.sku_id != self.sku.sku_id:
            raise SkuMismatch(f"snapshot from SKU {snap.sku_id:#x}, device is {self.sku.sku_id:#x}")
        self.vclock_ns = snap.vclock_ns
        self._stored = dict(snap.regs)
        self.irq_rawstat = snap.irq_rawstat
        self.cores_on = snap.cores_on
        self.clock_div = snap.clock_div
        self.job_state = snap.job_state
        self.fault_addr = snap.fault_addr
        self.writeback = dict(snap.writeback)
        self.tlb = dict(snap.tlb)
        self._pending_job = copy.deepcopy(snap.pending_job)
        self._pending_flush = copy.deepcopy(snap.pending_flush)
        self.rng.setstate(snap.rng_state)
        self._busy_periods = []
        if snap.busy_since is not None:
            self._busy_periods.append([snap.busy_since, None])

    # -- fault injection (test harness only) ---------------------------------------

    def inject_fault(self, kind: FaultKind, arg: int = 0) -> None:
        if kind is FaultKind.OFFLINE_CORES:
            self.cores_on &= ~arg & U32
        elif kind is FaultKind.CORRUPT_PTE:
            self.corrupt_pte(arg)
        elif kind is FaultKind.STALL:
            self.stall(arg)
        else:
            raise ValueError(kind)

    def offline_cores(self, mask: int) -> None:
        self.inject_fault(FaultKind.OFFLINE_CORES, mask)

    def corrupt_pte(self, gpu_va: int) -> None:
        """Flip the VALID bit of the L2 entry mapping ``gpu_va``."""
        base = self.mmu_base
        if base == 0:
            raise ValueError("no page tables live")
        l1_entry = self._mem_u32(base + ((gpu_va >> 22) & 0x3FF) * 4)
        if Perm.VALID not in self.sku.decode_perms(l1_entry & 0xF):
            raise ValueError(f"VA {gpu_va:#x} has no live mapping to corrupt")
        l2_base = l1_entry & ~(PAGE_SIZE - 1)
        pte_pa = l2_base + ((gpu_va >> 12) & 0x3FF) * 4
        entry = self._mem_u32(pte_pa)
        valid_bit = self.sku.encode_perms(Perm.VALID)
        self.mem_write(pte_pa, ((entry ^ valid_bit) & U32).to_bytes(4, "little"))

    def stall(self, extra_ns: int) -> None:
        job = self._pending_job
        if job is not None and job.finish_ns is not None:
            job.finish_ns += extra_ns
