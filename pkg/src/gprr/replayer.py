"""Replay engine: the drop-in stand-in for the recorded GPU stack.

A session owns a device, loads one recording at a time, and interprets
its actions through a nano driver that knows only how to poke named
registers, edit page tables, copy memory and wait for interrupts. There
is no dynamic policy: every register touched during replay is named by
an action or belongs to the fixed reset/preempt sequences.

Divergence handling follows a bounded ladder: reset + reload + re-run,
then re-runs that widen the pacing floors and wait budgets of the eight
actions leading up to (and including) the failure, doubling each attempt.
Four attempts, then a final report naming the failing action and its
origin. When checkpointing is on, retries resume from the latest
checkpoint instead of the start.
"""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass, field

from . import device as dv
from .actions import (ActionClass, IoDescriptor, IoMode, IoRole, LoadMemDump,
                      MapGpuMem, Recording, RegRead, RegReadWait, RegWrite,
                      ReplayAction, UnmapGpuMem, WaitIrq)
from .device import Device, DeviceSnapshot, Perm, RegisterMap, SKUS_BY_ID
from .recfmt import inflate
from .verifier import VerificationReport, verify

NANO_ACCESS_NS = 20
LOAD_BYTE_NS = 0.05
INPUT_BYTE_NS = 0.1
PREEMPT_DRAIN_BUDGET_NS = 10_000_000


class ReplayError(Exception):
    """Misuse or unrecoverable environment problem, distinct from a
    divergence (which is data, not an exception)."""


class LoadError(ReplayError):
    pass


class DivergenceKind(enum.Enum):
    VALUE_MISMATCH = "value_mismatch"
    IRQ_MISMATCH = "irq_mismatch"
    MMU_FAULT = "mmu_fault"
    TIMEOUT = "timeout"


@dataclass(frozen=True)
class DivergenceReport:
    action_index: int
    kind: DivergenceKind
    reg: str = ""
    expected: int = 0
    got: int = 0
    va: int = 0
    detail: str = ""
    origin: str = ""  # workload label + action index, set on final reports


@dataclass(frozen=True)
class PreemptAck:
    delay_ns: int  # request-to-reset-done, virtual


@dataclass
class Checkpoint:
    token: object
    action_index: int
    jobs_done: int
    snapshot: DeviceSnapshot
    memory: dict[int, bytes]       # gpu_va -> range bytes
    table_pages: dict[int, bytes]  # pa -> page bytes
    byte_count: int


@dataclass
class ReplayResult:
    ok: bool
    outputs: list[bytes] = field(default_factory=list)
    divergence: DivergenceReport | None = None
    recovery_attempts: int = 0
    vclock_ns: int = 0
    preempted: bool = False
    preempt_ack: PreemptAck | None = None
    event_log: list[tuple] = field(default_factory=list)


@dataclass
class ReplayConfig:
    honor_skips: bool = True
    watchdog_mult: int = 10
    watchdog_floor_ns: int = 1_000_000
    poll_budget_mult: int = 2
    poll_budget_min: int = 4
    poll_period_ns: int = 200
    checkpoint_every_jobs: int = 0  # 0 = checkpointing off
    checkpoint_byte_cost_ns: float = 1.0
    max_attempts: int = 4
    delay_window: int = 8
    force: bool = False


def expected_event_log(rec: Recording) -> list[tuple]:
    """The state-changing event sequence a correct replay must produce."""
    log = []
    for a in rec.actions:
        if isinstance(a, RegWrite):
            log.append(("w", a.reg_name, a.value))
        elif isinstance(a, RegRead) and a.state_class is ActionClass.STATE:
            log.append(("r", a.reg_name, a.expect_value))
        elif isinstance(a, WaitIrq):
            log.append(("irq", a.expect_rawstat))
    return log


class ReplaySession:
    """Owns one device; drives replays via step(). Not thread-safe except
    for request_preempt(), which only sets a flag read between actions."""

    def __init__(self, dev: Device, config: ReplayConfig | None = None,
                 reg_map: RegisterMap | None = None):
        self.dev = dev
        self.config = config or ReplayConfig()
        self.reg_map = reg_map or dev.reg_map
        self.loaded: Recording | None = None
        self.cursor = 0
        self.jobs_done = 0
        self.vclock_consumed = 0
        self.event_log: list[tuple] = []
        self.divergence_log: list[DivergenceReport] = []
        self.last_checkpoint: Checkpoint | None = None
        self.preempted = False
        self.last_preempt_ack: PreemptAck | None = None
        self.attempt_hook = None      # callable(device, attempt_index)
        self.post_action_hook = None  # callable(session, index, action)
        self._preempt_request = threading.Event()
        self._preempt_request_t = 0
        self._from_sku = dev.sku
        self._ranges: dict[int, tuple[int, list[int]]] = {}  # va -> (pages, pas)
        self._perm_bits: dict[int, int] = {}
        self._unmapped: set[int] = set()
        self._l1_pa = 0
        self._l2_pages: dict[int, int] = {}
        self._window_mult: dict[int, int] = {}
        self._at_job_boundary = True
        self._free_pa = dv.PAGE_SIZE  # bump allocator; page 0 stays reserved

    # -- nano driver -----------------------------------------------------------

    def _tick(self, ns: int):
        evs = self.dev.tick(ns)
        self.vclock_consumed += ns
        return evs

    def _offset(self, name: str) -> int:
        reg = self.reg_map.by_name(name)
        if reg is None:
            raise ReplayError(f"recording names unknown register {name!r}")
        return reg.offset

    def _write(self, name: str, value: int):
        try:
            self.dev.reg_write(self._offset(name), value)
        except dv.BusError as e:
            raise ReplayError(f"register write rejected: {e}") from e
        self._tick(NANO_ACCESS_NS)

    def _read(self, name: str) -> int:
        try:
            v = self.dev.reg_read(self._offset(name))
        except dv.BusError as e:
            raise ReplayError(f"register read rejected: {e}") from e
        self._tick(NANO_ACCESS_NS)
        return v

    def _reset_sequence(self):
        self._write("GPU_CMD", dv.CMD_SOFT_RESET)
        raw = self._read("GPU_IRQ_RAWSTAT")
        if not raw & dv.IRQ_RESET_DONE:
            raise ReplayError("device did not acknowledge soft reset")
        self._write("GPU_IRQ_CLEAR", dv.IRQ_RESET_DONE)

    # -- memory plumbing ----------------------------------------------------------

    def _alloc_page(self) -> int:
        pa = self._free_pa
        if pa + dv.PAGE_SIZE > dv.MEM_BYTES:
            raise LoadError("out of physical pages")
        self._free_pa += dv.PAGE_SIZE
        self.dev.mem_write(pa, b"\x00" * dv.PAGE_SIZE)
        return pa

    def _va_to_pa(self, va: int) -> int:
        for base, (pages, pas) in self._ranges.items():
            if base <= va < base + pages * dv.PAGE_SIZE:
                off = va - base
                return pas[off // dv.PAGE_SIZE] + off % dv.PAGE_SIZE
        raise ReplayError(f"VA {va:#x} not assigned by this session")

    def _write_va(self, va: int, data: bytes):
        off = 0
        while off < len(data):
            pa = self._va_to_pa(va + off)
            chunk = min(len(data) - off, dv.PAGE_SIZE - (va + off) % dv.PAGE_SIZE)
            self.dev.mem_write(pa, data[off:off + chunk])
            off += chunk

    def _read_va(self, va: int, n: int) -> bytes:
        out = bytearray()
        while len(out) < n:
            pa = self._va_to_pa(va + len(out))
            chunk = min(n - len(out), dv.PAGE_SIZE - (va + len(out)) % dv.PAGE_SIZE)
            out += self.dev.mem_read(pa, chunk)
        return bytes(out)

    def _install_range(self, va: int):
        pages, pas = self._ranges[va]
        sku = self.dev.sku
        for i, pa in enumerate(pas):
            page_va = va + i * dv.PAGE_SIZE
            l2_pa = self._l2_pages[(page_va >> 22) & 0x3FF]
            perms = self._from_sku.decode_perms(self._perm_bits[va])
            entry = pa | sku.encode_perms(perms | Perm.VALID)
            self.dev.mem_write(l2_pa + ((page_va >> 12) & 0x3FF) * 4,
                               entry.to_bytes(4, "little"))

    def _clear_range(self, va: int):
        pages, _ = self._ranges[va]
        for i in range(pages):
            page_va = va + i * dv.PAGE_SIZE
            l2_pa = self._l2_pages[(page_va >> 22) & 0x3FF]
            self.dev.mem_write(l2_pa + ((page_va >> 12) & 0x3FF) * 4, b"\x00" * 4)

    # -- load -----------------------------------------------------------------------

    def load(self, rec: Recording, verify_report: VerificationReport | None = None):
        """Assign fresh zeroed pages, rebuild page tables, write dumps and
        program the MMU. A second load fully supersedes the first."""
        cfg = self.config
        if rec.header.register_map_hash != self.reg_map.digest() and not cfg.force:
            raise LoadError("recording register map hash does not match replayer map")
        if rec.header.sku_id != self.dev.sku.sku_id and not cfg.force:
            raise LoadError(
                f"recording is for SKU {rec.header.sku_id:#x}, device is "
                f"{self.dev.sku.sku_id:#x}; patch it first")
        if verify_report is None:
            verify_report = verify(rec, self.reg_map, dv.MEM_BYTES)
        if not verify_report.ok and not cfg.force:
            raise LoadError(
                f"recording failed verification: {len(verify_report.violations)} violations")
        self._from_sku = SKUS_BY_ID.get(rec.header.sku_id, self.dev.sku)

        if self.loaded is not None:
            self._scrub_pages()
        self.loaded = rec
        self.last_checkpoint = None
        self._window_mult = {}
        self._free_pa = dv.PAGE_SIZE
        self._ranges = {}
        self._perm_bits = {}
        self._l2_pages = {}
        self._unmapped = set()

        for a in rec.actions:
            if isinstance(a, MapGpuMem) and a.gpu_va not in self._ranges:
                pages = max(1, -(-a.len_bytes // dv.PAGE_SIZE))
                self._ranges[a.gpu_va] = (pages, [])
                self._perm_bits[a.gpu_va] = a.perm_flags_encoded
        self._l1_pa = self._alloc_page()
        sku = self.dev.sku
        for va, (pages, pas) in self._ranges.items():
            for i in range(pages):
                l1_idx = ((va + i * dv.PAGE_SIZE) >> 22) & 0x3FF
                if l1_idx not in self._l2_pages:
                    l2_pa = self._alloc_page()
                    self._l2_pages[l1_idx] = l2_pa
                    entry = l2_pa | sku.encode_perms(Perm.VALID | Perm.READ)
                    self.dev.mem_write(self._l1_pa + l1_idx * 4,
                                       entry.to_bytes(4, "little"))
                pas.append(self._alloc_page())
            self._install_range(va)

        self._write_dumps()
        self.dev.reg_write(self._offset("MMU_TABLE_BASE_LO"), self._l1_pa & 0xFFFFFFFF)
        self.dev.reg_write(self._offset("MMU_TABLE_BASE_HI"), self._l1_pa >> 32)
        self.dev.reg_write(self._offset("GPU_CMD"), dv.CMD_TLB_INVALIDATE)
        self.cursor = 0
        self.jobs_done = 0
        self._at_job_boundary = True

    def _write_dumps(self):
        for d in self.loaded.dumps:
            self._write_va(d.gpu_va, inflate(d.payload, d.raw_len))

    def _scrub_pages(self):
        zero = b"\x00" * dv.PAGE_SIZE
        for pages, pas in self._ranges.values():
            for pa in pas:
                self.dev.mem_write(pa, zero)
        for l2_pa in self._l2_pages.values():
            self.dev.mem_write(l2_pa, zero)
        if self._l1_pa:
            self.dev.mem_write(self._l1_pa, zero)

    def _reload(self):
        """Fresh start for a recovery attempt: reset, rebuild tables,
        rewrite dumps."""
        self._reset_sequence()
        zero = b"\x00" * dv.PAGE_SIZE
        for va, (pages, pas) in self._ranges.items():
            for pa in pas:
                self.dev.mem_write(pa, zero)
        for l1_idx, l2_pa in self._l2_pages.items():
            self.dev.mem_write(l2_pa, zero)
        self.dev.mem_write(self._l1_pa, zero)
        sku = self.dev.sku
        for l1_idx, l2_pa in self._l2_pages.items():
            entry = l2_pa | sku.encode_perms(Perm.VALID | Perm.READ)
            self.dev.mem_write(self._l1_pa + l1_idx * 4, entry.to_bytes(4, "little"))
        self._unmapped = set()
        for va in self._ranges:
            self._install_range(va)
        self._write_dumps()
        self.dev.reg_write(self._offset("MMU_TABLE_BASE_LO"), self._l1_pa & 0xFFFFFFFF)
        self.dev.reg_write(self._offset("MMU_TABLE_BASE_HI"), self._l1_pa >> 32)
        self.dev.reg_write(self._offset("GPU_CMD"), dv.CMD_TLB_INVALIDATE)
        self.cursor = 0
        self.jobs_done = 0
        self._at_job_boundary = True

    # -- stepping -------------------------------------------------------------------

    def step(self) -> DivergenceReport | None:
        """Execute the action at the cursor. Returns a report on
        divergence (cursor stays on the failing action), else None."""
        if self.loaded is None:
            raise ReplayError("no recording loaded")
        if self.cursor >= len(self.loaded.actions):
            raise ReplayError("cursor past end of recording")
        a = self.loaded.actions[self.cursor]
        mult = self._window_mult.get(self.cursor, 1)
        pad = (a.min_interval_ns if self.config.honor_skips else a.raw_interval_ns)
        if pad:
            self._tick(pad * mult)
        report = self._dispatch(a, mult)
        if report is not None:
            self.divergence_log.append(report)
            return report
        if self.post_action_hook is not None:
            self.post_action_hook(self, self.cursor, a)
        self.cursor += 1
        if (isinstance(a, WaitIrq) and a.expect_rawstat & dv.IRQ_JOB_DONE):
            self.jobs_done += 1
            self._at_job_boundary = True
            every = self.config.checkpoint_every_jobs
            if every and self.jobs_done % every == 0:
                self.checkpoint()
        elif isinstance(a, RegWrite) and a.reg_name == "JOB_START":
            self._at_job_boundary = False
        return None

    def _dispatch(self, a: ReplayAction, mult: int) -> DivergenceReport | None:
        cfg = self.config
        if isinstance(a, RegWrite):
            self._write(a.reg_name, a.value)
            self.event_log.append(("w", a.reg_name, a.value))
            if a.reg_name == "GPU_CMD" and a.value == dv.CMD_SOFT_RESET:
                # reset wipes the MMU base; replaying pages live elsewhere
                # than at record time, so re-arming it is the nano driver's
                # fixed post-reset step
                self.dev.reg_write(self._offset("MMU_TABLE_BASE_LO"),
                                   self._l1_pa & 0xFFFFFFFF)
                self.dev.reg_write(self._offset("MMU_TABLE_BASE_HI"),
                                   self._l1_pa >> 32)
            return None
        if isinstance(a, RegRead):
            v = self._read(a.reg_name)
            if a.state_class is ActionClass.NONDET:
                return None  # read and discard
            if v != a.expect_value:
                return DivergenceReport(self.cursor, DivergenceKind.VALUE_MISMATCH,
                                        reg=a.reg_name, expected=a.expect_value, got=v)
            self.event_log.append(("r", a.reg_name, v))
            return None
        if isinstance(a, RegReadWait):
            budget = max(cfg.poll_budget_mult * a.max_polls, cfg.poll_budget_min) * mult
            n = 0
            while True:
                v = self._read(a.reg_name)
                n += 1
                if (v & a.mask) == a.expect_value:
                    return None
                if n >= budget:
                    return DivergenceReport(
                        self.cursor, DivergenceKind.TIMEOUT, reg=a.reg_name,
                        expected=a.expect_value, got=v & a.mask,
                        detail=f"poll budget {budget} exhausted")
                self._tick(cfg.poll_period_ns)
        if isinstance(a, WaitIrq):
            return self._wait_irq(a, mult)
        if isinstance(a, LoadMemDump):
            d = self.loaded.dump_by_id(a.dump_id)
            data = inflate(d.payload, d.raw_len)
            self._write_va(a.gpu_va, data)
            self._tick(round(len(data) * LOAD_BYTE_NS))
            return None
        if isinstance(a, MapGpuMem):
            if a.gpu_va in self._unmapped:
                self._unmapped.discard(a.gpu_va)
                self._install_range(a.gpu_va)
            self._write("GPU_CMD", dv.CMD_TLB_INVALIDATE)
            return None
        if isinstance(a, UnmapGpuMem):
            self._clear_range(a.gpu_va)
            self._unmapped.add(a.gpu_va)
            self._write("GPU_CMD", dv.CMD_TLB_INVALIDATE)
            return None
        raise ReplayError(f"unknown action {a!r}")

    def _wait_irq(self, a: WaitIrq, mult: int) -> DivergenceReport | None:
        cfg = self.config
        watchdog = max(cfg.watchdog_mult * a.residency_ns, cfg.watchdog_floor_ns) * mult
        deadline = self.dev.vclock_ns + watchdog
        while True:
            raw = self.dev.irq_rawstat
            unexpected = raw & ~a.expect_rawstat & dv.IRQ_ALL
            if unexpected & dv.IRQ_MMU_FAULT:
                return DivergenceReport(self.cursor, DivergenceKind.MMU_FAULT,
                                        va=self._read("MMU_FAULT_ADDR"))
            if unexpected:
                return DivergenceReport(self.cursor, DivergenceKind.IRQ_MISMATCH,
                                        expected=a.expect_rawstat, got=raw)
            if raw & a.expect_rawstat == a.expect_rawstat:
                self.event_log.append(("irq", a.expect_rawstat))
                return None
            nxt = self.dev.next_event_ns()
            if nxt is None or nxt > deadline:
                self._tick(max(0, deadline - self.dev.vclock_ns))
                raw = self.dev.irq_rawstat
                if raw & a.expect_rawstat == a.expect_rawstat:
                    self.event_log.append(("irq", a.expect_rawstat))
                    return None
                return DivergenceReport(
                    self.cursor, DivergenceKind.TIMEOUT,
                    expected=a.expect_rawstat, got=raw,
                    detail=f"no interrupt within {watchdog} ns")
            self._tick(nxt - self.dev.vclock_ns)

    # -- replay / recovery -------------------------------------------------------------

    def _normalize_inputs(self, inputs) -> dict[int, bytes]:
        decls = self.loaded.inputs()
        if inputs is None:
            supplied = {}
        elif isinstance(inputs, (bytes, bytearray)):
            supplied = {0: bytes(inputs)}
        elif isinstance(inputs, dict):
            supplied = dict(inputs)
        else:
            supplied = {i: bytes(b) for i, b in enumerate(inputs)}
        for i, d in enumerate(decls):
            buf = supplied.get(i)
            if buf is None:
                if d.mode is IoMode.BY_ADDRESS:
                    raise ReplayError(f"input {i} is required (by-address)")
                continue
            if len(buf) != d.len_bytes:
                raise ReplayError(
                    f"input {i} is {len(buf)} bytes, recording expects {d.len_bytes}")
        return supplied

    def write_inputs(self, inputs) -> None:
        """Deposit input bytes at their recorded GPU addresses."""
        supplied = self._normalize_inputs(inputs)
        for i, d in enumerate(self.loaded.inputs()):
            buf = supplied.get(i)
            if buf is not None:
                self._write_va(d.gpu_va, buf)
                self._tick(round(len(buf) * INPUT_BYTE_NS))

    def _run_once(self, inputs: dict[int, bytes],
                  from_checkpoint: Checkpoint | None) -> DivergenceReport | str | None:
        if from_checkpoint is not None:
            self.restore(from_checkpoint)
        for i, d in enumerate(self.loaded.inputs()):
            buf = inputs.get(i)
            if buf is not None:
                self._write_va(d.gpu_va, buf)
                self._tick(round(len(buf) * INPUT_BYTE_NS))
        actions = self.loaded.actions
        while self.cursor < len(actions):
            if self._preempt_request.is_set():
                self._preempt_request.clear()
                self._do_preempt(self._preempt_request_t)
                return "preempted"
            report = self.step()
            if report is not None:
                return report
        return None

    def replay(self, inputs=None) -> ReplayResult:
        """Execute the loaded recording on new inputs; recover on
        divergence. Returns outputs extracted from the OUTPUT regions."""
        if self.loaded is None:
            raise ReplayError("no recording loaded")
        supplied = self._normalize_inputs(inputs)
        self.preempted = False
        self.event_log = []
        if self.cursor != 0:
            self._reload()  # a session replays its recording any number of times
        start = self.vclock_consumed
        if self.attempt_hook is not None:
            self.attempt_hook(self.dev, 0)
        outcome = self._run_once(supplied, None)
        attempts = 0
        if isinstance(outcome, DivergenceReport):
            outcome, attempts = self._recover_loop(outcome, supplied)
        if outcome == "preempted":
            return ReplayResult(ok=False, preempted=True,
                                preempt_ack=self.last_preempt_ack,
                                recovery_attempts=attempts,
                                vclock_ns=self.vclock_consumed - start,
                                event_log=list(self.event_log))
        if isinstance(outcome, DivergenceReport):
            return ReplayResult(ok=False, divergence=outcome,
                                recovery_attempts=attempts,
                                vclock_ns=self.vclock_consumed - start,
                                event_log=list(self.event_log))
        outputs = [self._read_va(d.gpu_va, d.len_bytes)
                   for d in self.loaded.outputs()]
        return ReplayResult(ok=True, outputs=outputs, recovery_attempts=attempts,
                            vclock_ns=self.vclock_consumed - start,
                            event_log=list(self.event_log))

    def recover(self, report: DivergenceReport, inputs=None) -> ReplayResult:
        """Public entry for the recovery ladder after a manual step() run."""
        outcome, attempts = self._recover_loop(report, self._normalize_inputs(inputs))
        if isinstance(outcome, DivergenceReport):
            return ReplayResult(ok=False, divergence=outcome,
                                recovery_attempts=attempts,
                                event_log=list(self.event_log))
        if outcome == "preempted":
            return ReplayResult(ok=False, preempted=True,
                                preempt_ack=self.last_preempt_ack,
                                recovery_attempts=attempts)
        outputs = [self._read_va(d.gpu_va, d.len_bytes)
                   for d in self.loaded.outputs()]
        return ReplayResult(ok=True, outputs=outputs, recovery_attempts=attempts,
                            event_log=list(self.event_log))

    def _recover_loop(self, report: DivergenceReport, inputs: dict[int, bytes]):
        cfg = self.config
        for attempt in range(1, cfg.max_attempts + 1):
            if attempt == 1:
                self._window_mult = {}
            else:
                lo = max(0, report.action_index - cfg.delay_window + 1)
                self._window_mult = {i: 2 ** (attempt - 1)
                                     for i in range(lo, report.action_index + 1)}
            cp = self.last_checkpoint if cfg.checkpoint_every_jobs else None
            if cp is None:
                self._reload()
            self.event_log = []
            if self.attempt_hook is not None:
                self.attempt_hook(self.dev, attempt)
            outcome = self._run_once(inputs, cp)
            if outcome is None or outcome == "preempted":
                self._window_mult = {}
                return outcome, attempt
            report = outcome
        label = self.loaded.header.workload_label
        final = DivergenceReport(
            report.action_index, report.kind, report.reg, report.expected,
            report.got, report.va, report.detail,
            origin=f"{label}#action{report.action_index}")
        self._window_mult = {}
        return final, cfg.max_attempts

    # -- checkpoint / restore ---------------------------------------------------------

    def checkpoint(self) -> Checkpoint:
        if self.loaded is None:
            raise ReplayError("no recording loaded")
        if not self._at_job_boundary:
            raise ReplayError("checkpoint only at a job boundary")
        memory = {va: self._read_va(va, pages * dv.PAGE_SIZE)
                  for va, (pages, _) in self._ranges.items()
                  if va not in self._unmapped}
        tables = {pa: self.dev.mem_read(pa, dv.PAGE_SIZE)
                  for pa in [self._l1_pa, *self._l2_pages.values()]}
        nbytes = sum(len(b) for b in memory.values()) + sum(len(b) for b in tables.values())
        cp = Checkpoint(token=(id(self), self.loaded), action_index=self.cursor,
                        jobs_done=self.jobs_done, snapshot=self.dev.snapshot(),
                        memory=memory, table_pages=tables, byte_count=nbytes)
        self._tick(round(nbytes * self.config.checkpoint_byte_cost_ns))
        self.last_checkpoint = cp
        return cp

    def restore(self, cp: Checkpoint) -> None:
        if self.loaded is None or cp.token != (id(self), self.loaded):
            raise ReplayError("checkpoint belongs to a different session or recording")
        self.dev.restore(cp.snapshot)
        for pa, data in cp.table_pages.items():
            self.dev.mem_write(pa, data)
        self._unmapped = set(self._ranges) - set(cp.memory)
        for va, data in cp.memory.items():
            self._write_va(va, data)
        self.cursor = cp.action_index
        self.jobs_done = cp.jobs_done
        self._at_job_boundary = True
        self.preempted = False

    # -- preemption ----------------------------------------------------------------

    def request_preempt(self) -> None:
        """Thread-safe: ask the running replay loop to yield the GPU at the
        next action boundary."""
        self._preempt_request_t = self.dev.vclock_ns
        self._preempt_request.set()

    def preempt(self) -> PreemptAck:
        """Immediate handoff; legal between steps."""
        return self._do_preempt(self.dev.vclock_ns)

    def _do_preempt(self, t_request: int) -> PreemptAck:
        self._write("GPU_CMD", dv.CMD_CACHE_FLUSH)
        deadline = self.dev.vclock_ns + PREEMPT_DRAIN_BUDGET_NS
        while self._read("GPU_STATUS") & dv.STATUS_DIRTY:
            nxt = self.dev.next_event_ns()
            if nxt is None or nxt > deadline:
                break
            self._tick(nxt - self.dev.vclock_ns)
        self._write("GPU_CMD", dv.CMD_TLB_INVALIDATE)
        self._reset_sequence()
        ack = PreemptAck(delay_ns=self.dev.vclock_ns - t_request)
        self.preempted = True
        self.last_preempt_ack = ack
        return ack

    # -- lifecycle -------------------------------------------------------------------

    def cleanup(self) -> None:
        """Reset the device and scrub every page this session touched."""
        if self.loaded is not None:
            self._scrub_pages()
        self.loaded = None
        self._reset_sequence()
        self.dev.release(self)


def init(dev: Device, config: ReplayConfig | None = None,
         reg_map: RegisterMap | None = None) -> ReplaySession:
    """Acquire the device with a reset; fails if it is already owned."""
    session = ReplaySession(dev, config, reg_map)
    dev.claim(session)
    try:
        session._reset_sequence()
    except Exception:
        dev.release(session)
        raise
    return session


@dataclass
class SequenceResult:
    ok: bool
    outputs: list[bytes]
    results: list[ReplayResult]
    vclock_ns: int


def replay_sequence(session: ReplaySession, recs: list[Recording],
                    inputs=None) -> SequenceResult:
    """Replay recordings in order, wiring each one's output to the next
    one's input when the descriptor lengths line up."""
    carry: list[bytes] | None = None
    results = []
    total = 0
    for k, rec in enumerate(recs):
        session.load(rec)
        if k == 0:
            feed = inputs
        else:
            decls = rec.inputs()
            feed = {}
            if carry and decls and len(carry[0]) == decls[0].len_bytes:
                feed = {0: carry[0]}
        res = session.replay(feed)
        results.append(res)
        total += res.vclock_ns
        if not res.ok:
            return SequenceResult(False, [], results, total)
        carry = res.outputs
    return SequenceResult(True, carry or [], results, total)
