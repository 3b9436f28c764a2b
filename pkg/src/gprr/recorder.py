"""Recorder: turns one instrumented stack run into a replayable Recording.

Attaches to the refstack driver's accessor stream and
  * summarizes register traffic into replay actions (poll loops collapse
    into a single RegReadWait),
  * dumps GPU-mapped memory right before each job kick, filtered by page
    role (executable pages always kept, internal scratch dropped,
    by-address input regions never captured) and deduplicated by content
    hash,
  * classifies the gap before each action as skippable iff the GPU was
    provably idle throughout it,
  * discovers input/output GPU addresses by injecting high-entropy magic
    input and matching it in the dumps, re-running with fresh magic until
    output matches are unambiguous.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, field

from . import device as dv
from .actions import (ActionClass, DumpOrigin, Granularity, IoDescriptor,
                      IoMode, IoRole, LoadMemDump, MapGpuMem, MemDump,
                      Recording, RecordingHeader, RegRead, RegReadWait,
                      RegWrite, ReplayAction, UnmapGpuMem, WaitIrq)
from .device import StateClass
from .recfmt import deflate
from .refstack import (Allocation, AllocFlags, GpuStack, PortEvent,
                       StackListener, WorkloadGraph)

DUMP_BYTE_NS = 0.2  # recording overhead charged while dumping (GPU idle)


class DiscoveryError(Exception):
    pass


class RecordError(Exception):
    pass


@dataclass
class RecordHarness:
    """Record-time configuration supplied by the developer."""

    input_modes: dict[int, IoMode] = field(default_factory=dict)
    magic_seed: int = 1
    max_trials: int = 5
    granularity: Granularity = Granularity.MONOLITHIC
    created_unix: int = 0
    include_scratch: bool = False  # turn the scratch/internal dump filter off
    pre_scan_hook: object = None  # test hook: callable(stack) before the final scan

    def mode_for(self, index: int) -> IoMode:
        return self.input_modes.get(index, IoMode.BY_ADDRESS)


def parse_harness(text: str) -> RecordHarness:
    """Line format: ``input <idx> by_value|by_address|both``,
    ``magic_seed <n>``, ``trials <n>``, ``granularity monolithic|per_layer``."""
    h = RecordHarness()
    modes = {"by_value": IoMode.BY_VALUE, "by_address": IoMode.BY_ADDRESS,
             "both": IoMode.BOTH}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "input":
                h.input_modes[int(parts[1], 0)] = modes[parts[2]]
            elif parts[0] == "magic_seed":
                h.magic_seed = int(parts[1], 0)
            elif parts[0] == "trials":
                h.max_trials = int(parts[1], 0)
            elif parts[0] == "granularity":
                h.granularity = Granularity[parts[1].upper()]
            else:
                raise KeyError(parts[0])
        except (KeyError, IndexError, ValueError) as e:
            raise ValueError(f"harness line {lineno}: {raw!r}") from e
    return h


# ---------------------------------------------------------------------------
# Interval classification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IntervalDecision:
    skip: bool
    floor_ns: int  # 0 when skipped, the observed gap otherwise


def classify_interval(t0: int, t1: int, was_idle) -> IntervalDecision:
    """SKIP iff the device was provably idle for the entire [t0, t1];
    ``was_idle`` is a predicate like Device.was_idle_between."""
    gap = max(0, t1 - t0)
    if gap == 0 or was_idle(t0, t1):
        return IntervalDecision(True, 0)
    return IntervalDecision(False, gap)


# ---------------------------------------------------------------------------
# Poll summarizing
# ---------------------------------------------------------------------------

def summarize_poll(window: list[tuple[str, int]], reg_map=dv.DEFAULT_REGISTER_MAP,
                   mask: int | None = None):
    """Collapse a window of consecutive reads of one register.

    Two or more reads whose masked value holds steady and then changes on
    the last read become one RegReadWait. A single read passes through as
    a RegRead (with no expectation when the register is nondeterministic).
    Returns None for an empty window.
    """
    if not window:
        return None
    names = {r for r, _ in window}
    if len(names) != 1:
        raise ValueError("window must cover a single register")
    name = window[0][0]
    reg = reg_map.by_name(name)
    nondet = reg is not None and reg.state_class is StateClass.NONDET_READ
    if len(window) == 1:
        value = window[0][1]
        if nondet:
            return RegRead(reg_name=name, expect_value=0,
                           state_class=ActionClass.NONDET)
        return RegRead(reg_name=name, expect_value=value,
                       state_class=ActionClass.STATE)
    values = [v for _, v in window]
    if mask is None:
        mask = (values[0] ^ values[-1]) & 0xFFFFFFFF
    stable = all((v & mask) == (values[0] & mask) for v in values[:-1])
    changed = (values[-1] & mask) != (values[0] & mask)
    if not (stable and changed):
        raise ValueError("window is not an unchanged-then-changed poll run")
    return RegReadWait(reg_name=name, mask=mask,
                       expect_value=values[-1] & mask, max_polls=len(values))


# ---------------------------------------------------------------------------
# Run tracing
# ---------------------------------------------------------------------------

@dataclass
class _Region:
    gpu_va: int
    len_bytes: int  # logical mapping length; dumps and scans cover whole pages
    perm_bits: int
    flags: AllocFlags
    content: bytes = b""

    @property
    def page_len(self) -> int:
        return max(1, -(-self.len_bytes // dv.PAGE_SIZE)) * dv.PAGE_SIZE


@dataclass
class _Entry:
    ev: PortEvent
    t0: int
    t1: int
    kick_regions: list[_Region] | None = None  # set on pre_kick entries


class _RunTrace(StackListener):
    """Listener that captures everything one build pass needs."""

    def __init__(self, stack: GpuStack, charge_dump_time: bool = True):
        self.stack = stack
        self.charge_dump_time = charge_dump_time
        self.entries: list[_Entry] = []
        self.allocations: list[Allocation] = []
        self.layer_marks: dict[int, int] = {}        # layer -> first entry index
        self.layer_regions: dict[int, list[_Region]] = {}
        self.live: dict[int, _Region] = {}           # va -> region (no content)
        self.output: bytes | None = None
        self.t_start = stack.dev.vclock_ns

    def on_run_start(self, graph, input_len):
        self.t_start = self.stack.dev.vclock_ns

    def on_alloc(self, alloc):
        self.allocations.append(alloc)

    def on_layer_start(self, index):
        if index not in self.layer_marks:
            self.layer_marks[index] = len(self.entries)
            self.layer_regions[index] = self._snapshot_live()

    def on_run_end(self, output):
        self.output = output

    def on_port_event(self, ev: PortEvent):
        entry = _Entry(ev, ev.t0, ev.t1)
        if ev.kind == "map":
            self.live[ev.gpu_va] = _Region(ev.gpu_va, ev.len_bytes,
                                           ev.perm_bits, ev.flags)
        elif ev.kind == "unmap":
            self.live.pop(ev.gpu_va, None)
        elif ev.kind == "pre_kick":
            entry.kick_regions = self._snapshot_live()
            if self.charge_dump_time:
                total = sum(r.len_bytes for r in entry.kick_regions)
                self.stack.sleep(round(total * DUMP_BYTE_NS))
                entry.t1 = self.stack.dev.vclock_ns
        self.entries.append(entry)

    def _snapshot_live(self) -> list[_Region]:
        out = []
        for va in sorted(self.live):
            r = self.live[va]
            content = self.stack.mem_read_va(va, r.page_len)
            out.append(_Region(va, r.len_bytes, r.perm_bits, r.flags, content))
        return out

    def final_cpu_visible(self) -> list[_Region]:
        out = []
        for va in sorted(self.live):
            r = self.live[va]
            if AllocFlags.CPU_VISIBLE in r.flags:
                content = self.stack.mem_read_va(va, r.page_len)
                out.append(_Region(va, r.len_bytes, r.perm_bits, r.flags, content))
        return out


# ---------------------------------------------------------------------------
# I/O discovery
# ---------------------------------------------------------------------------

def magic_bytes(seed: int, trial: int, n: int) -> bytes:
    return random.Random(seed * 1000003 + trial).randbytes(n)


@dataclass
class TrialInfo:
    trial: int
    input_candidates: dict[int, set[int]]
    output_candidates: set[int]


def _find_all(hay: bytes, needle: bytes) -> list[int]:
    out = []
    i = hay.find(needle)
    while i != -1:
        out.append(i)
        i = hay.find(needle, i + 1)
    return out


def _scan_regions(regions: list[_Region], needle: bytes) -> set[int]:
    vas = set()
    for r in regions:
        for off in _find_all(r.content, needle):
            vas.add(r.gpu_va + off)
    return vas


@dataclass
class RecordResult:
    recordings: list[Recording]
    io_table: tuple[IoDescriptor, ...]
    trials: list[TrialInfo]
    skipped_intervals: int
    kept_intervals: int
    raw_dump_bytes: int


def record(stack: GpuStack, graph: WorkloadGraph,
           harness: RecordHarness | None = None) -> RecordResult:
    """Record ``graph`` on ``stack``. Runs the workload once, plus extra
    runs with fresh magic while input/output addresses stay ambiguous."""
    harness = harness or RecordHarness()
    in_len = graph.input_elems * 4
    input_indices = [0]  # this stack packs all operands into one buffer

    in_cands: dict[int, set[int]] = {}
    in_cands_dumps: dict[int, set[int]] = {}
    out_cands: set[int] | None = None
    trials: list[TrialInfo] = []
    trace = None

    for trial in range(1, harness.max_trials + 1):
        magic = magic_bytes(harness.magic_seed, trial, in_len)
        trace = _RunTrace(stack)
        stack.listener = trace
        try:
            output = stack.run_workload(graph, magic)
        finally:
            stack.listener = None
        if harness.pre_scan_hook is not None:
            harness.pre_scan_hook(stack)
        final_regions = trace.final_cpu_visible()
        kick_cpuvis = [r for e in trace.entries if e.kick_regions
                       for r in e.kick_regions if AllocFlags.CPU_VISIBLE in r.flags]

        run_in: dict[int, set[int]] = {}
        run_in_dumps: dict[int, set[int]] = {}
        for idx in input_indices:
            dump_hits = _scan_regions(kick_cpuvis, magic)
            all_hits = dump_hits | _scan_regions(final_regions, magic)
            if not all_hits:
                raise DiscoveryError(
                    f"input {idx}: magic never reached GPU memory intact")
            run_in[idx] = all_hits
            run_in_dumps[idx] = dump_hits
        for idx in input_indices:
            in_cands[idx] = (in_cands.get(idx) or run_in[idx]) & run_in[idx]
            in_cands_dumps[idx] = ((in_cands_dumps.get(idx) or run_in_dumps[idx])
                                   & run_in_dumps[idx])
            # structural aliases (e.g. pure copies) show up only after the
            # data flowed; matches inside the dumps take precedence
            if len(in_cands[idx]) > 1 and len(in_cands_dumps[idx]) == 1:
                in_cands[idx] = set(in_cands_dumps[idx])

        claimed = set()
        for idx in input_indices:
            for va in in_cands[idx]:
                claimed.update(range(va, va + in_len))
        run_out = {va for va in _scan_regions(final_regions, output)
                   if not (claimed & set(range(va, va + len(output))))}
        if not run_out:
            raise DiscoveryError("output bytes not found in GPU memory")
        out_cands = run_out if out_cands is None else (out_cands & run_out)

        trials.append(TrialInfo(trial, {i: set(s) for i, s in in_cands.items()},
                                set(out_cands)))
        if all(len(s) == 1 for s in in_cands.values()) and len(out_cands) == 1:
            break
    else:
        which = [f"input {i} ~ {sorted(map(hex, s))}"
                 for i, s in in_cands.items() if len(s) != 1]
        if out_cands is None or len(out_cands) != 1:
            shown = sorted(map(hex, out_cands or []))[:8]
            which.append(f"output ~ {shown}")
        raise DiscoveryError(
            f"ambiguous after {harness.max_trials} trials: {'; '.join(which)}")

    out_va = next(iter(out_cands))
    io_table = []
    for idx in input_indices:
        mode = harness.mode_for(idx)
        if mode in (IoMode.BY_ADDRESS, IoMode.BOTH):
            io_table.append(IoDescriptor(IoRole.INPUT, next(iter(in_cands[idx])),
                                         in_len, mode))
    io_table.append(IoDescriptor(IoRole.OUTPUT, out_va,
                                 len(trace.output), IoMode.BY_ADDRESS))
    io_table = tuple(io_table)

    builder = _Builder(stack, graph, harness, trace, io_table)
    if harness.granularity is Granularity.PER_LAYER:
        recordings = builder.per_layer()
    else:
        recordings = [builder.monolithic()]
    return RecordResult(recordings, io_table, trials,
                        builder.skipped, builder.kept, builder.raw_dump_bytes)


# ---------------------------------------------------------------------------
# Recording assembly
# ---------------------------------------------------------------------------

class _Builder:
    def __init__(self, stack, graph, harness, trace: _RunTrace, io_table):
        self.stack = stack
        self.graph = graph
        self.harness = harness
        self.trace = trace
        self.io_table = io_table
        self.sku = stack.dev.sku
        self.map_hash = stack.dev.reg_map.digest()
        self.skipped = 0
        self.kept = 0
        self.raw_dump_bytes = 0
        self.include_scratch = harness.include_scratch
        self.addr_only_inputs = [
            d for d in io_table
            if d.role is IoRole.INPUT and d.mode is IoMode.BY_ADDRESS]

    def _header(self, label: str) -> RecordingHeader:
        return RecordingHeader(
            sku_id=self.sku.sku_id,
            register_map_hash=self.map_hash,
            created_unix=self.harness.created_unix,
            granularity=self.harness.granularity,
            workload_label=label[:64],
        )

    def _skip_region(self, r: _Region) -> bool:
        if AllocFlags.GPU_EXEC in r.flags:
            return False  # job binaries, always captured
        if AllocFlags.INTERNAL_SCRATCH in r.flags and not self.include_scratch:
            return True
        if AllocFlags.CPU_VISIBLE not in r.flags and not self.include_scratch:
            # never CPU-mapped: a GPU-internal buffer passing data between
            # jobs; loading it back would clobber replayed data flow
            return True
        for d in self.addr_only_inputs:
            if r.gpu_va < d.gpu_va + d.len_bytes and d.gpu_va < r.gpu_va + r.page_len:
                return True
        return False

    def _emit_dumps(self, regions, dumps, next_id, last_hash):
        """Returns LoadMemDump protos for regions that survive filtering
        and content dedup; appends the MemDump payloads."""
        loads = []
        for r in regions:
            if self._skip_region(r):
                continue
            h = hashlib.sha256(r.content).digest()
            if last_hash.get(r.gpu_va) == h:
                continue
            last_hash[r.gpu_va] = h
            origin = (DumpOrigin.EXEC_PAGE if AllocFlags.GPU_EXEC in r.flags
                      else DumpOrigin.MAPPED_FALLBACK)
            dumps.append(MemDump(next_id[0], r.gpu_va, len(r.content),
                                 deflate(r.content), origin))
            loads.append(LoadMemDump(dump_id=next_id[0], gpu_va=r.gpu_va))
            self.raw_dump_bytes += len(r.content)
            next_id[0] += 1
        return loads

    def _entry_actions(self, entry: _Entry, dumps, next_id, last_hash):
        ev = entry.ev
        if ev.kind == "write":
            return [RegWrite(reg_name=ev.reg, value=ev.value)]
        if ev.kind == "read":
            if ev.state_class is StateClass.NONDET_READ:
                return [RegRead(reg_name=ev.reg, expect_value=0,
                                state_class=ActionClass.NONDET)]
            return [RegRead(reg_name=ev.reg, expect_value=ev.value,
                            state_class=ActionClass.STATE)]
        if ev.kind == "poll":
            return [RegReadWait(reg_name=ev.reg, mask=ev.mask,
                                expect_value=ev.expect, max_polls=ev.n_reads)]
        if ev.kind == "wait_irq":
            return [WaitIrq(expect_rawstat=ev.bits,
                            residency_ns=entry.t1 - entry.t0)]
        if ev.kind == "map":
            return [MapGpuMem(gpu_va=ev.gpu_va, len_bytes=ev.len_bytes,
                              perm_flags_encoded=ev.perm_bits)]
        if ev.kind == "unmap":
            return [UnmapGpuMem(gpu_va=ev.gpu_va, len_bytes=ev.len_bytes)]
        if ev.kind == "pre_kick":
            return self._emit_dumps(entry.kick_regions, dumps, next_id, last_hash)
        raise RecordError(f"unknown event kind {ev.kind}")

    def _build(self, entries, prologue=(), prologue_dumps=(),
               dumps=None, next_id=None, last_hash=None):
        dumps = [] if dumps is None else dumps
        next_id = [0] if next_id is None else next_id
        last_hash = {} if last_hash is None else last_hash
        actions: list[ReplayAction] = list(prologue)
        dumps.extend(prologue_dumps)
        prev_end = entries[0].t0 if entries else 0
        dev = self.stack.dev
        for entry in entries:
            protos = self._entry_actions(entry, dumps, next_id, last_hash)
            if not protos:
                continue  # fully filtered; its time folds into the next gap
            decision = classify_interval(prev_end, entry.t0, dev.was_idle_between)
            raw = max(0, entry.t0 - prev_end)
            if decision.skip:
                self.skipped += 1
            else:
                self.kept += 1
            actions.append(protos[0].with_intervals(raw, decision.floor_ns))
            actions.extend(protos[1:])
            prev_end = entry.t1
        return actions, dumps

    def monolithic(self) -> Recording:
        actions, dumps = self._build(self.trace.entries)
        return Recording(self._header(self.graph.label()), tuple(actions),
                         tuple(dumps), self.io_table)

    def per_layer(self) -> list[Recording]:
        marks = self.trace.layer_marks
        order = sorted(marks)
        # slice 0 owns everything from the run start (context init, input
        # buffer setup) up to the second layer's mark
        bounds = [0] + [marks[i] for i in order[1:]] + [len(self.trace.entries)]
        layer_out = self._layer_io()
        recs = []
        init_values = self._init_values()
        for k in order:
            start, end = bounds[k], bounds[k + 1]
            entries = self.trace.entries[start:end]
            dumps: list[MemDump] = []
            next_id = [0]
            last_hash: dict[int, bytes] = {}
            if k == 0:
                prologue, prologue_dumps = (), ()
            else:
                prologue, prologue_dumps = self._prologue(
                    k, layer_out[k], init_values, next_id, last_hash)
            actions, dumps = self._build(entries, prologue, prologue_dumps,
                                         dumps, next_id, last_hash)
            label = f"{self.graph.label()[:56]}[L{k}]"
            recs.append(Recording(self._header(label), tuple(actions),
                                  tuple(dumps), layer_out[k]))
        return recs

    def _init_values(self) -> dict[str, int]:
        vals = {}
        for e in self.trace.entries:
            if e.ev.kind == "write" and e.ev.reg in ("MMU_CONFIG", "GPU_IRQ_MASK"):
                vals.setdefault(e.ev.reg, e.ev.value)
        return vals

    def _layer_io(self) -> dict[int, tuple[IoDescriptor, ...]]:
        """Per-slice I/O: the workload endpoints come from discovery, the
        stitching points between layers from the driver's allocation
        records (the driver legitimately sees every allocation call)."""
        allocs = {a.tag: a for a in self.trace.allocations}
        n = len(self.graph.layers)
        out: dict[int, tuple[IoDescriptor, ...]] = {}
        workload_in = [d for d in self.io_table if d.role is IoRole.INPUT]
        workload_out = [d for d in self.io_table if d.role is IoRole.OUTPUT]
        for k in range(n):
            table: list[IoDescriptor] = []
            if k == 0:
                table.extend(workload_in)
            else:
                prev = allocs[f"L{k - 1}.out"]
                table.append(IoDescriptor(IoRole.INPUT, prev.gpu_va,
                                          prev.len_bytes, IoMode.BY_ADDRESS))
            if k == n - 1:
                table.extend(workload_out)
            else:
                cur = allocs[f"L{k}.out"]
                table.append(IoDescriptor(IoRole.OUTPUT, cur.gpu_va,
                                          cur.len_bytes, IoMode.BY_ADDRESS))
            out[k] = tuple(table)
        return out

    def _prologue(self, k: int, slice_io, init_values, next_id, last_hash):
        regions = self.trace.layer_regions[k]
        actions: list[ReplayAction] = [
            RegRead(reg_name="GPU_ID", expect_value=self.sku.gpu_id_value,
                    state_class=ActionClass.STATE),
            RegWrite(reg_name="MMU_CONFIG",
                     value=init_values.get("MMU_CONFIG", self.sku.expected_mmu_config)),
            RegWrite(reg_name="GPU_IRQ_MASK",
                     value=init_values.get("GPU_IRQ_MASK", dv.IRQ_ALL)),
        ]
        addr_inputs = [d for d in slice_io
                       if d.role is IoRole.INPUT and d.mode is IoMode.BY_ADDRESS]
        dumps: list[MemDump] = []
        for r in regions:
            actions.append(MapGpuMem(gpu_va=r.gpu_va, len_bytes=r.len_bytes,
                                     perm_flags_encoded=r.perm_bits))
        saved = self.addr_only_inputs
        self.addr_only_inputs = addr_inputs
        try:
            actions.extend(self._emit_dumps(regions, dumps, next_id, last_hash))
        finally:
            self.addr_only_inputs = saved
        return actions, dumps
