"""Recording IR: the action list, memory dumps and I/O descriptor table.

Actions name registers rather than addresses; the replayer resolves names
against its own register map. Every action carries two interval fields:
``raw_interval_ns`` is the gap observed at record time between the
previous action completing and this one starting, and ``min_interval_ns``
is the pacing floor after idle-skip classification (zero when the GPU was
provably idle for the whole gap, so a replayer may fast-forward).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace


class ActionClass(enum.Enum):
    STATE = "state"     # value participates in divergence checking
    NONDET = "nondet"   # value read and discarded at replay


class IoRole(enum.Enum):
    INPUT = 0
    OUTPUT = 1


class IoMode(enum.Enum):
    BY_VALUE = 0    # captured in dumps; app supplies nothing at replay
    BY_ADDRESS = 1  # app must supply bytes at replay
    BOTH = 2        # captured, optionally overridable


class DumpOrigin(enum.Enum):
    EXEC_PAGE = 0
    MAPPED_FALLBACK = 1


class Granularity(enum.Enum):
    MONOLITHIC = 0
    PER_LAYER = 1


@dataclass(frozen=True)
class _Action:
    raw_interval_ns: int = 0
    min_interval_ns: int = 0

    def with_intervals(self, raw: int, floor: int):
        return replace(self, raw_interval_ns=raw, min_interval_ns=floor)


@dataclass(frozen=True)
class RegWrite(_Action):
    reg_name: str = ""
    value: int = 0


@dataclass(frozen=True)
class RegRead(_Action):
    reg_name: str = ""
    expect_value: int = 0  # meaningful only for STATE reads
    state_class: ActionClass = ActionClass.STATE


@dataclass(frozen=True)
class RegReadWait(_Action):
    reg_name: str = ""
    mask: int = 0
    expect_value: int = 0
    max_polls: int = 1


@dataclass(frozen=True)
class WaitIrq(_Action):
    expect_rawstat: int = 0
    residency_ns: int = 0  # how long the wait took at record time


@dataclass(frozen=True)
class MapGpuMem(_Action):
    gpu_va: int = 0
    len_bytes: int = 0
    perm_flags_encoded: int = 0  # in the recording SKU's PTE bit layout


@dataclass(frozen=True)
class UnmapGpuMem(_Action):
    gpu_va: int = 0
    len_bytes: int = 0


@dataclass(frozen=True)
class LoadMemDump(_Action):
    dump_id: int = 0
    gpu_va: int = 0


ReplayAction = (RegWrite | RegRead | RegReadWait | WaitIrq
                | MapGpuMem | UnmapGpuMem | LoadMemDump)


@dataclass(frozen=True)
class MemDump:
    dump_id: int
    gpu_va: int
    raw_len: int
    payload: bytes  # DEFLATE-compressed
    origin_filter: DumpOrigin


@dataclass(frozen=True)
class IoDescriptor:
    role: IoRole
    gpu_va: int
    len_bytes: int
    mode: IoMode


@dataclass(frozen=True)
class RecordingHeader:
    sku_id: int
    register_map_hash: bytes
    created_unix: int
    granularity: Granularity
    workload_label: str

    def __post_init__(self):
        if len(self.register_map_hash) != 32:
            raise ValueError("register_map_hash must be 32 bytes")
        if len(self.workload_label.encode()) > 64:
            raise ValueError("workload label longer than 64 bytes")


@dataclass(frozen=True)
class Recording:
    """One replayable unit: header, ordered actions, dumps, I/O table."""

    header: RecordingHeader
    actions: tuple[ReplayAction, ...]
    dumps: tuple[MemDump, ...]
    io_table: tuple[IoDescriptor, ...]

    def dump_by_id(self, dump_id: int) -> MemDump | None:
        for d in self.dumps:
            if d.dump_id == dump_id:
                return d
        return None

    def inputs(self) -> list[IoDescriptor]:
        return [d for d in self.io_table if d.role is IoRole.INPUT]

    def outputs(self) -> list[IoDescriptor]:
        return [d for d in self.io_table if d.role is IoRole.OUTPUT]

    def job_count(self) -> int:
        return sum(1 for a in self.actions
                   if isinstance(a, RegWrite) and a.reg_name == "JOB_START")


def canonical_actions(rec: Recording) -> list[tuple]:
    """Projection for comparing recordings of the same workload: erases
    poll counts, interval fields, wait residencies and NONDET expectations,
    which are the permitted run-to-run variations."""
    out = []
    for a in rec.actions:
        if isinstance(a, RegWrite):
            out.append(("w", a.reg_name, a.value))
        elif isinstance(a, RegRead):
            if a.state_class is ActionClass.NONDET:
                out.append(("r?", a.reg_name))
            else:
                out.append(("r", a.reg_name, a.expect_value))
        elif isinstance(a, RegReadWait):
            out.append(("rw", a.reg_name, a.mask, a.expect_value))
        elif isinstance(a, WaitIrq):
            out.append(("irq", a.expect_rawstat))
        elif isinstance(a, MapGpuMem):
            out.append(("map", a.gpu_va, a.len_bytes, a.perm_flags_encoded))
        elif isinstance(a, UnmapGpuMem):
            out.append(("unmap", a.gpu_va, a.len_bytes))
        elif isinstance(a, LoadMemDump):
            out.append(("dump", a.gpu_va))
    return out
