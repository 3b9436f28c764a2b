"""Static verification of a recording before anything touches a device.

Pure function over the decoded structure. Rules:

  R1  register name absent from the map
  R2  access direction violated (write to read-only, read of write-only)
  R3  peak simultaneously-mapped GPU memory exceeds the budget
  R4  LoadMemDump or I/O descriptor targets a range not mapped at that
      point in action order (or a dump id that does not exist)
  R5  unmap of a range that was never mapped
  R6  interrupt wait with no plausible cause (JOB_DONE with no pending
      kick, RESET_DONE with no prior soft reset)

Violations are data, not failures; the report's ``ok`` is just
"no violations".
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from . import device as dv
from .actions import (IoDescriptor, LoadMemDump, MapGpuMem, Recording,
                      RegRead, RegReadWait, RegWrite, UnmapGpuMem, WaitIrq)
from .device import Access, RegisterMap

DEFAULT_MEM_BUDGET = dv.MEM_BYTES


class PeakMemError(Exception):
    pass


@dataclass(frozen=True)
class Violation:
    action_index: int  # -1 for recording-level findings (io table, budget)
    rule: str
    message: str


@dataclass(frozen=True)
class VerificationReport:
    ok: bool
    peak_gpu_mem_bytes: int
    violations: tuple[Violation, ...]

    def to_text(self) -> str:
        lines = [f"peak_gpu_mem_bytes {self.peak_gpu_mem_bytes}"]
        for v in self.violations:
            lines.append(f"{v.rule} action {v.action_index}: {v.message}")
        lines.append(f"{len(self.violations)} violations")
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps({
            "ok": self.ok,
            "peak_gpu_mem_bytes": self.peak_gpu_mem_bytes,
            "violations": [
                {"action_index": v.action_index, "rule": v.rule,
                 "message": v.message}
                for v in self.violations
            ],
        }, indent=2)


def peak_gpu_mem(rec: Recording) -> int:
    """Running maximum of the mapped footprint over the action order."""
    peak = 0
    current = 0
    live: dict[int, int] = {}
    for i, a in enumerate(rec.actions):
        if isinstance(a, MapGpuMem):
            pages = _pages(a.len_bytes)
            live[a.gpu_va] = pages
            current += pages * dv.PAGE_SIZE
            peak = max(peak, current)
        elif isinstance(a, UnmapGpuMem):
            pages = live.pop(a.gpu_va, None)
            if pages is None:
                raise PeakMemError(f"action {i}: unmap of unmapped {a.gpu_va:#x}")
            current -= pages * dv.PAGE_SIZE
    return peak


def _pages(len_bytes: int) -> int:
    return max(1, -(-len_bytes // dv.PAGE_SIZE))


def _covered(live: dict[int, int], va: int, n: int) -> bool:
    """Whole [va, va+n) inside one currently mapped range (page-rounded)."""
    for base, pages in live.items():
        if base <= va and va + n <= base + pages * dv.PAGE_SIZE:
            return True
    return False


def verify(rec: Recording, reg_map: RegisterMap | None = None,
           mem_budget_bytes: int = DEFAULT_MEM_BUDGET) -> VerificationReport:
    reg_map = reg_map or dv.DEFAULT_REGISTER_MAP
    violations: list[Violation] = []
    dump_ids = {d.dump_id: d for d in rec.dumps}

    live: dict[int, int] = {}
    current = 0
    peak = 0
    pending_kicks = 0
    pending_resets = 0

    for i, a in enumerate(rec.actions):
        if isinstance(a, (RegWrite, RegRead, RegReadWait)):
            reg = reg_map.by_name(a.reg_name)
            if reg is None:
                violations.append(Violation(
                    i, "R1", f"register {a.reg_name!r} not in map"))
                continue
            if isinstance(a, RegWrite):
                if reg.access is Access.RO:
                    violations.append(Violation(
                        i, "R2", f"write to read-only {a.reg_name}"))
                elif a.reg_name == "JOB_START" and a.value & 1:
                    pending_kicks += 1
                elif a.reg_name == "GPU_CMD" and a.value == dv.CMD_SOFT_RESET:
                    pending_resets += 1
            else:
                if reg.access is Access.WO:
                    violations.append(Violation(
                        i, "R2", f"read of write-only {a.reg_name}"))
        elif isinstance(a, MapGpuMem):
            pages = _pages(a.len_bytes)
            live[a.gpu_va] = pages
            current += pages * dv.PAGE_SIZE
            peak = max(peak, current)
            if current > mem_budget_bytes:
                violations.append(Violation(
                    i, "R3",
                    f"mapped {current} bytes exceeds budget {mem_budget_bytes}"))
        elif isinstance(a, UnmapGpuMem):
            pages = live.pop(a.gpu_va, None)
            if pages is None:
                violations.append(Violation(
                    i, "R5", f"unmap of never-mapped {a.gpu_va:#x}"))
            else:
                current -= pages * dv.PAGE_SIZE
        elif isinstance(a, LoadMemDump):
            d = dump_ids.get(a.dump_id)
            if d is None:
                violations.append(Violation(
                    i, "R4", f"references missing dump {a.dump_id}"))
            elif not _covered(live, a.gpu_va, d.raw_len):
                violations.append(Violation(
                    i, "R4",
                    f"dump load at {a.gpu_va:#x}+{d.raw_len:#x} outside mapping"))
        elif isinstance(a, WaitIrq):
            if a.expect_rawstat & dv.IRQ_JOB_DONE:
                if pending_kicks <= 0:
                    violations.append(Violation(
                        i, "R6", "JOB_DONE wait without a pending job kick"))
                else:
                    pending_kicks -= 1
            if a.expect_rawstat & dv.IRQ_RESET_DONE:
                if pending_resets <= 0:
                    violations.append(Violation(
                        i, "R6", "RESET_DONE wait without a prior soft reset"))
                else:
                    pending_resets -= 1

    ever_mapped: dict[int, int] = {}
    for a in rec.actions:
        if isinstance(a, MapGpuMem):
            ever_mapped[a.gpu_va] = max(ever_mapped.get(a.gpu_va, 0),
                                        _pages(a.len_bytes))
    for io in rec.io_table:
        if not _covered(ever_mapped, io.gpu_va, io.len_bytes):
            violations.append(Violation(
                -1, "R4",
                f"{io.role.name} region {io.gpu_va:#x}+{io.len_bytes:#x} "
                "outside any mapped range"))

    return VerificationReport(ok=not violations, peak_gpu_mem_bytes=peak,
                              violations=tuple(violations))
