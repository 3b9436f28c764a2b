"""Static verifier: rule catalogue, peak-memory accounting, clean bills for
recorder output."""

import json

import pytest

import gprr.device as dv
from gprr.actions import (Granularity, IoDescriptor, IoMode, IoRole,
                          LoadMemDump, MapGpuMem, MemDump, Recording,
                          RecordingHeader, RegRead, RegWrite, UnmapGpuMem,
                          WaitIrq, DumpOrigin, ActionClass)
from gprr.device import DEFAULT_REGISTER_MAP
from gprr.recfmt import deflate
from gprr.recorder import RecordHarness
from gprr.verifier import PeakMemError, peak_gpu_mem, verify

from conftest import builtin_graphs, record_graph

MAP_HASH = DEFAULT_REGISTER_MAP.digest()


def make_rec(actions, dumps=(), io=()):
    h = RecordingHeader(0x0B31, MAP_HASH, 0, Granularity.MONOLITHIC, "fix")
    return Recording(h, tuple(actions), tuple(dumps), tuple(io))


def rules_of(report):
    return [v.rule for v in report.violations]


def test_unknown_register_is_r1():
    rec = make_rec([RegWrite(0, 0, "DBG_BACKDOOR", 1)])
    report = verify(rec)
    assert rules_of(report) == ["R1"]
    assert report.violations[0].action_index == 0
    assert not report.ok


def test_access_direction_is_r2():
    rec = make_rec([RegWrite(0, 0, "GPU_ID", 1),
                    RegRead(0, 0, "GPU_IRQ_CLEAR", 0, ActionClass.STATE)])
    assert rules_of(verify(rec)) == ["R2", "R2"]


def test_peak_memory_fixture_is_20480():
    rec = make_rec([
        MapGpuMem(0, 0, 0x400000, 3 * 4096, 0b0011),
        MapGpuMem(0, 0, 0x500000, 2 * 4096, 0b0011),
        UnmapGpuMem(0, 0, 0x400000, 3 * 4096),
    ])
    assert peak_gpu_mem(rec) == 20480
    assert verify(rec).peak_gpu_mem_bytes == 20480


def test_budget_breach_is_r3():
    rec = make_rec([
        MapGpuMem(0, 0, 0x400000, 3 * 4096, 0b0011),
        MapGpuMem(0, 0, 0x500000, 2 * 4096, 0b0011),
        UnmapGpuMem(0, 0, 0x400000, 3 * 4096),
    ])
    report = verify(rec, mem_budget_bytes=16384)
    assert "R3" in rules_of(report)
    assert verify(rec, mem_budget_bytes=20480).ok


def test_dump_outside_mapping_is_r4():
    dump = MemDump(0, 0x600000, 4096, deflate(bytes(4096)), DumpOrigin.MAPPED_FALLBACK)
    rec = make_rec([LoadMemDump(0, 0, 0, 0x600000)], dumps=[dump])
    assert rules_of(verify(rec)) == ["R4"]
    # mapped after the load does not help: order matters
    rec = make_rec([LoadMemDump(0, 0, 0, 0x600000),
                    MapGpuMem(0, 0, 0x600000, 4096, 0b0011)], dumps=[dump])
    assert "R4" in rules_of(verify(rec))
    # properly mapped first: clean
    rec = make_rec([MapGpuMem(0, 0, 0x600000, 4096, 0b0011),
                    LoadMemDump(0, 0, 0, 0x600000)], dumps=[dump])
    assert verify(rec).ok


def test_missing_dump_id_is_r4():
    rec = make_rec([MapGpuMem(0, 0, 0x600000, 4096, 0b0011),
                    LoadMemDump(0, 0, 5, 0x600000)])
    assert rules_of(verify(rec)) == ["R4"]


def test_io_outside_any_mapping_is_r4():
    rec = make_rec([MapGpuMem(0, 0, 0x400000, 4096, 0b0011)],
                   io=[IoDescriptor(IoRole.INPUT, 0x900000, 64, IoMode.BY_ADDRESS)])
    report = verify(rec)
    assert rules_of(report) == ["R4"]
    assert report.violations[0].action_index == -1


def test_unmap_before_map_is_r5():
    rec = make_rec([UnmapGpuMem(0, 0, 0x400000, 4096)])
    assert rules_of(verify(rec)) == ["R5"]
    with pytest.raises(PeakMemError):
        peak_gpu_mem(rec)


def test_wait_without_cause_is_r6():
    rec = make_rec([WaitIrq(0, 0, dv.IRQ_JOB_DONE, 100)])
    assert rules_of(verify(rec)) == ["R6"]
    rec = make_rec([RegWrite(0, 0, "JOB_START", 1),
                    WaitIrq(0, 0, dv.IRQ_JOB_DONE, 100)])
    assert verify(rec).ok
    rec = make_rec([WaitIrq(0, 0, dv.IRQ_RESET_DONE, 100)])
    assert rules_of(verify(rec)) == ["R6"]


def test_no_maps_means_zero_peak():
    assert peak_gpu_mem(make_rec([RegWrite(0, 0, "GPU_CMD", 1)])) == 0


def test_verification_is_pure():
    rec = make_rec([MapGpuMem(0, 0, 0x400000, 4096, 0b0011)])
    before = rec.actions
    verify(rec)
    assert rec.actions == before


def test_recorder_output_verifies_clean():
    for name, g in builtin_graphs().items():
        rec = record_graph(g).recordings[0]
        report = verify(rec)
        assert report.ok, f"{name}: {report.violations}"
        assert report.peak_gpu_mem_bytes <= dv.MEM_BYTES


def test_matmul_peak_covers_known_allocations():
    g = builtin_graphs()["matmul8"]
    rec = record_graph(g).recordings[0]
    # operands 1 page + output 1 page + scratch 2 pages + shader + descriptor
    report = verify(rec)
    assert report.peak_gpu_mem_bytes >= 6 * 4096


def test_report_formats():
    rec = make_rec([RegWrite(0, 0, "DBG_BACKDOOR", 1)])
    report = verify(rec)
    text = report.to_text()
    assert "R1" in text and "1 violations" in text
    parsed = json.loads(report.to_json())
    assert parsed["ok"] is False
    assert parsed["violations"][0]["rule"] == "R1"
    clean = verify(make_rec([]))
    assert "0 violations" in clean.to_text()
