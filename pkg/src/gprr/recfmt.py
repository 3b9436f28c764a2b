"""Bit-exact binary codec for .gpr recording files.

Little-endian throughout, fixed-width counts, deterministic output:
identical Recording values encode to identical bytes. Dump payloads are
raw DEFLATE streams. The file ends with a SHA-256 over everything before
it. See docs/format.md for the byte-level layout.

decode() never raises anything but DecodeError subclasses on arbitrary
input; every error carries the byte offset it was detected at.
"""

from __future__ import annotations

import hashlib
import struct
import zlib

from .actions import (ActionClass, DumpOrigin, Granularity, IoDescriptor,
                      IoMode, IoRole, LoadMemDump, MapGpuMem, MemDump,
                      Recording, RecordingHeader, RegRead, RegReadWait,
                      RegWrite, UnmapGpuMem, WaitIrq)

MAGIC = b"GPRR"
VERSION = 1
FILE_EXTENSION = ".gpr"

_TAG_REG_WRITE = 1
_TAG_REG_READ = 2
_TAG_REG_READ_WAIT = 3
_TAG_WAIT_IRQ = 4
_TAG_MAP = 5
_TAG_UNMAP = 6
_TAG_LOAD_DUMP = 7


def deflate(data: bytes) -> bytes:
    c = zlib.compressobj(6, zlib.DEFLATED, -15)
    return c.compress(data) + c.flush()


def inflate(data: bytes, expect_len: int | None = None) -> bytes:
    d = zlib.decompressobj(-15)
    out = d.decompress(data, expect_len + 1 if expect_len is not None else 0)
    if expect_len is not None and len(out) != expect_len:
        raise zlib.error(f"decompressed to {len(out)}, expected {expect_len}")
    return out


class DecodeError(Exception):
    def __init__(self, offset: int, message: str):
        self.offset = offset
        super().__init__(f"{message} (at byte {offset})")


class BadMagic(DecodeError):
    pass


class UnsupportedVersion(DecodeError):
    pass


class Truncated(DecodeError):
    pass


class BadChecksum(DecodeError):
    pass


class UnknownTag(DecodeError):
    pass


class Malformed(DecodeError):
    pass


class _Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def u8(self, v): self.parts.append(struct.pack("<B", v))
    def u16(self, v): self.parts.append(struct.pack("<H", v))
    def u32(self, v): self.parts.append(struct.pack("<I", v))
    def u64(self, v): self.parts.append(struct.pack("<Q", v))

    def raw(self, b: bytes):
        self.parts.append(b)

    def string16(self, s: str):
        b = s.encode("utf-8")
        self.u16(len(b))
        self.raw(b)

    def blob32(self, b: bytes):
        self.u32(len(b))
        self.raw(b)

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise Truncated(self.pos, f"needed {n} more bytes")
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def u8(self): return self._take(1)[0]
    def u16(self): return struct.unpack("<H", self._take(2))[0]
    def u32(self): return struct.unpack("<I", self._take(4))[0]
    def u64(self): return struct.unpack("<Q", self._take(8))[0]

    def string16(self) -> str:
        at = self.pos
        b = self._take(self.u16())
        try:
            return b.decode("utf-8")
        except UnicodeDecodeError:
            raise Malformed(at, "string is not valid UTF-8") from None

    def blob32(self) -> bytes:
        n = self.u32()
        if n > len(self.data):
            raise Malformed(self.pos - 4, f"blob length {n} exceeds file size")
        return self._take(n)


def _encode_action(w: _Writer, a) -> None:
    if isinstance(a, RegWrite):
        w.u8(_TAG_REG_WRITE)
    elif isinstance(a, RegRead):
        w.u8(_TAG_REG_READ)
    elif isinstance(a, RegReadWait):
        w.u8(_TAG_REG_READ_WAIT)
    elif isinstance(a, WaitIrq):
        w.u8(_TAG_WAIT_IRQ)
    elif isinstance(a, MapGpuMem):
        w.u8(_TAG_MAP)
    elif isinstance(a, UnmapGpuMem):
        w.u8(_TAG_UNMAP)
    elif isinstance(a, LoadMemDump):
        w.u8(_TAG_LOAD_DUMP)
    else:
        raise TypeError(f"not a replay action: {a!r}")
    w.u64(a.raw_interval_ns)
    w.u64(a.min_interval_ns)
    if isinstance(a, RegWrite):
        w.string16(a.reg_name)
        w.u32(a.value)
    elif isinstance(a, RegRead):
        w.string16(a.reg_name)
        w.u32(a.expect_value)
        w.u8(0 if a.state_class is ActionClass.STATE else 1)
    elif isinstance(a, RegReadWait):
        w.string16(a.reg_name)
        w.u32(a.mask)
        w.u32(a.expect_value)
        w.u32(a.max_polls)
    elif isinstance(a, WaitIrq):
        w.u32(a.expect_rawstat)
        w.u64(a.residency_ns)
    elif isinstance(a, MapGpuMem):
        w.u32(a.gpu_va)
        w.u32(a.len_bytes)
        w.u8(a.perm_flags_encoded)
    elif isinstance(a, UnmapGpuMem):
        w.u32(a.gpu_va)
        w.u32(a.len_bytes)
    elif isinstance(a, LoadMemDump):
        w.u32(a.dump_id)
        w.u32(a.gpu_va)


def _decode_action(r: _Reader):
    at = r.pos
    tag = r.u8()
    raw_iv = r.u64()
    min_iv = r.u64()
    if tag == _TAG_REG_WRITE:
        return RegWrite(raw_iv, min_iv, r.string16(), r.u32())
    if tag == _TAG_REG_READ:
        name, expect = r.string16(), r.u32()
        cls_b = r.u8()
        if cls_b > 1:
            raise Malformed(r.pos - 1, f"bad read class {cls_b}")
        cls = ActionClass.STATE if cls_b == 0 else ActionClass.NONDET
        return RegRead(raw_iv, min_iv, name, expect, cls)
    if tag == _TAG_REG_READ_WAIT:
        return RegReadWait(raw_iv, min_iv, r.string16(), r.u32(), r.u32(), r.u32())
    if tag == _TAG_WAIT_IRQ:
        return WaitIrq(raw_iv, min_iv, r.u32(), r.u64())
    if tag == _TAG_MAP:
        return MapGpuMem(raw_iv, min_iv, r.u32(), r.u32(), r.u8())
    if tag == _TAG_UNMAP:
        return UnmapGpuMem(raw_iv, min_iv, r.u32(), r.u32())
    if tag == _TAG_LOAD_DUMP:
        return LoadMemDump(raw_iv, min_iv, r.u32(), r.u32())
    raise UnknownTag(at, f"unknown action tag {tag:#x}")


def encode(rec: Recording) -> bytes:
    w = _Writer()
    h = rec.header
    w.raw(MAGIC)
    w.u16(VERSION)
    w.u32(h.sku_id)
    w.raw(h.register_map_hash)
    w.u64(h.created_unix)
    w.u8(h.granularity.value)
    label = h.workload_label.encode("utf-8")
    w.u8(len(label))
    w.raw(label)

    w.u32(len(rec.actions))
    for a in rec.actions:
        _encode_action(w, a)

    w.u32(len(rec.dumps))
    for d in rec.dumps:
        w.u32(d.dump_id)
        w.u32(d.gpu_va)
        w.u32(d.raw_len)
        w.u8(d.origin_filter.value)
        w.blob32(d.payload)

    w.u32(len(rec.io_table))
    for io in rec.io_table:
        w.u8(io.role.value)
        w.u32(io.gpu_va)
        w.u32(io.len_bytes)
        w.u8(io.mode.value)

    body = w.getvalue()
    return body + hashlib.sha256(body).digest()


def decode(data: bytes) -> Recording:
    r = _Reader(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic(0, "bad file magic")
    r._take(4)
    version = r.u16()
    if version != VERSION:
        raise UnsupportedVersion(4, f"unsupported version {version}")
    sku_id = r.u32()
    map_hash = r._take(32)
    created = r.u64()
    at = r.pos
    gran_b = r.u8()
    try:
        gran = Granularity(gran_b)
    except ValueError:
        raise Malformed(at, f"bad granularity {gran_b}") from None
    label_len = r.u8()
    if label_len > 64:
        raise Malformed(r.pos - 1, f"label length {label_len} > 64")
    at = r.pos
    try:
        label = r._take(label_len).decode("utf-8")
    except UnicodeDecodeError:
        raise Malformed(at, "label is not valid UTF-8") from None
    header = RecordingHeader(sku_id, map_hash, created, gran, label)

    n_actions = r.u32()
    actions = []
    for _ in range(n_actions):
        actions.append(_decode_action(r))

    n_dumps = r.u32()
    dumps = []
    for _ in range(n_dumps):
        dump_id, gpu_va, raw_len = r.u32(), r.u32(), r.u32()
        at = r.pos
        origin_b = r.u8()
        try:
            origin = DumpOrigin(origin_b)
        except ValueError:
            raise Malformed(at, f"bad dump origin {origin_b}") from None
        payload = r.blob32()
        at = r.pos
        try:
            inflate(payload, raw_len)
        except zlib.error as e:
            raise Malformed(at, f"dump {dump_id} payload: {e}") from None
        dumps.append(MemDump(dump_id, gpu_va, raw_len, payload, origin))

    n_io = r.u32()
    io_table = []
    for _ in range(n_io):
        at = r.pos
        role_b, gpu_va, len_bytes, mode_b = r.u8(), r.u32(), r.u32(), r.u8()
        try:
            io_table.append(IoDescriptor(IoRole(role_b), gpu_va, len_bytes,
                                         IoMode(mode_b)))
        except ValueError:
            raise Malformed(at, "bad io descriptor role/mode") from None

    remaining = len(data) - r.pos
    if remaining < 32:
        raise Truncated(r.pos, "checksum missing")
    if remaining > 32:
        raise Malformed(r.pos, f"{remaining - 32} trailing bytes before checksum")
    if hashlib.sha256(data[:-32]).digest() != data[-32:]:
        raise BadChecksum(len(data) - 32, "trailing checksum does not match")

    dump_ids = {d.dump_id for d in dumps}
    for i, a in enumerate(actions):
        if isinstance(a, LoadMemDump) and a.dump_id not in dump_ids:
            raise Malformed(r.pos, f"action {i} references missing dump {a.dump_id}")

    return Recording(header, tuple(actions), tuple(dumps), tuple(io_table))


def read_file(path) -> Recording:
    with open(path, "rb") as f:
        return decode(f.read())


def write_file(path, rec: Recording) -> int:
    data = encode(rec)
    with open(path, "wb") as f:
        f.write(data)
    return len(data)
