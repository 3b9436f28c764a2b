"""Micro shader ISA: assembler, decoder and interpreter.

Stands in for proprietary GPU instruction streams. 8 general 32-bit
registers, 32-bit instruction words, two-word LDI. Arithmetic wraps
mod 2^32; MAX compares signed; BNZ offsets are in words relative to the
instruction after the branch.

Word encoding (fields unused by an op are zero):

    [31:24] opcode   [23:20] rd   [19:16] ra   [15:12] rb
    ADDI/BNZ carry a signed 16-bit immediate in [15:0];
    LDI takes the full next word as its immediate.
"""

from __future__ import annotations

U32 = 0xFFFFFFFF

OP_HALT = 0x00
OP_LDI = 0x01
OP_LD = 0x02
OP_ST = 0x03
OP_ADD = 0x04
OP_SUB = 0x05
OP_MUL = 0x06
OP_MAX = 0x07
OP_ADDI = 0x08
OP_BNZ = 0x09

_OP_NAMES = {
    OP_HALT: "halt", OP_LDI: "ldi", OP_LD: "ld", OP_ST: "st", OP_ADD: "add",
    OP_SUB: "sub", OP_MUL: "mul", OP_MAX: "max", OP_ADDI: "addi", OP_BNZ: "bnz",
}


class ShaderFault(Exception):
    """Undecodable instruction stream (unknown opcode, truncated LDI,
    branch out of range)."""


def _signed16(v: int) -> int:
    v &= 0xFFFF
    return v - 0x10000 if v & 0x8000 else v


def _signed32(v: int) -> int:
    v &= U32
    return v - 0x100000000 if v & 0x80000000 else v


class Asm:
    """Tiny assembler with label fixups for loops."""

    def __init__(self):
        self.words: list[int] = []
        self._fixups: list[tuple[int, str]] = []  # (word index of branch, label)
        self._labels: dict[str, int] = {}

    def label(self, name: str) -> None:
        self._labels[name] = len(self.words)

    def _emit(self, op, rd=0, ra=0, rb=0, imm16=None):
        w = (op << 24) | ((rd & 0xF) << 20) | ((ra & 0xF) << 16)
        if imm16 is not None:
            w |= imm16 & 0xFFFF
        else:
            w |= (rb & 0xF) << 12
        self.words.append(w)

    def halt(self):
        self._emit(OP_HALT)

    def ldi(self, rd, imm32):
        self._emit(OP_LDI, rd)
        self.words.append(imm32 & U32)

    def ld(self, rd, ra):
        self._emit(OP_LD, rd, ra)

    def st(self, ra, rs):
        # address register in the ra field, source value in the rd field
        self._emit(OP_ST, rs, ra)

    def add(self, rd, ra, rb):
        self._emit(OP_ADD, rd, ra, rb)

    def sub(self, rd, ra, rb):
        self._emit(OP_SUB, rd, ra, rb)

    def mul(self, rd, ra, rb):
        self._emit(OP_MUL, rd, ra, rb)

    def max_(self, rd, ra, rb):
        self._emit(OP_MAX, rd, ra, rb)

    def addi(self, rd, ra, imm16):
        if not -0x8000 <= imm16 <= 0x7FFF:
            raise ValueError("addi immediate out of range")
        self._emit(OP_ADDI, rd, ra, imm16=imm16)

    def bnz(self, ra, label: str):
        self._fixups.append((len(self.words), label))
        self._emit(OP_BNZ, 0, ra, imm16=0)

    def assemble(self) -> list[int]:
        words = list(self.words)
        for at, label in self._fixups:
            target = self._labels[label]
            off = target - (at + 1)
            if not -0x8000 <= off <= 0x7FFF:
                raise ValueError("branch offset out of range")
            words[at] = (words[at] & 0xFFFF0000) | (off & 0xFFFF)
        return words

    def to_bytes(self) -> bytes:
        return b"".join(w.to_bytes(4, "little") for w in self.assemble())


def disassemble(words: list[int]) -> list[str]:
    out = []
    pc = 0
    while pc < len(words):
        w = words[pc]
        op = w >> 24
        rd, ra, rb = (w >> 20) & 0xF, (w >> 16) & 0xF, (w >> 12) & 0xF
        name = _OP_NAMES.get(op, f"op{op:#x}?")
        if op == OP_LDI and pc + 1 < len(words):
            out.append(f"{pc:4d}: ldi r{rd}, {words[pc + 1]:#x}")
            pc += 2
            continue
        if op in (OP_ADDI, OP_BNZ):
            out.append(f"{pc:4d}: {name} r{rd if op == OP_ADDI else ra}, {_signed16(w)}")
        elif op == OP_ST:
            out.append(f"{pc:4d}: st [r{ra}], r{rd}")
        elif op == OP_LD:
            out.append(f"{pc:4d}: ld r{rd}, [r{ra}]")
        elif op == OP_HALT:
            out.append(f"{pc:4d}: halt")
        else:
            out.append(f"{pc:4d}: {name} r{rd}, r{ra}, r{rb}")
        pc += 1
    return out


_decode_cache: dict[bytes, list[tuple]] = {}


def _decode(words: list[int]) -> list[tuple]:
    """Decode to one entry per word index. Each entry is
    (op, a, b, c, next_pc); LDI's second word gets a None placeholder."""
    key = b"".join(w.to_bytes(4, "little") for w in words)
    cached = _decode_cache.get(key)
    if cached is not None:
        return cached
    decoded: list[tuple | None] = [None] * len(words)
    pc = 0
    n = len(words)
    while pc < n:
        w = words[pc]
        op = w >> 24
        rd, ra, rb = (w >> 20) & 0xF, (w >> 16) & 0xF, (w >> 12) & 0xF
        if op == OP_LDI:
            if pc + 1 >= n:
                raise ShaderFault(f"truncated ldi at word {pc}")
            decoded[pc] = (OP_LDI, rd, words[pc + 1], 0, pc + 2)
            pc += 2
        elif op in (OP_ADDI, OP_BNZ):
            imm = _signed16(w)
            if op == OP_BNZ:
                target = pc + 1 + imm
                if not 0 <= target <= n:
                    raise ShaderFault(f"branch target {target} out of range at word {pc}")
                decoded[pc] = (OP_BNZ, ra, target, 0, pc + 1)
            else:
                decoded[pc] = (OP_ADDI, rd, ra, imm, pc + 1)
            pc += 1
        elif op in (OP_HALT, OP_LD, OP_ST, OP_ADD, OP_SUB, OP_MUL, OP_MAX):
            decoded[pc] = (op, rd, ra, rb, pc + 1)
            pc += 1
        else:
            raise ShaderFault(f"unknown opcode {op:#x} at word {pc}")
    _decode_cache[key] = decoded
    return decoded


def execute(words: list[int], params: list[int], load_word, store_word,
            budget: int) -> tuple[int, bool]:
    """Run a shader. Registers r0..r7 start from the 8-entry param block.

    Returns (dynamic instruction count, halted). ``halted`` is False when
    the step budget ran out. Memory callbacks may raise; the fault
    propagates with the partial count lost, matching a faulted job.
    """
    decoded = _decode(words)
    regs = [p & U32 for p in params[:8]] + [0] * max(0, 8 - len(params))
    pc = 0
    count = 0
    n = len(decoded)
    while count < budget:
        if pc >= n:
            return count, False  # ran off the end without HALT
        entry = decoded[pc]
        if entry is None:
            raise ShaderFault(f"jump into immediate word at {pc}")
        op, a, b, c, nxt = entry
        count += 1
        if op == OP_HALT:
            return count, True
        if op == OP_LD:
            regs[a] = load_word(regs[b]) & U32
        elif op == OP_ST:
            store_word(regs[b], regs[a])
        elif op == OP_ADD:
            regs[a] = (regs[b] + regs[c]) & U32
        elif op == OP_SUB:
            regs[a] = (regs[b] - regs[c]) & U32
        elif op == OP_MUL:
            regs[a] = (regs[b] * regs[c]) & U32
        elif op == OP_MAX:
            regs[a] = (regs[b] if _signed32(regs[b]) >= _signed32(regs[c]) else regs[c]) & U32
        elif op == OP_ADDI:
            regs[a] = (regs[b] + c) & U32
        elif op == OP_BNZ:
            if regs[a] != 0:
                pc = b
                continue
        elif op == OP_LDI:
            regs[a] = b
        pc = nxt
    return count, False
