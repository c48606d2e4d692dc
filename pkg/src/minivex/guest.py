"""Guest ISA: instruction encoding, a small assembler and the reference interpreter.

The guest is a fixed-width machine: every instruction is one little-endian
32-bit word laid out as

    byte 0   opcode (0..15)
    byte 1   rd | rs << 3          (for JCC: the condition code)
    byte 2-3 signed 16-bit immediate / branch offset

Branch, jump and call offsets are relative to the address of the branching
instruction itself.  ``r7`` is the stack pointer used by CALL/RET.
"""

from __future__ import annotations

import enum
import re
import struct
from dataclasses import dataclass, field

MASK32 = 0xFFFFFFFF
NUM_REGS = 8
SP = 7
DEFAULT_MEMORY_SIZE = 65536


class Op(enum.IntEnum):
    NOP = 0
    MOVI = 1
    MOVR = 2
    ADD = 3
    SUB = 4
    AND = 5
    OR = 6
    XOR = 7
    LOAD = 8
    STORE = 9
    CMP = 10
    JMP = 11
    JCC = 12
    CALL = 13
    RET = 14
    HALT = 15


class Cond(enum.IntEnum):
    EQ = 0
    NE = 1
    LT = 2
    GE = 3
    LE = 4
    GT = 5


ALU_OPS = {Op.ADD: "add", Op.SUB: "sub", Op.AND: "and", Op.OR: "or", Op.XOR: "xor"}
BLOCK_ENDERS = frozenset({Op.JMP, Op.CALL, Op.RET, Op.HALT})


class DecodeError(ValueError):
    pass


class AssemblyError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def sext16(value: int) -> int:
    value &= 0xFFFF
    return value - 0x10000 if value & 0x8000 else value


def cond_holds(cond: Cond, z: int, n: int) -> bool:
    if cond == Cond.EQ:
        return bool(z)
    if cond == Cond.NE:
        return not z
    if cond == Cond.LT:
        return bool(n)
    if cond == Cond.GE:
        return not n
    if cond == Cond.LE:
        return bool(z or n)
    return not (z or n)


@dataclass(frozen=True)
class GuestInstr:
    op: Op
    rd: int = 0
    rs: int = 0
    imm: int = 0
    cond: Cond = Cond.EQ

    def __post_init__(self):
        if not (0 <= self.rd < NUM_REGS and 0 <= self.rs < NUM_REGS):
            raise ValueError(f"register index out of range in {self!r}")
        if not -0x8000 <= self.imm <= 0x7FFF:
            raise ValueError(f"immediate {self.imm} does not fit 16 bits")

    def encode(self) -> bytes:
        if self.op == Op.JCC:
            b1 = int(self.cond)
        else:
            b1 = self.rd | (self.rs << 3)
        return struct.pack("<BBh", int(self.op), b1, self.imm)

    def __str__(self) -> str:
        return format_instr(self)


def encode_program(instrs) -> bytes:
    return b"".join(i.encode() for i in instrs)


def decode_guest(code, addr: int) -> GuestInstr:
    """Decode the instruction word at byte offset ``addr``."""
    if addr % 4:
        raise DecodeError(f"misaligned fetch at {addr:#x}")
    if addr < 0 or addr + 4 > len(code):
        raise DecodeError(f"fetch at {addr:#x} outside code")
    opb, b1, imm = struct.unpack_from("<BBh", code, addr)
    if opb > 15:
        raise DecodeError(f"invalid opcode byte {opb:#04x} at {addr:#x}")
    op = Op(opb)
    if op == Op.JCC:
        if b1 > Cond.GT:
            raise DecodeError(f"invalid condition {b1} at {addr:#x}")
        return GuestInstr(op, imm=imm, cond=Cond(b1))
    if b1 & 0xC0:
        raise DecodeError(f"reserved operand bits set at {addr:#x}")
    return GuestInstr(op, b1 & 7, (b1 >> 3) & 7, imm)


def format_instr(i: GuestInstr) -> str:
    op = i.op
    if op in (Op.NOP, Op.HALT, Op.RET):
        return op.name.lower()
    if op == Op.MOVI:
        return f"movi r{i.rd}, {i.imm}"
    if op in (Op.MOVR, Op.CMP) or op in ALU_OPS:
        return f"{op.name.lower()} r{i.rd}, r{i.rs}"
    if op == Op.LOAD:
        return f"load r{i.rd}, [r{i.rs}{i.imm:+d}]"
    if op == Op.STORE:
        return f"store [r{i.rd}{i.imm:+d}], r{i.rs}"
    if op == Op.JCC:
        return f"j{i.cond.name.lower()} {i.imm:+d}"
    return f"{op.name.lower()} {i.imm:+d}"


# --------------------------------------------------------------------------
# assembler

_REG = re.compile(r"^r([0-7])$")
_MEM = re.compile(r"^\[\s*r([0-7])\s*(?:([+-])\s*([^\]\s]+))?\s*\]$")
_LABEL = re.compile(r"^[A-Za-z_.][\w.]*$")
_BRANCHES = {"jmp": (Op.JMP, None), "call": (Op.CALL, None)}
_BRANCHES.update({f"j{c.name.lower()}": (Op.JCC, c) for c in Cond})
_RR = {"movr": Op.MOVR, "mov": Op.MOVR, "cmp": Op.CMP, "add": Op.ADD, "sub": Op.SUB,
       "and": Op.AND, "or": Op.OR, "xor": Op.XOR}


def _parse_int(tok: str, lineno: int) -> int:
    try:
        return int(tok, 0)
    except ValueError:
        raise AssemblyError(f"bad integer {tok!r}", lineno) from None


def _parse_reg(tok: str, lineno: int) -> int:
    m = _REG.match(tok.strip().lower())
    if not m:
        raise AssemblyError(f"expected register, got {tok!r}", lineno)
    return int(m.group(1))


def _parse_mem(tok: str, lineno: int) -> tuple[int, int]:
    m = _MEM.match(tok.strip().lower())
    if not m:
        raise AssemblyError(f"expected memory operand, got {tok!r}", lineno)
    off = 0
    if m.group(2):
        off = _parse_int(m.group(3), lineno)
        if m.group(2) == "-":
            off = -off
    return int(m.group(1)), off


def _split_operands(rest: str) -> list[str]:
    ops, depth, cur = [], 0, ""
    for ch in rest:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "," and depth == 0:
            ops.append(cur.strip())
            cur = ""
        else:
            cur += ch
    if cur.strip():
        ops.append(cur.strip())
    return ops


def assemble(text: str) -> bytes:
    """Assemble guest source into raw code bytes.

    One instruction per line, ``;`` starts a comment, ``name:`` defines a
    label.  ``.word N`` emits a raw 32-bit word.  Branch operands may be a
    label or a numeric byte offset relative to the branch itself.
    """
    labels: dict[str, int] = {}
    items: list[tuple[int, str, list[str]]] = []
    addr = 0
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split(";", 1)[0].strip()
        while True:
            m = re.match(r"^([A-Za-z_.][\w.]*)\s*:(.*)$", line)
            if not m:
                break
            name = m.group(1)
            if name in labels:
                raise AssemblyError(f"duplicate label {name!r}", lineno)
            labels[name] = addr
            line = m.group(2).strip()
        if not line:
            continue
        parts = line.split(None, 1)
        mnem = parts[0].lower()
        operands = _split_operands(parts[1]) if len(parts) > 1 else []
        items.append((lineno, mnem, operands))
        addr += 4

    words = []
    for idx, (lineno, mnem, ops) in enumerate(items):
        here = idx * 4
        words.append(_assemble_one(mnem, ops, here, labels, lineno))
    return b"".join(words)


def _expect(ops: list[str], n: int, mnem: str, lineno: int):
    if len(ops) != n:
        raise AssemblyError(f"{mnem} takes {n} operand(s), got {len(ops)}", lineno)


def _imm16(value: int, lineno: int) -> int:
    if not -0x8000 <= value <= 0x7FFF:
        raise AssemblyError(f"immediate {value} does not fit 16 bits", lineno)
    return value


def _assemble_one(mnem, ops, here, labels, lineno) -> bytes:
    if mnem == ".word":
        _expect(ops, 1, mnem, lineno)
        return struct.pack("<I", _parse_int(ops[0], lineno) & MASK32)
    if mnem in ("nop", "halt", "ret"):
        _expect(ops, 0, mnem, lineno)
        return GuestInstr(Op[mnem.upper()]).encode()
    if mnem == "movi":
        _expect(ops, 2, mnem, lineno)
        val = _parse_int(ops[1], lineno)
        return GuestInstr(Op.MOVI, _parse_reg(ops[0], lineno), imm=_imm16(val, lineno)).encode()
    if mnem in _RR:
        _expect(ops, 2, mnem, lineno)
        return GuestInstr(_RR[mnem], _parse_reg(ops[0], lineno), _parse_reg(ops[1], lineno)).encode()
    if mnem == "load":
        _expect(ops, 2, mnem, lineno)
        base, off = _parse_mem(ops[1], lineno)
        return GuestInstr(Op.LOAD, _parse_reg(ops[0], lineno), base, _imm16(off, lineno)).encode()
    if mnem == "store":
        _expect(ops, 2, mnem, lineno)
        base, off = _parse_mem(ops[0], lineno)
        return GuestInstr(Op.STORE, base, _parse_reg(ops[1], lineno), _imm16(off, lineno)).encode()
    if mnem in _BRANCHES:
        _expect(ops, 1, mnem, lineno)
        op, cond = _BRANCHES[mnem]
        tok = ops[0]
        if _LABEL.match(tok) and not tok.lower().startswith("0x"):
            if tok not in labels:
                raise AssemblyError(f"undefined label {tok!r}", lineno)
            off = labels[tok] - here
        else:
            off = _parse_int(tok, lineno)
        off = _imm16(off, lineno)
        if off % 4:
            raise AssemblyError(f"branch offset {off} not 4-byte aligned", lineno)
        return GuestInstr(op, imm=off, cond=cond if cond is not None else Cond.EQ).encode()
    raise AssemblyError(f"unknown mnemonic {mnem!r}", lineno)


def disassemble(code: bytes, base: int = 0) -> str:
    lines = []
    for addr in range(0, len(code) - len(code) % 4, 4):
        try:
            text = format_instr(decode_guest(code, addr))
        except DecodeError:
            text = f".word {struct.unpack_from('<I', code, addr)[0]:#010x}"
        lines.append(f"{base + addr:08x}: {text}")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# architectural state and the reference interpreter


class ExitReason(enum.Enum):
    HALTED = "halted"
    FUEL_EXHAUSTED = "fuel-exhausted"
    TRAP = "trap"


@dataclass
class GuestState:
    regs: list[int] = field(default_factory=lambda: [0] * NUM_REGS)
    pc: int = 0
    z: int = 0
    n: int = 0
    halted: bool = False

    def copy(self) -> "GuestState":
        return GuestState(list(self.regs), self.pc, self.z, self.n, self.halted)


class GuestMemory:
    """Flat little-endian byte-addressed memory; out-of-range accesses trap."""

    def __init__(self, size: int = DEFAULT_MEMORY_SIZE, image: bytes = b""):
        if len(image) > size:
            raise ValueError("image larger than memory")
        self.data = bytearray(size)
        self.data[: len(image)] = image

    @classmethod
    def with_program(cls, code: bytes, size: int = DEFAULT_MEMORY_SIZE) -> "GuestMemory":
        return cls(size, code)

    def __len__(self):
        return len(self.data)

    def in_bounds(self, addr: int) -> bool:
        return 0 <= addr and addr + 4 <= len(self.data)

    def load32(self, addr: int) -> int:
        if not self.in_bounds(addr):
            raise IndexError(addr)
        return int.from_bytes(self.data[addr: addr + 4], "little")

    def store32(self, addr: int, value: int):
        if not self.in_bounds(addr):
            raise IndexError(addr)
        self.data[addr: addr + 4] = (value & MASK32).to_bytes(4, "little")

    def copy(self) -> "GuestMemory":
        m = GuestMemory.__new__(GuestMemory)
        m.data = bytearray(self.data)
        return m


def _alu(op: Op, a: int, b: int) -> int:
    if op == Op.ADD:
        return (a + b) & MASK32
    if op == Op.SUB:
        return (a - b) & MASK32
    if op == Op.AND:
        return a & b
    if op == Op.OR:
        return a | b
    return a ^ b


def step(state: GuestState, mem: GuestMemory, instr: GuestInstr) -> bool:
    """Execute one decoded instruction.  Returns False on a memory trap
    (state is left untouched in that case)."""
    regs = state.regs
    op = instr.op
    pc = state.pc
    nxt = (pc + 4) & MASK32
    if op == Op.NOP:
        pass
    elif op == Op.MOVI:
        regs[instr.rd] = sext16(instr.imm) & MASK32
    elif op == Op.MOVR:
        regs[instr.rd] = regs[instr.rs]
    elif op in ALU_OPS:
        regs[instr.rd] = _alu(op, regs[instr.rd], regs[instr.rs])
    elif op == Op.LOAD:
        addr = (regs[instr.rs] + instr.imm) & MASK32
        if not mem.in_bounds(addr):
            return False
        regs[instr.rd] = mem.load32(addr)
    elif op == Op.STORE:
        addr = (regs[instr.rd] + instr.imm) & MASK32
        if not mem.in_bounds(addr):
            return False
        mem.store32(addr, regs[instr.rs])
    elif op == Op.CMP:
        diff = (regs[instr.rd] - regs[instr.rs]) & MASK32
        state.z = int(diff == 0)
        state.n = diff >> 31
    elif op == Op.JMP:
        nxt = (pc + instr.imm) & MASK32
    elif op == Op.JCC:
        if cond_holds(instr.cond, state.z, state.n):
            nxt = (pc + instr.imm) & MASK32
    elif op == Op.CALL:
        sp = (regs[SP] - 4) & MASK32
        if not mem.in_bounds(sp):
            return False
        mem.store32(sp, nxt)
        regs[SP] = sp
        nxt = (pc + instr.imm) & MASK32
    elif op == Op.RET:
        sp = regs[SP]
        if not mem.in_bounds(sp):
            return False
        nxt = mem.load32(sp)
        regs[SP] = (sp + 4) & MASK32
    elif op == Op.HALT:
        state.halted = True
        nxt = pc
    state.pc = nxt
    return True


def interpret(state: GuestState, mem: GuestMemory, fuel: int) -> ExitReason:
    """Run at most ``fuel`` instructions.

    A trapping instruction does not retire: the state is left exactly as it
    was before it, with ``pc`` pointing at it.
    """
    if fuel < 0:
        raise ValueError("fuel must be non-negative")
    data = mem.data
    while fuel > 0 and not state.halted:
        pc = state.pc
        try:
            instr = decode_guest(data, pc)
        except DecodeError:
            return ExitReason.TRAP
        if not step(state, mem, instr):
            return ExitReason.TRAP
        fuel -= 1
    return ExitReason.HALTED if state.halted else ExitReason.FUEL_EXHAUSTED
