"""Synthetic host ISA: instruction forms, the byte-exact encoding, and an
emulator that stands in for native execution of emitted code.

Register ``r5`` permanently holds the guest-state block base.  Loads and
stores whose base register is ``r5`` address the guest-state block; every
other load/store addresses guest memory (identity mapped), much like a
segment override.

Control transfers carry absolute targets in their in-memory form; the
encoder turns them into end-relative 32-bit deltas.  A target may also be a
string naming a local ``Label`` before emission.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Union

from . import layout
from .guest import MASK32, Cond, cond_holds
from .ir import binop_value

ALU_OPS = ("add", "sub", "and", "or", "xor", "shl", "shr", "cmpeq")
ALU_INDEX = {name: i for i, name in enumerate(ALU_OPS)}

DISPATCHER_ADDR = 0x0000_1000
HELPER_BASE = 0x0000_2000
STATE_BASE = 0x00F0_0000
NUM_REAL = 6
NUM_SLOTS = 256
POISON = (0xDEAD0000, 0xDEAD0001, 0xDEAD0002)


def helper_addr(helper_id: int) -> int:
    return HELPER_BASE + 16 * helper_id


class EncodingError(ValueError):
    pass


class HostDecodeError(ValueError):
    pass


# --------------------------------------------------------------------------
# registers


@dataclass(frozen=True, slots=True)
class VReg:
    id: int

    def __str__(self):
        return f"%vr{self.id}"

    __repr__ = __str__


@dataclass(frozen=True, slots=True)
class RReg:
    idx: int

    def __str__(self):
        return f"%r{self.idx}"

    __repr__ = __str__


HostReg = Union[VReg, RReg]
R = tuple(RReg(i) for i in range(NUM_REAL))
STATE_REG = R[5]
ALLOCATABLE = R[:5]
CALLER_SAVED = R[:3]
ARG_REGS = R[:4]
EXIT_SCRATCH = R[4]


def call_scratch(nargs: int) -> RReg:
    """Register an indirect call needs for its target address: the first of
    r2, r3, r4 not carrying an argument."""
    return R[max(2, nargs)]


# --------------------------------------------------------------------------
# instruction forms


@dataclass(frozen=True, slots=True)
class MOVri:
    dst: HostReg
    imm: int


@dataclass(frozen=True, slots=True)
class MOVrr:
    dst: HostReg
    src: HostReg


@dataclass(frozen=True, slots=True)
class ALUrr:
    op: str
    dst: HostReg
    src: HostReg


@dataclass(frozen=True, slots=True)
class ALUri:
    op: str
    dst: HostReg
    imm: int


@dataclass(frozen=True, slots=True)
class LD:
    dst: HostReg
    base: HostReg
    disp: int


@dataclass(frozen=True, slots=True)
class ST:
    base: HostReg
    disp: int
    src: HostReg


@dataclass(frozen=True, slots=True)
class STIb:
    base: HostReg
    disp: int
    imm: int


@dataclass(frozen=True, slots=True)
class STIw:
    base: HostReg
    disp: int
    imm: int


@dataclass(frozen=True, slots=True)
class STIl:
    base: HostReg
    disp: int
    imm: int


@dataclass(frozen=True, slots=True)
class JMPrel:
    target: Union[int, str]
    # guest pc this jump ultimately leads to when it is a chainable block end
    chain: Union[int, None] = field(default=None, compare=False)


@dataclass(frozen=True, slots=True)
class JMPind:
    reg: HostReg


@dataclass(frozen=True, slots=True)
class Jcc:
    cond: Cond
    target: Union[int, str]


@dataclass(frozen=True, slots=True)
class CALLrel:
    target: Union[int, str]
    nargs: int = field(default=0, compare=False)


@dataclass(frozen=True, slots=True)
class CALLind:
    reg: HostReg
    nargs: int = field(default=0, compare=False)


@dataclass(frozen=True, slots=True)
class RET:
    pass


@dataclass(frozen=True, slots=True)
class SPILL:
    slot: int
    src: HostReg


@dataclass(frozen=True, slots=True)
class RELOAD:
    dst: HostReg
    slot: int


@dataclass(frozen=True, slots=True)
class Label:
    """Zero-length pseudo-instruction marking a local branch target."""
    name: str


HostInstr = Union[MOVri, MOVrr, ALUrr, ALUri, LD, ST, STIb, STIw, STIl, JMPrel, JMPind,
                  Jcc, CALLrel, CALLind, RET, SPILL, RELOAD]

ENCODING_TABLE = {
    MOVri: 5, MOVrr: 2, ALUrr: 2, ALUri: 5, LD: 3, ST: 3, STIb: 4, STIw: 5, STIl: 7,
    JMPrel: 5, JMPind: 2, Jcc: 6, CALLrel: 5, CALLind: 2, RET: 1, SPILL: 3, RELOAD: 3,
    Label: 0,
}

STI_FORMS = (STIb, STIw, STIl)
MEM_FORMS = (LD, ST, STIb, STIw, STIl)


def instr_size(i) -> int:
    return ENCODING_TABLE[type(i)]


def regs_of(i) -> list:
    """All register operands of ``i`` in field order."""
    t = type(i)
    if t in (MOVri, ALUri, RELOAD):
        return [i.dst]
    if t in (MOVrr, ALUrr):
        return [i.dst, i.src]
    if t is LD:
        return [i.dst, i.base]
    if t is ST:
        return [i.base, i.src]
    if t in STI_FORMS:
        return [i.base]
    if t in (JMPind, CALLind):
        return [i.reg]
    if t is SPILL:
        return [i.src]
    return []


def map_regs(i, fn):
    """Return ``i`` with every register operand replaced by ``fn(reg)``."""
    t = type(i)
    if t is MOVri:
        return MOVri(fn(i.dst), i.imm)
    if t is ALUri:
        return ALUri(i.op, fn(i.dst), i.imm)
    if t is MOVrr:
        return MOVrr(fn(i.dst), fn(i.src))
    if t is ALUrr:
        return ALUrr(i.op, fn(i.dst), fn(i.src))
    if t is LD:
        return LD(fn(i.dst), fn(i.base), i.disp)
    if t is ST:
        return ST(fn(i.base), i.disp, fn(i.src))
    if t in STI_FORMS:
        return t(fn(i.base), i.disp, i.imm)
    if t is JMPind:
        return JMPind(fn(i.reg))
    if t is CALLind:
        return CALLind(fn(i.reg), i.nargs)
    if t is SPILL:
        return SPILL(i.slot, fn(i.src))
    if t is RELOAD:
        return RELOAD(fn(i.dst), i.slot)
    return i


def format_instr(i) -> str:
    t = type(i)
    name = t.__name__
    if t is Label:
        return f"{i.name}:"
    if t is MOVri:
        return f"movl ${i.imm:#x}, {i.dst}"
    if t is MOVrr:
        return f"movl {i.src}, {i.dst}"
    if t is ALUrr:
        return f"{i.op}l {i.src}, {i.dst}"
    if t is ALUri:
        return f"{i.op}l ${i.imm:#x}, {i.dst}"
    if t is LD:
        return f"movl {i.disp:#x}({i.base}), {i.dst}"
    if t is ST:
        return f"movl {i.src}, {i.disp:#x}({i.base})"
    if t in STI_FORMS:
        suffix = {STIb: "b", STIw: "w", STIl: "l"}[t]
        return f"mov{suffix} ${i.imm:#x}, {i.disp:#x}({i.base})"
    if t in (JMPrel, CALLrel):
        tgt = i.target if isinstance(i.target, str) else f"{i.target:#x}"
        return f"{'jmp' if t is JMPrel else 'call'} {tgt}"
    if t is Jcc:
        tgt = i.target if isinstance(i.target, str) else f"{i.target:#x}"
        return f"j{i.cond.name.lower()} {tgt}"
    if t in (JMPind, CALLind):
        return f"{'jmp' if t is JMPind else 'call'} *{i.reg}"
    if t is RET:
        return "ret"
    if t is SPILL:
        return f"spill {i.src}, slot{i.slot}"
    if t is RELOAD:
        return f"reload slot{i.slot}, {i.dst}"
    return name


# --------------------------------------------------------------------------
# encoding


def _r(reg) -> int:
    if not isinstance(reg, RReg):
        raise EncodingError(f"cannot encode non-real register {reg}")
    return reg.idx


def _disp8(d: int) -> int:
    if not -128 <= d <= 127:
        raise EncodingError(f"displacement {d} does not fit 8 bits")
    return d & 0xFF


def _delta(target, end: int) -> bytes:
    if not isinstance(target, int):
        raise EncodingError(f"unresolved branch target {target!r}")
    d = target - end
    if not -(1 << 31) <= d < (1 << 31):
        raise EncodingError(f"relative delta {d} overflows 32 bits")
    return struct.pack("<i", d)


def encode_instr(i, at: int = 0) -> bytes:
    """Encode one instruction placed at host address ``at``."""
    t = type(i)
    if t is MOVri:
        out = bytes([0x00 + _r(i.dst)]) + struct.pack("<I", i.imm & MASK32)
    elif t is MOVrr:
        out = bytes([0x08, _r(i.dst) | _r(i.src) << 3])
    elif t is LD:
        out = bytes([0x09, _r(i.dst) | _r(i.base) << 3, _disp8(i.disp)])
    elif t is ST:
        out = bytes([0x0A, _r(i.base) | _r(i.src) << 3, _disp8(i.disp)])
    elif t is STIb:
        out = bytes([0x0B, _r(i.base), _disp8(i.disp), i.imm & 0xFF])
    elif t is STIw:
        out = bytes([0x0C, _r(i.base), _disp8(i.disp)]) + struct.pack("<H", i.imm & 0xFFFF)
    elif t is STIl:
        out = bytes([0x0D, _r(i.base), _disp8(i.disp)]) + struct.pack("<I", i.imm & MASK32)
    elif t is JMPrel:
        out = b"\x0E" + _delta(i.target, at + 5)
    elif t is JMPind:
        out = bytes([0x0F, _r(i.reg)])
    elif t is Jcc:
        out = bytes([0x10, int(i.cond)]) + _delta(i.target, at + 6)
    elif t is CALLrel:
        out = b"\x11" + _delta(i.target, at + 5)
    elif t is CALLind:
        out = bytes([0x12, _r(i.reg)])
    elif t is RET:
        out = b"\x13"
    elif t is SPILL:
        out = bytes([0x14, _r(i.src), i.slot])
    elif t is RELOAD:
        out = bytes([0x15, _r(i.dst), i.slot])
    elif t is ALUrr:
        out = bytes([0x20 + ALU_INDEX[i.op], _r(i.dst) | _r(i.src) << 3])
    elif t is ALUri:
        out = bytes([0x40 + ALU_INDEX[i.op] * 8 + _r(i.dst)]) + struct.pack("<I", i.imm & MASK32)
    elif t is Label:
        out = b""
    else:
        raise EncodingError(f"unknown instruction {i!r}")
    assert len(out) == ENCODING_TABLE[t], (i, len(out))
    return out


def _reg(idx: int, at: int) -> RReg:
    if idx >= NUM_REAL:
        raise HostDecodeError(f"bad register {idx} at {at:#x}")
    return R[idx]


def _rr(b: int, at: int):
    if b & 0xC0:
        raise HostDecodeError(f"reserved bits in register byte at {at:#x}")
    return _reg(b & 7, at), _reg(b >> 3, at)


def _sdisp(b: int) -> int:
    return b - 256 if b & 0x80 else b


def decode_instr(code, at: int, base: int = 0):
    """Decode the instruction at offset ``at`` of ``code``, which is mapped
    at host address ``base``.  Returns ``(instr, length)``."""
    try:
        op = code[at]
        addr = base + at
        if op <= 0x05:
            (imm,) = struct.unpack_from("<I", code, at + 1)
            return MOVri(R[op], imm), 5
        if op == 0x08:
            d, s = _rr(code[at + 1], addr)
            return MOVrr(d, s), 2
        if op == 0x09:
            d, b = _rr(code[at + 1], addr)
            return LD(d, b, _sdisp(code[at + 2])), 3
        if op == 0x0A:
            b, s = _rr(code[at + 1], addr)
            return ST(b, _sdisp(code[at + 2]), s), 3
        if op == 0x0B:
            return STIb(_reg(code[at + 1], addr), _sdisp(code[at + 2]), code[at + 3]), 4
        if op == 0x0C:
            (imm,) = struct.unpack_from("<H", code, at + 3)
            return STIw(_reg(code[at + 1], addr), _sdisp(code[at + 2]), imm), 5
        if op == 0x0D:
            (imm,) = struct.unpack_from("<I", code, at + 3)
            return STIl(_reg(code[at + 1], addr), _sdisp(code[at + 2]), imm), 7
        if op == 0x0E:
            (d,) = struct.unpack_from("<i", code, at + 1)
            return JMPrel((addr + 5 + d) & MASK32), 5
        if op == 0x0F:
            return JMPind(_reg(code[at + 1], addr)), 2
        if op == 0x10:
            c = code[at + 1]
            if c > Cond.GT:
                raise HostDecodeError(f"bad condition {c} at {addr:#x}")
            (d,) = struct.unpack_from("<i", code, at + 2)
            return Jcc(Cond(c), (addr + 6 + d) & MASK32), 6
        if op == 0x11:
            (d,) = struct.unpack_from("<i", code, at + 1)
            return CALLrel((addr + 5 + d) & MASK32), 5
        if op == 0x12:
            return CALLind(_reg(code[at + 1], addr)), 2
        if op == 0x13:
            return RET(), 1
        if op == 0x14:
            return SPILL(code[at + 2], _reg(code[at + 1], addr)), 3
        if op == 0x15:
            return RELOAD(_reg(code[at + 1], addr), code[at + 2]), 3
        if 0x20 <= op < 0x28:
            d, s = _rr(code[at + 1], addr)
            return ALUrr(ALU_OPS[op - 0x20], d, s), 2
        if 0x40 <= op < 0x80:
            k = op - 0x40
            (imm,) = struct.unpack_from("<I", code, at + 1)
            return ALUri(ALU_OPS[k >> 3], _reg(k & 7, addr), imm), 5
    except (IndexError, struct.error):
        raise HostDecodeError(f"truncated instruction at {base + at:#x}") from None
    raise HostDecodeError(f"bad opcode byte {op:#04x} at {base + at:#x}")


def disassemble(code, base: int = 0, annotate: dict | None = None) -> str:
    """Text listing: offset, length, encoded bytes, instruction."""
    lines = []
    at = 0
    annotate = annotate or {}
    while at < len(code):
        try:
            ins, n = decode_instr(code, at, base)
            text = format_instr(ins)
        except HostDecodeError:
            ins, n, text = None, 1, f".byte {code[at]:#04x}"
        note = annotate.get(at)
        raw = code[at: at + n].hex(" ")
        lines.append(f"{at:5d} [{n}] {raw:<21} {text}" + (f"   ; {note}" if note else ""))
        at += n
    return "\n".join(lines)


# --------------------------------------------------------------------------
# emulator


class HostFault(Exception):
    pass


class GuestMemoryFault(HostFault):
    """A non-state load or store outside guest memory: the guest traps."""


@dataclass
class HostExit:
    kind: str                     # "dispatcher" | "helper-returned" | "fault"
    guest_pc: int | None = None   # for "dispatcher": pc read back from the state block
    from_addr: int | None = None  # address of the transfer that reached the dispatcher
    reason: str = ""
    steps: int = 0
    guest_fault: bool = False     # fault caused by a guest memory access


class _ToDispatcher(Exception):
    def __init__(self, at: int):
        self.at = at


class _Returned(Exception):
    pass


class _CompiledFetch:
    """Decode-once cache: host address -> executable closure."""

    def _init_cache(self):
        self._fns: dict = {}

    def decode_at(self, addr: int):  # pragma: no cover - abstract
        raise NotImplementedError

    def fetch(self, addr: int):
        f = self._fns.get(addr)
        if f is None:
            try:
                ins, n = self.decode_at(addr)
            except HostDecodeError as e:
                raise HostFault(str(e)) from None
            f = self._fns[addr] = compile_instr(ins, addr, n)
        return f

    def invalidate(self, lo: int, hi: int):
        """Forget cached decodes of instructions that may overlap ``[lo, hi)``."""
        if hi - lo < 64:
            for a in range(lo - 6, hi):
                self._fns.pop(a, None)
        else:
            self._fns = {a: f for a, f in self._fns.items() if not lo - 6 <= a < hi}


class FlatCode(_CompiledFetch):
    """A single contiguous code buffer mapped at ``base`` (tests, dumps)."""

    def __init__(self, code: bytes, base: int = 0):
        self.code = bytearray(code)
        self.base = base
        self._init_cache()

    def decode_at(self, addr: int):
        off = addr - self.base
        if not 0 <= off < len(self.code):
            raise HostFault(f"fetch outside code at {addr:#x}")
        return decode_instr(self.code, off, self.base)


class VMState:
    """Host machine state: registers, flags, spill slots, the guest-state
    block, guest memory and the code it runs.

    Real registers live in the list ``r``; virtual registers (only present
    when running unallocated code directly) in the dict ``v``.
    """

    def __init__(self, mem, code=None, helpers: dict | None = None):
        self.mem = mem
        self.code = code
        self.state = bytearray(layout.STATE_SIZE)
        self.r = [0] * NUM_REAL
        self.r[STATE_REG.idx] = STATE_BASE
        self.v: dict = {}
        self.slots = [0] * NUM_SLOTS
        self.z = 0
        self.n = 0
        # host address -> (callable, nargs)
        self.helpers: dict[int, tuple] = dict(helpers or {})
        self.effects: list | None = None
        self.call_stack: list = []

    def register_helper(self, helper_id: int, fn, nargs: int):
        self.helpers[helper_addr(helper_id)] = (fn, nargs)

    def reg(self, reg) -> int:
        if type(reg) is RReg:
            return self.r[reg.idx]
        try:
            return self.v[reg]
        except KeyError:
            raise HostFault(f"read of undefined register {reg}") from None

    def set_reg(self, reg, value: int):
        if type(reg) is RReg:
            self.r[reg.idx] = value & MASK32
        else:
            self.v[reg] = value & MASK32

    def get_slot(self, off: int) -> int:
        return int.from_bytes(self.state[off: off + 4], "little")

    def set_slot(self, off: int, value: int):
        self.state[off: off + 4] = (value & MASK32).to_bytes(4, "little")

    def record(self):
        """Start logging guest-memory stores and helper calls; returns the log."""
        self.effects = []
        return self.effects


_ALU_FNS = {op: (lambda o: (lambda a, b: binop_value(o, a, b)))(op) for op in ALU_OPS}
_ALU_FNS.update({
    "add": lambda a, b: (a + b) & MASK32,
    "sub": lambda a, b: (a - b) & MASK32,
    "and": lambda a, b: a & b,
    "or": lambda a, b: a | b,
    "xor": lambda a, b: a ^ b,
})
_COND_FNS = {c: (lambda cc: (lambda z, n: cond_holds(cc, z, n)))(c) for c in Cond}
_COND_FNS.update({
    Cond.EQ: lambda z, n: z,
    Cond.NE: lambda z, n: not z,
    Cond.LT: lambda z, n: n,
    Cond.GE: lambda z, n: not n,
})
_STATE_HI = layout.STATE_SIZE


def _state_off(vm, base_idx: int, disp: int, width: int) -> int:
    off = vm.r[base_idx] - STATE_BASE + disp
    if not 0 <= off <= _STATE_HI - width:
        raise HostFault(f"state access out of range at offset {off}")
    return off


def _guest_addr(vm, base_val: int, disp: int) -> int:
    a = (base_val + disp) & MASK32
    if a + 4 > len(vm.mem.data):
        raise GuestMemoryFault(f"guest memory access out of range at {a:#x}")
    return a


def _store(vm, is_state: bool, base_val: int, base_idx: int, disp: int, value: int, width: int):
    data = (value & ((1 << (8 * width)) - 1)).to_bytes(width, "little")
    if is_state:
        off = _state_off(vm, base_idx, disp, width)
        vm.state[off: off + width] = data
    else:
        a = _guest_addr(vm, base_val, disp)
        vm.mem.data[a: a + width] = data
        if vm.effects is not None:
            vm.effects.append(("store", a, value & MASK32, width))


def _call_helper(vm: VMState, target: int) -> bool:
    entry = vm.helpers.get(target)
    if entry is None:
        return False
    fn, nargs = entry
    args = [vm.r[k] for k in range(nargs)]
    if vm.effects is not None:
        vm.effects.append(("call", target, tuple(args)))
    fn(*args)
    for r, p in zip(CALLER_SAVED, POISON):
        vm.r[r.idx] = p
    return True


def compile_instr(i, at: int, n: int):
    """Closure executing real-register instruction ``i`` (placed at ``at``)
    and returning the next host pc."""
    t = type(i)
    nxt = at + n
    if t is MOVri:
        d, imm = i.dst.idx, i.imm & MASK32

        def f(vm):
            vm.r[d] = imm
            return nxt
    elif t is MOVrr:
        d, s = i.dst.idx, i.src.idx

        def f(vm):
            r = vm.r
            r[d] = r[s]
            return nxt
    elif t is ALUrr or t is ALUri:
        fn = _ALU_FNS[i.op]
        d = i.dst.idx
        if t is ALUrr:
            s = i.src.idx

            def f(vm):
                r = vm.r
                v = r[d] = fn(r[d], r[s])
                vm.z = int(v == 0)
                vm.n = v >> 31
                return nxt
        else:
            imm = i.imm & MASK32

            def f(vm):
                r = vm.r
                v = r[d] = fn(r[d], imm)
                vm.z = int(v == 0)
                vm.n = v >> 31
                return nxt
    elif t is LD:
        d, b, disp = i.dst.idx, i.base.idx, i.disp
        if i.base == STATE_REG:
            def f(vm):
                r = vm.r
                off = r[b] - STATE_BASE + disp
                if off < 0 or off > _STATE_HI - 4:
                    raise HostFault(f"state access out of range at offset {off}")
                r[d] = int.from_bytes(vm.state[off: off + 4], "little")
                return nxt
        else:
            def f(vm):
                r = vm.r
                a = _guest_addr(vm, r[b], disp)
                r[d] = int.from_bytes(vm.mem.data[a: a + 4], "little")
                return nxt
    elif t is ST or t in STI_FORMS:
        b, disp = i.base.idx, i.disp
        width = 4 if t is ST or t is STIl else (1 if t is STIb else 2)
        s = i.src.idx if t is ST else None
        cval = None if t is ST else i.imm & ((1 << (8 * width)) - 1)
        const = None if t is ST else cval.to_bytes(width, "little")
        if i.base == STATE_REG:
            hi = _STATE_HI - width

            def f(vm):
                off = vm.r[b] - STATE_BASE + disp
                if off < 0 or off > hi:
                    raise HostFault(f"state access out of range at offset {off}")
                vm.state[off: off + width] = const if s is None else vm.r[s].to_bytes(4, "little")
                return nxt
        else:
            def f(vm):
                r = vm.r
                a = (r[b] + disp) & MASK32
                data = vm.mem.data
                if a + 4 > len(data):
                    raise GuestMemoryFault(f"guest memory access out of range at {a:#x}")
                data[a: a + width] = const if s is None else r[s].to_bytes(4, "little")
                if vm.effects is not None:
                    vm.effects.append(("store", a, cval if s is None else r[s], width))
                return nxt
    elif t is JMPrel:
        target = i.target
        if target == DISPATCHER_ADDR:
            def f(vm):
                raise _ToDispatcher(at)
        else:
            def f(vm):
                return target
    elif t is JMPind:
        s = i.reg.idx

        def f(vm):
            target = vm.r[s]
            if target == DISPATCHER_ADDR:
                raise _ToDispatcher(at)
            return target
    elif t is Jcc:
        cond, target = _COND_FNS[i.cond], i.target

        def f(vm):
            return target if cond(vm.z, vm.n) else nxt
    elif t is CALLrel or t is CALLind:
        fixed = i.target if t is CALLrel else None
        s = None if t is CALLrel else i.reg.idx

        def f(vm):
            target = fixed if s is None else vm.r[s]
            if _call_helper(vm, target):
                return nxt
            vm.call_stack.append(nxt)
            return target
    elif t is RET:
        def f(vm):
            if not vm.call_stack:
                raise _Returned()
            return vm.call_stack.pop()
    elif t is SPILL:
        slot, s = i.slot, i.src.idx

        def f(vm):
            vm.slots[slot] = vm.r[s]
            return nxt
    elif t is RELOAD:
        slot, d = i.slot, i.dst.idx

        def f(vm):
            vm.r[d] = vm.slots[slot]
            return nxt
    else:
        raise HostFault(f"cannot execute {i!r}")
    return f


def execute_host(vm: VMState, entry: int, max_steps: int = 10_000_000) -> HostExit:
    """Run encoded code from ``entry`` until it reaches the dispatcher,
    returns from the outermost frame, or faults."""
    code = vm.code
    fetch = code.fetch
    pc = entry
    steps = 0
    try:
        fns = code._fns
        while steps < max_steps:
            steps += 1
            pc_now = pc
            pc = (fns.get(pc) or fetch(pc))(vm)
        return HostExit("fault", reason="step limit", steps=steps)
    except _ToDispatcher as e:
        return HostExit("dispatcher", vm.get_slot(layout.PC_OFF), e.at, steps=steps)
    except _Returned:
        return HostExit("helper-returned", steps=steps)
    except HostFault as e:
        return HostExit("fault", from_addr=pc_now, reason=str(e), steps=steps,
                        guest_fault=isinstance(e, GuestMemoryFault))


# --------------------------------------------------------------------------
# direct execution of unallocated code (virtual registers allowed)


def _mem_operand(vm: VMState, base, disp: int, width: int):
    if base == STATE_REG:
        return True, _state_off(vm, STATE_REG.idx, disp, width)
    return False, _guest_addr(vm, vm.reg(base), disp)


def step_instr(vm: VMState, i):
    """Execute the data part of ``i`` over any mix of real and virtual
    registers.  Returns ``None`` to fall through or a control action:
    ('jump', target) / ('call', target) / ('ret',)."""
    t = type(i)
    if t is MOVri:
        vm.set_reg(i.dst, i.imm)
    elif t is MOVrr:
        vm.set_reg(i.dst, vm.reg(i.src))
    elif t is ALUrr or t is ALUri:
        b = vm.reg(i.src) if t is ALUrr else i.imm & MASK32
        v = binop_value(i.op, vm.reg(i.dst), b)
        vm.set_reg(i.dst, v)
        vm.z = int(v == 0)
        vm.n = v >> 31
    elif t is LD:
        is_state, a = _mem_operand(vm, i.base, i.disp, 4)
        src = vm.state if is_state else vm.mem.data
        vm.set_reg(i.dst, int.from_bytes(src[a: a + 4], "little"))
    elif t is ST or t in STI_FORMS:
        width = 4 if t is ST or t is STIl else (1 if t is STIb else 2)
        value = vm.reg(i.src) if t is ST else i.imm
        base_val = vm.reg(i.base)
        base_idx = i.base.idx if type(i.base) is RReg else -1
        _store(vm, i.base == STATE_REG, base_val, base_idx, i.disp, value, width)
    elif t is SPILL:
        vm.slots[i.slot] = vm.reg(i.src)
    elif t is RELOAD:
        vm.set_reg(i.dst, vm.slots[i.slot])
    elif t is JMPrel:
        return ("jump", i.target)
    elif t is JMPind:
        return ("jump", vm.reg(i.reg))
    elif t is Jcc:
        if cond_holds(i.cond, vm.z, vm.n):
            return ("jump", i.target)
    elif t is CALLrel:
        return ("call", i.target)
    elif t is CALLind:
        return ("call", vm.reg(i.reg))
    elif t is RET:
        return ("ret",)
    elif t is Label:
        pass
    else:
        raise HostFault(f"cannot execute {i!r}")
    return None


def execute_instrs(vm: VMState, instrs: list, max_steps: int = 1_000_000) -> HostExit:
    """Run an instruction list directly (virtual registers allowed).

    Local ``Label`` targets are resolved by name; integer targets must be the
    dispatcher or a registered helper.  Reading a virtual register that was
    never written faults.
    """
    labels = {ins.name: k for k, ins in enumerate(instrs) if type(ins) is Label}
    pc = 0
    steps = 0
    try:
        while steps < max_steps:
            if pc >= len(instrs):
                return HostExit("helper-returned", steps=steps)
            ins = instrs[pc]
            steps += 1
            act = step_instr(vm, ins)
            if act is None:
                pc += 1
                continue
            kind = act[0]
            if kind == "jump":
                tgt = act[1]
                if tgt == DISPATCHER_ADDR:
                    return HostExit("dispatcher", vm.get_slot(layout.PC_OFF), pc, steps=steps)
                if isinstance(tgt, str):
                    pc = labels[tgt]
                else:
                    raise HostFault(f"jump to unknown address {tgt:#x}")
            elif kind == "call":
                if not _call_helper(vm, act[1]):
                    raise HostFault(f"call to unknown address {act[1]:#x}")
                pc += 1
            else:
                return HostExit("helper-returned", steps=steps)
        return HostExit("fault", reason="step limit", steps=steps)
    except HostFault as e:
        return HostExit("fault", from_addr=pc, reason=str(e), steps=steps,
                        guest_fault=isinstance(e, GuestMemoryFault))
