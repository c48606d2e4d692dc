"""Superblock IR: disassembly into flat single-assignment form, IR
optimization, tool instrumentation, tree building and a reference evaluator.

Expressions are immutable and hashable so they double as CSE keys.  In flat
form every operand of a ``Binop``/``LoadMem`` and every statement operand is
an atom (``Const`` or ``RdTmp``); ``build_trees`` lifts that restriction.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Union

from . import layout
from .guest import (ALU_OPS, MASK32, SP, Cond, DecodeError, Op, decode_guest,
                    sext16)

BINOPS = ("add", "sub", "and", "or", "xor", "shl", "shr", "cmpeq")
DEFAULT_MAX_INSTRS = 50
MAX_HELPER_ARGS = 4


def binop_value(op: str, a: int, b: int) -> int:
    if op == "add":
        return (a + b) & MASK32
    if op == "sub":
        return (a - b) & MASK32
    if op == "and":
        return a & b
    if op == "or":
        return a | b
    if op == "xor":
        return a ^ b
    if op == "shl":
        return (a << (b & 31)) & MASK32
    if op == "shr":
        return a >> (b & 31)
    if op == "cmpeq":
        return int(a == b)
    raise ValueError(f"unknown binop {op!r}")


# --------------------------------------------------------------------------
# expressions


@dataclass(frozen=True, slots=True)
class Const:
    value: int

    def __str__(self):
        return f"{self.value:#x}" if self.value > 9 else str(self.value)


@dataclass(frozen=True, slots=True)
class RdTmp:
    tmp: int

    def __str__(self):
        return f"t{self.tmp}"


@dataclass(frozen=True, slots=True)
class Get:
    offset: int

    def __str__(self):
        return f"GET({layout.SLOT_NAMES.get(self.offset, self.offset)})"


@dataclass(frozen=True, slots=True)
class Binop:
    op: str
    a: "IRExpr"
    b: "IRExpr"

    def __str__(self):
        return f"{self.op}({self.a},{self.b})"


@dataclass(frozen=True, slots=True)
class LoadMem:
    addr: "IRExpr"

    def __str__(self):
        return f"LDle({self.addr})"


IRExpr = Union[Const, RdTmp, Get, Binop, LoadMem]
ATOMS = (Const, RdTmp)


# --------------------------------------------------------------------------
# statements


@dataclass(frozen=True, slots=True)
class WrTmp:
    tmp: int
    expr: IRExpr

    def __str__(self):
        return f"t{self.tmp} = {self.expr}"


@dataclass(frozen=True, slots=True)
class Put:
    offset: int
    expr: IRExpr

    def __str__(self):
        return f"PUT({layout.SLOT_NAMES.get(self.offset, self.offset)}) = {self.expr}"


@dataclass(frozen=True, slots=True)
class StoreMem:
    addr: IRExpr
    data: IRExpr

    def __str__(self):
        return f"STle({self.addr}) = {self.data}"


@dataclass(frozen=True, slots=True)
class Exit:
    guard: IRExpr
    target: int
    icount: int   # guest instructions retired when this exit is taken

    def __str__(self):
        return f"if ({self.guard}) goto {self.target:#x}  [icount={self.icount}]"


@dataclass(frozen=True, slots=True)
class HelperCall:
    helper: int
    args: tuple

    def __str__(self):
        return f"CALL helper{self.helper}({', '.join(map(str, self.args))})"


IRStmt = Union[WrTmp, Put, StoreMem, Exit, HelperCall]
SIDE_EFFECTS = (Put, StoreMem, Exit, HelperCall)


@dataclass
class IRBlock:
    entry_pc: int
    stmts: list
    next: IRExpr
    kind: str = "boring"        # boring | call | ret | halt
    icount: int = 0             # guest instructions on the fall-through path
    guest_bytes: int = 0
    ntemps: int = 0
    tree: bool = False

    @property
    def indirect(self) -> bool:
        return not isinstance(self.next, Const)

    def copy(self) -> "IRBlock":
        return replace(self, stmts=list(self.stmts))

    def __str__(self):
        return format_block(self)


def format_block(block: IRBlock) -> str:
    lines = [f"IRSB {block.entry_pc:#x} ({block.guest_bytes} guest bytes, {block.icount} instrs)"]
    lines += [f"   {s}" for s in block.stmts]
    lines.append(f"   goto {{{block.kind}}} {block.next}")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# helpers over expressions


def expr_tmps(e: IRExpr, out: list | None = None) -> list:
    if out is None:
        out = []
    if isinstance(e, RdTmp):
        out.append(e.tmp)
    elif isinstance(e, Binop):
        expr_tmps(e.a, out)
        expr_tmps(e.b, out)
    elif isinstance(e, LoadMem):
        expr_tmps(e.addr, out)
    return out


def stmt_exprs(s: IRStmt) -> tuple:
    if isinstance(s, (WrTmp, Put)):
        return (s.expr,)
    if isinstance(s, StoreMem):
        return (s.addr, s.data)
    if isinstance(s, Exit):
        return (s.guard,)
    return s.args


def map_stmt(s: IRStmt, fn) -> IRStmt:
    if isinstance(s, WrTmp):
        return WrTmp(s.tmp, fn(s.expr))
    if isinstance(s, Put):
        return Put(s.offset, fn(s.expr))
    if isinstance(s, StoreMem):
        return StoreMem(fn(s.addr), fn(s.data))
    if isinstance(s, Exit):
        return Exit(fn(s.guard), s.target, s.icount)
    return HelperCall(s.helper, tuple(fn(a) for a in s.args))


def has_load(e: IRExpr) -> bool:
    if isinstance(e, LoadMem):
        return True
    if isinstance(e, Binop):
        return has_load(e.a) or has_load(e.b)
    return False


def gets_in(e: IRExpr, out: set | None = None) -> set:
    if out is None:
        out = set()
    if isinstance(e, Get):
        out.add(e.offset)
    elif isinstance(e, Binop):
        gets_in(e.a, out)
        gets_in(e.b, out)
    elif isinstance(e, LoadMem):
        gets_in(e.addr, out)
    return out


# --------------------------------------------------------------------------
# phase 1: disassembly

_GUARDS = {
    Cond.EQ: ("Z",), Cond.NE: ("Z", "not"), Cond.LT: ("N",), Cond.GE: ("N", "not"),
    Cond.LE: ("ZN",), Cond.GT: ("ZN", "not"),
}


class _Builder:
    def __init__(self):
        self.stmts: list = []
        self.ntemps = 0

    def tmp(self, e: IRExpr) -> RdTmp:
        t = self.ntemps
        self.ntemps += 1
        self.stmts.append(WrTmp(t, e))
        return RdTmp(t)

    def emit(self, s: IRStmt):
        self.stmts.append(s)

    def get(self, r: int) -> RdTmp:
        return self.tmp(Get(layout.reg_offset(r)))

    def put(self, r: int, e: IRExpr):
        self.emit(Put(layout.reg_offset(r), e))

    def put_pc(self, pc: int):
        self.emit(Put(layout.PC_OFF, Const(pc)))

    def guard(self, cond: Cond) -> RdTmp:
        src, *neg = _GUARDS[cond]
        if src == "Z":
            g = self.tmp(Get(layout.Z_OFF))
        elif src == "N":
            g = self.tmp(Get(layout.N_OFF))
        else:
            g = self.tmp(Binop("or", self.tmp(Get(layout.Z_OFF)), self.tmp(Get(layout.N_OFF))))
        if neg:
            g = self.tmp(Binop("xor", g, Const(1)))
        return g


def disassemble_block(code, entry_pc: int, max_guest_instrs: int = DEFAULT_MAX_INSTRS) -> IRBlock:
    """Decode a superblock starting at ``entry_pc`` into flat IR.

    Conditional branches become side exits and decoding carries on along
    the fall-through path.  The block ends at JMP/CALL/RET/HALT or at the
    instruction cap.  A decode error ends the block just before the bad
    instruction (control then reaches it through the dispatcher, which
    traps); a decode error at ``entry_pc`` itself is raised.
    """
    if max_guest_instrs < 1:
        raise ValueError("max_guest_instrs must be >= 1")
    b = _Builder()
    pc = entry_pc
    count = 0
    kind = "boring"
    nxt: IRExpr | None = None
    while count < max_guest_instrs:
        try:
            ins = decode_guest(code, pc)
        except DecodeError:
            if count == 0:
                raise
            break
        count += 1
        op = ins.op
        after = (pc + 4) & MASK32
        if op == Op.NOP:
            pass
        elif op == Op.MOVI:
            b.put(ins.rd, Const(sext16(ins.imm) & MASK32))
        elif op == Op.MOVR:
            b.put(ins.rd, b.get(ins.rs))
        elif op in ALU_OPS:
            x = b.get(ins.rd)
            y = b.get(ins.rs)
            b.put(ins.rd, b.tmp(Binop(ALU_OPS[op], x, y)))
        elif op == Op.LOAD:
            b.put_pc(pc)
            base = b.get(ins.rs)
            addr = b.tmp(Binop("add", base, Const(ins.imm & MASK32)))
            b.put(ins.rd, b.tmp(LoadMem(addr)))
        elif op == Op.STORE:
            b.put_pc(pc)
            base = b.get(ins.rd)
            addr = b.tmp(Binop("add", base, Const(ins.imm & MASK32)))
            b.emit(StoreMem(addr, b.get(ins.rs)))
        elif op == Op.CMP:
            x = b.get(ins.rd)
            y = b.get(ins.rs)
            z = b.tmp(Binop("cmpeq", x, y))
            d = b.tmp(Binop("sub", x, y))
            n = b.tmp(Binop("shr", d, Const(31)))
            b.emit(Put(layout.Z_OFF, z))
            b.emit(Put(layout.N_OFF, n))
        elif op == Op.JCC:
            g = b.guard(ins.cond)
            b.put_pc(pc)
            b.emit(Exit(g, (pc + ins.imm) & MASK32, count))
        elif op == Op.JMP:
            nxt = Const((pc + ins.imm) & MASK32)
        elif op == Op.CALL:
            b.put_pc(pc)
            sp = b.get(SP)
            nsp = b.tmp(Binop("sub", sp, Const(4)))
            b.emit(StoreMem(nsp, Const(after)))
            b.put(SP, nsp)
            nxt = Const((pc + ins.imm) & MASK32)
            kind = "call"
        elif op == Op.RET:
            b.put_pc(pc)
            sp = b.get(SP)
            target = b.tmp(LoadMem(sp))
            b.put(SP, b.tmp(Binop("add", sp, Const(4))))
            nxt = target
            kind = "ret"
        elif op == Op.HALT:
            nxt = Const(pc)
            kind = "halt"
        pc = after
        if nxt is not None:
            break
    if nxt is None:
        nxt = Const(pc)
    return IRBlock(entry_pc, b.stmts, nxt, kind, count, 4 * count, b.ntemps)


# --------------------------------------------------------------------------
# phases 2 and 4: IR optimization


_SAME_OPERAND = {"sub": 0, "xor": 0, "cmpeq": 1}


def _fold(e: IRExpr) -> IRExpr:
    if isinstance(e, Binop):
        if isinstance(e.a, Const) and isinstance(e.b, Const):
            return Const(binop_value(e.op, e.a.value, e.b.value))
        if e.a == e.b and isinstance(e.a, RdTmp):
            if e.op in _SAME_OPERAND:
                return Const(_SAME_OPERAND[e.op])
            if e.op in ("and", "or"):
                return e.a
    return e


def _subst(e: IRExpr, env: dict) -> IRExpr:
    if isinstance(e, RdTmp):
        return env.get(e.tmp, e)
    if isinstance(e, Binop):
        a, b = _subst(e.a, env), _subst(e.b, env)
        return e if (a is e.a and b is e.b) else Binop(e.op, a, b)
    if isinstance(e, LoadMem):
        a = _subst(e.addr, env)
        return e if a is e.addr else LoadMem(a)
    return e


def optimize_ir(block: IRBlock, cse: bool = True) -> IRBlock:
    """Constant folding, copy propagation, CSE and dead-code removal.

    With ``cse=False`` only folding/propagation and dead-code removal run
    (the lighter post-instrumentation pass).  CSE covers pure expressions
    only; a ``Get`` is pure until the next ``Put`` to the same offset, and a
    ``Get`` after a ``Put`` to its offset is replaced by the stored value.
    Loads are never removed since they may trap.
    """
    env: dict[int, IRExpr] = {}
    avail: dict[IRExpr, int] = {}
    last_put: dict[int, IRExpr] = {}
    out: list = []
    nxt, kind, icount = block.next, block.kind, block.icount
    ended = False
    for s in block.stmts:
        if isinstance(s, WrTmp):
            e = _fold(_subst(s.expr, env))
            if isinstance(e, ATOMS):
                env[s.tmp] = e
                continue
            if cse:
                if isinstance(e, Get) and e.offset in last_put:
                    env[s.tmp] = last_put[e.offset]
                    continue
                if not has_load(e):
                    prev = avail.get(e)
                    if prev is not None:
                        env[s.tmp] = RdTmp(prev)
                        continue
                    avail[e] = s.tmp
            out.append(WrTmp(s.tmp, e))
        elif isinstance(s, Exit):
            g = _fold(_subst(s.guard, env))
            if isinstance(g, Const):
                if g.value == 0:
                    continue
                nxt, kind, icount = Const(s.target), "boring", s.icount
                ended = True
                break
            out.append(Exit(g, s.target, s.icount))
        else:
            s2 = map_stmt(s, lambda e: _fold(_subst(e, env)))
            out.append(s2)
            if isinstance(s2, Put) and cse:
                last_put[s2.offset] = s2.expr
                avail.pop(Get(s2.offset), None)
                # non-flat input: drop anything else reading this offset
                stale = [k for k in avail if not isinstance(k, Get) and s2.offset in gets_in(k)]
                for k in stale:
                    del avail[k]
    if not ended:
        nxt = _fold(_subst(nxt, env))

    used = set(expr_tmps(nxt))
    kept = []
    for s in reversed(out):
        if isinstance(s, WrTmp) and s.tmp not in used and not has_load(s.expr):
            continue
        for e in stmt_exprs(s):
            used.update(expr_tmps(e))
        kept.append(s)
    kept.reverse()
    return replace(block, stmts=kept, next=nxt, kind=kind, icount=icount)


# --------------------------------------------------------------------------
# phase 3: instrumentation


class InstrumentationError(ValueError):
    pass


class ToolHooks:
    """Base class for instrumentation tools.

    ``instrument_stmt`` sees every statement with the guest pc most recently
    stored to the pc slot and returns statements to insert before it.
    ``helpers`` maps helper ids used by the tool to Python callables.
    """

    name = "none"

    def instrument_stmt(self, stmt: IRStmt, pc: int) -> list:
        return []

    def helpers(self) -> dict:
        return {}


COUNT_ACCESS = 0


class MemCount(ToolHooks):
    """Counts guest memory accesses through a four-argument helper."""

    name = "memcount"

    def __init__(self):
        self.reads = 0
        self.writes = 0
        self.bytes = 0
        self.log: list[tuple[int, int, int, int]] = []

    def instrument_stmt(self, stmt, pc):
        if isinstance(stmt, WrTmp) and isinstance(stmt.expr, LoadMem):
            return [HelperCall(COUNT_ACCESS, (stmt.expr.addr, Const(4), Const(0), Const(pc)))]
        if isinstance(stmt, StoreMem):
            return [HelperCall(COUNT_ACCESS, (stmt.addr, Const(4), Const(1), Const(pc)))]
        return []

    def count_access(self, addr, size, is_write, pc):
        if is_write:
            self.writes += 1
        else:
            self.reads += 1
        self.bytes += size
        self.log.append((addr, size, is_write, pc))

    def helpers(self):
        return {COUNT_ACCESS: self.count_access}


def _check_inserted(s, defined: set):
    if not isinstance(s, SIDE_EFFECTS + (WrTmp,)):
        raise InstrumentationError(f"not an IR statement: {s!r}")
    if isinstance(s, HelperCall) and len(s.args) > MAX_HELPER_ARGS:
        raise InstrumentationError(f"helper call with {len(s.args)} args (max {MAX_HELPER_ARGS})")
    if isinstance(s, WrTmp):
        raise InstrumentationError("tools may not introduce temporaries")
    for e in stmt_exprs(s):
        for t in expr_tmps(e):
            if t not in defined:
                raise InstrumentationError(f"inserted statement reads undefined t{t}")


def instrument(block: IRBlock, tool: ToolHooks | None) -> IRBlock:
    if tool is None:
        return block
    out = []
    defined: set = set()
    pc = block.entry_pc
    for s in block.stmts:
        for ins in tool.instrument_stmt(s, pc) or ():
            _check_inserted(ins, defined)
            out.append(ins)
        out.append(s)
        if isinstance(s, WrTmp):
            defined.add(s.tmp)
        elif isinstance(s, Put) and s.offset == layout.PC_OFF and isinstance(s.expr, Const):
            pc = s.expr.value
    return replace(block, stmts=out)


# --------------------------------------------------------------------------
# phase 5: tree building


def build_trees(block: IRBlock) -> IRBlock:
    """Inline single-use temporaries into their consumer.

    A pending binding is materialised (kept as an explicit ``WrTmp``) as soon
    as inlining it further would move it across something it depends on: a
    ``Put`` to a slot it reads, or, for expressions containing a load, any
    side effect or another load.
    """
    uses: dict[int, int] = {}
    for s in block.stmts:
        for e in stmt_exprs(s):
            for t in expr_tmps(e):
                uses[t] = uses.get(t, 0) + 1
    for t in expr_tmps(block.next):
        uses[t] = uses.get(t, 0) + 1

    pending: dict[int, IRExpr] = {}
    out: list = []

    def inline(e):
        if isinstance(e, RdTmp):
            return pending.pop(e.tmp, e)
        if isinstance(e, Binop):
            a = inline(e.a)
            b = inline(e.b)
            return e if (a is e.a and b is e.b) else Binop(e.op, a, b)
        if isinstance(e, LoadMem):
            a = inline(e.addr)
            return e if a is e.addr else LoadMem(a)
        return e

    def flush(pred):
        for t in [t for t, e in pending.items() if pred(e)]:
            out.append(WrTmp(t, pending.pop(t)))

    for s in block.stmts:
        s = map_stmt(s, inline)
        if isinstance(s, WrTmp):
            if has_load(s.expr):
                flush(has_load)
            if uses.get(s.tmp, 0) == 1:
                pending[s.tmp] = s.expr
            else:
                out.append(s)
            continue
        if isinstance(s, Put):
            off = s.offset
            flush(lambda e: has_load(e) or off in gets_in(e))
        else:
            flush(has_load)
        out.append(s)
    nxt = inline(block.next)
    flush(lambda e: True)
    return replace(block, stmts=out, next=nxt, tree=True)


# --------------------------------------------------------------------------
# reference evaluator


class IRTrap(Exception):
    pass


@dataclass
class IRResult:
    kind: str            # "exit" (side exit taken), "next" (fell off the end), "trap"
    target: int | None
    icount: int | None
    block_kind: str = "boring"


def _rd(state, off):
    return int.from_bytes(state[off: off + 4], "little")


def eval_expr(e: IRExpr, tmps: dict, state, mem) -> int:
    if isinstance(e, Const):
        return e.value & MASK32
    if isinstance(e, RdTmp):
        return tmps[e.tmp]
    if isinstance(e, Get):
        return _rd(state, e.offset)
    if isinstance(e, Binop):
        return binop_value(e.op, eval_expr(e.a, tmps, state, mem), eval_expr(e.b, tmps, state, mem))
    addr = eval_expr(e.addr, tmps, state, mem)
    if not mem.in_bounds(addr):
        raise IRTrap(addr)
    return mem.load32(addr)


def eval_block(block: IRBlock, state: bytearray, mem, helpers: dict | None = None) -> IRResult:
    """Evaluate ``block`` directly against a state block and guest memory."""
    tmps: dict[int, int] = {}
    helpers = helpers or {}
    try:
        for s in block.stmts:
            if isinstance(s, WrTmp):
                tmps[s.tmp] = eval_expr(s.expr, tmps, state, mem)
            elif isinstance(s, Put):
                v = eval_expr(s.expr, tmps, state, mem)
                state[s.offset: s.offset + 4] = v.to_bytes(4, "little")
            elif isinstance(s, StoreMem):
                addr = eval_expr(s.addr, tmps, state, mem)
                data = eval_expr(s.data, tmps, state, mem)
                if not mem.in_bounds(addr):
                    raise IRTrap(addr)
                mem.store32(addr, data)
            elif isinstance(s, Exit):
                if eval_expr(s.guard, tmps, state, mem):
                    return IRResult("exit", s.target, s.icount)
            else:
                args = [eval_expr(a, tmps, state, mem) for a in s.args]
                fn = helpers.get(s.helper)
                if fn is not None:
                    fn(*args)
        return IRResult("next", eval_expr(block.next, tmps, state, mem), block.icount, block.kind)
    except IRTrap:
        return IRResult("trap", None, None)


def check_ssa(block: IRBlock) -> None:
    """Raise ValueError unless every temp is written once and read after its write."""
    defined: set = set()
    for s in block.stmts:
        for e in stmt_exprs(s):
            for t in expr_tmps(e):
                if t not in defined:
                    raise ValueError(f"t{t} read before written")
        if isinstance(s, WrTmp):
            if s.tmp in defined:
                raise ValueError(f"t{s.tmp} written twice")
            defined.add(s.tmp)
    for t in expr_tmps(block.next):
        if t not in defined:
            raise ValueError(f"t{t} read before written")
