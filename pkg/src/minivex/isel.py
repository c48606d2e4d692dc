"""Instruction selection (tree IR to host code over virtual registers) and
the instruction-pointer store narrowing pass.

Block layout produced here::

    prolog     event-counter decrement + check, fuel deduction + check
    body       lowered statements; side exits branch to out-of-line stubs
    final exit pc store (+ halt flag) and jump to the dispatcher
    stubs      side-exit stubs and the two prolog bail-outs

Stubs touch no virtual registers, so linear register allocation across the
out-of-line tail is safe.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from . import layout
from .guest import MASK32, Cond
from .hostisa import (ALU_INDEX, ARG_REGS, DISPATCHER_ADDR, STATE_REG, ALUri, ALUrr,
                      CALLrel, Jcc, JMPrel, Label, LD, MOVri, MOVrr, ST, STIb, STIl,
                      STIw, VReg, helper_addr, instr_size)
from .ir import (Binop, Const, Exit, Get, HelperCall, IRBlock, LoadMem, Put, RdTmp,
                 StoreMem, WrTmp)

IP_OFFSET = layout.PC_OFF
_COMMUTATIVE = frozenset({"add", "and", "or", "xor", "cmpeq"})


@dataclass
class HostBlockV:
    instrs: list
    vreg_count: int
    entry_pc: int = 0
    icount: int = 0
    exit_sites: list = field(default_factory=list)
    ip_offset: int = IP_OFFSET
    stats: dict = field(default_factory=dict)

    def copy(self, **changes) -> "HostBlockV":
        return replace(self, instrs=list(self.instrs), exit_sites=list(self.exit_sites),
                       stats=dict(self.stats), **changes)

    def size(self) -> int:
        return sum(instr_size(i) for i in self.instrs)


class _ISel:
    def __init__(self):
        self.code: list = []
        self.nv = 0
        self.env: dict[int, VReg] = {}

    def vreg(self) -> VReg:
        v = VReg(self.nv)
        self.nv += 1
        return v

    def emit(self, i):
        self.code.append(i)

    def expr(self, e) -> VReg:
        if isinstance(e, RdTmp):
            return self.env[e.tmp]
        if isinstance(e, Const):
            v = self.vreg()
            self.emit(MOVri(v, e.value & MASK32))
            return v
        if isinstance(e, Get):
            v = self.vreg()
            self.emit(LD(v, STATE_REG, e.offset))
            return v
        if isinstance(e, LoadMem):
            base, disp = self.amode(e.addr)
            v = self.vreg()
            self.emit(LD(v, base, disp))
            return v
        a, b, op = e.a, e.b, e.op
        if isinstance(a, Const) and op in _COMMUTATIVE:
            a, b = b, a
        src = self.expr(a)
        if isinstance(b, Const):
            dst = self.vreg()
            self.emit(MOVrr(dst, src))
            self.emit(ALUri(op, dst, b.value & MASK32))
            return dst
        other = self.expr(b)
        dst = self.vreg()
        self.emit(MOVrr(dst, src))
        self.emit(ALUrr(op, dst, other))
        return dst

    def amode(self, e):
        """Fold a small constant displacement into a load/store address."""
        if isinstance(e, Binop) and e.op == "add" and isinstance(e.b, Const):
            d = e.b.value & MASK32
            d = d - (1 << 32) if d & 0x80000000 else d
            if -128 <= d <= 127:
                return self.expr(e.a), d
        return self.expr(e), 0


def select_instructions(block: IRBlock) -> HostBlockV:
    """Lower a tree-built block to host code over virtual registers."""
    s = _ISel()
    stubs: list = []
    n = block.icount

    # prolog: timeslice check, then fuel deduction for the whole block
    ev = s.vreg()
    s.emit(LD(ev, STATE_REG, layout.EVC_OFF))
    s.emit(ALUri("sub", ev, 1))
    s.emit(ST(STATE_REG, layout.EVC_OFF, ev))
    s.emit(Jcc(Cond.LT, "bail_ts"))
    fu = s.vreg()
    s.emit(LD(fu, STATE_REG, layout.FUEL_OFF))
    s.emit(ALUri("sub", fu, n))
    s.emit(ST(STATE_REG, layout.FUEL_OFF, fu))
    s.emit(Jcc(Cond.LT, "bail_fuel"))

    nexit = 0
    for st in block.stmts:
        if isinstance(st, WrTmp):
            s.env[st.tmp] = s.expr(st.expr)
        elif isinstance(st, Put):
            if isinstance(st.expr, Const):
                s.emit(STIl(STATE_REG, st.offset, st.expr.value & MASK32))
            else:
                s.emit(ST(STATE_REG, st.offset, s.expr(st.expr)))
        elif isinstance(st, StoreMem):
            base, disp = s.amode(st.addr)
            s.emit(ST(base, disp, s.expr(st.data)))
        elif isinstance(st, HelperCall):
            vals = [None if isinstance(a, Const) else s.expr(a) for a in st.args]
            for k, (a, v) in enumerate(zip(st.args, vals)):
                if v is None:
                    s.emit(MOVri(ARG_REGS[k], a.value & MASK32))
                else:
                    s.emit(MOVrr(ARG_REGS[k], v))
            s.emit(CALLrel(helper_addr(st.helper), len(st.args)))
        elif isinstance(st, Exit):
            g = s.expr(st.guard)
            s.emit(ALUri("or", g, 0))
            label = f"exit{nexit}"
            nexit += 1
            s.emit(Jcc(Cond.NE, label))
            stubs.append(Label(label))
            if n - st.icount:
                stubs.append(STIl(STATE_REG, layout.REFUND_OFF, n - st.icount))
            stubs.append(STIl(STATE_REG, IP_OFFSET, st.target))
            stubs.append(JMPrel(DISPATCHER_ADDR))
        else:  # pragma: no cover
            raise TypeError(f"unexpected statement {st!r}")

    nxt = block.next
    if isinstance(nxt, Const):
        s.emit(STIl(STATE_REG, IP_OFFSET, nxt.value))
        if block.kind == "halt":
            s.emit(STIl(STATE_REG, layout.HALTED_OFF, 1))
            s.emit(JMPrel(DISPATCHER_ADDR))
        else:
            s.emit(JMPrel(DISPATCHER_ADDR, chain=nxt.value))
    else:
        s.emit(ST(STATE_REG, IP_OFFSET, s.expr(nxt)))
        s.emit(JMPrel(DISPATCHER_ADDR))

    stubs += [Label("bail_ts"), JMPrel(DISPATCHER_ADDR),
              Label("bail_fuel"), STIl(STATE_REG, layout.REFUND_OFF, n), JMPrel(DISPATCHER_ADDR)]
    code = s.code + stubs
    sites = [k for k, i in enumerate(code) if isinstance(i, JMPrel)]
    return HostBlockV(code, s.nv, block.entry_pc, n, sites)


# --------------------------------------------------------------------------
# instruction pointer store narrowing


def _is_ip_store(i, ip_offset) -> bool:
    return getattr(i, "base", None) == STATE_REG and getattr(i, "disp", None) == ip_offset \
        and isinstance(i, (ST, STIb, STIw, STIl))


def optimize_ip_stores(block: HostBlockV) -> HostBlockV:
    """Narrow constant pc stores to the bytes that changed since the last one.

    The value last written to the pc slot is tracked along the instruction
    list.  At a label the known value is kept only if every way of reaching
    it (fall-through and each branch to it) agrees; block entry is unknown.
    A store whose value differs from the known one only in the low byte
    becomes ``STIb``, only in the low two bytes ``STIw``.  Identical values
    are still stored (as ``STIb``).
    """
    ip = block.ip_offset
    out: list = []
    known: int | None = None
    falls_through = True
    incoming: dict[str, list] = {}
    narrowed_b = narrowed_w = 0
    for i in block.instrs:
        t = type(i)
        if t is Label:
            preds = incoming.get(i.name, [])
            if falls_through:
                preds = preds + [known]
            known = preds[0] if preds and all(p == preds[0] for p in preds) else None
            falls_through = True
            out.append(i)
            continue
        if not falls_through:
            # unreachable except by a branch we have not seen: be conservative
            known = None
            falls_through = True
        if t is STIl and _is_ip_store(i, ip):
            v = i.imm & MASK32
            if known is not None and (v ^ known) <= 0xFF:
                out.append(STIb(i.base, i.disp, v & 0xFF))
                narrowed_b += 1
            elif known is not None and (v ^ known) <= 0xFFFF:
                out.append(STIw(i.base, i.disp, v & 0xFFFF))
                narrowed_w += 1
            else:
                out.append(i)
            known = v
            continue
        if _is_ip_store(i, ip):
            known = None
        out.append(i)
        if t is Jcc:
            incoming.setdefault(i.target, []).append(known)
        elif t is JMPrel:
            if isinstance(i.target, str):
                incoming.setdefault(i.target, []).append(known)
            falls_through = False
        elif t.__name__ in ("JMPind", "RET"):
            falls_through = False
    stats = dict(block.stats)
    stats["ip_stib"] = stats.get("ip_stib", 0) + narrowed_b
    stats["ip_stiw"] = stats.get("ip_stiw", 0) + narrowed_w
    return replace(block, instrs=out, stats=stats)


__all__ = ["HostBlockV", "select_instructions", "optimize_ip_stores", "IP_OFFSET", "ALU_INDEX"]
