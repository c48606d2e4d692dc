"""Register usage classification and the linear-scan register allocator."""

from __future__ import annotations

import enum
from bisect import bisect_right
from dataclasses import replace

from .hostisa import (ALLOCATABLE, ARG_REGS, CALLER_SAVED, NUM_SLOTS, STATE_REG, ALUri,
                      ALUrr, CALLind, CALLrel, JMPind, LD, MOVri, MOVrr, RELOAD, RReg, SPILL,
                      ST, STI_FORMS, VReg, call_scratch, map_regs)


class HRMode(enum.Enum):
    READ = "R"
    WRITE = "W"
    MODIFY = "M"


_R, _W, _M = HRMode.READ, HRMode.WRITE, HRMode.MODIFY


class AllocationError(RuntimeError):
    pass


def _merge(pairs) -> list:
    out: dict = {}
    for reg, mode in pairs:
        prev = out.get(reg)
        if prev is None:
            out[reg] = mode
        elif prev is not mode:
            out[reg] = _M
    return list(out.items())


def get_reg_usage(i) -> list:
    """``[(reg, HRMode)]`` for every register ``i`` reads or writes.

    Calls read their argument registers and write the caller-saved set plus
    the scratch register an indirect call needs; the scratch is reported in
    both encodings so allocation never depends on how calls are emitted.
    """
    t = type(i)
    if t is MOVri:
        return [(i.dst, _W)]
    if t is MOVrr:
        if i.dst == i.src:
            return [(i.dst, _M)]
        return [(i.dst, _W), (i.src, _R)]
    if t is ALUrr:
        if i.dst == i.src:
            return [(i.dst, _M)]
        return [(i.dst, _M), (i.src, _R)]
    if t is ALUri:
        return [(i.dst, _M)]
    if t is LD:
        if i.dst == i.base:
            return [(i.dst, _M)]
        return [(i.dst, _W), (i.base, _R)]
    if t is ST:
        return _merge([(i.base, _R), (i.src, _R)])
    if t in STI_FORMS:
        return [(i.base, _R)]
    if t is JMPind:
        return [(i.reg, _R)]
    if t is CALLrel or t is CALLind:
        pairs = [(r, _R) for r in ARG_REGS[: i.nargs]]
        if t is CALLind:
            pairs.append((i.reg, _R))
        pairs += [(r, _W) for r in CALLER_SAVED]
        pairs.append((call_scratch(i.nargs), _W))
        return _merge(pairs)
    if t is SPILL:
        return [(i.src, _R)]
    if t is RELOAD:
        return [(i.dst, _W)]
    return []


def _reads(mode) -> bool:
    return mode is not _W


def _writes(mode) -> bool:
    return mode is not _R


class _VInfo:
    __slots__ = ("reg", "slot", "dirty", "last", "uses", "hint")

    def __init__(self):
        self.reg = None
        self.slot = None
        self.dirty = False
        self.last = -1
        self.uses: list = []
        self.hint = None


def allocate_registers(block, movvr: bool = True, buggy_modify: bool = False):
    """Map virtual registers onto ``r0``..``r4``, inserting spills and reloads.

    ``movvr`` drops moves that end up copying a register onto itself; the
    allocation itself is the same either way.  ``buggy_modify`` reproduces a
    classic allocator bug: a read-modify-write does not mark its register
    dirty, so a later eviction may skip the spill and leave a stale slot.
    """
    code = block.instrs
    usages = [get_reg_usage(i) for i in code]
    info: dict[VReg, _VInfo] = {}
    real_writes: dict[RReg, list] = {r: [] for r in ALLOCATABLE}
    real_busy: dict[RReg, list] = {r: [] for r in ALLOCATABLE}
    open_real: dict[RReg, list] = {}
    for k, use in enumerate(usages):
        for reg, mode in use:
            if type(reg) is VReg:
                vi = info.get(reg)
                if vi is None:
                    vi = info[reg] = _VInfo()
                vi.last = k
                if _reads(mode):
                    vi.uses.append(k)
            elif reg in real_writes:
                if _reads(mode) and reg in open_real:
                    open_real[reg][1] = k
                if _writes(mode):
                    real_writes[reg].append(k)
                    iv = [k, k]
                    real_busy[reg].append(iv)
                    open_real[reg] = iv
    for k, i in enumerate(code):
        if type(i) is MOVrr and type(i.src) is VReg and type(i.dst) is RReg:
            vi = info[i.src]
            if vi.last == k and i.dst in real_writes:
                vi.hint = i.dst

    def real_blocked(r, k) -> bool:
        for w, last in real_busy[r]:
            if w <= k <= last:
                return True
        return False

    def conflicts(r, k, end) -> bool:
        ws = real_writes[r]
        j = bisect_right(ws, k - 1)
        return j < len(ws) and ws[j] < end

    occupant: dict[RReg, VReg] = {}
    out: list = []
    next_slot = 0
    stats = {"spills": 0, "reloads": 0, "coalesced": 0, "identity_moves": 0}

    def spill_out(v: VReg):
        nonlocal next_slot
        vi = info[v]
        r = vi.reg
        if vi.dirty or vi.slot is None:
            if vi.slot is None:
                if next_slot >= NUM_SLOTS:
                    raise AllocationError("out of spill slots")
                vi.slot = next_slot
                next_slot += 1
            out.append(SPILL(vi.slot, r))
            stats["spills"] += 1
        vi.dirty = False
        vi.reg = None
        del occupant[r]

    def next_use(v: VReg, k: int) -> int:
        us = info[v].uses
        j = bisect_right(us, k)
        return us[j] if j < len(us) else 1 << 30

    def pick(v: VReg, k: int, locked: set, allow_written: RReg | None = None) -> RReg:
        vi = info[v]
        end = vi.last
        written_now = {r for r, m in usages[k] if type(r) is RReg and _writes(m)}
        cands = [r for r in ALLOCATABLE
                 if not real_blocked(r, k) and (r not in written_now or r == allow_written)]
        free = [r for r in cands if r not in occupant]
        if vi.hint in free and not conflicts(vi.hint, k, end):
            return vi.hint
        for r in free:
            if not conflicts(r, k, end):
                return r
        if free:
            return free[0]
        victims = [r for r in cands if occupant[r] not in locked]
        if not victims:
            raise AllocationError(f"no register available at instruction {k}")
        far = max(victims, key=lambda r: (next_use(occupant[r], k), -r.idx))
        spill_out(occupant[far])
        return far

    def place(v: VReg, r: RReg):
        occupant[r] = v
        info[v].reg = r

    for k, ins in enumerate(code):
        use = usages[k]
        vread = [reg for reg, m in use if type(reg) is VReg and _reads(m)]
        locked = set(vread)

        # coalesce a copy from a dying vreg into a fresh one
        if type(ins) is MOVrr and type(ins.dst) is VReg and type(ins.src) is VReg:
            vs, vd = info[ins.src], info[ins.dst]
            if vs.last == k and vd.reg is None and vd.slot is None and ins.dst != ins.src:
                vd.reg, vd.slot, vd.dirty = vs.reg, vs.slot, vs.dirty
                if vs.reg is not None:
                    occupant[vs.reg] = ins.dst
                vs.reg = None
                stats["coalesced"] += 1
                if vd.last == k:
                    if vd.reg is not None:
                        del occupant[vd.reg]
                    vd.reg = None
                continue

        mv_hint = ins.dst if (type(ins) is MOVrr and type(ins.dst) is RReg
                              and type(ins.src) is VReg) else None

        # evict vregs from registers this instruction overwrites
        for reg, m in use:
            if type(reg) is RReg and _writes(m) and reg in occupant:
                w = occupant[reg]
                if w in locked and mv_hint == reg:
                    continue
                spill_out(w)

        # bring read operands into registers
        for v in vread:
            vi = info[v]
            if vi.reg is None:
                if vi.slot is None:
                    raise AllocationError(f"{v} read before written")
                r = pick(v, k, locked, allow_written=mv_hint)
                place(v, r)
                out.append(RELOAD(r, vi.slot))
                stats["reloads"] += 1
                vi.dirty = False

        # operands dying here free their registers for the destination
        for v in vread:
            vi = info[v]
            if vi.last == k and vi.reg is not None and occupant.get(vi.reg) == v:
                del occupant[vi.reg]

        for reg, m in use:
            if type(reg) is not VReg:
                continue
            vi = info[reg]
            if m is _W:
                if vi.reg is None:
                    # a redefinition of a resident vreg keeps its register
                    place(reg, pick(reg, k, locked - {v for v in vread if info[v].last == k}))
                vi.dirty = True
            elif m is _M and not buggy_modify:
                vi.dirty = True

        def loc(reg):
            if type(reg) is VReg:
                return info[reg].reg
            return reg

        new = map_regs(ins, loc)
        if type(new) is MOVrr and new.dst == new.src:
            stats["identity_moves"] += 1
            if not movvr:
                out.append(new)
        else:
            out.append(new)

        for reg, m in use:
            if type(reg) is VReg:
                vi = info[reg]
                if vi.last == k and vi.reg is not None:
                    if occupant.get(vi.reg) == reg:
                        del occupant[vi.reg]
                    vi.reg = None

    check_allocated(out)
    stats["slots"] = next_slot
    merged = dict(block.stats)
    merged.update(stats)
    return replace(block, instrs=out, vreg_count=0, stats=merged)


def check_allocated(instrs) -> None:
    """Raise ``AllocationError`` if any virtual register survived allocation
    or the reserved state register is used as a destination."""
    for k, i in enumerate(instrs):
        for reg, mode in get_reg_usage(i):
            if type(reg) is VReg:
                raise AllocationError(f"virtual register {reg} left at {k}: {i}")
            if reg == STATE_REG and _writes(mode):
                raise AllocationError(f"state register overwritten at {k}: {i}")
