"""Peephole cleanup over virtual-register host code.

Two rewrites driven by a last-use table (the index of the last instruction
that reads *or writes* each virtual register):

* copy coalescing: ``MOVrr vd, vs`` where ``vs`` is last used at the move is
  deleted and later mentions of ``vd`` are renamed to ``vs``;
* dead definitions: a ``MOVri``/``MOVrr``/state ``LD`` at the last use of
  its destination is deleted.

Only last uses are recorded, so ``MOVri v3, 2; MOVri v3, 1; <read v3>``
keeps the first write.  Guest-memory loads are never deleted (they may trap).
"""

from __future__ import annotations

from dataclasses import replace

from .hostisa import STATE_REG, LD, MOVri, MOVrr, VReg, map_regs
from .regalloc import get_reg_usage


def _instrs(block_or_list):
    return block_or_list if isinstance(block_or_list, list) else block_or_list.instrs


def _rebuild(block_or_list, instrs, key, n):
    if isinstance(block_or_list, list):
        return instrs
    stats = dict(block_or_list.stats)
    stats[key] = stats.get(key, 0) + n
    return replace(block_or_list, instrs=instrs, stats=stats)


def collect_liveness(block) -> dict:
    """Map each virtual register to the index of its last mention."""
    last: dict = {}
    for k, i in enumerate(_instrs(block)):
        for reg, _ in get_reg_usage(i):
            if type(reg) is VReg:
                last[reg] = k
    return last


def coalesce_vv_moves(block, lu: dict | None = None):
    """Delete copies out of dying virtual registers (see module docstring).

    Returns the rewritten block (or list, if given a list) and the number of
    moves removed.
    """
    instrs = _instrs(block)
    lu = dict(collect_liveness(instrs) if lu is None else lu)
    rename: dict = {}
    out = []
    removed = 0

    def rn(r):
        return rename.get(r, r)

    for k, i in enumerate(instrs):
        if rename:
            i = map_regs(i, rn)
        if type(i) is MOVrr and type(i.dst) is VReg and type(i.src) is VReg \
                and i.dst != i.src and lu.get(i.src) == k:
            for old in [o for o, n in rename.items() if n == i.dst]:
                rename[old] = i.src
            rename[i.dst] = i.src
            lu[i.src] = lu.get(i.dst, k)
            removed += 1
            continue
        out.append(i)
    return _rebuild(block, out, "peep_coalesced", removed), removed


def eliminate_dead_vreg_stores(block, lu: dict | None = None):
    """Delete side-effect-free writes at the last use of their destination."""
    instrs = _instrs(block)
    lu = collect_liveness(instrs) if lu is None else lu
    out = []
    removed = 0
    for k, i in enumerate(instrs):
        t = type(i)
        if t is MOVri or t is MOVrr or (t is LD and i.base == STATE_REG):
            if type(i.dst) is VReg and lu.get(i.dst) == k:
                removed += 1
                continue
        out.append(i)
    return _rebuild(block, out, "peep_dead", removed), removed


def run_peephole(block):
    """Apply both rewrites until neither changes anything."""
    while True:
        block, c = coalesce_vv_moves(block)
        block, d = eliminate_dead_vreg_stores(block)
        if not (c or d):
            return block
