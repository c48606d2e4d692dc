"""Final encoding of allocated host code, relocation entries and the relocator."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field, replace

from .hostisa import (ENCODING_TABLE, EXIT_SCRATCH, CALLind, CALLrel, EncodingError, Jcc,
                      JMPind, JMPrel, Label, MOVri, STIb, STIw, VReg, call_scratch,
                      encode_instr, regs_of)

_INT32 = (-(1 << 31), (1 << 31) - 1)


class RelocKind(enum.Enum):
    REL_JUMP = "jump"
    REL_CALL = "call"


class RelocationError(ValueError):
    pass


@dataclass(frozen=True)
class RelocEntry:
    offset: int              # start of the 32-bit relative field
    kind: RelocKind
    target: int              # absolute destination


@dataclass(frozen=True)
class ChainSite:
    """A block-end jump that may later be patched to go straight to the
    successor translation.  ``offset`` is where a 5-byte JMPrel can be
    written; ``transfer`` is the offset of the instruction that actually
    reaches the dispatcher (they differ for the indirect exit form)."""
    offset: int
    transfer: int
    target: int


@dataclass
class EmittedBlock:
    code: bytearray
    base: int
    relocs: list
    chain_sites: list
    offsets: list = field(default_factory=list)    # byte offset of each instruction
    size_stats: dict = field(default_factory=dict)
    entry_pc: int = 0
    icount: int = 0

    def __len__(self):
        return len(self.code)

    def check_relocs(self) -> None:
        for r in self.relocs:
            if r.offset + 4 > len(self.code):
                raise RelocationError(f"reloc field at {r.offset} past block end")
            (d,) = struct.unpack_from("<i", self.code, r.offset)
            if d != r.target - (self.base + r.offset + 4):
                raise RelocationError(f"reloc field at {r.offset} is stale")


def _expand(instrs, use_relocator: bool) -> list:
    """Replace absolute transfers by their register-indirect form when the
    relocator is off."""
    if use_relocator:
        return list(instrs)
    out = []
    for i in instrs:
        t = type(i)
        if t is JMPrel and isinstance(i.target, int):
            out.append(MOVri(EXIT_SCRATCH, i.target))
            out.append(_IndirectExit(JMPind(EXIT_SCRATCH), i.chain))
        elif t is CALLrel and isinstance(i.target, int):
            s = call_scratch(i.nargs)
            out.append(MOVri(s, i.target))
            out.append(CALLind(s, i.nargs))
        else:
            out.append(i)
    return out


@dataclass(frozen=True)
class _IndirectExit:
    jump: JMPind
    chain: int | None


def encode_block(block, base: int = 0, use_relocator: bool = True) -> EmittedBlock:
    """Encode an allocated block for placement at ``base``."""
    instrs = _expand(block.instrs, use_relocator)
    offsets = []
    labels = {}
    pos = 0
    for i in instrs:
        offsets.append(pos)
        if type(i) is Label:
            labels[i.name] = pos
            continue
        pos += ENCODING_TABLE[JMPind] if type(i) is _IndirectExit else ENCODING_TABLE[type(i)]

    code = bytearray()
    relocs = []
    sites = []
    stats = {"stib": 0, "stiw": 0, "reloc_sites": 0, "instrs": 0}
    for k, i in enumerate(instrs):
        t = type(i)
        at = base + offsets[k]
        if t is _IndirectExit:
            if i.chain is not None:
                sites.append(ChainSite(offsets[k - 1], offsets[k], i.chain))
            i = i.jump
            t = JMPind
        for reg in regs_of(i):
            if type(reg) is VReg:
                raise EncodingError(f"unallocated register in {i!r}")
        if t is Label:
            continue
        stats["instrs"] += 1
        if t is JMPrel or t is CALLrel or t is Jcc:
            if isinstance(i.target, str):
                if i.target not in labels:
                    raise EncodingError(f"undefined label {i.target!r}")
                i = type(i)(i.cond, base + labels[i.target]) if t is Jcc \
                    else type(i)(base + labels[i.target])
            elif t is not Jcc:
                relocs.append(RelocEntry(offsets[k] + 1,
                                         RelocKind.REL_JUMP if t is JMPrel else RelocKind.REL_CALL,
                                         i.target))
                stats["reloc_sites"] += 1
                if t is JMPrel and i.chain is not None:
                    sites.append(ChainSite(offsets[k], offsets[k], i.chain))
        elif t is STIb:
            stats["stib"] += 1
        elif t is STIw:
            stats["stiw"] += 1
        code += encode_instr(i, at)
    stats["bytes"] = len(code)
    return EmittedBlock(code, base, relocs, sites, offsets, stats,
                        getattr(block, "entry_pc", 0), getattr(block, "icount", 0))


def relocate(block: EmittedBlock, new_base: int) -> EmittedBlock:
    """Copy of ``block`` with every relocation field re-patched for ``new_base``."""
    block = replace(block, code=bytearray(block.code))
    for r in block.relocs:
        d = r.target - (new_base + r.offset + 4)
        if not _INT32[0] <= d <= _INT32[1]:
            raise RelocationError(f"delta {d} overflows at offset {r.offset}")
        struct.pack_into("<i", block.code, r.offset, d)
    block.base = new_base
    return block
