"""Translation table, fast cache, dispatcher loop and block chaining.

Translations live in eight code sectors, each a contiguous arena at its own
host address range.  A block is encoded at base 0 and relocated into its
arena slot on insert.  The dispatcher runs guest code one translation at a
time (or several, once their block-end jumps have been chained together)
until the guest halts, traps, runs out of fuel or uses up its timeslice.
"""

from __future__ import annotations

import enum
import struct
from bisect import bisect_right
from dataclasses import asdict, dataclass, field, replace

from . import layout
from .emit import EmittedBlock, encode_block, relocate
from .guest import (MASK32, NUM_REGS, DecodeError, ExitReason, GuestMemory, GuestState,
                    interpret)
from .hostisa import (JMPrel, HostFault, VMState, _CompiledFetch, decode_instr, encode_instr,
                      execute_host)
from .ir import (MemCount, ToolHooks, build_trees, disassemble_block, instrument,
                 optimize_ir)
from .isel import optimize_ip_stores, select_instructions
from .peephole import run_peephole
from .regalloc import allocate_registers

CODE_BASE = 0x0100_0000
SECTOR_SPAN = 0x0100_0000
NUM_SECTORS = 8
FLUSH_FRACTION = 0.8
FAST_CACHE_BITS = 15
DEFAULT_TT_SIZE = 8192
DEFAULT_TIMESLICE = 100_000


_U32 = struct.Struct("<I")
_I32 = struct.Struct("<i")


class OversizedBlockError(ValueError):
    pass


class DispatchError(RuntimeError):
    """Host code misbehaved in a way no guest program can cause."""


class RunResult(enum.Enum):
    HALTED = "halted"
    TIMESLICE_END = "timeslice-end"
    FUEL_EXHAUSTED = "fuel-exhausted"
    TRAP = "trap"


# --------------------------------------------------------------------------
# configuration and the translation pipeline


@dataclass(frozen=True)
class Config:
    peephole: bool = True
    reloc: bool = True
    ip_opt: bool = True
    movvr: bool = True
    chaining: bool = True
    profile: bool = False
    buggy_eqspill: bool = False
    tool: str | None = None          # None | "memcount"
    tt_size: int = DEFAULT_TT_SIZE
    timeslice: int = DEFAULT_TIMESLICE
    max_guest_instrs: int = 50

    OPT_FLAGS = ("peephole", "reloc", "ip_opt", "movvr", "chaining")

    def with_flags(self, **kw) -> "Config":
        return replace(self, **kw)

    def codegen_key(self) -> tuple:
        """Everything that influences the bytes of a translation."""
        return (self.peephole, self.reloc, self.ip_opt, self.movvr, self.buggy_eqspill,
                self.tool, self.max_guest_instrs)

    @classmethod
    def all_off(cls, **kw) -> "Config":
        return cls(peephole=False, reloc=False, ip_opt=False, movvr=False, chaining=False, **kw)


def make_tool(name: str | None) -> ToolHooks | None:
    if name is None or name == "none":
        return None
    if name == "memcount":
        return MemCount()
    raise ValueError(f"unknown tool {name!r}")


def translate(code, pc: int, cfg: Config, tool: ToolHooks | None = None,
              trace: dict | None = None) -> EmittedBlock:
    """Run the full pipeline for the block at guest ``pc``; the result is
    encoded for base 0.  ``trace`` (if given) collects each phase's output."""
    ir = disassemble_block(code, pc, cfg.max_guest_instrs)
    opt = optimize_ir(ir, cse=True)
    ins = instrument(opt, tool)
    opt2 = optimize_ir(ins, cse=False)
    tree = build_trees(opt2)
    hv = select_instructions(tree)
    hv_ip = optimize_ip_stores(hv) if cfg.ip_opt else hv
    hv_peep = run_peephole(hv_ip) if cfg.peephole else hv_ip
    hr = allocate_registers(hv_peep, movvr=cfg.movvr, buggy_modify=cfg.buggy_eqspill)
    em = encode_block(hr, 0, cfg.reloc)
    st = em.size_stats
    st["identity_moves"] = hr.stats.get("identity_moves", 0)
    st["movvr_eliminated"] = st["identity_moves"] if cfg.movvr else 0
    st["spills"] = hr.stats.get("spills", 0)
    st["reloads"] = hr.stats.get("reloads", 0)
    if trace is not None:
        trace.update(ir=ir, ir_opt=opt, ir_instrumented=ins, ir_opt2=opt2, tree=tree,
                     host_v=hv, host_ip=hv_ip, host_peep=hv_peep, host_alloc=hr, emitted=em)
    return em


# --------------------------------------------------------------------------
# code sectors


class CodeSpace(_CompiledFetch):
    """All sector arenas; this is what the host emulator fetches from."""

    def __init__(self, nsectors: int = NUM_SECTORS):
        self.arenas = [bytearray() for _ in range(nsectors)]
        self._init_cache()

    @staticmethod
    def sector_base(s: int) -> int:
        return CODE_BASE + s * SECTOR_SPAN

    def sector_of(self, addr: int) -> int | None:
        if addr < CODE_BASE:
            return None
        s = (addr - CODE_BASE) // SECTOR_SPAN
        return s if s < len(self.arenas) else None

    def decode_at(self, addr: int):
        s = self.sector_of(addr)
        if s is None:
            raise HostFault(f"fetch outside code space at {addr:#x}")
        arena = self.arenas[s]
        off = addr - self.sector_base(s)
        if off >= len(arena):
            raise HostFault(f"fetch past end of sector {s} at {addr:#x}")
        return decode_instr(arena, off, self.sector_base(s))

    def append(self, s: int, code: bytes) -> int:
        arena = self.arenas[s]
        if len(arena) + len(code) > SECTOR_SPAN:
            raise OversizedBlockError(f"sector {s} code space exhausted")
        addr = self.sector_base(s) + len(arena)
        arena += code
        return addr

    def read(self, addr: int, n: int) -> bytes:
        s = self.sector_of(addr)
        off = addr - self.sector_base(s)
        return bytes(self.arenas[s][off: off + n])

    def patch(self, addr: int, data: bytes):
        s = self.sector_of(addr)
        off = addr - self.sector_base(s)
        self.arenas[s][off: off + len(data)] = data
        self.invalidate(addr, addr + len(data))

    def clear_sector(self, s: int):
        lo = self.sector_base(s)
        hi = lo + len(self.arenas[s])
        self.arenas[s] = bytearray()
        self.invalidate(lo, hi)


# --------------------------------------------------------------------------
# translation table


@dataclass
class TranslationEntry:
    guest_pc: int
    emitted: EmittedBlock
    addr: int = 0
    sector: int = -1
    out_chains: list = field(default_factory=list)    # [(site offset, target pc)]
    epoch: int = 0
    # original bytes of each chain site, keyed by site offset
    site_bytes: dict = field(default_factory=dict)

    @property
    def end(self) -> int:
        return self.addr + len(self.emitted.code)


@dataclass
class DispatchStats:
    fast_hits: int = 0
    fast_misses: int = 0
    translations: int = 0
    chains_made: int = 0
    unchains_done: int = 0
    sector_flushes: int = 0
    blocks_executed: int = 0
    bytes_emitted: int = 0
    reloc_sites: int = 0
    stib: int = 0
    stiw: int = 0
    movvr_eliminated: int = 0
    identity_moves: int = 0
    spills: int = 0
    reloads: int = 0

    @property
    def dispatcher_entries(self) -> int:
        return self.fast_hits + self.fast_misses

    @property
    def hit_rate(self) -> float:
        n = self.fast_hits + self.fast_misses
        return self.fast_hits / n if n else 0.0

    def as_dict(self) -> dict:
        d = asdict(self)
        d["dispatcher_entries"] = self.dispatcher_entries
        d["hit_rate"] = round(self.hit_rate, 6)
        return d

    def add_sizes(self, st: dict):
        self.bytes_emitted += st["bytes"]
        for k in ("reloc_sites", "stib", "stiw", "movvr_eliminated", "identity_moves",
                  "spills", "reloads"):
            setattr(self, k, getattr(self, k) + st.get(k, 0))


class TranslationTable:
    """guest pc -> translation, partitioned into FIFO-managed sectors."""

    def __init__(self, capacity: int = DEFAULT_TT_SIZE, nsectors: int = NUM_SECTORS,
                 stats: DispatchStats | None = None):
        if capacity < nsectors:
            raise ValueError(f"capacity must be at least {nsectors}")
        self.capacity = capacity
        self.nsectors = nsectors
        self.per_sector = capacity // nsectors
        self.threshold = int(capacity * FLUSH_FRACTION)
        self.entries: dict[int, TranslationEntry] = {}
        self.sectors: list[list[TranslationEntry]] = [[] for _ in range(nsectors)]
        self.fill = 0
        self.epoch = 0
        self.code = CodeSpace(nsectors)
        self.stats = stats if stats is not None else DispatchStats()
        self.by_transfer: dict[int, tuple] = {}
        self.flush_log: list[int] = []
        self.on_flush = None           # callback(table, sector, (lo, hi))
        self._starts: list[list[int]] = [[] for _ in range(nsectors)]

    def __len__(self):
        return len(self.entries)

    def __contains__(self, pc):
        return pc in self.entries

    def lookup(self, pc: int) -> TranslationEntry | None:
        return self.entries.get(pc)

    def occupancy(self) -> int:
        return sum(len(s) for s in self.sectors)

    def _oldest_sector(self) -> int:
        for k in range(1, self.nsectors + 1):
            s = (self.fill + k) % self.nsectors
            if self.sectors[s]:
                return s
        return self.fill

    def insert(self, pc: int, emitted: EmittedBlock) -> TranslationEntry:
        """Place a translation (encoded at base 0) into the current fill
        sector, flushing the oldest sector first if the table would go over
        the flush threshold."""
        if pc in self.entries:
            raise ValueError(f"translation for {pc:#x} already present")
        if len(emitted.code) > SECTOR_SPAN:
            raise OversizedBlockError(f"block of {len(emitted.code)} bytes exceeds a sector")
        if len(self.entries) + 1 > self.threshold:
            self.flush_sector(self._oldest_sector())
        if len(self.sectors[self.fill]) >= self.per_sector or \
                len(self.code.arenas[self.fill]) + len(emitted.code) > SECTOR_SPAN:
            self.fill = (self.fill + 1) % self.nsectors
            if self.sectors[self.fill]:
                self.flush_sector(self.fill)
        s = self.fill
        addr = self.code.sector_base(s) + len(self.code.arenas[s])
        placed = relocate(emitted, addr) if addr != emitted.base else emitted
        self.code.append(s, bytes(placed.code))
        self.epoch += 1
        e = TranslationEntry(pc, placed, addr, s, epoch=self.epoch)
        for site in placed.chain_sites:
            e.site_bytes[site.offset] = bytes(placed.code[site.offset: site.transfer + 2
                                                          if site.transfer != site.offset
                                                          else site.offset + 5])
            self.by_transfer[addr + site.transfer] = (e, site)
        self.entries[pc] = e
        self.sectors[s].append(e)
        self._starts[s].append(addr)
        self.stats.translations += 1
        return e

    def entry_at(self, host_addr: int) -> TranslationEntry | None:
        """The resident translation whose code contains ``host_addr``."""
        s = self.code.sector_of(host_addr)
        if s is None:
            return None
        starts = self._starts[s]
        k = bisect_right(starts, host_addr) - 1
        if k < 0:
            return None
        e = self.sectors[s][k]
        return e if e.addr <= host_addr < e.end else None

    def flush_sector(self, s: int):
        gone = self.sectors[s]
        lo = self.code.sector_base(s)
        hi = lo + len(self.code.arenas[s])
        for e in gone:
            del self.entries[e.guest_pc]
            for site in e.emitted.chain_sites:
                self.by_transfer.pop(e.addr + site.transfer, None)
        unchain_for_flush(self, set(id(e) for e in gone), (lo, hi))
        self.sectors[s] = []
        self._starts[s] = []
        self.code.clear_sector(s)
        self.stats.sector_flushes += 1
        self.flush_log.append(s)
        if self.on_flush is not None:
            self.on_flush(self, s, (lo, hi))


def _jmp_bytes(at: int, target: int) -> bytes:
    return encode_instr(JMPrel(target), at)


def chain(tt: TranslationTable, src: TranslationEntry, site, dst: TranslationEntry) -> bool:
    """Patch ``src``'s block-end jump at ``site`` to go directly to ``dst``."""
    at = src.addr + site.offset
    if any(off == site.offset for off, _ in src.out_chains):
        return False
    delta = dst.addr - (at + 5)
    if not -(1 << 31) <= delta < (1 << 31):
        return False
    tt.code.patch(at, _jmp_bytes(at, dst.addr))
    src.out_chains.append((site.offset, dst.guest_pc))
    tt.stats.chains_made += 1
    return True


def unchain_for_flush(tt: TranslationTable, flushed_ids: set, flushed_range: tuple):
    """Restore every chained jump that leads into a flushed translation by
    scanning all resident translations."""
    lo, hi = flushed_range
    for e in tt.entries.values():
        if not e.out_chains:
            continue
        keep = []
        for off, target in e.out_chains:
            at = e.addr + off
            (d,) = struct.unpack_from("<i", tt.code.read(at + 1, 4))
            dest = at + 5 + d
            if lo <= dest < hi:
                tt.code.patch(at, e.site_bytes[off])
                tt.stats.unchains_done += 1
            else:
                keep.append((off, target))
        e.out_chains = keep


def verify_no_stale_chains(tt: TranslationTable, flushed_range: tuple) -> list:
    """Decode every resident translation and list each JMPrel whose target
    lies inside ``flushed_range``.  Empty means sound."""
    lo, hi = flushed_range
    bad = []
    for e in tt.entries.values():
        code = tt.code.read(e.addr, len(e.emitted.code))
        at = 0
        while at < len(code):
            ins, n = decode_instr(code, at, e.addr)
            if type(ins) is JMPrel and lo <= ins.target < hi:
                bad.append((e.guest_pc, e.addr + at, ins.target))
            at += n
    return bad


# --------------------------------------------------------------------------
# fast cache


def fast_hash(pc: int, bits: int = FAST_CACHE_BITS) -> int:
    w = (pc & MASK32) >> 2
    return (w ^ (w >> bits)) & ((1 << bits) - 1)


class FastCache:
    """Direct-mapped guest pc -> host address cache."""

    def __init__(self, bits: int = FAST_CACHE_BITS):
        self.bits = bits
        self.tags: list = [None] * (1 << bits)
        self.addrs: list = [0] * (1 << bits)

    def lookup(self, pc: int) -> int | None:
        k = fast_hash(pc, self.bits)
        return self.addrs[k] if self.tags[k] == pc else None

    def insert(self, pc: int, addr: int):
        k = fast_hash(pc, self.bits)
        self.tags[k] = pc
        self.addrs[k] = addr

    def sweep(self, lo: int, hi: int):
        """Invalidate every slot whose address lies in ``[lo, hi)``."""
        tags, addrs = self.tags, self.addrs
        for k in range(len(tags)):
            if tags[k] is not None and lo <= addrs[k] < hi:
                tags[k] = None


# --------------------------------------------------------------------------
# dispatcher


class Dispatcher:
    """Owns the translation table, the fast cache and the host machine
    state for one guest."""

    def __init__(self, mem: GuestMemory, config: Config | None = None,
                 tool: ToolHooks | None = None, memo: dict | None = None):
        self.mem = mem
        self.cfg = config or Config()
        self.tool = tool if tool is not None else make_tool(self.cfg.tool)
        self.stats = DispatchStats()
        self.tt = TranslationTable(self.cfg.tt_size, stats=self.stats)
        self.fc = FastCache()
        self.memo = memo
        self.translated: list[int] = []      # guest pcs in translation order
        self.vm = VMState(mem, self.tt.code)
        if self.tool is not None:
            for hid, fn in self.tool.helpers().items():
                self.vm.register_helper(hid, fn, 4)
        self.flush_listeners: list = []
        self.tt.on_flush = self._flushed

    def _flushed(self, tt, sector, rng):
        self.fc.sweep(*rng)
        for fn in self.flush_listeners:
            fn(tt, sector, rng)

    # ---- state block <-> GuestState

    def load_state(self, st: GuestState):
        vm = self.vm
        for r in range(NUM_REGS):
            vm.set_slot(layout.reg_offset(r), st.regs[r])
        vm.set_slot(layout.Z_OFF, st.z)
        vm.set_slot(layout.N_OFF, st.n)
        vm.set_slot(layout.HALTED_OFF, int(st.halted))
        vm.set_slot(layout.PC_OFF, st.pc)

    def store_state(self, st: GuestState):
        vm = self.vm
        st.regs[:] = [vm.get_slot(layout.reg_offset(r)) for r in range(NUM_REGS)]
        st.z = vm.get_slot(layout.Z_OFF)
        st.n = vm.get_slot(layout.N_OFF)
        st.halted = bool(vm.get_slot(layout.HALTED_OFF))
        st.pc = vm.get_slot(layout.PC_OFF)

    # ---- translation lookup

    def _translate(self, pc: int) -> TranslationEntry:
        data = self.mem.data
        if self.memo is not None:
            key = (self.cfg.codegen_key(), pc, bytes(data[pc: pc + 4 * self.cfg.max_guest_instrs]))
            em = self.memo.get(key)
            if em is None:
                em = translate(data, pc, self.cfg, self.tool)
                self.memo[key] = em
        else:
            em = translate(data, pc, self.cfg, self.tool)
        self.stats.add_sizes(em.size_stats)
        self.translated.append(pc)
        return self.tt.insert(pc, em)

    def _find(self, pc: int) -> int:
        addr = self.fc.lookup(pc)
        if addr is not None:
            if self.cfg.profile:
                self.stats.fast_hits += 1
            return addr
        if self.cfg.profile:
            self.stats.fast_misses += 1
        e = self.tt.lookup(pc)
        if e is None:
            e = self._translate(pc)
        self.fc.insert(pc, e.addr)
        return e.addr

    # ---- the loop

    def dispatch_run(self, state: GuestState, timeslice: int, fuel: int) -> RunResult:
        """Run ``state`` for at most ``timeslice`` blocks and ``fuel`` guest
        instructions.  ``state`` is updated in place."""
        if timeslice <= 0 or fuel < 0:
            raise ValueError("timeslice must be positive and fuel non-negative")
        vm = self.vm
        sb = vm.state
        rd = _U32.unpack_from
        rds = _I32.unpack_from

        def ss(off, v):
            _U32.pack_into(sb, off, v & MASK32)

        self.load_state(state)
        ss(layout.EVC_OFF, timeslice)
        ss(layout.FUEL_OFF, fuel)
        ss(layout.REFUND_OFF, 0)
        last_from = None
        profile = self.cfg.profile
        chaining = self.cfg.chaining
        try:
            while True:
                if rd(sb, layout.HALTED_OFF)[0]:
                    return RunResult.HALTED
                if rd(sb, layout.FUEL_OFF)[0] == 0:
                    return RunResult.FUEL_EXHAUSTED
                ev0 = rds(sb, layout.EVC_OFF)[0]
                if ev0 <= 0:
                    return RunResult.TIMESLICE_END
                pc = rd(sb, layout.PC_OFF)[0]
                try:
                    addr = self._find(pc)
                except DecodeError:
                    return RunResult.TRAP
                if chaining and last_from is not None:
                    hit = self.tt.by_transfer.get(last_from)
                    if hit is not None and hit[1].target == pc:
                        chain(self.tt, hit[0], hit[1], self.tt.lookup(pc))
                ex = execute_host(vm, addr)
                evc = rds(sb, layout.EVC_OFF)[0]
                if ex.kind != "dispatcher":
                    if ex.kind == "fault" and ex.guest_fault:
                        self._settle_trap(ex.from_addr)
                        if profile:
                            self.stats.blocks_executed += ev0 - evc
                        return RunResult.TRAP
                    raise DispatchError(f"host code failed: {ex}")
                fu = rds(sb, layout.FUEL_OFF)[0]
                if evc < 0:
                    if profile:
                        self.stats.blocks_executed += ev0 - evc - 1
                    last_from = None
                    continue
                if fu < 0:
                    # not enough fuel for the whole block: finish by interpretation
                    ss(layout.FUEL_OFF, fu + rd(sb, layout.REFUND_OFF)[0])
                    ss(layout.REFUND_OFF, 0)
                    ss(layout.EVC_OFF, evc + 1)
                    if profile:
                        self.stats.blocks_executed += ev0 - evc - 1
                    return self._interpret_rest()
                ss(layout.FUEL_OFF, fu + rd(sb, layout.REFUND_OFF)[0])
                ss(layout.REFUND_OFF, 0)
                if profile:
                    self.stats.blocks_executed += ev0 - evc
                last_from = ex.from_addr
        finally:
            self.store_state(state)

    def _settle_trap(self, host_addr: int):
        """Give back the fuel of instructions the faulting block did not retire."""
        e = self.tt.entry_at(host_addr)
        if e is None:
            raise DispatchError(f"fault outside any translation at {host_addr:#x}")
        trap_pc = self.vm.get_slot(layout.PC_OFF)
        retired = (trap_pc - e.guest_pc) // 4
        fu = _signed(self.vm.get_slot(layout.FUEL_OFF))
        self.vm.set_slot(layout.FUEL_OFF, fu + e.emitted.icount - retired)
        self.vm.set_slot(layout.REFUND_OFF, 0)

    def _interpret_rest(self) -> RunResult:
        st = GuestState()
        self.store_state(st)
        fuel = self.vm.get_slot(layout.FUEL_OFF)
        why = interpret(st, self.mem, fuel)
        self.load_state(st)
        # interpretation stops only at halt, trap or an empty tank
        if why is ExitReason.FUEL_EXHAUSTED:
            self.vm.set_slot(layout.FUEL_OFF, 0)
            return RunResult.FUEL_EXHAUSTED
        if why is ExitReason.HALTED:
            return RunResult.HALTED
        return RunResult.TRAP

    def fuel_left(self) -> int:
        return self.vm.get_slot(layout.FUEL_OFF)

    def run(self, state: GuestState, fuel: int, timeslice: int | None = None) -> ExitReason:
        """Run to completion, re-entering the dispatcher after every
        timeslice, as the scheduler would."""
        ts = timeslice or self.cfg.timeslice
        while True:
            r = self.dispatch_run(state, ts, fuel)
            if r is RunResult.TIMESLICE_END:
                fuel = self.fuel_left()
                continue
            return {RunResult.HALTED: ExitReason.HALTED, RunResult.TRAP: ExitReason.TRAP,
                    RunResult.FUEL_EXHAUSTED: ExitReason.FUEL_EXHAUSTED}[r]


def measure_sizes(code, pcs, configs: dict) -> dict:
    """Total emitted bytes for translating every pc in ``pcs`` under each
    named config (translation only, nothing is executed)."""
    out = {}
    for name, cfg in configs.items():
        tool = make_tool(cfg.tool)
        out[name] = sum(len(translate(code, pc, cfg, tool).code) for pc in pcs)
    return out


def single_flag_configs(base: Config | None = None) -> dict:
    """All-off baseline, each optimization alone, and all on."""
    base = base or Config()
    off = replace(base, **{f: False for f in Config.OPT_FLAGS})
    cfgs = {"baseline": off}
    for f in Config.OPT_FLAGS:
        cfgs[f] = replace(off, **{f: True})
    cfgs["all"] = replace(base, **{f: True for f in Config.OPT_FLAGS})
    return cfgs


def _signed(v: int) -> int:
    return v - (1 << 32) if v & 0x80000000 else v


def dispatch_run(mem: GuestMemory, state: GuestState, timeslice: int, fuel: int,
                 config: Config | None = None) -> RunResult:
    """One-shot convenience wrapper around :class:`Dispatcher`."""
    return Dispatcher(mem, config).dispatch_run(state, timeslice, fuel)


def run_program(code: bytes, config: Config | None = None, fuel: int = 1_000_000,
                mem_size: int = 65536, regs: dict | None = None, memo: dict | None = None):
    """Load ``code`` at address 0 and run it to completion.

    Returns ``(exit_reason, state, memory, dispatcher)``.
    """
    mem = GuestMemory.with_program(code, mem_size)
    st = GuestState()
    for r, v in (regs or {}).items():
        st.regs[r] = v & MASK32
    d = Dispatcher(mem, config, memo=memo)
    why = d.run(st, fuel)
    return why, st, mem, d

