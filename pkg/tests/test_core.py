import random
from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from minivex.core import (CODE_BASE, SECTOR_SPAN, Config, Dispatcher, FastCache,
                          OversizedBlockError, RunResult, TranslationTable, chain, dispatch_run,
                          fast_hash, measure_sizes, run_program, single_flag_configs, translate,
                          verify_no_stale_chains)
from minivex.emit import EmittedBlock
from minivex.guest import ExitReason, GuestMemory, GuestState, assemble
from minivex.hostisa import JMPrel, decode_instr
from minivex.workloads import random_program

from helpers import MEM, PROGRAMS, corpus_programs, oracle, same_outcome, translated

LOOP = "top:\nnop\njmp top"


@pytest.fixture(scope="module")
def small_block():
    return translate(assemble("nop\nhalt"), 0, Config())


def test_first_insert_lands_in_sector_zero(small_block):
    tt = TranslationTable(80)
    e = tt.insert(0, small_block)
    assert e.sector == 0 and e.addr == CODE_BASE and tt.lookup(0) is e
    assert tt.flush_log == [] and tt.occupancy() == 1


def test_duplicate_insert_refused(small_block):
    tt = TranslationTable(80)
    tt.insert(0, small_block)
    with pytest.raises(ValueError):
        tt.insert(0, small_block)


def test_flush_starts_past_threshold(small_block):
    tt = TranslationTable(80)
    assert (tt.per_sector, tt.threshold) == (10, 64)
    for k in range(64):
        tt.insert(4 * k, small_block)
    assert tt.flush_log == [] and tt.occupancy() == 64
    tt.insert(4 * 64, small_block)
    # one whole sector of ten went, then the new entry was added
    assert tt.flush_log == [0] and tt.occupancy() == 55
    assert all(tt.lookup(4 * k) is None for k in range(10))


def test_flush_order_is_fifo(small_block):
    tt = TranslationTable(80)
    n = 0
    while len(tt.flush_log) < 9:
        tt.insert(4 * n, small_block)
        n += 1
        assert tt.occupancy() <= tt.threshold
        assert tt.occupancy() == len(tt)
    # first flush at threshold+1, then one every per_sector inserts
    assert n == 65 + 8 * 10
    assert tt.flush_log == [0, 1, 2, 3, 4, 5, 6, 7, 0]


def test_oversized_block_refused(small_block):
    tt = TranslationTable(80)
    big = replace(small_block, code=bytearray(SECTOR_SPAN + 1))
    with pytest.raises(OversizedBlockError):
        tt.insert(0, big)


def test_capacity_below_sector_count_refused():
    with pytest.raises(ValueError):
        TranslationTable(7)


def test_entry_at_finds_containing_block(small_block):
    tt = TranslationTable(80)
    a = tt.insert(0, small_block)
    b = tt.insert(4, small_block)
    assert tt.entry_at(a.addr) is a and tt.entry_at(b.addr + 3) is b
    assert tt.entry_at(b.end) is None and tt.entry_at(0x10) is None


# --------------------------------------------------------------------------
# fast cache


def test_fast_cache_miss_then_hit():
    fc = FastCache(4)
    assert fc.lookup(0x40) is None
    fc.insert(0x40, 0x1234)
    assert fc.lookup(0x40) == 0x1234


def test_fast_cache_collision_evicts():
    fc = FastCache(4)
    a = 0x40
    b = next(p for p in range(a + 4, 1 << 16, 4) if fast_hash(p, 4) == fast_hash(a, 4))
    fc.insert(a, 1)
    fc.insert(b, 2)
    assert fc.lookup(a) is None and fc.lookup(b) == 2


@given(st.integers(0, 0xFFFFFFFF), st.integers(1, 15))
def test_fast_hash_in_range(pc, bits):
    assert 0 <= fast_hash(pc, bits) < 1 << bits


@given(st.lists(st.tuples(st.integers(0, 1 << 12), st.integers(0, 1 << 12)), max_size=40),
       st.integers(0, 1 << 12), st.integers(0, 1 << 12))
def test_sweep_leaves_nothing_in_range(items, lo, hi):
    fc = FastCache(6)
    for pc, addr in items:
        fc.insert(4 * pc, addr)
    before = {pc: fc.lookup(4 * pc) for pc, _ in items}
    fc.sweep(lo, hi)
    for pc, _ in items:
        got = fc.lookup(4 * pc)
        assert got is None or not lo <= got < hi
        assert got is None or got == before[pc]


# --------------------------------------------------------------------------
# dispatcher


def test_straight_line_matches_interpreter():
    code = assemble("movi r0, 5\nmovi r1, 7\nadd r0, r1\nhalt")
    assert same_outcome(translated(code, 100, Config()), oracle(code, 100))


def test_timeslice_bounds_blocks_executed():
    code = assemble(LOOP)
    d = Dispatcher(GuestMemory(MEM, code), Config(profile=True))
    r = d.dispatch_run(GuestState(), 10, 1_000_000)
    assert r is RunResult.TIMESLICE_END and d.stats.blocks_executed == 10


def test_timeslice_without_chaining():
    code = assemble(LOOP)
    d = Dispatcher(GuestMemory(MEM, code), Config(profile=True, chaining=False))
    r = d.dispatch_run(GuestState(), 10, 1_000_000)
    assert r is RunResult.TIMESLICE_END and d.stats.blocks_executed == 10
    assert d.stats.dispatcher_entries == 10


def test_dispatch_run_argument_checks():
    with pytest.raises(ValueError):
        dispatch_run(GuestMemory(MEM, assemble("halt")), GuestState(), 0, 10)


def test_dispatch_run_wrapper_halts():
    st_ = GuestState()
    assert dispatch_run(GuestMemory(MEM, assemble("movi r0, 3\nhalt")), st_, 5, 10) \
        is RunResult.HALTED
    assert st_.regs[0] == 3 and st_.halted


def test_fuel_runs_out_mid_block():
    code = assemble("top:\nnop\nnop\nnop\njmp top")
    for fuel in range(0, 12):
        assert same_outcome(translated(code, fuel, Config()), oracle(code, fuel)), fuel


def test_trap_refunds_fuel():
    code = assemble((PROGRAMS / "trap.s").read_text())
    why, st_, _, d = translated(code, 100, Config())
    w2, s2, _ = oracle(code, 100)
    assert why is ExitReason.TRAP and w2 is ExitReason.TRAP and st_.pc == s2.pc == 8
    # the two instructions before the faulting load are the only ones charged
    assert d.fuel_left() == 100 - 2


def test_decode_error_traps():
    code = assemble("nop\nnop") + bytes([0xFF, 0, 0, 0])
    assert same_outcome(translated(code, 100, Config()), oracle(code, 100))


def test_chaining_reduces_dispatcher_entries():
    code = assemble("movi r0, 0\nmovi r1, 200\nmovi r2, 1\nmovi r3, 0\ntop:\nadd r0, r1\n"
                    "sub r1, r2\ncmp r1, r3\njeq out\njmp top\nout:\nhalt")
    on = translated(code, 10_000, Config(profile=True))
    off = translated(code, 10_000, Config(profile=True, chaining=False))
    assert same_outcome(on, off)
    assert on[3].stats.chains_made >= 1
    assert on[3].stats.dispatcher_entries < off[3].stats.dispatcher_entries
    assert off[3].stats.dispatcher_entries == off[3].stats.blocks_executed


def test_self_loop_chains_to_own_entry():
    code = assemble(LOOP)
    d = Dispatcher(GuestMemory(MEM, code), Config())
    d.dispatch_run(GuestState(), 5, 1_000)
    e = d.tt.lookup(0)
    assert len(e.out_chains) == 1
    off, target = e.out_chains[0]
    ins, _ = decode_instr(d.tt.code.read(e.addr + off, 5), 0, e.addr + off)
    assert target == 0 and ins == JMPrel(e.addr)


def test_chain_is_idempotent():
    code = assemble(LOOP)
    d = Dispatcher(GuestMemory(MEM, code), Config(chaining=False))
    d.dispatch_run(GuestState(), 2, 1_000)
    e = d.tt.lookup(0)
    site = e.emitted.chain_sites[0]
    assert chain(d.tt, e, site, e) is True
    snapshot = d.tt.code.read(e.addr, len(e.emitted.code))
    assert chain(d.tt, e, site, e) is False
    assert d.tt.code.read(e.addr, len(e.emitted.code)) == snapshot
    assert d.stats.chains_made == 1


def _two_block_loop():
    # block a jumps to block b, which jumps back to a
    return assemble("a:\nnop\njmp b\nnop\nb:\nadd r0, r1\njmp a")


def test_flush_restores_chains_into_flushed_sector():
    code = _two_block_loop()
    d = Dispatcher(GuestMemory(MEM, code), Config(tt_size=8))
    assert d.tt.per_sector == 1
    d.dispatch_run(GuestState(), 6, 1_000)
    a, b = d.tt.lookup(0), d.tt.lookup(12)
    assert a.sector != b.sector and a.out_chains and b.out_chains
    (off, _), = a.out_chains
    original = a.site_bytes[off]
    lo, hi = d.tt.code.sector_base(b.sector), b.end
    d.tt.flush_sector(b.sector)
    assert a.out_chains == []
    assert d.tt.code.read(a.addr + off, len(original)) == original
    assert verify_no_stale_chains(d.tt, (lo, hi)) == []
    assert d.fc.lookup(12) is None and d.fc.lookup(0) == a.addr


def test_flush_of_unreferenced_sector_unchains_nothing():
    code = assemble("nop\njmp b\nb:\nhalt")
    d = Dispatcher(GuestMemory(MEM, code), Config(tt_size=8))
    d.run(GuestState(), 100)
    assert d.stats.chains_made == 1
    d.tt.flush_sector(d.tt.lookup(0).sector)
    assert d.stats.unchains_done == 0 and d.tt.lookup(8).out_chains == []


def test_verifier_reports_stale_jump():
    code = _two_block_loop()
    d = Dispatcher(GuestMemory(MEM, code), Config(tt_size=8))
    d.dispatch_run(GuestState(), 6, 1_000)
    b = d.tt.lookup(12)
    assert verify_no_stale_chains(d.tt, (b.addr, b.end)) != []


def test_execution_continues_correctly_across_flushes():
    # a hot two-block loop, then a run of fresh blocks that pushes it out
    tail = "".join(f"c{k}:\nadd r0, r2\njmp c{k + 1}\n" for k in range(10))
    code = assemble("movi r1, 5\nmovi r2, 1\nmovi r3, 0\na:\nsub r1, r2\njmp b\nb:\n"
                    "cmp r1, r3\njeq c0\njmp a\n" + tail + "c10:\nhalt")
    seen = []
    mem = GuestMemory(MEM, code)
    d = Dispatcher(mem, Config(tt_size=8))
    d.flush_listeners.append(lambda tt, s, rng: seen.append(verify_no_stale_chains(tt, rng)))
    st_ = GuestState()
    why = d.run(st_, 10_000, 3)
    assert same_outcome((why, st_, mem), oracle(code, 10_000))
    assert len(seen) >= 3 and all(x == [] for x in seen)
    assert d.stats.unchains_done > 0


def test_memo_reuse_gives_same_result():
    progs = corpus_programs()
    memo = {}
    for name in ("sum10", "fib", "memcpy"):
        code, fuel, size = progs[name]
        a = translated(code, fuel, Config(), size)
        b = translated(code, fuel, Config(), size, memo)
        c = translated(code, fuel, Config(), size, memo)
        assert same_outcome(a, b) and same_outcome(b, c)
        assert a[3].stats.bytes_emitted == c[3].stats.bytes_emitted


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**9), st.integers(1, 7))
def test_random_programs_any_timeslice(seed, ts):
    rng = random.Random(seed)
    code = assemble(random_program(rng, rng.randint(5, 60)))
    mem = GuestMemory(MEM, code)
    st_ = GuestState()
    d = Dispatcher(mem, Config(tt_size=16))
    why = d.run(st_, 2_000, ts)
    assert same_outcome((why, st_, mem), oracle(code, 2_000))


def test_run_program_sets_registers():
    why, st_, _, _ = run_program(assemble("add r0, r1\nhalt"), regs={0: 2, 1: 40})
    assert why is ExitReason.HALTED and st_.regs[0] == 42


def test_single_flag_configs_shape():
    cfgs = single_flag_configs()
    assert list(cfgs) == ["baseline", *Config.OPT_FLAGS, "all"]
    assert not any(getattr(cfgs["baseline"], f) for f in Config.OPT_FLAGS)
    assert all(getattr(cfgs["all"], f) for f in Config.OPT_FLAGS)


def test_measure_sizes_reloc_delta():
    code = assemble(LOOP)
    cfgs = single_flag_configs()
    sizes = measure_sizes(code, [0], cfgs)
    em = translate(code, 0, cfgs["reloc"])
    assert sizes["baseline"] - sizes["reloc"] == 2 * em.size_stats["reloc_sites"]
    assert isinstance(em, EmittedBlock)
