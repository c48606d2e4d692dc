import random

import pytest
from hypothesis import given, settings, strategies as st

from minivex.guest import GuestMemory
from minivex.hostisa import (ALLOCATABLE, ARG_REGS, CALLER_SAVED, DISPATCHER_ADDR, LD, R, RELOAD,
                             SPILL, ST, STATE_REG, ALUri, ALUrr, CALLind, CALLrel, JMPind, MOVri,
                             MOVrr, RReg, STIb, VMState, VReg, call_scratch, encode_instr,
                             helper_addr, step_instr)
from minivex.isel import HostBlockV
from minivex.regalloc import (AllocationError, HRMode, allocate_registers, check_allocated,
                              get_reg_usage)

from helpers import modify_regression_block, random_vblock, run_state_block, run_with_effects

v = [VReg(k) for k in range(16)]
S = STATE_REG
Rd, Wr, Md = HRMode.READ, HRMode.WRITE, HRMode.MODIFY


def test_move_usage():
    assert get_reg_usage(MOVrr(v[1], v[2])) == [(v[1], Wr), (v[2], Rd)]


def test_alu_is_modify():
    assert get_reg_usage(ALUri("add", v[4], 1)) == [(v[4], Md)]


def test_call_usage():
    u = dict(get_reg_usage(CALLrel(helper_addr(0), 4)))
    assert u[R[0]] == u[R[1]] == u[R[2]] == Md and u[R[3]] == Rd and u[R[4]] == Wr
    u = dict(get_reg_usage(CALLrel(helper_addr(0), 1)))
    assert u[R[0]] == Md and u[R[1]] == u[R[2]] == Wr


FORMS = [MOVri(R[0], 7), MOVrr(R[0], R[1]), ALUrr("add", R[0], R[1]), ALUri("xor", R[2], 3),
         LD(R[0], S, 4), ST(S, 4, R[1]), STIb(S, 8, 1), SPILL(3, R[1]), RELOAD(R[2], 3),
         JMPind(R[4]), CALLrel(helper_addr(0), 2), CALLind(R[3], 2)]


@pytest.mark.parametrize("ins", FORMS, ids=lambda i: type(i).__name__)
def test_usage_classification_against_execution(ins):
    """Registers classified as read-only keep their value on random inputs;
    registers classified as written or modified are the only ones that change."""
    rng = random.Random(str(ins))
    for _ in range(20):
        vm = VMState(GuestMemory(64))
        vm.register_helper(0, lambda *a: None, 2)
        vals = [rng.getrandbits(32) for _ in range(5)]
        vm.r[:5] = vals
        vm.slots[3] = rng.getrandbits(32)
        step_instr(vm, ins)
        usage = dict(get_reg_usage(ins))
        for r in ALLOCATABLE:
            if vm.r[r.idx] != vals[r.idx]:
                assert usage.get(r) in (Wr, Md), r
            elif usage.get(r) is Rd:
                assert vm.r[r.idx] == vals[r.idx]


def _alloc_equivalent(block, **kw):
    out = allocate_registers(block, **kw)
    check_allocated(out.instrs)
    assert run_with_effects(block.instrs) == run_with_effects(out.instrs)
    return out


def test_no_pressure_no_spills():
    b = HostBlockV([LD(v[0], S, 0), LD(v[1], S, 4), MOVrr(v[2], v[0]), ALUrr("add", v[2], v[1]),
                    ST(S, 8, v[2]), ST(S, 12, v[0]), ST(S, 16, v[1])], 3)
    out = _alloc_equivalent(b)
    assert out.stats["spills"] == out.stats["reloads"] == 0


def test_eight_live_values_spill():
    code = [LD(v[k], S, 4 * k) for k in range(8)] + [ST(S, 4 * k, v[7 - k]) for k in range(8)]
    out = _alloc_equivalent(HostBlockV(code, 8))
    assert out.stats["slots"] >= 3
    assert any(isinstance(i, SPILL) for i in out.instrs)


def test_modify_marks_dirty():
    b = modify_regression_block()
    good = allocate_registers(b)
    bad = allocate_registers(b, buggy_modify=True)
    ref = run_state_block(b.instrs)
    assert run_state_block(good.instrs) == ref
    assert run_state_block(bad.instrs) != ref
    assert good.stats["spills"] > bad.stats["spills"]


def test_identity_move_dropped():
    b = HostBlockV([LD(v[0], S, 0), MOVrr(R[0], v[0]), CALLrel(helper_addr(1), 1)], 1)
    on = allocate_registers(b)
    off = allocate_registers(b, movvr=False)
    assert on.stats["identity_moves"] == 1
    assert MOVrr(R[0], R[0]) in off.instrs and MOVrr(R[0], R[0]) not in on.instrs
    assert len(off.instrs) - len(on.instrs) == 1
    assert run_with_effects(on.instrs) == run_with_effects(off.instrs)


def test_move_from_other_register_kept():
    b = HostBlockV([LD(v[0], S, 0), LD(v[1], S, 4), MOVrr(R[0], v[1]), MOVrr(R[1], v[0]),
                    CALLrel(helper_addr(1), 2)], 2)
    out = allocate_registers(b)
    movs = [i for i in out.instrs if isinstance(i, MOVrr)]
    assert all(m.dst != m.src for m in movs)
    assert run_with_effects(b.instrs) == run_with_effects(out.instrs)


def test_read_before_write_is_rejected():
    with pytest.raises(AllocationError):
        allocate_registers(HostBlockV([ST(S, 0, v[0])], 1))


def test_state_register_never_allocated():
    code = [LD(v[k], S, 4 * k) for k in range(10)] + [ST(S, 4 * k, v[k]) for k in range(10)]
    out = allocate_registers(HostBlockV(code, 10))
    for i in out.instrs:
        for r, m in get_reg_usage(i):
            assert r != S or m is Rd


def test_call_scratch_choice():
    assert [call_scratch(n) for n in range(5)] == [R[2], R[2], R[2], R[3], R[4]]
    assert set(CALLER_SAVED) < set(ARG_REGS)


def strip_identity(instrs):
    return [i for i in instrs if not (isinstance(i, MOVrr) and i.dst == i.src)]


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 10**9))
def test_allocation_equivalent_and_movvr_only_drops_identities(seed):
    rng = random.Random(seed)
    b = random_vblock(rng, length=rng.randint(1, 60), nv=rng.randint(2, 14))
    on = allocate_registers(b)
    off = allocate_registers(b, movvr=False)
    check_allocated(on.instrs)
    assert run_with_effects(b.instrs, seed) == run_with_effects(on.instrs, seed)
    assert strip_identity(off.instrs) == on.instrs
    enc = b"".join(encode_instr(i) for i in strip_identity(off.instrs))
    assert enc == b"".join(encode_instr(i) for i in on.instrs)
    bad = allocate_registers(b, buggy_modify=True)
    assert on.stats["spills"] >= bad.stats["spills"]


def test_exit_sequence_allocates():
    b = HostBlockV([LD(v[0], S, 60), MOVrr(R[4], v[0]), JMPind(R[4])], 1)
    out = allocate_registers(b)
    check_allocated(out.instrs)
    vm = VMState(GuestMemory(16))
    vm.set_slot(60, DISPATCHER_ADDR)
    for i in out.instrs[:-1]:
        step_instr(vm, i)
    assert vm.r[4] == DISPATCHER_ADDR
    assert isinstance(RReg(4), RReg)


def test_redefining_a_resident_vreg_reuses_its_register():
    rng = random.Random(0)
    b = random_vblock(rng, length=rng.randint(1, 60), nv=rng.randint(2, 14))
    out = allocate_registers(b)
    assert run_with_effects(b.instrs) == run_with_effects(out.instrs)
    code = [MOVri(v[0], 1), ST(S, 0, v[0]), MOVri(v[0], 2), ST(S, 4, v[0])]
    out = allocate_registers(HostBlockV(code, 1))
    assert out.instrs == [MOVri(R[0], 1), ST(S, 0, R[0]), MOVri(R[0], 2), ST(S, 4, R[0])]
