import pytest
from hypothesis import given, strategies as st

from minivex import layout
from minivex.guest import Cond, GuestMemory
from minivex.hostisa import (ALU_OPS, DISPATCHER_ADDR, ENCODING_TABLE, R, STATE_BASE, STATE_REG,
                             ALUri, ALUrr, CALLind, CALLrel, EncodingError, FlatCode, Jcc, JMPind,
                             JMPrel, LD, MOVri, MOVrr, RELOAD, RET, SPILL, ST, STIb, STIl, STIw,
                             VMState, VReg, decode_instr, disassemble, encode_instr, execute_host,
                             helper_addr)


def test_table_deltas():
    t = ENCODING_TABLE
    assert t[MOVri] + t[JMPind] - t[JMPrel] == 2
    assert t[MOVri] + t[CALLind] - t[CALLrel] == 2
    assert t[STIl] - t[STIb] == 3 and t[STIl] - t[STIw] == 2


def test_ret_is_one_byte():
    assert encode_instr(RET()) == b"\x13"


def test_movri_round_trip():
    code = encode_instr(MOVri(R[0], 0))
    assert len(code) == 5 and decode_instr(code, 0) == (MOVri(R[0], 0), 5)


def test_self_jump_delta():
    code = encode_instr(JMPrel(0x400), 0x400)
    assert int.from_bytes(code[1:], "little", signed=True) == -5


def test_virtual_register_refused():
    with pytest.raises(EncodingError):
        encode_instr(MOVrr(R[0], VReg(1)))


def test_wide_displacement_refused():
    with pytest.raises(EncodingError):
        encode_instr(LD(R[0], R[5], 200))


regs = st.sampled_from(R)
imm32 = st.integers(0, 0xFFFFFFFF)
disp = st.integers(-128, 127)
addr = st.integers(0, 0x7FFF0000)
instrs = st.one_of(
    st.builds(MOVri, regs, imm32),
    st.builds(MOVrr, regs, regs),
    st.builds(ALUrr, st.sampled_from(ALU_OPS), regs, regs),
    st.builds(ALUri, st.sampled_from(ALU_OPS), regs, imm32),
    st.builds(LD, regs, regs, disp),
    st.builds(ST, regs, disp, regs),
    st.builds(STIb, regs, disp, st.integers(0, 0xFF)),
    st.builds(STIw, regs, disp, st.integers(0, 0xFFFF)),
    st.builds(STIl, regs, disp, imm32),
    st.builds(JMPrel, addr),
    st.builds(JMPind, regs),
    st.builds(Jcc, st.sampled_from(list(Cond)), addr),
    st.builds(CALLrel, addr),
    st.builds(CALLind, regs),
    st.just(RET()),
    st.builds(SPILL, st.integers(0, 255), regs),
    st.builds(RELOAD, regs, st.integers(0, 255)),
)


@given(instrs, st.integers(0, 0x7FFF0000))
def test_encode_decode_identity(i, at):
    code = encode_instr(i, at)
    assert len(code) == ENCODING_TABLE[type(i)]
    assert decode_instr(code, 0, at) == (i, len(code))


def _vm(code, base=0x100):
    vm = VMState(GuestMemory(256), FlatCode(b"".join(code), base))
    return vm


def _assemble(instrs, base=0x100):
    out, at = [], base
    for i in instrs:
        b = encode_instr(i, at)
        out.append(b)
        at += len(b)
    return out


def test_execute_returns_from_helper_frame():
    vm = _vm(_assemble([MOVri(R[0], 9), RET()]))
    ex = execute_host(vm, 0x100)
    assert ex.kind == "helper-returned" and vm.r[0] == 9


def test_indirect_exit_reads_guest_pc():
    code = _assemble([STIl(STATE_REG, layout.PC_OFF, 0x44), MOVri(R[4], DISPATCHER_ADDR),
                      JMPind(R[4])])
    ex = execute_host(_vm(code), 0x100)
    assert ex.kind == "dispatcher" and ex.guest_pc == 0x44 and ex.from_addr == 0x100 + 7 + 5


def test_partial_store_over_full_store():
    code = _assemble([STIl(STATE_REG, 0x3C, 0x080483D5), STIb(STATE_REG, 0x3C, 0xE8),
                      JMPrel(DISPATCHER_ADDR)])
    vm = _vm(code)
    before = bytearray(vm.state)
    execute_host(vm, 0x100)
    assert vm.get_slot(0x3C) == 0x080483E8
    assert vm.state[:0x3C] == before[:0x3C]


@given(st.sampled_from([(STIb, 0xFF, 1), (STIw, 0xFFFF, 2)]), st.integers(0, 60),
       st.integers(0, 0xFFFF), st.binary(min_size=64, max_size=64))
def test_partial_stores_touch_only_their_bytes(form, off, imm, init):
    cls, mask, width = form
    vm = _vm(_assemble([cls(STATE_REG, off, imm & mask), JMPrel(DISPATCHER_ADDR)]))
    vm.state[:] = init
    execute_host(vm, 0x100)
    assert vm.state[off: off + width] == (imm & mask).to_bytes(width, "little")
    assert vm.state[:off] == init[:off] and vm.state[off + width:] == init[off + width:]


def test_helper_call_passes_four_args_and_clobbers_caller_saved():
    seen = []
    code = _assemble([MOVri(R[0], 1), MOVri(R[1], 2), MOVri(R[2], 3), MOVri(R[3], 4),
                      CALLrel(helper_addr(0), 4), JMPrel(DISPATCHER_ADDR)])
    vm = _vm(code)
    vm.register_helper(0, lambda *a: seen.append(a), 4)
    assert execute_host(vm, 0x100).kind == "dispatcher"
    assert seen == [(1, 2, 3, 4)]
    assert vm.r[3] == 4 and vm.r[0] != 1


def test_guest_memory_fault_is_flagged():
    code = _assemble([MOVri(R[0], 0xFFFF0000), LD(R[1], R[0], 0)])
    ex = execute_host(_vm(code), 0x100)
    assert ex.kind == "fault" and ex.guest_fault and ex.from_addr == 0x105


def test_bad_opcode_faults():
    ex = execute_host(_vm([b"\xff\xff"]), 0x100)
    assert ex.kind == "fault" and not ex.guest_fault


def test_state_register_holds_state_base():
    assert VMState(GuestMemory(16)).r[5] == STATE_BASE


def test_disassembly_lines_carry_offset_and_length():
    code = b"".join(_assemble([MOVri(R[0], 9), RET()], 0))
    lines = disassemble(code).splitlines()
    assert lines[0].split()[:2] == ["0", "[5]"] and lines[1].split()[:2] == ["5", "[1]"]
