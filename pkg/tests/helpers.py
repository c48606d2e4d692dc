"""Shared corpus and oracle plumbing for the test suite."""

from __future__ import annotations

import itertools
import random
from dataclasses import replace
from pathlib import Path

from minivex.core import Config, Dispatcher
from minivex.guest import GuestMemory, GuestState, assemble, interpret
from minivex.hostisa import (ALU_OPS, ARG_REGS, LD, ST, STATE_REG, ALUri, ALUrr, CALLrel, MOVri,
                             MOVrr, STIb, STIl, VMState, VReg, execute_instrs, helper_addr)
from minivex.isel import HostBlockV
from minivex.workloads import SMALL, SUITES, random_program, suite

PROGRAMS = Path(__file__).resolve().parent.parent / "programs"
MEM = 0x10000
FLAGS = Config.OPT_FLAGS


def corpus_programs() -> dict:
    """name -> (code, fuel, mem_size) for the hand-written programs and the
    small benchmark suites."""
    out = {}
    for p in sorted(PROGRAMS.glob("*.s")):
        out[p.stem] = (assemble(p.read_text()), 100_000, MEM)
    for name in SUITES:
        w = suite(name, SMALL[name])
        out[name] = (w.code, w.fuel, w.mem_size)
    return out


def random_corpus(n: int, seed: int = 2024) -> list:
    rng = random.Random(seed)
    progs = []
    for _ in range(n):
        length = rng.choice([5, 10, 20, 40, 60]) if rng.random() < 0.9 else rng.randint(100, 500)
        progs.append(assemble(random_program(rng, length)))
    return progs


def all_flag_configs(**kw) -> list:
    return [Config(**dict(zip(FLAGS, bits)), **kw)
            for bits in itertools.product((False, True), repeat=len(FLAGS))]


def oracle(code: bytes, fuel: int, mem_size: int = MEM):
    mem = GuestMemory(mem_size, code)
    st = GuestState()
    why = interpret(st, mem, fuel)
    return why, st, mem


def translated(code: bytes, fuel: int, cfg: Config, mem_size: int = MEM, memo=None,
               timeslice=None):
    mem = GuestMemory(mem_size, code)
    st = GuestState()
    d = Dispatcher(mem, cfg, memo=memo)
    why = d.run(st, fuel, timeslice)
    return why, st, mem, d


def same_outcome(a, b) -> bool:
    (wa, sa, ma), (wb, sb, mb) = a[:3], b[:3]
    return wa == wb and sa.regs == sb.regs and sa.pc == sb.pc and \
        (sa.z, sa.n) == (sb.z, sb.n) and ma.data == mb.data


def emitted_bytes(code: bytes, fuel: int, cfg: Config, mem_size: int = MEM, memo=None) -> tuple:
    """(total emitted bytes, dispatcher stats) for one run."""
    _, _, _, d = translated(code, fuel, cfg, mem_size, memo)
    return d.stats.bytes_emitted, d.stats


def single_flag(flag: str, on: bool = True, **kw) -> Config:
    off = Config.all_off(**kw)
    return replace(off, **{flag: on})


# --------------------------------------------------------------------------
# the reload / modify / evict block


def modify_regression_block() -> HostBlockV:
    """v0 is loaded, evicted by five other values, reloaded and modified in
    place, then evicted again before its final read.  The second eviction is
    only correct if the in-place add marked the mapping dirty."""
    v = [VReg(k) for k in range(7)]
    S = STATE_REG
    ins = [LD(v[0], S, 0)] + [LD(v[k], S, 4 * k) for k in range(1, 6)]
    ins += [ALUrr("add", v[k], v[k]) for k in range(1, 6)]
    ins += [ALUri("add", v[0], 1)]
    ins += [LD(v[6], S, 24), ST(S, 24, v[6])]
    ins += [ST(S, 4 * k, v[k]) for k in range(1, 6)]
    ins += [ST(S, 28, v[0])]
    return HostBlockV(ins, 7)


def run_state_block(instrs, seed_values=None) -> bytes:
    """Execute host code over a state block pre-filled with known values."""
    vm = VMState(GuestMemory(64))
    for k, val in enumerate(seed_values or [100 + k for k in range(8)]):
        vm.set_slot(4 * k, val)
    execute_instrs(vm, instrs)
    return bytes(vm.state)


# --------------------------------------------------------------------------
# random virtual-register blocks


def random_vblock(rng: random.Random, length: int = 30, nv: int = 10) -> HostBlockV:
    """Straight-line virtual-register code over the state block, with
    helper calls, that never reads an undefined register."""
    S = STATE_REG
    defined: list = []
    out: list = []
    while len(out) < length:
        k = rng.random()
        v = VReg(rng.randrange(nv))
        if not defined or k < 0.15:
            out.append(MOVri(v, rng.getrandbits(32)))
        elif k < 0.3:
            out.append(LD(v, S, 4 * rng.randrange(8)))
        elif k < 0.45:
            out.append(MOVrr(v, rng.choice(defined)))
        elif k < 0.6 and v in defined:
            out.append(ALUrr(rng.choice(ALU_OPS[:5]), v, rng.choice(defined)))
        elif k < 0.7 and v in defined:
            out.append(ALUri(rng.choice(ALU_OPS[:5]), v, rng.getrandbits(8)))
        elif k < 0.85:
            out.append(ST(S, 4 * rng.randrange(8), rng.choice(defined)))
        elif k < 0.9:
            out.append((STIb if rng.random() < 0.5 else STIl)(S, 4 * rng.randrange(8),
                                                               rng.getrandbits(8)))
        else:
            n = rng.randint(1, 4)
            for a in range(n):
                out.append(MOVrr(ARG_REGS[a], rng.choice(defined)))
            out.append(CALLrel(helper_addr(n), n))
            continue
        if type(out[-1]) in (MOVri, LD, MOVrr) and v not in defined:
            defined.append(v)
    return HostBlockV(out, nv)


def run_with_effects(instrs, seed: int = 7):
    """State block and side-effect log after running ``instrs`` directly."""
    rng = random.Random(seed)
    vm = VMState(GuestMemory(64))
    for k in range(16):
        vm.set_slot(4 * k, rng.getrandbits(32))
    for n in range(1, 5):
        vm.register_helper(n, lambda *a: None, n)
    log = vm.record()
    ex = execute_instrs(vm, instrs)
    return bytes(vm.state), log, ex.kind
