"""Benchmark suites and the random guest-program generator.

Every generated program follows the same conventions so that guest code is
never overwritten: code starts at address 0 and stays below ``DATA_BASE``,
and every store lands in the data area (``r6`` = ``DATA_BASE``) or on the
stack (``r7`` starts at ``STACK_TOP``).
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from .guest import assemble

DATA_BASE = 0x4000
DATA_SIZE = 0x2000
STACK_TOP = 0x7000
MEM_SIZE = 0x10000

ALU = ("add", "sub", "and", "or", "xor")
CONDS = ("jeq", "jne", "jlt", "jge", "jle", "jgt")


@dataclass
class Workload:
    name: str
    source: str
    fuel: int
    mem_size: int = MEM_SIZE

    @property
    def code(self) -> bytes:
        return assemble(self.source)

    def initial_regs(self) -> dict:
        return {6: DATA_BASE, 7: STACK_TOP}


def _prologue() -> list[str]:
    return [f"  movi r6, {DATA_BASE:#x}", f"  movi r7, {STACK_TOP:#x}"]


def bigcode(n: int = 200, seed: int = 1) -> Workload:
    """``n`` chunks of seven straight-line segments, each ending in a jump to
    the next: lots of code, each block executed once."""
    if n <= 0:
        return Workload("bigcode-like(n=0)", "", fuel=0)
    rng = random.Random(seed)
    lines = _prologue()
    seg = 0
    for _ in range(n):
        for _ in range(7):
            lines.append(f"s{seg}:")
            for _ in range(rng.randint(2, 6)):
                rd, rs = rng.randrange(6), rng.randrange(6)
                k = rng.random()
                if k < 0.3:
                    lines.append(f"  movi r{rd}, {rng.randint(-500, 500)}")
                elif k < 0.5:
                    lines.append(f"  load r{rd}, [r6+{4 * rng.randrange(64)}]")
                else:
                    lines.append(f"  {rng.choice(ALU)} r{rd}, r{rs}")
            seg += 1
            lines.append(f"  jmp s{seg}")
    lines.append(f"s{seg}:")
    lines.append("  halt")
    src = "\n".join(lines) + "\n"
    # loads may read code bytes when the program outgrows the data base
    code_bound = 4 * (len(lines) + 1)
    return Workload(f"bigcode-like(n={n})", src, fuel=50 * n + 100,
                    mem_size=MEM_SIZE + (code_bound + 0xFFFF & ~0xFFFF))


def heaplike(iters: int = 200) -> Workload:
    """A bump/free-list allocator driven from a loop: allocate two nodes,
    fill them, link them, free one, repeat."""
    src = f"""
  movi r6, {DATA_BASE:#x}
  movi r7, {STACK_TOP:#x}
  movi r0, 16
  store [r6+0], r0        ; bump pointer (offset into the heap)
  movi r0, 0
  store [r6+4], r0        ; free-list head (0 = empty)
  movi r5, {iters}
loop:
  call alloc
  mov r3, r0
  movi r1, 7
  store [r6+8], r1
  load r1, [r6+8]
  add r1, r5
  call alloc
  mov r4, r0
  mov r2, r6
  add r2, r4
  store [r2+0], r1
  store [r2+4], r3
  mov r2, r6
  add r2, r3
  store [r2+0], r5
  load r1, [r2+0]
  mov r0, r3
  call free
  movi r1, 1
  sub r5, r1
  movi r1, 0
  cmp r5, r1
  jeq done
  jmp loop
done:
  load r0, [r6+0]
  load r1, [r6+4]
  halt

alloc:                    ; r0 <- heap offset of an 8-byte node
  load r0, [r6+4]
  movi r1, 0
  cmp r0, r1
  jeq bump
  mov r2, r6
  add r2, r0
  load r1, [r2+4]
  store [r6+4], r1
  ret
bump:
  load r0, [r6+0]
  movi r1, 8
  mov r2, r0
  add r2, r1
  movi r1, {DATA_SIZE - 64}
  cmp r2, r1
  jlt keep
  movi r2, 16
keep:
  store [r6+0], r2
  ret

free:                     ; push node r0 on the free list
  mov r2, r6
  add r2, r0
  load r1, [r6+4]
  store [r2+4], r1
  store [r6+4], r0
  ret
"""
    return Workload(f"heap-like(iters={iters})", src, fuel=60 * iters + 100)


def looplike(iters: int = 1000) -> Workload:
    """Hot counted loops whose back edges are unconditional jumps."""
    src = f"""
  movi r6, {DATA_BASE:#x}
  movi r7, {STACK_TOP:#x}
  movi r5, {iters}
  movi r0, 0
  movi r3, 1
outer:
  add r0, r5
  store [r6+0], r0
  load r1, [r6+0]
  xor r1, r5
  store [r6+4], r1
  sub r5, r3
  movi r2, 0
  cmp r5, r2
  jeq inner_start
  jmp outer
inner_start:
  movi r5, {max(1, iters // 4)}
inner:
  load r2, [r6+4]
  add r2, r5
  store [r6+8], r2
  sub r5, r3
  movi r4, 0
  cmp r5, r4
  jle end
  jmp inner
end:
  halt
"""
    return Workload(f"loop-like(iters={iters})", src, fuel=20 * iters + 100)


def sarplike(iters: int = 200) -> Workload:
    """Repeated stack-pointer adjustment: frames pushed and popped by hand
    and through nested calls."""
    src = f"""
  movi r6, {DATA_BASE:#x}
  movi r7, {STACK_TOP:#x}
  movi r5, {iters}
  movi r4, 4
  movi r3, 12
loop:
  sub r7, r3
  store [r7+0], r5
  store [r7+4], r4
  store [r7+8], r3
  call f
  load r0, [r7+0]
  load r1, [r7+8]
  add r7, r1
  movi r1, 1
  sub r5, r1
  movi r1, 0
  cmp r5, r1
  jeq done
  jmp loop
done:
  store [r6+0], r0
  halt
f:
  sub r7, r4
  store [r7+0], r5
  call g
  load r2, [r7+0]
  add r7, r4
  ret
g:
  sub r7, r4
  store [r7+0], r2
  load r2, [r7+0]
  add r7, r4
  ret
"""
    return Workload(f"sarp-like(iters={iters})", src, fuel=40 * iters + 100)


SUITES = {
    "bigcode-like": bigcode,
    "heap-like": heaplike,
    "loop-like": looplike,
    "sarp-like": sarplike,
}

SMALL = {"bigcode-like": 12, "heap-like": 30, "loop-like": 60, "sarp-like": 30}


def suite(name: str, size: int | None = None) -> Workload:
    try:
        make = SUITES[name]
    except KeyError:
        raise ValueError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}") from None
    return make() if size is None else make(size)


# --------------------------------------------------------------------------
# random programs


def random_program(rng: random.Random, length: int, subroutines: int = 2) -> str:
    """Assembly for a random terminating-or-not guest program of about
    ``length`` instructions.  Run it with a fuel budget."""
    main_len = max(1, length - 8 * subroutines)
    lines = _prologue()
    labels = [f"L{k}" for k in range(main_len + 1)]

    def body_instr(allow_branch: bool, here: int, limit: int, prefix: str):
        rd, rs = rng.randrange(6), rng.randrange(8)
        k = rng.random()
        if k < 0.18:
            imm = rng.randint(-20000, 20000) if rng.random() < 0.3 else rng.randint(-8, 8)
            return f"movi r{rd}, {imm}"
        if k < 0.28:
            return f"mov r{rd}, r{rs}"
        if k < 0.50:
            return f"{rng.choice(ALU)} r{rd}, r{rs}"
        if k < 0.60:
            return f"load r{rd}, [r6+{4 * rng.randrange(DATA_SIZE // 4 - 2)}]"
        if k < 0.62:
            # arbitrary base: may trap
            return f"load r{rd}, [r{rs}+{rng.randint(-64, 64)}]"
        if k < 0.70:
            return f"store [r6+{4 * rng.randrange(DATA_SIZE // 4 - 2)}], r{rs}"
        if k < 0.78:
            return f"cmp r{rng.randrange(8)}, r{rs}"
        if k < 0.80:
            return "nop"
        if allow_branch and k < 0.92:
            tgt = rng.randrange(limit + 1)
            op = rng.choice(CONDS) if rng.random() < 0.8 else "jmp"
            return f"{op} {prefix}{tgt}"
        if allow_branch and subroutines and k < 0.97:
            return f"call sub{rng.randrange(subroutines)}"
        return f"{rng.choice(ALU)} r{rd}, r{rs}"

    for k in range(main_len):
        lines.append(f"{labels[k]}:")
        lines.append("  " + body_instr(True, k, main_len, "L"))
    lines.append(f"{labels[main_len]}:")
    lines.append("  halt")
    for s in range(subroutines):
        lines.append(f"sub{s}:")
        n = rng.randint(1, 6)
        for k in range(n):
            lines.append(f"S{s}_{k}:")
            ins = body_instr(False, k, n, "")
            if rng.random() < 0.15:
                ins = f"{rng.choice(CONDS)} S{s}_{rng.randint(k + 1, n)}"
            lines.append("  " + ins)
        lines.append(f"S{s}_{n}:")
        lines.append("  ret")
    return "\n".join(lines) + "\n"
