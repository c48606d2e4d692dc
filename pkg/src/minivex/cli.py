"""``minivex`` command-line driver: run, bench and dump."""

from __future__ import annotations

import argparse
import csv
import sys
import time
from dataclasses import replace
from pathlib import Path

from .core import (Config, Dispatcher, make_tool, measure_sizes, single_flag_configs,
                   translate)
from .emit import RelocKind
from .guest import (AssemblyError, DecodeError, ExitReason, GuestMemory, GuestState,
                    assemble, interpret)
from .hostisa import format_instr
from .ir import Const
from .workloads import MEM_SIZE, SUITES, suite

EXIT_OK, EXIT_GUEST, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _int(text: str) -> int:
    return int(text, 0)


def _add_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("optimizations (all on by default)")
    g.add_argument("--no-peephole", dest="peephole", action="store_false")
    g.add_argument("--no-reloc", dest="reloc", action="store_false")
    g.add_argument("--no-ip-opt", dest="ip_opt", action="store_false")
    g.add_argument("--no-movvr", dest="movvr", action="store_false")
    g.add_argument("--no-chaining", dest="chaining", action="store_false")
    g.add_argument("--buggy-eqspill", action="store_true",
                   help="skip spills after modify accesses (regression harness only)")
    p.add_argument("--profile", action="store_true", help="count dispatcher statistics")
    p.add_argument("--tool", choices=("none", "memcount"), default="none")
    p.add_argument("--tt-size", type=_int, default=8192)
    p.add_argument("--timeslice", type=_int, default=100_000)
    p.add_argument("--max-block", type=_int, default=50, help="guest instructions per block")
    p.add_argument("--csv", metavar="PATH")


def _config(args) -> Config:
    if args.tt_size < 8:
        raise UsageError("--tt-size must be at least 8")
    if args.timeslice < 1:
        raise UsageError("--timeslice must be positive")
    return Config(peephole=args.peephole, reloc=args.reloc, ip_opt=args.ip_opt,
                  movvr=args.movvr, chaining=args.chaining, profile=args.profile,
                  buggy_eqspill=args.buggy_eqspill,
                  tool=None if args.tool == "none" else args.tool,
                  tt_size=args.tt_size, timeslice=args.timeslice,
                  max_guest_instrs=args.max_block)


def load_program(path: str) -> bytes:
    """Assemble a text file, or read a raw binary image."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise UsageError(f"cannot read {path}: {e.strerror}") from None
    if path.endswith(".bin"):
        return raw
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        return raw
    return assemble(text)


def _write_csv(path: str, rows: list[dict]):
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


# --------------------------------------------------------------------------
# run


def _savings(stats) -> dict:
    return {
        "saved_ip_opt": 3 * stats.stib + 2 * stats.stiw,
        "saved_reloc": 2 * stats.reloc_sites,
        "saved_movvr": 2 * stats.movvr_eliminated,
    }


def cmd_run(args) -> int:
    cfg = _config(args)
    code = load_program(args.program)
    mem = GuestMemory(max(args.mem_size, len(code)), code)
    st = GuestState()
    d = Dispatcher(mem, cfg)
    t0 = time.perf_counter()
    why = d.run(st, args.fuel)
    wall = time.perf_counter() - t0
    out = [f"exit={why.value}"]
    out += [f"r{k}={v} ({v:#010x})" for k, v in enumerate(st.regs)]
    out.append(f"pc={st.pc:#x} z={st.z} n={st.n}")
    report = {"bytes_emitted": d.stats.bytes_emitted, **_savings(d.stats)}
    if args.sizes:
        sizes = measure_sizes(code, dict.fromkeys(d.translated),
                              single_flag_configs(cfg))
        base = sizes["baseline"]
        for name, size in sizes.items():
            if name != "baseline":
                pct = 100.0 * (size - base) / base if base else 0.0
                report[f"size_{name}"] = f"{size} ({pct:+.2f}%)"
        report["size_baseline"] = base
    stats = d.stats.as_dict()
    if not cfg.profile:
        for k in ("fast_hits", "fast_misses", "blocks_executed", "dispatcher_entries", "hit_rate"):
            stats.pop(k)
    report.update(stats)
    report["wall_s"] = f"{wall:.4f}"
    if d.tool is not None:
        report["tool_reads"] = d.tool.reads
        report["tool_writes"] = d.tool.writes
    out.append("[report]")
    out += [f"{k}={v}" for k, v in report.items()]
    for pc in dict.fromkeys(d.translated) if args.dump_ir or args.dump_host else ():
        trace: dict = {}
        translate(code, pc, cfg, make_tool(cfg.tool), trace)
        if args.dump_ir:
            out += [f"-- IR {pc:#x}", str(trace["ir"]),
                    f"-- IR {pc:#x}, optimized", str(trace["ir_opt2"])]
        if args.dump_host:
            out.append(_emitted_listing(code, pc, cfg, trace["emitted"]))
    print("\n".join(out))
    if args.csv:
        _write_csv(args.csv, [{"exit": why.value, **report}])
    return EXIT_OK if why is ExitReason.HALTED else EXIT_GUEST


# --------------------------------------------------------------------------
# bench


def bench_suite(name: str, size: int | None, base: Config) -> list[dict]:
    """Run one suite under the baseline, each single flag and all flags."""
    w = suite(name, size)
    code = w.code
    if not code:
        return [{"suite": w.name, "config": label, "bytes": 0, "saved": 0, "saved_pct": 0.0,
                 "translations": 0, "blocks": 0, "dispatcher_entries": 0, "hit_rate": 0.0,
                 "chains": 0, "flushes": 0, "time_s": 0.0, "ok": True}
                for label in single_flag_configs(base)]
    ref_mem = GuestMemory(w.mem_size, code)
    ref = GuestState()
    ref_why = interpret(ref, ref_mem, w.fuel)
    rows = []
    base_bytes = None
    for label, cfg in single_flag_configs(replace(base, profile=True)).items():
        mem = GuestMemory(w.mem_size, code)
        st = GuestState()
        d = Dispatcher(mem, cfg)
        t0 = time.perf_counter()
        why = d.run(st, w.fuel)
        wall = time.perf_counter() - t0
        ok = why == ref_why and st.regs == ref.regs and st.pc == ref.pc and mem.data == ref_mem.data
        s = d.stats
        if base_bytes is None:
            base_bytes = s.bytes_emitted
        saved = base_bytes - s.bytes_emitted
        rows.append({
            "suite": w.name, "config": label, "bytes": s.bytes_emitted, "saved": saved,
            "saved_pct": round(100.0 * saved / base_bytes, 3) if base_bytes else 0.0,
            "translations": s.translations, "blocks": s.blocks_executed,
            "dispatcher_entries": s.dispatcher_entries, "hit_rate": round(s.hit_rate, 4),
            "chains": s.chains_made, "flushes": s.sector_flushes,
            "time_s": round(wall, 4), "ok": ok,
        })
    return rows


def cmd_bench(args) -> int:
    cfg = _config(args)
    names = list(SUITES) if args.suite == "all" else [args.suite]
    rows = []
    for name in names:
        rows += bench_suite(name, args.size, cfg)
    cols = ["suite", "config", "bytes", "saved", "saved_pct", "translations", "blocks",
            "dispatcher_entries", "hit_rate", "chains", "flushes", "time_s", "ok"]
    widths = {c: max(len(c), *(len(str(r[c])) for r in rows)) if rows else len(c) for c in cols}
    print("  ".join(c.ljust(widths[c]) for c in cols))
    for r in rows:
        print("  ".join(str(r[c]).ljust(widths[c]) for c in cols))
    for name in dict.fromkeys(r["suite"] for r in rows):
        mine = {r["config"]: r for r in rows if r["suite"] == name}
        singles = sum(mine[f]["saved"] for f in Config.OPT_FLAGS)
        print(f"{name}: all-on saved {mine['all']['saved']} bytes, "
              f"sum of single-flag savings {singles}")
    if args.csv:
        _write_csv(args.csv, rows)
    return EXIT_OK if all(r["ok"] for r in rows) else EXIT_GUEST


# --------------------------------------------------------------------------
# dump


def _host_listing(block) -> str:
    return "\n".join(("" if type(i).__name__ == "Label" else "   ") + format_instr(i)
                     for i in block.instrs)


def _emitted_listing(code, pc, cfg, em=None) -> str:
    from .hostisa import disassemble
    em = em or translate(code, pc, cfg, make_tool(cfg.tool))
    notes = {}
    for r in em.relocs:
        kind = "call" if r.kind is RelocKind.REL_CALL else "jump"
        notes[r.offset - 1] = f"reloc {kind} -> {r.target:#x}"
    for site in em.chain_sites:
        note = f"chain site -> guest {site.target:#x}"
        notes[site.offset] = notes[site.offset] + "; " + note if site.offset in notes else note
    return (f"-- encoded block {pc:#x}: {len(em.code)} bytes, "
            f"{len(em.relocs)} relocs, {len(em.chain_sites)} chain sites\n"
            + disassemble(em.code, em.base, notes))


def cmd_dump(args) -> int:
    cfg = _config(args)
    code = load_program(args.program)
    todo = list(args.pc or [0])
    seen: set = set()
    chunks = []
    while todo and len(seen) < args.blocks:
        pc = todo.pop(0)
        if pc in seen:
            continue
        seen.add(pc)
        trace: dict = {}
        try:
            translate(code, pc, cfg, make_tool(cfg.tool), trace)
        except DecodeError as e:
            chunks.append(f"#### block {pc:#x}: cannot decode ({e})")
            continue
        parts = [f"#### block {pc:#x}",
                 "== IR ==", str(trace["ir"]),
                 "== IR, optimized ==", str(trace["ir_opt"])]
        if cfg.tool:
            parts += ["== IR, instrumented ==", str(trace["ir_instrumented"])]
        parts += ["== IR, post-instrumentation cleanup ==", str(trace["ir_opt2"]),
                  "== IR, trees ==", str(trace["tree"]),
                  "== host, virtual registers ==", _host_listing(trace["host_v"])]
        if cfg.ip_opt:
            parts += ["== host, after pc-store narrowing ==", _host_listing(trace["host_ip"])]
        if cfg.peephole:
            parts += ["== host, after peephole ==", _host_listing(trace["host_peep"])]
        parts += ["== host, allocated ==", _host_listing(trace["host_alloc"]),
                  "== encoded ==", _emitted_listing(code, pc, cfg, trace["emitted"])]
        chunks.append("\n".join(parts))
        ir = trace["tree"]
        succ = [s.target for s in ir.stmts if type(s).__name__ == "Exit"]
        if isinstance(ir.next, Const) and ir.kind != "halt":
            succ.append(ir.next.value)
        todo += succ
    print("\n\n".join(chunks))
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="minivex", description="Toy dynamic binary translator.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a guest program")
    r.add_argument("program")
    r.add_argument("--fuel", type=_int, default=10_000_000)
    r.add_argument("--mem-size", type=_int, default=MEM_SIZE)
    r.add_argument("--sizes", action="store_true",
                   help="also report code size under each single optimization")
    r.add_argument("--dump-ir", action="store_true",
                   help="print the IR of every translated block before and after optimization")
    r.add_argument("--dump-host", action="store_true",
                   help="disassemble every translation, with reloc entries inline")
    _add_flags(r)
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("bench", help="run a benchmark suite under each optimization")
    b.add_argument("suite", choices=[*SUITES, "all"])
    b.add_argument("--size", type=_int, default=None, help="suite scale parameter")
    _add_flags(b)
    b.set_defaults(func=cmd_bench)

    d = sub.add_parser("dump", help="print every pipeline phase for some blocks")
    d.add_argument("program")
    d.add_argument("--pc", type=_int, action="append", help="block entry (repeatable)")
    d.add_argument("--blocks", type=_int, default=1, help="follow static successors up to N blocks")
    _add_flags(d)
    d.set_defaults(func=cmd_dump)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except AssemblyError as e:
        print(f"minivex: assembly error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except UsageError as e:
        print(f"minivex: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
