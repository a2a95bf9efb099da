"""Command line entry point.

Subcommands: ``repl`` (interactive line-at-a-time frames), ``run`` (script
on a simulated node through the message call gate), ``gen-isa`` (word-list
config to table artifact), ``bench`` (MWPS/MCPS measurement), ``eff``
(normalized efficiency factor), ``checkpoint`` (save / restore runs), and
``serve`` (message gate over stdio or a Unix socket).

The REXA_TABLES environment variable points at a table artifact to use
instead of building tables from the bundled word list.

Exit codes: 0 success, 1 compile error, 2 runtime error, 3 config error.
"""

import argparse
import json
import os
import struct
import sys
import time

from . import ios, scheduler
from .compiler import CompileError
from .hostsim import Node, SignalSource, checkpoint_restore, checkpoint_save
from .interp import Vm
from .isa import IsaTables, load_wordlist
from .scheduler import PowerTrace

EXIT_OK = 0
EXIT_COMPILE = 1
EXIT_RUNTIME = 2
EXIT_CONFIG = 3


def _tables(path=None):
    path = path or os.environ.get("REXA_TABLES")
    if path:
        return IsaTables.load(path)
    return None


def _node_from_config(cfg, tables=None):
    src_cfg = cfg.get("source", {})
    if "trace_csv" in src_cfg:
        source = SignalSource.from_csv(src_cfg["trace_csv"])
    else:
        source = SignalSource(
            kind=src_cfg.get("kind", "sine-burst"),
            amplitude=src_cfg.get("amplitude", 1000),
            periods=src_cfg.get("periods", 8.0),
            burst=src_cfg.get("burst", 256),
            noise=src_cfg.get("noise", 0),
            seed=src_cfg.get("seed", 0))
    power = None
    capacity = 0.0
    drain = 2000.0
    initial = None
    if "power" in cfg:
        pc = cfg["power"]
        capacity = pc.get("capacity_uj", 0.0)
        drain = pc.get("drain_uw", 2000.0)
        initial = pc.get("initial_uj")
        if "trace_csv" in pc:
            power = PowerTrace.from_csv(pc["trace_csv"])
        else:
            power = PowerTrace.constant(pc.get("constant_uw", 0.0))
    node = Node(node_id=cfg.get("id", 0),
                cs_size=cfg.get("cs", 1024), ds_size=cfg.get("ds", 256),
                rs_size=cfg.get("rs", 128), fs_size=cfg.get("fs", 64),
                maxtasks=cfg.get("maxtasks", 8), source=source,
                adc_input=cfg.get("adc_input", "source"), power=power,
                capacity_uj=capacity, initial_uj=initial, drain_uw=drain,
                buffer_cells=cfg.get("buffer_cells", 8192), tables=tables,
                core_lookup=cfg.get("core_lookup", "pht"),
                seed=cfg.get("seed", 0))
    wave = cfg.get("wave")
    if wave == "burst":
        for i in range(len(node.dac.wave)):
            node.dac.wave[i] = source.sample(i)
    elif isinstance(wave, list):
        for i, v in enumerate(wave[:len(node.dac.wave)]):
            node.dac.wave[i] = v
    return node


# ---------------------------------------------------------------------------
# repl
# ---------------------------------------------------------------------------

def cmd_repl(args):
    node = Node(cs_size=args.cs, maxtasks=1, tables=_tables(args.tables))
    vm = node.vm
    unhook = vm.hook_output(lambda ch, d: (
        sys.stdout.write(d.decode("ascii", "replace")) if ch == 1 else
        sys.stdout.write("%d " % struct.unpack("<h", d)[0])))
    print("rexavm repl; 'bye' quits")
    while True:
        try:
            line = input("> ")
        except EOFError:
            break
        line = line.strip()
        if not line:
            continue
        if line == "bye":
            break
        try:
            frame = vm.compile_text(line, persistent=True)
        except CompileError as exc:
            print("compile error at %d: %s" % (exc.pos, exc.msg))
            continue
        task = vm.spawn_frame(frame)
        node.run()
        if task.vmerror is not None:
            print("vm error: exception %d" % task.vmerror)
        sys.stdout.flush()
    unhook()
    return EXIT_OK


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def cmd_run(args):
    try:
        with open(args.script) as fh:
            text = fh.read()
    except OSError as exc:
        print("cannot read script: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG
    cfg = {}
    if args.node:
        try:
            with open(args.node) as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            print("bad node config: %s" % exc, file=sys.stderr)
            return EXIT_CONFIG
    try:
        node = _node_from_config(cfg, tables=_tables(args.tables))
    except Exception as exc:
        print("node setup failed: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG

    gate = node.message_gate()
    stream_values = []

    def drain(raw):
        status = EXIT_OK
        pos = 0
        while pos < len(raw):
            kind, payload, pos = ios.decode_frame(raw, pos)
            if kind == ios.EVT_OUTPUT:
                channel, chunk = payload[0], payload[1:]
                if channel == 1:
                    sys.stdout.write(chunk.decode("ascii", "replace"))
                else:
                    for i in range(0, len(chunk), 2):
                        v = struct.unpack_from("<h", chunk, i)[0]
                        stream_values.append(v)
            elif kind == ios.RESP_COMPILE_ERROR:
                off = struct.unpack_from("<H", payload)[0]
                msg = payload[2:].decode("ascii", "replace")
                print("compile error at %d: %s" % (off, msg), file=sys.stderr)
                status = EXIT_COMPILE
            elif kind == ios.RESP_VM_ERROR:
                code, tid = struct.unpack("<hB", payload)
                print("vm error: exception %d in task %d" % (code, tid),
                      file=sys.stderr)
                status = EXIT_RUNTIME
            elif kind == ios.RESP_NAK:
                print("gate error: %s" % payload.decode("ascii", "replace"),
                      file=sys.stderr)
                status = EXIT_RUNTIME
        return status

    raw = gate.handle_bytes(
        ios.encode_request(ios.Request(ios.REQ_COMPILE, text=text)))
    status = drain(raw)
    if status != EXIT_OK:
        return status
    raw = gate.handle_bytes(ios.encode_request(
        ios.Request(ios.REQ_RUN, frame_id=1, budget=args.slices)))
    status = drain(raw)
    sys.stdout.flush()
    if args.trace:
        os.makedirs(args.trace, exist_ok=True)
        with open(os.path.join(args.trace, "out_stream.csv"), "w") as fh:
            for v in stream_values:
                fh.write("%d\n" % v)
        with open(os.path.join(args.trace, "dac_capture.csv"), "w") as fh:
            for t, v in node.dac.capture:
                fh.write("%d,%d\n" % (t, v))
    return status


# ---------------------------------------------------------------------------
# gen-isa
# ---------------------------------------------------------------------------

def cmd_gen_isa(args):
    try:
        with open(args.config) as fh:
            wordlist = load_wordlist(fh.read())
        tables = IsaTables.build(wordlist)
        tables.save(args.output)
    except Exception as exc:
        print("gen-isa failed: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG
    print("wrote %s: %d words, PHT %d bytes, LST %d bytes (%d slices)"
          % (args.output, len(wordlist), tables.pht.size_bytes(),
             tables.lst.size_bytes(), tables.lst.stats.get("slices", 0)))
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

BENCH_EXEC = ": work 0 4095 0 do i + loop drop ; work end"
BENCH_COMPILE = (
    "var a var b array xs { 1 2 3 4 5 6 7 8 } "
    ": f1 dup * over + swap drop ; "
    ": f2 1 + 2 * 3 - 4 / negate abs ; "
    "1 2 + 3 4 * 5 6 - 7 8 max min a ! b @ drop "
    "10 0 do i 2 mod if 1 else 2 endif drop loop end")


def measure_bench(budget_s=0.3, tables=None):
    """One MWPS/MCPS measurement over a fixed wall-clock budget each."""
    vm = Vm(cs_size=8192, maxtasks=1, tables=tables)
    vm.profiling = False
    frame = vm.compile_text(BENCH_EXEC, persistent=True)
    steps0 = vm.steps_total
    t0 = time.perf_counter()
    while time.perf_counter() - t0 < budget_s:
        task = vm.spawn_frame(frame)
        while task.state not in ("finished", "error"):
            vm.vmloop(task, steps=4096, longest=1 << 30)
    exec_wall = time.perf_counter() - t0
    mwps = (vm.steps_total - steps0) / exec_wall / 1e6

    vm2 = Vm(cs_size=8192, maxtasks=1, tables=tables)
    vm2.profiling = False
    tokens = 0
    t0 = time.perf_counter()
    while time.perf_counter() - t0 < budget_s:
        frame = vm2.compile_text(BENCH_COMPILE)
        tokens += vm2.compiler.tokens_compiled
        frame.persistent = False
        vm2.cs.free_frame(frame, vm2.dictionary)
    comp_wall = time.perf_counter() - t0
    mcps = tokens / comp_wall / 1e6
    return mwps, mcps


def cmd_bench(args):
    tables = _tables(args.tables)
    for i in range(args.runs):
        mwps, mcps = measure_bench(args.seconds, tables)
        print("run %d: MWPS=%.3f MCPS=%.3f ratio=%.1f  "
              "(CS=8192 DS=256 RS=128 FS=64 words=101)"
              % (i + 1, mwps, mcps, mwps / mcps if mcps else float("inf")))
    return EXIT_OK


# ---------------------------------------------------------------------------
# eff
# ---------------------------------------------------------------------------

def efficiency(mips, mem_kb, area_mm2, power_mw):
    """Normalized performance factor: compute times memory over area times
    power."""
    return mips * mem_kb / (area_mm2 * power_mw)


def cmd_eff(args):
    eps = efficiency(args.C, args.M, args.A, args.P)
    print("%g" % eps)
    return EXIT_OK


# ---------------------------------------------------------------------------
# checkpoint
# ---------------------------------------------------------------------------

def cmd_checkpoint(args):
    if args.action == "save":
        if not args.script:
            print("checkpoint save needs --script", file=sys.stderr)
            return EXIT_CONFIG
        with open(args.script) as fh:
            text = fh.read()
        vm = Vm(maxtasks=args.maxtasks, tables=_tables(args.tables))
        try:
            frame = vm.compile_text(text)
        except CompileError as exc:
            print("compile error at %d: %s" % (exc.pos, exc.msg),
                  file=sys.stderr)
            return EXIT_COMPILE
        vm.spawn_frame(frame)
        for _ in range(args.slices):
            if not scheduler.live_tasks(vm):
                break
            (scheduler.schedule_single if vm.maxtasks == 1
             else scheduler.schedule_multi)(vm)
        with open(args.file, "wb") as fh:
            fh.write(checkpoint_save(vm))
        print("saved after %d slices at t=%dus" % (args.slices, vm.micros))
        return EXIT_OK
    try:
        with open(args.file, "rb") as fh:
            vm = checkpoint_restore(fh.read(), tables=_tables(args.tables))
    except Exception as exc:
        print("restore failed: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG
    unhook = vm.hook_output(lambda ch, d: (
        sys.stdout.write(d.decode("ascii", "replace")) if ch == 1 else None))
    scheduler.run(vm)
    unhook()
    errors = [t for t in vm.tasks if t is not None and t.vmerror is not None]
    return EXIT_RUNTIME if errors else EXIT_OK


# ---------------------------------------------------------------------------
# serve
# ---------------------------------------------------------------------------

def cmd_serve(args):
    cfg = {}
    if args.node:
        with open(args.node) as fh:
            cfg = json.load(fh)
    node = _node_from_config(cfg, tables=_tables(args.tables))
    gate = node.message_gate()
    if args.socket:
        import socket
        if os.path.exists(args.socket):
            os.unlink(args.socket)
        srv = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        srv.bind(args.socket)
        srv.listen(1)
        conn, _ = srv.accept()
        try:
            while True:
                data = conn.recv(65536)
                if not data:
                    break
                conn.sendall(gate.handle_bytes(data))
        finally:
            conn.close()
            srv.close()
        return EXIT_OK
    data = sys.stdin.buffer.read()
    sys.stdout.buffer.write(gate.handle_bytes(data))
    sys.stdout.buffer.flush()
    return EXIT_OK


# ---------------------------------------------------------------------------

def main(argv=None):
    parser = argparse.ArgumentParser(prog="rexavm",
                                     description=__doc__.splitlines()[0])
    parser.add_argument("--tables", help="table artifact path "
                        "(default: $REXA_TABLES or built-in word list)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("repl", help="interactive compile-and-run")
    p.add_argument("--cs", type=int, default=4096)
    p.set_defaults(func=cmd_repl)

    p = sub.add_parser("run", help="run a script on a simulated node")
    p.add_argument("script")
    p.add_argument("--node", help="node config JSON")
    p.add_argument("--trace", help="directory for trace files")
    p.add_argument("--slices", type=int, default=0,
                   help="slice budget (0 = run to completion)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("gen-isa", help="generate lookup tables from a "
                       "word-list config")
    p.add_argument("config")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_gen_isa)

    p = sub.add_parser("bench", help="measure MWPS and MCPS")
    p.add_argument("--seconds", type=float, default=0.3)
    p.add_argument("--runs", type=int, default=3)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("eff", help="efficiency factor C*M/(A*P)")
    p.add_argument("C", type=float, help="MIPS")
    p.add_argument("M", type=float, help="memory in kB")
    p.add_argument("A", type=float, help="chip area in mm^2")
    p.add_argument("P", type=float, help="power in mW")
    p.set_defaults(func=cmd_eff)

    p = sub.add_parser("checkpoint", help="save or restore a run")
    p.add_argument("action", choices=("save", "restore"))
    p.add_argument("file")
    p.add_argument("--script", help="program to run before saving")
    p.add_argument("--slices", type=int, default=10)
    p.add_argument("--maxtasks", type=int, default=1)
    p.set_defaults(func=cmd_checkpoint)

    p = sub.add_parser("serve", help="message gate over stdio or a socket")
    p.add_argument("--node", help="node config JSON")
    p.add_argument("--socket", help="Unix socket path (default: stdio)")
    p.set_defaults(func=cmd_serve)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
