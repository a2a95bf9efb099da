"""Bytecode interpreter: VM state, dispatch loop, and core word semantics.

The loop (``vmloop``) executes at most ``steps`` instructions or until a
simulated-time deadline passes, an event suspends the task, or an error
terminates it.  Dispatch is a direct table on the opcode.  Time is a
monotonic microsecond counter advanced by a fixed per-instruction cost, so
runs are deterministic and need no wall clock.

A suspended task's resume address is stored negated (pc = -pc); the
scheduler flips it back once the wake condition holds.
"""

from collections import deque

from . import dspml
from .bytecode import TAG_DOUBLE, TAG_SHORT, read_u16
from .compiler import Compiler, tokenize, T_EOF
from .corewords import ADDRESS_TAGS
from .isa import IsaTables
from .memory import (CodeSegment, Dictionary, Stack, VmError,
                     EXC_DIVBYZERO, EXC_INTERRUPT, EXC_IO, EXC_STACK,
                     EXC_TRAP, cells_to_double, to_cell)
from .ios import IosTables

# task states
READY = "ready"
RUNNING = "running"
WAIT_TIME = "waiting-time"
WAIT_EVENT = "waiting-event"
FINISHED = "finished"
ERROR = "error"

# 2-bit task mask classes
MASK_READY = 0b11
MASK_TIMEOUT = 0b01
MASK_EVENT = 0b10

# pc sentinel pushed as the return address of host-initiated word calls
RET_SENTINEL = 0xFFFF

DEFAULT_STEPS = 64
DEFAULT_LONGEST_US = 1000

_default_tables = None


def default_tables():
    global _default_tables
    if _default_tables is None:
        _default_tables = IsaTables.build()
    return _default_tables


class Profile:
    """Execution counters for run-time prediction: per word and per task."""

    def __init__(self):
        self.words = {}   # code addr -> [executions, total steps]
        self.tasks = {}   # task entry addr -> [runs, total steps to suspension]

    def record_word(self, addr, steps):
        rec = self.words.setdefault(addr, [0, 0])
        rec[0] += 1
        rec[1] += steps

    def record_task_run(self, entry, steps):
        rec = self.tasks.setdefault(entry, [0, 0])
        rec[0] += 1
        rec[1] += steps

    def word_estimate(self, addr):
        rec = self.words.get(addr)
        if not rec or rec[0] == 0:
            return None
        return rec[1] / rec[0]

    def snapshot(self):
        return {"words": {k: list(v) for k, v in self.words.items()},
                "tasks": {k: list(v) for k, v in self.tasks.items()}}

    def load(self, data):
        self.words = {int(k): list(v) for k, v in data["words"].items()}
        self.tasks = {int(k): list(v) for k, v in data["tasks"].items()}


class Task:
    def __init__(self, tid, frame, pc, ds, rs, fs, priority=0, deadline=0):
        self.id = tid
        self.frame = frame
        self.pc = pc
        self.ds = ds
        self.rs = rs
        self.fs = fs
        self.priority = priority    # negative = event-based IO task
        self.deadline = deadline    # absolute microseconds, 0 = none
        self.arrival = 0
        self.state = READY
        self.vmerror = None
        self.vmevent = None         # dict describing the wait, see _suspend
        self.exec_frame = frame
        self.entry = pc
        self.catch_point = None     # (pc, rstop) snapshot
        self.pending_exc = 0
        self.handlers = {}
        self.in_handler = False
        self.interrupt_pending = False
        self.call_marks = []        # (word addr, step mark) for profiling
        self.slice_steps = 0
        self.energy_spent = 0.0

    @property
    def is_io_task(self):
        return self.priority < 0


class OutputCollector:
    """Default sink for the multiplexed output stream."""

    def __init__(self):
        self.events = []  # (channel, bytes)

    def __call__(self, channel, data):
        self.events.append((channel, bytes(data)))

    def text(self):
        return b"".join(d for c, d in self.events if c == 1).decode("ascii")

    def values(self):
        out = []
        for c, d in self.events:
            if c == 0:
                for i in range(0, len(d), 2):
                    out.append(to_cell(d[i] | (d[i + 1] << 8)))
        return out


class Vm:
    """One VM instance: code segment, stacks, tasks, IOS, compiler."""

    def __init__(self, cs_size=1024, ds_size=256, rs_size=128, fs_size=64,
                 tables=None, maxtasks=8, core_lookup="pht", t1_us=1,
                 merge_fs=False):
        self.cs = CodeSegment(cs_size)
        self.dictionary = Dictionary()
        self.tables = tables or default_tables()
        wl = self.tables.wordlist
        self.opcode_of_tag = {tag: op for op, tag in enumerate(wl.tags)}
        self.tag_of_opcode = list(wl.tags)
        self.core_lookup = core_lookup
        self.maxtasks = maxtasks
        self.t1 = t1_us
        self.micros = 0
        self.steps_total = 0
        self.profiling = True
        self.profile = Profile()
        self.ios = IosTables()
        self.compiler = Compiler(self)
        self.output_hooks = []
        self.collector = OutputCollector()
        self.output_hooks.append(self.collector)
        self.in_queue = deque()
        self.links = None           # host-installed link adapter
        self.devices = None         # host-simulation hook
        self.taskmask = 0
        self.tasks = [None] * maxtasks
        self.current = None

        self._ds_cells = [0] * ds_size
        self._rs_cells = [0] * rs_size
        self._fs_cells = [0] * fs_size
        self._merge_fs = merge_fs
        self._dispatch = self._build_dispatch()
        self._addr_ops = {self.opcode_of_tag[t] for t in ADDRESS_TAGS}

    # -- ISA plumbing ------------------------------------------------------

    def lookup_core(self, name):
        if self.core_lookup == "lst":
            return self.tables.lst.lookup(name)
        return self.tables.pht.lookup(name)

    def fios_add(self, name, callback, args=0, argsize=2, retsize=0):
        return self.ios.fios_add(name, callback, args, argsize, retsize)

    def dios_add(self, name, data, cells, size=2):
        return self.ios.dios_add(name, data, cells, size)

    def fios_index(self, name):
        return self.ios.fios_index(name)

    def dios_index(self, name):
        return self.ios.dios_index(name)

    # -- output ------------------------------------------------------------

    def emit_output(self, channel, data):
        for hook in self.output_hooks:
            hook(channel, data)

    def hook_output(self, cb):
        self.output_hooks.append(cb)

        def unhook():
            self.output_hooks.remove(cb)
        return unhook

    def print_text(self, text):
        self.emit_output(1, text.encode("ascii"))

    # -- frames and tasks ----------------------------------------------------

    def new_frame(self, text, persistent=False):
        frame = self.cs.alloc_frame(len(text))
        self.cs.write_text(frame, text)
        frame.persistent = persistent
        return frame

    def compile_text(self, text, persistent=False):
        frame = self.new_frame(text, persistent)
        try:
            return self.compiler.compile_frame(frame)
        except Exception:
            frame.persistent = False
            frame.locked = False
            self.cs.free_frame(frame, self.dictionary)
            raise

    def frame_by_id(self, frame_id):
        for frame in self.cs.frames:
            if frame.id == frame_id:
                return frame
        return None

    def _stack_windows(self, slot):
        if self.maxtasks == 1:
            return (Stack(self._ds_cells), Stack(self._rs_cells),
                    Stack(self._fs_cells))
        dsz = len(self._ds_cells) // self.maxtasks
        rsz = len(self._rs_cells) // self.maxtasks
        fsz = len(self._fs_cells) // self.maxtasks
        ds = Stack(self._ds_cells, slot * dsz, (slot + 1) * dsz)
        rs = Stack(self._rs_cells, slot * rsz, (slot + 1) * rsz)
        if self._merge_fs:
            fs = rs
        else:
            fs = Stack(self._fs_cells, slot * fsz, (slot + 1) * fsz)
        return ds, rs, fs

    def spawn(self, addr, priority=0, deadline=0):
        slot = next((i for i, t in enumerate(self.tasks) if t is None), None)
        if slot is None:
            raise VmError(EXC_TRAP, "task table full")
        frame = self.cs.frame_at(addr)
        if frame is None:
            raise VmError(EXC_TRAP, "task address outside any frame")
        ds, rs, fs = self._stack_windows(slot)
        for st in (ds, rs, fs):
            for i in range(st.base, st.limit):
                st.cells[i] = 0
        task = Task(slot, frame, addr, ds, rs, fs, priority, deadline)
        task.arrival = self.micros
        frame.live_tasks += 1
        self.tasks[slot] = task
        self._set_mask(task, MASK_READY)
        return task

    def spawn_frame(self, frame, priority=0, deadline=0):
        task = self.spawn(frame.entry, priority, deadline)
        return task

    def _set_mask(self, task, bits):
        shift = 2 * task.id
        self.taskmask = (self.taskmask & ~(0b11 << shift)) | (bits << shift)

    def mask_bits(self, task):
        return (self.taskmask >> (2 * task.id)) & 0b11

    def finish_task(self, task, error=None):
        task.state = ERROR if error is not None else FINISHED
        task.vmerror = error
        task.vmevent = None
        self._set_mask(task, 0)
        self.tasks[task.id] = None
        frame = task.frame
        frame.live_tasks = max(0, frame.live_tasks - 1)
        if (frame.live_tasks == 0 and not frame.locked
                and not frame.persistent and frame in self.cs.frames):
            self.cs.free_frame(frame, self.dictionary)

    # -- the bytecode loop ---------------------------------------------------

    def vmloop(self, task, steps=DEFAULT_STEPS, longest=DEFAULT_LONGEST_US):
        """Run up to ``steps`` instructions of one task inside ``longest``
        microseconds of simulated time; returns the (possibly negated) pc."""
        deadline = self.micros + longest
        csb = self.cs.bytes
        dispatch = self._dispatch
        task.state = RUNNING
        task.slice_steps = 0
        self.current = task
        t1 = self.t1
        now = self.micros
        step = 0
        code_end = task.frame.code_end
        rs = task.rs
        while step < steps:
            try:
                while step < steps:
                    if now > deadline:
                        break  # time slice exhausted
                    pc = task.pc
                    if pc == code_end and rs.top == rs.base:
                        self.micros = now
                        self._op_end(task, pc)
                        break
                    instr = csb[pc]
                    if instr < TAG_SHORT:
                        self.micros = now
                        task.pc = dispatch[instr](task, pc)
                    elif instr < TAG_DOUBLE:
                        u = ((instr & 0x3F) << 8) | csb[pc + 1]
                        ds = task.ds
                        if ds.top >= ds.limit:
                            raise VmError(EXC_STACK, "stack overflow")
                        ds.cells[ds.top] = u - 0x4000 if u & 0x2000 else u
                        ds.top += 1
                        task.pc = pc + 2
                    else:
                        u = ((instr & 0x3F) << 24) | (csb[pc + 1] << 16) | \
                            (csb[pc + 2] << 8) | csb[pc + 3]
                        if u & 0x20000000:
                            u -= 0x40000000
                        task.ds.push2(u)
                        task.pc = pc + 4
                    step += 1
                    now += t1
                    if task.vmevent is not None:
                        task.pc = -task.pc
                        break
                    if task.state != RUNNING:
                        break
                break
            except VmError as exc:
                step += 1
                now += t1
                self.micros = now
                self.raise_exc(task, exc.code)
                if task.state != RUNNING:
                    break
            except IndexError:
                step += 1
                now += t1
                self.micros = now
                self.raise_exc(task, EXC_TRAP)
                if task.state != RUNNING:
                    break
        self.micros = now
        self.steps_total += step
        task.slice_steps += step
        if task.state == RUNNING:
            task.state = READY
        return task.pc

    def raise_exc(self, task, code):
        """Route an exception to its bound handler and the last catch point;
        unhandled exceptions terminate the task (and its frame)."""
        if task.in_handler or task.catch_point is None:
            self.finish_task(task, error=code)
            return
        cp_pc, cp_rstop = task.catch_point
        task.rs.top = cp_rstop
        task.pending_exc = code
        handler = task.handlers.get(code)
        try:
            if handler is not None:
                task.in_handler = True
                task.rs.push(cp_pc)
                task.pc = handler
            else:
                task.pc = cp_pc
        except VmError:
            self.finish_task(task, error=code)

    def _suspend(self, task, kind, resume_pc, **fields):
        task.vmevent = dict(kind=kind, **fields)
        task.pc = resume_pc
        if kind == "sleep":
            task.state = WAIT_TIME
        elif kind == "yield":
            task.state = READY
        else:
            task.state = WAIT_EVENT
        return resume_pc

    # -- dispatch table -------------------------------------------------------

    def _build_dispatch(self):
        table = []
        for tag in self.tag_of_opcode:
            meth = getattr(self, "_op_" + tag.replace("-", "_").replace("+", "plus")
                           .replace("*", "star").replace("/", "slash"), None)
            table.append(meth or self._op_trap)
        return table

    def _op_trap(self, task, pc):
        raise VmError(EXC_TRAP, "illegal opcode at %d" % pc)

    # stack manipulation

    def _op_dup(self, task, pc):
        ds = task.ds
        top = ds.top
        if top <= ds.base or top >= ds.limit:
            raise VmError(EXC_STACK, "dup needs one cell and head room")
        ds.cells[top] = ds.cells[top - 1]
        ds.top = top + 1
        return pc + 1

    def _op_drop(self, task, pc):
        if task.ds.top <= task.ds.base:
            raise VmError(EXC_STACK, "stack underflow")
        task.ds.top -= 1
        return pc + 1

    def _op_swap(self, task, pc):
        ds = task.ds
        top = ds.top
        if top - 2 < ds.base:
            raise VmError(EXC_STACK, "stack underflow")
        cells = ds.cells
        cells[top - 2], cells[top - 1] = cells[top - 1], cells[top - 2]
        return pc + 1

    def _op_over(self, task, pc):
        ds = task.ds
        top = ds.top
        if top - 2 < ds.base or top >= ds.limit:
            raise VmError(EXC_STACK, "over needs two cells and head room")
        ds.cells[top] = ds.cells[top - 2]
        ds.top = top + 1
        return pc + 1

    def _op_rot(self, task, pc):
        c = task.ds.pop()
        b = task.ds.pop()
        a = task.ds.pop()
        task.ds.push(b)
        task.ds.push(c)
        task.ds.push(a)
        return pc + 1

    def _op_nip(self, task, pc):
        a = task.ds.pop()
        task.ds.pop()
        task.ds.push(a)
        return pc + 1

    def _op_depth(self, task, pc):
        task.ds.push(task.ds.depth)
        return pc + 1

    # arithmetic

    def _binop(self, task, fn):
        b = task.ds.pop()
        a = task.ds.pop()
        task.ds.push(fn(a, b))

    def _op_add(self, task, pc):
        ds = task.ds
        top = ds.top
        if top - 2 < ds.base:
            raise VmError(EXC_STACK, "stack underflow")
        cells = ds.cells
        v = cells[top - 2] + cells[top - 1]
        cells[top - 2] = ((v + 32768) & 0xFFFF) - 32768
        ds.top = top - 1
        return pc + 1

    def _op_sub(self, task, pc):
        ds = task.ds
        top = ds.top
        if top - 2 < ds.base:
            raise VmError(EXC_STACK, "stack underflow")
        cells = ds.cells
        v = cells[top - 2] - cells[top - 1]
        cells[top - 2] = ((v + 32768) & 0xFFFF) - 32768
        ds.top = top - 1
        return pc + 1

    def _op_mul(self, task, pc):
        ds = task.ds
        top = ds.top
        if top - 2 < ds.base:
            raise VmError(EXC_STACK, "stack underflow")
        cells = ds.cells
        v = cells[top - 2] * cells[top - 1]
        cells[top - 2] = ((v + 32768) & 0xFFFF) - 32768
        ds.top = top - 1
        return pc + 1

    @staticmethod
    def _divtrunc(a, b):
        if b == 0:
            raise VmError(EXC_DIVBYZERO)
        q = abs(a) // abs(b)
        return -q if (a < 0) != (b < 0) else q

    def _op_div(self, task, pc):
        self._binop(task, self._divtrunc)
        return pc + 1

    def _op_mod(self, task, pc):
        b = task.ds.pop()
        a = task.ds.pop()
        task.ds.push(a - self._divtrunc(a, b) * b)
        return pc + 1

    def _op_neg(self, task, pc):
        task.ds.push(-task.ds.pop())
        return pc + 1

    def _op_abs(self, task, pc):
        task.ds.push(abs(task.ds.pop()))
        return pc + 1

    def _op_min(self, task, pc):
        self._binop(task, min)
        return pc + 1

    def _op_max(self, task, pc):
        self._binop(task, max)
        return pc + 1

    def _op_inc1(self, task, pc):
        task.ds.push(task.ds.pop() + 1)
        return pc + 1

    def _op_dec1(self, task, pc):
        task.ds.push(task.ds.pop() - 1)
        return pc + 1

    def _op_mul2(self, task, pc):
        task.ds.push(task.ds.pop() * 2)
        return pc + 1

    def _op_div2(self, task, pc):
        task.ds.push(task.ds.pop() >> 1)
        return pc + 1

    # comparison: true = 1, false = 0

    def _op_eq(self, task, pc):
        self._binop(task, lambda a, b: 1 if a == b else 0)
        return pc + 1

    def _op_ne(self, task, pc):
        self._binop(task, lambda a, b: 1 if a != b else 0)
        return pc + 1

    def _op_lt(self, task, pc):
        ds = task.ds
        top = ds.top
        if top - 2 < ds.base:
            raise VmError(EXC_STACK, "stack underflow")
        cells = ds.cells
        cells[top - 2] = 1 if cells[top - 2] < cells[top - 1] else 0
        ds.top = top - 1
        return pc + 1

    def _op_gt(self, task, pc):
        ds = task.ds
        top = ds.top
        if top - 2 < ds.base:
            raise VmError(EXC_STACK, "stack underflow")
        cells = ds.cells
        cells[top - 2] = 1 if cells[top - 2] > cells[top - 1] else 0
        ds.top = top - 1
        return pc + 1

    def _op_le(self, task, pc):
        self._binop(task, lambda a, b: 1 if a <= b else 0)
        return pc + 1

    def _op_ge(self, task, pc):
        self._binop(task, lambda a, b: 1 if a >= b else 0)
        return pc + 1

    def _op_eqz(self, task, pc):
        task.ds.push(1 if task.ds.pop() == 0 else 0)
        return pc + 1

    def _op_ltz(self, task, pc):
        task.ds.push(1 if task.ds.pop() < 0 else 0)
        return pc + 1

    def _op_gtz(self, task, pc):
        task.ds.push(1 if task.ds.pop() > 0 else 0)
        return pc + 1

    # bitwise

    def _op_and(self, task, pc):
        self._binop(task, lambda a, b: (a & 0xFFFF) & (b & 0xFFFF))
        return pc + 1

    def _op_or(self, task, pc):
        self._binop(task, lambda a, b: (a & 0xFFFF) | (b & 0xFFFF))
        return pc + 1

    def _op_xor(self, task, pc):
        self._binop(task, lambda a, b: (a & 0xFFFF) ^ (b & 0xFFFF))
        return pc + 1

    def _op_invert(self, task, pc):
        task.ds.push(~task.ds.pop())
        return pc + 1

    def _op_shl(self, task, pc):
        n = task.ds.pop() & 0x0F
        task.ds.push((task.ds.pop() & 0xFFFF) << n)
        return pc + 1

    def _op_shr(self, task, pc):
        n = task.ds.pop() & 0x0F
        task.ds.push((task.ds.pop() & 0xFFFF) >> n)
        return pc + 1

    # double-cell arithmetic

    def _op_dadd(self, task, pc):
        b = task.ds.pop2()
        a = task.ds.pop2()
        task.ds.push2(a + b)
        return pc + 1

    def _op_dsub(self, task, pc):
        b = task.ds.pop2()
        a = task.ds.pop2()
        task.ds.push2(a - b)
        return pc + 1

    # memory access

    def _frame_of_pc(self, task):
        frame = task.exec_frame
        if not frame.contains(task.pc):
            frame = self.cs.frame_at(task.pc)
            if frame is None:
                raise VmError(EXC_TRAP, "pc outside any frame")
            task.exec_frame = frame
        return frame

    def _check_local(self, task, addr, span=2):
        frame = self._frame_of_pc(task)
        if not (frame.start <= addr and addr + span <= frame.end):
            raise VmError(EXC_TRAP,
                          "address %d outside the running frame" % addr)

    def _op_fetch(self, task, pc):
        addr = task.ds.pop()
        self._check_local(task, addr)
        task.ds.push(self.cs.read_cell(addr))
        return pc + 1

    def _op_store(self, task, pc):
        addr = task.ds.pop()
        v = task.ds.pop()
        self._check_local(task, addr)
        self.cs.write_cell(addr, v)
        return pc + 1

    def _op_addstore(self, task, pc):
        addr = task.ds.pop()
        v = task.ds.pop()
        self._check_local(task, addr)
        self.cs.write_cell(addr, self.cs.read_cell(addr) + v)
        return pc + 1

    def _op_read(self, task, pc):
        entry = self.ios.dios_entry(task.ds.pop())
        index = 0 if entry.cells == 1 else task.ds.pop()
        value = entry.read(index)
        if entry.size == 4:
            task.ds.push2(value)
        else:
            task.ds.push(value)
        return pc + 1

    def _op_write(self, task, pc):
        entry = self.ios.dios_entry(task.ds.pop())
        index = 0 if entry.cells == 1 else task.ds.pop()
        entry.write(index, task.ds.pop())
        return pc + 1

    # softcore stacks over arrays: cell 0 is the live counter

    def vec_view(self, handle):
        """Mutable cell-sequence view over a frame array or DIOS array."""
        if handle < 0:
            entry = self.ios.dios_entry(handle)
            return _DiosView(entry)
        return _CsArrayView(self.cs, handle)

    def _local_view(self, task, handle):
        if handle >= 0:
            frame = self._frame_of_pc(task)
            length = self.cs.read_cell(handle) if frame.contains(handle) else -1
            if length < 0 or handle + 2 + 2 * length > frame.end:
                raise VmError(EXC_TRAP,
                              "array %d outside the running frame" % handle)
        return self.vec_view(handle)

    def _op_spush(self, task, pc):
        view = self._local_view(task, task.ds.pop())
        v = task.ds.pop()
        count = view[0]
        if count + 1 >= len(view):
            raise VmError(EXC_STACK, "softcore stack overflow")
        view[count + 1] = v
        view[0] = count + 1
        return pc + 1

    def _op_spop(self, task, pc):
        view = self._local_view(task, task.ds.pop())
        count = view[0]
        if count < 1:
            raise VmError(EXC_STACK, "softcore stack underflow")
        task.ds.push(view[count])
        view[0] = count - 1
        return pc + 1

    def _op_sget(self, task, pc):
        view = self._local_view(task, task.ds.pop())
        n = task.ds.pop()
        count = view[0]
        if not 1 <= n <= count:
            raise VmError(EXC_STACK, "softcore stack index out of range")
        task.ds.push(view[count - n + 1])
        return pc + 1

    # loops

    def _op_doinit(self, task, pc):
        start = task.ds.pop()
        limit = task.ds.pop()
        task.fs.push(limit)
        task.fs.push(start)
        return pc + 1

    def _op_doloop(self, task, pc):
        fs = task.fs
        top = fs.top
        if top - 2 < fs.base:
            raise VmError(EXC_STACK, "loop stack underflow")
        cells = fs.cells
        count = cells[top - 1] + 1
        if count < cells[top - 2]:
            cells[top - 1] = count
            csb = self.cs.bytes
            return csb[pc + 1] | (csb[pc + 2] << 8)
        fs.top = top - 2
        return pc + 3

    def _op_loopi(self, task, pc):
        fs = task.fs
        if fs.top <= fs.base:
            raise VmError(EXC_STACK, "loop stack underflow")
        ds = task.ds
        if ds.top >= ds.limit:
            raise VmError(EXC_STACK, "stack overflow")
        ds.cells[ds.top] = fs.cells[fs.top - 1]
        ds.top += 1
        return pc + 1

    def _op_loopj(self, task, pc):
        task.ds.push(task.fs.peek(2))
        return pc + 1

    def _op_leave(self, task, pc):
        task.fs.pop()
        task.fs.pop()
        return pc + 1

    # calls, branches, program end

    def _op_call(self, task, pc):
        target = read_u16(self.cs.bytes, pc + 1)
        task.rs.push(pc + 3)
        if self.profiling:
            task.call_marks.append((target, self.steps_total))
        return target

    def _ret(self, task):
        if self.profiling and task.call_marks:
            addr, mark = task.call_marks.pop()
            self.profile.record_word(addr, self.steps_total - mark)
        if task.rs.depth == 0:
            self._op_end(task, task.pc)
            return task.pc
        target = task.rs.pop()
        if target == RET_SENTINEL:
            task.pc = RET_SENTINEL
            return RET_SENTINEL
        return target

    def _op_ret(self, task, pc):
        return self._ret(task)

    def _op_exit(self, task, pc):
        return self._ret(task)

    def _op_branch(self, task, pc):
        csb = self.cs.bytes
        return csb[pc + 1] | (csb[pc + 2] << 8)

    def _op_branchz(self, task, pc):
        ds = task.ds
        if ds.top <= ds.base:
            raise VmError(EXC_STACK, "stack underflow")
        ds.top -= 1
        if ds.cells[ds.top] == 0:
            csb = self.cs.bytes
            return csb[pc + 1] | (csb[pc + 2] << 8)
        return pc + 3

    def _op_end(self, task, pc):
        self.finish_task(task)
        return pc

    # embedded data prefixes: skip over in-place cells

    def _op_c_var(self, task, pc):
        return pc + 3

    def _op_c_array(self, task, pc):
        return pc + 3 + 2 * read_u16(self.cs.bytes, pc + 1)

    # scheduling points

    def _op_yield(self, task, pc):
        return self._suspend(task, "yield", pc + 1)

    def _op_sleep(self, task, pc):
        ms = task.ds.pop()
        return self._suspend(task, "sleep", pc + 1,
                             timeout=self.micros + max(0, ms) * 1000)

    def _op_await(self, task, pc):
        varaddr = task.ds.pop()
        value = task.ds.pop()
        ms = task.ds.pop()
        timeout = self.micros + ms * 1000 if ms > 0 else 0
        return self._suspend(task, "await", pc + 1, guard=(varaddr, value),
                             timeout=timeout)

    def _op_task(self, task, pc):
        addr = task.ds.pop()
        deadline = task.ds.pop()
        priority = task.ds.pop()
        new = self.spawn(addr, priority,
                         self.micros + deadline * 1000 if deadline > 0 else 0)
        task.ds.push(new.id)
        return pc + 1

    # exceptions

    def _op_catch(self, task, pc):
        task.catch_point = (pc, task.rs.top)
        task.in_handler = False
        task.ds.push(task.pending_exc)
        task.pending_exc = 0
        return pc + 1

    def _op_throw(self, task, pc):
        code = task.ds.pop()
        if code != 0:
            raise VmError(code)
        return pc + 1

    def _op_exception(self, task, pc):
        code = task.ds.pop()
        handler = task.ds.pop()
        task.handlers[code] = handler
        return pc + 1

    # streams, links, console

    def _op_out(self, task, pc):
        v = task.ds.pop() & 0xFFFF
        self.emit_output(0, bytes((v & 0xFF, v >> 8)))
        return pc + 1

    def _op_in(self, task, pc):
        return self._suspend(task, "in", pc + 1)

    def _op_send(self, task, pc):
        dst = task.ds.pop()
        value = task.ds.pop()
        if self.links is None:
            raise VmError(EXC_IO, "no communication links configured")
        if self.links.try_send(dst, value):
            return pc + 1
        return self._suspend(task, "send", pc + 1, dst=dst, value=value)

    def _op_sendn(self, task, pc):
        dst = task.ds.pop()
        handle = task.ds.pop()
        offset = task.ds.pop()
        length = task.ds.pop()
        if self.links is None:
            raise VmError(EXC_IO, "no communication links configured")
        view = self.vec_view(handle)
        if offset < 0 or offset + length > len(view):
            raise VmError(EXC_IO, "sendn slice out of bounds")
        values = [view[offset + i] for i in range(length)]
        undelivered = []
        for i, v in enumerate(values):
            if not self.links.try_send(dst, v):
                undelivered = values[i:]
                break
        if undelivered:
            return self._suspend(task, "send-batch", pc + 1, dst=dst,
                                 values=undelivered)
        return pc + 1

    def _op_receive(self, task, pc):
        src = task.ds.pop()
        if self.links is None:
            raise VmError(EXC_IO, "no communication links configured")
        return self._suspend(task, "recv", pc + 1, src=src)

    def _op_dot(self, task, pc):
        self.print_text("%d " % task.ds.pop())
        return pc + 1

    def _op_cr(self, task, pc):
        self.print_text("\n")
        return pc + 1

    def _op_emit(self, task, pc):
        self.print_text(chr(task.ds.pop() & 0xFF))
        return pc + 1

    def _op_prstr(self, task, pc):
        n = self.cs.bytes[pc + 1]
        self.emit_output(1, bytes(self.cs.bytes[pc + 2:pc + 2 + n]))
        return pc + 2 + n

    # vector kernels

    def _op_vecload(self, task, pc):
        dst = self.vec_view(task.ds.pop())
        off = task.ds.pop()
        src = self.vec_view(task.ds.pop())
        if off < 0 or off + len(dst) > len(src):
            raise VmError(EXC_IO, "vecload source smaller than destination")
        for i in range(len(dst)):
            dst[i] = src[off + i]
        return pc + 1

    def _scale_vec(self, handle):
        if handle == 0:
            return None
        return list(self.vec_view(handle))

    def _vec_op(self, task, pc, fn):
        try:
            return fn()
        except dspml.DomainError as exc:
            raise VmError(EXC_IO, str(exc))

    def _op_vecscale(self, task, pc):
        scale = self._scale_vec(task.ds.pop())
        dst = self.vec_view(task.ds.pop())
        src = self.vec_view(task.ds.pop())
        def run():
            out = dspml.vecscale(list(src)[:len(dst)], scale)
            for i, v in enumerate(out):
                dst[i] = v
        self._vec_op(task, pc, run)
        return pc + 1

    def _op_vecadd(self, task, pc):
        return self._elementwise(task, pc, dspml.vecadd)

    def _op_vecmul(self, task, pc):
        return self._elementwise(task, pc, dspml.vecmul)

    def _elementwise(self, task, pc, fn):
        scale = self._scale_vec(task.ds.pop())
        dst = self.vec_view(task.ds.pop())
        b = self.vec_view(task.ds.pop())
        a = self.vec_view(task.ds.pop())
        def run():
            out = fn(list(a), list(b), scale)
            if len(out) != len(dst):
                raise dspml.DomainError("destination length mismatch")
            for i, v in enumerate(out):
                dst[i] = v
        self._vec_op(task, pc, run)
        return pc + 1

    def _op_vecfold(self, task, pc):
        scale = self._scale_vec(task.ds.pop())
        dst = self.vec_view(task.ds.pop())
        wgt = self.vec_view(task.ds.pop())
        src = self.vec_view(task.ds.pop())
        def run():
            out = dspml.vecfold(list(src), list(wgt), len(dst), scale)
            for i, v in enumerate(out):
                dst[i] = v
        self._vec_op(task, pc, run)
        return pc + 1

    def _op_vecmap(self, task, pc):
        scale = self._scale_vec(task.ds.pop())
        func = task.ds.pop()
        dst = self.vec_view(task.ds.pop())
        src = self.vec_view(task.ds.pop())
        fn = self._map_function(task, func)
        def run():
            out = dspml.vecmap(list(src)[:len(dst)], fn, scale)
            for i, v in enumerate(out):
                dst[i] = v
        self._vec_op(task, pc, run)
        return pc + 1

    def _map_function(self, task, func):
        if func < 0:
            entry_idx = -func - 1
            if entry_idx >= len(self.ios.fios):
                raise VmError(EXC_IO, "unknown function handle %d" % func)
            entry = self.ios.fios[entry_idx]

            def call(v):
                return to_cell(entry.callback(v) or 0)
            return call

        def call_word(v):
            return self.call_word(task, func, (v,))
        return call_word

    def _op_dotprod(self, task, pc):
        b = self.vec_view(task.ds.pop())
        a = self.vec_view(task.ds.pop())
        def run():
            task.ds.push2(dspml.dotprod(list(a), list(b)))
        self._vec_op(task, pc, run)
        return pc + 1

    def _op_vecprint(self, task, pc):
        view = self.vec_view(task.ds.pop())
        self.print_text(" ".join(str(v) for v in view) + " ")
        return pc + 1

    # foreign functions / data handles

    def _op_ioscall(self, task, pc):
        index = read_u16(self.cs.bytes, pc + 1)
        try:
            self.ios.invoke(task, index)
        except dspml.DomainError as exc:
            raise VmError(EXC_TRAP, str(exc))
        return pc + 3

    def _op_iosdata(self, task, pc):
        task.ds.push(to_cell(read_u16(self.cs.bytes, pc + 1)))
        return pc + 3

    # tokenizer hook for VM-level compiler experiments

    def _op_token(self, task, pc):
        addr = task.ds.pop()
        frame = self._frame_of_pc(task)
        if not frame.contains(addr):
            raise VmError(EXC_TRAP, "token scan outside the running frame")
        kind, _, start, new_pos = tokenize(self.cs.bytes, addr, frame.end)
        if kind == T_EOF:
            task.ds.push(0)
            task.ds.push(0)
        else:
            task.ds.push(start)
            task.ds.push(new_pos - start)
        return pc + 1

    # -- synchronous word execution (vecmap user functions, host calls) ------

    def call_word(self, task, addr, args=(), max_steps=1_000_000):
        """Execute a word synchronously to completion and return its result.

        Used for vecmap over a user-defined word and for host-initiated
        calls; suspension inside such a word is an error.
        """
        for v in args:
            task.ds.push(v)
        saved_pc = task.pc
        task.rs.push(RET_SENTINEL)
        task.pc = addr
        csb = self.cs.bytes
        dispatch = self._dispatch
        for _ in range(max_steps):
            pc = task.pc
            if pc == RET_SENTINEL:
                break
            instr = csb[pc]
            if instr >= TAG_SHORT:
                if instr >= TAG_DOUBLE:
                    u = ((instr & 0x3F) << 24) | (csb[pc + 1] << 16) | \
                        (csb[pc + 2] << 8) | csb[pc + 3]
                    if u & 0x20000000:
                        u -= 0x40000000
                    task.ds.push2(u)
                    task.pc = pc + 4
                else:
                    u = ((instr & 0x3F) << 8) | csb[pc + 1]
                    if u & 0x2000:
                        u -= 0x4000
                    task.ds.push(u)
                    task.pc = pc + 2
            else:
                task.pc = dispatch[instr](task, pc)
            if task.vmevent is not None:
                task.vmevent = None
                task.pc = saved_pc
                raise VmError(EXC_TRAP, "suspension inside a mapped word")
            if task.state != RUNNING:
                raise VmError(EXC_TRAP, "mapped word terminated the task")
        else:
            task.pc = saved_pc
            raise VmError(EXC_TRAP, "mapped word exceeded its step budget")
        task.pc = saved_pc
        return task.ds.pop()


class _CsArrayView:
    """Cell-sequence view over a length-prefixed array in the code segment."""

    def __init__(self, cs, addr):
        self.cs = cs
        self.addr = addr
        self.length = cs.read_cell(addr)
        if self.length < 0 or addr + 2 + 2 * self.length > cs.size:
            raise VmError(EXC_IO, "bad array handle %d" % addr)

    def __len__(self):
        return self.length

    def _cell_addr(self, i):
        if not 0 <= i < self.length:
            raise VmError(EXC_IO, "array index %d out of bounds" % i)
        return self.addr + 2 + 2 * i

    def __getitem__(self, i):
        return self.cs.read_cell(self._cell_addr(i))

    def __setitem__(self, i, v):
        self.cs.write_cell(self._cell_addr(i), v)

    def __iter__(self):
        for i in range(self.length):
            yield self[i]


class _DiosView:
    def __init__(self, entry):
        self.entry = entry

    def __len__(self):
        return self.entry.cells

    def __getitem__(self, i):
        if not 0 <= i < self.entry.cells:
            raise VmError(EXC_IO, "array index %d out of bounds" % i)
        return self.entry.read(i)

    def __setitem__(self, i, v):
        if not 0 <= i < self.entry.cells:
            raise VmError(EXC_IO, "array index %d out of bounds" % i)
        self.entry.write(i, v)

    def __iter__(self):
        for i in range(self.entry.cells):
            yield self[i]
