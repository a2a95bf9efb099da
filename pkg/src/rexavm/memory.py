"""Code segment, code frames, stacks, and the global word dictionary.

All program memory lives in one byte-addressed code segment (CS) that is
partitioned into dynamically sized code frames.  A frame holds one program's
source text (later overwritten in place with bytecode) plus its embedded
variables and arrays.  There is no heap.  Temporary data lives on three
fixed-size cell stacks: data (DS), return (RS), and loop (FS).
"""

CELL_MIN = -32768
CELL_MAX = 32767
CELL_BITS = 16

# default segment sizes (small embedded profile; all configurable)
CS_SIZE = 1024
DS_SIZE = 256
RS_SIZE = 128
FS_SIZE = 64


def to_cell(v):
    """Wrap an integer into the signed 16-bit cell range."""
    return ((v + 32768) & 0xFFFF) - 32768


def cell_to_u16(v):
    return v & 0xFFFF


def sat_cell(v):
    """Saturate (instead of wrap) into cell range; used by vector kernels."""
    if v > CELL_MAX:
        return CELL_MAX
    if v < CELL_MIN:
        return CELL_MIN
    return v


def double_to_cells(v):
    """Split a signed 32-bit value into (msw, lsw) cells; msw is pushed first."""
    u = v & 0xFFFFFFFF
    return to_cell(u >> 16), to_cell(u & 0xFFFF)


def cells_to_double(msw, lsw):
    u = (cell_to_u16(msw) << 16) | cell_to_u16(lsw)
    return ((u + 0x80000000) & 0xFFFFFFFF) - 0x80000000


class VmError(Exception):
    """Raised by VM internals; carries a predefined exception code."""

    def __init__(self, code, msg=""):
        super().__init__(msg or "vm error %s" % code)
        self.code = code


class OutOfCodeSpace(Exception):
    """Code segment cannot satisfy an allocation (distinct from stack faults)."""


# predefined exception codes; 0 means "no pending exception", user codes >= 16
EXC_TRAP = 1
EXC_STACK = 2
EXC_INTERRUPT = 3
EXC_IO = 4
EXC_TIMEOUT = 5
EXC_DIVBYZERO = 6

EXC_NAMES = {
    "trap": EXC_TRAP,
    "stack": EXC_STACK,
    "interrupt": EXC_INTERRUPT,
    "io": EXC_IO,
    "timeout": EXC_TIMEOUT,
    "divbyzero": EXC_DIVBYZERO,
}


class Stack:
    """Fixed-size cell stack over a shared backing array.

    ``base``/``limit`` bound the partition this stack may use, so several
    tasks can own disjoint windows of one array and a task switch only has
    to swap the ``top`` index.
    """

    def __init__(self, cells, base=0, limit=None):
        self.cells = cells
        self.base = base
        self.limit = len(cells) if limit is None else limit
        self.top = base  # index of the next free slot

    @property
    def depth(self):
        return self.top - self.base

    def push(self, v):
        if self.top >= self.limit:
            raise VmError(EXC_STACK, "stack overflow")
        self.cells[self.top] = ((v + 32768) & 0xFFFF) - 32768
        self.top += 1

    def pop(self):
        if self.top <= self.base:
            raise VmError(EXC_STACK, "stack underflow")
        self.top -= 1
        return self.cells[self.top]

    def peek(self, n=0):
        """Copy of the n-th cell from the top (0 = top)."""
        i = self.top - 1 - n
        if i < self.base:
            raise VmError(EXC_STACK, "stack underflow")
        return self.cells[i]

    def set_top(self, v):
        if self.top <= self.base:
            raise VmError(EXC_STACK, "stack underflow")
        self.cells[self.top - 1] = to_cell(v)

    def push2(self, v):
        """Push a signed 32-bit value as two cells, most significant first."""
        msw, lsw = double_to_cells(v)
        self.push(msw)
        self.push(lsw)

    def pop2(self):
        lsw = self.pop()
        msw = self.pop()
        return cells_to_double(msw, lsw)

    def clear(self):
        self.top = self.base

    def contents(self):
        return list(self.cells[self.base:self.top])


FRAME_SOURCE = "source"
FRAME_COMPILED = "compiled"


class CodeFrame:
    """Descriptor of one dynamically allocated CS region."""

    def __init__(self, start, length, frame_id=0):
        self.id = frame_id
        self.start = start
        self.length = length
        self.state = FRAME_SOURCE
        self.persistent = False
        self.locked = False       # set when a word is exported; never reclaimed
        self.task = None          # owning task id while scheduled
        self.live_tasks = 0       # tasks currently bound to this frame
        self.locals = {}          # name -> ('var'|'array'|'word'|'const', value)
        self.entry = start        # first executable byte after compilation
        self.code_end = start + length  # set by the compiler past the last op

    @property
    def end(self):
        return self.start + self.length

    def contains(self, addr):
        return self.start <= addr < self.end

    def __repr__(self):
        return "<frame %d @%d+%d %s%s%s>" % (
            self.id, self.start, self.length, self.state,
            " locked" if self.locked else "",
            " persistent" if self.persistent else "")


class CodeSegment:
    """Byte-addressed program store partitioned into code frames.

    Allocation is first-fit over a sorted free list; freed gaps are
    coalesced so a same-size alloc after a free deterministically reuses
    the gap.
    """

    def __init__(self, size=CS_SIZE):
        self.size = size
        self.bytes = bytearray(size)
        self.frames = []
        self.free = [[0, size]]  # [start, length], sorted by start
        self.next_frame_id = 1

    def reserve_frame_ids(self, beyond):
        """Keep future frame ids above ``beyond`` (after a state restore)."""
        self.next_frame_id = max(self.next_frame_id, beyond + 1)

    # -- allocation ------------------------------------------------------

    def alloc_frame(self, length):
        if length <= 0:
            raise OutOfCodeSpace("zero-length frame")
        for gap in self.free:
            if gap[1] >= length:
                frame = CodeFrame(gap[0], length, self.next_frame_id)
                self.next_frame_id += 1
                gap[0] += length
                gap[1] -= length
                if gap[1] == 0:
                    self.free.remove(gap)
                self.frames.append(frame)
                return frame
        raise OutOfCodeSpace("no %d contiguous bytes free" % length)

    def free_frame(self, frame, dictionary=None):
        if frame.locked:
            raise OutOfCodeSpace("frame %d is locked (exported words)" % frame.id)
        if frame.persistent:
            raise OutOfCodeSpace("frame %d is persistent" % frame.id)
        if frame.task is not None:
            raise OutOfCodeSpace("frame %d has a live task" % frame.id)
        self.frames.remove(frame)
        self._release(frame.start, frame.length)
        if dictionary is not None:
            dictionary.remove_frame(frame.id)

    def _release(self, start, length):
        if length == 0:
            return
        self.free.append([start, length])
        self.free.sort()
        # coalesce adjacent gaps
        merged = [self.free[0]]
        for gap in self.free[1:]:
            last = merged[-1]
            if last[0] + last[1] == gap[0]:
                last[1] += gap[1]
            else:
                merged.append(gap)
        self.free = merged

    def extend_frame(self, frame, extra):
        """Grow a frame in place; only possible when free space follows it."""
        if extra == 0:
            return
        for gap in self.free:
            if gap[0] == frame.end and gap[1] >= extra:
                gap[0] += extra
                gap[1] -= extra
                if gap[1] == 0:
                    self.free.remove(gap)
                frame.length += extra
                return
        raise OutOfCodeSpace("cannot extend frame %d by %d" % (frame.id, extra))

    def shrink_frame(self, frame, new_length):
        """Return a frame's unused tail to the free pool after compilation."""
        if new_length > frame.length or new_length < 0:
            raise ValueError("bad shrink length")
        tail = frame.length - new_length
        frame.length = new_length
        self._release(frame.end, tail)

    def frame_at(self, addr):
        for frame in self.frames:
            if frame.contains(addr):
                return frame
        return None

    def free_bytes(self):
        return sum(g[1] for g in self.free)

    # -- cell access -----------------------------------------------------

    def read_cell(self, addr):
        if not 0 <= addr <= self.size - 2:
            raise VmError(EXC_TRAP, "CS read out of range: %d" % addr)
        return to_cell(self.bytes[addr] | (self.bytes[addr + 1] << 8))

    def write_cell(self, addr, v):
        if not 0 <= addr <= self.size - 2:
            raise VmError(EXC_TRAP, "CS write out of range: %d" % addr)
        u = cell_to_u16(v)
        self.bytes[addr] = u & 0xFF
        self.bytes[addr + 1] = u >> 8

    def write_text(self, frame, text):
        data = text.encode("ascii")
        if len(data) > frame.length:
            raise OutOfCodeSpace("source longer than frame")
        self.bytes[frame.start:frame.start + len(data)] = data


class Dictionary:
    """Global word dictionary: name -> (frame id, code address).

    Redefinition shadows the previous binding (incremental code updates);
    reclaiming a frame drops its bindings so a lookup never yields an
    address inside freed CS space.
    """

    def __init__(self, capacity=64):
        self.capacity = capacity
        self.bindings = {}  # name -> list of (frame_id, addr), last wins

    def define(self, name, frame_id, addr):
        chain = self.bindings.setdefault(name, [])
        if not chain and len(self.bindings) > self.capacity:
            raise OutOfCodeSpace("dictionary full")
        chain.append((frame_id, addr))

    def lookup(self, name):
        chain = self.bindings.get(name)
        if not chain:
            return None
        return chain[-1][1]

    def lookup_frame(self, name):
        chain = self.bindings.get(name)
        if not chain:
            return None
        return chain[-1][0]

    def remove_frame(self, frame_id):
        for name in list(self.bindings):
            chain = [b for b in self.bindings[name] if b[0] != frame_id]
            if chain:
                self.bindings[name] = chain
            else:
                del self.bindings[name]

    def names(self):
        return list(self.bindings)
