"""Input-output system: foreign functions, foreign data, and call gates.

The IOS bridges VM programs to their host.  Registered functions (FIOS)
become callable words; registered host arrays and scalars (DIOS) become
readable and writable through tagged negative handles.  The host drives
the VM through one of two equivalent call gates: an in-process request
function, or a framed message protocol suitable for a serial link.
"""

import struct

from .memory import (EXC_IO, EXC_STACK, VmError, cells_to_double, to_cell)

FIOS_MAX_ARGS = 8


class IosError(Exception):
    pass


class FiosEntry:
    def __init__(self, name, callback, args, argsize, retsize):
        if not 0 <= args <= FIOS_MAX_ARGS:
            raise IosError("argument count out of range")
        if args and argsize not in (1, 2, 4):
            raise IosError("argument size must be 1, 2, or 4 bytes")
        if retsize not in (0, 1, 2, 4):
            raise IosError("return size must be 0..4 bytes")
        self.name = name
        self.callback = callback
        self.args = args
        self.argsize = argsize
        self.retsize = retsize


class DiosEntry:
    def __init__(self, name, data, cells, size):
        if size not in (1, 2, 4):
            raise IosError("cell size must be 1, 2, or 4 bytes")
        if cells < 1:
            raise IosError("need at least one cell")
        self.name = name
        self.data = data
        self.cells = cells
        self.size = size

    def read(self, index):
        if not 0 <= index < self.cells:
            raise VmError(EXC_IO, "%s[%d] out of bounds" % (self.name, index))
        return self.data[index]

    def write(self, index, value):
        if not 0 <= index < self.cells:
            raise VmError(EXC_IO, "%s[%d] out of bounds" % (self.name, index))
        if self.size == 1:
            self.data[index] = value & 0xFF
        elif self.size == 2:
            self.data[index] = to_cell(value)
        else:
            self.data[index] = value


class IosTables:
    """FIOS and DIOS registries; handles are -(index+1) on the stack."""

    def __init__(self):
        self.fios = []
        self.dios = []
        self._fios_names = {}
        self._dios_names = {}

    def fios_add(self, name, callback, args=0, argsize=2, retsize=0):
        if name in self._fios_names:
            raise IosError("foreign function %r already registered" % name)
        entry = FiosEntry(name, callback, args, argsize, retsize)
        self._fios_names[name] = len(self.fios)
        self.fios.append(entry)
        return self._fios_names[name]

    def dios_add(self, name, data, cells, size=2):
        if name in self._dios_names:
            raise IosError("foreign data %r already registered" % name)
        entry = DiosEntry(name, data, cells, size)
        self._dios_names[name] = len(self.dios)
        self.dios.append(entry)
        return self._dios_names[name]

    def fios_index(self, name):
        return self._fios_names.get(name)

    def dios_index(self, name):
        return self._dios_names.get(name)

    def dios_entry(self, handle):
        idx = -handle - 1
        if handle >= 0 or idx >= len(self.dios):
            raise VmError(EXC_IO, "not a registered data handle: %d" % handle)
        return self.dios[idx]

    def invoke(self, task, index):
        """Call a foreign function with stack-passed arguments.

        Arguments are popped last-pushed-first (the last named operand is
        on top); 4-byte values travel as msw/lsw cell pairs.
        """
        if index >= len(self.fios):
            raise VmError(EXC_IO, "foreign function index %d unknown" % index)
        entry = self.fios[index]
        cells_per_arg = 2 if entry.argsize == 4 else 1
        if task.ds.depth < entry.args * cells_per_arg:
            raise VmError(EXC_STACK, "%s needs %d arguments"
                          % (entry.name, entry.args))
        values = []
        for _ in range(entry.args):
            if cells_per_arg == 2:
                lsw = task.ds.pop()
                msw = task.ds.pop()
                values.append(cells_to_double(msw, lsw))
            else:
                values.append(task.ds.pop())
        values.reverse()
        result = entry.callback(*values)
        if entry.retsize == 0:
            return
        if entry.retsize == 4:
            task.ds.push2(0 if result is None else result)
        else:
            task.ds.push(0 if result is None else result)


# ---------------------------------------------------------------------------
# call-gate requests and responses
# ---------------------------------------------------------------------------

REQ_COMPILE = 0x01
REQ_RUN = 0x02
REQ_SPAWN = 0x03
REQ_DIOS_READ = 0x04
REQ_DIOS_WRITE = 0x05
REQ_CHECKPOINT = 0x06
REQ_RESTORE = 0x07
REQ_STATUS = 0x08

RESP_OK = 0x40
RESP_COMPILE_ERROR = 0x41
RESP_VM_ERROR = 0x42
RESP_SUSPENDED = 0x43
RESP_NAK = 0x44
EVT_OUTPUT = 0x60

_REQ_TYPES = (REQ_COMPILE, REQ_RUN, REQ_SPAWN, REQ_DIOS_READ,
              REQ_DIOS_WRITE, REQ_CHECKPOINT, REQ_RESTORE, REQ_STATUS)


class Request:
    def __init__(self, kind, **fields):
        self.kind = kind
        self.fields = fields

    def __getattr__(self, name):
        try:
            return self.fields[name]
        except KeyError:
            raise AttributeError(name)

    def __eq__(self, other):
        return (isinstance(other, Request) and self.kind == other.kind
                and self.fields == other.fields)

    def __repr__(self):
        return "Request(0x%02x, %r)" % (self.kind, self.fields)


class Response:
    def __init__(self, kind, payload=b""):
        self.kind = kind
        self.payload = bytes(payload)

    def __eq__(self, other):
        return (isinstance(other, Response) and self.kind == other.kind
                and self.payload == other.payload)

    def __repr__(self):
        return "Response(0x%02x, %r)" % (self.kind, self.payload)


def ok(payload=b""):
    return Response(RESP_OK, payload)


# ---------------------------------------------------------------------------
# message framing: sync byte, type, little-endian length, payload, checksum
# ---------------------------------------------------------------------------

SYNC = 0xA5
MAX_FRAME_PAYLOAD = 0xFFFF


class FrameError(Exception):
    pass


def _checksum(kind, payload):
    s = kind ^ (len(payload) & 0xFF) ^ (len(payload) >> 8)
    for b in payload:
        s ^= b
    return s


def encode_frame(kind, payload=b""):
    payload = bytes(payload)
    if len(payload) > MAX_FRAME_PAYLOAD:
        raise FrameError("frame payload too large")
    return bytes((SYNC, kind)) + struct.pack("<H", len(payload)) + payload \
        + bytes((_checksum(kind, payload),))


def decode_frame(buf, pos=0):
    """Decode one frame at ``pos``; returns (kind, payload, next_pos)."""
    if len(buf) - pos < 5:
        raise FrameError("truncated frame")
    if buf[pos] != SYNC:
        raise FrameError("bad sync byte 0x%02x" % buf[pos])
    kind = buf[pos + 1]
    (length,) = struct.unpack_from("<H", buf, pos + 2)
    end = pos + 4 + length
    if len(buf) < end + 1:
        raise FrameError("truncated frame payload")
    payload = bytes(buf[pos + 4:end])
    if buf[end] != _checksum(kind, payload):
        raise FrameError("checksum mismatch")
    return kind, payload, end + 1


# -- request/response payload codecs ----------------------------------------

def encode_request(req):
    k = req.kind
    if k == REQ_COMPILE:
        return encode_frame(k, req.text.encode("ascii"))
    if k == REQ_RUN:
        return encode_frame(k, struct.pack("<HI", req.frame_id, req.budget))
    if k == REQ_SPAWN:
        return encode_frame(k, struct.pack("<HhI", req.frame_id,
                                           req.priority, req.deadline))
    if k == REQ_DIOS_READ:
        name = req.name.encode("ascii")
        return encode_frame(k, struct.pack("<H", req.index)
                            + bytes((len(name),)) + name)
    if k == REQ_DIOS_WRITE:
        name = req.name.encode("ascii")
        return encode_frame(k, struct.pack("<Hh", req.index, req.value)
                            + bytes((len(name),)) + name)
    if k in (REQ_CHECKPOINT, REQ_STATUS):
        return encode_frame(k)
    if k == REQ_RESTORE:
        return encode_frame(k, req.blob)
    raise FrameError("unknown request kind 0x%02x" % k)


def decode_request(kind, payload):
    if kind == REQ_COMPILE:
        return Request(kind, text=payload.decode("ascii"))
    if kind == REQ_RUN:
        frame_id, budget = struct.unpack("<HI", payload)
        return Request(kind, frame_id=frame_id, budget=budget)
    if kind == REQ_SPAWN:
        frame_id, priority, deadline = struct.unpack("<HhI", payload)
        return Request(kind, frame_id=frame_id, priority=priority,
                       deadline=deadline)
    if kind == REQ_DIOS_READ:
        (index,) = struct.unpack_from("<H", payload, 0)
        nlen = payload[2]
        return Request(kind, index=index,
                       name=payload[3:3 + nlen].decode("ascii"))
    if kind == REQ_DIOS_WRITE:
        index, value = struct.unpack_from("<Hh", payload, 0)
        nlen = payload[4]
        return Request(kind, index=index, value=value,
                       name=payload[5:5 + nlen].decode("ascii"))
    if kind in (REQ_CHECKPOINT, REQ_STATUS):
        return Request(kind)
    if kind == REQ_RESTORE:
        return Request(kind, blob=payload)
    raise FrameError("unknown request kind 0x%02x" % kind)


def encode_response(resp):
    return encode_frame(resp.kind, resp.payload)


def decode_response(kind, payload):
    return Response(kind, payload)


class MessageGate:
    """Byte-framed wrapper around a shared-state gate.

    Feed it raw frames; it applies each request to the underlying gate and
    returns response frames.  Output produced while a request runs is
    emitted as EVT_OUTPUT frames before the response (channel byte plus
    payload), mirroring what a serial master would observe.
    """

    def __init__(self, gate):
        self.gate = gate

    def handle_bytes(self, data):
        out = bytearray()
        pos = 0
        while pos < len(data):
            try:
                kind, payload, pos = decode_frame(data, pos)
                req = decode_request(kind, payload)
            except FrameError as exc:
                out += encode_frame(RESP_NAK, str(exc).encode("ascii"))
                break
            events = []
            unhook = self.gate.hook_output(
                lambda channel, chunk: events.append((channel, chunk)))
            try:
                resp = self.gate.request(req)
            finally:
                unhook()
            for channel, chunk in events:
                out += encode_frame(EVT_OUTPUT, bytes((channel,)) + chunk)
            out += encode_response(resp)
        return bytes(out)
