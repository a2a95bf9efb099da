"""Simulated sensor-node host.

Provides everything a real node's firmware would hand the VM through the
IOS: ADC/DAC devices over a ring sample buffer, a deterministic signal
source, an energy harvester with storage, inter-node links, and state
checkpointing.  Devices advance between VM slices on the simulated clock,
so a program never observes a half-updated completion flag and runs are
bit-reproducible without threads.
"""

import json
import math
import struct
import zlib

from . import dspml, ios, scheduler
from .compiler import CompileError
from .interp import Task, Vm
from .memory import CodeFrame, Stack
from .scheduler import EnergyAccount, PowerTrace

# trigger-mode constants used by the bundled fixtures (configurable per node)
TRIG_FREE = 10
TRIG_SINGLE = 4
TRIG_THRESHOLD = 2


class SignalSource:
    """Deterministic sample generator: windowed sine burst, square, or a
    fixed trace, plus optional pseudo-noise derived from (seed, index)."""

    def __init__(self, kind="sine-burst", amplitude=1000, periods=8.0,
                 burst=256, noise=0, seed=0, trace=None):
        self.kind = kind
        self.amplitude = amplitude
        self.periods = periods
        self.burst = burst
        self.noise = noise
        self.seed = seed
        self.trace = list(trace) if trace else []
        self.overrides = {}

    @classmethod
    def from_csv(cls, path):
        samples = []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line and not line.startswith("#"):
                    samples.append(int(float(line.split(",")[-1])))
        return cls(kind="trace", trace=samples)

    def _noise(self, k):
        if not self.noise:
            return 0
        h = (self.seed * 2654435761 + k * 40503) & 0xFFFFFFFF
        h ^= h >> 13
        return (h % (2 * self.noise + 1)) - self.noise

    def sample(self, k):
        if k in self.overrides:
            return self.overrides[k]
        if self.kind == "trace":
            base = self.trace[k] if k < len(self.trace) else 0
        elif self.kind == "square":
            half = max(1, self.burst // 2)
            base = self.amplitude if (k // half) % 2 == 0 else -self.amplitude
        else:  # hamming-windowed sine burst
            if k < self.burst:
                w = 0.54 - 0.46 * math.cos(2 * math.pi * k / (self.burst - 1))
                s = math.sin(2 * math.pi * self.periods * k / self.burst)
                base = int(self.amplitude * w * s)
            else:
                base = 0
        return base + self._noise(k)


class AdcDevice:
    """Sampling device filling the shared ring buffer between VM slices."""

    def __init__(self, node, capacity=8192):
        self.node = node
        self.capacity = capacity
        self.buffer = [0] * capacity
        self.sampled = [0]     # completion flag, awaited by programs
        self.ring_start = [0]  # first-sample offset within the ring
        self.job = None
        self.threshold = 500
        vm = node.vm
        vm.dios_add("samples", self.buffer, capacity, 2)
        vm.dios_add("sample", self.buffer, capacity, 2)  # Tab-5 style alias
        vm.dios_add("sampled", self.sampled, 1, 2)
        vm.dios_add("sample0", self.ring_start, 1, 2)

    def start(self, trigmode, depth_ks, gain, freq_ksps, device):
        if self.job is not None:
            raise dspml.DomainError("ADC already running")
        depth = depth_ks * 1024
        if not 0 < depth <= self.capacity:
            raise dspml.DomainError("bad ADC depth %d kS" % depth_ks)
        self.sampled[0] = 0
        self.ring_start[0] = 0
        self.job = {
            "trig": trigmode, "depth": depth, "gain": gain,
            "freq": max(1, freq_ksps), "device": device,
            "t0": self.node.vm.micros, "produced": 0, "src_index": 0,
            "armed": trigmode != TRIG_THRESHOLD,
        }

    def tick(self, t0, dt):
        job = self.job
        if job is None:
            return
        period = 1000 // job["freq"] or 1  # microseconds per sample
        due = (self.node.vm.micros - job["t0"]) // period
        while job["produced"] < due and job["produced"] < job["depth"]:
            t_sample = job["t0"] + job["src_index"] * period
            value = self.node.sample_input(job["src_index"], t_sample)
            job["src_index"] += 1
            if not job["armed"]:
                if abs(value) >= self.threshold:
                    job["armed"] = True
                else:
                    continue
            self.buffer[job["produced"] % self.capacity] = value
            job["produced"] += 1
        if job["produced"] >= job["depth"]:
            self.sampled[0] = 1
            self.job = None

    def state(self):
        return {"buffer": list(self.buffer), "sampled": self.sampled[0],
                "ring_start": self.ring_start[0], "job": self.job,
                "threshold": self.threshold}

    def load(self, st):
        self.buffer[:] = st["buffer"]
        self.sampled[0] = st["sampled"]
        self.ring_start[0] = st["ring_start"]
        self.job = st["job"]
        self.threshold = st["threshold"]


class DacDevice:
    """Waveform generator emitting into a capture sink; in loopback mode
    its output is what the ADC samples."""

    def __init__(self, node, wave_cells=256):
        self.node = node
        self.wave = [0] * wave_cells
        self.job = None
        self.capture = []  # (time us, value)
        node.vm.dios_add("wave", self.wave, wave_cells, 2)

    def start(self, wave_handle, interval_ms, ampl, freq_ksps, device):
        self.job = {
            "interval": interval_ms, "ampl": ampl,
            "freq": max(1, freq_ksps), "device": device,
            "t0": self.node.vm.micros, "emitted": 0,
        }

    def value_at(self, t_us):
        job = self.job
        if job is None:
            return 0
        period = 1000 // job["freq"] or 1
        start = job["t0"] + job["interval"] * 1000
        idx = (t_us - start) // period
        if idx < 0:
            return 0
        if job["interval"] == 0:
            idx %= len(self.wave)
        elif idx >= len(self.wave):
            return 0
        return (self.wave[idx] * job["ampl"]) // 1000

    def tick(self, t0, dt):
        job = self.job
        if job is None:
            return
        period = 1000 // job["freq"] or 1
        start = job["t0"] + job["interval"] * 1000
        now = self.node.vm.micros
        due = max(0, (now - start) // period)
        if job["interval"] != 0:
            due = min(due, len(self.wave))
        while job["emitted"] < due:
            t = start + job["emitted"] * period
            self.capture.append((t, self.value_at(t)))
            job["emitted"] += 1

    def state(self):
        return {"wave": list(self.wave), "job": self.job,
                "capture": list(self.capture)}

    def load(self, st):
        self.wave[:] = st["wave"]
        self.job = st["job"]
        self.capture = [tuple(x) for x in st["capture"]]


class NodeLinks:
    """Directed FIFO link endpoints of one node inside a network."""

    def __init__(self, network, node_id):
        self.network = network
        self.node_id = node_id

    def try_send(self, dst, value):
        q = self.network.queue(self.node_id, dst)
        if q is None:
            from .memory import VmError, EXC_IO
            raise VmError(EXC_IO, "no link to node %d" % dst)
        if len(q) >= self.network.link_capacity:
            return False
        q.append(value)
        self.network.log.append((self.node_id, dst, value))
        return True

    def recv_ready(self, src):
        q = self.network.queue(src, self.node_id)
        return bool(q)

    def recv(self, src):
        return self.network.queue(src, self.node_id).popleft()

    def space(self, dst):
        q = self.network.queue(self.node_id, dst)
        return q is not None and len(q) < self.network.link_capacity


class Network:
    """Static topology of nodes joined by bounded FIFO links."""

    def __init__(self, link_capacity=16):
        self.nodes = {}
        self.links = {}
        self.link_capacity = link_capacity
        self.log = []

    def add_node(self, node):
        self.nodes[node.node_id] = node
        node.vm.links = NodeLinks(self, node.node_id)
        return node

    def connect(self, a, b):
        from collections import deque
        self.links[(a, b)] = deque()
        self.links[(b, a)] = deque()

    def queue(self, src, dst):
        return self.links.get((src, dst))

    def run(self, max_rounds=100_000, steps=64, longest=1000):
        """Round-robin the nodes until every task everywhere is done."""
        for _ in range(max_rounds):
            busy = False
            for node in self.nodes.values():
                if scheduler.live_tasks(node.vm):
                    single = node.vm.maxtasks == 1
                    ran = (scheduler.schedule_single if single
                           else scheduler.schedule_multi)(
                               node.vm, steps, longest)
                    node.tick()
                    if not ran:
                        wake = scheduler.next_wake_time(node.vm)
                        node.vm.micros = wake if wake is not None else \
                            node.vm.micros + 100
                        node.tick()
                    busy = True
            if not busy:
                return True
        return False


class Node:
    """One simulated sensor node: VM, devices, energy, and the call gate."""

    def __init__(self, node_id=0, cs_size=1024, ds_size=256, rs_size=128,
                 fs_size=64, maxtasks=8, source=None, adc_input="source",
                 power=None, capacity_uj=0.0, initial_uj=None,
                 drain_uw=2000.0, buffer_cells=8192, tables=None,
                 core_lookup="pht", seed=0):
        self.node_id = node_id
        self.vm = Vm(cs_size, ds_size, rs_size, fs_size, tables=tables,
                     maxtasks=maxtasks, core_lookup=core_lookup)
        self.source = source or SignalSource(seed=seed)
        self.adc_input = adc_input
        self.adc = AdcDevice(self, buffer_cells)
        self.dac = DacDevice(self)
        self.energy = None
        if power is not None or capacity_uj:
            trace = power or PowerTrace.constant(0.0)
            initial = capacity_uj if initial_uj is None else initial_uj
            self.energy = EnergyAccount(capacity_uj, initial, drain_uw,
                                        trace, self.vm.t1)
        self._last_tick = 0
        dspml.install_dsp_words(self.vm)
        self.vm.fios_add("adc", self.adc.start, 5, 2, 0)
        self.vm.fios_add("dac", self.dac.start, 5, 2, 0)
        self.vm.fios_add("milli", lambda: self.vm.micros // 1000, 0, 0, 4)
        self.vm.devices = self

    # -- simulation ---------------------------------------------------------

    def sample_input(self, index, t_us):
        if self.adc_input == "loopback":
            return self.dac.value_at(t_us) + self.source._noise(index)
        return self.source.sample(index)

    def tick(self):
        now = self.vm.micros
        dt = now - self._last_tick
        if dt <= 0:
            return
        self.dac.tick(self._last_tick, dt)
        self.adc.tick(self._last_tick, dt)
        if self.energy is not None:
            self.energy.harvest(self._last_tick, dt)
            self.energy.drain(self.energy.drain_uw * dt / 1e6)
        self._last_tick = now

    def powered(self):
        if self.energy is None:
            return True
        return (self.energy.stored > 0
                or self.energy.trace.power_at(self.vm.micros)
                >= self.energy.drain_uw)

    def run(self, steps=64, longest=1000, max_slices=1_000_000):
        return scheduler.run(self.vm, steps, longest, tick=self.tick,
                             max_slices=max_slices)

    # -- call gate -----------------------------------------------------------

    def hook_output(self, cb):
        return self.vm.hook_output(cb)

    def request(self, req):
        """Shared-state call gate: apply one request, return one response."""
        k = req.kind
        try:
            if k == ios.REQ_COMPILE:
                try:
                    frame = self.vm.compile_text(req.text)
                except CompileError as exc:
                    payload = struct.pack("<H", min(0xFFFF, max(0, exc.pos))) \
                        + exc.msg.encode("ascii", "replace")
                    return ios.Response(ios.RESP_COMPILE_ERROR, payload)
                return ios.ok(struct.pack("<H", frame.id))
            if k == ios.REQ_RUN:
                frame = self.vm.frame_by_id(req.frame_id)
                if frame is None:
                    return ios.Response(ios.RESP_NAK, b"no such frame")
                task = self.vm.spawn_frame(frame)
                budget = req.budget or 1_000_000
                self.run(max_slices=budget)
                if task.vmerror is not None:
                    return ios.Response(ios.RESP_VM_ERROR,
                                        struct.pack("<hB", task.vmerror,
                                                    task.id))
                if task.state not in ("finished", "error") and task.pc < 0:
                    return ios.Response(ios.RESP_SUSPENDED,
                                        struct.pack("<i", task.pc))
                return ios.ok()
            if k == ios.REQ_SPAWN:
                frame = self.vm.frame_by_id(req.frame_id)
                if frame is None:
                    return ios.Response(ios.RESP_NAK, b"no such frame")
                task = self.vm.spawn_frame(frame, req.priority,
                                           req.deadline or 0)
                return ios.ok(struct.pack("<H", task.id))
            if k == ios.REQ_DIOS_READ:
                idx = self.vm.dios_index(req.name)
                if idx is None:
                    return ios.Response(ios.RESP_NAK, b"no such data")
                return ios.ok(struct.pack("<h",
                                          self.vm.ios.dios[idx].read(req.index)))
            if k == ios.REQ_DIOS_WRITE:
                idx = self.vm.dios_index(req.name)
                if idx is None:
                    return ios.Response(ios.RESP_NAK, b"no such data")
                self.vm.ios.dios[idx].write(req.index, req.value)
                return ios.ok()
            if k == ios.REQ_CHECKPOINT:
                return ios.ok(self.checkpoint())
            if k == ios.REQ_RESTORE:
                self.restore(req.blob)
                return ios.ok()
            if k == ios.REQ_STATUS:
                live = len(scheduler.live_tasks(self.vm))
                stored = int(self.energy.stored) if self.energy else 0
                return ios.ok(struct.pack("<BQI", live, self.vm.micros,
                                          stored))
        except Exception as exc:  # malformed request must not kill the node
            return ios.Response(ios.RESP_NAK,
                                str(exc).encode("ascii", "replace"))
        return ios.Response(ios.RESP_NAK, b"unknown request")

    def message_gate(self):
        return ios.MessageGate(self)

    # -- checkpointing --------------------------------------------------------

    def checkpoint(self):
        host = {"adc": self.adc.state(), "dac": self.dac.state(),
                "last_tick": self._last_tick,
                "energy": None if self.energy is None else {
                    "capacity": self.energy.capacity,
                    "stored": self.energy.stored,
                    "initial": self.energy.initial,
                    "harvested": self.energy.harvested,
                    "drained": self.energy.drained,
                    "drain_uw": self.energy.drain_uw,
                }}
        return checkpoint_save(self.vm, extra={"HOST": host})

    def restore(self, blob):
        extra = checkpoint_restore_into(self.vm, blob)
        host = extra.get("HOST")
        if host:
            self.adc.load(host["adc"])
            self.dac.load(host["dac"])
            self._last_tick = host["last_tick"]
            if host["energy"] and self.energy is not None:
                e = host["energy"]
                self.energy.capacity = e["capacity"]
                self.energy.stored = e["stored"]
                self.energy.initial = e["initial"]
                self.energy.harvested = e["harvested"]
                self.energy.drained = e["drained"]
                self.energy.drain_uw = e["drain_uw"]


# ---------------------------------------------------------------------------
# checkpoint blobs: magic, version, CRC-protected sections
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"RXCP"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


def _pack_section(tag, payload):
    return (tag.encode("ascii") + struct.pack("<II", len(payload),
                                              zlib.crc32(payload)) + payload)


def _json_bytes(obj):
    return json.dumps(obj, separators=(",", ":")).encode("ascii")


def _task_state(task):
    ev = None
    if task.vmevent is not None:
        ev = dict(task.vmevent)
        if "guard" in ev:
            ev["guard"] = list(ev["guard"])
    return {
        "id": task.id, "frame": task.frame.id, "pc": task.pc,
        "ds": [task.ds.base, task.ds.limit, task.ds.top],
        "rs": [task.rs.base, task.rs.limit, task.rs.top],
        "fs": [task.fs.base, task.fs.limit, task.fs.top],
        "priority": task.priority, "deadline": task.deadline,
        "arrival": task.arrival, "state": task.state, "entry": task.entry,
        "vmerror": task.vmerror, "vmevent": ev,
        "catch": list(task.catch_point) if task.catch_point else None,
        "pending": task.pending_exc,
        "handlers": {str(k): v for k, v in task.handlers.items()},
        "in_handler": task.in_handler,
        "interrupt_pending": task.interrupt_pending,
    }


def checkpoint_save(vm, extra=None):
    """Serialize a VM to a versioned, per-section CRC-checked blob."""
    frames = []
    for f in vm.cs.frames:
        frames.append({
            "id": f.id, "start": f.start, "length": f.length,
            "state": f.state, "persistent": f.persistent, "locked": f.locked,
            "live_tasks": f.live_tasks, "entry": f.entry,
            "code_end": f.code_end,
            "locals": {k: list(v) for k, v in f.locals.items()},
        })
    dictionary = {name: [list(b) for b in chain]
                  for name, chain in vm.dictionary.bindings.items()}
    tasks = [_task_state(t) for t in vm.tasks if t is not None]
    regs = {
        "cs_size": vm.cs.size, "maxtasks": vm.maxtasks, "t1": vm.t1,
        "micros": vm.micros, "steps_total": vm.steps_total,
        "taskmask": vm.taskmask, "core_lookup": vm.core_lookup,
        "ds_size": len(vm._ds_cells), "rs_size": len(vm._rs_cells),
        "fs_size": len(vm._fs_cells), "in_queue": list(vm.in_queue),
        "words": len(vm.tables.wordlist),
    }
    stacks = b"".join(
        b"".join((v & 0xFFFF).to_bytes(2, "little") for v in cells)
        for cells in (vm._ds_cells, vm._rs_cells, vm._fs_cells))

    blob = bytearray(CHECKPOINT_MAGIC)
    blob.append(CHECKPOINT_VERSION)
    sections = [
        ("CSEG", bytes(vm.cs.bytes)),
        ("FRAM", _json_bytes(frames)),
        ("DICT", _json_bytes(dictionary)),
        ("STKS", stacks),
        ("TASK", _json_bytes(tasks)),
        ("REGS", _json_bytes(regs)),
        ("PROF", _json_bytes(vm.profile.snapshot())),
    ]
    for tag, payload in (extra or {}).items():
        sections.append((tag, _json_bytes(payload)))
    blob.append(len(sections))
    for tag, payload in sections:
        blob += _pack_section(tag, payload)
    return bytes(blob)


def _read_sections(blob):
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    if blob[4] != CHECKPOINT_VERSION:
        raise CheckpointError("unsupported checkpoint version %d" % blob[4])
    count = blob[5]
    sections = {}
    pos = 6
    for _ in range(count):
        if pos + 12 > len(blob):
            raise CheckpointError("truncated checkpoint")
        tag = blob[pos:pos + 4].decode("ascii")
        length, crc = struct.unpack_from("<II", blob, pos + 4)
        payload = blob[pos + 12:pos + 12 + length]
        if len(payload) != length or zlib.crc32(payload) != crc:
            raise CheckpointError("checkpoint section %s corrupt" % tag)
        sections[tag] = payload
        pos += 12 + length
    return sections


def checkpoint_restore_into(vm, blob):
    """Load a checkpoint into an existing VM (same configuration);
    returns any extra host sections as parsed JSON."""
    sections = _read_sections(blob)
    regs = json.loads(sections["REGS"])
    if regs["cs_size"] != vm.cs.size or regs["maxtasks"] != vm.maxtasks:
        raise CheckpointError("checkpoint does not match this configuration")
    if regs["words"] != len(vm.tables.wordlist):
        raise CheckpointError("checkpoint was made with a different ISA")

    vm.cs.bytes[:] = sections["CSEG"]
    vm.cs.frames = []
    max_id = 0
    frames_by_id = {}
    for fst in json.loads(sections["FRAM"]):
        f = CodeFrame.__new__(CodeFrame)
        f.id = fst["id"]
        f.start = fst["start"]
        f.length = fst["length"]
        f.state = fst["state"]
        f.persistent = fst["persistent"]
        f.locked = fst["locked"]
        f.task = None
        f.live_tasks = fst["live_tasks"]
        f.entry = fst["entry"]
        f.code_end = fst["code_end"]
        f.locals = {k: tuple(v) for k, v in fst["locals"].items()}
        vm.cs.frames.append(f)
        frames_by_id[f.id] = f
        max_id = max(max_id, f.id)
    vm.cs.reserve_frame_ids(max_id)
    # rebuild the free list as the complement of the frame spans
    vm.cs.free = []
    pos = 0
    for f in sorted(vm.cs.frames, key=lambda f: f.start):
        if f.start > pos:
            vm.cs.free.append([pos, f.start - pos])
        pos = f.start + f.length
    if pos < vm.cs.size:
        vm.cs.free.append([pos, vm.cs.size - pos])

    vm.dictionary.bindings = {
        name: [tuple(b) for b in chain]
        for name, chain in json.loads(sections["DICT"]).items()}

    stacks = sections["STKS"]
    off = 0
    for cells in (vm._ds_cells, vm._rs_cells, vm._fs_cells):
        for i in range(len(cells)):
            u = stacks[off] | (stacks[off + 1] << 8)
            cells[i] = u - 0x10000 if u & 0x8000 else u
            off += 2

    vm.tasks = [None] * vm.maxtasks
    for tst in json.loads(sections["TASK"]):
        frame = frames_by_id[tst["frame"]]
        ds = Stack(vm._ds_cells, tst["ds"][0], tst["ds"][1])
        ds.top = tst["ds"][2]
        rs = Stack(vm._rs_cells, tst["rs"][0], tst["rs"][1])
        rs.top = tst["rs"][2]
        fs = Stack(vm._fs_cells, tst["fs"][0], tst["fs"][1])
        fs.top = tst["fs"][2]
        task = Task(tst["id"], frame, tst["pc"], ds, rs, fs,
                    tst["priority"], tst["deadline"])
        task.arrival = tst["arrival"]
        task.state = tst["state"]
        task.entry = tst["entry"]
        task.vmerror = tst["vmerror"]
        ev = tst["vmevent"]
        if ev is not None and "guard" in ev:
            ev["guard"] = tuple(ev["guard"])
        task.vmevent = ev
        task.catch_point = tuple(tst["catch"]) if tst["catch"] else None
        task.pending_exc = tst["pending"]
        task.handlers = {int(k): v for k, v in tst["handlers"].items()}
        task.in_handler = tst["in_handler"]
        task.interrupt_pending = tst["interrupt_pending"]
        vm.tasks[task.id] = task

    vm.micros = regs["micros"]
    vm.steps_total = regs["steps_total"]
    vm.taskmask = regs["taskmask"]
    vm.t1 = regs["t1"]
    vm.in_queue.clear()
    vm.in_queue.extend(regs["in_queue"])
    vm.profile.load(json.loads(sections["PROF"]))
    return {tag: json.loads(payload) for tag, payload in sections.items()
            if tag not in ("CSEG", "FRAM", "DICT", "STKS", "TASK", "REGS",
                           "PROF")}


def checkpoint_restore(blob, tables=None):
    """Build a fresh VM from a checkpoint blob."""
    sections = _read_sections(blob)
    regs = json.loads(sections["REGS"])
    vm = Vm(cs_size=regs["cs_size"], ds_size=regs["ds_size"],
            rs_size=regs["rs_size"], fs_size=regs["fs_size"], tables=tables,
            maxtasks=regs["maxtasks"], core_lookup=regs["core_lookup"],
            t1_us=regs["t1"])
    checkpoint_restore_into(vm, blob)
    return vm
