"""Task scheduling: single-tasking, mask-based multi-tasking, and the
energy-aware lazy scheduler.

The single- and multi-tasking passes drive tasks of one VM instance; tasks
are co-routines, so one pass resumes at most one task and runs one bounded
slice.  The lazy scheduler plans abstract task records against an energy
account: it serves deadlines like EDF but defers work that stored energy
can still cover later, and degenerates to plain EDF when storage is zero.
"""

import csv
import math

from .interp import (DEFAULT_LONGEST_US, DEFAULT_STEPS, ERROR, FINISHED,
                     MASK_EVENT, MASK_READY, MASK_TIMEOUT, READY, RUNNING,
                     WAIT_EVENT, WAIT_TIME)
from .memory import EXC_INTERRUPT, VmError


# ---------------------------------------------------------------------------
# wake conditions and wake effects
# ---------------------------------------------------------------------------

def wake_ready(vm, task):
    """True when a suspended task's wait condition is satisfied."""
    ev = task.vmevent
    if ev is None:
        return True
    kind = ev["kind"]
    if kind == "yield":
        return True
    if kind == "sleep":
        return vm.micros >= ev["timeout"]
    if kind == "await":
        handle, value = ev["guard"]
        try:
            if vm.ios.dios_entry(handle).read(0) == value:
                ev["status"] = 0
                return True
        except VmError:
            pass
        if ev["timeout"] and vm.micros >= ev["timeout"]:
            ev["status"] = 1
            return True
        return False
    if kind == "in":
        return bool(vm.in_queue)
    if kind == "recv":
        return vm.links is not None and vm.links.recv_ready(ev["src"])
    if kind in ("send", "send-batch"):
        return vm.links is not None and vm.links.space(ev["dst"])
    return False


def _apply_wake(vm, task):
    """Flip the negated pc and perform the wait's completion effect."""
    ev = task.vmevent
    task.vmevent = None
    if task.pc < 0:
        task.pc = -task.pc
    task.state = READY
    if ev is None:
        return True
    kind = ev["kind"]
    if kind == "await":
        task.ds.push(ev.get("status", 1))
    elif kind == "in":
        task.ds.push(vm.in_queue.popleft())
    elif kind == "recv":
        task.ds.push(vm.links.recv(ev["src"]))
    elif kind == "send":
        vm.links.try_send(ev["dst"], ev["value"])
    elif kind == "send-batch":
        values = ev["values"]
        for i, v in enumerate(values):
            if not vm.links.try_send(ev["dst"], v):
                task.vmevent = dict(kind="send-batch", dst=ev["dst"],
                                    values=values[i:])
                task.pc = -task.pc
                task.state = WAIT_EVENT
                return False
    return True


def _mask_for_event(ev):
    if ev is None:
        return MASK_READY
    if ev["kind"] == "sleep":
        return MASK_TIMEOUT
    if ev["kind"] == "yield":
        return MASK_READY
    return MASK_EVENT


def _after_slice(vm, task):
    if task.state in (FINISHED, ERROR):
        return
    if task.vmevent is not None:
        task.state = WAIT_TIME if task.vmevent["kind"] == "sleep" \
            else (READY if task.vmevent["kind"] == "yield" else WAIT_EVENT)
        vm._set_mask(task, _mask_for_event(task.vmevent))
    else:
        vm._set_mask(task, MASK_READY)
    if vm.profiling:
        vm.profile.record_task_run(task.entry, task.slice_steps)


def _resume(vm, task):
    """Wake a task; returns False if it went straight back to waiting or
    died from a pending preemption interrupt."""
    if not _apply_wake(vm, task):
        vm._set_mask(task, _mask_for_event(task.vmevent))
        return False
    if task.interrupt_pending:
        task.interrupt_pending = False
        vm.raise_exc(task, EXC_INTERRUPT)
        if task.state in (FINISHED, ERROR):
            return False
    return True


# ---------------------------------------------------------------------------
# single-tasking (one context, incremental code)
# ---------------------------------------------------------------------------

def schedule_single(vm, steps=DEFAULT_STEPS, longest=DEFAULT_LONGEST_US):
    """One pass of the minimal single-tasking flow; returns True if the
    task ran."""
    task = next((t for t in vm.tasks if t is not None), None)
    if task is None:
        return False
    if task.vmevent is not None:
        if not wake_ready(vm, task):
            return False
        if not _resume(vm, task):
            return False
    if task.pc >= 0 and task.state in (READY, RUNNING):
        vm.vmloop(task, steps, longest)
        _after_slice(vm, task)
        return True
    return False


# ---------------------------------------------------------------------------
# multi-tasking over the 2-bit task mask
# ---------------------------------------------------------------------------

def select_next(vm):
    """Scan the task mask once; satisfied IO events beat satisfied
    timeouts, which beat plain ready tasks; ties go to the lowest id."""
    ready_pick = timeout_pick = event_pick = None
    for task in vm.tasks:
        if task is None:
            continue
        bits = vm.mask_bits(task)
        if bits == MASK_READY and ready_pick is None:
            ready_pick = task
        elif bits == MASK_TIMEOUT and timeout_pick is None \
                and wake_ready(vm, task):
            timeout_pick = task
        elif bits == MASK_EVENT and event_pick is None \
                and wake_ready(vm, task):
            event_pick = task
    return event_pick or timeout_pick or ready_pick


def schedule_multi(vm, steps=DEFAULT_STEPS, longest=DEFAULT_LONGEST_US):
    """One multi-tasking pass: pick, wake, run a slice, re-mark the mask."""
    task = select_next(vm)
    if task is None:
        return False
    vm._set_mask(task, 0)
    if task.vmevent is not None or task.pc < 0:
        if not _resume(vm, task):
            return True  # the pass consumed the wake attempt
    if task.state in (READY, RUNNING) and task.pc >= 0:
        vm.vmloop(task, steps, longest)
        _after_slice(vm, task)
    return True


def live_tasks(vm):
    return [t for t in vm.tasks if t is not None]


def next_wake_time(vm):
    times = []
    for task in live_tasks(vm):
        ev = task.vmevent
        if ev and ev.get("timeout"):
            times.append(ev["timeout"])
    return min(times) if times else None


def run(vm, steps=DEFAULT_STEPS, longest=DEFAULT_LONGEST_US, tick=None,
        max_slices=1_000_000, idle_quantum=100):
    """Drive the scheduler until every task ends; returns the slice count.

    ``tick`` is the host hook run between slices (device simulation); when
    nothing is runnable the clock jumps to the next timeout or advances by
    ``idle_quantum`` microseconds so guarded waits can make progress.
    """
    single = vm.maxtasks == 1
    slices = 0
    while live_tasks(vm) and slices < max_slices:
        ran = (schedule_single if single else schedule_multi)(vm, steps, longest)
        slices += 1
        if tick is not None:
            tick()
        if not ran:
            wake = next_wake_time(vm)
            if wake is not None and wake > vm.micros:
                vm.micros = wake if tick is None else \
                    min(wake, vm.micros + idle_quantum)
            else:
                vm.micros += idle_quantum
            if tick is None and wake is None and not any(
                    wake_ready(vm, t) for t in live_tasks(vm)
                    if t.vmevent is not None):
                if all(t.vmevent is not None and t.vmevent["kind"]
                       in ("in", "recv", "send", "send-batch")
                       for t in live_tasks(vm)):
                    break  # nothing can ever wake these without a host
    return slices


# ---------------------------------------------------------------------------
# profiling-based runtime estimation
# ---------------------------------------------------------------------------

def estimate_runtime(profile, entry, fallback=DEFAULT_STEPS):
    """Estimated steps for a task entry word: profiled mean, else the
    slice budget as a cold-start guess."""
    rec = profile.tasks.get(entry) or profile.words.get(entry)
    if not rec or rec[0] == 0:
        return fallback
    return rec[1] / rec[0]


# ---------------------------------------------------------------------------
# energy accounting
# ---------------------------------------------------------------------------

class PowerTrace:
    """Harvested power over time: constant, intervals, or CSV-backed."""

    def __init__(self, segments):
        # segments: sorted (start_us, end_us, power_uw)
        self.segments = sorted(segments)

    @classmethod
    def constant(cls, power_uw, until_us=float("inf")):
        return cls([(0, until_us, power_uw)])

    @classmethod
    def from_csv(cls, path):
        rows = []
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].lstrip().startswith("#"):
                    continue
                rows.append((float(row[0]), float(row[1])))
        rows.sort()
        segments = []
        for i, (t, p) in enumerate(rows):
            end = rows[i + 1][0] if i + 1 < len(rows) else float("inf")
            segments.append((t, end, p))
        return cls(segments)

    def power_at(self, t_us):
        for start, end, power in self.segments:
            if start <= t_us < end:
                return power
        return 0.0

    def on_until(self, t_us, threshold_uw):
        """End of the contiguous span from t with power >= threshold."""
        t = t_us
        while True:
            for start, end, power in self.segments:
                if start <= t < end and power >= threshold_uw:
                    t = end
                    break
            else:
                return t


class EnergyAccount:
    """Stored-energy ledger in microjoules with conservation tracking."""

    def __init__(self, capacity_uj, initial_uj=0.0, drain_uw=1000.0,
                 trace=None, t1_us=1):
        self.capacity = capacity_uj
        self.stored = min(initial_uj, capacity_uj)
        self.initial = self.stored
        self.drain_uw = drain_uw
        self.trace = trace or PowerTrace.constant(0.0)
        self.t1_us = t1_us
        self.harvested = 0.0   # effectively banked (post-clamp)
        self.drained = 0.0

    def harvest(self, t_us, dt_us):
        incoming = self.trace.power_at(t_us) * dt_us / 1e6
        applied = min(incoming, self.capacity - self.stored)
        self.stored += applied
        self.harvested += applied
        return applied

    def drain(self, e_uj):
        applied = min(e_uj, self.stored)
        self.stored -= applied
        self.drained += applied
        return applied

    def drain_steps(self, steps):
        return self.drain(self.drain_uw * steps * self.t1_us / 1e6)

    def conserved(self):
        return self.initial + self.harvested - self.drained - self.stored

    def runtime_estimate_us(self, t_us):
        """Predicted system runtime assuming constant drain power."""
        ps = self.trace.power_at(t_us)
        if ps >= self.drain_uw:
            field_end = self.trace.on_until(t_us, self.drain_uw)
            if math.isinf(field_end):
                return float("inf")
            tail = self.stored * 1e6 / self.drain_uw
            return (field_end - t_us) + tail
        if self.drain_uw <= 0:
            return float("inf")
        return self.stored * 1e6 / (self.drain_uw - ps)


# ---------------------------------------------------------------------------
# lazy scheduling under energy constraints
# ---------------------------------------------------------------------------

class LsaTask:
    """Abstract job record for the energy-aware scheduler."""

    def __init__(self, tid, deadline_us, steps, priority=0, arrival_us=0,
                 io=False):
        self.id = tid
        self.deadline = deadline_us
        self.steps = steps
        self.priority = priority
        self.arrival = arrival_us
        self.io = io
        self.remaining = steps
        self.spent_uj = 0.0
        self.finished_at = None
        self.missed = False

    def energy_demand(self, acct):
        return acct.drain_uw * self.steps * acct.t1_us / 1e6


class LsaResult:
    def __init__(self):
        self.trace = []         # (t_us, task id, steps, stored energy)
        self.completion = []    # task ids in completion order
        self.missed = []        # task ids whose deadline could not be met
        self.infeasible = []    # task ids that can never run

    def write_trace_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time_us", "task", "steps", "stored_uj"])
            for row in self.trace:
                w.writerow(row)


def schedule_lsa(tasks, acct, steps_budget=DEFAULT_STEPS, now_us=0,
                 executor=None, horizon_us=10_000_000_000):
    """Plan the task set against the energy account; returns an LsaResult.

    The ready queue is served by minimal deadline, then maximal priority,
    then arrival, then id.  A task whose estimated runtime exceeds the
    predicted system runtime is deferred this round.  When a task's
    deadline arrives and stored energy still covers its remaining demand,
    it is finished by draining that energy at once (the lazy completion);
    with zero storage this never applies and the schedule is plain EDF.
    """
    result = LsaResult()
    pending = sorted(tasks, key=lambda k: k.arrival)
    ready = []
    t = now_us
    while (pending or ready) and t < horizon_us:
        while pending and pending[0].arrival <= t:
            ready.append(pending.pop(0))
        if not ready:
            nxt = pending[0].arrival
            acct.harvest(t, nxt - t)
            t = nxt
            continue

        # lazy completions and misses at reached deadlines
        for task in list(ready):
            if t >= task.deadline and task.remaining > 0:
                need = acct.drain_uw * task.remaining * acct.t1_us / 1e6
                if acct.stored >= need and not task.io:
                    acct.drain(need)
                    task.spent_uj += need
                    task.remaining = 0
                    task.finished_at = t
                    result.completion.append(task.id)
                    result.trace.append((t, task.id, 0, acct.stored))
                else:
                    task.missed = True
                    result.missed.append(task.id)
                ready.remove(task)

        if not ready:
            continue
        t_s = acct.runtime_estimate_us(t)
        queue = sorted(ready, key=lambda k: (k.deadline, -k.priority,
                                             k.arrival, k.id))
        job = None
        for cand in queue:
            est_us = cand.remaining * acct.t1_us
            if est_us <= t_s:
                job = cand
                break
        if job is None:
            # defer: advance to the next deadline or harvest a quantum
            step_us = min([k.deadline for k in ready] + [t + 10_000]) - t
            step_us = max(step_us, 1)
            acct.harvest(t, step_us)
            t += step_us
            if acct.runtime_estimate_us(t) <= 0 and acct.stored <= 0 and \
                    acct.trace.power_at(t) <= 0 and not pending:
                for task in ready:
                    result.infeasible.append(task.id)
                break
            continue

        steps = min(steps_budget, job.remaining)
        dt = steps * acct.t1_us
        acct.harvest(t, dt)
        if executor is not None:
            steps = executor(job, steps)
            dt = steps * acct.t1_us
        spent = acct.drain_steps(steps)
        job.spent_uj += spent
        job.remaining -= steps
        t += dt
        result.trace.append((t, job.id, steps, acct.stored))
        if job.remaining <= 0:
            job.finished_at = t
            result.completion.append(job.id)
            ready.remove(job)
    for task in pending:
        result.infeasible.append(task.id)
    return result
