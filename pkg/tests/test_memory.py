"""Cells, stacks, code segment frames, and the word dictionary."""

import random

import pytest

from rexavm.memory import (CodeSegment, Dictionary, OutOfCodeSpace, Stack,
                           VmError, EXC_STACK, cells_to_double,
                           double_to_cells, sat_cell, to_cell)


class TestCells:
    def test_wrap_boundaries(self):
        assert to_cell(32767) == 32767
        assert to_cell(32768) == -32768
        assert to_cell(-32769) == 32767
        assert to_cell(65536) == 0

    def test_saturate(self):
        assert sat_cell(40000) == 32767
        assert sat_cell(-40000) == -32768
        assert sat_cell(123) == 123

    def test_double_round_trip_boundaries(self):
        for v in (-(1 << 31), (1 << 31) - 1, 0, -1, 1, 70000, -70000):
            assert cells_to_double(*double_to_cells(v)) == v

    def test_double_round_trip_random(self):
        rng = random.Random(5)
        for _ in range(5000):
            v = rng.randint(-(1 << 31), (1 << 31) - 1)
            msw, lsw = double_to_cells(v)
            assert -32768 <= msw <= 32767 and -32768 <= lsw <= 32767
            assert cells_to_double(msw, lsw) == v


class TestStack:
    def test_lifo(self):
        st = Stack([0] * 8)
        st.push(5)
        assert st.pop() == 5

    def test_underflow_and_overflow_raise_stack_exception(self):
        st = Stack([0] * 2)
        with pytest.raises(VmError) as err:
            st.pop()
        assert err.value.code == EXC_STACK
        st.push(1)
        st.push(2)
        with pytest.raises(VmError) as err:
            st.push(3)
        assert err.value.code == EXC_STACK

    def test_push2_pop2(self):
        st = Stack([0] * 8)
        st.push2(70000)
        assert st.depth == 2
        assert st.pop2() == 70000

    def test_window_partitions(self):
        cells = [0] * 16
        a = Stack(cells, 0, 8)
        b = Stack(cells, 8, 16)
        for i in range(8):
            a.push(i)
            b.push(i + 100)
        assert a.pop() == 7 and b.pop() == 107
        with pytest.raises(VmError):
            a.push(1) or a.push(1)


class TestCodeSegment:
    def test_sequential_allocation(self):
        cs = CodeSegment(1024)
        f1 = cs.alloc_frame(100)
        f2 = cs.alloc_frame(100)
        assert (f1.start, f2.start) == (0, 100)

    def test_oversize_allocation_fails(self):
        cs = CodeSegment(1024)
        with pytest.raises(OutOfCodeSpace):
            cs.alloc_frame(2000)

    def test_middle_gap_reuse(self):
        cs = CodeSegment(1024)
        f1 = cs.alloc_frame(100)
        f2 = cs.alloc_frame(100)
        f3 = cs.alloc_frame(100)
        cs.free_frame(f2)
        again = cs.alloc_frame(80)
        assert again.start == 100  # first fit lands in the freed gap
        assert f1 in cs.frames and f3 in cs.frames

    def test_free_then_alloc_same_size_reuses_region(self):
        cs = CodeSegment(512)
        f1 = cs.alloc_frame(64)
        start = f1.start
        cs.free_frame(f1)
        f2 = cs.alloc_frame(64)
        assert f2.start == start

    def test_locked_and_persistent_not_reclaimable(self):
        cs = CodeSegment(256)
        f = cs.alloc_frame(10)
        f.locked = True
        with pytest.raises(OutOfCodeSpace):
            cs.free_frame(f)
        f.locked = False
        f.persistent = True
        with pytest.raises(OutOfCodeSpace):
            cs.free_frame(f)

    def test_extend_and_shrink(self):
        cs = CodeSegment(256)
        f = cs.alloc_frame(50)
        cs.extend_frame(f, 30)
        assert f.length == 80
        cs.shrink_frame(f, 40)
        assert f.length == 40
        assert cs.free_bytes() == 256 - 40
        blocker = cs.alloc_frame(10)
        assert blocker.start == 40
        with pytest.raises(OutOfCodeSpace):
            cs.extend_frame(f, 10)

    def test_no_leaks_after_random_alloc_free(self):
        rng = random.Random(42)
        cs = CodeSegment(4096)
        live = []
        for _ in range(2000):
            used = sum(f.length for f in cs.frames)
            assert used + cs.free_bytes() == 4096
            starts = sorted((f.start, f.length) for f in cs.frames)
            for (s1, l1), (s2, _) in zip(starts, starts[1:]):
                assert s1 + l1 <= s2  # non-overlap
            if live and rng.random() < 0.45:
                cs.free_frame(live.pop(rng.randrange(len(live))))
            else:
                try:
                    live.append(cs.alloc_frame(rng.randint(1, 300)))
                except OutOfCodeSpace:
                    if live:
                        cs.free_frame(live.pop(0))

    def test_cell_access(self):
        cs = CodeSegment(64)
        cs.write_cell(10, -12345)
        assert cs.read_cell(10) == -12345
        with pytest.raises(VmError):
            cs.read_cell(63)


class TestDictionary:
    def test_define_lookup(self):
        d = Dictionary()
        d.define("f", 1, 120)
        assert d.lookup("f") == 120

    def test_redefinition_shadows(self):
        d = Dictionary()
        d.define("f", 1, 120)
        d.define("f", 2, 200)
        assert d.lookup("f") == 200
        d.remove_frame(2)
        assert d.lookup("f") == 120

    def test_missing(self):
        assert Dictionary().lookup("missing") is None

    def test_no_dangling_addresses_after_frees(self):
        rng = random.Random(9)
        cs = CodeSegment(2048)
        d = Dictionary()
        live = {}
        for step in range(600):
            if live and rng.random() < 0.4:
                frame = live.pop(rng.choice(list(live)))
                frame.locked = False
                cs.free_frame(frame, d)
            else:
                try:
                    frame = cs.alloc_frame(rng.randint(8, 64))
                except OutOfCodeSpace:
                    continue
                name = "w%d" % rng.randint(0, 25)
                d.define(name, frame.id, frame.start)
                frame.locked = True
                live[frame.id] = frame
            for name in d.names():
                addr = d.lookup(name)
                owner = cs.frame_at(addr)
                assert owner is not None and owner.id in live
