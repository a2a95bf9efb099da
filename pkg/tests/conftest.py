import pytest

from rexavm import scheduler
from rexavm.interp import Vm
from rexavm.isa import IsaTables


@pytest.fixture(scope="session")
def tables():
    return IsaTables.build()


@pytest.fixture
def vm(tables):
    return Vm(tables=tables, maxtasks=1)


def run_program(text, tables=None, maxtasks=1, persistent=False, steps=64,
                max_slices=200_000, **vm_kwargs):
    """Compile and run one program; returns (vm, task, console text)."""
    vm = Vm(tables=tables, maxtasks=maxtasks, **vm_kwargs)
    frame = vm.compile_text(text, persistent=persistent)
    task = vm.spawn_frame(frame)
    scheduler.run(vm, steps=steps, max_slices=max_slices)
    return vm, task, vm.collector.text()
