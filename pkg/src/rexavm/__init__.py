"""rexavm: an embeddable 16-bit stack VM with an in-place text-to-bytecode
compiler, energy-aware task scheduling, fixed-point DSP/tiny-ML kernels,
and a simulated sensor-node host."""

from .interp import Vm
from .hostsim import Node, SignalSource, checkpoint_restore, checkpoint_save
from .isa import IsaTables, WordList, load_wordlist

__all__ = ["Vm", "Node", "SignalSource", "checkpoint_save",
           "checkpoint_restore", "IsaTables", "WordList", "load_wordlist"]

__version__ = "0.1.0"
