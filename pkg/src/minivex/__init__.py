"""A desk-scale dynamic binary translator for a synthetic 32-bit guest.

Guest code is disassembled to a flat IR, optimized, lowered to a synthetic
host ISA, register-allocated, encoded and run from a sectored code cache by
an emulated dispatcher.  Each machine-code optimization can be toggled.
"""

from .core import Config, Dispatcher, dispatch_run, run_program, translate
from .guest import ExitReason, GuestMemory, GuestState, assemble, interpret

__all__ = ["Config", "Dispatcher", "ExitReason", "GuestMemory", "GuestState", "assemble",
           "dispatch_run", "interpret", "run_program", "translate"]
__version__ = "0.1.0"
