"""Density-constrained mean-field games: normalizing-flow solver and neural operator."""
import ctypes
import sys


def _tune_allocator():
    # Keep freed tensor buffers in the heap; fresh pages are expensive on some hosts.
    if not sys.platform.startswith("linux"):
        return
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 30)       # M_MMAP_THRESHOLD
        libc.mallopt(-1, 2**31 - 1)     # M_TRIM_THRESHOLD
        libc.mallopt(-2, 64 << 20)      # M_TOP_PAD
    except (OSError, AttributeError):
        pass


_tune_allocator()

from .core import (  # noqa: E402
    BoundaryCode, CodeLayout, MFGProblem, Obstacle, Scenario, build_crowd_motion,
    decode, encode, hamiltonian, obstacle_penalty,
)
from .flow import DensityFlow, log_density, push_samples, terminal_density  # noqa: E402

__all__ = [
    "BoundaryCode", "CodeLayout", "MFGProblem", "Obstacle", "Scenario", "build_crowd_motion",
    "decode", "encode", "hamiltonian", "obstacle_penalty", "DensityFlow", "log_density",
    "push_samples", "terminal_density",
]
__version__ = "0.1.0"
