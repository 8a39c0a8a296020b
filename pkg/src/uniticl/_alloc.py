"""Process-wide allocator tuning for array-heavy workloads.

Training allocates multi-megabyte activation buffers every step. With
glibc defaults those land in fresh mmap regions that are unmapped on free,
so each step pays page-fault costs; raising the mmap and trim thresholds
keeps the blocks on the heap for reuse (roughly 2x faster steps under
virtualized kernels). No-op off glibc/Linux.
"""

from __future__ import annotations

import ctypes
import sys

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
_THRESHOLD_BYTES = 1 << 28


def tune_allocator() -> bool:
    if not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        ok = libc.mallopt(_M_MMAP_THRESHOLD, _THRESHOLD_BYTES)
        ok &= libc.mallopt(_M_TRIM_THRESHOLD, _THRESHOLD_BYTES)
        return bool(ok)
    except OSError:
        return False
