"""Process-level performance settings for long training runs."""

from __future__ import annotations

import ctypes
import ctypes.util
import logging

logger = logging.getLogger(__name__)

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3


def retain_freed_memory(mmap_threshold: int = 32 << 20, trim_threshold: int = 256 << 20) -> bool:
    """Keep freed numpy buffers in the glibc heap instead of returning them to the OS.

    Training allocates and frees the same few-megabyte temporaries every
    step; by default glibc serves those with fresh ``mmap`` pages, and the
    resulting page faults cost more than the arithmetic. Raising both
    thresholds roughly halves step time on small desk-scale networks.
    Affects the whole process, so only entry points (the CLI, the test
    session) call it. Returns False when glibc is not available.
    """
    name = ctypes.util.find_library("c")
    if name is None:
        return False
    try:
        libc = ctypes.CDLL(name)
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    ok = bool(mallopt(_M_MMAP_THRESHOLD, mmap_threshold)) and bool(mallopt(_M_TRIM_THRESHOLD, trim_threshold))
    logger.debug("allocator thresholds raised: %s", ok)
    return ok
