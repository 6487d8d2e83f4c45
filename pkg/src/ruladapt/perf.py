"""Process-level performance knobs.

Training allocates many short-lived numpy temporaries of identical sizes. On
glibc the default trim/mmap thresholds hand those buffers straight back to
the kernel, so every step re-faults its pages; on machines where faults are
expensive (VMs, sandboxes) that can dominate the runtime. ``keep_malloc_heap``
raises both thresholds so freed buffers stay on the heap and get reused.
Safe to call unconditionally: it is a no-op where mallopt is unavailable.
"""

import ctypes

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
_applied = False


def keep_malloc_heap() -> bool:
    """Disable heap trimming and mmap-backed allocations; returns success."""
    global _applied
    if _applied:
        return True
    try:
        libc = ctypes.CDLL("libc.so.6")
        ok = libc.mallopt(_M_TRIM_THRESHOLD, ctypes.c_int(2**31 - 1)) == 1
        ok = libc.mallopt(_M_MMAP_THRESHOLD, ctypes.c_int(2**31 - 1)) == 1 and ok
        _applied = ok
        return ok
    except (OSError, AttributeError):
        return False
