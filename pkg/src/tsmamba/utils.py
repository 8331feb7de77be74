"""Small shared helpers."""

from __future__ import annotations

import os


def worker_count() -> int:
    """Worker cap from TSMAMBA_THREADS; 0 or unset means auto (cpu count)."""
    raw = os.environ.get("TSMAMBA_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 0:
        n = 0
    if n == 0:
        n = os.cpu_count() or 1
    return n
