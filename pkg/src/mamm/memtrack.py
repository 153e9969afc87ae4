"""Instrumentation for basis-matrix allocations.

Every basis block handed out by :func:`mamm.terms.build_term_block` is
registered here. The tracker keeps the largest single buffer seen (rows and
entries) and the peak number of entries alive at once; releases are detected
with ``weakref.finalize`` so nothing has to be freed by hand.
"""

import threading
import weakref
from contextlib import contextmanager


class BasisTracker:
    def __init__(self):
        self._lock = threading.Lock()
        self.reset()

    def reset(self):
        with self._lock:
            self.max_rows = 0
            self.max_entries = 0
            self.live_entries = 0
            self.peak_live_entries = 0
            self.n_buffers = 0

    def register(self, arr):
        entries = int(arr.size)
        rows = int(arr.shape[0]) if arr.ndim else 0
        with self._lock:
            self.n_buffers += 1
            self.max_rows = max(self.max_rows, rows)
            self.max_entries = max(self.max_entries, entries)
            self.live_entries += entries
            self.peak_live_entries = max(self.peak_live_entries, self.live_entries)
        weakref.finalize(arr, self._release, entries)
        return arr

    def _release(self, entries):
        with self._lock:
            self.live_entries -= entries

    def snapshot(self):
        with self._lock:
            return {
                "max_rows": self.max_rows,
                "max_entries": self.max_entries,
                "peak_live_entries": self.peak_live_entries,
                "n_buffers": self.n_buffers,
            }


tracker = BasisTracker()


@contextmanager
def tracking():
    """Reset the global tracker and yield it."""
    tracker.reset()
    yield tracker
