"""Allocation accounting used as the peak-memory probe.

Only arrays handed to :func:`track` are counted: tensor data, gradient
buffers, values saved for backward, optimizer velocity and snapshots.
Temporaries inside a single numpy expression are invisible to the counter.
"""

from __future__ import annotations

import threading
import weakref

import numpy as np


class AllocCounter:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._live = 0
        self._peak = 0
        self._tracked: dict[int, int] = {}

    @property
    def live_bytes(self) -> int:
        return self._live

    @property
    def peak_bytes(self) -> int:
        return self._peak

    def reset_peak(self) -> None:
        with self._lock:
            self._peak = self._live

    def track(self, arr: np.ndarray) -> np.ndarray:
        """Count ``arr`` until it is garbage collected; returns ``arr``.

        Views are ignored since their memory belongs to the base array, and
        arrays already being tracked are not counted twice.
        """
        if arr.base is not None or arr.nbytes == 0:
            return arr
        key = id(arr)
        nbytes = arr.nbytes
        with self._lock:
            if key in self._tracked:
                return arr
            self._tracked[key] = nbytes
            self._live += nbytes
            if self._live > self._peak:
                self._peak = self._live
        weakref.finalize(arr, self._release, key)
        return arr

    def _release(self, key: int) -> None:
        with self._lock:
            nbytes = self._tracked.pop(key, 0)
            self._live -= nbytes


ALLOC = AllocCounter()


def track(arr: np.ndarray) -> np.ndarray:
    return ALLOC.track(arr)
