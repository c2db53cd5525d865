"""Clocks shared by the engine and the transports."""
from __future__ import annotations

import time


class WallClock:
    """Monotonic real time."""

    virtual = False

    def now(self) -> float:
        return time.monotonic()

    def sleep(self, seconds: float):
        if seconds > 0:
            time.sleep(seconds)

    def sleep_until(self, t: float):
        self.sleep(t - time.monotonic())


class VirtualClock:
    """Time that only moves when someone sleeps; makes simulated runs exact."""

    virtual = True

    def __init__(self, start: float = 0.0):
        self._t = float(start)

    def now(self) -> float:
        return self._t

    def sleep(self, seconds: float):
        if seconds > 0:
            self._t += seconds

    def sleep_until(self, t: float):
        if t > self._t:
            self._t = t
