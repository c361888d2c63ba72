"""Clock-agnostic process runtime for the streaming pipeline.

Pipeline stages are plain generators that yield small command objects
(:class:`Sleep`, :class:`SleepUntil`, :class:`Charge`, :class:`Get`,
:class:`Put`, :data:`NOW`).  Two runners interpret them:

* :class:`SimRunner` steps every stage cooperatively on a discrete-event clock
  (simpy), single-threaded and exactly reproducible.
* :class:`WallRunner` gives each stage its own thread, backs channels with
  :class:`queue.Queue` and reads time from ``time.perf_counter_ns``.

Times are integer microseconds since the start of the run.  ``Charge`` is the
modeled cost of work the stage has just done: the simulated clock advances by
it, the wall clock ignores it because the work already took real time.
"""

from __future__ import annotations

import queue
import threading
import time
from dataclasses import dataclass
from typing import Any

import simpy


@dataclass(frozen=True)
class Sleep:
    us: int


@dataclass(frozen=True)
class SleepUntil:
    t_us: int


@dataclass(frozen=True)
class Charge:
    us: int


@dataclass(frozen=True)
class Get:
    channel: "Channel"


@dataclass(frozen=True)
class Put:
    channel: "Channel"
    item: Any


class _Now:
    def __repr__(self):
        return "NOW"


NOW = _Now()


class Channel:
    """Bounded FIFO between two stages; records its peak occupancy."""

    def __init__(self, name: str, capacity: int):
        if capacity < 1:
            raise ValueError(f"channel {name!r} needs capacity >= 1")
        self.name = name
        self.capacity = capacity
        self.peak = 0
        self.n_put = 0
        self._backing = None
        self._lock = threading.Lock()

    def _occupancy(self) -> int:
        b = self._backing
        return len(b.items) if isinstance(b, simpy.Store) else b.qsize()

    def _note_put(self) -> None:
        with self._lock:
            self.n_put += 1
            self.peak = max(self.peak, self._occupancy())

    def __repr__(self):
        return f"Channel({self.name!r}, capacity={self.capacity}, peak={self.peak})"


class SimRunner:
    """Discrete-event runner; deterministic given the stage generators."""

    def __init__(self):
        self.env = simpy.Environment()

    def now(self) -> int:
        return int(self.env.now)

    def _drive(self, gen):
        result = None
        while True:
            try:
                cmd = gen.send(result)
            except StopIteration:
                return
            result = None
            if cmd is NOW:
                result = int(self.env.now)
            elif isinstance(cmd, (Sleep, Charge)):
                yield self.env.timeout(max(0, int(cmd.us)))
            elif isinstance(cmd, SleepUntil):
                yield self.env.timeout(max(0, int(cmd.t_us) - int(self.env.now)))
            elif isinstance(cmd, Get):
                result = yield cmd.channel._backing.get()
            elif isinstance(cmd, Put):
                yield cmd.channel._backing.put(cmd.item)
                cmd.channel._note_put()
            else:
                raise TypeError(f"unknown command {cmd!r}")

    def run(self, stages: dict, channels) -> None:
        for ch in channels:
            ch._backing = simpy.Store(self.env, capacity=ch.capacity)
        procs = {name: self.env.process(self._drive(gen)) for name, gen in stages.items()}
        self.env.run()
        stuck = [name for name, p in procs.items() if p.is_alive]
        if stuck:
            raise RuntimeError(f"pipeline deadlocked; stages still blocked: {stuck}")


class WallRunner:
    """Thread-per-stage runner on the real clock."""

    def __init__(self):
        self._t0 = time.perf_counter_ns()

    def now(self) -> int:
        return (time.perf_counter_ns() - self._t0) // 1000

    def _drive(self, gen, errors: list) -> None:
        result = None
        try:
            while True:
                cmd = gen.send(result)
                result = None
                if cmd is NOW:
                    result = self.now()
                elif isinstance(cmd, Charge):
                    pass
                elif isinstance(cmd, Sleep):
                    time.sleep(max(0, cmd.us) / 1e6)
                elif isinstance(cmd, SleepUntil):
                    delay = cmd.t_us - self.now()
                    if delay > 0:
                        time.sleep(delay / 1e6)
                elif isinstance(cmd, Get):
                    result = cmd.channel._backing.get()
                elif isinstance(cmd, Put):
                    cmd.channel._backing.put(cmd.item)
                    cmd.channel._note_put()
                else:
                    raise TypeError(f"unknown command {cmd!r}")
        except StopIteration:
            return
        except BaseException as exc:  # surfaced by run()
            errors.append(exc)

    def run(self, stages: dict, channels) -> None:
        for ch in channels:
            ch._backing = queue.Queue(maxsize=ch.capacity)
        errors: list = []
        threads = [
            threading.Thread(target=self._drive, args=(gen, errors), name=name, daemon=True)
            for name, gen in stages.items()
        ]
        for t in threads:
            t.start()
        # a failed stage leaves its peers blocked on queues; don't wait for them
        while any(t.is_alive() for t in threads) and not errors:
            for t in threads:
                t.join(timeout=0.05)
        if errors:
            raise errors[0]


def make_runner(clock: str):
    if clock == "sim":
        return SimRunner()
    if clock == "wall":
        return WallRunner()
    raise ValueError(f"clock must be 'sim' or 'wall', got {clock!r}")
