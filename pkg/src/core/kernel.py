"""Deterministic discrete-event core: virtual clock, event queue, seeded streams.

Events are processed in strictly increasing ``(time, seq)`` order. Handlers are
registered per event kind; instantaneous records (``emit``) go straight to the
trace at the current clock so the trace is always in processing order.
"""

import heapq
import itertools
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Literal

import numpy as np
from pydantic import model_validator

from src.core.errors import InvalidParametersError, TimeTravelError
from src.core.utils import SpecModel, stable_hash

logger = logging.getLogger(__name__)


class EventKind(str, Enum):
    TASK_START = "task-start"
    TASK_COMPUTED = "task-computed"
    TASK_END = "task-end"
    TASK_FAIL = "task-fail"
    TRANSFER_START = "transfer-start"
    TRANSFER_END = "transfer-end"
    BLOCK_GRANTED = "block-granted"
    BLOCK_RELEASED = "block-released"
    WORKER_IDLE = "worker-idle"
    DISPATCH = "dispatch"
    PRUNE_SIGNAL = "prune-signal"
    CHECKPOINT = "checkpoint"
    FAILURE_INJECTED = "failure-injected"
    NODE_REPAIRED = "node-repaired"
    CHOP_TRIGGERED = "chop-triggered"
    MIGRATE = "migrate"
    FLUSH = "flush"


@dataclass(order=True)
class SimEvent:
    time: float
    seq: int
    kind: EventKind = field(compare=False)
    payload: dict = field(compare=False, default_factory=dict)

    def line(self) -> str:
        """One trace line: ``time<TAB>seq<TAB>kind<TAB>k=v ...``."""
        fields = " ".join(f"{k}={_fmt(v)}" for k, v in sorted(self.payload.items()))
        return f"{self.time:.6f}\t{self.seq}\t{self.kind.value}\t{fields}"


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    if isinstance(value, (list, tuple, set, frozenset)):
        return ",".join(str(v) for v in value)
    return str(value)


Handler = Callable[[SimEvent], None]


class SimKernel:
    """Single-threaded event loop. One kernel per simulation."""

    def __init__(self, start_time: float = 0.0):
        self.start_time = start_time
        self.clock = start_time
        self.trace: list[SimEvent] = []
        self._queue: list[SimEvent] = []
        self._seq = itertools.count()
        self._cancelled: set[int] = set()
        self._handlers: dict[EventKind, Handler] = {}
        self._stopped = False

    def on(self, kind: EventKind, handler: Handler) -> None:
        self._handlers[kind] = handler

    def schedule(self, kind: EventKind, at: float, /, **payload) -> SimEvent:
        if at < self.clock:
            raise TimeTravelError(f"{kind.value} at {at} is before clock {self.clock}")
        event = SimEvent(at, next(self._seq), kind, payload)
        heapq.heappush(self._queue, event)
        return event

    def emit(self, kind: EventKind, /, **payload) -> SimEvent:
        """Record an instantaneous event at the current clock."""
        event = SimEvent(self.clock, next(self._seq), kind, payload)
        self.trace.append(event)
        return event

    def cancel(self, event: SimEvent | None) -> None:
        if event is not None:
            self._cancelled.add(event.seq)

    def pending(self) -> int:
        return sum(1 for e in self._queue if e.seq not in self._cancelled)

    def stop(self) -> None:
        """Stop ``run`` after the event currently being handled."""
        self._stopped = True

    def run(self, until: float | None = None) -> int:
        """Process events with time <= ``until`` (or until exhaustion). Returns the trace growth."""
        before = len(self.trace)
        self._stopped = False
        while self._queue and not self._stopped:
            head = self._queue[0]
            if until is not None and head.time > until:
                self.clock = max(self.clock, until)
                break
            heapq.heappop(self._queue)
            if head.seq in self._cancelled:
                self._cancelled.discard(head.seq)
                continue
            self.clock = head.time
            self.trace.append(head)
            handler = self._handlers.get(head.kind)
            if handler is not None:
                handler(head)
        return len(self.trace) - before

    def trace_lines(self) -> list[str]:
        return [event.line() for event in self.trace]


# -------- Random streams --------
class RngStream:
    """Seeded draw sequence for one purpose; (seed, stream_id) fully determines the draws."""

    def __init__(self, seed: int, stream_id: str):
        self.seed = seed
        self.stream_id = stream_id
        seq = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, stable_hash(stream_id)])
        self.generator = np.random.Generator(np.random.PCG64(seq))

    def random(self) -> float:
        return float(self.generator.random())

    def permutation(self, items: list) -> list:
        order = self.generator.permutation(len(items))
        return [items[i] for i in order]

    def choice(self, items: list):
        return items[int(self.generator.integers(len(items)))]


class RngRegistry:
    """Hands out one independent stream per purpose label."""

    def __init__(self, seed: int):
        self.seed = seed
        self._streams: dict[str, RngStream] = {}

    def stream(self, stream_id: str) -> RngStream:
        if stream_id not in self._streams:
            self._streams[stream_id] = RngStream(self.seed, stream_id)
        return self._streams[stream_id]


class RuntimeDist(SpecModel):
    """Distribution spec: constant(value), uniform(low, high), lognormal(mean, sd), exponential(mean)."""

    dist: Literal["constant", "uniform", "lognormal", "exponential"] = "constant"
    value: float | None = None
    low: float | None = None
    high: float | None = None
    mean: float | None = None
    sd: float | None = None

    @model_validator(mode="after")
    def _validate(self):
        self.check()
        return self

    def check(self) -> None:
        if self.dist == "constant":
            if self.value is None:
                raise InvalidParametersError("constant needs value")
        elif self.dist == "uniform":
            if self.low is None or self.high is None or self.high < self.low:
                raise InvalidParametersError(f"uniform needs low <= high, got ({self.low}, {self.high})")
        elif self.dist == "lognormal":
            if self.mean is None or self.mean <= 0 or self.sd is None or self.sd < 0:
                raise InvalidParametersError(f"lognormal needs mean > 0 and sd >= 0, got ({self.mean}, {self.sd})")
        elif self.dist == "exponential":
            if self.mean is None or self.mean <= 0:
                raise InvalidParametersError(f"exponential needs mean > 0, got {self.mean}")

    @classmethod
    def constant(cls, value: float) -> "RuntimeDist":
        return cls(dist="constant", value=value)

    @classmethod
    def lognormal(cls, mean: float, sd: float) -> "RuntimeDist":
        return cls(dist="lognormal", mean=mean, sd=sd)

    @classmethod
    def uniform(cls, low: float, high: float) -> "RuntimeDist":
        return cls(dist="uniform", low=low, high=high)


def lognormal_params(mean: float, sd: float) -> tuple[float, float]:
    """Underlying normal (mu, sigma) whose lognormal has the given true mean and sd."""
    sigma2 = math.log1p((sd / mean) ** 2)
    return math.log(mean) - sigma2 / 2, math.sqrt(sigma2)


def sample(dist: RuntimeDist, stream: RngStream) -> float:
    dist.check()
    gen = stream.generator
    if dist.dist == "constant":
        return float(dist.value)
    if dist.dist == "uniform":
        if dist.low == dist.high:
            return float(dist.low)
        return float(gen.uniform(dist.low, dist.high))
    if dist.dist == "lognormal":
        mu, sigma = lognormal_params(dist.mean, dist.sd)
        return float(gen.lognormal(mu, sigma))
    return float(gen.exponential(dist.mean))
