import numpy as np
import pytest

from src.core.errors import InvalidParametersError, TimeTravelError
from src.core.kernel import EventKind, RngRegistry, RngStream, RuntimeDist, SimKernel, lognormal_params, sample


def test_events_run_in_time_then_sequence_order():
    kernel = SimKernel()
    seen = []
    kernel.on(EventKind.WORKER_IDLE, lambda ev: seen.append(ev.payload["n"]))
    kernel.schedule(EventKind.WORKER_IDLE, 5.0, n="late")
    kernel.schedule(EventKind.WORKER_IDLE, 1.0, n="first")
    kernel.schedule(EventKind.WORKER_IDLE, 1.0, n="second")
    kernel.run()
    assert seen == ["first", "second", "late"]
    assert kernel.clock == 5.0


def test_scheduling_in_the_past_is_rejected():
    kernel = SimKernel(start_time=10.0)
    with pytest.raises(TimeTravelError):
        kernel.schedule(EventKind.FLUSH, 9.0)


def test_cancelled_events_never_reach_the_trace():
    kernel = SimKernel()
    keep = kernel.schedule(EventKind.FLUSH, 1.0)
    drop = kernel.schedule(EventKind.FLUSH, 2.0)
    kernel.cancel(drop)
    kernel.run()
    assert kernel.trace == [keep]
    assert kernel.pending() == 0


def test_emit_records_at_current_clock_between_scheduled_events():
    kernel = SimKernel()
    kernel.on(EventKind.TASK_END, lambda ev: kernel.emit(EventKind.CHECKPOINT, done=1))
    kernel.schedule(EventKind.TASK_END, 3.0, task="a")
    kernel.run()
    assert [ev.kind for ev in kernel.trace] == [EventKind.TASK_END, EventKind.CHECKPOINT]
    assert kernel.trace[1].time == 3.0


def test_run_until_stops_at_the_horizon_and_resumes():
    kernel = SimKernel()
    kernel.schedule(EventKind.FLUSH, 1.0)
    kernel.schedule(EventKind.FLUSH, 4.0)
    assert kernel.run(until=2.0) == 1
    assert kernel.clock == 2.0
    assert kernel.run() == 1


def test_stop_halts_after_current_handler():
    kernel = SimKernel()
    kernel.on(EventKind.FLUSH, lambda ev: kernel.stop())
    kernel.schedule(EventKind.FLUSH, 1.0)
    kernel.schedule(EventKind.FLUSH, 2.0)
    kernel.run()
    assert len(kernel.trace) == 1
    assert kernel.pending() == 1


def test_trace_line_format():
    kernel = SimKernel()
    kernel.schedule(EventKind.TASK_START, 1.5, task="t0", node=3, attempt=1)
    kernel.run()
    assert kernel.trace_lines() == ["1.500000\t0\ttask-start\tattempt=1 node=3 task=t0"]


def test_streams_are_independent_and_reproducible():
    a = RngRegistry(7)
    b = RngRegistry(7)
    first = [a.stream("placement").random() for _ in range(3)]
    # drawing from another stream must not shift "placement"
    b.stream("failures").random()
    assert [b.stream("placement").random() for _ in range(3)] == first
    assert RngStream(7, "x").random() != RngStream(8, "x").random()


def test_permutation_and_choice_are_seeded():
    items = list(range(10))
    assert RngStream(3, "p").permutation(items) == RngStream(3, "p").permutation(items)
    assert sorted(RngStream(3, "p").permutation(items)) == items
    assert RngStream(3, "c").choice(items) in items


def test_lognormal_parameters_reproduce_mean_and_sd():
    mu, sigma = lognormal_params(713, 560)
    assert np.exp(mu + sigma**2 / 2) == pytest.approx(713)
    assert np.sqrt((np.exp(sigma**2) - 1) * np.exp(2 * mu + sigma**2)) == pytest.approx(560)


def test_constant_and_uniform_samples():
    stream = RngStream(0, "runtimes")
    assert sample(RuntimeDist.constant(42.0), stream) == 42.0
    draws = [sample(RuntimeDist.uniform(10, 20), stream) for _ in range(200)]
    assert all(10 <= d <= 20 for d in draws)


def test_invalid_distribution_parameters():
    with pytest.raises(ValueError):
        RuntimeDist.lognormal(-1, 5)
    with pytest.raises(InvalidParametersError):
        RuntimeDist.model_construct(dist="uniform", low=3.0, high=1.0).check()
