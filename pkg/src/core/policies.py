"""Policy sections of the experiment config: one choice per middleware design axis."""

from typing import Literal

from pydantic import Field, model_validator

from src.core.errors import InvalidParametersError
from src.core.utils import SpecModel


# -------- Provisioning --------
class ProvisionPolicy(SpecModel):
    mode: Literal["static", "dynamic"] = "static"
    static_nodes: int | None = Field(default=None, ge=1)
    growth: Literal["constant", "arithmetic", "geometric"] = "constant"
    step: int = Field(default=1, ge=1)
    start: int = Field(default=1, ge=1)
    delta: int = Field(default=0, ge=0)
    ratio: float = 2.0
    idle_release_after_sec: float = Field(default=0.0, ge=0)
    max_outstanding_requests: int = Field(default=1, ge=1)
    allow_partial_release: bool = True
    grant_wait_sec: float = Field(default=0.0, ge=0)
    request_overhead_sec: float = Field(default=0.0, ge=0)

    @model_validator(mode="after")
    def _check(self):
        if self.mode == "static" and self.static_nodes is None:
            raise InvalidParametersError("static provisioning needs static-nodes")
        if self.growth == "geometric" and self.ratio <= 1:
            raise InvalidParametersError(f"geometric growth needs ratio > 1, got {self.ratio}")
        return self


# -------- Dispatch --------
class ChopPolicy(SpecModel):
    trigger_fraction: float = Field(gt=0, le=1)
    restart_nodes: int = Field(ge=1)


class DispatchPolicy(SpecModel):
    architecture: Literal["centralized", "hierarchical"] = "centralized"
    scheduler_count: int = Field(default=1, ge=1)
    mode: Literal["pull", "push"] = "pull"
    backlog_limit: int = Field(default=2, ge=1)
    stealing: bool = False
    neighbor_count: int = Field(default=2, ge=1)
    ordering: Literal["fifo", "priority", "longest-first", "shortest-first"] = "fifo"
    runtimes_known: bool = False
    data_aware: bool = False
    random_placement: bool = False
    pipeline_grouping: bool = False
    dispatch_latency_sec: float = Field(default=0.0, ge=0)
    dispatch_throughput_per_sec: float | None = Field(default=1000.0, gt=0)
    lookup_latency_sec: float = Field(default=0.0, ge=0)
    chop: ChopPolicy | None = None
    migration: bool = False

    @property
    def hops(self) -> int:
        return 2 if self.architecture == "hierarchical" else 1

    @property
    def schedulers(self) -> int:
        return self.scheduler_count if self.architecture == "hierarchical" else 1

    @model_validator(mode="after")
    def _check(self):
        if self.data_aware and self.random_placement:
            raise InvalidParametersError("data-aware and random-placement are mutually exclusive")
        return self


# -------- Data --------
class DataPolicy(SpecModel):
    common_input: Literal["push-broadcast", "pull-on-demand"] = "pull-on-demand"
    fanout: int = Field(default=2, ge=2)
    location: Literal["central-map", "hashed"] = "central-map"
    server_count: int = Field(default=1, ge=1)
    central_lookup_sec: float = Field(default=0.0, ge=0)
    probe_latency_sec: float = Field(default=0.0, ge=0)
    intermediate: Literal["gfs-passthrough", "peer-to-peer", "ifs"] = "gfs-passthrough"
    output: Literal["synchronized", "collective"] = "synchronized"
    flush_period_sec: float = Field(default=60.0, gt=0)
    reduce_gathers: bool = False


# -------- Resilience --------
class FailureSpec(SpecModel):
    kind: Literal["hardware", "os", "application", "strategic"]
    node: int | None = Field(default=None, ge=0)
    block: int | None = Field(default=None, ge=0)
    task: str | None = None
    at_sec: float | None = Field(default=None, ge=0)
    at_fraction: float | None = Field(default=None, gt=0, le=1)
    rate_per_node_hour: float | None = Field(default=None, ge=0)
    after_sec: float | None = Field(default=None, ge=0)
    persistence: Literal["transient", "permanent"] = "transient"

    @model_validator(mode="after")
    def _check(self):
        timings = [t for t in (self.at_sec, self.at_fraction, self.rate_per_node_hour, self.after_sec) if t is not None]
        if len(timings) != 1:
            raise InvalidParametersError("a failure needs exactly one of at-sec, at-fraction, rate-per-node-hour, after-sec")
        scopes = [s for s in (self.node, self.block, self.task) if s is not None]
        if len(scopes) > 1:
            raise InvalidParametersError("a failure is scoped to at most one of node, block, task")
        if self.kind == "application" and self.task is None:
            raise InvalidParametersError("application failures are scoped to a task")
        if self.after_sec is not None and not (self.kind == "application" and self.persistence == "permanent"):
            raise InvalidParametersError("after-sec is only meaningful for permanent application failures")
        if self.rate_per_node_hour is not None and (self.kind not in ("hardware", "os") or scopes):
            raise InvalidParametersError("rate-driven failures are unscoped hardware/os failures")
        if self.kind in ("hardware", "os") and not scopes and self.rate_per_node_hour is None:
            raise InvalidParametersError(f"{self.kind} failure needs a node, block or task scope")
        return self


class ResiliencePolicy(SpecModel):
    max_retries: int = Field(default=3, ge=0)
    reboot_delay_sec: float = Field(default=60.0, ge=0)
    checkpoint_every_sec: float | None = Field(default=None, gt=0)
    strategic_action: Literal["chop", "halt"] = "chop"
    failures: list[FailureSpec] = Field(default_factory=list)


class PolicyConfig(SpecModel):
    provision: ProvisionPolicy
    dispatch: DispatchPolicy = Field(default_factory=DispatchPolicy)
    data: DataPolicy = Field(default_factory=DataPolicy)
    resilience: ResiliencePolicy = Field(default_factory=ResiliencePolicy)
