# settings.py
"""Experiment config file: four YAML sections (platform, policy, workload, run)."""

import logging
from pathlib import Path

import yaml
from pydantic import Field, ValidationError, field_validator, model_validator

from src.core.errors import ConfigParseError, ConfigValidationError
from src.core.model import TaskGraph
from src.core.platform import PRESETS, PlatformSpec
from src.core.policies import PolicyConfig
from src.core.utils import SpecModel
from src.core.workloads import ARCHETYPES, generate, read_workload

logger = logging.getLogger(__name__)


# -------- Sections --------
class WorkloadSection(SpecModel):
    archetype: str | None = None
    file: Path | None = None
    params: dict = Field(default_factory=dict)
    seed: int | None = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.archetype is None) == (self.file is None):
            raise ValueError("workload needs exactly one of archetype or file")
        if self.archetype is not None and self.archetype not in ARCHETYPES:
            raise ValueError(f"unknown archetype {self.archetype!r}; known: {sorted(ARCHETYPES)}")
        if self.file is not None and not self.file.is_file():
            raise ValueError(f"workload file {self.file} does not exist")
        return self

    def fingerprint(self) -> tuple:
        """What two configs must share to be comparable."""
        params = tuple(sorted((k, repr(v)) for k, v in self.params.items()))
        return (self.archetype, str(self.file) if self.file else None, params, self.seed)

    def build(self, run_seed: int = 0) -> TaskGraph:
        """Generate or read the graph; an unset ``seed`` follows the run seed."""
        if self.file is not None:
            return read_workload(self.file)
        params = {k.replace("-", "_"): v for k, v in self.params.items()}
        return generate(self.archetype, params, run_seed if self.seed is None else self.seed)


class RunSection(SpecModel):
    seeds: list[int] = Field(default_factory=lambda: [0], min_length=1)
    trace: bool = False
    output_dir: str | None = None
    name: str | None = None
    workers: int | None = Field(default=None, ge=1)
    recover_nodes: int | None = Field(default=None, ge=1)
    checkpoint_file: str | None = None


class ExperimentConfig(SpecModel):
    platform: PlatformSpec
    policy: PolicyConfig
    workload: WorkloadSection
    run: RunSection = Field(default_factory=RunSection)

    @field_validator("platform", mode="before")
    @classmethod
    def _expand_preset(cls, value):
        if isinstance(value, dict) and "preset" in value:
            value = dict(value)
            name = value.pop("preset")
            if name not in PRESETS:
                raise ValueError(f"unknown platform preset {name!r}; known: {sorted(PRESETS)}")
            value = {**PRESETS[name], **value}
        return value

    @model_validator(mode="after")
    def _cross_check(self):
        platform, policy = self.platform, self.policy
        if policy.data.intermediate == "ifs" and not platform.ifs_enabled:
            raise ValueError("intermediate: ifs needs platform ifs-enabled")
        static = policy.provision.static_nodes
        if policy.provision.mode == "static" and static > platform.node_count:
            raise ValueError(f"static-nodes {static} exceeds node-count {platform.node_count}")
        chop = policy.dispatch.chop
        if chop is not None and chop.restart_nodes > platform.node_count:
            raise ValueError(f"chop restart-nodes {chop.restart_nodes} exceeds node-count {platform.node_count}")
        if self.run.recover_nodes is not None and self.run.recover_nodes > platform.node_count:
            raise ValueError(f"recover-nodes {self.run.recover_nodes} exceeds node-count {platform.node_count}")
        for spec in policy.resilience.failures:
            if spec.kind == "strategic" and policy.resilience.strategic_action == "chop" and chop is None:
                raise ValueError("a strategic failure with strategic-action chop needs a dispatch chop section")
            if spec.node is not None and spec.node >= platform.node_count:
                raise ValueError(f"failure scoped to node {spec.node} outside the machine")
            if spec.block is not None and spec.block >= platform.block_count:
                raise ValueError(f"failure scoped to block {spec.block} outside the machine")
        return self

    @property
    def label(self) -> str:
        return self.run.name or ""


# -------- Loading --------
def load_config(path: str | Path) -> ExperimentConfig:
    """Parse and validate one experiment file. Relative workload paths resolve against the file."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigParseError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigParseError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigParseError(f"{path}: expected a mapping with platform, policy, workload and run sections")

    workload = raw.get("workload")
    if isinstance(workload, dict) and workload.get("file"):
        file = Path(workload["file"])
        if not file.is_absolute():
            raw["workload"] = {**workload, "file": str(path.parent / file)}
    run = raw.get("run")
    if isinstance(run, dict) and not run.get("name"):
        raw["run"] = {**run, "name": path.stem}
    elif run is None:
        raw["run"] = {"name": path.stem}

    try:
        config = ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigValidationError(f"{path}: {exc}") from exc
    logger.debug("loaded config %s (%d seeds)", path, len(config.run.seeds))
    return config
