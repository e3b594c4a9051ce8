import logging
import operator
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Annotated, List, TypedDict

import pandas as pd
from langgraph.graph import END, StateGraph

from src.agents.engine import SimResult, Simulation
from src.agents.resilience import recover
from src.core.config import DEFAULT_WORKERS, resolve_output_dir
from src.core.errors import IncompatibleWorkloadsError
from src.core.metrics import COLUMNS, RunReport, build_report, reports_frame, write_csv
from src.core.model import TaskGraph
from src.core.settings import ExperimentConfig, load_config

logger = logging.getLogger(__name__)


# 1. Define State
class ExperimentState(TypedDict):
    config: ExperimentConfig
    seed: int
    output_dir: str
    graph: TaskGraph | None
    segments: Annotated[List[SimResult], operator.add]
    report: RunReport | None
    trace_path: str | None


# 2. Define Nodes

def build_node(state: ExperimentState):
    """Materialize the workload; every seed gets its own copy of the graph."""
    graph = state["config"].workload.build(state["seed"])
    graph.validate()
    return {"graph": graph}


def _checkpoint_path(state: ExperimentState) -> Path | None:
    name = state["config"].run.checkpoint_file
    if not name:
        return None
    return Path(state["output_dir"]) / name.format(seed=state["seed"])


def simulate_node(state: ExperimentState):
    config = state["config"]
    sim = Simulation(
        state["graph"],
        config.platform,
        config.policy,
        seed=state["seed"],
        label=config.label,
        checkpoint_path=_checkpoint_path(state),
    )
    return {"segments": [sim.run()]}


def recover_node(state: ExperimentState):
    """Resume a halted run from its checkpoint on the recovery allocation."""
    config = state["config"]
    ckpt = state["segments"][-1].checkpoint
    sim = recover(
        ckpt,
        config.platform,
        config.policy,
        nodes=config.run.recover_nodes,
        label=config.label,
        checkpoint_path=_checkpoint_path(state),
    )
    print(f"♻️  seed {state['seed']}: recovering from t={ckpt.snapshot_time:.1f}s on {config.run.recover_nodes} nodes")
    return {"segments": [sim.run()]}


def report_node(state: ExperimentState):
    config, segments = state["config"], state["segments"]
    trace = [event for segment in segments for event in segment.trace]
    last = segments[-1]
    report = build_report(
        trace,
        last.counts,
        seed=state["seed"],
        start=segments[0].trace[0].time if segments[0].trace else 0.0,
        cores_per_node=config.platform.cores_per_node,
        halted=last.halted,
        label=config.label,
    )
    trace_path = None
    if config.run.trace:
        path = Path(state["output_dir"]) / f"{config.label or 'run'}.seed{state['seed']}.trace"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(line + "\n" for segment in segments for line in segment.trace_lines()))
        trace_path = str(path)
    return {"report": report, "trace_path": trace_path}


# 3. Define Logic (Edges)

def should_recover(state: ExperimentState):
    last = state["segments"][-1]
    if last.halted and last.checkpoint is not None and state["config"].run.recover_nodes:
        return "recover"
    return "report"


# 4. Build Graph
workflow = StateGraph(ExperimentState)

workflow.add_node("build", build_node)
workflow.add_node("simulate", simulate_node)
workflow.add_node("recover", recover_node)
workflow.add_node("report", report_node)

workflow.set_entry_point("build")
workflow.add_edge("build", "simulate")
workflow.add_conditional_edges(
    "simulate",
    should_recover,
    {
        "recover": "recover",
        "report": "report",
    },
)
workflow.add_edge("recover", "report")
workflow.add_edge("report", END)

# Compile
experiment_app = workflow.compile()


# 5. Helper Functions to Run
def run_seed(config: ExperimentConfig, seed: int, output_dir: str) -> RunReport:
    state = experiment_app.invoke(
        {
            "config": config,
            "seed": seed,
            "output_dir": output_dir,
            "graph": None,
            "segments": [],
            "report": None,
            "trace_path": None,
        }
    )
    report = state["report"]
    logger.info("seed %d: makespan %.3fs, utilization %.4f", seed, report.makespan, report.utilization)
    return report


def run_config(config: ExperimentConfig, output_dir: Path, workers: int | None = None) -> list[RunReport]:
    """One run per seed, in a process pool when more than one worker is allowed. Rows come back in seed order."""
    seeds = list(config.run.seeds)
    workers = workers or config.run.workers or DEFAULT_WORKERS
    if workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(seeds))) as pool:
            reports = list(pool.map(run_seed, [config] * len(seeds), seeds, [str(output_dir)] * len(seeds)))
    else:
        reports = [run_seed(config, seed, str(output_dir)) for seed in seeds]
    return sorted(reports, key=lambda r: r.seed)


def run_experiment(config_path: str | Path, workers: int | None = None) -> tuple[list[RunReport], Path]:
    """Run every seed of one config and write its CSV; returns the reports and the CSV path."""
    config = load_config(config_path)
    output_dir = resolve_output_dir(config.run.output_dir)
    reports = run_config(config, output_dir, workers)
    csv_path = write_csv(reports, output_dir / f"{config.label or 'run'}.csv")
    return reports, csv_path


METRICS = [c for c in COLUMNS if c not in ("label", "seed", "halted")]


def compare(config_paths: list[str | Path], workers: int | None = None) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Seed-averaged metrics per config, and each config's difference from the first."""
    if len(config_paths) < 2:
        raise IncompatibleWorkloadsError("compare needs at least two configs")
    configs = [load_config(p) for p in config_paths]
    base = configs[0]
    for path, config in zip(config_paths[1:], configs[1:]):
        if config.workload.fingerprint() != base.workload.fingerprint():
            raise IncompatibleWorkloadsError(
                f"{path} uses a different workload (seed {config.workload.seed} vs {base.workload.seed})"
            )
        # an unpinned workload is regenerated per run seed
        if config.workload.seed is None and config.run.seeds != base.run.seeds:
            raise IncompatibleWorkloadsError(f"{path} runs seeds {config.run.seeds}, not {base.run.seeds}")

    rows = []
    for path, config in zip(config_paths, configs):
        reports = run_config(config, resolve_output_dir(config.run.output_dir), workers)
        frame = reports_frame(reports)
        means = frame[METRICS].astype(float).mean()
        means.name = config.label or Path(path).stem
        rows.append(means)
    table = pd.DataFrame(rows)
    deltas = table - table.iloc[0]
    return table, deltas
