import sys
import os
# Add project root to path so 'src' module can be imported
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

import argparse
import logging

import pandas as pd

from src.core.config import configure_logging
from src.core.errors import SimError
from src.core.settings import load_config
from src.core.utils import parse_kv
from src.core.workloads import ARCHETYPES, generate, write_workload

logger = logging.getLogger(__name__)


# ------------------ Subcommands ------------------
def cmd_run(args) -> int:
    from src.agents.experiment import run_experiment

    print(f"🚀 Running {args.config}")
    reports, csv_path = run_experiment(args.config, workers=args.workers)
    for r in reports:
        status = "⏸️  halted" if r.halted else "✅"
        print(f"{status} seed {r.seed}: makespan {r.makespan:.3f}s, utilization {r.utilization:.4f}, "
              f"executed {r.executed}, pruned {r.pruned}, failed {r.failed}")
    print(f"📄 Report written to {csv_path}")
    return 0


def cmd_compare(args) -> int:
    from src.agents.experiment import compare

    print(f"⚖️  Comparing {len(args.configs)} configs")
    table, deltas = compare(args.configs, workers=args.workers)
    shown = ["makespan", "utilization", "allocated_core_seconds", "busy_core_seconds", "executed", "pruned", "failed"]
    with pd.option_context("display.width", 160, "display.max_columns", None):
        print(table[shown].to_string(float_format=lambda v: f"{v:.4f}"))
        print("\nΔ vs first config")
        print(deltas[shown].to_string(float_format=lambda v: f"{v:+.4f}"))
    return 0


def cmd_validate(args) -> int:
    config = load_config(args.config)
    graph = config.workload.build(config.run.seeds[0])
    graph.validate()
    print(f"✅ {args.config} is valid: {len(graph)} tasks, {len(graph.data)} data items, "
          f"{config.platform.node_count} nodes, {len(config.run.seeds)} seed(s)")
    return 0


def cmd_gen(args) -> int:
    params = parse_kv(args.param)
    graph = generate(args.archetype, params, args.seed)
    path = write_workload(graph, args.output)
    print(f"🧬 Wrote {args.archetype} workload ({len(graph)} tasks) to {path}")
    return 0


# ------------------ Parser ------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtcsim", description="Many-task computing middleware simulator")
    parser.add_argument("--log-level", default=None, help="overrides MTCSIM_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run every seed of one experiment config")
    run.add_argument("config")
    run.add_argument("--workers", type=int, default=None, help="parallel seeds (default: run.workers or MTCSIM_WORKERS)")
    run.set_defaults(func=cmd_run)

    cmp = sub.add_parser("compare", help="compare configs that share one workload")
    cmp.add_argument("configs", nargs="+")
    cmp.add_argument("--workers", type=int, default=None)
    cmp.set_defaults(func=cmd_compare)

    val = sub.add_parser("validate", help="parse and validate a config without simulating")
    val.add_argument("config")
    val.set_defaults(func=cmd_validate)

    gen = sub.add_parser("gen", help="write a generated workload file")
    gen.add_argument("archetype", choices=sorted(ARCHETYPES))
    gen.add_argument("--param", action="append", default=[], metavar="KEY=VALUE")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("-o", "--output", required=True)
    gen.set_defaults(func=cmd_gen)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return args.func(args)
    except SimError as exc:
        print(f"❌ {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"❌ {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
