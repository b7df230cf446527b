"""Command-line harness: run / compare / verify / simulate.

Config comes from a JSON file; flags override file fields (flags > file >
defaults).  Outputs land in the report directory as report.json, steps.jsonl,
timeline.json, and compare.csv.  Exit codes: 0 success, 2 config error,
3 numeric error, 4 fabric fault.  Set ZOSIM_LOG=debug|info|warning for
verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import bench
from .comm import (
    LinkTopology,
    SliceLayout,
    plan_naive_offload,
    plan_naive_upload,
    plan_sliced_offload,
    plan_sliced_upload,
    simulate_plan,
    sliced_upload_time,
)
from .errors import ConfigurationError, FabricFault, NumericError, ZosimError

log = logging.getLogger("zosim")


def _setup_logging() -> None:
    level = os.environ.get("ZOSIM_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _config_overrides(args) -> dict:
    over: dict = {}
    if args.strategy:
        over["strategy"] = args.strategy
    if args.steps is not None:
        over.setdefault("hyper", {})["steps"] = args.steps
    if args.epsilon is not None:
        over.setdefault("hyper", {})["epsilon"] = args.epsilon
    if args.lr is not None:
        over.setdefault("hyper", {})["lr"] = args.lr
    if args.batch_size is not None:
        over["batch_size"] = args.batch_size
    if args.workers is not None:
        over.setdefault("mesh", {})["workers"] = args.workers
    if args.n_b is not None:
        over.setdefault("mesh", {})["n_b"] = args.n_b
    if args.ordering:
        over.setdefault("mesh", {})["ordering"] = args.ordering
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out:
        over["report_dir"] = args.out
    return over


def _load_run_config(args) -> bench.RunConfig:
    over = _config_overrides(args)
    if args.config:
        return bench.RunConfig.from_file(args.config, over)
    if "model" not in over:
        raise ConfigurationError("run needs --config (no model given on the command line)")
    return bench.RunConfig.from_dict(over)


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("-c", "--config", help="JSON run config file")
    p.add_argument("--strategy", choices=bench.STRATEGIES)
    p.add_argument("--steps", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--n-b", type=int, dest="n_b")
    p.add_argument("--ordering", choices=bench.ORDERINGS)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="report directory")


def cmd_run(args) -> int:
    config = _load_run_config(args)
    report = bench.run(config)
    print(json.dumps(report.to_dict(), indent=1))
    return 0


def cmd_compare(args) -> int:
    configs = [bench.RunConfig.from_file(path) for path in args.configs]
    rows, csv_text = bench.compare(configs)
    out_path = args.output or "compare.csv"
    with open(out_path, "w") as f:
        f.write(csv_text)
    print(csv_text, end="")
    log.info("wrote %s (%d rows)", out_path, len(rows))
    return 0


def cmd_verify(args) -> int:
    config = bench.RunConfig.from_file(args.config) if args.config else None
    results = bench.verify(config)
    for r in results:
        mark = "PASS" if r["passed"] else "FAIL"
        detail = f"  ({r['detail']})" if r.get("detail") else ""
        print(f"[{mark}] {r['name']}{detail}")
    if args.output:
        with open(args.output, "w") as f:
            json.dump(results, f, indent=1)
    return 0 if all(r["passed"] for r in results) else 1


def cmd_simulate(args) -> int:
    topo = LinkTopology.from_json(args.topology) if args.topology else LinkTopology(
        host_bw=1.0, peer_bw=6.0, devices=args.devices, host_channel="shared"
    )
    n = args.devices
    if args.plan == "sliced":
        layout = SliceLayout.build(0, args.params, n)
        plan = (plan_sliced_upload if args.op == "upload" else plan_sliced_offload)(layout, topo)
    else:
        plan = (plan_naive_upload if args.op == "upload" else plan_naive_offload)(args.params, n, topo)
    timeline = simulate_plan(plan, topo)
    summary = {
        "plan": plan.kind,
        "params": args.params,
        "devices": n,
        "makespan": timeline.makespan,
        "host_link_volume": plan.host_link_volume(),
        "peer_link_volume": plan.peer_link_volume(),
        "analytic_sliced_upload_time": sliced_upload_time(args.params, n, topo),
        "utilization": timeline.utilization,
    }
    print(json.dumps(summary, indent=1))
    if args.output:
        with open(args.output, "w") as f:
            json.dump(timeline.to_rows(), f, indent=1)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="zosim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="train under one strategy and report")
    _add_run_flags(p_run)
    p_run.set_defaults(fn=cmd_run)

    p_cmp = sub.add_parser("compare", help="run several configs, tabulate speedups")
    p_cmp.add_argument("configs", nargs="+", help="JSON run config files")
    p_cmp.add_argument("-o", "--output", help="CSV output path (default compare.csv)")
    p_cmp.set_defaults(fn=cmd_compare)

    p_ver = sub.add_parser("verify", help="cross-strategy equivalence suite")
    p_ver.add_argument("-c", "--config", help="JSON run config file (small f64 model)")
    p_ver.add_argument("-o", "--output", help="JSON report path")
    p_ver.set_defaults(fn=cmd_verify)

    p_sim = sub.add_parser("simulate", help="interconnect transfer-plan simulation")
    p_sim.add_argument("--topology", help="JSON topology profile")
    p_sim.add_argument("--params", type=int, default=1200, help="block size in parameters")
    p_sim.add_argument("--devices", type=int, default=4)
    p_sim.add_argument("--plan", choices=("sliced", "naive"), default="sliced")
    p_sim.add_argument("--op", choices=("upload", "offload"), default="upload")
    p_sim.add_argument("-o", "--output", help="timeline JSON path")
    p_sim.set_defaults(fn=cmd_simulate)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigurationError as e:
        _emit_error(e)
        return 2
    except NumericError as e:
        _emit_error(e)
        return 3
    except FabricFault as e:
        _emit_error(e)
        return 4
    except ZosimError as e:
        _emit_error(e)
        return 1


def _emit_error(e: ZosimError) -> None:
    print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
