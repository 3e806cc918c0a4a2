"""Command line entry points.

  gradprune run <config.ini>      execute a scheduled run, write reports
  gradprune count <config.ini>    static parameter / FLOP counts only
  gradprune verify <run-dir>      replay bookkeeping audits over a saved log

Exit codes: 0 success, 2 configuration error, 3 verification/audit failure,
1 anything unexpected.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .config import ConfigError, load_config
from .harness import build_model, run, verify_run_dir, write_run_outputs
from .pruning import AuditError, count_flops, count_params


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="gradprune",
        description="Train CNNs while progressively pruning filters by gradient criteria.")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="execute a run and write reports")
    p_run.add_argument("config")
    p_run.add_argument("--output-dir", default=None,
                       help="override [run] output_dir from the config")
    p_count = sub.add_parser("count", help="print params/FLOPs of the configured model")
    p_count.add_argument("config")
    p_verify = sub.add_parser("verify", help="audit a saved run directory")
    p_verify.add_argument("run_dir")
    args = parser.parse_args(argv)

    try:
        if args.command == "run":
            cfg = load_config(args.config)
            out_dir = args.output_dir or cfg["run"]["output_dir"]
            if not out_dir:
                raise ConfigError("no output directory: set [run] output_dir or --output-dir")
            result = run(cfg)
            write_run_outputs(result, out_dir)
            last = result.reports[-1]
            print(f"done: {len(result.reports)} epochs, final error "
                  f"{last.error_post:.2f}%, params {last.params}, flops {last.flops}")
            print(f"reports written to {out_dir}")
            return 0
        if args.command == "count":
            cfg = load_config(args.config)
            rng = np.random.default_rng(cfg["run"]["init_seed"])
            graph = build_model(cfg, rng)
            chw = (cfg["model"]["in_channels"], cfg["model"]["image_size"],
                   cfg["model"]["image_size"])
            print(f"model: {cfg['model']['name']}")
            print(f"params: {count_params(graph)}")
            print(f"flops: {count_flops(graph, chw)}")
            return 0
        if args.command == "verify":
            problems = verify_run_dir(args.run_dir)
            if problems:
                print("verification failed:")
                for p in problems:
                    print(f"  {p}")
                return 3
            print("run log consistent")
            return 0
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except AuditError as e:
        print(f"audit failure: {e}", file=sys.stderr)
        return 3
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 1


if __name__ == "__main__":
    sys.exit(main())
