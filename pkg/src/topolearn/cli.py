"""Command line front-end.

Verbs: ``run <config>``, ``analyze <checkpoint> <config>``, ``inspect <checkpoint>``
and ``gen-topology <spec>``. Failures print one JSON line to stderr and exit 1.
"""
from __future__ import annotations

import argparse
import json
import sys

from .config import load_config
from .graph import dumps_graph, make_topology, topology_metrics


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # noqa: D401 - argparse hook
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="topolearn", description="Train and analyse networks with learnable DAG topologies.")
    sub = p.add_subparsers(dest="verb", required=True)

    run = sub.add_parser("run", help="train and analyse per a JSON config")
    run.add_argument("config")
    run.add_argument("--output-dir")
    run.add_argument("--seed", type=int)

    an = sub.add_parser("analyze", help="run the configured sweeps on a checkpoint")
    an.add_argument("checkpoint")
    an.add_argument("config")
    an.add_argument("--output-dir")
    an.add_argument("--seed", type=int)

    ins = sub.add_parser("inspect", help="summarise a checkpoint as JSON")
    ins.add_argument("checkpoint")

    gen = sub.add_parser("gen-topology", help="print a stage graph in text form")
    gen.add_argument("spec", help='JSON, e.g. \'{"type": "ws", "n": 10, "k": 4, "p": 0.25}\'')
    gen.add_argument("--nodes", type=int, help="node count if the topology JSON has no 'n'")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--metrics", action="store_true", help="print topology metrics as JSON instead")
    return p


def _gen_topology(args) -> None:
    try:
        spec = json.loads(args.spec)
    except json.JSONDecodeError as exc:
        raise UsageError(f"spec is not valid JSON: {exc}") from exc
    if not isinstance(spec, dict):
        raise UsageError("spec must be a JSON object")
    n = spec.pop("n", args.nodes)
    if n is None:
        raise UsageError("node count missing: give 'n' in the topology JSON or --nodes")
    g = make_topology(spec, int(n), args.seed)
    if args.metrics:
        m = topology_metrics(g)
        print(json.dumps({k: getattr(m, k) for k in m.__dataclass_fields__}, sort_keys=True))
    else:
        sys.stdout.write(dumps_graph(g))


def main(argv: list[str] | None = None) -> int:
    from .experiment import analyze_checkpoint, inspect_checkpoint, run_experiment

    try:
        args = build_parser().parse_args(argv)
        if args.verb == "run":
            manifest = run_experiment(load_config(args.config, args.output_dir, args.seed))
            print(json.dumps({"status": "ok", "manifest": str(manifest)}))
        elif args.verb == "analyze":
            manifest = analyze_checkpoint(load_config(args.config, args.output_dir, args.seed), args.checkpoint)
            print(json.dumps({"status": "ok", "manifest": str(manifest)}))
        elif args.verb == "inspect":
            print(json.dumps(inspect_checkpoint(args.checkpoint), sort_keys=True))
        else:
            _gen_topology(args)
    except Exception as exc:  # every failure becomes one machine-readable line
        line = json.dumps({"status": "error", "error": type(exc).__name__, "message": str(exc)})
        print(line, file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
