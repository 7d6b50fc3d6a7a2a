"""Command-line entry point.

Subcommands run either the whole discovery pipeline or one stage of it.
Stages communicate through files in the output directory, so `discover` and
the staged commands produce identical artifacts.  Errors map onto distinct
exit codes: 2 configuration, 3 backend, 4 retrieval, 5 internal invariant.
"""
from __future__ import annotations

import argparse
import json
import sys
from typing import Optional, Sequence

from .config import load_config
from .errors import (
    BackendError,
    ConfigurationError,
    GraphError,
    InvariantViolation,
    LatentScoutError,
    RetrievalError,
    UsageError,
)
from . import pipeline

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BACKEND = 3
EXIT_RETRIEVAL = 4
EXIT_INVARIANT = 5


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentscout",
        description="Name hidden variables in causal graphs with trained "
                    "multi-agent inference and evidence verification.")
    sub = parser.add_subparsers(dest="command", required=True)
    descriptions = {
        "discover": "run the full pipeline: train, infer, verify, eval",
        "train": "train policies; writes checkpoint and logs",
        "infer": "propose hypotheses with a trained checkpoint",
        "verify": "search evidence for existing hypotheses",
        "eval": "score hypotheses and evidence against ground truth",
    }
    for name, help_text in descriptions.items():
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", required=True, help="path to the TOML run config")
        cmd.add_argument("--seed", type=int, default=None,
                         help="override the configured seed")
        cmd.add_argument("--offline", action="store_true",
                         help="force recorded fixtures instead of live sources")
        cmd.add_argument("--out", default=None, help="override the output directory")
        cmd.add_argument("--checkpoint", default=None,
                         help="checkpoint to use instead of the trained one")
    return parser


def _emit_error(exc: LatentScoutError, code: int) -> int:
    payload = {"error": {"type": type(exc).__name__, "message": str(exc),
                         "exit_code": code}}
    print(json.dumps(payload), file=sys.stderr)
    return code


def cmd_discover(config) -> None:
    report = pipeline.run_discover(config)
    paths = pipeline.artifact_paths(config)
    print(f"discovered {report.total_latents} latents: "
          f"acc={report.acc:.3f} cacc={report.cacc:.3f} ecit={report.ecit:.3f}")
    for key in ("hypotheses", "evidence", "metrics"):
        print(f"wrote {paths[key]}")


def cmd_train(config) -> None:
    result = pipeline.run_train(config)
    paths = pipeline.artifact_paths(config)
    suffix = " (stopped early)" if result.stopped_early else ""
    print(f"trained {len(result.history)} episodes{suffix}")
    print(f"wrote {paths['checkpoint']}")
    if result.ledger is not None:
        print(f"wrote {paths['regret']}")


def cmd_infer(config) -> None:
    outcomes = pipeline.run_infer(config)
    paths = pipeline.artifact_paths(config)
    for outcome in outcomes:
        hyp = outcome.hypothesis
        print(f"{hyp.latent_id}: {hyp.proposed_name!r} "
              f"(confidence {hyp.confidence:.2f})")
    print(f"wrote {paths['hypotheses']}")


def cmd_verify(config) -> None:
    records, n, eg, ea = pipeline.run_verify(config)
    paths = pipeline.artifact_paths(config)
    print(f"verified {len(records)} edges: n={n} EG={eg} EA={ea}")
    print(f"wrote {paths['evidence']}")


def cmd_eval(config) -> None:
    report = pipeline.run_eval(config)
    paths = pipeline.artifact_paths(config)
    print(f"acc={report.acc:.3f} cacc={report.cacc:.3f} ecit={report.ecit:.3f}")
    print(f"wrote {paths['metrics']}")


COMMANDS = {
    "discover": cmd_discover,
    "train": cmd_train,
    "infer": cmd_infer,
    "verify": cmd_verify,
    "eval": cmd_eval,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    try:
        config = load_config(
            args.config, seed=args.seed,
            offline=True if args.offline else None,
            out=args.out, checkpoint=args.checkpoint)
        COMMANDS[args.command](config)
    except (ConfigurationError, UsageError, GraphError) as exc:
        return _emit_error(exc, EXIT_CONFIG)
    except BackendError as exc:
        return _emit_error(exc, EXIT_BACKEND)
    except RetrievalError as exc:
        return _emit_error(exc, EXIT_RETRIEVAL)
    except InvariantViolation as exc:
        return _emit_error(exc, EXIT_INVARIANT)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
