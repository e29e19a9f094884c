"""Command-line entry point: run, validate, and report on scenarios.

Configs are JSON files with the ScenarioConfig schema (see README). `run`
exits 0 only when the scenario's confidentiality assertions hold.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import EdgeQkdError, InvalidConfigError
from .harness import ScenarioConfig, compute_metrics, run_scenario
from .transport import Transcript


def _load_config(path: str, seed_hex: str | None) -> ScenarioConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise InvalidConfigError(f"cannot read {path}: {exc}") from exc
    except ValueError as exc:
        raise InvalidConfigError(f"{path} is not valid JSON: {exc}") from exc
    if seed_hex is not None:
        if not isinstance(doc, dict) or "qkd" not in doc:
            raise InvalidConfigError("config has no qkd section to seed")
        try:
            bytes.fromhex(seed_hex)
        except ValueError as exc:
            raise InvalidConfigError(f"--seed must be hex: {exc}") from exc
        doc["qkd"] = dict(doc["qkd"], seed=seed_hex)
    return ScenarioConfig.from_doc(doc)


def _cmd_run(args: argparse.Namespace) -> int:
    config = _load_config(args.config, args.seed)
    result = run_scenario(config)
    metrics_doc = {
        "metrics": result.metrics.to_doc(),
        "pool": result.pool_stats,
        "wiretap": result.wiretap.to_doc(),
    }
    rendered = json.dumps(metrics_doc, indent=2, sort_keys=True)
    if args.metrics_out:
        Path(args.metrics_out).write_text(rendered + "\n")
    else:
        print(rendered)
    if args.transcript_out:
        Path(args.transcript_out).write_bytes(result.transcript_ndjson())
    if not result.ok:
        print(f"wiretap: {len(result.wiretap.findings)} forbidden plaintext "
              f"occurrence(s) on inter-domain channels", file=sys.stderr)
        return 1
    return 0


def _cmd_validate(args: argparse.Namespace) -> int:
    _load_config(args.config, None)
    print(f"{args.config}: ok")
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    try:
        data = Path(args.transcript).read_bytes()
    except OSError as exc:
        raise InvalidConfigError(f"cannot read {args.transcript}: {exc}") from exc
    records = Transcript.parse_ndjson(data)
    metrics = compute_metrics(records)
    rendered = json.dumps(metrics.to_doc(), indent=2, sort_keys=True)
    if args.metrics_out:
        Path(args.metrics_out).write_text(rendered + "\n")
    else:
        print(rendered)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="edgeqkd",
        description="Run end-to-end scenarios of QKD-keyed edge request/response traffic.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a scenario config")
    p_run.add_argument("config")
    p_run.add_argument("--metrics-out", help="write the metrics JSON here instead of stdout")
    p_run.add_argument("--transcript-out", help="write the NDJSON transcript here")
    p_run.add_argument("--seed", help="hex seed overriding qkd.seed")
    p_run.set_defaults(fn=_cmd_run)

    p_val = sub.add_parser("validate", help="check a scenario config without running it")
    p_val.add_argument("config")
    p_val.set_defaults(fn=_cmd_validate)

    p_rep = sub.add_parser("report", help="recompute metrics from a stored transcript")
    p_rep.add_argument("transcript")
    p_rep.add_argument("--metrics-out")
    p_rep.set_defaults(fn=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except EdgeQkdError as exc:
        print(f"error [{exc.code}]: {exc.message}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
