"""Command-line entry point: ``maple <subcommand>``."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import yaml

from .errors import BackendError, BudgetExceededError, ConfigError, InvalidArgumentError, MapleError
from .privacy import calibrate_rho, zcdp_to_approx_dp

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_BACKEND, EXIT_BUDGET = 0, 1, 2, 3, 4
STAGE_COMMANDS = ("extract", "fit-metadata", "synthesize", "evaluate", "run")


def _parse_set(items: list[str]) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(raw)
    return out


def _load(args):
    from .pipeline import load_config

    return load_config(args.config, _parse_set(args.set))


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    return "inf" if math.isinf(x) else f"{x:.6g}"


def cmd_stage(args) -> int:
    from .pipeline import run_pipeline

    config = _load(args)
    stop = None if args.command == "run" else args.command
    result = run_pipeline(config, stop_after=stop, force=args.force)
    ran = ", ".join(result.executed) or "nothing (all stages up to date)"
    print(f"run directory: {result.run_dir}")
    print(f"stages executed: {ran}")
    print(f"rho spent: {_fmt(result.ledger.total)} of {_fmt(result.ledger.granted)}")
    if result.report is not None:
        print(f"avg_jsd: {result.report.avg_jsd:.4f}  mauve_lite: {result.report.mauve_lite:.4f}")
    return EXIT_OK


def _parse_values(axis: str, raw: str) -> list:
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if axis == "epsilon":
        return [math.inf if p.lower() in ("inf", "infinity") else float(p) for p in parts]
    if axis == "iterations":
        return [int(p) for p in parts]
    if axis == "schema_subset":
        return ["full" if p == "full" else p.split("+") for p in parts]
    return parts


def cmd_sweep(args) -> int:
    from .pipeline import run_sweep

    config = _load(args)
    try:
        values = _parse_values(args.axis, args.values)
    except ValueError as exc:
        raise ConfigError(f"bad --values for axis {args.axis}: {exc}") from exc
    path = run_sweep(config, args.axis, values, args.out)
    print(f"merged metrics: {path}")
    return EXIT_OK


def cmd_budget(args) -> int:
    rho = calibrate_rho(args.epsilon, args.delta)
    print(json.dumps({"epsilon": _fmt(args.epsilon), "delta": args.delta, "rho": _fmt(rho),
                      "roundtrip_epsilon": _fmt(zcdp_to_approx_dp(rho, args.delta))}))
    return EXIT_OK


def cmd_mock_data(args) -> int:
    from .backends.mock import MockCompletionBackend, mock_corpus, skewed_table
    from .pipeline.ingest import write_jsonl
    from .schema import load_schema

    schema = load_schema(args.schema)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = skewed_table(schema, args.n_private + args.n_donated, args.seed)
    vocab = MockCompletionBackend(schema).background_vocab
    texts = mock_corpus(table, vocab, args.seed)
    rows = table.rows
    n = args.n_private
    write_jsonl(out / "private.jsonl", ({"text": t} for t in texts[:n]))
    write_jsonl(out / "donated.jsonl", ({"metadata": r.as_dict(), "text": t} for r, t in zip(rows[n:], texts[n:])))
    config = {
        "data": {"private": "private.jsonl", "donated": "donated.jsonl", "schema": args.schema},
        "mode": "maple",
        "epsilon": 4.0,
        "pe": {"n_syn": args.n_syn, "iterations": 4},
        "seed": args.seed,
        "output_dir": "runs/maple",
    }
    (out / "config.yaml").write_text(yaml.safe_dump(config, sort_keys=False), encoding="utf-8")
    print(f"wrote {n} private texts, {args.n_donated} donated pairs and config.yaml to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="maple", description="Differentially private synthetic text with "
                                "metadata-grounded private evolution.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-vv for debug)")
    sub = p.add_subparsers(dest="command", required=True)

    helps = {
        "extract": "annotate the private corpus with metadata",
        "fit-metadata": "fit the DP metadata synthesizer and sample synthetic metadata",
        "synthesize": "generate the initial pool and run private evolution",
        "evaluate": "score every iteration against the private corpus",
        "run": "all stages, resuming from checkpoints",
    }
    for name in STAGE_COMMANDS:
        sp = sub.add_parser(name, help=helps[name])
        sp.add_argument("--config", required=True, help="YAML run configuration")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field, e.g. --set pe.iterations=3 (repeatable)")
        sp.add_argument("--force", action="store_true", help="ignore existing checkpoints")
        sp.set_defaults(func=cmd_stage)

    sp = sub.add_parser("sweep", help="one run per axis value with a merged metrics CSV")
    sp.add_argument("--config", required=True)
    sp.add_argument("--set", action="append", metavar="KEY=VALUE")
    sp.add_argument("--axis", required=True, choices=("epsilon", "iterations", "mode", "schema_subset"))
    sp.add_argument("--values", required=True,
                    help="comma-separated values; schema subsets join attributes with '+' (or 'full')")
    sp.add_argument("--out", help="sweep root directory (default: the config's output_dir)")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("budget", help="convert (epsilon, delta) to a zCDP rho")
    sp.add_argument("--epsilon", type=float, required=True)
    sp.add_argument("--delta", type=float, required=True)
    sp.set_defaults(func=cmd_budget)

    sp = sub.add_parser("mock-data", help="write a mock private corpus, donated set and config")
    sp.add_argument("--out", required=True)
    sp.add_argument("--schema", default="biorxiv")
    sp.add_argument("--n-private", type=int, default=3000)
    sp.add_argument("--n-donated", type=int, default=50)
    sp.add_argument("--n-syn", type=int, default=500)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_mock_data)
    return p


def _exit_code(exc: BaseException) -> int:
    chain = exc
    while chain is not None:
        if isinstance(chain, BudgetExceededError):
            return EXIT_BUDGET
        if isinstance(chain, BackendError):
            return EXIT_BACKEND
        chain = chain.__cause__
    if isinstance(exc, (ConfigError, InvalidArgumentError)):
        return EXIT_CONFIG
    return EXIT_ERROR


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MapleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
