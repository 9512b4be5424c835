"""Command line driver: ``brwx <subcommand> --config FILE --seed U64 --out DIR``.

Exit codes: 0 when every check passes, 1 when a check fails, 2 on usage or
input errors.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import experiments as E
from .model import CalibrationError, LawFileError, calibrate, check_boundary, dump_law, law_to_dict, load_law

EXIT_PASS, EXIT_FAIL, EXIT_INPUT = 0, 1, 2


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _seed(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_config(args: argparse.Namespace) -> E.ExperimentConfig:
    obj = E.load_config(args.config) if args.config else {}
    if not isinstance(obj, dict):
        raise E.ConfigError("configuration must be a JSON object")
    obj["experiment"] = args.command
    if args.seed is not None:
        obj["seed"] = args.seed
    if args.n is not None:
        obj["n"] = args.n
    if args.replicas is not None:
        obj["replicas"] = args.replicas
    if args.chunk is not None:
        obj["chunk"] = args.chunk
    if args.model is not None:
        obj["model"] = E.model_spec(args.model)
    params = dict(obj.get("params", {}))
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise E.ConfigError(f"--set expects key=value, got {item!r}")
        params[key] = _parse_value(value)
    obj["params"] = params
    return E.ExperimentConfig.from_dict(obj)


def _print_checks(outcome: E.Outcome) -> None:
    for name, ok in outcome.summary.get("checks", {}).items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    print("passed" if outcome.passed else "failed")


def cmd_experiment(args) -> int:
    cfg = build_config(args)
    outcome = E.run(cfg, args.workers)
    if args.out:
        for p in E.write_outcome(outcome, args.out):
            print(f"wrote {p}")
    else:
        sys.stdout.write(E.summary_text(outcome.summary))
    _print_checks(outcome)
    return EXIT_PASS if outcome.passed else EXIT_FAIL


def cmd_model(args) -> int:
    law = load_law(args.law)
    if args.action == "calibrate":
        try:
            law = calibrate(law)
        except CalibrationError as exc:
            print(json.dumps({"calibrated": False, "error": str(exc)}, indent=2))
            return EXIT_FAIL
    report = check_boundary(law)
    out = {"law": law_to_dict(law), "report": report.to_dict()}
    print(json.dumps(E._clean(out), indent=2, sort_keys=True))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "report.json").write_text(E.summary_text(out), encoding="utf-8")
        if args.action == "calibrate":
            dump_law(law, Path(args.out) / "law.json")
    return EXIT_PASS if report.passed else EXIT_FAIL


def cmd_oracle(args) -> int:
    fixtures = [f for f in args.fixtures.split(",") if f.strip()] if args.fixtures is not None else list(E.ORACLE_FIXTURES)
    rows = E.run_oracle(fixtures, args.max_n, args.inject_bug)
    print(f"{'fixture':<10}{'n':>3}  {'check':<15}{'value':>12}{'tol':>10}  verdict")
    for r in rows:
        print(f"{r.fixture:<10}{r.n:>3}  {r.check:<15}{r.value:>12.3e}{r.tol:>10.0e}  {'PASS' if r.passed else 'FAIL'}")
    ok = all(r.passed for r in rows)
    print("all identities hold" if ok else "identity failures detected")
    return EXIT_PASS if ok else EXIT_FAIL


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="brwx", description="Leftmost-path experiments for boundary-case branching random walks.")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_ in [
        ("theorem", "rescaled leftmost path versus the normalized excursion along an n-ladder"),
        ("tail", "lower tail of the minimum, direct and importance-sampled"),
        ("conditioned", "leftmost path conditioned on a low minimum"),
        ("lines", "sums over first-crossing stopping lines"),
        ("excursion", "excursion and meander sampler checks"),
        ("walk", "renewal function and stay-positive probabilities"),
    ]:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=_seed, help="root seed (unsigned 64-bit)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--workers", type=int, default=1, help="worker processes (outputs do not depend on it)")
        p.add_argument("--n", type=_int_list, help="comma-separated generation counts")
        p.add_argument("--replicas", type=int)
        p.add_argument("--chunk", type=int, help="replicas per random-stream block")
        p.add_argument("--model", help="law file, zoo name or cosh:<m>")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override an experiment parameter (JSON value)")
        p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("model", help="boundary check or calibration of a law file")
    p.add_argument("action", choices=["check", "calibrate"])
    p.add_argument("law", help="law file (JSON)")
    p.add_argument("--out", help="directory for report.json (and law.json when calibrating)")
    p.set_defaults(func=cmd_model)

    p = sub.add_parser("oracle", help="exact identity suite on small trees")
    p.add_argument("--fixtures", help="comma-separated zoo names (default cosh2,bin2)")
    p.add_argument("--max-n", type=int, default=3)
    p.add_argument("--inject-bug", action="store_true", help="negate the spine tilt to check the oracle notices")
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (E.ConfigError, LawFileError, E.InsufficientSample, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
