from __future__ import annotations

import argparse
import json
import sys

from .config import COMMANDS, SEED_LIMIT, ConfigError, load_config, load_experiment
from .experiments import run_experiment
from .store import RunStore


def _print(obj, stream=None) -> None:
    print(json.dumps(obj, indent=2, ensure_ascii=False), file=stream or sys.stdout)


def _seed(text: str) -> int:
    try:
        seed = int(text, 0)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from e
    if not 0 <= seed < SEED_LIMIT:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return seed


def cmd_experiment(a) -> int:
    try:
        exp = load_experiment(a.config, a.cmd, a.seed)
    except ConfigError as e:
        _print({"ok": False, "error": "config", "message": str(e)}, sys.stderr)
        return 2
    cfg = load_config()
    out = run_experiment(cfg=cfg, exp=exp, out_path=a.out)
    _print(out)
    return 0 if out["ok"] else 1


def cmd_runs(a) -> int:
    cfg = load_config()
    store = RunStore(cfg.db_path)
    runs = store.list_runs(limit=a.limit, command=a.command)
    _print({"count": len(runs), "runs": [r.__dict__ for r in runs]})
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hopf-heat", description="Semiclassical heat-kernel experiments")
    sub = p.add_subparsers(dest="cmd", required=True)

    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON experiment document; defaults apply when omitted")
        s.add_argument("--out", help="JSON report path; CSV tables are written next to it")
        s.add_argument("--seed", type=_seed, help="overrides the seed in the config")
        s.set_defaults(fn=cmd_experiment)

    s = sub.add_parser("runs")
    s.add_argument("--limit", type=int, default=50)
    s.add_argument("--command", choices=COMMANDS)
    s.set_defaults(fn=cmd_runs)

    return p


def main(argv=None) -> int:
    argv = argv if argv is not None else sys.argv[1:]
    args = build_parser().parse_args(argv)
    return int(args.fn(args))


if __name__ == "__main__":
    raise SystemExit(main())
