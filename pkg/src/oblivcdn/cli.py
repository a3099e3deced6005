"""``oblivcdn`` command line.

``setup`` creates a state directory; ``upload``, ``fetch`` and ``sync`` apply
one operation to it; ``report`` prints the metrics of everything applied so
far; ``bench`` runs a config's scenario in one or all modes.

The state directory holds a journal of operations plus uploaded payloads.
Each command rebuilds the deployment from the journal by replaying it, which
is exact because every run is deterministic for its config and seed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

from .control_plane import MODES
from .deployment import build
from .errors import ConfigError, OblivCdnError, RemoteError, UnknownKey
from .harness import Recorder, Step, bench_report, format_table, load_scenario, payload_for, read_config_text, to_csv
from .simnet import is_remote

JOURNAL = "journal.json"
EXIT_FAILURE = 1
EXIT_UNKNOWN_VID = 2

_SHORT = ["step", "op", "vid", "blocks", "latency_s", "intercontinental_bytes", "local_bytes", "subscriber_bytes", "edge_seeks", "ok"]


class _State:
    def __init__(self, root: Path):
        self.root = root
        self.blobs = root / "blobs"

    def exists(self) -> bool:
        return (self.root / JOURNAL).is_file()

    def load(self) -> dict:
        if not self.exists():
            raise ConfigError(f"no deployment at {self.root}; run `oblivcdn setup` first")
        return json.loads((self.root / JOURNAL).read_text())

    def save(self, journal: dict) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        tmp = self.root / (JOURNAL + ".tmp")
        tmp.write_text(json.dumps(journal, indent=1))
        tmp.replace(self.root / JOURNAL)

    def put_blob(self, data: bytes) -> str:
        digest = hashlib.sha256(data).hexdigest()
        self.blobs.mkdir(parents=True, exist_ok=True)
        (self.blobs / digest).write_bytes(data)
        return digest

    def blob(self, digest: str) -> bytes:
        data = (self.blobs / digest).read_bytes()
        if hashlib.sha256(data).hexdigest() != digest:
            raise ConfigError(f"payload {digest[:12]} in {self.blobs} is corrupt")
        return data


def _replay(state: _State, journal: dict, wall_clock: bool = False) -> Recorder:
    scenario = load_scenario(journal["config"], journal["seed"])
    rec = Recorder(build(scenario.config, journal["mode"], wall_clock=wall_clock))
    for op in journal["ops"]:
        if op[0] == "upload":
            _, vid, blocks, digest = op
            rec.run(Step("upload", vid, blocks), state.blob(digest))
        elif op[0] == "fetch":
            rec.run(Step("fetch", op[1]))
        else:
            rec.run(Step("sync"))
    return rec


def _emit(rows, out: str | None) -> None:
    sys.stdout.write(format_table(rows, _SHORT))
    if out:
        Path(out).write_text(to_csv(rows))


def cmd_setup(args) -> int:
    state = _State(Path(args.state))
    if state.exists() and not args.force:
        raise ConfigError(f"{state.root} already holds a deployment (use --force to replace it)")
    text = read_config_text(args.config)
    scenario = load_scenario(text, args.seed)
    build(scenario.config, args.mode)  # validates the config for this mode
    state.save({"config": text, "seed": scenario.config.seed, "mode": args.mode, "ops": []})
    c = scenario.config
    print(f"deployment ready at {state.root}: mode {args.mode}, seed {c.seed}, "
          f"L={c.levels} Z={c.bucket_size} B={c.block_size} R={c.max_range} v={c.stash_factor}")
    return 0


def cmd_upload(args) -> int:
    state = _State(Path(args.state))
    journal = state.load()
    rec = _replay(state, journal, args.wall_clock)
    B = rec.d.config.block_size
    if args.file:
        data = Path(args.file).read_bytes()
    else:
        data = payload_for(rec.d.config, args.vid, args.blocks)
    blocks = -(-len(data) // B)
    first = len(rec.rows)
    rec.run(Step("upload", args.vid, blocks), data)
    journal["ops"].append(["upload", args.vid, blocks, state.put_blob(data)])
    state.save(journal)
    _emit(rec.rows[first:], args.out)
    return 0


def cmd_fetch(args) -> int:
    state = _State(Path(args.state))
    journal = state.load()
    rec = _replay(state, journal, args.wall_clock)
    first = len(rec.rows)
    try:
        rec.run(Step("fetch", args.vid))
    except RemoteError as exc:
        if is_remote(exc, UnknownKey):
            print(f"unknown vid {args.vid!r}", file=sys.stderr)
            return EXIT_UNKNOWN_VID
        raise
    journal["ops"].append(["fetch", args.vid])
    state.save(journal)
    if args.output:
        Path(args.output).write_bytes(rec.last_fetch)
    _emit(rec.rows[first:], args.out)
    return 0 if rec.rows[-1].ok else EXIT_FAILURE


def cmd_sync(args) -> int:
    state = _State(Path(args.state))
    journal = state.load()
    rec = _replay(state, journal, args.wall_clock)
    first = len(rec.rows)
    rec.run(Step("sync"))
    journal["ops"].append(["sync"])
    state.save(journal)
    _emit(rec.rows[first:], args.out)
    return 0


def cmd_report(args) -> int:
    state = _State(Path(args.state))
    rec = _replay(state, state.load())
    _emit(rec.rows, args.out)
    return 0


def cmd_bench(args) -> int:
    scenario = load_scenario(read_config_text(args.config), args.seed)
    modes = list(MODES) if args.mode == "all" else [args.mode]
    text, table = bench_report(scenario, modes, wall_clock=args.wall_clock)
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="oblivcdn", description="Simulated oblivious CDN deployment and benchmarks.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *, bench: bool = False):
        sp.add_argument("--config", default="desk", help="INI config path or built-in name (desk, desk-4096, stash-v105)")
        sp.add_argument("--seed", type=int, default=None, help="overrides the config's scenario seed")
        choices = list(MODES) + (["all"] if bench else [])
        sp.add_argument("--mode", choices=choices, default="all" if bench else "oblivcdn")
        sp.add_argument("--out", default=None, help="write per-operation metrics as CSV here")
        sp.add_argument("--state", default=".oblivcdn", help="state directory (default: .oblivcdn)")
        sp.add_argument("--wall-clock", action="store_true", help="pace the simulation in real time")

    sp = sub.add_parser("setup", help="create a deployment state directory")
    common(sp)
    sp.add_argument("--force", action="store_true", help="replace an existing deployment")
    sp.set_defaults(func=cmd_setup)

    sp = sub.add_parser("upload", help="upload a video")
    common(sp)
    sp.add_argument("vid")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--file", help="payload file")
    src.add_argument("--blocks", type=int, help="generate a payload of this many blocks")
    sp.set_defaults(func=cmd_upload)

    sp = sub.add_parser("fetch", help="fetch a video as the subscriber")
    common(sp)
    sp.add_argument("vid")
    sp.add_argument("--output", help="write the fetched bytes here")
    sp.set_defaults(func=cmd_fetch)

    sp = sub.add_parser("sync", help="run any due batch evictions")
    common(sp)
    sp.set_defaults(func=cmd_sync)

    sp = sub.add_parser("report", help="metrics of every operation applied so far")
    common(sp)
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("bench", help="run the config's scenario and compare modes")
    common(sp, bench=True)
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "blocks", None) is not None and args.blocks < 1:
        print("error: --blocks must be positive", file=sys.stderr)
        return EXIT_FAILURE
    try:
        return args.func(args)
    except (OblivCdnError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
