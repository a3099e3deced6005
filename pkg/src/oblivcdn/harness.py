"""Scenario configs, scripted runs and metric reports for the command line.

A config is an INI file with ``[system]``, ``[network]`` and ``[scenario]``
sections; a few named configs are built in. Scenario scripts are one
operation per line::

    upload a 13      # video "a", 13 blocks of generated payload
    fetch a x3       # three fetches
    sync

Every run is deterministic for a given config and seed: payloads come from
the seeded DRBG, all time is virtual, and reports only contain virtual-time
and byte counts.
"""

from __future__ import annotations

import configparser
import csv
import io
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .control_plane import MODES, SystemConfig
from .crypto import Drbg
from .deployment import Deployment, build
from .errors import ConfigError

DESK = """
[system]
levels = 11
bucket_size = 4
block_size = 2048
max_range = 8
stash_factor = 64
max_videos = 1024

[network]
local_rtt_ms = 1
remote_rtt_ms = 400

[scenario]
name = desk
seed = 7
script =
    upload a 1
    upload b 13
    upload c 64
    fetch a
    fetch b x2
    fetch c
    sync
"""

BUILTIN = {
    "desk": DESK,
    "desk-4096": DESK.replace("block_size = 2048", "block_size = 4096").replace("name = desk", "name = desk-4096"),
    "stash-v105": DESK.replace("stash_factor = 64", "stash_factor = 105").replace("name = desk", "name = stash-v105"),
}

_INT_FIELDS = ("levels", "bucket_size", "block_size", "max_range", "stash_factor", "max_videos",
               "capacity_per_tree", "epoch_retries", "ticket_retries")


@dataclass(frozen=True)
class Step:
    op: str  # upload | fetch | sync
    vid: str = ""
    blocks: int = 0


@dataclass(frozen=True)
class Scenario:
    name: str
    config: SystemConfig
    steps: tuple[Step, ...]


def parse_script(text: str) -> tuple[Step, ...]:
    steps: list[Step] = []
    defined: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        op = parts[0]
        if op == "upload" and len(parts) == 3:
            vid, blocks = parts[1], _positive(parts[2], lineno)
            if vid in defined:
                raise ConfigError(f"script line {lineno}: video {vid!r} uploaded twice")
            defined[vid] = blocks
            steps.append(Step("upload", vid, blocks))
        elif op == "fetch" and len(parts) in (2, 3):
            vid = parts[1]
            if vid not in defined:
                raise ConfigError(f"script line {lineno}: video {vid!r} fetched before upload")
            times = 1
            if len(parts) == 3:
                if not parts[2].startswith("x"):
                    raise ConfigError(f"script line {lineno}: repeat count must look like x3")
                times = _positive(parts[2][1:], lineno)
            steps.extend(Step("fetch", vid, defined[vid]) for _ in range(times))
        elif op == "sync" and len(parts) == 1:
            steps.append(Step("sync"))
        else:
            raise ConfigError(f"script line {lineno}: cannot parse {line!r}")
    return tuple(steps)


def _positive(text: str, lineno: int) -> int:
    try:
        v = int(text)
    except ValueError:
        raise ConfigError(f"script line {lineno}: {text!r} is not an integer") from None
    if v < 1:
        raise ConfigError(f"script line {lineno}: count must be positive")
    return v


def read_config_text(source: str) -> str:
    """A built-in config name or a path to an INI file."""
    if source in BUILTIN:
        return BUILTIN[source]
    path = Path(source)
    if not path.is_file():
        raise ConfigError(f"no config file {source!r} (built-in configs: {', '.join(BUILTIN)})")
    return path.read_text()


def load_scenario(text: str, seed: int | None = None) -> Scenario:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";",))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"bad config: {exc}") from None
    kwargs: dict = {}
    if cp.has_section("system"):
        sec = cp["system"]
        for key in sec:
            if key in _INT_FIELDS:
                kwargs[key] = _int(sec, key)
            elif key == "edge_layout":
                kwargs[key] = sec[key]
            else:
                raise ConfigError(f"unknown [system] key {key!r}")
    if cp.has_section("network"):
        sec = cp["network"]
        for key in sec:
            value = sec[key].strip()
            if key in ("local_rtt_ms", "remote_rtt_ms"):
                kwargs[key[:-3]] = _float(key, value) / 1000.0
            elif key in ("local_bandwidth", "remote_bandwidth"):
                kwargs[key] = _float(key, value) if value else None
            else:
                raise ConfigError(f"unknown [network] key {key!r}")
    sc = cp["scenario"] if cp.has_section("scenario") else {}
    scenario_seed = int(sc.get("seed", 0))
    kwargs["seed"] = seed if seed is not None else scenario_seed
    config = SystemConfig(**kwargs)
    return Scenario(sc.get("name", "unnamed"), config, parse_script(sc.get("script", "")))


def _int(sec, key: str) -> int:
    try:
        return sec.getint(key)
    except ValueError:
        raise ConfigError(f"[system] {key} must be an integer") from None


def _float(key: str, value: str) -> float:
    try:
        v = float(value)
    except ValueError:
        raise ConfigError(f"{key} must be a number") from None
    if v < 0:
        raise ConfigError(f"{key} must be non-negative")
    return v


def payload_for(config: SystemConfig, vid: str, blocks: int) -> bytes:
    # a ragged tail exercises padding of the last block
    tail = config.block_size // 3 if blocks > 1 else 0
    return Drbg(config.seed).spawn(f"payload/{vid}").bytes(blocks * config.block_size - tail)


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class OpRecord:
    mode: str
    step: int
    op: str
    vid: str
    blocks: int
    latency_s: float  # subscriber-visible for fetches, elapsed virtual time otherwise
    elapsed_s: float  # including background work
    intercontinental_bytes: int
    local_bytes: int
    subscriber_bytes: int
    instruction_bytes: int
    instruction_bytes_excl_masks: int
    edge_seeks: int
    ok: bool


class Recorder:
    """Runs steps on a deployment and records one metrics row per step."""

    def __init__(self, deployment: Deployment):
        self.d = deployment
        self.rows: list[OpRecord] = []
        self.oracle: dict[str, bytes] = {}
        self.last_fetch = b""

    def _counters(self):
        d = self.d
        m = d.plane.metrics
        seeks = sum(s.ledger.seeks for s in d.stores.values())
        return d.net.now, d.net.remote_bytes(), d.net.local_bytes(), m.instruction_bytes, m.instruction_bytes_excl_masks, seeks

    def run(self, step: Step, data: bytes | None = None) -> OpRecord:
        d = self.d
        before = self._counters()
        latency = None
        sub_bytes = 0
        ok = True
        if step.op == "upload":
            if data is None:
                data = payload_for(d.config, step.vid, step.blocks)
            d.upload(step.vid, data)
            self.oracle[step.vid] = data
        elif step.op == "fetch":
            res = d.fetch(step.vid)
            self.last_fetch = res.data
            latency = res.latency
            sub_bytes = res.downloaded
            if not step.blocks:
                size = d.plane.plain_sizes.get(step.vid, 0)
                step = Step("fetch", step.vid, -(-size // d.config.block_size))
            expect = self.oracle.get(step.vid)
            ok = expect is None or res.data == expect
        elif step.op == "sync":
            d.sync()
        else:
            raise ConfigError(f"unknown operation {step.op!r}")
        after = self._counters()
        delta = [a - b for a, b in zip(after, before)]
        row = OpRecord(
            d.mode, len(self.rows) + 1, step.op, step.vid, step.blocks,
            round(latency if latency is not None else delta[0], 6), round(delta[0], 6),
            delta[1], delta[2], sub_bytes, delta[3], delta[4], delta[5], ok,
        )
        self.rows.append(row)
        return row


def run_scenario(scenario: Scenario, mode: str, *, wall_clock: bool = False) -> list[OpRecord]:
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
    rec = Recorder(build(scenario.config, mode, wall_clock=wall_clock))
    for step in scenario.steps:
        rec.run(step)
    return rec.rows


COLUMNS = [f.name for f in fields(OpRecord)]


def to_csv(rows: list[OpRecord]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow(asdict(row))
    return buf.getvalue()


def format_table(rows: list[OpRecord], columns: list[str] | None = None) -> str:
    cols = columns or COLUMNS
    return _align(cols, [[_cell(getattr(r, c)) for c in cols] for r in rows])


def _align(cols: list[str], body: list[list[str]]) -> str:
    cells = [cols] + body
    widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
    lines = []
    for n, row in enumerate(cells):
        lines.append("  ".join(v.rjust(w) if n else v.ljust(w) for v, w in zip(row, widths)).rstrip())
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    if isinstance(v, bool):
        return "yes" if v else "NO"
    return str(v)


@dataclass(frozen=True)
class ModeSummary:
    mode: str
    fetches: int
    mean_fetch_latency_s: float
    fetch_intercontinental_bytes: int
    fetch_local_bytes: int
    fetch_subscriber_bytes: int
    edge_seeks: int
    all_ok: bool


def summarize(rows: list[OpRecord]) -> list[ModeSummary]:
    out = []
    for mode in dict.fromkeys(r.mode for r in rows):
        fr = [r for r in rows if r.mode == mode and r.op == "fetch"]
        mine = [r for r in rows if r.mode == mode]
        out.append(ModeSummary(
            mode,
            len(fr),
            round(sum(r.latency_s for r in fr) / len(fr), 6) if fr else 0.0,
            sum(r.intercontinental_bytes for r in fr),
            sum(r.local_bytes for r in fr),
            sum(r.subscriber_bytes for r in fr),
            sum(r.edge_seeks for r in mine),
            all(r.ok for r in mine),
        ))
    return out


def bench_report(scenario: Scenario, modes: list[str], *, wall_clock: bool = False) -> tuple[str, str]:
    """(human-readable report, CSV of every step) for the scenario in each mode."""
    rows: list[OpRecord] = []
    for mode in modes:
        rows.extend(run_scenario(scenario, mode, wall_clock=wall_clock))
    summary = summarize(rows)
    head = [f"scenario {scenario.name}  seed {scenario.config.seed}  "
            f"L={scenario.config.levels} Z={scenario.config.bucket_size} B={scenario.config.block_size} "
            f"R={scenario.config.max_range} v={scenario.config.stash_factor}", ""]
    text = "\n".join(head) + format_table(rows) + "\n" + _summary_table(summary)
    return text, to_csv(rows)


def _summary_table(summary: list[ModeSummary]) -> str:
    cols = [f.name for f in fields(ModeSummary)]
    return _align(cols, [[_cell(getattr(s, c)) for c in cols] for s in summary])
