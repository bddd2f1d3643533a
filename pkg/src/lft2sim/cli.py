"""Command-line entry point: scenario files, presets, sweep CSVs and report figures.

Config files are line oriented ``key = value``; ``#`` starts a comment::

    nodes = 21
    faults = 0:crash, 1:crash, 2:double_vote@10-20
    propose_timeout_s = 2.0
    vote_timeout_s = 2.0
    delay_file = default          # or a path; or delay_uniform = 0:1; or delay_constant = 0.1
    seed = 7
    stop_blocks = 200             # or max_rounds = 500
    sweep = 0:4:0.1               # optional; both timeouts take each swept value
    repetitions = 1
    out = results.csv
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import logging
import math
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

from .adversary import Behavior, FaultSpec
from .analysis import check_safety, expected_gamma, find_convergence_timeout
from .engine import Scenario, SimulationError, SweepRow, run, sweep_timeouts
from .network import (
    DelayModel,
    HistogramError,
    default_histogram_text,
    load_histogram,
    parse_histogram_text,
    read_histogram,
)

log = logging.getLogger("lft2sim")

CSV_HEADER = ("timeout_s", "n", "failures", "gamma", "committed", "rounds", "seed")
TABLE2_HEADER = ("failures", "target_gamma", "convergence_timeout_s", "status", "monotone")
TABLE2_FAILURES = (0, 2, 3, 4, 5, 6)
DEFAULT_TIMEOUT_S = 2.0
DEFAULT_SWEEP = (0.0, 4.0, 0.1)
DEFAULT_STOP_BLOCKS = 200
# presets also stop after this many rounds so that low-timeout points, which
# commit almost nothing, still terminate
DEFAULT_ROUND_CAP = 2 * DEFAULT_STOP_BLOCKS

# sha256 over the parsed bins of the bundled histogram (see histogram_digest);
# presets refuse to run against anything else so their numbers stay comparable
BUNDLED_HISTOGRAM_DIGEST = "2c92079981342a2edf8c0b82802c6953bf7272afbe99c3a81d5b1690f9d1d3cf"

KNOWN_KEYS = {
    "nodes", "faults", "propose_timeout_s", "vote_timeout_s", "delay_file", "delay_uniform",
    "delay_constant", "seed", "stop_blocks", "max_rounds", "sweep", "repetitions", "out",
}


# -- errors ---------------------------------------------------------------

class ConfigError(ValueError):
    """A problem in a config file; ``line`` is 1-based, or None for whole-file problems."""

    def __init__(self, message: str, line: Optional[int] = None, source: str = "<config>"):
        self.line = line
        self.source = source
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}")


class UnknownKeyError(ConfigError):
    pass


class MissingKeyError(ConfigError):
    pass


class MalformedValueError(ConfigError):
    pass


class FaultNodeError(ConfigError):
    pass


class HistogramDigestError(RuntimeError):
    pass


# -- config ---------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    scenario: Scenario
    sweep: Optional[tuple[float, float, float]] = None
    repetitions: int = 1
    out: Optional[str] = None
    # how the delay model was specified, for logging and round-tripping
    delay_source: str = "delay_file = default"
    name: str = "experiment"

    def __post_init__(self):
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.sweep is not None:
            lo, hi, step = self.sweep
            if step <= 0 or lo < 0 or hi < lo:
                raise ValueError(f"bad sweep {lo}:{hi}:{step}")

    def to_text(self) -> str:
        """The resolved config in file format, defaults included."""
        sc = self.scenario
        lines = [
            f"nodes = {sc.n}",
            f"faults = {', '.join(str(s) for s in sc.faults)}",
            f"propose_timeout_s = {sc.propose_timeout:g}",
            f"vote_timeout_s = {sc.vote_timeout:g}",
            self.delay_source,
            f"seed = {sc.seed}",
        ]
        if sc.min_committed_blocks is not None:
            lines.append(f"stop_blocks = {sc.min_committed_blocks}")
        if sc.max_rounds is not None:
            lines.append(f"max_rounds = {sc.max_rounds}")
        if self.sweep is not None:
            lines.append("sweep = {:g}:{:g}:{:g}".format(*self.sweep))
        lines.append(f"repetitions = {self.repetitions}")
        if self.out is not None:
            lines.append(f"out = {self.out}")
        return "\n".join(lines) + "\n"


def histogram_digest(model: DelayModel) -> str:
    text = "".join(f"{d!r},{p!r}\n" for d, p in model.bins)
    return hashlib.sha256(text.encode()).hexdigest()


def bundled_histogram() -> DelayModel:
    return load_histogram(parse_histogram_text(default_histogram_text()))


def parse_faults(value: str, n: Optional[int] = None, line: Optional[int] = None,
                 source: str = "<config>") -> tuple[FaultSpec, ...]:
    """``"id:behavior[@start-end]"`` items separated by commas; an empty value means no faults."""
    specs = []
    for item in (p.strip() for p in value.split(",")):
        if not item:
            continue
        node_s, sep, rest = item.partition(":")
        if not sep:
            raise MalformedValueError(f"fault {item!r}: expected id:behavior", line, source)
        behavior_s, _, window = rest.partition("@")
        try:
            node = int(node_s)
        except ValueError:
            raise MalformedValueError(f"fault {item!r}: node id is not an integer", line, source) from None
        try:
            behavior = Behavior(behavior_s.strip().lower())
        except ValueError:
            names = ", ".join(b.value for b in Behavior)
            raise MalformedValueError(f"fault {item!r}: unknown behavior (one of {names})",
                                      line, source) from None
        start, end = 0, None
        if window:
            lo, dash, hi = window.partition("-")
            try:
                start = int(lo) if lo.strip() else 0
                end = int(hi) if dash and hi.strip() else None
            except ValueError:
                raise MalformedValueError(f"fault {item!r}: window must be start-end rounds",
                                          line, source) from None
        if node < 0 or (n is not None and node >= n):
            raise FaultNodeError(f"fault node {node} out of range for nodes = {n}", line, source)
        try:
            specs.append(FaultSpec(node, behavior, start, end))
        except ValueError as exc:
            raise MalformedValueError(f"fault {item!r}: {exc}", line, source) from None
    return tuple(specs)


def _number(value: str, kind, key: str, line: int, source: str):
    try:
        x = kind(value)
    except ValueError:
        raise MalformedValueError(f"{key}: {value!r} is not a valid {kind.__name__}", line, source) from None
    if isinstance(x, float) and not math.isfinite(x):
        raise MalformedValueError(f"{key}: {value!r} is not finite", line, source)
    return x


def _pair(value: str, key: str, line: int, source: str, parts: int) -> list[float]:
    items = value.split(":")
    if len(items) != parts:
        raise MalformedValueError(f"{key}: expected {parts} numbers separated by ':'", line, source)
    return [_number(x.strip(), float, key, line, source) for x in items]


def parse_config_text(text: str, source: str = "<config>", base_dir: Optional[Path] = None) -> ExperimentConfig:
    raw: dict[str, tuple[str, int]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise MalformedValueError("expected 'key = value'", lineno, source)
        if key not in KNOWN_KEYS:
            raise UnknownKeyError(f"unknown key {key!r}", lineno, source)
        if key in raw:
            raise MalformedValueError(f"duplicate key {key!r} (first on line {raw[key][1]})",
                                      lineno, source)
        raw[key] = (value, lineno)

    def get(key, kind, default=None):
        if key not in raw:
            return default
        value, lineno = raw[key]
        return _number(value, kind, key, lineno, source)

    if "nodes" not in raw:
        raise MissingKeyError("missing required key 'nodes'", None, source)
    n = get("nodes", int)
    if n < 4:
        raise MalformedValueError(f"nodes = {n}: need at least 4", raw["nodes"][1], source)
    faults = ()
    if "faults" in raw:
        value, lineno = raw["faults"]
        faults = parse_faults(value, n, lineno, source)

    timeouts = {}
    for key in ("propose_timeout_s", "vote_timeout_s"):
        t = get(key, float, DEFAULT_TIMEOUT_S)
        if t < 0:
            raise MalformedValueError(f"{key} = {t:g}: must be non-negative", raw[key][1], source)
        timeouts[key] = t

    delay_keys = [k for k in ("delay_file", "delay_uniform", "delay_constant") if k in raw]
    if len(delay_keys) > 1:
        raise MalformedValueError(f"only one of {', '.join(delay_keys)} may be given",
                                  raw[delay_keys[1]][1], source)
    delay_source = "delay_file = default"
    model = None
    if delay_keys:
        key = delay_keys[0]
        value, lineno = raw[key]
        delay_source = f"{key} = {value}"
        try:
            if key == "delay_file":
                if value == "default":
                    model = bundled_histogram()
                else:
                    path = Path(value)
                    if not path.is_absolute() and base_dir is not None:
                        path = base_dir / path
                    model = read_histogram(path)
            elif key == "delay_uniform":
                lo, hi = _pair(value, key, lineno, source, 2)
                model = DelayModel.uniform(lo, hi)
            else:
                model = DelayModel.constant_delay(_number(value, float, key, lineno, source))
        except (HistogramError, OSError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise MalformedValueError(f"{key}: {exc}", lineno, source) from None
    if model is None:
        model = bundled_histogram()

    stop_blocks = get("stop_blocks", int)
    max_rounds = get("max_rounds", int)
    if stop_blocks is None and max_rounds is None:
        raise MissingKeyError("missing required key 'stop_blocks' or 'max_rounds'", None, source)
    for key, v in (("stop_blocks", stop_blocks), ("max_rounds", max_rounds)):
        if v is not None and v < 1:
            raise MalformedValueError(f"{key} must be >= 1", raw[key][1], source)

    sweep = None
    if "sweep" in raw:
        value, lineno = raw["sweep"]
        lo, hi, step = _pair(value, "sweep", lineno, source, 3)
        if step <= 0 or lo < 0 or hi < lo:
            raise MalformedValueError("sweep needs 0 <= lo <= hi and step > 0", lineno, source)
        sweep = (lo, hi, step)
    repetitions = get("repetitions", int, 1)
    if repetitions < 1:
        raise MalformedValueError("repetitions must be >= 1", raw["repetitions"][1], source)

    scenario = Scenario(n, faults, timeouts["propose_timeout_s"], timeouts["vote_timeout_s"],
                        model, get("seed", int, 0), stop_blocks, max_rounds)
    out = raw["out"][0] if "out" in raw else None
    return ExperimentConfig(scenario, sweep, repetitions, out, delay_source, Path(source).stem)


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config_text(path.read_text(), str(path), path.parent)


# -- presets --------------------------------------------------------------

def _pinned_histogram() -> DelayModel:
    model = bundled_histogram()
    digest = histogram_digest(model)
    if digest != BUNDLED_HISTOGRAM_DIGEST:
        raise HistogramDigestError(
            f"bundled histogram digest {digest[:12]} does not match the pinned "
            f"{BUNDLED_HISTOGRAM_DIGEST[:12]}; preset results would not be comparable")
    return model


def crash_faults(count: int) -> tuple[FaultSpec, ...]:
    """Permanent crashes of nodes 0..count-1."""
    return tuple(FaultSpec(i, Behavior.CRASH) for i in range(count))


def _fig2(n: int) -> ExperimentConfig:
    sc = Scenario(n, (), DEFAULT_TIMEOUT_S, DEFAULT_TIMEOUT_S, _pinned_histogram(),
                  seed=0, min_committed_blocks=DEFAULT_STOP_BLOCKS, max_rounds=DEFAULT_ROUND_CAP)
    return ExperimentConfig(sc, DEFAULT_SWEEP, 1, f"fig2_n{n}.csv", name=f"fig2_n{n}")


def _fig3(failures: int) -> ExperimentConfig:
    sc = Scenario(21, crash_faults(failures), DEFAULT_TIMEOUT_S, DEFAULT_TIMEOUT_S,
                  _pinned_histogram(), seed=0, min_committed_blocks=DEFAULT_STOP_BLOCKS,
                  max_rounds=DEFAULT_ROUND_CAP)
    return ExperimentConfig(sc, DEFAULT_SWEEP, 1, f"fig3_f{failures}.csv", name=f"fig3_f{failures}")


PRESETS = {f"fig2_n{n}": (lambda n=n: _fig2(n)) for n in (4, 10, 50, 100)}
PRESETS.update({f"fig3_f{f}": (lambda f=f: _fig3(f)) for f in range(7)})
# table2 is handled by main(): it runs the fig3 sweeps for TABLE2_FAILURES
PRESET_NAMES = sorted(PRESETS) + ["table2"]


def preset(name: str) -> ExperimentConfig:
    try:
        return PRESETS[name]()
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}") from None


# -- running and emitting -------------------------------------------------

def run_experiment(config: ExperimentConfig, workers: int = 1) -> list[SweepRow]:
    """One row per (timeout, seed), sorted by (timeout, seed).

    Without a sweep the configured timeouts are used as they are and each row
    reports the propose timeout.
    """
    sc = config.scenario
    if config.sweep is not None:
        lo, hi, step = config.sweep
        rows = sweep_timeouts(sc, lo, hi, step, config.repetitions, workers)
    else:
        rows = [_single(replace(sc, seed=sc.seed + k)) for k in range(config.repetitions)]
    for row in rows:
        if row.error:
            log.warning("timeout %.3g s seed %d: %s", row.timeout_s, row.seed, row.error)
    return rows


def _single(sc: Scenario) -> SweepRow:
    try:
        stats = run(sc)
    except SimulationError as exc:
        return SweepRow(sc.propose_timeout, sc.n, sc.failures, float("nan"), 0, 0, sc.seed, str(exc))
    verdict = check_safety(stats.honest_logs(), sc.conflicts)
    return SweepRow(sc.propose_timeout, sc.n, sc.failures, stats.gamma, stats.committed,
                    stats.rounds, sc.seed, violations=len(verdict.violations))


def format_rows(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        gamma = "nan" if math.isnan(r.gamma) else f"{r.gamma:.6f}"
        w.writerow([f"{r.timeout_s:g}", r.n, r.failures, gamma, r.committed, r.rounds, r.seed])
    return buf.getvalue()


def read_rows(path) -> list[SweepRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [SweepRow(float(r["timeout_s"]), int(r["n"]), int(r["failures"]), float(r["gamma"]),
                         int(r["committed"]), int(r["rounds"]), int(r["seed"])) for r in reader]


def mean_curve(rows: Sequence[SweepRow]) -> list[tuple[float, float]]:
    """(timeout, mean γ̂ over seeds); errored rows are skipped."""
    by_t: dict[float, list[float]] = {}
    for r in rows:
        if not math.isnan(r.gamma):
            by_t.setdefault(r.timeout_s, []).append(r.gamma)
    return [(t, math.fsum(g) / len(g)) for t, g in sorted(by_t.items())]


@dataclass(frozen=True)
class Table2Row:
    failures: int
    target_gamma: float
    convergence_timeout: Optional[float]
    # "ok", "never" (sweep never reached the target) or "missing" (no sweep given)
    status: str


@dataclass(frozen=True)
class Table2:
    rows: tuple[Table2Row, ...]
    monotone: bool

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TABLE2_HEADER)
        for r in self.rows:
            t = "" if r.convergence_timeout is None else f"{r.convergence_timeout:g}"
            w.writerow([r.failures, f"{r.target_gamma:.6f}", t, r.status,
                        "true" if self.monotone else "false"])
        return buf.getvalue()


def emit_table2(sweeps: Mapping[int, Sequence[SweepRow]], n: int = 21,
                failures: Sequence[int] = TABLE2_FAILURES,
                tolerance: float = 0.02) -> Table2:
    """Convergence timeout per failure count, where γ̂ first reaches (n-ν)/n - tolerance.

    Only the failure counts present in ``sweeps`` are required; absent ones
    become "missing" rows when ``sweeps`` covers fewer than ``failures``.
    The monotone flag ignores missing rows and ranks "never" above any
    timeout.
    """
    wanted = sorted(set(failures) | set(sweeps)) if len(sweeps) > 1 else sorted(sweeps)
    out = []
    for nu in wanted:
        target = expected_gamma(n, nu)
        if nu not in sweeps:
            out.append(Table2Row(nu, target, None, "missing"))
            continue
        curve = mean_curve(sweeps[nu])
        t = find_convergence_timeout(curve, target, tolerance) if curve else None
        out.append(Table2Row(nu, target, t, "ok" if t is not None else "never"))
    ranked = [math.inf if r.status == "never" else r.convergence_timeout
              for r in out if r.status != "missing"]
    monotone = all(a <= b for a, b in zip(ranked, ranked[1:]))
    return Table2(tuple(out), monotone)


# -- figures --------------------------------------------------------------

def plot_curves(curves: Mapping[str, Sequence[tuple[float, float]]], path, title: str = "",
                ylabel: str = "committed fraction") -> Path:
    """Write a γ̂-vs-timeout PNG with one line per labelled curve."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for label, pts in curves.items():
        if pts:
            xs, ys = zip(*pts)
            ax.plot(xs, ys, marker="o", markersize=3, linewidth=1.2, label=label)
    ax.set_xlabel("timeout (s)")
    ax.set_ylabel(ylabel)
    ax.set_ylim(-0.02, 1.02)
    ax.grid(True, alpha=0.3)
    if title:
        ax.set_title(title)
    if len(curves) > 1:
        ax.legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_table2(table: Table2, path) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = [r for r in table.rows if r.status == "ok"]
    fig, ax = plt.subplots(figsize=(5.0, 3.5))
    ax.plot([r.failures for r in rows], [r.convergence_timeout for r in rows], marker="s")
    ax.set_xlabel("failed nodes")
    ax.set_ylabel("convergence timeout (s)")
    ax.set_title("monotone" if table.monotone else "not monotone")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


# -- main -----------------------------------------------------------------

def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    log.info("wrote %s", path)


def _run_one(config: ExperimentConfig, out: Path, workers: int, plot: bool) -> list[SweepRow]:
    log.info("resolved config for %s:\n%s", config.name, config.to_text().rstrip())
    rows = run_experiment(config, workers)
    _write(out, format_rows(rows))
    if plot:
        png = plot_curves({config.name: mean_curve(rows)}, out.with_suffix(".png"), config.name)
        log.info("wrote %s", png)
    return rows


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lft2sim", description="LFT2 consensus simulation lab")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", type=Path, help="experiment config file")
    src.add_argument("--preset", choices=PRESET_NAMES, help="built-in experiment")
    p.add_argument("--out", type=Path, help="output CSV (overrides the config's out)")
    p.add_argument("--seed", type=int, help="base seed override")
    p.add_argument("--check-safety", action="store_true",
                   help="exit with status 2 if any run commits conflicting blocks")
    p.add_argument("--workers", type=int, default=1, help="parallel sweep workers")
    p.add_argument("--plot", action="store_true", help="also render PNG figures next to the CSVs")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.preset == "table2":
            rows = _table2(args)
        else:
            config = preset(args.preset) if args.preset else parse_config(args.config)
            if args.seed is not None:
                config = replace(config, scenario=replace(config.scenario, seed=args.seed))
            out = args.out or Path(config.out or f"{config.name}.csv")
            rows = _run_one(config, out, args.workers, args.plot)
    except (ConfigError, HistogramDigestError, OSError) as exc:
        log.error("%s", exc)
        return 1
    bad = sum(r.violations for r in rows)
    if bad:
        log.error("safety violations in %d run(s)", sum(1 for r in rows if r.violations))
    return 2 if args.check_safety and bad else 0


def _table2(args) -> list[SweepRow]:
    out = args.out or Path("table2.csv")
    sweeps, all_rows = {}, []
    for nu in TABLE2_FAILURES:
        config = preset(f"fig3_f{nu}")
        if args.seed is not None:
            config = replace(config, scenario=replace(config.scenario, seed=args.seed))
        sweep_out = out.with_name(f"{out.stem}_f{nu}.csv")
        sweeps[nu] = _run_one(config, sweep_out, args.workers, False)
        all_rows.extend(sweeps[nu])
    table = emit_table2(sweeps)
    _write(out, table.to_csv())
    log.info("convergence timeouts monotone: %s", table.monotone)
    if args.plot:
        plot_curves({f"{nu} failed": mean_curve(rows) for nu, rows in sweeps.items()},
                    out.with_name(f"{out.stem}_curves.png"), "n = 21")
        plot_table2(table, out.with_suffix(".png"))
    return all_rows


if __name__ == "__main__":
    sys.exit(main())
