"""Multicast channel with per-destination stochastic delays.

Virtual time is integer microseconds; delay models are specified in seconds and
converted once at sampling time.
"""

from __future__ import annotations

import bisect
import enum
import itertools
import logging
import math
import random
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .core import Message, NodeId

log = logging.getLogger(__name__)

US = 1_000_000
DELAY_CAP_S = 4.0


def to_us(seconds: float) -> int:
    return int(round(seconds * US))


class DelayKind(enum.Enum):
    CONSTANT = "constant"
    UNIFORM = "uniform"
    HISTOGRAM = "histogram"


class HistogramError(ValueError):
    pass


@dataclass(frozen=True)
class DelayModel:
    kind: DelayKind
    constant: float = 0.0
    lo: float = 0.0
    hi: float = 0.0
    bins: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        if self.kind is DelayKind.CONSTANT:
            if not 0 <= self.constant <= DELAY_CAP_S:
                raise ValueError(f"constant delay {self.constant} outside [0, {DELAY_CAP_S}]")
        elif self.kind is DelayKind.UNIFORM:
            if not 0 <= self.lo <= self.hi <= DELAY_CAP_S:
                raise ValueError(f"uniform bounds ({self.lo}, {self.hi}) invalid")
        else:
            if not self.bins:
                raise ValueError("histogram needs at least one bin")
            if any(d < 0 or d > DELAY_CAP_S or p < 0 for d, p in self.bins):
                raise ValueError("histogram delays must lie in [0, 4] s with p >= 0")
            total = math.fsum(p for _, p in self.bins)
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"histogram probabilities sum to {total}, not 1")
        # sampling tables, in microseconds
        if self.kind is DelayKind.HISTOGRAM:
            cum = list(itertools.accumulate(p for _, p in self.bins))
            object.__setattr__(self, "_values", [to_us(d) for d, _ in self.bins])
            object.__setattr__(self, "_cum", cum)

    @classmethod
    def constant_delay(cls, seconds: float) -> "DelayModel":
        return cls(DelayKind.CONSTANT, constant=seconds)

    @classmethod
    def uniform(cls, lo: float, hi: float) -> "DelayModel":
        return cls(DelayKind.UNIFORM, lo=lo, hi=hi)

    @classmethod
    def histogram(cls, bins: Iterable[tuple[float, float]]) -> "DelayModel":
        return cls(DelayKind.HISTOGRAM, bins=tuple((float(d), float(p)) for d, p in bins))

    @property
    def delta_cap(self) -> float:
        """Largest delay this model can produce, in seconds."""
        if self.kind is DelayKind.CONSTANT:
            return self.constant
        if self.kind is DelayKind.UNIFORM:
            return self.hi
        return max(d for d, p in self.bins if p > 0)

    @property
    def mean(self) -> float:
        if self.kind is DelayKind.CONSTANT:
            return self.constant
        if self.kind is DelayKind.UNIFORM:
            return (self.lo + self.hi) / 2
        return math.fsum(d * p for d, p in self.bins)

    def cdf(self, seconds: float) -> float:
        """P(delay <= seconds)."""
        if self.kind is DelayKind.CONSTANT:
            return float(self.constant <= seconds)
        if self.kind is DelayKind.UNIFORM:
            if self.hi == self.lo:
                return float(self.lo <= seconds)
            return min(1.0, max(0.0, (seconds - self.lo) / (self.hi - self.lo)))
        return min(1.0, math.fsum(p for d, p in self.bins if d <= seconds))

    def sample_us(self, rng: random.Random, k: int) -> list[int]:
        """Draw ``k`` independent delays (microseconds) in destination order."""
        if self.kind is DelayKind.CONSTANT:
            return [to_us(self.constant)] * k
        if self.kind is DelayKind.UNIFORM:
            lo, span = to_us(self.lo), to_us(self.hi) - to_us(self.lo)
            rand = rng.random
            return [lo + int(rand() * span) for _ in range(k)]
        values, cum = self._values, self._cum
        top = cum[-1]
        rand = rng.random
        return [values[bisect.bisect_right(cum, rand() * top)] for _ in range(k)]

    def describe(self) -> str:
        if self.kind is DelayKind.CONSTANT:
            return f"constant({self.constant})"
        if self.kind is DelayKind.UNIFORM:
            return f"uniform({self.lo},{self.hi})"
        return f"histogram({len(self.bins)} bins, mean={self.mean:.4f}, cap={self.delta_cap})"


def load_histogram(rows: Iterable[tuple[float, float]]) -> DelayModel:
    """Build a normalised HISTOGRAM model from ``(delay_seconds, probability)`` rows.

    Rows above the 4 s cap are dropped. A total that is off by more than 1e-6
    after filtering is renormalised with a warning; smaller drift is absorbed
    silently.
    """
    kept = []
    for delay, prob in rows:
        delay, prob = float(delay), float(prob)
        if delay < 0 or prob < 0:
            raise HistogramError(f"negative value in histogram row ({delay}, {prob})")
        if delay > DELAY_CAP_S:
            log.info("dropping histogram bin at %.3f s (above %.1f s cap)", delay, DELAY_CAP_S)
            continue
        kept.append((delay, prob))
    total = math.fsum(p for _, p in kept)
    if not kept or total <= 0:
        raise HistogramError("histogram has no probability mass at or below 4 s")
    if abs(total - 1.0) > 1e-6:
        log.warning("histogram mass is %.6f after filtering; renormalising", total)
    bins = [(d, p / total) for d, p in kept]
    # absorb floating drift so the model invariant (sum == 1 +- 1e-9) holds exactly
    drift = 1.0 - math.fsum(p for _, p in bins)
    d_last, p_last = bins[-1]
    bins[-1] = (d_last, p_last + drift)
    return DelayModel.histogram(bins)


def parse_histogram_text(text: str) -> list[tuple[float, float]]:
    rows = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 2:
            raise HistogramError(f"line {lineno}: expected 'delay_seconds,probability'")
        try:
            rows.append((float(parts[0]), float(parts[1])))
        except ValueError as exc:
            raise HistogramError(f"line {lineno}: {exc}") from None
    return rows


def read_histogram(path) -> DelayModel:
    return load_histogram(parse_histogram_text(Path(path).read_text()))


def default_histogram_text() -> str:
    return resources.files("lft2sim.data").joinpath("default_delays.csv").read_text()


def default_histogram() -> DelayModel:
    return load_histogram(parse_histogram_text(default_histogram_text()))


class ChannelError(RuntimeError):
    pass


@dataclass
class PendingEntry:
    message: Message
    destinations: set
    sent_at: int
    deliver_at: dict = field(default_factory=dict)


class NetState:
    """The channel's pending set: message, remaining destinations, delivery times."""

    def __init__(self):
        self.pending: dict[int, PendingEntry] = {}
        self._ids = itertools.count()
        self.diagnostics: list[str] = []

    def send(self, message: Message, destinations: Sequence[NodeId], now: int,
             delay_model: DelayModel, rng: random.Random) -> tuple[int, PendingEntry]:
        dests = sorted(destinations)
        if not dests:
            raise ChannelError("send needs at least one destination")
        delays = delay_model.sample_us(rng, len(dests))
        entry = PendingEntry(message, set(dests), now,
                             {d: now + delay for d, delay in zip(dests, delays)})
        entry_id = next(self._ids)
        self.pending[entry_id] = entry
        return entry_id, entry

    def is_pending(self, entry_id: int, node: NodeId) -> bool:
        entry = self.pending.get(entry_id)
        return entry is not None and node in entry.destinations

    def receive(self, entry_id: int, node: NodeId) -> Message:
        entry = self.pending.get(entry_id)
        if entry is None or node not in entry.destinations:
            raise ChannelError(f"node {node} is not a pending destination of entry {entry_id}")
        entry.destinations.discard(node)
        if not entry.destinations:
            del self.pending[entry_id]
        return entry.message

    def take(self, entry_id: int, node: NodeId) -> Optional[Message]:
        """Like :meth:`receive` but returns None when ``node`` is no longer pending."""
        entry = self.pending.get(entry_id)
        if entry is None or node not in entry.destinations:
            return None
        entry.destinations.discard(node)
        if not entry.destinations:
            del self.pending[entry_id]
        return entry.message

    def misbehave(self, entry_id: int, new_destinations: Iterable[NodeId],
                  now: Optional[int] = None, delay_model: Optional[DelayModel] = None,
                  rng: Optional[random.Random] = None) -> list[tuple[NodeId, int]]:
        """Replace the destination set of a pending entry.

        Returns ``(node, time)`` for destinations that were not scheduled before
        and now need a delivery (requires ``now``, ``delay_model`` and ``rng``).
        """
        entry = self.pending.get(entry_id)
        if entry is None:
            self.diagnostics.append(f"misbehave on absent entry {entry_id}")
            log.debug("misbehave on absent entry %d", entry_id)
            return []
        new = set(new_destinations)
        added = sorted(new - set(entry.deliver_at))
        scheduled = []
        if added:
            if now is None or delay_model is None or rng is None:
                raise ChannelError("adding destinations needs now, delay_model and rng")
            for node, delay in zip(added, delay_model.sample_us(rng, len(added))):
                entry.deliver_at[node] = now + delay
                scheduled.append((node, now + delay))
        entry.destinations = new
        if not new:
            del self.pending[entry_id]
        return scheduled
