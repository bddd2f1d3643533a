"""Deterministic discrete-event driver for a set of LFT2 replicas.

Everything random flows from one ``random.Random(seed)`` stream; delays are
drawn in send order and, within one send, in destination-id order. Events at
equal times are processed in insertion order.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import random
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

from .adversary import (
    Behavior,
    FaultSpec,
    Transmission,
    apply_on_propose,
    apply_on_vote,
    faulty_nodes,
    phantom_sibling,
    pick,
)
from .analysis import check_safety
from .core import GENESIS, ConflictRelation, Message, MsgKind, NodeId, leader_of, quorum_params
from .network import US, DelayModel, NetState, to_us
from .replica import CommitEntry, OutcomeKind, Replica

log = logging.getLogger(__name__)

DELIVERY, PROPOSE_TIMER, VOTE_TIMER = 0, 1, 2
EVENT_NAMES = {DELIVERY: "DELIVERY", PROPOSE_TIMER: "PROPOSE_TIMER", VOTE_TIMER: "VOTE_TIMER"}
MAX_EVENTS = 10_000_000


class SimulationError(RuntimeError):
    pass


class SimulationTimeout(SimulationError):
    """TIMEOUT_OF_SIMULATION: the run hit its event cap before the stop rule."""


@dataclass(frozen=True)
class Scenario:
    n: int
    faults: tuple[FaultSpec, ...] = ()
    propose_timeout: float = 2.0
    vote_timeout: float = 2.0
    delay_model: DelayModel = field(default_factory=lambda: DelayModel.uniform(0.0, 1.0))
    seed: int = 0
    min_committed_blocks: Optional[int] = None
    max_rounds: Optional[int] = None
    conflicts: ConflictRelation = field(default_factory=ConflictRelation)
    max_events: int = MAX_EVENTS

    def __post_init__(self):
        object.__setattr__(self, "faults", tuple(self.faults))
        if self.n < 4:
            raise ValueError(f"n={self.n}: need at least 4 nodes")
        # zero is allowed: the timeout sweep starts at 0 s
        if self.propose_timeout < 0 or self.vote_timeout < 0:
            raise ValueError("timeouts must be non-negative")
        if self.min_committed_blocks is None and self.max_rounds is None:
            raise ValueError("scenario needs min_committed_blocks or max_rounds")
        for spec in self.faults:
            if spec.node >= self.n:
                raise ValueError(f"fault on node {spec.node} but n={self.n}")

    @property
    def failures(self) -> int:
        return len(faulty_nodes(self.faults))

    def with_timeout(self, seconds: float) -> "Scenario":
        return replace(self, propose_timeout=seconds, vote_timeout=seconds)


@dataclass(frozen=True)
class Event:
    time: int
    sequence: int
    kind: int
    a: int
    b: int


@dataclass(frozen=True)
class RoundMeasure:
    d: float
    max_delay: float
    conditions_held: bool


@dataclass(frozen=True)
class RoundRecord:
    round: int
    leader: NodeId
    leader_honest: bool
    outcome: Optional[OutcomeKind]
    d: float
    max_delay: float
    conditions_held: bool
    new_block_msgs: int
    vote_msgs: int
    timeout_msgs: int


@dataclass
class RunStats:
    scenario: Scenario
    rounds: int
    committed: int
    per_round: list[RoundRecord]
    commit_log: dict[NodeId, list[CommitEntry]]
    honest: frozenset
    events: int
    end_time: float

    @property
    def gamma(self) -> float:
        return self.committed / self.rounds if self.rounds else 0.0

    def honest_logs(self) -> dict[NodeId, list[CommitEntry]]:
        return {i: log for i, log in self.commit_log.items() if i in self.honest}


def measure_round(ready_times: Sequence[float], delays: Sequence[float],
                  propose_timeout: float, vote_timeout: float) -> RoundMeasure:
    """Spread of honest ready times, worst one-hop delay, and the liveness preconditions.

    All arguments share one time unit; the preconditions are
    ``d + delta < propose_timeout`` and ``2 * delta < vote_timeout``.
    """
    d = (max(ready_times) - min(ready_times)) if ready_times else 0
    delta = max(delays) if delays else 0
    held = d + delta < propose_timeout and 2 * delta < vote_timeout
    return RoundMeasure(d, delta, held)


class _Run:
    def __init__(self, scenario: Scenario):
        sc = self.sc = scenario
        n = sc.n
        self.params = quorum_params(n)
        self.blocks = {GENESIS.hash: GENESIS}
        self.pt, self.vt = to_us(sc.propose_timeout), to_us(sc.vote_timeout)
        self.replicas = [Replica(i, n, self.pt, self.vt, self.blocks, sc.conflicts)
                         for i in range(n)]
        self.faulty = faulty_nodes(sc.faults)
        self.is_honest = [i not in self.faulty for i in range(n)]
        self.specs: list[list[FaultSpec]] = [[] for _ in range(n)]
        for spec in sc.faults:
            self.specs[spec.node].append(spec)
        # a crash that ends is modelled as a mute node that keeps receiving, so it
        # rejoins with current state; only open-ended crashes stop the replica
        self.crash_specs = [[s for s in specs if s.behavior is Behavior.CRASH and s.end_round is None]
                            for specs in self.specs]
        self.any_crash = any(self.crash_specs)
        self.progressed = True
        self.net = NetState()
        self.rng = random.Random(sc.seed)
        self.model = sc.delay_model
        self.heap: list[tuple] = []
        self.seq = itertools.count()
        self.armed_p = [None] * n
        self.armed_v = [None] * n
        self.cert_seen = [0] * n
        self.certified: dict[int, str] = {}
        self.global_round = 0
        # round -> [new_block deliveries, vote deliveries, timeout deliveries, max delay us]
        self.traffic: dict[int, list[int]] = defaultdict(lambda: [0, 0, 0, 0])
        self.equivocated: dict[int, list[str]] = defaultdict(list)
        self.events = 0
        self.now = 0

    # -- fault helpers ----------------------------------------------------

    def _honest_at(self, node: NodeId, rnd: int) -> bool:
        return not any(s.active(rnd) for s in self.specs[node])

    def _crashed(self, node: NodeId) -> bool:
        specs = self.crash_specs[node]
        return bool(specs) and any(s.active(self.global_round) for s in specs)

    def _conflict_target(self, vote, node: NodeId) -> str:
        for digest in self.equivocated.get(vote.round, ()):
            if digest != vote.candidate_target:
                return digest
        phantom = phantom_sibling(self.blocks[vote.candidate_target], node)
        self.blocks.setdefault(phantom.hash, phantom)
        return phantom.hash

    # -- channel ----------------------------------------------------------

    def _emit(self, node: NodeId, msg: Message, dests: frozenset, now: int) -> None:
        specs = self.specs[node]
        if not specs:
            self._transmit(msg, dests, None, now)
            return
        rnd = msg.body.round
        if pick(specs, rnd, Behavior.CRASH):
            return
        if msg.kind is MsgKind.NEW_BLOCK:
            spec = pick(specs, rnd, Behavior.SILENT_LEADER, Behavior.EQUIVOCATE)
            sent = apply_on_propose(spec, msg, dests, self.sc.n)
            if len(sent) > 1:
                self.equivocated[rnd].extend(t.message.body.hash for t in sent)
            for t in sent:
                self._transmit(t.message, t.destinations, t.deliver_to, now)
        elif msg.kind is MsgKind.VOTE:
            spec = pick(specs, rnd, Behavior.DOUBLE_VOTE)
            target = self._conflict_target(msg.body, node) if spec else None
            for vote in apply_on_vote(spec, msg, target):
                self._transmit(vote, dests, None, now)
        else:
            self._transmit(msg, dests, None, now)

    def _transmit(self, msg: Message, dests: frozenset, deliver_to, now: int) -> None:
        kind = msg.kind
        if kind is MsgKind.NEW_BLOCK:
            self.blocks.setdefault(msg.body.hash, msg.body)
        entry_id, entry = self.net.send(msg, dests, now, self.model, self.rng)
        if deliver_to is not None:
            self.net.misbehave(entry_id, deliver_to)
        stats = self.traffic[msg.body.round]
        slot = 0 if kind is MsgKind.NEW_BLOCK else (1 if kind is MsgKind.VOTE else 2)
        at = entry.deliver_at
        live = sorted(entry.destinations)
        stats[slot] += len(live)
        heap, seq = self.heap, self.seq
        worst = stats[3]
        for d in live:
            t = at[d]
            if t - now > worst:
                worst = t - now
            heapq.heappush(heap, (t, next(seq), DELIVERY, entry_id, d))
        stats[3] = worst

    # -- replica bookkeeping ----------------------------------------------

    def _after(self, node: NodeId, now: int) -> None:
        r = self.replicas[node]
        if r.out_set:
            for msg, dests in r.drain_out():
                self._emit(node, msg, dests, now)
        pd = r.propose_deadline
        if pd is not None and self.armed_p[node] != (pd, r.round):
            self.armed_p[node] = (pd, r.round)
            heapq.heappush(self.heap, (pd, next(self.seq), PROPOSE_TIMER, node, r.round))
        vd = r.vote_deadline
        if vd is not None and self.armed_v[node] != (vd, r.round):
            self.armed_v[node] = (vd, r.round)
            heapq.heappush(self.heap, (vd, next(self.seq), VOTE_TIMER, node, r.round))
        if self.is_honest[node]:
            if len(r.certified) != self.cert_seen[node]:
                self.cert_seen[node] = len(r.certified)
                for rnd, digest in r.certified.items():
                    self.certified.setdefault(rnd, digest)
                self.progressed = True
            if r.round > self.global_round:
                self.global_round = r.round
                self.progressed = True
        elif self.specs[node]:
            # a node with windowed faults counts as honest in its fault-free rounds
            if len(r.certified) != self.cert_seen[node]:
                self.cert_seen[node] = len(r.certified)
                for rnd, digest in r.certified.items():
                    if self._honest_at(node, rnd):
                        self.certified.setdefault(rnd, digest)
                self.progressed = True
            if r.round > self.global_round and self._honest_at(node, r.round):
                self.global_round = r.round
                self.progressed = True

    def _done(self) -> bool:
        sc = self.sc
        if sc.min_committed_blocks is not None and len(self.certified) >= sc.min_committed_blocks:
            return True
        return sc.max_rounds is not None and self.global_round >= sc.max_rounds

    # -- main loop --------------------------------------------------------

    def run(self) -> RunStats:
        for node, r in enumerate(self.replicas):
            if self._crashed(node):
                r.ready_times.append((0, 0))
                continue
            r.start_round(0)
            self._after(node, 0)
        heap = self.heap
        replicas = self.replicas
        net = self.net
        cap = self.sc.max_events
        pop = heapq.heappop
        any_crash = self.any_crash
        while True:
            if self.progressed:
                self.progressed = False
                if self._done():
                    break
            if not heap:
                raise SimulationError(f"no pending events at t={self.now / US:.6f}s before the stop rule")
            now, _, kind, a, b = pop(heap)
            self.now = now
            self.events += 1
            if self.events > cap:
                raise SimulationTimeout(f"TIMEOUT_OF_SIMULATION after {cap} events")
            if kind == DELIVERY:
                msg = net.take(a, b)
                if msg is None or (any_crash and self._crashed(b)):
                    continue
                replicas[b].receive(msg, now)
                self._after(b, now)
            else:
                r = replicas[a]
                if r.round != b or (any_crash and self._crashed(a)):
                    continue
                if kind == PROPOSE_TIMER:
                    if r.propose_deadline != now:
                        continue
                    r.on_propose_timer(now)
                else:
                    if r.vote_deadline != now:
                        continue
                    r.on_vote_timer(now)
                self._after(a, now)
        return self._stats()

    def _stats(self) -> RunStats:
        sc = self.sc
        rounds = self.global_round
        committed = sum(1 for r in self.certified if r < rounds)
        ready: dict[int, list[int]] = defaultdict(list)
        outcome_of: dict[int, set] = defaultdict(set)
        for node, r in enumerate(self.replicas):
            honest = self.is_honest[node]
            for rnd, t in r.ready_times:
                if honest or self._honest_at(node, rnd):
                    ready[rnd].append(t)
            for o in r.outcomes:
                if honest or self._honest_at(node, o.round):
                    outcome_of[o.round].add(o.kind)
        records = []
        for rnd in range(rounds):
            leader = leader_of(rnd, sc.n)
            if rnd in self.certified:
                outcome = OutcomeKind.COMMITTED
            elif OutcomeKind.VOTE_FAILED in outcome_of[rnd]:
                outcome = OutcomeKind.VOTE_FAILED
            elif OutcomeKind.VOTE_TIMED_OUT in outcome_of[rnd]:
                outcome = OutcomeKind.VOTE_TIMED_OUT
            else:
                outcome = None
            nb, votes, timeouts, worst = self.traffic.get(rnd, (0, 0, 0, 0))
            m = measure_round(ready[rnd], [worst], self.pt, self.vt)
            leader_honest = not any(s.active(rnd) for s in self.specs[leader])
            records.append(RoundRecord(rnd, leader, leader_honest, outcome, m.d / US,
                                       m.max_delay / US, m.conditions_held, nb, votes, timeouts))
        logs = {node: list(r.commit_log) for node, r in enumerate(self.replicas)}
        honest = frozenset(i for i in range(sc.n) if self.is_honest[i])
        return RunStats(sc, rounds, committed, records, logs, honest, self.events, self.now / US)


def run(scenario: Scenario) -> RunStats:
    return _Run(scenario).run()


@dataclass(frozen=True)
class SweepRow:
    timeout_s: float
    n: int
    failures: int
    gamma: float
    committed: int
    rounds: int
    seed: int
    error: Optional[str] = None
    # violations found by check_safety on the honest commit logs
    violations: int = 0


def sweep_points(lo: float, hi: float, step: float) -> list[float]:
    if lo < 0 or step <= 0 or hi < lo:
        raise ValueError(f"bad sweep {lo}:{hi}:{step}")
    count = int((hi - lo) / step + 1e-9) + 1
    return [round(lo + i * step, 9) for i in range(count)]


def _sweep_one(args) -> SweepRow:
    scenario, timeout, seed = args
    sc = replace(scenario.with_timeout(timeout), seed=seed)
    try:
        stats = run(sc)
    except SimulationError as exc:
        return SweepRow(timeout, sc.n, sc.failures, float("nan"), 0, 0, seed, str(exc))
    verdict = check_safety(stats.honest_logs(), sc.conflicts)
    return SweepRow(timeout, sc.n, sc.failures, stats.gamma, stats.committed, stats.rounds, seed,
                    violations=len(verdict.violations))


def sweep_timeouts(base: Scenario, lo: float, hi: float, step: float,
                   repetitions: int = 1, workers: int = 1) -> list[SweepRow]:
    """One run per (timeout, seed) with both timeouts set to the swept value."""
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    jobs = [(base, t, base.seed + k) for t in sweep_points(lo, hi, step) for k in range(repetitions)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_one, jobs))
    else:
        rows = [_sweep_one(job) for job in jobs]
    return sorted(rows, key=lambda r: (r.timeout_s, r.seed))
