"""Post-hoc verdicts over finished runs: safety, throughput ratio, convergence, message counts."""

from __future__ import annotations

import bisect
import enum
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

from .adversary import Behavior
from .core import ConflictRelation, NodeId, quorum_params
from .replica import CommitEntry, OutcomeKind

DEFAULT_TOLERANCE = 0.02


class ViolationKind(enum.Enum):
    SAME_HEIGHT_FORK = "SAME_HEIGHT_FORK"
    CONFLICTING_TX = "CONFLICTING_TX"
    # not one of the two protocol-level kinds; flags broken chain bookkeeping
    PREFIX_MISMATCH = "PREFIX_MISMATCH"


@dataclass(frozen=True)
class Violation:
    kind: ViolationKind
    height: int
    digests: tuple[str, ...]
    nodes: tuple[NodeId, ...]


@dataclass(frozen=True)
class SafetyVerdict:
    ok: bool
    violations: tuple[Violation, ...] = ()

    def __post_init__(self):
        if self.ok != (not self.violations):
            raise ValueError("ok must be true exactly when there are no violations")

    def summary(self) -> str:
        if self.ok:
            return "safe"
        kinds = defaultdict(int)
        for v in self.violations:
            kinds[v.kind.value] += 1
        return ", ".join(f"{k}={c}" for k, c in sorted(kinds.items()))


def check_safety(commit_logs: Mapping[NodeId, Sequence[CommitEntry]],
                 conflicts: Optional[ConflictRelation] = None) -> SafetyVerdict:
    """Look for forks, committed conflicting transactions and broken chains.

    ``commit_logs`` should only contain honest nodes. The result does not
    depend on the order of nodes or of entries within a node's log.
    """
    conflicts = conflicts if conflicts is not None else ConflictRelation()
    violations: list[Violation] = []

    at_height: dict[int, dict[str, set]] = defaultdict(lambda: defaultdict(set))
    blocks: dict[str, CommitEntry] = {}
    for node, log in commit_logs.items():
        for e in log:
            at_height[e.height][e.digest].add(node)
            blocks.setdefault(e.digest, e)
    for height in sorted(at_height):
        by_digest = at_height[height]
        if len(by_digest) > 1:
            digests = tuple(sorted(by_digest))
            nodes = tuple(sorted(set().union(*by_digest.values())))
            violations.append(Violation(ViolationKind.SAME_HEIGHT_FORK, height, digests, nodes))

    owner: dict[bytes, set] = defaultdict(set)
    for digest, e in blocks.items():
        for tx in e.txs:
            owner[tx].add(digest)
    reported = set()
    for tx in sorted(owner):
        for other in sorted(conflicts.partners(tx)):
            if other not in owner or not conflicts.conflicts(tx, other):
                continue
            pair = frozenset((tx, other))
            if pair in reported:
                continue
            reported.add(pair)
            digests = tuple(sorted(owner[tx] | owner[other]))
            height = min(blocks[d].height for d in digests)
            nodes = tuple(sorted({n for d in digests for n in at_height[blocks[d].height][d]}))
            violations.append(Violation(ViolationKind.CONFLICTING_TX, height, digests, nodes))

    for node in sorted(commit_logs):
        log = sorted(commit_logs[node], key=lambda e: e.height)
        for prev, cur in zip(log, log[1:]):
            if cur.height != prev.height + 1 or cur.parent_hash != prev.digest:
                violations.append(Violation(ViolationKind.PREFIX_MISMATCH, cur.height,
                                            (prev.digest, cur.digest), (node,)))
                break

    return SafetyVerdict(not violations, tuple(violations))


def gamma_estimate(committed: int, rounds: int) -> float:
    if rounds < 1:
        raise ValueError("gamma needs at least one round")
    if not 0 <= committed <= rounds:
        raise ValueError(f"committed={committed} outside [0, rounds={rounds}]")
    return committed / rounds


def expected_gamma(n: int, nu: int) -> float:
    """Long-run committed fraction with ``nu`` permanently failed nodes: (n - nu) / n."""
    if not 0 <= nu <= n:
        raise ValueError(f"need 0 <= nu <= n, got nu={nu}, n={n}")
    return (n - nu) / n


def gamma_lower_bound(n: int) -> float:
    return expected_gamma(n, quorum_params(n).f)


@dataclass(frozen=True)
class GammaReport:
    gamma_hat: float
    expected: float
    n: int
    nu: int
    within_tolerance: bool


def gamma_report(stats, tolerance: float = DEFAULT_TOLERANCE) -> GammaReport:
    sc = stats.scenario
    nu = sc.failures
    g = gamma_estimate(stats.committed, stats.rounds)
    exp = expected_gamma(sc.n, nu)
    return GammaReport(g, exp, sc.n, nu, abs(g - exp) <= tolerance)


def find_convergence_timeout(table: Sequence[tuple[float, float]], target: float,
                             tolerance: float = DEFAULT_TOLERANCE,
                             method: str = "linear") -> Optional[float]:
    """Smallest timeout whose γ̂ reaches ``target - tolerance``; None if it never does.

    ``method="bisect"`` assumes γ̂ is non-decreasing in the timeout and
    binary-searches; it agrees with the linear scan on such tables.
    """
    if not table:
        raise ValueError("empty sweep table")
    rows = sorted(table)
    goal = target - tolerance
    if method == "linear":
        for t, g in rows:
            if g >= goal:
                return t
        return None
    if method == "bisect":
        gammas = [g for _, g in rows]
        i = bisect.bisect_left(gammas, goal)
        return rows[i][0] if i < len(rows) else None
    raise ValueError(f"unknown search method {method!r}")


@dataclass(frozen=True)
class MessageComplexity:
    n: int
    rounds: int
    new_block_avg: float
    vote_avg: float
    new_block_exact: bool
    vote_exact: bool

    @property
    def expected_new_block(self) -> int:
        return self.n - 1

    @property
    def expected_vote(self) -> int:
        return self.n * (self.n - 1)


def message_complexity(stats, n: Optional[int] = None) -> MessageComplexity:
    """Average per-round NEW-BLOCK and VOTE deliveries over committed honest-leader rounds.

    The exactness flags compare against n-1 and responders*(n-1), where the
    responders are the nodes not crashed in that round.
    """
    n = n if n is not None else stats.scenario.n
    rounds = [r for r in stats.per_round
              if r.outcome is OutcomeKind.COMMITTED and r.leader_honest]
    if not rounds:
        raise ValueError("message complexity needs at least one committed honest-leader round")
    crashed = _crashed_per_round(stats.scenario.faults)
    nb_exact = all(r.new_block_msgs == n - 1 for r in rounds)
    vote_exact = all(r.vote_msgs == (n - crashed(r.round)) * (n - 1) for r in rounds)
    k = len(rounds)
    return MessageComplexity(n, k, sum(r.new_block_msgs for r in rounds) / k,
                             sum(r.vote_msgs for r in rounds) / k, nb_exact, vote_exact)


def _crashed_per_round(faults: Iterable):
    crash = [s for s in faults if s.behavior is Behavior.CRASH]

    def count(rnd: int) -> int:
        return len({s.node for s in crash if s.active(rnd)})

    return count
