"""One LFT2 node: the input, output and internal transitions of a replica.

A replica is a single-threaded state machine. Time is whatever integer clock
the driver uses (the simulator uses microseconds, the explorer abstract ticks);
the replica only compares it against the deadlines it armed itself.
"""

from __future__ import annotations

import copy
import enum
import logging
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Optional

from .core import (
    GENESIS,
    Block,
    ConflictRelation,
    Message,
    MsgKind,
    NodeId,
    VoteKind,
    VotePayload,
    check_hash,
    leader_of,
    quorum_params,
)

log = logging.getLogger(__name__)


class ProtocolError(RuntimeError):
    """A driver called a transition whose precondition does not hold."""


class Phase(enum.Enum):
    READY = "ready"
    PROCESS = "process"


class OutcomeKind(enum.Enum):
    COMMITTED = "COMMITTED"
    VOTE_FAILED = "VOTE_FAILED"
    VOTE_TIMED_OUT = "VOTE_TIMED_OUT"


@dataclass(frozen=True)
class RoundOutcome:
    round: int
    kind: OutcomeKind
    committed_block: Optional[str] = None
    new_candidate: Optional[str] = None

    def __post_init__(self):
        if self.kind is OutcomeKind.COMMITTED:
            if self.committed_block is None or self.new_candidate is None:
                raise ValueError("COMMITTED outcome needs both digests")
        elif self.committed_block is not None:
            raise ValueError(f"{self.kind.value} outcome commits nothing")


@dataclass(frozen=True)
class CommitEntry:
    height: int
    digest: str
    node: NodeId
    parent_hash: str
    txs: tuple = ()


def default_txs(height: int) -> tuple[bytes, ...]:
    # keyed by height only, so a failed round's payload is re-proposed by the next leader
    return (b"tx-h%d" % height,)


class Replica:
    """State and transitions of node ``node_id``.

    ``block_store`` is shared and content addressed; it stands in for fetching
    a block body by digest from peers and only ever grows.
    """

    def __init__(
        self,
        node_id: NodeId,
        n: int,
        propose_timeout: int,
        vote_timeout: int,
        block_store: dict[str, Block],
        conflicts: Optional[ConflictRelation] = None,
        genesis: Block = GENESIS,
        max_round: Optional[int] = None,
        txs_for: Callable[[int], tuple] = default_txs,
    ):
        self.id = node_id
        self.n = n
        self.params = quorum_params(n)
        self.propose_timeout = propose_timeout
        self.vote_timeout = vote_timeout
        self.blocks = block_store
        self.blocks.setdefault(genesis.hash, genesis)
        self.conflicts = conflicts if conflicts is not None else ConflictRelation()
        self.max_round = max_round
        self.txs_for = txs_for

        self.in_set: set[Message] = set()
        self.out_set: list[Message] = []
        self.phase = Phase.READY
        self.round = 0
        self.candidate = genesis
        self.candidate_qc: tuple[VotePayload, ...] = ()
        self.committed: list[Block] = [genesis]
        self.committed_txs: set[bytes] = set(genesis.txs)
        self.propose_deadline: Optional[int] = None
        self.vote_deadline: Optional[int] = None
        self.accepted: Optional[Block] = None
        self.timed_out = False
        self.halted = False

        self.tallies: dict[tuple, dict[NodeId, VotePayload]] = {}
        self.buffer: list[Message] = []
        self.outcomes: list[RoundOutcome] = []
        self.certified: dict[int, str] = {}
        self.ready_times: list[tuple[int, int]] = []
        self.commit_log: list[CommitEntry] = []
        self.rejections: Counter = Counter()

    def clone(self) -> "Replica":
        """Independent copy sharing only the (append-only) block store."""
        other = copy.copy(self)
        other.__dict__.pop("_explore_key", None)
        other.in_set = set(self.in_set)
        other.out_set = list(self.out_set)
        other.committed = list(self.committed)
        other.committed_txs = set(self.committed_txs)
        other.tallies = {k: dict(v) for k, v in self.tallies.items()}
        other.buffer = list(self.buffer)
        other.outcomes = list(self.outcomes)
        other.certified = dict(self.certified)
        other.ready_times = list(self.ready_times)
        other.commit_log = list(self.commit_log)
        other.rejections = Counter(self.rejections)
        return other

    def state_key(self, with_deadlines: bool = False) -> tuple:
        """Everything that can influence this replica's future behaviour.

        Logs kept only for reporting are left out, so equivalent states compare
        equal. Deadlines are reduced to armed/not armed unless ``with_deadlines``.
        """
        if with_deadlines:
            deadlines = (self.propose_deadline, self.vote_deadline)
        else:
            deadlines = (self.propose_deadline is not None, self.vote_deadline is not None)
        return (
            self.round, self.phase, self.candidate.hash,
            tuple(v.key + (v.voter,) for v in self.candidate_qc),
            self.committed[-1].hash,
            self.accepted.hash if self.accepted is not None else None,
            self.timed_out, self.halted, deadlines,
            frozenset(self.in_set), tuple(self.buffer),
            frozenset((k, frozenset(v)) for k, v in self.tallies.items()),
        )

    @property
    def candidate_height(self) -> int:
        return self.candidate.height

    @property
    def is_leader(self) -> bool:
        return leader_of(self.round, self.n) == self.id

    # -- round lifecycle -------------------------------------------------

    def start_round(self, now: int) -> None:
        if self.phase is not Phase.READY:
            raise ProtocolError(f"node {self.id}: start_round while {self.phase.value}")
        self.ready_times.append((self.round, now))
        if self.is_leader:
            self.propose(now)
        else:
            self.propose_deadline = now + self.propose_timeout

    def propose(self, now: int) -> Optional[Message]:
        if not self.is_leader:
            self.rejections["propose_not_leader"] += 1
            log.debug("node %d is not the leader of round %d", self.id, self.round)
            return None
        if self.phase is not Phase.READY or self.timed_out:
            self.rejections["propose_not_ready"] += 1
            return None
        parent = self.candidate
        height = parent.height + 1
        block = Block.create(height, self.round, self.id, parent.hash,
                             self.txs_for(height), self.candidate_qc)
        self.blocks.setdefault(block.hash, block)
        msg = Message(MsgKind.NEW_BLOCK, block, self.id)
        self.out_set.append(msg)
        self.handle_new_block(msg, now)
        return msg

    def _advance(self, next_round: int, now: int) -> None:
        self.round = next_round
        self.phase = Phase.READY
        self.accepted = None
        self.timed_out = False
        self.propose_deadline = None
        self.vote_deadline = None
        self._prune()
        if self.max_round is not None and next_round >= self.max_round:
            self.halted = True
            return
        self.start_round(now)

    def _prune(self) -> None:
        """Forget vote classes that can no longer change this node's state."""
        height = self.candidate.height
        dead = []
        for key in self.tallies:
            kind, r, _, target = key
            if r >= self.round:
                continue
            if kind is VoteKind.TIMEOUT_VOTE:
                dead.append(key)
            else:
                block = self.blocks.get(target)
                if block is None or block.height <= height:
                    dead.append(key)
        for key in dead:
            del self.tallies[key]
        self.in_set = {
            m for m in self.in_set
            if m.body.round >= self.round
            or (m.kind is not MsgKind.NEW_BLOCK and m.body.key in self.tallies)
        }

    # -- input transitions ------------------------------------------------

    def receive(self, msg: Message, now: int) -> None:
        if self.halted:
            return
        self._dispatch(msg, now)
        if self.buffer:
            self._replay(now)

    def _dispatch(self, msg: Message, now: int) -> None:
        if msg.kind is MsgKind.VOTE:
            self.handle_vote(msg, now)
        elif msg.kind is MsgKind.TIMEOUT:
            self.handle_timeout_msg(msg, now)
        else:
            self.handle_new_block(msg, now)

    def _replay(self, now: int) -> None:
        while self.buffer and not self.halted:
            due = [m for m in self.buffer if m.body.round <= self.round]
            if not due:
                return
            self.buffer = [m for m in self.buffer if m.body.round > self.round]
            for m in due:
                if self.halted:
                    return
                self._dispatch(m, now)

    def _reject(self, reason: str) -> bool:
        self.rejections[reason] += 1
        return False

    def handle_new_block(self, msg: Message, now: int) -> bool:
        block = msg.body
        if msg in self.in_set:
            return self._reject("duplicate")
        if block.round > self.round:
            self.buffer.append(msg)
            return False
        if block.round < self.round:
            return self._reject("stale_round")
        if msg.sender != leader_of(block.round, self.n):
            return self._reject("wrong_proposer")
        if not check_hash(block):
            return self._reject("bad_hash")
        if self.phase is not Phase.READY:
            return self._reject("not_ready")
        if self.timed_out:
            return self._reject("round_timed_out")
        if block.parent_hash != self.candidate.hash:
            self._fast_forward(block)
        if block.height != self.candidate.height + 1:
            return self._reject("wrong_height")
        if block.parent_hash != self.candidate.hash:
            return self._reject("wrong_parent")
        if self._conflicting(block):
            return self._reject("conflicting_tx")
        self._accept(block, msg, now)
        return True

    def _accept(self, block: Block, msg: Message, now: int) -> None:
        self.blocks.setdefault(block.hash, block)
        self.in_set.add(msg)
        self.accepted = block
        self.phase = Phase.PROCESS
        self.propose_deadline = None
        vote = VotePayload(self.id, self.round, VoteKind.BLOCK_VOTE,
                           self.candidate.hash, block.hash)
        out = Message(MsgKind.VOTE, vote, self.id)
        self.out_set.append(out)
        self.vote_deadline = now + self.vote_timeout
        self._store(out, now)

    def _fast_forward(self, block: Block) -> None:
        """Catch up through the quorum a proposal carries for its parent."""
        parent = self.blocks.get(block.parent_hash)
        if parent is None or parent.height <= self.candidate.height:
            return
        voters = {}
        keys = set()
        for v in block.justification:
            if v.kind is VoteKind.BLOCK_VOTE and v.candidate_target == parent.hash:
                voters[v.voter] = v
                keys.add(v.key)
        if len(keys) != 1 or len(voters) < self.params.threshold:
            return
        (key,) = keys
        if key[2] not in self.blocks:
            return
        self._adopt(key[2], parent, tuple(voters[v] for v in sorted(voters)))

    def _conflicting(self, block: Block) -> bool:
        seen = set(self.committed_txs)
        seen.update(self.candidate.txs)
        for tx in block.txs:
            if self.conflicts.partners(tx) & seen:
                return True
            seen.add(tx)
        return False

    def handle_vote(self, msg: Message, now: int) -> None:
        if msg in self.in_set:
            self.rejections["duplicate"] += 1
            return
        vote = msg.body
        target = self.blocks.get(vote.candidate_target)
        if target is None:
            self.rejections["unknown_block"] += 1
            return
        current = vote.round == self.round and self.accepted is not None
        if current or target.height > self.candidate.height:
            self._store(msg, now)
        elif vote.round > self.round:
            self.buffer.append(msg)
        else:
            self.rejections["stale_vote"] += 1

    def handle_timeout_msg(self, msg: Message, now: int) -> None:
        if msg in self.in_set:
            self.rejections["duplicate"] += 1
            return
        vote = msg.body
        if vote.round < self.round:
            self.rejections["stale_timeout"] += 1
        elif vote.round == self.round and self.accepted is not None:
            self.rejections["timeout_after_block"] += 1
        else:
            self._store(msg, now)

    def _store(self, msg: Message, now: int) -> None:
        self.in_set.add(msg)
        vote = msg.body
        key = vote.key
        tally = self.tallies.get(key)
        if tally is None:
            tally = self.tallies[key] = {}
        tally[vote.voter] = vote
        if len(tally) >= self.params.threshold:
            self._on_quorum(key, tally, now)

    # -- internal transitions ---------------------------------------------

    def _on_quorum(self, key: tuple, tally: dict, now: int) -> None:
        kind, r, commit_target, candidate_target = key
        if kind is VoteKind.TIMEOUT_VOTE:
            if r >= self.round:
                self._finish(OutcomeKind.VOTE_TIMED_OUT, r, now)
            return
        self.certified.setdefault(r, candidate_target)
        target = self.blocks[candidate_target]
        if candidate_target == self.candidate.hash:
            return
        if r < self.round and target.height <= self.candidate.height:
            return
        qc = tuple(tally[v] for v in sorted(tally))
        self._adopt(commit_target, target, qc)
        if r >= self.round:
            self.outcomes.append(RoundOutcome(r, OutcomeKind.COMMITTED, commit_target, candidate_target))
            self._advance(r + 1, now)

    def _adopt(self, commit_target: str, new_candidate: Block, qc: tuple) -> None:
        """COMMIT effects: commit B' (and any missing ancestors), make B the candidate."""
        tip = self.committed[-1]
        path = []
        block = self.blocks[commit_target]
        while block.height > tip.height:
            path.append(block)
            block = self.blocks[block.parent_hash]
        if block.hash != tip.hash:
            log.warning("node %d: committing %s which does not extend tip %s",
                        self.id, commit_target[:8], tip.hash[:8])
        for b in reversed(path):
            self.committed.append(b)
            self.committed_txs.update(b.txs)
            self.commit_log.append(CommitEntry(b.height, b.hash, self.id, b.parent_hash, b.txs))
        self.candidate = new_candidate
        self.candidate_qc = qc

    def try_commit(self, now: int) -> Optional[RoundOutcome]:
        """Re-check every stored vote class against the quorum threshold."""
        before = len(self.outcomes)
        for key, tally in list(self.tallies.items()):
            if key in self.tallies and len(tally) >= self.params.threshold:
                self._on_quorum(key, tally, now)
        self._replay(now)
        return self.outcomes[-1] if len(self.outcomes) > before else None

    def _finish(self, kind: OutcomeKind, r: int, now: int) -> None:
        self.outcomes.append(RoundOutcome(r, kind))
        self._advance(r + 1, now)

    def on_propose_timer(self, now: int) -> Optional[Message]:
        if (self.halted or self.propose_deadline is None or now < self.propose_deadline
                or self.phase is not Phase.READY or self.timed_out):
            return None
        vote = VotePayload(self.id, self.round, VoteKind.TIMEOUT_VOTE)
        msg = Message(MsgKind.TIMEOUT, vote, self.id)
        self.out_set.append(msg)
        self.timed_out = True
        self.propose_deadline = None
        self.vote_deadline = now + self.vote_timeout
        self._store(msg, now)
        self._replay(now)
        return msg

    def on_vote_timer(self, now: int) -> Optional[RoundOutcome]:
        if self.halted or self.vote_deadline is None or now < self.vote_deadline:
            return None
        if self.phase is Phase.PROCESS:
            self._finish(OutcomeKind.VOTE_FAILED, self.round, now)
        elif self.timed_out:
            self._finish(OutcomeKind.VOTE_TIMED_OUT, self.round, now)
        else:
            return None
        outcome = self.outcomes[-1]
        self._replay(now)
        return outcome

    # -- output transition ------------------------------------------------

    def drain_out(self) -> list[tuple[Message, frozenset]]:
        others = frozenset(i for i in range(self.n) if i != self.id)
        out = [(m, others) for m in self.out_set]
        self.out_set = []
        return out
