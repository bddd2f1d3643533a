"""Fault behaviours applied at a replica's outbound boundary.

Faulty nodes run the ordinary replica automaton; what they *send* is rewritten
here. They never forge another node's sender tag.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Optional

from .core import Block, Message, MsgKind, NodeId, VoteKind, VotePayload


class Behavior(enum.Enum):
    CRASH = "crash"
    SILENT_LEADER = "silent_leader"
    EQUIVOCATE = "equivocate"
    DOUBLE_VOTE = "double_vote"


@dataclass(frozen=True)
class FaultSpec:
    """``behavior`` of ``node`` while the global round is in ``[start_round, end_round)``."""

    node: NodeId
    behavior: Behavior
    start_round: int = 0
    end_round: Optional[int] = None

    def __post_init__(self):
        if self.node < 0 or self.start_round < 0:
            raise ValueError("fault node and start round must be non-negative")
        if self.end_round is not None and self.end_round <= self.start_round:
            raise ValueError("fault window must be non-empty")

    def active(self, round: int) -> bool:
        return self.start_round <= round and (self.end_round is None or round < self.end_round)

    def __str__(self):
        window = ""
        if self.start_round or self.end_round is not None:
            end = "" if self.end_round is None else self.end_round
            window = f"@{self.start_round}-{end}"
        return f"{self.node}:{self.behavior.value}{window}"


def faulty_nodes(faults: Iterable[FaultSpec]) -> frozenset:
    return frozenset(spec.node for spec in faults)


@dataclass(frozen=True)
class Transmission:
    """A message handed to the channel.

    ``deliver_to`` is the destination set after a MISBEHAVE rewrite, or None
    when the channel should deliver to every destination it was sent to.
    """

    message: Message
    destinations: frozenset
    deliver_to: Optional[frozenset] = None


def split_halves(n: int) -> tuple[frozenset, frozenset]:
    lower = frozenset(range(n // 2))
    return lower, frozenset(range(n)) - lower


def equivocation_sibling(block: Block) -> Block:
    """A block at the same height and round whose transactions double-spend ``block``'s."""
    return Block.create(block.height, block.round, block.proposer, block.parent_hash,
                        tuple(tx + b"-ds" for tx in block.txs) or (b"-ds",),
                        block.justification)


def phantom_sibling(block: Block, voter: NodeId) -> Block:
    """A conflicting block a double-voter pretends exists (never proposed by anyone)."""
    return Block.create(block.height, block.round, block.proposer, block.parent_hash,
                        block.txs + (b"phantom-%d" % voter,), block.justification)


def apply_on_propose(spec: Optional[FaultSpec], proposal: Message,
                     destinations: frozenset, n: int) -> list[Transmission]:
    """Zero, one or two proposals for the leader's NEW-BLOCK."""
    if spec is None or spec.behavior is Behavior.DOUBLE_VOTE:
        return [Transmission(proposal, destinations)]
    if spec.behavior in (Behavior.CRASH, Behavior.SILENT_LEADER):
        return []
    first = proposal.body
    second = equivocation_sibling(first)
    lower, upper = split_halves(n)
    return [
        Transmission(proposal, destinations, destinations & lower),
        Transmission(Message(MsgKind.NEW_BLOCK, second, proposal.sender), destinations,
                     destinations & upper),
    ]


def apply_on_vote(spec: Optional[FaultSpec], vote: Message,
                  conflicting_target: Optional[str] = None) -> list[Message]:
    """Zero, one or two outbound votes.

    A DOUBLE_VOTE node adds a vote for ``conflicting_target`` in the same round;
    the engine supplies it (an equivocation sibling when one exists, a phantom
    block otherwise). Timeout votes are never doubled.
    """
    if spec is None or spec.behavior in (Behavior.SILENT_LEADER, Behavior.EQUIVOCATE):
        return [vote]
    if spec.behavior is Behavior.CRASH:
        return []
    body = vote.body
    if body.kind is not VoteKind.BLOCK_VOTE or conflicting_target is None:
        return [vote]
    if conflicting_target == body.candidate_target:
        return [vote]
    twin = VotePayload(body.voter, body.round, body.kind, body.commit_target, conflicting_target)
    return [vote, Message(MsgKind.VOTE, twin, vote.sender)]


def pick(specs: Iterable[FaultSpec], round: int, *behaviors: Behavior) -> Optional[FaultSpec]:
    """First active spec among ``behaviors`` (in that priority order)."""
    active = [s for s in specs if s.active(round)]
    for behavior in behaviors:
        for spec in active:
            if spec.behavior is behavior:
                return spec
    return None
