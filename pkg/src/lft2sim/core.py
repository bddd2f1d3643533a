"""Value types shared by every LFT2 replica: blocks, votes, messages and quorum arithmetic."""

from __future__ import annotations

import enum
import hashlib
import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional

NodeId = int


class MsgKind(enum.Enum):
    NEW_BLOCK = "NEW-BLOCK"
    VOTE = "VOTE"
    TIMEOUT = "TIMEOUT"

    # members are singletons; identity hashing keeps the hot vote path in C
    __hash__ = object.__hash__


class VoteKind(enum.Enum):
    BLOCK_VOTE = "BLOCK_VOTE"
    TIMEOUT_VOTE = "TIMEOUT_VOTE"

    __hash__ = object.__hash__


@dataclass(frozen=True)
class QuorumParams:
    n: int
    f: int
    threshold: int


@dataclass(frozen=True, slots=True)
class VotePayload:
    """A VOTE(voter, B', B) or a TIMEOUT,BLANK payload.

    ``commit_target`` is the block the vote commits (the voter's candidate) and
    ``candidate_target`` the freshly proposed block that becomes the new candidate.
    A BLANK timeout vote carries neither target.
    """

    voter: NodeId
    round: int
    kind: VoteKind
    commit_target: Optional[str] = None
    candidate_target: Optional[str] = None
    key: tuple = field(init=False, repr=False, compare=False)
    _hash: int = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        key = (self.kind, self.round, self.commit_target, self.candidate_target)
        object.__setattr__(self, "key", key)
        object.__setattr__(self, "_hash", hash((self.voter, key)))
        has_targets = (self.commit_target is not None, self.candidate_target is not None)
        if self.kind is VoteKind.BLOCK_VOTE and has_targets != (True, True):
            raise ValueError("BLOCK_VOTE needs both commit and candidate targets")
        if self.kind is VoteKind.TIMEOUT_VOTE and has_targets != (False, False):
            raise ValueError("TIMEOUT_VOTE carries no targets")

    # ``key`` is the equality class used by :func:`same_vote` (everything except the voter)

    def __hash__(self):
        return self._hash

    def as_list(self) -> list:
        return [self.voter, self.round, self.kind.value, self.commit_target, self.candidate_target]


@dataclass(frozen=True, slots=True)
class Block:
    hash: str
    height: int
    round: int
    proposer: NodeId
    parent_hash: str
    txs: tuple[bytes, ...] = ()
    justification: tuple[VotePayload, ...] = ()

    def __hash__(self):
        # equal blocks carry equal digests
        return hash(self.hash)

    @classmethod
    def create(cls, height, round, proposer, parent_hash, txs=(), justification=()) -> "Block":
        txs = tuple(txs)
        justification = tuple(justification)
        digest = compute_hash(height, round, proposer, parent_hash, txs, justification)
        return cls(digest, height, round, proposer, parent_hash, txs, justification)


def compute_hash(height, round, proposer, parent_hash, txs, justification) -> str:
    """SHA-256 over a canonical JSON rendering of every block field except the hash."""
    canonical = json.dumps(
        [height, round, proposer, parent_hash, [tx.hex() for tx in txs],
         [v.as_list() for v in justification]],
        separators=(",", ":"),
    )
    return hashlib.sha256(canonical.encode()).hexdigest()


def check_hash(block: Block) -> bool:
    return block.hash == compute_hash(block.height, block.round, block.proposer,
                                      block.parent_hash, block.txs, block.justification)


GENESIS = Block.create(height=0, round=0, proposer=0, parent_hash="")


@dataclass(frozen=True, slots=True)
class Message:
    """A wire message. ``sender`` plays the role of the signature and cannot be forged."""

    kind: MsgKind
    body: object
    sender: NodeId
    _hash: int = field(init=False, repr=False, compare=False)

    def __hash__(self):
        return self._hash

    def __post_init__(self):
        object.__setattr__(self, "_hash", hash((self.kind, self.body, self.sender)))
        if self.kind is MsgKind.NEW_BLOCK:
            if not isinstance(self.body, Block):
                raise ValueError("NEW-BLOCK must carry a Block")
            return
        if not isinstance(self.body, VotePayload):
            raise ValueError(f"{self.kind.value} must carry a VotePayload")
        expected = VoteKind.BLOCK_VOTE if self.kind is MsgKind.VOTE else VoteKind.TIMEOUT_VOTE
        if self.body.kind is not expected:
            raise ValueError(f"{self.kind.value} cannot carry a {self.body.kind.value}")
        if self.body.voter != self.sender:
            raise ValueError("vote payload attributed to a node other than its sender")

    @property
    def round(self) -> int:
        return self.body.round


def leader_of(round: int, n: int) -> NodeId:
    """Round-robin proposer schedule, keyed by round rather than height."""
    if n < 1:
        raise ValueError("leader_of needs at least one node")
    return round % n


def quorum_params(n: int) -> QuorumParams:
    if n < 4:
        raise ValueError(f"n={n}: byzantine tolerance needs at least 4 nodes")
    f = (n - 1) // 3
    return QuorumParams(n=n, f=f, threshold=2 * f + 1)


def _tie_key(key: tuple, size: int) -> tuple:
    kind, round, commit_target, candidate_target = key
    return (-size, round, candidate_target or "", commit_target or "", kind.value)


def same_vote(in_set: Iterable[Message]) -> list[VotePayload]:
    """Largest group of identical votes in ``in_set``, each voter counted once.

    Non-vote messages are ignored. Ties go to the lowest round, then the
    lexicographically smallest candidate digest. Returns the group sorted by voter.
    """
    classes: dict[tuple, dict[NodeId, VotePayload]] = defaultdict(dict)
    for msg in in_set:
        if msg.kind is MsgKind.NEW_BLOCK:
            continue
        vote = msg.body
        classes[vote.key].setdefault(vote.voter, vote)
    if not classes:
        return []
    best = min(classes, key=lambda k: _tie_key(k, len(classes[k])))
    group = classes[best]
    return [group[v] for v in sorted(group)]


@dataclass(frozen=True)
class ConflictRelation:
    """Injected "conflicts-with" relation between opaque transactions.

    Besides explicit pairs, a transaction and the same bytes followed by
    ``double_spend_suffix`` always conflict (that is how equivocating leaders
    build their second block).
    """

    pairs: frozenset = field(default_factory=frozenset)
    double_spend_suffix: Optional[bytes] = b"-ds"

    @classmethod
    def from_pairs(cls, pairs, double_spend_suffix=b"-ds") -> "ConflictRelation":
        return cls(frozenset(frozenset((a, b)) for a, b in pairs), double_spend_suffix)

    def partners(self, tx: bytes) -> set[bytes]:
        out = set()
        for pair in self.pairs:
            if tx in pair and len(pair) == 2:
                out.update(pair - {tx})
        suffix = self.double_spend_suffix
        if suffix:
            out.add(tx + suffix)
            if tx.endswith(suffix):
                out.add(tx[: -len(suffix)])
        return out

    def conflicts(self, a: bytes, b: bytes) -> bool:
        return a != b and b in self.partners(a)
