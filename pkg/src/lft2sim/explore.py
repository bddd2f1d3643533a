"""Exhaustive state-space search over small LFT2 instances.

The search drives :class:`Replica` objects directly, without the simulator.
Time is in integer ticks. Every one-hop delivery takes either ``delays[0]`` or
``delays[1]`` ticks, chosen independently per (message, destination), and
timers fire exactly at their deadlines. Events that fall on the same tick are
tried in every order, so the search covers all interleavings that such
delays can produce.

One node is byzantine. It runs the replica automaton and adds a second
BLOCK_VOTE for a conflicting sibling to every vote it casts (DOUBLE_VOTE).
With ``equivocate`` set it also, when it leads, proposes a second block that
double-spends the first and sends both to everyone; delivery order then
decides which sibling each honest node sees first.

Reductions that keep every reachable commit:

* the fast/slow choice for a delivery is made lazily, when the fast arrival
  tick is reached;
* same-tick events of different nodes commute (nothing sent at tick t can
  arrive at t), so nodes handle their tick in id order, each trying every
  order of its own events and keeping only distinct outcomes;
* messages the receiver can never act on again (older round, or a vote whose
  target is not above its candidate) are discarded once they become dead;
* votes for a phantom block (one nobody proposed, used as the double-vote
  target when there is no real sibling) are dropped: only the byzantine node
  ever votes for it, and one voter can never reach 2f+1;
* a quorum certificate keeps its vote class but its voters are renamed
  0, 1, 2, ...: the automaton only looks at the class and the number of
  distinct voters, so blocks that differ only in which voters certified
  their parent behave identically;
* states are memoised on everything that influences future behaviour, with
  times taken relative to the current tick (the automaton only compares
  times against its own deadlines, so shifting a state in time changes
  nothing).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .adversary import equivocation_sibling, phantom_sibling
from .core import GENESIS, Block, Message, MsgKind, NodeId, VoteKind, VotePayload
from .replica import Phase, Replica


class StateLimitExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class ExploreConfig:
    n: int = 4
    byzantine: NodeId = 0
    max_round: int = 3
    delays: tuple[int, int] = (2, 3)
    propose_timeout: int = 3
    vote_timeout: int = 3
    equivocate: bool = False
    double_vote: bool = True
    state_limit: int = 5_000_000
    # end the search at the first fork instead of counting every forked state
    stop_at_fork: bool = False

    def __post_init__(self):
        lo, hi = self.delays
        if not 0 < lo <= hi:
            raise ValueError("delays must satisfy 0 < fast <= slow")
        if self.propose_timeout < 1 or self.vote_timeout < 1:
            raise ValueError("timeouts must be at least one tick")
        if not 0 <= self.byzantine < self.n:
            raise ValueError("byzantine node out of range")


@dataclass
class ExploreResult:
    config: ExploreConfig
    states: int = 0
    terminal_states: int = 0
    fork_states: int = 0
    first_fork: Optional[tuple] = None
    # committed heights of honest chains and certified rounds, over terminal states
    heights: set = field(default_factory=set)
    committed_rounds: set = field(default_factory=set)

    @property
    def safe(self) -> bool:
        return self.fork_states == 0

    @property
    def max_committed_height(self) -> int:
        return max(self.heights, default=0)


# a pending delivery: (message, destination, tick, flexible). A flexible item
# may still be delivered at ``tick`` (fast) or at ``tick + slow - fast``.
_Item = tuple


@dataclass(frozen=True)
class _State:
    now: int
    replicas: tuple
    pending: frozenset


def _msg_order(item: _Item) -> tuple:
    msg, dest, tick, flex = item
    body = msg.body
    if msg.kind is MsgKind.NEW_BLOCK:
        detail = (body.hash, "")
    else:
        detail = (body.commit_target or "", body.candidate_target or "")
    return (tick, dest, msg.kind.value, body.round, msg.sender) + detail + (flex,)


class _SearchReplica(Replica):
    def _adopt(self, commit_target, new_candidate, qc):
        qc = tuple(VotePayload(i, v.round, v.kind, v.commit_target, v.candidate_target)
                   for i, v in enumerate(qc))
        super()._adopt(commit_target, new_candidate, qc)


class Explorer:
    def __init__(self, config: ExploreConfig = ExploreConfig()):
        self.cfg = config
        self.blocks: dict[str, Block] = {GENESIS.hash: GENESIS}
        self.honest = [i for i in range(config.n) if i != config.byzantine]
        self.partner: dict[str, str] = {}
        self.phantoms: set[str] = set()
        self.spread = config.delays[1] - config.delays[0]

    # -- construction -----------------------------------------------------

    def initial(self) -> _State:
        replicas, pending = [], set()
        for i in range(self.cfg.n):
            r = _SearchReplica(i, self.cfg.n, self.cfg.propose_timeout, self.cfg.vote_timeout,
                        self.blocks, max_round=self.cfg.max_round)
            r.start_round(0)
            pending |= self._outputs(r, 0)
            replicas.append(r)
        return self._normalise(0, replicas, pending)

    def _outputs(self, r: Replica, now: int) -> set:
        out = set()
        flex = self.spread > 0
        at = now + self.cfg.delays[0]
        for msg, dests in r.drain_out():
            for m in self._byzantine_rewrite(r.id, msg):
                out.update((m, d, at, flex) for d in dests)
        return out

    def _byzantine_rewrite(self, node: NodeId, msg: Message) -> list[Message]:
        if msg.kind is MsgKind.NEW_BLOCK:
            self.blocks.setdefault(msg.body.hash, msg.body)
        if node != self.cfg.byzantine:
            return [msg]
        if msg.kind is MsgKind.NEW_BLOCK and self.cfg.equivocate:
            sibling = equivocation_sibling(msg.body)
            self.blocks.setdefault(sibling.hash, sibling)
            self.partner[msg.body.hash] = sibling.hash
            self.partner[sibling.hash] = msg.body.hash
            return [msg, Message(MsgKind.NEW_BLOCK, sibling, node)]
        if msg.kind is MsgKind.VOTE and self.cfg.double_vote:
            vote = msg.body
            twin = self.partner.get(vote.candidate_target)
            if twin is None:
                phantom = phantom_sibling(self.blocks[vote.candidate_target], node)
                self.blocks.setdefault(phantom.hash, phantom)
                self.phantoms.add(phantom.hash)
                twin = phantom.hash
            return [msg, Message(MsgKind.VOTE, VotePayload(node, vote.round, VoteKind.BLOCK_VOTE,
                                                           vote.commit_target, twin), node)]
        return [msg]

    def _live(self, item: _Item, replicas) -> bool:
        msg, dest = item[0], item[1]
        r = replicas[dest]
        if r.halted:
            return False
        body = msg.body
        if msg in r.in_set:
            return False
        if msg.kind is MsgKind.VOTE and body.candidate_target in self.phantoms:
            return False
        if body.round > r.round:
            return True
        if msg.kind is MsgKind.VOTE:
            if body.round == r.round and r.accepted is not None:
                return True
            target = self.blocks.get(body.candidate_target)
            return target is not None and target.height > r.candidate.height
        if body.round < r.round:
            return False
        # same round: a proposal is only ever accepted in READY before a timeout,
        # and a timeout vote is ignored once the node has accepted a block
        if msg.kind is MsgKind.NEW_BLOCK:
            return r.phase is Phase.READY and not r.timed_out
        return r.accepted is None

    def _normalise(self, now: int, replicas, pending) -> _State:
        return _State(now, tuple(replicas),
                      frozenset(p for p in pending if self._live(p, replicas)))

    # -- transitions ------------------------------------------------------

    def _due_timers(self, r: Replica, now: int) -> list[str]:
        if r.halted:
            return []
        out = []
        if r.propose_deadline == now and r.phase is Phase.READY and not r.timed_out:
            out.append("propose")
        if r.vote_deadline == now and (r.phase is Phase.PROCESS or r.timed_out):
            out.append("vote")
        return out

    def successors(self, state: _State) -> list[_State]:
        now = state.now
        due_nodes = sorted({item[1] for item in state.pending if item[2] == now}
                           | {r.id for r in state.replicas if self._due_timers(r, now)})
        if not due_nodes:
            times = [item[2] for item in state.pending]
            times += [d for r in state.replicas if not r.halted
                      for d in (r.propose_deadline, r.vote_deadline) if d is not None and d > now]
            if not times:
                return []
            return [_State(min(times), state.replicas, state.pending)]

        node = due_nodes[0]
        mine = sorted((item for item in state.pending if item[1] == node and item[2] == now),
                      key=_msg_order)
        flexible = [item for item in mine if item[3]]
        fixed = [item for item in mine if not item[3]]
        base = state.pending - set(mine)
        out = []
        for mask in range(1 << len(flexible)):
            fast = [it for k, it in enumerate(flexible) if mask >> k & 1]
            slow = {(it[0], it[1], now + self.spread, False)
                    for k, it in enumerate(flexible) if not mask >> k & 1}
            for r, sent in self._batch(state.replicas[node], fixed + fast, now):
                replicas = list(state.replicas)
                replicas[node] = r
                out.append(self._normalise(now, replicas, base | slow | sent))
        return out

    def _batch(self, r0: Replica, items: list, now: int) -> list[tuple]:
        """Distinct (replica, sent items) after one node handles ``items`` and its
        due timers at tick ``now``, in every order."""
        events = tuple(("msg", it[0]) for it in items) + tuple(
            ("timer", t) for t in self._due_timers(r0, now))
        results = {}
        seen = set()
        stack = [(r0, frozenset(range(len(events))), frozenset())]
        while stack:
            r, left, sent = stack.pop()
            if not left:
                results.setdefault((self._replica_key(r), sent), (r, sent))
                continue
            for k in sorted(left):
                kind, what = events[k]
                nxt = r.clone()
                if kind == "msg":
                    nxt.receive(what, now)
                elif what == "propose":
                    nxt.on_propose_timer(now)
                else:
                    nxt.on_vote_timer(now)
                new_sent = sent | self._outputs(nxt, now)
                memo = (self._replica_key(nxt), left - {k}, new_sent)
                if memo in seen:
                    continue
                seen.add(memo)
                stack.append((nxt, left - {k}, new_sent))
        return [results[k] for k in sorted(results, key=repr)]

    # -- property ---------------------------------------------------------

    def fork(self, state: _State) -> Optional[tuple]:
        """(height, digests) of two different honest commits at one height, if any."""
        seen: dict[int, str] = {}
        for i in self.honest:
            for b in state.replicas[i].committed:
                prev = seen.setdefault(b.height, b.hash)
                if prev != b.hash:
                    return (b.height, tuple(sorted((prev, b.hash))))
        return None

    @staticmethod
    def _replica_key(r: Replica) -> tuple:
        k = getattr(r, "_explore_key", None)
        if k is None:
            k = r._explore_key = r.state_key(with_deadlines=True)
        return k

    def _key(self, state: _State) -> tuple:
        now = state.now
        keys = []
        for r in state.replicas:
            k = self._replica_key(r)
            pd, vd = k[8]
            keys.append(k[:8] + ((None if pd is None else pd - now,
                                   None if vd is None else vd - now),) + k[9:])
        pending = frozenset((m, d, t - now, f) for m, d, t, f in state.pending)
        return (tuple(keys), pending)

    # -- search -----------------------------------------------------------

    def run(self) -> ExploreResult:
        res = ExploreResult(self.cfg)
        start = self.initial()
        visited = {self._key(start)}
        stack = [start]
        while stack:
            state = stack.pop()
            res.states += 1
            fork = self.fork(state)
            if fork is not None:
                res.fork_states += 1
                if res.first_fork is None:
                    res.first_fork = fork
                if self.cfg.stop_at_fork:
                    break
            nxt = self.successors(state)
            if not nxt:
                res.terminal_states += 1
                for i in self.honest:
                    r = state.replicas[i]
                    res.heights.add(r.committed[-1].height)
                    res.committed_rounds.update(r.certified)
            for s in nxt:
                k = self._key(s)
                if k in visited:
                    continue
                visited.add(k)
                if len(visited) > self.cfg.state_limit:
                    raise StateLimitExceeded(f"more than {self.cfg.state_limit} states")
                stack.append(s)
        return res


def explore(config: ExploreConfig = ExploreConfig()) -> ExploreResult:
    return Explorer(config).run()
