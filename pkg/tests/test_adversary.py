import pytest

from lft2sim.adversary import (
    Behavior,
    FaultSpec,
    apply_on_propose,
    apply_on_vote,
    equivocation_sibling,
    faulty_nodes,
    phantom_sibling,
    pick,
    split_halves,
)
from lft2sim.core import GENESIS, Block, ConflictRelation, Message, MsgKind, VoteKind, VotePayload

BLOCK = Block.create(1, 0, 0, GENESIS.hash, (b"tx-h1",))
PROPOSAL = Message(MsgKind.NEW_BLOCK, BLOCK, 0)
ALL = frozenset({1, 2, 3})
VOTE = Message(MsgKind.VOTE, VotePayload(2, 0, VoteKind.BLOCK_VOTE, GENESIS.hash, BLOCK.hash), 2)
TIMEOUT = Message(MsgKind.TIMEOUT, VotePayload(2, 0, VoteKind.TIMEOUT_VOTE), 2)


class TestFaultSpec:
    def test_window(self):
        s = FaultSpec(1, Behavior.CRASH, 2, 5)
        assert [s.active(r) for r in range(7)] == [False, False, True, True, True, False, False]
        assert FaultSpec(1, Behavior.CRASH).active(10**6)

    def test_str(self):
        assert str(FaultSpec(3, Behavior.DOUBLE_VOTE)) == "3:double_vote"
        assert str(FaultSpec(3, Behavior.CRASH, 2, 5)) == "3:crash@2-5"
        assert str(FaultSpec(3, Behavior.CRASH, 2)) == "3:crash@2-"

    def test_invalid(self):
        with pytest.raises(ValueError):
            FaultSpec(-1, Behavior.CRASH)
        with pytest.raises(ValueError):
            FaultSpec(1, Behavior.CRASH, 3, 3)

    def test_faulty_nodes_dedupes(self):
        specs = [FaultSpec(1, Behavior.EQUIVOCATE), FaultSpec(1, Behavior.DOUBLE_VOTE)]
        assert faulty_nodes(specs) == {1}

    def test_pick_priority(self):
        specs = [FaultSpec(1, Behavior.EQUIVOCATE), FaultSpec(1, Behavior.SILENT_LEADER, 0, 1)]
        assert pick(specs, 0, Behavior.SILENT_LEADER, Behavior.EQUIVOCATE).behavior is Behavior.SILENT_LEADER
        assert pick(specs, 1, Behavior.SILENT_LEADER, Behavior.EQUIVOCATE).behavior is Behavior.EQUIVOCATE
        assert pick(specs, 0, Behavior.CRASH) is None


class TestProposals:
    def test_honest_passthrough(self):
        assert apply_on_propose(None, PROPOSAL, ALL, 4) == apply_on_propose(
            FaultSpec(0, Behavior.DOUBLE_VOTE), PROPOSAL, ALL, 4)
        (t,) = apply_on_propose(None, PROPOSAL, ALL, 4)
        assert t.message == PROPOSAL and t.deliver_to is None

    @pytest.mark.parametrize("behavior", [Behavior.CRASH, Behavior.SILENT_LEADER])
    def test_suppressed(self, behavior):
        assert apply_on_propose(FaultSpec(0, behavior), PROPOSAL, ALL, 4) == []

    def test_equivocation_splits_halves(self):
        a, b = apply_on_propose(FaultSpec(0, Behavior.EQUIVOCATE), PROPOSAL, ALL, 4)
        assert a.deliver_to == {1} and b.deliver_to == {2, 3}
        assert a.message.body != b.message.body
        assert b.message.body.height == BLOCK.height and b.message.body.parent_hash == BLOCK.parent_hash

    def test_sibling_double_spends(self):
        sib = equivocation_sibling(BLOCK)
        assert ConflictRelation().conflicts(BLOCK.txs[0], sib.txs[0])

    def test_phantom_differs_per_voter(self):
        assert phantom_sibling(BLOCK, 1).hash != phantom_sibling(BLOCK, 2).hash != BLOCK.hash

    def test_split_halves(self):
        assert split_halves(4) == ({0, 1}, {2, 3})
        assert split_halves(7) == ({0, 1, 2}, {3, 4, 5, 6})


class TestVotes:
    def test_honest_and_non_voting_faults_passthrough(self):
        for spec in (None, FaultSpec(2, Behavior.SILENT_LEADER), FaultSpec(2, Behavior.EQUIVOCATE)):
            assert apply_on_vote(spec, VOTE) == [VOTE]

    def test_crash_sends_nothing(self):
        assert apply_on_vote(FaultSpec(2, Behavior.CRASH), VOTE) == []

    def test_double_vote_adds_conflicting_vote(self):
        twin_target = equivocation_sibling(BLOCK).hash
        first, second = apply_on_vote(FaultSpec(2, Behavior.DOUBLE_VOTE), VOTE, twin_target)
        assert first == VOTE
        assert second.body.candidate_target == twin_target
        assert (second.body.round, second.body.commit_target) == (0, GENESIS.hash)

    def test_timeout_votes_not_doubled(self):
        assert apply_on_vote(FaultSpec(2, Behavior.DOUBLE_VOTE), TIMEOUT, "x") == [TIMEOUT]

    def test_double_vote_needs_a_distinct_target(self):
        assert apply_on_vote(FaultSpec(2, Behavior.DOUBLE_VOTE), VOTE, BLOCK.hash) == [VOTE]
        assert apply_on_vote(FaultSpec(2, Behavior.DOUBLE_VOTE), VOTE, None) == [VOTE]

    def test_vote_mass_bound_n4(self):
        # 3 honest votes plus 2 from the double voter: 5 payloads, never 2 x 3 for two blocks
        f = 1
        honest = [VotePayload(i, 0, VoteKind.BLOCK_VOTE, GENESIS.hash, BLOCK.hash) for i in (0, 1, 3)]
        byz = apply_on_vote(FaultSpec(2, Behavior.DOUBLE_VOTE), VOTE, equivocation_sibling(BLOCK).hash)
        payloads = set(honest) | {m.body for m in byz}
        assert len(payloads) == 4 * f + 1
        assert len(payloads) < 2 * (2 * f + 1)
