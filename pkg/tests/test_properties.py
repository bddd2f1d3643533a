"""Property-based checks of invariants that must hold for every input."""

import math
import random
from collections import Counter

import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from lft2sim import cli
from lft2sim.adversary import Behavior, FaultSpec
from lft2sim.analysis import check_safety, find_convergence_timeout
from lft2sim.core import (
    GENESIS,
    Block,
    Message,
    MsgKind,
    VoteKind,
    VotePayload,
    quorum_params,
    same_vote,
)
from lft2sim.engine import Scenario, run, sweep_points
from lft2sim.network import DELAY_CAP_S, DelayModel, load_histogram
from lft2sim.replica import CommitEntry, Replica

from oracles import block_digest, max_faults

txs = st.lists(st.binary(min_size=1, max_size=6), max_size=3).map(tuple)


@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 9), txs)
def test_block_digest_matches_reference(height, rnd, proposer, t):
    b = Block.create(height, rnd, proposer, GENESIS.hash, t)
    assert b.hash == block_digest(height, rnd, proposer, GENESIS.hash, t)


@given(txs, txs)
def test_block_digest_separates_payloads(a, b):
    assume(a != b)
    assert Block.create(1, 0, 0, GENESIS.hash, a).hash != Block.create(1, 0, 0, GENESIS.hash, b).hash


@given(st.integers(4, 400))
def test_quorum_arithmetic(n):
    q = quorum_params(n)
    assert q.f == max_faults(n)
    assert 3 * q.f + 1 <= n < 3 * q.f + 4
    assert q.threshold == 2 * q.f + 1


votes = st.builds(
    lambda voter, rnd, cand: Message(MsgKind.VOTE, VotePayload(voter, rnd, VoteKind.BLOCK_VOTE, "c", cand), voter),
    st.integers(0, 6), st.integers(0, 2), st.sampled_from(["x", "y", "z"]))


@given(st.lists(votes, max_size=25))
def test_same_vote_is_a_largest_distinct_voter_class(msgs):
    group = same_vote(msgs)
    if not msgs:
        assert group == []
        return
    keys = {v.key for v in group}
    assert len(keys) == 1
    assert len({v.voter for v in group}) == len(group)
    sizes = Counter()
    for key in {m.body.key for m in msgs}:
        sizes[key] = len({m.body.voter for m in msgs if m.body.key == key})
    assert len(group) == max(sizes.values())
    # permutation invariant
    shuffled = list(msgs)
    random.Random(len(msgs)).shuffle(shuffled)
    assert same_vote(shuffled) == group


@given(st.floats(0, 3), st.floats(0, 2), st.floats(0.01, 1))
def test_sweep_points(lo, span, step):
    pts = sweep_points(lo, lo + span, step)
    assert pts[0] == pytest.approx(lo)
    assert all(b > a for a, b in zip(pts, pts[1:]))
    assert pts[-1] <= lo + span + 1e-6
    assert pts[-1] + step > lo + span - 1e-6


@given(st.lists(st.floats(0, 1), min_size=1, max_size=40), st.floats(0, 1), st.floats(0, 0.1))
def test_bisect_agrees_with_linear_on_monotone_tables(gs, target, tol):
    table = [(i / 10, g) for i, g in enumerate(sorted(gs))]
    assert (find_convergence_timeout(table, target, tol, "bisect")
            == find_convergence_timeout(table, target, tol, "linear"))


@given(st.lists(st.tuples(st.floats(0, 6), st.floats(0.001, 1)), min_size=1, max_size=10))
def test_histogram_normalised_and_capped(rows):
    assume(any(d <= DELAY_CAP_S for d, _ in rows))
    m = load_histogram(rows)
    assert math.isclose(math.fsum(p for _, p in m.bins), 1.0, abs_tol=1e-9)
    assert all(d <= DELAY_CAP_S for d, _ in m.bins)
    xs = m.sample_us(random.Random(0), 20)
    assert all(0 <= x <= DELAY_CAP_S * 1_000_000 for x in xs)


fault_specs = st.builds(
    lambda node, b, start, length: FaultSpec(node, b, start, None if length is None else start + length),
    st.integers(0, 20), st.sampled_from(list(Behavior)), st.integers(0, 9),
    st.one_of(st.none(), st.integers(1, 9)))


@given(st.lists(fault_specs, max_size=4))
def test_fault_strings_round_trip(specs):
    text = ", ".join(str(s) for s in specs)
    assert cli.parse_faults(text, 21) == tuple(specs)


@st.composite
def byzantine_scenarios(draw):
    n = draw(st.sampled_from([4, 7]))
    f = quorum_params(n).f
    bad = draw(st.lists(st.integers(0, n - 1), unique=True, max_size=f))
    faults = []
    for node in bad:
        kinds = draw(st.sets(st.sampled_from([Behavior.EQUIVOCATE, Behavior.DOUBLE_VOTE,
                                              Behavior.SILENT_LEADER]), min_size=1))
        faults += [FaultSpec(node, k) for k in sorted(kinds, key=lambda k: k.value)]
    timeout = draw(st.sampled_from([0.3, 0.6, 1.0, 2.0]))
    return Scenario(n, tuple(faults), timeout, timeout, DelayModel.uniform(0.0, 0.5),
                    seed=draw(st.integers(0, 10**6)), max_rounds=draw(st.integers(5, 25)))


@settings(max_examples=40)
@given(byzantine_scenarios())
def test_no_fork_with_at_most_f_byzantine(sc):
    stats = run(sc)
    verdict = check_safety(stats.honest_logs(), sc.conflicts)
    assert verdict.ok, verdict.summary()
    assert 0 <= stats.committed <= stats.rounds


@settings(max_examples=15)
@given(byzantine_scenarios())
def test_runs_are_reproducible(sc):
    assert run(sc) == run(sc)


@settings(max_examples=20)
@given(byzantine_scenarios())
def test_honest_nodes_vote_once_per_round(sc):
    sent = Counter()
    original = Replica.drain_out

    def spy(self):
        out = original(self)
        for msg, _ in out:
            if msg.kind is MsgKind.VOTE:
                sent[(self.id, msg.body.round)] += 1
        return out

    with pytest.MonkeyPatch.context() as mp:
        mp.setattr(Replica, "drain_out", spy)
        run(sc)
    assert all(c == 1 for c in sent.values())


@given(st.permutations(range(3)), st.integers(1, 6))
def test_safety_verdict_ignores_node_order(order, length):
    logs = {}
    for node in range(3):
        entries, parent = [], GENESIS.hash
        for h in range(1, length + 1):
            tag = b"fork" if (node == 2 and h == length) else b""
            b = Block.create(h, h, 0, parent, (b"t%d" % h + tag,))
            entries.append(CommitEntry(h, b.hash, node, parent, b.txs))
            parent = b.hash
        logs[node] = entries
    reordered = {i: list(reversed(logs[i])) for i in order}
    assert check_safety(logs) == check_safety(reordered)
    assert not check_safety(logs).ok
