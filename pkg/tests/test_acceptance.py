"""End-to-end acceptance criteria.

Each test checks one criterion at its stated tolerance and records a single
PASS/FAIL line, printed in the terminal summary. The sweeps behind the figure
and table criteria take several minutes on one core.
"""

import random

import pytest

from lft2sim import cli
from lft2sim.adversary import Behavior, FaultSpec
from lft2sim.analysis import (
    check_safety,
    expected_gamma,
    gamma_lower_bound,
    gamma_report,
    message_complexity,
)
from lft2sim.core import quorum_params
from lft2sim.engine import Scenario, run
from lft2sim.explore import ExploreConfig, explore
from lft2sim.network import DelayModel
from lft2sim.replica import OutcomeKind

from conftest import ACCEPTANCE_LINES

pytestmark = pytest.mark.acceptance

FIG2_SIZES = (4, 10, 50, 100)
EPS = 0.05


def report(number, title, ok, detail):
    line = f"C{number} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def fig2_sweeps():
    return {n: cli.run_experiment(cli.preset(f"fig2_n{n}")) for n in FIG2_SIZES}


@pytest.fixture(scope="module")
def fig3_sweeps():
    return {nu: cli.run_experiment(cli.preset(f"fig3_f{nu}")) for nu in cli.TABLE2_FAILURES}


def byzantine_faults(rng, n):
    nodes = rng.sample(range(n), quorum_params(n).f)
    return tuple(FaultSpec(i, b) for i in sorted(nodes)
                 for b in (Behavior.EQUIVOCATE, Behavior.DOUBLE_VOTE))


def test_c1_safety_under_byzantine_faults():
    runs, violations, rounds = 0, 0, []
    for n in (4, 7, 10):
        rng = random.Random(n)
        for seed in range(334):
            timeout = rng.choice((0.3, 0.6, 1.0, 2.0))
            sc = Scenario(n, byzantine_faults(rng, n), timeout, timeout,
                          DelayModel.uniform(0.0, 0.5), seed=seed, max_rounds=50)
            stats = run(sc)
            violations += len(check_safety(stats.honest_logs(), sc.conflicts).violations)
            rounds.append(stats.rounds)
            runs += 1
    ok = runs >= 1000 and min(rounds) >= 50 and violations == 0
    report(1, "safety", ok, f"{runs} runs, min {min(rounds)} rounds, {violations} violations")


@pytest.mark.parametrize("byzantine,equivocate", [(0, False), (3, False), (0, True)])
def test_c2_exhaustive_small_instance(byzantine, equivocate):
    res = explore(ExploreConfig(n=4, byzantine=byzantine, equivocate=equivocate, double_vote=True,
                                max_round=3, delays=(2, 3)))
    role = "equivocating double voter" if equivocate else "double voter"
    ok = res.safe and res.max_committed_height >= 2
    report(2, f"exhaustive search, node {byzantine} {role}", ok,
           f"{res.states} states, {res.fork_states} forks, heights {sorted(res.heights)}")


LIVENESS_FAULTS = [
    (),
    (FaultSpec(1, Behavior.CRASH),),
    (FaultSpec(2, Behavior.SILENT_LEADER),),
    (FaultSpec(0, Behavior.EQUIVOCATE), FaultSpec(0, Behavior.DOUBLE_VOTE)),
    (FaultSpec(3, Behavior.CRASH, 10, 30), FaultSpec(5, Behavior.SILENT_LEADER, 0, 40)),
    (FaultSpec(4, Behavior.DOUBLE_VOTE), FaultSpec(6, Behavior.CRASH, 20)),
]


def test_c3_liveness_when_conditions_hold():
    eligible, misses = 0, []
    for k, faults in enumerate(LIVENESS_FAULTS):
        n = 7 if any(s.node >= 4 for s in faults) else 4
        for timeout in (0.4, 0.8, 1.5):
            sc = Scenario(n, faults, timeout, timeout, DelayModel.uniform(0.0, 0.5),
                          seed=k, max_rounds=120)
            for r in run(sc).per_round:
                if r.conditions_held and r.leader_honest:
                    eligible += 1
                    if r.outcome is not OutcomeKind.COMMITTED:
                        misses.append((k, timeout, r.round, r.outcome))
    ok = eligible >= 500 and not misses
    report(3, "liveness", ok, f"{eligible} eligible rounds, {len(misses)} not committed {misses[:3]}")


@pytest.mark.parametrize("nu", cli.TABLE2_FAILURES)
def test_c4_gamma_with_crashes(nu):
    sc = Scenario(21, cli.crash_faults(nu), 4.0, 4.0, cli.bundled_histogram(), seed=0,
                  min_committed_blocks=200)
    stats = run(sc)
    rep = gamma_report(stats, tolerance=0.02)
    ok = rep.within_tolerance and stats.committed >= 200
    report(4, f"gamma nu={nu}", ok,
           f"gamma {rep.gamma_hat:.4f} vs {expected_gamma(21, nu):.4f} over {stats.committed} blocks")


def test_c5_figure2_shape(fig2_sweeps):
    curves = {n: dict(cli.mean_curve(rows)) for n, rows in fig2_sweeps.items()}
    problems = []
    for n, curve in curves.items():
        pts = sorted(curve.items())
        peak = 0.0
        for t, g in pts:
            if g < peak - EPS:
                problems.append(f"n={n} drops to {g:.3f} at {t}")
            peak = max(peak, g)
            if t <= 0.2 and g > EPS:
                problems.append(f"n={n} gamma {g:.3f} at {t}")
            if t >= 2.0 and g < 0.99:
                problems.append(f"n={n} gamma {g:.3f} at {t}")
    timeouts = sorted(set.intersection(*(set(c) for c in curves.values())))
    spread = max(max(c[t] for c in curves.values()) - min(c[t] for c in curves.values())
                 for t in timeouts)
    if spread > EPS:
        problems.append(f"curves differ by {spread:.3f}")
    report(5, "figure 2 shape", not problems and len(timeouts) == 41,
           f"max spread {spread:.3f} over {len(timeouts)} timeouts {problems[:3]}")


def test_c6_table2_trend(fig3_sweeps):
    table = cli.emit_table2(fig3_sweeps)
    values = " ".join(f"{r.failures}:{r.convergence_timeout}" for r in table.rows)
    complete = all(r.status == "ok" for r in table.rows)
    report(6, "table 2 trend", table.monotone and complete, f"monotone={table.monotone} {values}")


def windowed_faults(rng, n, f, rounds, window=20, behaviors=tuple(Behavior), at_least=0):
    """Faults in fixed windows, at most ``f`` faulty nodes in any round."""
    specs = []
    for start in range(0, rounds, window):
        for node in rng.sample(range(n), rng.randint(at_least, f)):
            behavior = rng.choice(behaviors)
            specs.append(FaultSpec(node, behavior, start, start + window))
    return tuple(specs)


def test_c7_lower_bound_under_windowed_faults():
    n, f = 21, quorum_params(21).f
    bound = gamma_lower_bound(n) - 0.02
    results = []
    # three mixed runs, then two with exactly f crashed or silent nodes in every window
    mixes = [{}] * 3 + [{"behaviors": (Behavior.CRASH, Behavior.SILENT_LEADER), "at_least": f}] * 2
    for seed, mix in enumerate(mixes):
        faults = windowed_faults(random.Random(seed), n, f, 400, **mix)
        sc = Scenario(n, faults, 4.0, 4.0, DelayModel.uniform(0.0, 1.0), seed=seed,
                      min_committed_blocks=200)
        stats = run(sc)
        held = all(r.conditions_held for r in stats.per_round)
        results.append((stats.gamma, stats.committed, held))
    ok = all(g >= bound and c >= 200 and held for g, c, held in results)
    detail = ", ".join(f"{g:.3f}/{c} blocks" for g, c, _ in results)
    report(7, "lower bound", ok, f"bound {bound:.3f}; {detail}")


@pytest.mark.parametrize("n", (4, 10, 21))
@pytest.mark.parametrize("delays", [DelayModel.constant_delay(0.1), DelayModel.uniform(0.1, 0.15)],
                         ids=["constant", "jitter"])
def test_c8_message_complexity(n, delays):
    # jitter stays below one hop, so no node sees round r+1 before round r
    sc = Scenario(n, (), 2.0, 2.0, delays, seed=n, max_rounds=30)
    stats = run(sc)
    mc = message_complexity(stats)
    every_round = all(r.outcome is OutcomeKind.COMMITTED for r in stats.per_round)
    ok = every_round and mc.rounds == stats.rounds and mc.new_block_exact and mc.vote_exact
    report(8, f"message complexity n={n} {delays.kind.value}", ok,
           f"{mc.new_block_avg:g} NEW-BLOCK (n-1={n - 1}), {mc.vote_avg:g} VOTE "
           f"(n(n-1)={n * (n - 1)}) over {mc.rounds} rounds")


def test_c9_byte_identical_reruns(tmp_path, fig2_sweeps):
    first = cli.format_rows(fig2_sweeps[4])
    out = tmp_path / "again.csv"
    assert cli.main(["--preset", "fig2_n4", "--out", str(out)]) == 0
    cfg = tmp_path / "byz.cfg"
    cfg.write_text("nodes = 7\nfaults = 1:equivocate, 1:double_vote, 4:crash@5-15\n"
                   "delay_uniform = 0:0.5\nseed = 11\nmax_rounds = 60\nsweep = 0.2:2:0.3\n")
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    cli.main(["--config", str(cfg), "--out", str(a)])
    cli.main(["--config", str(cfg), "--out", str(b)])
    ok = out.read_text() == first and a.read_bytes() == b.read_bytes()
    report(9, "determinism", ok, "fig2_n4 preset and a byzantine config rerun byte for byte")
