from collections import deque

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asymlock.asym_memory import Backend, ProcId
from asymlock.checker import (
    COHORT_FAIRNESS,
    DEAD_AND_LIVELOCK_FREE,
    EXECS_CS_INFINITELY_OFTEN,
    GLOBAL_FAIRNESS,
    HOLDS,
    INCONCLUSIVE,
    STARVATION_FREE,
    VIOLATED,
    CheckConfig,
    FairnessAnnotation,
    Model,
    check_invariants,
    check_liveness,
    check_safety,
    count_states,
    initial_states,
    random_fair_run,
    read_trace,
    replay_trace_file,
    run_schedule,
    successors,
    write_trace,
)

SEQ, HAZ = Backend.SEQ_CST, Backend.HAZARD


# -- an independent encoding of the lock as a plain transition system -------
#
# Shared state: victim, the two tails, and budget/next of each process's
# descriptor; descriptors are named by process index, None is the empty
# pointer.  Per process: pc, curr, passed, ret and the value observed by a
# split remote CAS (``MISSING`` when none is in flight).  Only the remote
# tail can have a CAS in flight; while it does, other processes' reads of it
# and remote CAS on it wait.  The enqueue is either one indivisible exchange
# of the tail (``atomic``) or a retry loop of CAS attempts.

MISSING = object()


def oracle_states(n_local, n_remote, k, hazard, atomic=False):
    n = n_local + n_remote
    cls = [0] * n_local + [1] * n_remote

    def moves(state, i):
        victim, tails, budget, nxt, procs = state
        pc, curr, passed, ret, obs = procs[i]
        c = cls[i]
        tails, budget, nxt = list(tails), list(budget), list(nxt)
        in_flight = [j for j in range(n) if procs[j][4] is not MISSING and j != i]

        def done(pc2, curr2=curr, passed2=passed, ret2=ret, obs2=MISSING, victim2=victim):
            p = list(procs)
            p[i] = (pc2, curr2, passed2, ret2, obs2)
            return (victim2, tuple(tails), tuple(budget), tuple(nxt), tuple(p))

        def tail_cas(expected, new):
            # None: must wait; otherwise (observed value, finished?)
            if c == 0 or not hazard:
                if c == 1 and in_flight:
                    return None
                seen = tails[c]
                if seen == expected:
                    tails[c] = new
                return seen, True
            if obs is MISSING:
                if in_flight:
                    return None
                return tails[1], False
            if obs == expected:
                tails[1] = new
            return obs, True

        if pc == "ncs":
            return done("enter")
        if pc == "enter":
            return done("c1")
        if pc == "c1":
            budget[i], nxt[i] = -1, None
            return done("swap", curr2=None)
        if pc == "swap" and atomic:
            if c == 1 and in_flight:
                return None
            pred, tails[c] = tails[c], i
            return done("cwait", curr2=pred)
        if pc == "swap":
            r = tail_cas(curr, i)
            if r is None:
                return None
            seen, finished = r
            if not finished:
                return done("swap", obs2=seen)
            return done("cwait") if seen == curr else done("swap", curr2=seen)
        if pc == "cwait":
            return done("c8" if curr is None else "c2")
        if pc == "c2":
            nxt[curr] = i
            return done("c3")
        if pc == "c3":
            return None if budget[i] < 0 else done("c4")
        if pc == "c4":
            return done("c5" if budget[i] == 0 else "c7")
        if pc == "c5":
            return done("g1", ret2="c6")
        if pc == "c6":
            budget[i] = k
            return done("c7")
        if pc == "c7":
            return done("c10", passed2=True)
        if pc == "c8":
            budget[i] = k
            return done("c9")
        if pc == "c9":
            return done("c10", passed2=False)
        if pc == "c10":
            return done("p2", curr2=None)
        if pc == "p2":
            return done("cs") if passed else done("g1", ret2="cs")
        if pc == "g1":
            return done("gwait", victim2=c)
        if pc == "gwait":
            return done("g2")
        if pc == "g2":
            if c == 0 and in_flight:
                return None
            return done("g4" if tails[1 - c] is None else "g3")
        if pc == "g3":
            return done("g4" if victim != c else "gwait")
        if pc == "g4":
            return done(ret, ret2="cs")
        if pc == "cs":
            return done("exit")
        if pc == "exit":
            return done("r0")
        if pc == "r0":
            return done("cas") if nxt[i] is None else done("r2", curr2=nxt[i])
        if pc == "cas":
            r = tail_cas(i, None)
            if r is None:
                return None
            seen, finished = r
            if not finished:
                return done("cas", obs2=seen)
            return done("r3" if seen == i else "r1")
        if pc == "r1":
            return None if nxt[i] is None else done("r2", curr2=nxt[i])
        if pc == "r2":
            budget[curr] = budget[i] - 1
            return done("r3")
        if pc == "r3":
            return done("ncs", curr2=None)
        raise AssertionError(pc)

    start = [
        (v, (None, None), (-1,) * n, (None,) * n, (("ncs", None, False, "cs", MISSING),) * n) for v in (0, 1)
    ]
    seen = set(start)
    todo = deque(start)
    two_in_cs = False
    while todo:
        s = todo.popleft()
        two_in_cs |= sum(p[0] == "cs" for p in s[4]) > 1
        for i in range(n):
            t = moves(s, i)
            if t is not None and t not in seen:
                seen.add(t)
                todo.append(t)
    return len(seen), two_in_cs


# oracle counts, frozen: (local, remote, budget, hazard backend, enqueue) -> states
ORACLE_COUNTS = {
    (1, 1, 1, False, "atomic"): 634,
    (1, 1, 1, True, "atomic"): 651,
    (2, 1, 1, False, "atomic"): 49548,
    (2, 1, 2, True, "atomic"): 60469,
    (1, 2, 2, True, "atomic"): 61146,
    (1, 1, 1, False, "cas_loop"): 634,
    (1, 1, 1, True, "cas_loop"): 687,
    (2, 1, 1, False, "cas_loop"): 54656,
    (2, 1, 2, True, "cas_loop"): 69387,
    (1, 2, 2, True, "cas_loop"): 79004,
}


def _cfg(key):
    n_local, n_remote, k, hazard, swap = key
    return CheckConfig(n_local, n_remote, k, HAZ if hazard else SEQ, swap=swap)


@pytest.mark.parametrize("key", sorted(ORACLE_COUNTS))
def test_state_counts_match_independent_encoding(key):
    assert count_states(_cfg(key)) == ORACLE_COUNTS[key]


@pytest.mark.parametrize("key", [
    (1, 1, 1, False, "atomic"),
    (1, 1, 1, True, "cas_loop"),
    (0, 2, 2, True, "atomic"),
    (0, 2, 2, True, "cas_loop"),
    (2, 0, 1, False, "cas_loop"),
])
def test_oracle_itself_agrees(key):
    n, two = oracle_states(*key[:4], atomic=key[4] == "atomic")
    assert not two
    assert n == count_states(_cfg(key))


def test_frozen_counts_come_from_the_oracle():
    for key in [(1, 1, 1, True, "atomic"), (1, 1, 1, True, "cas_loop")]:
        assert oracle_states(*key[:4], atomic=key[4] == "atomic")[0] == ORACLE_COUNTS[key]


# -- successor function -----------------------------------------------------


def test_initial_states_cover_both_victims():
    cfg = CheckConfig(1, 1)
    inits = initial_states(cfg)
    assert len(inits) == 2
    assert all(s.pcs() == ("ncs", "ncs") for s in inits)


def test_initial_state_has_one_successor_per_process():
    cfg = CheckConfig(1, 1)
    succ = successors(initial_states(cfg)[0], cfg)
    assert len(succ) == 2
    assert {p for p, _ in succ} == {ProcId(0, 0), ProcId(1, 0)}


def test_waiting_on_budget_is_disabled():
    cfg = CheckConfig(0, 1)
    model = Model(cfg)
    s = model.initial_states()[0]
    s = s._replace(frames=(s.frames[0]._replace(pc="c3"),))
    assert model.value(s, model.sessions[0].desc.reg) == -1
    assert successors(s, cfg) == set()


def test_leader_skips_wait_when_other_tail_empty():
    cfg = CheckConfig(1, 1)
    model = Model(cfg)
    s = model.initial_states()[0]
    s = s._replace(frames=(s.frames[0]._replace(pc="g2"), s.frames[1]))
    nxt = dict(successors(s, cfg))
    assert nxt[ProcId(0, 0)].frames[0].pc == "g4"


def test_bfs_and_dfs_reach_the_same_states():
    for cfg in (CheckConfig(1, 1, 2, HAZ), CheckConfig(2, 1)):
        assert count_states(cfg, "bfs") == count_states(cfg, "dfs")
    with pytest.raises(ValueError):
        count_states(CheckConfig(1, 1), "random")


def test_state_cap_is_reported():
    rep = check_safety(CheckConfig(2, 1, state_cap=100))
    assert rep.verdict == INCONCLUSIVE


# -- safety -----------------------------------------------------------------


@pytest.mark.parametrize("lock_kind,backend,expected", [
    ("alock", SEQ, HOLDS),
    ("alock", HAZ, HOLDS),
    ("peterson2", SEQ, HOLDS),
    ("peterson2", HAZ, HOLDS),
    ("naive_rcas", SEQ, HOLDS),
    ("naive_rcas", HAZ, HOLDS),
    ("mixed_cas", SEQ, HOLDS),
    ("mixed_cas", HAZ, VIOLATED),
])
def test_safety_verdicts(lock_kind, backend, expected):
    cfg = CheckConfig(1, 1, backend=backend, lock_kind=lock_kind)
    assert check_safety(cfg).verdict == expected
    assert check_safety(cfg, reduce=False).verdict == expected


def test_hazard_safety_implies_seqcst_safety():
    # the hazard backend only adds interleavings
    for kind in ("alock", "naive_rcas", "mixed_cas", "peterson2"):
        for n_local, n_remote in ((1, 1), (0, 2), (2, 0)):
            if kind == "peterson2" and (n_local > 1 or n_remote > 1):
                continue
            h = check_safety(CheckConfig(n_local, n_remote, backend=HAZ, lock_kind=kind))
            s = check_safety(CheckConfig(n_local, n_remote, backend=SEQ, lock_kind=kind))
            if h.holds:
                assert s.holds
            assert count_states(CheckConfig(n_local, n_remote, backend=HAZ, lock_kind=kind)) >= count_states(
                CheckConfig(n_local, n_remote, backend=SEQ, lock_kind=kind)
            )


def test_reduction_keeps_verdicts_and_shrinks_the_space():
    cfg = CheckConfig(2, 1, 2, HAZ)
    full, reduced = check_safety(cfg, reduce=False), check_safety(cfg)
    assert full.verdict == reduced.verdict == HOLDS
    assert reduced.states < full.states
    assert count_states(cfg, reduce=True) == reduced.states


def test_mixed_cas_violation_trace_replays(tmp_path):
    cfg = CheckConfig(1, 1, backend=HAZ, lock_kind="mixed_cas")
    rep = check_safety(cfg)
    assert rep.trace[-1].state.pcs() == ("cs", "cs")
    labels = [st.label for st in rep.trace]
    # the remote CAS observes, the local CAS slips in, then the stale store lands
    assert labels.index("acq.observe") < labels.index("acq.store")
    path = tmp_path / "t.csv"
    write_trace(path, cfg, rep.trace, rep.initial_index, reduced=True)
    tf = read_trace(path)
    assert tf.cfg == cfg and tf.chained
    again = replay_trace_file(path)
    assert [st.state for st in again] == [st.state for st in rep.trace]


def test_trace_file_rejects_a_wrong_label(tmp_path):
    cfg = CheckConfig(1, 1, backend=HAZ, lock_kind="mixed_cas")
    rep = check_safety(cfg)
    path = tmp_path / "t.csv"
    write_trace(path, cfg, rep.trace, rep.initial_index, reduced=True)
    text = path.read_text().replace("acq.store", "acq", 1)
    path.write_text(text)
    with pytest.raises(ValueError):
        replay_trace_file(path)


def test_no_spin_on_remote_memory():
    rep = check_safety(CheckConfig(1, 2, 2, HAZ), reduce=False)
    assert rep.spin_violations == 0


@pytest.mark.parametrize("cfg", [
    CheckConfig(1, 1),
    CheckConfig(2, 1, 2, HAZ),
    CheckConfig(1, 2, 1, HAZ),
    CheckConfig(2, 1, 2, HAZ, swap="cas_loop"),
    CheckConfig(1, 2, 1, HAZ, swap="cas_loop"),
])
def test_structural_invariants_hold(cfg):
    assert check_invariants(cfg).verdict == HOLDS


# -- liveness ---------------------------------------------------------------


def _validate_lasso(cfg, rep):
    """Check a lasso without the checker's graph code: the cycle returns to its
    first state and every process either moves in it, is disabled throughout,
    or only ever sits at an exempt label.  An empty cycle means the run
    stutters in its last state forever."""
    model = Model(cfg)
    trace = rep.trace
    assert rep.loop_start is not None and rep.loop_start <= len(trace)
    start = model.initial_states()[rep.initial_index] if rep.loop_start == 0 else trace[rep.loop_start - 1].state
    loop = trace[rep.loop_start:]
    if loop:
        assert trace[-1].state == start
    movers = {st.proc for st in loop}
    states = [start] + [st.state for st in loop]
    for i, p in enumerate(model.procs):
        if p in movers:
            continue
        exempt = all(not cfg.fairness.is_fair(s.frames[i].pc) for s in states)
        disabled = all(p not in dict(model.successors(s)) for s in states)
        assert exempt or disabled, p


def test_execs_cs_is_violated_when_processes_may_idle():
    cfg = CheckConfig(1, 1)
    (rep,) = check_liveness(cfg, [EXECS_CS_INFINITELY_OFTEN])
    assert rep.verdict == VIOLATED
    _validate_lasso(cfg, rep)


def test_execs_cs_holds_when_no_label_is_exempt():
    cfg = CheckConfig(1, 1, fairness=FairnessAnnotation(frozenset()))
    (rep,) = check_liveness(cfg, [EXECS_CS_INFINITELY_OFTEN])
    assert rep.verdict == HOLDS


def test_one_plus_one_liveness():
    reps = check_liveness(CheckConfig(1, 1), [STARVATION_FREE, DEAD_AND_LIVELOCK_FREE, COHORT_FAIRNESS, GLOBAL_FAIRNESS])
    assert [r.verdict for r in reps] == [HOLDS] * 4


def test_cas_loop_enqueue_can_starve_and_atomic_swap_cannot():
    cfg = CheckConfig(1, 2, swap="cas_loop")
    (rep,) = check_liveness(cfg, [STARVATION_FREE])
    assert rep.verdict == VIOLATED
    _validate_lasso(cfg, rep)
    looping = {st.label for st in rep.trace[rep.loop_start:]}
    assert "swap" in looping
    (atomic,) = check_liveness(CheckConfig(1, 2, swap="atomic"), [STARVATION_FREE])
    assert atomic.verdict == HOLDS


def test_naive_flag_lock_starves():
    cfg = CheckConfig(0, 2, lock_kind="naive_rcas")
    (rep,) = check_liveness(cfg, [STARVATION_FREE])
    assert rep.verdict == VIOLATED
    _validate_lasso(cfg, rep)
    (dl,) = check_liveness(cfg, [DEAD_AND_LIVELOCK_FREE])
    assert dl.verdict == HOLDS


def test_unknown_property_is_rejected():
    with pytest.raises(ValueError):
        check_liveness(CheckConfig(1, 1), ["Nonsense"])


# -- random runs ------------------------------------------------------------


def test_random_runs_are_deterministic_per_seed():
    cfg = CheckConfig(1, 2, 2)
    a = random_fair_run(cfg, seed=5, max_steps=3000)
    b = random_fair_run(cfg, seed=5, max_steps=3000)
    c = random_fair_run(cfg, seed=6, max_steps=3000)
    assert a.trace == b.trace and a.acquisitions == b.acquisitions
    assert a.trace != c.trace
    assert a.me_violations == 0 and a.cs_entries > 0


def test_random_run_schedule_replays():
    cfg = CheckConfig(1, 1, backend=HAZ, lock_kind="mixed_cas")
    r = None
    for seed in range(50):
        r = random_fair_run(cfg, seed=seed, max_steps=2000)
        if r.me_violations:
            break
    assert r.me_violations > 0
    procs = [i for i, _ in r.trace[: r.first_violation_step + 1]]
    steps = run_schedule(cfg, r.initial_index, procs)
    assert steps[-1].state.pcs() == ("cs", "cs")


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 3), st.sampled_from([SEQ, HAZ]), st.sampled_from(["atomic", "cas_loop"]))
def test_random_runs_never_break_mutual_exclusion(seed, k, backend, swap):
    r = random_fair_run(CheckConfig(2, 2, k, backend, swap=swap), seed=seed, max_steps=1500, record_trace=False)
    assert r.me_violations == 0
    assert r.spin_violations == 0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 2), max_size=60), st.integers(0, 1))
def test_every_scheduled_state_is_reachable(schedule, init):
    # any prefix of enabled steps stays inside the explored state set
    cfg = CheckConfig(1, 2)
    model = Model(cfg)
    s = model.initial_states()[init]
    for i in schedule:
        nxt = dict((model.procs.index(p), t) for p, t in model.successors(s))
        if i in nxt:
            s = nxt[i]
    assert s in _reachable(cfg)


_REACHABLE = {}


def _reachable(cfg):
    if cfg not in _REACHABLE:
        seen = set(initial_states(cfg))
        todo = list(seen)
        while todo:
            for _, t in successors(todo.pop(), cfg):
                if t not in seen:
                    seen.add(t)
                    todo.append(t)
        _REACHABLE[cfg] = seen
    return _REACHABLE[cfg]


def test_large_random_run_is_safe_and_yields_to_a_waiting_class():
    res = random_fair_run(CheckConfig(3, 3, 2), seed=1, max_steps=1_000_000, record_trace=False)
    assert res.me_violations == 0
    assert res.max_monopoly <= 2
    assert all(n > 0 for n in res.acquisitions.values())
