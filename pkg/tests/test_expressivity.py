import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ccot.expressivity import (
    Agg, CapacityExceeded, Copy, Infeasible, MachineConfig, MachineProgram, Op, TaskFMK, additive_task,
    construct_program, default_subsets, oracle_eval, or_via_and_task, random_op_task, run_program,
    search_infeasibility, search_realizable, summary_csv, realizability_sweep, verify_program,
)


def test_oracle_examples():
    t = additive_task(3, [(1, 2, 3)], q=5)
    assert oracle_eval(t, (1, 2, 3)) == 1
    # K = 1: g over raw inputs
    t1 = additive_task(3, [(2,), (3,)], q=5)
    assert oracle_eval(t1, (4, 3, 4)) == (3 + 4) % 5
    # g = projection to the first argument, op = max
    a = np.arange(5)
    t2 = TaskFMK(3, ((1, 2),), np.maximum.outer(a, a), np.arange(5))
    assert oracle_eval(t2, (4, 2, 0)) == 4


def test_oracle_fold_order_matters_for_nonassociative_op():
    t = random_op_task(3, [(1, 2, 3)], q=4, seed=3)
    op = t.op_table
    for v in itertools.product(range(4), repeat=3):
        assert oracle_eval(t, v) == op[op[v[0], v[1]], v[2]]
    assert any(op[op[a, b], c] != op[a, op[b, c]] for a, b, c in itertools.product(range(4), repeat=3))


def test_task_validation():
    with pytest.raises(ValueError):
        additive_task(2, [(1, 3)])
    with pytest.raises(ValueError):
        additive_task(3, [(1, 2), (1, 2, 3)])


def test_copy_only_program():
    a = np.arange(5)
    t = TaskFMK(2, ((1,),), (a[:, None] + a[None, :]) % 5, np.arange(5))
    m = MachineConfig("none")
    prog = MachineProgram({1: Copy(1), 2: Copy(2)}, {2: Agg((1,))})
    for v in itertools.product(range(5), repeat=2):
        assert run_program(m, prog, t, v) == v[0]


def test_three_chain_carry_example():
    """v1 o v2 at layer 1 of position 3, carried, then o v3."""
    t = additive_task(3, [(1, 2, 3)], q=5)
    m = MachineConfig("autoregressive", p=1)
    prog = MachineProgram({1: Copy(1), 2: Copy(2), 3: Op(1, 2), 4: Op(4, 3)}, {4: Agg((4,))})
    assert verify_program(t, m, prog)
    trace = run_program(m, prog, t, (1, 2, 3), trace=True)
    assert trace.carries == 1 and trace.passes == 2


def test_parallel_adds_no_depth_autoregressive_one_carry_per_token():
    t = additive_task(3, default_subsets(3, 5, 2), q=5)
    for p in (2, 3, 4):
        prog = construct_program(t, MachineConfig("parallel", p))
        tr = run_program(MachineConfig("parallel", p), prog, t, (1, 2, 3), trace=True)
        assert tr.passes == 1 and tr.carries == 0
    t3 = additive_task(3, default_subsets(3, 2, 3), q=5)
    for p in (4, 5, 7):
        m = MachineConfig("autoregressive", p)
        tr = run_program(m, construct_program(t3, m), t3, (1, 2, 3), trace=True)
        assert tr.carries == p and tr.passes == p + 1


def test_program_validation():
    t = additive_task(2, [(1, 2)], q=5)
    m = MachineConfig("none")
    with pytest.raises(ValueError):  # aggregator in layer 1
        run_program(m, MachineProgram({1: Agg((1,)), 2: Copy(2)}, {2: Agg((1,))}), t, (0, 0))
    with pytest.raises(ValueError):  # reference beyond the span
        run_program(m, MachineProgram({1: Op(1, 3), 2: Copy(2)}, {2: Agg((1,))}), t, (0, 0))
    with pytest.raises(ValueError):  # two aggregator applications
        run_program(m, MachineProgram({1: Op(1, 2), 2: Copy(2)}, {1: Agg((1,)), 2: Agg((1,))}), t, (0, 0))
    ar = MachineConfig("autoregressive", p=1)
    with pytest.raises(ValueError):  # an input position may not read a later generated one
        run_program(ar, MachineProgram({1: Copy(3), 2: Copy(2), 3: Copy(3)}, {3: Agg((1,))}), t, (0, 0))
    with pytest.raises(CapacityExceeded):
        run_program(MachineConfig("parallel", 3, capacity=4), MachineProgram(
            {i: Copy(i) for i in range(1, 6)}, {5: Agg((1,))}), t, (0, 0))
    with pytest.raises(ValueError):
        MachineConfig("none", p=1)


def test_construct_examples():
    t = additive_task(3, default_subsets(3, 3, 2), q=5)
    prog = construct_program(t, MachineConfig("none"))
    assert not isinstance(prog, Infeasible) and verify_program(t, MachineConfig("none"), prog)
    t5 = additive_task(3, default_subsets(3, 5, 2), q=5)
    m = MachineConfig("parallel", 2)
    assert verify_program(t5, m, construct_program(t5, m))
    t23 = additive_task(3, default_subsets(3, 2, 3), q=5)
    assert not isinstance(construct_program(t23, MachineConfig("autoregressive", 4)), Infeasible)
    bad = construct_program(t23, MachineConfig("autoregressive", 3))
    assert isinstance(bad, Infeasible) and "M(K-1)" in bad.reason


def test_construct_infeasibility_reasons():
    t = additive_task(2, default_subsets(2, 3, 2), q=5)
    assert "positions" in construct_program(t, MachineConfig("none")).reason
    t3 = additive_task(3, default_subsets(3, 1, 3), q=5)
    assert "depth" in construct_program(t3, MachineConfig("parallel", 4)).reason
    assert "capacity" in construct_program(t, MachineConfig("parallel", 1, capacity=2)).reason
    # MK only binds when M > N: here N + p = 5 fits but MK = 6 does not
    assert "MK" in construct_program(t, MachineConfig("autoregressive", 3, capacity=5)).reason


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(0, 10_000), st.sampled_from(["none", "parallel"]))
def test_constructed_programs_match_oracle_nonassociative(N, M, seed, mode):
    subsets = default_subsets(N, M, 2)
    t = random_op_task(N, subsets, q=3, seed=seed)
    m = MachineConfig(mode, 0 if mode == "none" else max(M - N, 0) + seed % 2)
    prog = construct_program(t, m)
    if mode == "none" and M > N:
        assert isinstance(prog, Infeasible)
    else:
        assert verify_program(t, m, prog)


@pytest.mark.parametrize("K,M", [(3, 1), (3, 2), (4, 1), (4, 2)])
def test_autoregressive_constructions_nonassociative(K, M):
    t = random_op_task(K, default_subsets(K, M, K), q=3, seed=K * 10 + M)
    m = MachineConfig("autoregressive", M * (K - 1))
    assert verify_program(t, m, construct_program(t, m))


def test_search_examples():
    for M in (3, 4, 5):
        assert search_infeasibility(or_via_and_task(2, M), MachineConfig("none")) is True
    t = additive_task(2, [(1, 2), (2, 1)], q=2)
    assert search_infeasibility(t, MachineConfig("none")) is False
    const = TaskFMK(2, ((1, 2),) * 3, np.array([[0, 1], [1, 0]]), np.zeros((2, 2, 2), dtype=int))
    assert search_infeasibility(const, MachineConfig("none")) is False


def test_search_witness_is_valid():
    t = random_op_task(2, [(1, 2), (2, 2)], q=2, seed=1)
    res = search_realizable(t, MachineConfig("none"))
    assert res.realizable and verify_program(t, MachineConfig("none"), res.witness)


def test_search_budget_inconclusive():
    t = or_via_and_task(2, 5)
    assert search_infeasibility(t, MachineConfig("parallel", 1), budget=3) is None


def _all_z2_ops():
    for bits in itertools.product(range(2), repeat=4):
        yield np.array(bits).reshape(2, 2)


def test_construct_agrees_with_search_none_and_parallel():
    """Construct feasible => search finds a program; construct infeasible =>
    some task of that shape is proven unrealizable by search."""
    N = 2
    for M in (1, 2, 3):
        for mode, p in (("none", 0), ("parallel", max(M - N, 0))):
            m = MachineConfig(mode, p)
            subsets = default_subsets(N, M, 2)
            g = np.indices((2,) * M).sum(axis=0) % 2
            feasible = not isinstance(construct_program(TaskFMK(N, tuple(subsets), np.eye(2, dtype=int), g), m), Infeasible)
            if feasible:
                for op in _all_z2_ops():
                    assert search_realizable(TaskFMK(N, tuple(subsets), op, g), m).realizable
            else:
                assert search_infeasibility(or_via_and_task(N, M), m) is True


def test_construct_bound_sufficient_and_search_gap():
    """The decoded-token bound M(K-1) always suffices; search also finds
    programs one token shorter (the first carry can come from the last query
    position), and none below that."""
    for M, K in ((1, 3), (2, 3), (1, 4)):
        t = random_op_task(K, default_subsets(K, M, K), q=3, seed=M + K)
        need = M * (K - 1)
        at = MachineConfig("autoregressive", need)
        assert not isinstance(construct_program(t, at), Infeasible)
        assert search_realizable(t, at).realizable
        one_short = MachineConfig("autoregressive", need - 1)
        assert isinstance(construct_program(t, one_short), Infeasible)
        assert search_realizable(t, one_short).realizable
        if (M, K) == (1, 3):  # larger cases exceed a test-time search budget
            assert search_infeasibility(t, MachineConfig("autoregressive", need - 2)) is True


def test_summary_csv():
    rows = realizability_sweep()
    text = summary_csv(rows)
    assert text.splitlines()[0] == "N,M,K,mode,p,feasible,verified"
    assert all(r.verified for r in rows if r.feasible)
    assert all((r.M <= r.N) == r.feasible for r in rows if r.mode == "none")
