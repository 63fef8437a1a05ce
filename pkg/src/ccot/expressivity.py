"""Idealized two-layer machine for contemplation-token expressivity.

Every hidden state is a ``(symbol, index)`` pair. A block can, at each
position, copy one state, combine two states with the task's binary operator,
or (in the second block) apply the task's aggregator to chosen positions.
Contemplation tokens either extend the span in one parallel pass or are
decoded autoregressively, each new position receiving the previous last
position's first-block output as its input.

Symbols live in ``Z_q``; the operator and aggregator are lookup tables, so
machine runs, the direct oracle and the exhaustive program search all share
one algebra.
"""

from __future__ import annotations

import csv
import io
import itertools
import logging
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

BLANK = 0  # input symbol of a parallel contemplation token


@dataclass(frozen=True)
class IdealizedState:
    symbol: int
    index: int


@dataclass
class TaskFMK:
    """M folds of depth K over index tuples of an N-symbol input, then g."""

    N: int
    subsets: tuple[tuple[int, ...], ...]  # 1-based, folded left in the given order
    op_table: np.ndarray  # [q, q]
    g_table: np.ndarray  # [q] * M

    def __post_init__(self):
        self.op_table = np.asarray(self.op_table, dtype=np.int64)
        self.g_table = np.asarray(self.g_table, dtype=np.int64)
        q = self.q
        if self.op_table.shape != (q, q):
            raise ValueError("operator table must be q x q")
        if self.g_table.shape != (q,) * self.M:
            raise ValueError("aggregator table must have one axis per fold")
        if len({len(t) for t in self.subsets}) != 1:
            raise ValueError("all index tuples need the same depth K")
        for t in self.subsets:
            if any(not 1 <= i <= self.N for i in t):
                raise ValueError(f"index tuple {t} outside 1..{self.N}")
        if ((self.op_table < 0) | (self.op_table >= q)).any() or ((self.g_table < 0) | (self.g_table >= q)).any():
            raise ValueError("tables must map into Z_q")

    @property
    def q(self) -> int:
        return self.op_table.shape[0]

    @property
    def M(self) -> int:
        return len(self.subsets)

    @property
    def K(self) -> int:
        return len(self.subsets[0])

    def op(self, a, b):
        return self.op_table[a, b]

    def g(self, args: Sequence) -> np.ndarray:
        return self.g_table[tuple(args)]


def additive_task(N: int, subsets: Sequence[Sequence[int]], q: int = 5) -> TaskFMK:
    """Operator ``a + b mod q`` and aggregator ``sum mod q``."""
    a = np.arange(q)
    op = (a[:, None] + a[None, :]) % q
    M = len(subsets)
    g = np.indices((q,) * M).sum(axis=0) % q
    return TaskFMK(N, tuple(tuple(s) for s in subsets), op, g)


def random_op_task(N: int, subsets: Sequence[Sequence[int]], q: int, seed: int) -> TaskFMK:
    """A fixed random (generally non-associative, non-commutative) operator
    with the sum-mod-q aggregator."""
    rng = np.random.default_rng(seed)
    op = rng.integers(0, q, size=(q, q))
    M = len(subsets)
    g = np.indices((q,) * M).sum(axis=0) % q
    return TaskFMK(N, tuple(tuple(s) for s in subsets), op, g)


def oracle_eval(task: TaskFMK, inputs: Sequence[int]) -> int:
    if len(inputs) != task.N:
        raise ValueError(f"expected {task.N} inputs")
    folds = []
    for t in task.subsets:
        acc = inputs[t[0] - 1]
        for i in t[1:]:
            acc = task.op(acc, inputs[i - 1])
        folds.append(int(acc))
    return int(task.g(folds))


# -- machine --------------------------------------------------------------------

@dataclass(frozen=True)
class Copy:
    src: int


@dataclass(frozen=True)
class Op:
    left: int
    right: int


@dataclass(frozen=True)
class Agg:
    sources: tuple[int, ...]


Action = Copy | Op | Agg

MODES = ("none", "parallel", "autoregressive")


@dataclass(frozen=True)
class MachineConfig:
    mode: str = "none"
    p: int = 0  # extra contemplation tokens
    capacity: int = 64  # most positions (index pairs) a block can serve
    layers: int = 2
    carry_layer: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "none" and self.p:
            raise ValueError("mode 'none' takes no extra tokens")
        if self.layers != 2 or self.carry_layer != 1:
            raise ValueError("the idealized machine has two layers and carries layer 1")


@dataclass
class MachineProgram:
    layer1: dict[int, Action]  # position -> action
    layer2: dict[int, Action]  # the last position must hold the Agg

    def actions(self) -> Iterator[tuple[int, int, Action]]:
        for pos, a in self.layer1.items():
            yield 1, pos, a
        for pos, a in self.layer2.items():
            yield 2, pos, a


@dataclass
class Infeasible:
    reason: str

    def __bool__(self) -> bool:
        return False


class CapacityExceeded(ValueError):
    pass


@dataclass
class RunTrace:
    value: int
    passes: int  # sequential two-block passes
    carries: int


def _ref_limit(machine: MachineConfig, N: int, pos: int) -> int:
    total = N + machine.p
    if machine.mode == "autoregressive":
        return max(N, pos)
    return total


def validate_program(machine: MachineConfig, program: MachineProgram, N: int, M: int) -> None:
    total = N + machine.p
    if total > machine.capacity:
        raise CapacityExceeded(f"{total} positions exceed capacity {machine.capacity}")
    if set(program.layer1) != set(range(1, total + 1)):
        raise ValueError("layer 1 needs exactly one action per position")
    aggs = 0
    for layer, pos, a in program.actions():
        limit = _ref_limit(machine, N, pos) if layer == 1 else total
        refs = {Copy: lambda a: (a.src,), Op: lambda a: (a.left, a.right), Agg: lambda a: a.sources}[type(a)](a)
        if any(not 1 <= r <= limit for r in refs):
            raise ValueError(f"layer {layer} position {pos} references outside 1..{limit}")
        if isinstance(a, Agg):
            if layer != 2:
                raise ValueError("the aggregator may only run in layer 2")
            if len(a.sources) != M:
                raise ValueError("aggregator needs one source per fold")
            aggs += 1
    if aggs > 1:
        raise ValueError("at most one aggregator application")
    if not isinstance(program.layer2.get(total), Agg):
        raise ValueError("the output position must apply the aggregator in layer 2")


def _block(states: list[IdealizedState], actions: dict[int, Action], task: TaskFMK, span: int) -> list[IdealizedState]:
    out = []
    for pos in range(1, span + 1):
        a = actions.get(pos, Copy(pos))
        if isinstance(a, Copy):
            sym = states[a.src - 1].symbol
        elif isinstance(a, Op):
            sym = int(task.op(states[a.left - 1].symbol, states[a.right - 1].symbol))
        else:
            sym = int(task.g([states[s - 1].symbol for s in a.sources]))
        out.append(IdealizedState(sym, pos))
    return out


def run_program(machine: MachineConfig, program: MachineProgram, task: TaskFMK, inputs: Sequence[int],
                trace: bool = False) -> int | RunTrace:
    validate_program(machine, program, task.N, task.M)
    N, p = task.N, machine.p
    layer0 = [IdealizedState(int(v), i + 1) for i, v in enumerate(inputs)]
    passes = carries = 0
    if machine.mode == "autoregressive":
        while True:
            span = len(layer0)
            h1 = _block(layer0, program.layer1, task, span)
            passes += 1
            if span == N + p:
                break
            carry = h1[-1]
            layer0.append(IdealizedState(carry.symbol, span + 1))
            carries += 1
    else:
        layer0 += [IdealizedState(BLANK, N + j + 1) for j in range(p)]
        h1 = _block(layer0, program.layer1, task, N + p)
        passes = 1
    h2 = _block(h1, program.layer2, task, N + p)
    value = h2[-1].symbol
    return RunTrace(value, passes, carries) if trace else value


def construct_program(task: TaskFMK, machine: MachineConfig) -> MachineProgram | Infeasible:
    """Build a program realizing ``task`` following the constructive argument.

    ``none``: depth <= 2 and M <= N, one fold per position in block 1 and the
    aggregator in block 2. ``parallel(p)``: the same over N + p positions.
    ``autoregressive(p)``: K - 1 decoded tokens per fold, each applying one
    operator step to the carried prefix; needs p >= M (K - 1) and MK <= capacity.
    """
    N, M, K, p = task.N, task.M, task.K, machine.p
    total = N + p
    if total > machine.capacity:
        return Infeasible(f"N + p = {total} exceeds capacity {machine.capacity}")
    layer1: dict[int, Action] = {pos: Copy(pos) for pos in range(1, total + 1)}
    layer2: dict[int, Action] = {pos: Copy(pos) for pos in range(1, total + 1)}
    if machine.mode in ("none", "parallel") or K == 1:
        if K > 2:
            return Infeasible(f"depth K = {K} > 2 needs autoregressive contemplation tokens")
        if M > total:
            return Infeasible(f"M = {M} folds exceed the {total} available positions")
        for j, t in enumerate(task.subsets, start=1):
            layer1[j] = Op(t[0], t[1]) if K == 2 else Copy(t[0])
        layer2[total] = Agg(tuple(range(1, M + 1)))
        return MachineProgram(layer1, layer2)
    need = M * (K - 1)
    if p < need:
        return Infeasible(f"p = {p} < M(K-1) = {need} autoregressive tokens")
    if M * K > machine.capacity:
        return Infeasible(f"MK = {M * K} exceeds capacity {machine.capacity}")
    results = []
    pos = N
    for t in task.subsets:
        for step in range(1, K):
            pos += 1
            layer1[pos] = Op(t[0], t[1]) if step == 1 else Op(pos, t[step])
        results.append(pos)
    layer2[total] = Agg(tuple(results))
    return MachineProgram(layer1, layer2)


def verify_program(task: TaskFMK, machine: MachineConfig, program: MachineProgram) -> bool:
    """Exhaustive check against the oracle on all q^N inputs."""
    for inputs in itertools.product(range(task.q), repeat=task.N):
        if run_program(machine, program, task, inputs) != oracle_eval(task, inputs):
            return False
    return True


# -- exhaustive search ----------------------------------------------------------

@dataclass
class SearchResult:
    realizable: bool | None  # None: budget exhausted, inconclusive
    checked: int
    witness: MachineProgram | None = None


def _options(tables: list[np.ndarray], limit: int, task: TaskFMK):
    """Distinct block-1 outputs reachable at one position, with an action each."""
    seen: dict[bytes, tuple[np.ndarray, Action]] = {}
    for j in range(1, limit + 1):
        t = tables[j - 1]
        seen.setdefault(t.tobytes(), (t, Copy(j)))
    for a in range(1, limit + 1):
        for b in range(1, limit + 1):
            t = task.op_table[tables[a - 1], tables[b - 1]]
            seen.setdefault(t.tobytes(), (t, Op(a, b)))
    return list(seen.values())


def search_realizable(task: TaskFMK, machine: MachineConfig, budget: int = 2_000_000) -> SearchResult:
    """Enumerate every program for ``machine`` (up to behavioural equivalence
    of block-1 outputs) and look for one matching the oracle on all inputs."""
    N, M, p = task.N, task.M, machine.p
    total = N + p
    if total > machine.capacity:
        return SearchResult(False, 0)
    X = np.array(list(itertools.product(range(task.q), repeat=N)), dtype=np.int64).reshape(-1, N)
    target = np.array([oracle_eval(task, x) for x in X], dtype=np.int64)
    checked = 0

    def agg_match(h1: list[np.ndarray]):
        nonlocal checked
        distinct: dict[bytes, int] = {}
        for pos, t in enumerate(h1, start=1):
            distinct.setdefault(t.tobytes(), pos)
        cols = list(distinct.values())
        for src in itertools.product(cols, repeat=M):
            checked += 1
            if np.array_equal(task.g([h1[s - 1] for s in src]), target):
                return src
        return None

    layer0 = [X[:, i] for i in range(N)]
    if machine.mode != "autoregressive":
        layer0 += [np.full(len(X), BLANK, dtype=np.int64) for _ in range(p)]
        opts = _options(layer0, total, task)
        # positions are interchangeable here, so multisets of outputs suffice
        for combo in itertools.combinations_with_replacement(range(len(opts)), total):
            if checked > budget:
                log.warning("search budget exhausted after %d candidates", checked)
                return SearchResult(None, checked)
            h1 = [opts[c][0] for c in combo]
            src = agg_match(h1)
            if src is not None:
                l1 = {pos: opts[c][1] for pos, c in enumerate(combo, start=1)}
                return SearchResult(True, checked, MachineProgram(l1, {total: Agg(src)}))
        return SearchResult(False, checked)

    # autoregressive: positions 1..N read inputs only; each later position reads
    # everything up to itself, its own input being the previous block-1 output
    input_opts = _options(layer0, N, task)
    exhausted = False

    def extend(h1: list[np.ndarray], acts: list[Action], inputs0: list[np.ndarray]):
        nonlocal exhausted
        if checked > budget:
            exhausted = True
            return None
        pos = len(h1) + 1
        if pos > total:
            src = agg_match(h1)
            if src is None:
                return None
            return MachineProgram({i + 1: a for i, a in enumerate(acts)}, {total: Agg(src)})
        if pos <= N:
            choices = input_opts
        else:
            choices = _options(inputs0 + [h1[-1]], pos, task)
        nxt_inputs = inputs0 if pos <= N else inputs0 + [h1[-1]]
        for t, a in choices:
            found = extend(h1 + [t], acts + [a], nxt_inputs)
            if found is not None or exhausted:
                return found
        return None

    # the first N - 1 input positions are interchangeable; fix a multiset for them
    for head in itertools.combinations_with_replacement(range(len(input_opts)), max(N - 1, 0)):
        h1 = [input_opts[c][0] for c in head]
        acts = [input_opts[c][1] for c in head]
        found = extend(h1, acts, list(layer0))
        if exhausted:
            log.warning("search budget exhausted after %d candidates", checked)
            return SearchResult(None, checked)
        if found is not None:
            return SearchResult(True, checked, found)
    return SearchResult(False, checked)


def search_infeasibility(task: TaskFMK, machine: MachineConfig, budget: int = 2_000_000) -> bool | None:
    """True iff no program realizes ``task``; None when the budget ran out."""
    res = search_realizable(task, machine, budget)
    return None if res.realizable is None else not res.realizable


# -- summary --------------------------------------------------------------------

def or_via_and_task(N: int, M: int) -> TaskFMK:
    """Over Z_2 with operator AND: the first three folds are v1&v2, v1, v2 and
    g is the XOR of the first three fold values, so f(v) = v1 OR v2. A machine
    with only two positions cannot produce OR from AND-folds and XOR-of-three."""
    if N != 2 or M < 3:
        raise ValueError("defined for N = 2 and M >= 3")
    base = [(1, 2), (1, 1), (2, 2), (2, 1), (1, 2)]
    subsets = [base[j % len(base)] for j in range(M)]
    op = np.array([[0, 0], [0, 1]])
    idx = np.indices((2,) * M)
    g = (idx[0] ^ idx[1] ^ idx[2]).astype(np.int64)
    return TaskFMK(2, tuple(subsets), op, g)


def default_subsets(N: int, M: int, K: int) -> list[tuple[int, ...]]:
    """M distinct index tuples of length K over 1..N (combinations first,
    then tuples with repeats when N is too small)."""
    pool = list(itertools.combinations(range(1, N + 1), K))
    pool += [t for t in itertools.product(range(1, N + 1), repeat=K) if t not in pool]
    if M > len(pool):
        pool = pool * (M // len(pool) + 1)
    return pool[:M]


@dataclass
class SummaryRow:
    N: int
    M: int
    K: int
    mode: str
    p: int
    feasible: bool
    verified: bool | None
    reason: str = ""


def realizability_sweep(q: int = 5, capacity: int = 64) -> list[SummaryRow]:
    """Rows for K=2 over N <= 3, M <= 5 (standard and parallel inference) and
    for K in {3, 4}, M <= 2 with M(K-1) autoregressive tokens."""
    rows = []
    for N in range(1, 4):
        for M in range(1, 6):
            task = additive_task(N, default_subsets(N, M, 2), q)
            for mode, p in (("none", 0), ("parallel", max(M - N, 0))):
                rows.append(_summary(task, MachineConfig(mode, p, capacity)))
    for K in (3, 4):
        for M in (1, 2):
            N = K
            task = additive_task(N, default_subsets(N, M, K), q)
            rows.append(_summary(task, MachineConfig("autoregressive", M * (K - 1), capacity)))
    return rows


def _summary(task: TaskFMK, machine: MachineConfig) -> SummaryRow:
    prog = construct_program(task, machine)
    if isinstance(prog, Infeasible):
        return SummaryRow(task.N, task.M, task.K, machine.mode, machine.p, False, None, prog.reason)
    return SummaryRow(task.N, task.M, task.K, machine.mode, machine.p, True, verify_program(task, machine, prog))


def summary_csv(rows: Sequence[SummaryRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["N", "M", "K", "mode", "p", "feasible", "verified"])
    for r in rows:
        w.writerow([r.N, r.M, r.K, r.mode, r.p, r.feasible, "" if r.verified is None else r.verified])
    return buf.getvalue()
