"""Decoding regimes: explicit chain of thought, compressed contemplation
tokens, pause tokens, and direct answering, all greedy and cache-backed."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping

import torch

from .adapters import THETA, LoraAdapter, SegmentRouting, routed_forward
from .compression import CompressionSpec
from .data import Tokenizer
from .model import LayeredStates, TinyLM, sample_next
from .training import EndClassifier


@dataclass
class GenerationResult:
    answer: list[int]  # answer tokens after <ANS>, without <EOS>
    contemplation: int
    elapsed: float
    reason: str  # eos | end-classifier | cap-h | max-len
    chain: list[int] = field(default_factory=list)
    answer_reason: str = "eos"

    def text(self, tok: Tokenizer) -> str:
        return tok.detokenize(self.answer)


@dataclass
class Rollout:
    states: torch.Tensor  # [count, L+1, d]
    carries: torch.Tensor  # [count, d] inputs fed at each contemplation position
    cache: LayeredStates
    reason: str
    truncated: bool


def _fwd(model, x, ws, adapters, cache):
    """Forward ``x`` ([T, d]) entirely under weight set ``ws``."""
    if ws == THETA:
        return model.forward_all(x, cache=cache)
    return routed_forward(model, x, SegmentRouting.of((x.shape[0], ws)), adapters, cache=cache)


def _decode(model, cache, last_state, ws, adapters, eos_id, max_new, first_token=None):
    """Greedy decoding. If ``first_token`` is given it is fed first; otherwise
    the next token is read from ``last_state``. Returns tokens and reason."""
    out = []
    if first_token is not None:
        st = _fwd(model, model.embed([first_token]), ws, adapters, cache)
        cache, last_state = st, st.states[-1][-1]
    for _ in range(max_new):
        nxt = sample_next(model.head_dist(last_state))
        if nxt == eos_id:
            return out, cache, "eos"
        out.append(nxt)
        st = _fwd(model, model.embed([nxt]), ws, adapters, cache)
        cache, last_state = st, st.states[-1][-1]
    return out, cache, "max-len"


def rollout_contemplation(
    model: TinyLM,
    cache: LayeredStates,
    query_final: torch.Tensor,
    query_carry: torch.Tensor,
    phi_adapters: Mapping[str, LoraAdapter],
    layer_l: int,
    k: int | None = None,
    end: EndClassifier | None = None,
    cap: int | None = None,
) -> Rollout:
    """Generate contemplation tokens after a cached query.

    The first input is ``query_carry`` (the last query token at layer ``l``)
    and each later input is the layer-``l`` output of the previous token.
    Stops after ``k`` tokens, or when ``end`` fires on the latest final-layer
    state (checked before every token, starting from ``query_final``), or at
    ``cap``.
    """
    if k is None and end is None and cap is None:
        raise ValueError("need k, an END classifier or a cap")
    states, carries = [], []
    z, final = query_carry, query_final
    reason, truncated = "k", False
    while True:
        if k is not None and len(states) >= k:
            break
        if end is not None and end.should_stop(final):
            reason = "end-classifier"
            break
        if cap is not None and len(states) >= cap:
            reason, truncated = "cap-h", True
            break
        st = _fwd(model, z[None], "phi", phi_adapters, cache)
        cache = st
        carries.append(z)
        states.append(torch.stack([s[-1] for s in st.states]))
        z, final = st.states[layer_l][-1], st.states[-1][-1]
    d = model.cfg.hidden_dim
    L1 = model.cfg.num_layers + 1
    return Rollout(
        torch.stack(states) if states else torch.zeros(0, L1, d),
        torch.stack(carries) if carries else torch.zeros(0, d),
        cache,
        reason,
        truncated,
    )


@torch.no_grad()
def cot_generate(
    model: TinyLM,
    query: list[int],
    tok: Tokenizer,
    adapters: Mapping[str, LoraAdapter] | None = None,
    weight_set: str = "r1",
    max_len: int = 96,
) -> GenerationResult:
    """Seed with ``<COT>``, decode discrete chain tokens until ``<ANS>``,
    then decode the answer until ``<EOS>``."""
    t0 = time.perf_counter()
    adapters = adapters or {}
    ws = weight_set if weight_set in adapters else THETA
    budget = min(max_len, model.cfg.max_seq_len - len(query) - 1)
    st = _fwd(model, model.embed(query + [tok.cot_id]), ws, adapters, None)
    cache, last = st, st.states[-1][-1]
    chain, answer, phase, reason = [], [], "chain", "max-len"
    for _ in range(budget):
        nxt = sample_next(model.head_dist(last))
        if phase == "chain":
            if nxt == tok.ans_id:
                phase = "answer"
            else:
                chain.append(nxt)
        else:
            if nxt == tok.eos_id:
                reason = "eos"
                break
            answer.append(nxt)
        st = _fwd(model, model.embed([nxt]), ws, adapters, cache)
        cache, last = st, st.states[-1][-1]
    elapsed = time.perf_counter() - t0
    return GenerationResult(answer, len(chain), elapsed, reason, chain=chain, answer_reason=reason)


@torch.no_grad()
def direct_generate(
    model: TinyLM,
    query: list[int],
    tok: Tokenizer,
    adapters: Mapping[str, LoraAdapter] | None = None,
    weight_set: str = "r0",
    max_answer: int = 8,
) -> GenerationResult:
    """Answer immediately: ``query <ANS>`` then decode until ``<EOS>``."""
    t0 = time.perf_counter()
    adapters = adapters or {}
    ws = weight_set if weight_set in adapters else THETA
    st = _fwd(model, model.embed(query + [tok.ans_id]), ws, adapters, None)
    ans, _, reason = _decode(model, st, st.states[-1][-1], ws, adapters, tok.eos_id, max_answer)
    return GenerationResult(ans, 0, time.perf_counter() - t0, reason, answer_reason=reason)


@torch.no_grad()
def ccot_generate(
    model: TinyLM,
    query: list[int],
    tok: Tokenizer,
    adapters: Mapping[str, LoraAdapter],
    end: EndClassifier | None,
    spec: CompressionSpec,
    max_answer: int = 8,
) -> GenerationResult:
    """Query under the base weights, contemplation tokens under ``phi`` fed by
    layer-``l`` states, answer under ``psi`` starting from ``<ANS>``."""
    t0 = time.perf_counter()
    L = model.cfg.num_layers
    h = spec.h
    cap = min(h, model.cfg.max_seq_len - len(query) - max_answer - 1)
    st = model.forward_all(model.embed(query))
    ro = rollout_contemplation(model, st, st.states[L][-1], st.states[spec.layer][-1], adapters,
                               spec.layer, end=end, cap=cap)
    ans, _, areason = _decode(model, ro.cache, None, "psi", adapters, tok.eos_id, max_answer, first_token=tok.ans_id)
    # reason reports why contemplation stopped; answer_reason flags truncated answers
    reason = ro.reason if ro.reason != "k" else "end-classifier"
    return GenerationResult(ans, len(ro.states), time.perf_counter() - t0, reason, answer_reason=areason)


@torch.no_grad()
def pause_generate(
    model: TinyLM,
    query: list[int],
    tok: Tokenizer,
    adapters: Mapping[str, LoraAdapter],
    pause_embed: torch.Tensor | None,
    k: int,
    max_answer: int = 8,
) -> GenerationResult:
    """Append ``k`` pause embeddings and process query and pauses in a single
    forward pass, then decode the answer."""
    t0 = time.perf_counter()
    ws = "pause" if "pause" in adapters else THETA
    pe = model.embed([tok.pause_id]) if pause_embed is None else pause_embed[None]
    x = torch.cat((model.embed(query), pe.expand(k, -1).to(model.tok_embed.weight.dtype)), dim=0)
    st = _fwd(model, x, ws, adapters, None)
    ans, _, reason = _decode(model, st, None, ws, adapters, tok.eos_id, max_answer, first_token=tok.ans_id)
    return GenerationResult(ans, k, time.perf_counter() - t0, reason, answer_reason=reason)


def timed(fn: Callable[[], GenerationResult], repetitions: int = 3, warmup: int = 1):
    """Wall-clock ``fn`` with a monotonic clock; warmup runs are discarded.

    Returns ``(mean_seconds, stddev_seconds, result_of_last_run)``.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    result = None
    for _ in range(warmup):
        result = fn()
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        result = fn()
        times.append(time.perf_counter() - t0)
    return statistics.fmean(times), statistics.pstdev(times), result
