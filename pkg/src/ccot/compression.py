"""Gold hidden states and chain subset selection."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch
import torch.nn.functional as F

from .data import ReasoningInstance
from .model import LayeredStates, TinyLM, load_tensors, save_tensors, with_ext
from .numerics import checksum

log = logging.getLogger(__name__)


@dataclass
class CompressionSpec:
    r: float = 0.1
    layer: int = 4  # autoregressive layer l
    scorer_layer: int = 1  # layer T fed to the scorer
    cap: int | None = None  # h; defaults to ceil(200 r)
    selection: str = "uniform"

    def __post_init__(self):
        if not 0.0 <= self.r <= 1.0:
            raise ValueError("compression ratio must lie in [0, 1]")
        if self.selection not in ("uniform", "scorer"):
            raise ValueError(f"unknown selection method {self.selection!r}")

    def check(self, num_layers: int) -> None:
        if not 0 < self.layer < num_layers:
            raise ValueError(f"autoregressive layer must satisfy 0 < l < {num_layers}")
        if not 0 <= self.scorer_layer <= num_layers:
            raise ValueError("scorer layer out of range")

    @property
    def h(self) -> int:
        if self.cap is not None:
            return self.cap
        # round first: 200 * 0.05 is 10.000000000000002 in binary floating point
        return math.ceil(round(200 * self.r, 9))


def target_length(r: float, m: int) -> int:
    """k = ceil(r * m); guarded against binary round-up such as 0.1 * 30."""
    if not 0.0 <= r <= 1.0 or m < 1:
        raise ValueError("need 0 <= r <= 1 and m >= 1")
    if r == 0:
        return 0
    return max(1, math.ceil(round(r * m, 9)))


@dataclass
class SelectionResult:
    indices: list[int]  # 1-based, strictly increasing
    scores: list[float] | None = None

    @property
    def k(self) -> int:
        return len(self.indices)


@dataclass
class GoldStates:
    """``z[j, ell]`` is the full-sequence state of chain index ``indices[j]``
    at layer ``ell``; ``z0`` is the stack for the last query token."""

    indices: list[int]
    z: torch.Tensor  # [k, L+1, d]
    z0: torch.Tensor  # [L+1, d]

    @property
    def k(self) -> int:
        return len(self.indices)

    def teacher_inputs(self, layer: int) -> torch.Tensor:
        """Layer-``layer`` states of z_0 .. z_{k-1}, the teacher-forced inputs."""
        return torch.cat((self.z0[layer][None], self.z[:-1, layer]), dim=0)


class LinearScorer(torch.nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.linear = torch.nn.Linear(dim, 1)
        torch.nn.init.zeros_(self.linear.weight)
        torch.nn.init.zeros_(self.linear.bias)

    def forward(self, states: torch.Tensor) -> torch.Tensor:
        return self.linear(states).squeeze(-1)


def precompute_gold(inst: ReasoningInstance, model: TinyLM) -> LayeredStates:
    """States at every layer for ``[query; chain; answer]`` under the base weights."""
    seq = inst.full_sequence()
    with torch.no_grad():
        return model.forward_all(model.embed(seq), use_cache=False)


def precompute_gold_batch(insts: Sequence[ReasoningInstance], model: TinyLM, batch_size: int = 64) -> list[torch.Tensor]:
    """Batched variant; returns per-instance ``[L+1, n+m+o, d]`` stacks.

    Sequences are right-padded, which leaves every real position untouched
    under causal attention.
    """
    out = []
    with torch.no_grad():
        for b in range(0, len(insts), batch_size):
            chunk = insts[b:b + batch_size]
            seqs = [i.full_sequence() for i in chunk]
            T = max(len(s) for s in seqs)
            ids = torch.zeros(len(seqs), T, dtype=torch.long)
            for r, s in enumerate(seqs):
                ids[r, : len(s)] = torch.tensor(s)
            st = model.forward_all(model.embed(ids), use_cache=False)
            stack = torch.stack(st.states, dim=1)  # [B, L+1, T, d]
            for r, s in enumerate(seqs):
                out.append(stack[r, :, : len(s)].clone())
    return out


def drop_overlong(insts: Sequence[ReasoningInstance], max_len: int) -> list[ReasoningInstance]:
    """Instances whose full sequence fits ``max_len``; the rest are logged and skipped."""
    keep = [i for i in insts if len(i.full_sequence()) <= max_len]
    if len(keep) < len(insts):
        log.warning("skipped %d instance(s) longer than %d tokens", len(insts) - len(keep), max_len)
    return keep


def uniform_indices(m: int, k: int) -> list[int]:
    return [math.ceil(j * m / k) for j in range(1, k + 1)]


def select_indices(chain_states: torch.Tensor, k: int, method: str = "uniform", scorer: LinearScorer | None = None) -> SelectionResult:
    """Pick ``k`` of the ``m`` chain positions (1-based indices).

    ``chain_states`` is ``[m, d]`` at the scorer layer. Scorer mode keeps the
    top-k scores, preferring lower indices on ties.
    """
    m = chain_states.shape[0]
    if k > m:
        raise ValueError(f"cannot select {k} of {m} positions")
    if k < 0:
        raise ValueError("k must be non-negative")
    if k == 0:
        return SelectionResult([], [] if method == "scorer" else None)
    if method == "uniform":
        return SelectionResult(uniform_indices(m, k))
    if method != "scorer":
        raise ValueError(f"unknown selection method {method!r}")
    if scorer is None:
        raise ValueError("scorer selection needs a scorer")
    with torch.no_grad():
        scores = scorer(chain_states)
    order = torch.sort(-scores, stable=True).indices[:k]
    chosen = sorted(int(i) + 1 for i in order)
    return SelectionResult(chosen, scores.tolist())


def gather_gold(states: torch.Tensor | LayeredStates, indices: Sequence[int], query_len: int) -> GoldStates:
    """Gather chain positions ``indices`` (1-based) from full-sequence states.

    ``states`` is a ``[L+1, T, d]`` stack or a single-sequence LayeredStates.
    """
    stack = torch.stack(states.states, dim=0) if isinstance(states, LayeredStates) else states
    pos = torch.tensor([query_len + i - 1 for i in indices], dtype=torch.long)
    z = stack[:, pos].transpose(0, 1).clone()  # [k, L+1, d]
    z0 = stack[:, query_len - 1].clone()
    return GoldStates(list(indices), z, z0)


def chain_states_at(stack: torch.Tensor, inst: ReasoningInstance, layer: int) -> torch.Tensor:
    return stack[layer, inst.n: inst.n + inst.m]


def build_gold(
    insts: Sequence[ReasoningInstance],
    model: TinyLM,
    spec: CompressionSpec,
    scorer: LinearScorer | None = None,
    batch_size: int = 64,
) -> list[GoldStates]:
    if any(len(i.full_sequence()) > model.cfg.max_seq_len for i in insts):
        raise ValueError("instances exceed max_seq_len; filter them with drop_overlong first")
    stacks = precompute_gold_batch(insts, model, batch_size)
    out = []
    for inst, stack in zip(insts, stacks):
        k = target_length(spec.r, inst.m)
        sel = select_indices(chain_states_at(stack, inst, spec.scorer_layer), k, spec.selection, scorer)
        out.append(gather_gold(stack, sel.indices, inst.n))
    return out


def fit_scorer(
    model: TinyLM,
    insts: Sequence[ReasoningInstance],
    scorer_layer: int,
    ridge: float = 1e-3,
) -> LinearScorer:
    """Fit a linear scorer to an oracle that ranks each chain position by how
    much keeping only that position (plus the query) lowers the base model's
    answer loss. Solved in closed form by ridge regression."""
    feats, targets = [], []
    with torch.no_grad():
        for inst in insts:
            seq = inst.full_sequence()
            full = model.forward_all(model.embed(seq))
            ans_emb = model.embed(inst.answer)
            base_loss = _answer_loss_with_cache(model, _slice_cache(full, list(range(inst.n))), ans_emb, inst.answer)
            for j in range(inst.m):
                keep = list(range(inst.n)) + [inst.n + j]
                loss = _answer_loss_with_cache(model, _slice_cache(full, keep), ans_emb, inst.answer)
                feats.append(full.states[scorer_layer][inst.n + j])
                targets.append(base_loss - loss)
    X = torch.stack(feats).double()
    y = torch.tensor(targets, dtype=torch.float64)
    Xb = torch.cat((X, torch.ones(len(X), 1, dtype=torch.float64)), dim=1)
    reg = ridge * torch.eye(Xb.shape[1], dtype=torch.float64)
    reg[-1, -1] = 0.0
    w = torch.linalg.solve(Xb.T @ Xb + reg, Xb.T @ y)
    scorer = LinearScorer(X.shape[1])
    with torch.no_grad():
        scorer.linear.weight.copy_(w[:-1].float()[None])
        scorer.linear.bias.copy_(w[-1:].float())
    return scorer


def _slice_cache(full: LayeredStates, keep: list[int]) -> LayeredStates:
    idx = torch.tensor(keep, dtype=torch.long)
    kv = [(k[:, :, idx], v[:, :, idx]) for k, v in full.kv]
    return LayeredStates([], kv, len(keep))


def _answer_loss_with_cache(model: TinyLM, cache: LayeredStates, ans_emb: torch.Tensor, answer: list[int]) -> float:
    out = model.forward_all(ans_emb[:-1], cache=cache, use_cache=False)
    logits = model.logits(out.states[-1])
    return float(F.cross_entropy(logits, torch.tensor(answer[1:]), reduction="sum"))


# -- gold-state cache ---------------------------------------------------------

def gold_cache_key(
    insts: Sequence[ReasoningInstance],
    model: TinyLM,
    spec: CompressionSpec,
    scorer: LinearScorer | None = None,
) -> str:
    """Hash of (dataset, model weights, spec, scorer weights)."""
    h = hashlib.sha256()
    h.update(json.dumps([i.to_json() for i in insts], sort_keys=True).encode())
    h.update(checksum(model.state_dict().values()).encode())
    h.update(json.dumps(asdict(spec), sort_keys=True).encode())
    if scorer is not None:
        h.update(checksum(scorer.state_dict().values()).encode())
    return h.hexdigest()[:16]


def save_gold(path: str | Path, gold: Sequence[GoldStates]) -> None:
    tensors = {}
    for i, g in enumerate(gold):
        tensors[f"{i:06d}.z"] = g.z
        tensors[f"{i:06d}.z0"] = g.z0
    save_tensors(path, tensors, {"indices": [g.indices for g in gold]})


def load_gold(path: str | Path) -> list[GoldStates]:
    tensors, meta = load_tensors(path)
    return [GoldStates(idx, tensors[f"{i:06d}.z"], tensors[f"{i:06d}.z0"]) for i, idx in enumerate(meta["indices"])]


def cached_gold(
    cache_dir: str | Path,
    insts: Sequence[ReasoningInstance],
    model: TinyLM,
    spec: CompressionSpec,
    scorer: LinearScorer | None = None,
) -> list[GoldStates]:
    key = gold_cache_key(insts, model, spec, scorer)
    path = Path(cache_dir) / f"gold-{key}"
    if with_ext(path, ".json").exists():
        log.info("gold states: cache hit %s", path)
        return load_gold(path)
    gold = build_gold(insts, model, spec, scorer)
    save_gold(path, gold)
    return gold
