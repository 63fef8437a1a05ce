"""Training stages: base pretraining, the layer-wise contemplation generator
(``phi``), the answer decoder (``psi``) with its END probe, and the r=0, r=1
and pause baselines."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .adapters import THETA, LoraAdapter, build_route, set_trainable
from .compression import CompressionSpec, GoldStates, target_length
from .data import ReasoningInstance, Tokenizer
from .model import TinyLM

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    optimizer: str = "adam"  # or "sgd" (with momentum)
    lr: float = 3e-4
    batch_size: int = 32
    steps: int = 200
    seed: int = 0
    eps: float = 1e-6  # variance floor of the scaled loss
    warmup: float = 0.05
    momentum: float = 0.9
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("step size must be non-negative")
        if self.eps <= 0:
            raise ValueError("variance floor must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class NonFiniteLoss(RuntimeError):
    pass


def make_optimizer(params: Sequence[nn.Parameter], cfg: TrainConfig):
    params = [p for p in params if p.requires_grad]
    if cfg.optimizer == "adam":
        opt = torch.optim.Adam(params, lr=cfg.lr)
    else:
        opt = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum)
    warm = max(1, int(round(cfg.warmup * cfg.steps)))
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: min(1.0, (s + 1) / warm))
    return opt, sched, params


def _step(loss: torch.Tensor, opt, sched, params, cfg: TrainConfig, what: str) -> float:
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"{what}: non-finite loss {loss.item()}")
    opt.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
    opt.step()
    sched.step()
    return float(loss.detach())


def write_curve(path: str | Path, curve: Sequence[float]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, v in enumerate(curve):
            w.writerow([i, repr(v)])


# -- losses -------------------------------------------------------------------

def loss_scaled_mse(pred: torch.Tensor, gold: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """MSE(pred, gold) / (var(gold) + eps) per vector, averaged over vectors.

    The variance is the population variance over the hidden coordinates of
    each gold vector.
    """
    if pred.shape != gold.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gold.shape)}")
    mse = (pred - gold).pow(2).mean(-1)
    var = gold.var(-1, unbiased=False)
    return (mse / (var + eps)).mean()


def answer_ce(logits: torch.Tensor, answer: torch.Tensor) -> torch.Tensor:
    """-sum_{i=2..o} log p(a_i | a_<i).

    ``logits[i]`` is the output at answer position ``i`` (0-based) for
    ``i < o - 1``; the first answer token is conditioned on, never predicted.
    """
    if logits.shape[0] != answer.shape[0] - 1:
        raise ValueError("need one logit row per predicted answer token")
    return F.cross_entropy(logits, answer[1:], reduction="sum")


def end_bce(logit: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(logit, label)


# -- batch assembly -----------------------------------------------------------

@dataclass
class Segment:
    payload: list[int] | torch.Tensor  # token ids or [k, d] input vectors
    weight_set: str = THETA
    targets: list[int] | None = None  # next-token targets, -100 to ignore


def assemble(
    model: TinyLM,
    rows: Sequence[Sequence[Segment]],
    names: Sequence[str],
    pause_embed: torch.Tensor | None = None,
    pause_id: int | None = None,
):
    """Right-pad rows of segments into ``(embeds, ids, targets, lengths)``."""
    d = model.cfg.hidden_dim
    dtype = model.tok_embed.weight.dtype
    lengths = [sum(len(s.payload) for s in row) for row in rows]
    T = max(lengths)
    B = len(rows)
    ids = torch.zeros(B, T, dtype=torch.long)
    targets = torch.full((B, T), -100, dtype=torch.long)
    pieces = []
    for r, row in enumerate(rows):
        parts = []
        pos = 0
        for seg in row:
            n = len(seg.payload)
            if isinstance(seg.payload, torch.Tensor):
                parts.append(seg.payload.to(dtype))
            else:
                toks = torch.tensor(seg.payload, dtype=torch.long)
                e = model.embed(toks)
                if pause_embed is not None:
                    e = torch.where((toks == pause_id)[:, None], pause_embed[None, :], e)
                parts.append(e)
            ids[r, pos:pos + n] = names.index(seg.weight_set)
            if seg.targets is not None:
                targets[r, pos:pos + n] = torch.tensor(seg.targets, dtype=torch.long)
            pos += n
        if pos < T:
            parts.append(torch.zeros(T - pos, d, dtype=dtype))
        pieces.append(torch.cat(parts, dim=0))
    return torch.stack(pieces), ids, targets, lengths


def next_token_targets(tokens: Sequence[int], first: int) -> list[int]:
    """Targets for a token segment: position i predicts tokens[i+1] for i >= first."""
    out = [-100] * len(tokens)
    for i in range(first, len(tokens) - 1):
        out[i] = tokens[i + 1]
    return out


def _batches(n: int, batch_size: int, steps: int, seed: int):
    g = torch.Generator().manual_seed(seed)
    perm = torch.randperm(n, generator=g).tolist()
    pos = 0
    for _ in range(steps):
        if pos + batch_size > n:
            perm = torch.randperm(n, generator=g).tolist()
            pos = 0
        yield perm[pos:pos + batch_size] if batch_size <= n else perm
        pos += batch_size


def _lm_loss(model, embeds, ids, targets, names, adapters, per_instance: bool = True):
    route = build_route(ids, names, adapters, embeds.dtype)
    st = model.forward_all(embeds, route=route, use_cache=False)
    logits = model.logits(st.states[-1])
    loss = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=-100, reduction="sum")
    if per_instance:
        return loss / embeds.shape[0]
    return loss / (targets != -100).sum().clamp_min(1)


# -- base model ---------------------------------------------------------------

def cot_row(inst: ReasoningInstance, weight_set: str = THETA) -> list[Segment]:
    seq = inst.query + inst.chain + inst.answer
    return [Segment(seq, weight_set, next_token_targets(seq, inst.n))]


def direct_row(inst: ReasoningInstance, weight_set: str = THETA) -> list[Segment]:
    seq = inst.query + inst.answer
    return [Segment(seq, weight_set, next_token_targets(seq, inst.n))]


def pretrain(
    model: TinyLM,
    insts: Sequence[ReasoningInstance],
    cfg: TrainConfig,
    direct_fraction: float = 0.0,
) -> list[float]:
    """Full-parameter training on chain-of-thought sequences; a fraction of
    rows uses the direct ``query <ANS> answer`` format instead."""
    torch.manual_seed(cfg.seed)
    for p in model.parameters():
        p.requires_grad_(True)
    opt, sched, params = make_optimizer(list(model.parameters()), cfg)
    g = torch.Generator().manual_seed(cfg.seed + 1)
    curve = []
    for idx in _batches(len(insts), cfg.batch_size, cfg.steps, cfg.seed):
        flips = torch.rand(len(idx), generator=g).tolist()
        rows = [direct_row(insts[i]) if f < direct_fraction else cot_row(insts[i]) for i, f in zip(idx, flips)]
        emb, ids, tg, _ = assemble(model, rows, [THETA])
        loss = _lm_loss(model, emb, ids, tg, [THETA], {}, per_instance=False)
        curve.append(_step(loss, opt, sched, params, cfg, "pretrain"))
    for p in model.parameters():
        p.requires_grad_(False)
    return curve


# -- stage 1: phi -------------------------------------------------------------

def _phi_rows(insts, gold: Sequence[GoldStates], layer_l: int):
    rows = []
    for inst, g in zip(insts, gold):
        rows.append([Segment(inst.query, THETA), Segment(g.teacher_inputs(layer_l), "phi")])
    return rows


def phi_layer_loss(
    model: TinyLM,
    phi: LoraAdapter,
    insts: Sequence[ReasoningInstance],
    gold: Sequence[GoldStates],
    layer_i: int,
    layer_l: int,
    eps: float,
) -> torch.Tensor:
    """Scaled MSE at block ``layer_i`` for teacher-forced contemplation tokens."""
    names = [THETA, "phi"]
    emb, ids, _, _ = assemble(model, _phi_rows(insts, gold, layer_l), names)
    route = build_route(ids, names, {"phi": phi}, emb.dtype)
    st = model.forward_all(emb, route=route, upto=layer_i, use_cache=False)
    out = st.states[layer_i]
    per = []
    for r, (inst, g) in enumerate(zip(insts, gold)):
        pred = out[r, inst.n: inst.n + g.k]
        per.append(loss_scaled_mse(pred, g.z[:, layer_i].to(pred.dtype), eps))
    return torch.stack(per).mean()


def train_phi_layer(
    i: int,
    model: TinyLM,
    phi: LoraAdapter,
    insts: Sequence[ReasoningInstance],
    gold: Sequence[GoldStates],
    layer_l: int,
    cfg: TrainConfig,
) -> list[float]:
    """Fit block ``i`` of ``phi``; every other block of ``phi`` stays frozen."""
    keep = [j for j, g in enumerate(gold) if g.k > 0]
    insts = [insts[j] for j in keep]
    gold = [gold[j] for j in keep]
    if not insts:
        return []
    set_trainable(phi, [i])
    torch.manual_seed(cfg.seed + i)
    opt, sched, params = make_optimizer(list(phi.parameters()), cfg)
    curve = []
    for idx in _batches(len(insts), cfg.batch_size, cfg.steps, cfg.seed + 97 * i):
        loss = phi_layer_loss(model, phi, [insts[j] for j in idx], [gold[j] for j in idx], i, layer_l, cfg.eps)
        curve.append(_step(loss, opt, sched, params, cfg, f"phi layer {i}"))
    for p in phi.parameters():
        p.requires_grad_(False)
    return curve


def train_phi(model, phi, insts, gold, layer_l: int, cfg: TrainConfig) -> dict[int, list[float]]:
    curves = {}
    for i in range(1, model.cfg.num_layers + 1):
        curves[i] = train_phi_layer(i, model, phi, insts, gold, layer_l, cfg)
        log.info("phi layer %d: loss %.4f -> %.4f", i, curves[i][0] if curves[i] else float("nan"),
                 curves[i][-1] if curves[i] else float("nan"))
    return curves


# -- contemplation rollouts ---------------------------------------------------

def rollout_carries(
    model: TinyLM,
    phi: LoraAdapter,
    insts: Sequence[ReasoningInstance],
    ks: Sequence[int],
    layer_l: int,
    batch_size: int = 128,
) -> list[torch.Tensor]:
    """Autoregressive contemplation inputs for a fixed number of tokens each.

    Returns, per instance, the ``[k, d]`` inputs ``z_0, zhat_1, ..., zhat_{k-1}``
    at layer ``l``: the first is the last query token's state, every later
    one the layer-``l`` output of the previous contemplation token.
    """
    names = [THETA, "phi"]
    out: list[torch.Tensor] = []
    with torch.no_grad():
        for b in range(0, len(insts), batch_size):
            chunk = list(insts[b:b + batch_size])
            kk = list(ks[b:b + batch_size])
            emb, ids, _, lengths = assemble(model, [[Segment(i.query)] for i in chunk], names)
            st = model.forward_all(emb, upto=layer_l, use_cache=False)
            carries = [[st.states[layer_l][r, lengths[r] - 1]] for r in range(len(chunk))]
            for step in range(1, max(kk, default=0)):
                live = [r for r in range(len(chunk)) if kk[r] > step]
                rows = [[Segment(chunk[r].query), Segment(torch.stack(carries[r]), "phi")] for r in live]
                emb, ids, _, lengths = assemble(model, rows, names)
                route = build_route(ids, names, {"phi": phi}, emb.dtype)
                st = model.forward_all(emb, route=route, upto=layer_l, use_cache=False)
                for j, r in enumerate(live):
                    carries[r].append(st.states[layer_l][j, lengths[j] - 1])
            for r in range(len(chunk)):
                out.append(torch.stack(carries[r][: kk[r]]) if kk[r] else torch.zeros(0, model.cfg.hidden_dim))
    return out


def teacher_forcing_drift(
    model: TinyLM,
    phi: LoraAdapter,
    insts: Sequence[ReasoningInstance],
    gold: Sequence[GoldStates],
    layer_l: int,
) -> list[float]:
    """Per-step scaled MSE between rollout inputs and teacher-forced inputs.

    Entry ``j`` averages over instances with more than ``j`` tokens. Step 0
    is always zero since both start from the last query state.
    """
    ks = [g.k for g in gold]
    carries = rollout_carries(model, phi, insts, ks, layer_l)
    sums: list[float] = []
    counts: list[int] = []
    for c, g in zip(carries, gold):
        teacher = g.teacher_inputs(layer_l).to(c.dtype)
        for j in range(g.k):
            if j == len(sums):
                sums.append(0.0)
                counts.append(0)
            sums[j] += float(loss_scaled_mse(c[j][None], teacher[j][None]))
            counts[j] += 1
    return [s / n for s, n in zip(sums, counts)]


# -- stage 2: psi -------------------------------------------------------------

def psi_rows(insts, carries, tok_ws: str = "psi"):
    rows = []
    for inst, c in zip(insts, carries):
        rows.append([
            Segment(inst.query, THETA),
            Segment(c, "phi"),
            Segment(inst.answer, tok_ws, next_token_targets(inst.answer, 0)),
        ])
    return rows


def psi_loss(model, adapters, insts, carries) -> torch.Tensor:
    names = [THETA, "phi", "psi"]
    emb, ids, tg, _ = assemble(model, psi_rows(insts, carries), names)
    return _lm_loss(model, emb, ids, tg, names, adapters)


def train_psi(
    model: TinyLM,
    phi: LoraAdapter,
    psi: LoraAdapter,
    insts: Sequence[ReasoningInstance],
    spec: CompressionSpec,
    cfg: TrainConfig,
) -> list[float]:
    """Answer cross-entropy under ``psi`` conditioned on autoregressive
    contemplation tokens; ``phi`` blocks after layer ``l`` train jointly."""
    L = model.cfg.num_layers
    l = spec.layer
    ks = [target_length(spec.r, i.m) for i in insts]
    # phi blocks <= l are frozen, so the layer-l carries are fixed for the stage
    carries = rollout_carries(model, phi, insts, ks, l)
    set_trainable(phi, range(l + 1, L + 1))
    for p in psi.parameters():
        p.requires_grad_(True)
    torch.manual_seed(cfg.seed)
    opt, sched, params = make_optimizer(list(psi.parameters()) + list(phi.parameters()), cfg)
    adapters = {"phi": phi, "psi": psi}
    curve = []
    for idx in _batches(len(insts), cfg.batch_size, cfg.steps, cfg.seed):
        loss = psi_loss(model, adapters, [insts[j] for j in idx], [carries[j] for j in idx])
        curve.append(_step(loss, opt, sched, params, cfg, "psi"))
    for p in list(psi.parameters()) + list(phi.parameters()):
        p.requires_grad_(False)
    return curve


# -- END probe ----------------------------------------------------------------

class EndClassifier(nn.Module):
    """Linear probe on final-layer contemplation states: P(stop here)."""

    def __init__(self, dim: int, threshold: float = 0.5):
        super().__init__()
        self.linear = nn.Linear(dim, 1)
        nn.init.zeros_(self.linear.weight)
        nn.init.zeros_(self.linear.bias)
        self.threshold = threshold

    def forward(self, states: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logit(states))

    def logit(self, states: torch.Tensor) -> torch.Tensor:
        return self.linear(states).squeeze(-1)

    def should_stop(self, state: torch.Tensor) -> bool:
        # compare in logit space so thresholds 0 and 1 mean always/never
        t = self.threshold
        cut = -math.inf if t <= 0 else math.inf if t >= 1 else math.log(t / (1 - t))
        with torch.no_grad():
            return bool(self.logit(state.to(self.linear.weight.dtype)) >= cut)


def end_training_data(
    model: TinyLM,
    adapters: Mapping[str, LoraAdapter],
    insts: Sequence[ReasoningInstance],
    spec: CompressionSpec,
    batch_size: int = 128,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Final-layer states at checkpoints j = 0..k of fixed-length rollouts.

    Checkpoint 0 is the last query token (the END probe runs before any
    contemplation token too); label 1 marks j = k and 0 every earlier j.
    """
    phi = adapters["phi"]
    ks = [target_length(spec.r, i.m) for i in insts]
    carries = rollout_carries(model, phi, insts, ks, spec.layer, batch_size)
    names = [THETA, "phi"]
    feats, labels = [], []
    with torch.no_grad():
        for b in range(0, len(insts), batch_size):
            rows = [[Segment(i.query), Segment(c, "phi")] for i, c in zip(insts[b:b + batch_size], carries[b:b + batch_size])]
            emb, ids, _, _ = assemble(model, rows, names)
            route = build_route(ids, names, {"phi": phi}, emb.dtype)
            st = model.forward_all(emb, route=route, use_cache=False)
            for r, inst in enumerate(insts[b:b + batch_size]):
                k = ks[b + r]
                final = st.states[-1][r, inst.n - 1: inst.n + k]
                feats.append(final)
                labels.append(torch.tensor([0.0] * k + [1.0]))
    return torch.cat(feats), torch.cat(labels)


def train_end(feats: torch.Tensor, labels: torch.Tensor, steps: int = 500, lr: float = 0.05, seed: int = 0,
              threshold: float = 0.5) -> EndClassifier | None:
    """Logistic regression on standardized features, folded back into a
    probe over raw states. Returns ``None`` for a single-class batch."""
    if labels.numel() == 0 or labels.min() == labels.max():
        log.warning("END training batch has a single class; skipped")
        return None
    torch.manual_seed(seed)
    x = feats.double()
    mu = x.mean(0)
    sd = x.std(0, unbiased=False).clamp_min(1e-6)
    xs = (x - mu) / sd
    w = torch.zeros(x.shape[1], dtype=torch.float64, requires_grad=True)
    b = torch.zeros(1, dtype=torch.float64, requires_grad=True)
    y = labels.double()
    # positives are rare (one per rollout); balance the two classes
    pos_weight = ((y == 0).sum() / (y == 1).sum()).clamp_min(1.0)
    opt = torch.optim.Adam([w, b], lr=lr)
    for _ in range(steps):
        loss = F.binary_cross_entropy_with_logits(xs @ w + b, y, pos_weight=pos_weight) + 1e-4 * w.pow(2).sum()
        opt.zero_grad()
        loss.backward()
        opt.step()
    end = EndClassifier(x.shape[1], threshold)
    with torch.no_grad():
        end.linear.weight.copy_((w / sd)[None].float())
        end.linear.bias.copy_((b - (w * mu / sd).sum()).float())
    return end


# -- baselines ----------------------------------------------------------------

def baseline_rows(kind: str, inst: ReasoningInstance, k: int, tok: Tokenizer) -> list[Segment]:
    if kind == "r0":
        seq = inst.query + inst.answer
    elif kind == "r1":
        seq = inst.query + inst.chain + inst.answer
    elif kind == "pause":
        seq = inst.query + [tok.pause_id] * k + inst.answer
    else:
        raise ValueError(f"unknown baseline {kind!r}")
    first = inst.n if kind != "pause" else inst.n + k
    return [Segment(seq, kind, next_token_targets(seq, first))]


def train_baseline(
    kind: str,
    model: TinyLM,
    insts: Sequence[ReasoningInstance],
    tok: Tokenizer,
    cfg: TrainConfig,
    rank: int = 8,
    r: float = 0.0,
) -> tuple[LoraAdapter, torch.Tensor | None, list[float]]:
    """Adapter trained with plain cross-entropy on one sequence format.

    ``r0``: query then answer; ``r1``: query, full chain, answer; ``pause``:
    ``ceil(r m)`` pause tokens between query and answer, with a learned input
    embedding for the pause token.
    """
    L = model.cfg.num_layers
    adapter = LoraAdapter(model.cfg.hidden_dim, L, rank, seed=cfg.seed + 11).to(model.tok_embed.weight.dtype)
    params = list(adapter.parameters())
    pause_embed = None
    if kind == "pause":
        pause_embed = nn.Parameter(model.tok_embed.weight[tok.pause_id].detach().clone())
        params.append(pause_embed)
    for p in params:
        p.requires_grad_(True)
    torch.manual_seed(cfg.seed)
    opt, sched, params = make_optimizer(params, cfg)
    names = [THETA, kind]
    curve = []
    for idx in _batches(len(insts), cfg.batch_size, cfg.steps, cfg.seed):
        rows = [baseline_rows(kind, insts[j], target_length(r, insts[j].m) if kind == "pause" else 0, tok) for j in idx]
        emb, ids, tg, _ = assemble(model, rows, names, pause_embed, tok.pause_id)
        loss = _lm_loss(model, emb, ids, tg, names, {kind: adapter})
        curve.append(_step(loss, opt, sched, params, cfg, f"baseline {kind}"))
    for p in params:
        p.requires_grad_(False)
    return adapter, (pause_embed.detach().clone() if pause_embed is not None else None), curve
