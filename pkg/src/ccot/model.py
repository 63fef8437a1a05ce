"""Causal decoder-only language model with per-layer hidden-state access."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .numerics import softmax_rows

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    vocab_size: int = 64
    hidden_dim: int = 128
    num_layers: int = 8
    num_heads: int = 4
    head_dim: int = 32
    max_seq_len: int = 128
    pos_encoding: str = "rope"
    tie_embeddings: bool = False
    ffn_mult: int = 4
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.hidden_dim != self.num_heads * self.head_dim:
            raise ValueError("hidden_dim must equal num_heads * head_dim")
        if self.num_layers < 2:
            raise ValueError("num_layers must be >= 2")
        if self.vocab_size < 4:
            raise ValueError("vocab_size must be >= 4")
        if self.pos_encoding != "rope":
            raise ValueError(f"unsupported positional encoding {self.pos_encoding!r}")


@dataclass
class LayeredStates:
    """Hidden states at every layer for a span of positions.

    ``states[0]`` is the embedding input and ``states[l]`` the output of block
    ``l``; each has shape ``[B, T, d]`` (or ``[T, d]`` for unbatched calls).
    ``kv`` holds the per-layer key/value cache covering all positions seen so
    far (``length`` of them), or ``None`` when caching was disabled.
    """

    states: list[torch.Tensor]
    kv: list[tuple[torch.Tensor, torch.Tensor]] | None
    length: int

    @property
    def num_layers(self) -> int:
        return len(self.states) - 1

    def last(self, layer: int) -> torch.Tensor:
        return self.states[layer][..., -1, :]


def rotary_tables(positions: torch.Tensor, head_dim: int, base: float, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    inv = 1.0 / (base ** (torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim))
    ang = positions.to(torch.float64)[:, None] * inv[None, :]
    return ang.cos().to(dtype), ang.sin().to(dtype)


def apply_rotary(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    # x: [B, H, T, hd]; rotate interleaved pairs
    x1, x2 = x[..., 0::2], x[..., 1::2]
    r1 = x1 * cos - x2 * sin
    r2 = x1 * sin + x2 * cos
    return torch.stack((r1, r2), dim=-1).flatten(-2)


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


# A route is a list of (adapter, mask) pairs; mask is [B, T, 1] with 1.0 where
# the adapter's weight set owns the position. An empty route means plain theta.
Route = Sequence[tuple["object", torch.Tensor]]


def _project(x: torch.Tensor, weight: torch.Tensor, route: Route | None, layer: int, name: str) -> torch.Tensor:
    out = F.linear(x, weight)
    if route:
        for adapter, mask in route:
            out = out + mask * adapter.delta(x, layer, name)
    return out


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig, index: int):
        super().__init__()
        d = cfg.hidden_dim
        self.index = index
        self.heads = cfg.num_heads
        self.head_dim = cfg.head_dim
        self.norm1 = RMSNorm(d)
        self.norm2 = RMSNorm(d)
        self.wq = nn.Parameter(torch.empty(d, d))
        self.wk = nn.Parameter(torch.empty(d, d))
        self.wv = nn.Parameter(torch.empty(d, d))
        self.wo = nn.Parameter(torch.empty(d, d))
        self.up = nn.Linear(d, cfg.ffn_mult * d, bias=False)
        self.down = nn.Linear(cfg.ffn_mult * d, d, bias=False)

    def forward(self, x, cos, sin, past, route, q_pos, k_pos):
        B, T, d = x.shape
        H, hd = self.heads, self.head_dim
        h = self.norm1(x)
        q = _project(h, self.wq, route, self.index, "q").view(B, T, H, hd).transpose(1, 2)
        k = _project(h, self.wk, route, self.index, "k").view(B, T, H, hd).transpose(1, 2)
        v = _project(h, self.wv, route, self.index, "v").view(B, T, H, hd).transpose(1, 2)
        q = apply_rotary(q, cos, sin)
        k = apply_rotary(k, cos, sin)
        if past is not None:
            k = torch.cat((past[0], k), dim=2)
            v = torch.cat((past[1], v), dim=2)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
        allowed = k_pos[None, :] <= q_pos[:, None]
        scores = scores.masked_fill(~allowed, float("-inf"))
        att = softmax_rows(scores) @ v
        att = att.transpose(1, 2).reshape(B, T, d)
        x = x + _project(att, self.wo, route, self.index, "o")
        x = x + self.down(F.gelu(self.up(self.norm2(x))))
        return x, (k, v)


class TinyLM(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_embed = nn.Embedding(cfg.vocab_size, cfg.hidden_dim)
        self.blocks = nn.ModuleList(Block(cfg, i + 1) for i in range(cfg.num_layers))
        self.norm_f = RMSNorm(cfg.hidden_dim)
        self.lm_head = None if cfg.tie_embeddings else nn.Linear(cfg.hidden_dim, cfg.vocab_size, bias=False)

    def init_weights(self, seed: int) -> "TinyLM":
        g = torch.Generator().manual_seed(seed)
        std = 0.02
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("norm1.weight") or name.endswith("norm2.weight") or name == "norm_f.weight":
                    p.fill_(1.0)
                elif name.endswith("wo") or name.endswith("down.weight"):
                    p.normal_(0.0, std / math.sqrt(2 * self.cfg.num_layers), generator=g)
                else:
                    p.normal_(0.0, std, generator=g)
        return self

    @property
    def head_weight(self) -> torch.Tensor:
        return self.tok_embed.weight if self.lm_head is None else self.lm_head.weight

    def embed(self, tokens) -> torch.Tensor:
        ids = torch.as_tensor(tokens, dtype=torch.long)
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise ValueError("token id outside the vocabulary")
        return self.tok_embed(ids)

    def forward_all(
        self,
        embeds: torch.Tensor,
        cache: LayeredStates | None = None,
        route: Route | None = None,
        upto: int | None = None,
        use_cache: bool = True,
    ) -> LayeredStates:
        """Run the block stack over ``embeds`` ([T, d] or [B, T, d]).

        With ``cache`` the new positions attend to every cached position, and
        the result holds states for the new positions only. ``upto`` stops
        after that many blocks.
        """
        squeeze = embeds.dim() == 2
        x = embeds[None] if squeeze else embeds
        B, T, _ = x.shape
        past = cache.length if cache is not None else 0
        if past + T > self.cfg.max_seq_len:
            raise ValueError(f"sequence length {past + T} exceeds max_seq_len {self.cfg.max_seq_len}")
        if cache is not None and cache.kv is None:
            raise ValueError("cache carries no key/value tensors")
        n_blocks = self.cfg.num_layers if upto is None else upto
        if cache is not None and len(cache.kv) < n_blocks:
            raise ValueError("cache does not cover the requested depth")
        q_pos = torch.arange(past, past + T)
        k_pos = torch.arange(0, past + T)
        cos, sin = rotary_tables(q_pos, self.cfg.head_dim, self.cfg.rope_base, x.dtype)
        states = [x]
        kv = []
        for i in range(n_blocks):
            prev = cache.kv[i] if cache is not None else None
            x, layer_kv = self.blocks[i](x, cos, sin, prev, route, q_pos, k_pos)
            states.append(x)
            kv.append(layer_kv)
        if squeeze:
            states = [s[0] for s in states]
        return LayeredStates(states, kv if use_cache else None, past + T)

    def logits(self, final_state: torch.Tensor) -> torch.Tensor:
        return F.linear(self.norm_f(final_state), self.head_weight)

    def head_dist(self, final_state: torch.Tensor) -> torch.Tensor:
        return head_distribution(final_state, self.head_weight, self.norm_f)


def head_distribution(final_state: torch.Tensor, head_weight: torch.Tensor, norm: nn.Module | None = None) -> torch.Tensor:
    h = final_state if norm is None else norm(final_state)
    return softmax_rows(F.linear(h, head_weight))


def sample_next(dist: torch.Tensor, mode: str = "greedy", generator: torch.Generator | None = None) -> int:
    if mode == "greedy":
        # torch.argmax returns the first maximal index
        return int(torch.argmax(dist))
    if mode == "categorical":
        return int(torch.multinomial(dist, 1, generator=generator))
    raise ValueError(f"unknown sampling mode {mode!r}")


# -- checkpoints: JSON manifest + raw little-endian blob ---------------------

def save_tensors(path: str | Path, tensors: dict[str, torch.Tensor], meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    blob = bytearray()
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().contiguous().numpy()
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        blob += data
        offset += len(data)
    manifest = {"version": CHECKPOINT_VERSION, "meta": meta or {}, "tensors": entries}
    with_ext(path, ".bin").write_bytes(bytes(blob))
    with_ext(path, ".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def with_ext(path: Path, ext: str) -> Path:
    """Append ``ext`` to the full file name; ``with_suffix`` would eat dotted stems like ``r0.1``."""
    path = Path(path)
    return path.with_name(path.name + ext)


def load_tensors(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    manifest = json.loads(with_ext(path, ".json").read_text())
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
    blob = with_ext(path, ".bin").read_bytes()
    out = {}
    for e in manifest["tensors"]:
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        arr = np.frombuffer(blob, dtype=dt, count=int(np.prod(e["shape"], dtype=np.int64)), offset=e["offset"])
        out[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).astype(arr.dtype.newbyteorder("="), copy=True))
    return out, manifest["meta"]


def save_model(model: TinyLM, path: str | Path, extra_meta: dict | None = None) -> None:
    meta = {"config": asdict(model.cfg), **(extra_meta or {})}
    save_tensors(path, dict(model.state_dict()), meta)


def load_model(path: str | Path) -> tuple[TinyLM, dict]:
    tensors, meta = load_tensors(path)
    model = TinyLM(ModelConfig(**meta["config"]))
    model.load_state_dict(tensors)
    return model, meta
