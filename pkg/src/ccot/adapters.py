"""Low-rank adapters and segment routing over the block stack.

A routed forward lets different spans of one sequence run under different
weight sets (the frozen base ``theta`` or an adapter such as ``phi`` or
``psi``) while attention stays causal over the whole span: a position's keys
and values are produced by its own weight set and every later position reads
them unchanged.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import torch
from torch import nn

from .model import LayeredStates, TinyLM, load_tensors, save_tensors

log = logging.getLogger(__name__)

THETA = "theta"
ADAPTED = ("q", "k", "v", "o")
LORA_SCALE = 2.0


class LoraAdapter(nn.Module):
    """Rank-``rank`` update ``x @ A @ B * scale`` on the attention projections
    of blocks ``1..num_layers``. ``B`` starts at zero so a fresh adapter is an
    exact no-op."""

    def __init__(self, hidden_dim: int, num_layers: int, rank: int, seed: int = 0, scale: float = LORA_SCALE):
        super().__init__()
        self.rank = rank
        self.num_layers = num_layers
        self.scale = scale
        g = torch.Generator().manual_seed(seed)
        bound = 1.0 / math.sqrt(hidden_dim)
        self.A = nn.ParameterDict()
        self.B = nn.ParameterDict()
        for layer in range(1, num_layers + 1):
            for name in ADAPTED:
                key = f"{layer}_{name}"
                self.A[key] = nn.Parameter((torch.rand(hidden_dim, rank, generator=g) * 2 - 1) * bound)
                self.B[key] = nn.Parameter(torch.zeros(rank, hidden_dim))

    def delta(self, x: torch.Tensor, layer: int, name: str) -> torch.Tensor:
        key = f"{layer}_{name}"
        return (x @ self.A[key]) @ self.B[key] * self.scale

    def layer_parameters(self, layer: int) -> list[nn.Parameter]:
        return [d[f"{layer}_{name}"] for name in ADAPTED for d in (self.A, self.B)]

    def layers_checksum_tensors(self, layers: Iterable[int]) -> list[torch.Tensor]:
        out = []
        for layer in layers:
            out += self.layer_parameters(layer)
        return out

    def trainable_layers(self) -> list[int]:
        return [l for l in range(1, self.num_layers + 1) if all(p.requires_grad for p in self.layer_parameters(l))]


def set_trainable(adapter: LoraAdapter, layer_range: Iterable[int]) -> None:
    """Only adapter matrices of blocks in ``layer_range`` receive gradients.

    Layer 0 is the embedding and carries no adapter weights. An empty range
    leaves the current mask untouched.
    """
    layers = set(layer_range)
    if not layers:
        log.warning("set_trainable called with an empty layer range; nothing changed")
        return
    if min(layers) < 0 or max(layers) > adapter.num_layers:
        raise ValueError(f"layer range {sorted(layers)} outside 0..{adapter.num_layers}")
    for layer in range(1, adapter.num_layers + 1):
        for p in adapter.layer_parameters(layer):
            p.requires_grad_(layer in layers)


@dataclass(frozen=True)
class Segment:
    start: int
    end: int  # exclusive
    weight_set: str


@dataclass(frozen=True)
class SegmentRouting:
    segments: tuple[Segment, ...]

    @classmethod
    def of(cls, *spans: tuple[int, str]) -> "SegmentRouting":
        """Build from consecutive ``(length, weight_set)`` pairs."""
        segs = []
        pos = 0
        for length, ws in spans:
            if length > 0:
                segs.append(Segment(pos, pos + length, ws))
                pos += length
        return cls(tuple(segs))

    @property
    def length(self) -> int:
        return self.segments[-1].end if self.segments else 0

    def validate(self, span: int) -> None:
        pos = 0
        for s in self.segments:
            if s.start != pos or s.end <= s.start:
                raise ValueError(f"routing segments not contiguous at position {pos}")
            pos = s.end
        if pos != span:
            raise ValueError(f"routing covers {pos} positions but the input has {span}")

    def weight_sets(self) -> list[str]:
        return sorted({s.weight_set for s in self.segments} - {THETA})


def build_route(
    ids: torch.Tensor, names: Sequence[str], adapters: Mapping[str, LoraAdapter], dtype=torch.float32
) -> list[tuple[LoraAdapter, torch.Tensor]]:
    """Route for a batch from integer ids ``[B, T]`` indexing into ``names``."""
    route = []
    for idx, name in enumerate(names):
        if name == THETA:
            continue
        mask = (ids == idx)
        if not bool(mask.any()):
            continue
        if name not in adapters:
            raise KeyError(f"no adapter registered for weight set {name!r}")
        route.append((adapters[name], mask.unsqueeze(-1).to(dtype)))
    return route


def routed_forward(
    model: TinyLM,
    inputs: torch.Tensor,
    routing: SegmentRouting,
    adapters: Mapping[str, LoraAdapter],
    cache: LayeredStates | None = None,
    upto: int | None = None,
) -> LayeredStates:
    """Forward ``inputs`` ([T, d]) with each position under its segment's weight set."""
    T = inputs.shape[0]
    routing.validate(T)
    names = [THETA] + routing.weight_sets()
    ids = torch.empty(T, dtype=torch.long)
    for s in routing.segments:
        ids[s.start:s.end] = names.index(s.weight_set)
    route = build_route(ids[None], names, adapters, inputs.dtype)
    return model.forward_all(inputs, cache=cache, route=route, upto=upto)


def save_adapters(path: str | Path, adapters: Mapping[str, LoraAdapter], meta: dict | None = None) -> None:
    tensors = {}
    info = {}
    for name, ad in adapters.items():
        info[name] = {"rank": ad.rank, "num_layers": ad.num_layers, "scale": ad.scale}
        for k, v in ad.state_dict().items():
            tensors[f"{name}.{k}"] = v
    save_tensors(path, tensors, {"adapters": info, **(meta or {})})


def load_adapters(path: str | Path) -> tuple[dict[str, LoraAdapter], dict]:
    tensors, meta = load_tensors(path)
    out = {}
    for name, info in meta["adapters"].items():
        sd = {k[len(name) + 1:]: v for k, v in tensors.items() if k.startswith(name + ".")}
        hidden = sd[f"A.1_q"].shape[0]
        ad = LoraAdapter(hidden, info["num_layers"], info["rank"], scale=info["scale"])
        ad.load_state_dict(sd)
        out[name] = ad
    return out, meta
