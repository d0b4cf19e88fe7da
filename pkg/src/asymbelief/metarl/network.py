"""Causal transformer producing a two-way policy and a value estimate."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import torch
from torch import nn

INPUT_SIZES = {1: 8, 2: 9, 3: 8}
POSITIONAL = ("sinusoidal", "none")


@dataclass(frozen=True)
class AgentConfig:
    task_id: int = 1
    input_size: int = 8
    n_heads: int = 8
    ff_dim: int = 128
    gamma: float = 0.8
    critic_weight: float = 0.5
    entropy_start: float = 1.0
    episodes_total: int = 5000
    batch_size: int = 64
    learning_rate: float = 3e-4
    model_dim_factor: int = 8
    n_layers: int = 2
    positional: str = "sinusoidal"
    token_shift: bool = True

    def __post_init__(self):
        if self.model_dim % self.n_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by {self.n_heads} heads")
        if self.positional not in POSITIONAL:
            raise ValueError(f"positional must be one of {POSITIONAL}, got {self.positional!r}")
        if self.n_layers < 1:
            raise ValueError("n_layers must be positive")

    @property
    def model_dim(self) -> int:
        return self.model_dim_factor * self.input_size

    @classmethod
    def for_task(cls, task_id: int, **overrides) -> "AgentConfig":
        if task_id not in INPUT_SIZES:
            raise ValueError(f"unknown task_id {task_id!r}")
        return cls(task_id=task_id, input_size=INPUT_SIZES[task_id], **overrides)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AgentConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class CausalSelfAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, T, D = x.shape
        h = self.n_heads
        q, k, v = self.qkv(x).view(B, T, 3, h, D // h).permute(2, 0, 3, 1, 4)
        att = q @ k.transpose(-2, -1) / math.sqrt(D // h)
        future = torch.ones(T, T, dtype=torch.bool, device=x.device).triu(1)
        att = att.masked_fill(future, float("-inf")).softmax(dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, T, D)
        return self.proj(y)

    def step(self, x: torch.Tensor, cache: dict) -> torch.Tensor:
        """Attend from one new position ``(B, D)`` over cached keys/values."""
        B, D = x.shape
        h = self.n_heads
        q, k, v = self.qkv(x).view(B, 3, h, 1, D // h).unbind(1)
        if "k" in cache:
            k = torch.cat([cache["k"], k], dim=2)
            v = torch.cat([cache["v"], v], dim=2)
        cache["k"], cache["v"] = k, v
        att = (q @ k.transpose(-2, -1) / math.sqrt(D // h)).softmax(dim=-1)
        return self.proj((att @ v).reshape(B, D))


def sinusoidal_encoding(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Fixed sine/cosine position codes ``(len(positions), dim)``."""
    freqs = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    angles = positions.to(torch.float64)[:, None] * freqs
    enc = torch.zeros(len(positions), dim, dtype=torch.float64)
    enc[:, 0::2] = torch.sin(angles)
    enc[:, 1::2] = torch.cos(angles[:, : dim // 2])
    return enc


class Block(nn.Module):
    """Pre-norm residual block: causal self-attention then a two-layer feedforward map."""

    def __init__(self, dim: int, n_heads: int, ff_dim: int):
        super().__init__()
        self.ln_attn = nn.LayerNorm(dim)
        self.attn = CausalSelfAttention(dim, n_heads)
        self.ln_ff = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ff_dim), nn.GELU(), nn.Linear(ff_dim, dim))

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        h = h + self.attn(self.ln_attn(h))
        return h + self.ff(self.ln_ff(h))

    def step(self, h: torch.Tensor, cache: dict) -> torch.Tensor:
        h = h + self.attn.step(self.ln_attn(h), cache)
        return h + self.ff(self.ln_ff(h))


class TransformerAgent(nn.Module):
    """A stack of pre-norm causal transformer blocks over the step inputs.

    Position enters through the normalized time index in the input and,
    unless ``config.positional == "none"``, additive sinusoidal codes. With
    ``config.token_shift`` each position also receives a learned projection
    of the previous position's input embedding, so an outcome token carries
    the context in which that outcome was earned.
    """

    def __init__(self, config: AgentConfig):
        super().__init__()
        d = config.model_dim
        self.config = config
        self.embed = nn.Linear(config.input_size, d)
        self.shift = nn.Linear(d, d, bias=False) if config.token_shift else None
        self.blocks = nn.ModuleList(Block(d, config.n_heads, config.ff_dim) for _ in range(config.n_layers))
        self.ln_out = nn.LayerNorm(d)
        self.policy_head = nn.Linear(d, 2)
        self.value_head = nn.Linear(d, 1)

    def _embed(self, x: torch.Tensor, positions: torch.Tensor, previous=None) -> torch.Tensor:
        """Embed inputs; ``previous`` is the embedding one step back (step path only)."""
        e = self.embed(x)
        h = e
        if self.shift is not None:
            if previous is None:
                previous = nn.functional.pad(e, (0, 0, 1, 0))[:, :-1]
            h = h + self.shift(previous)
        if self.config.positional == "sinusoidal":
            h = h + sinusoidal_encoding(positions, self.config.model_dim).to(h.dtype)
        return h, e

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Map inputs ``(B, T, input_size)`` to logits ``(B, T, 2)`` and values ``(B, T)``."""
        if x.shape[-1] != self.config.input_size:
            raise ValueError(f"expected input size {self.config.input_size}, got {x.shape[-1]}")
        h, _ = self._embed(x, torch.arange(x.shape[1]))
        for block in self.blocks:
            h = block(h)
        h = self.ln_out(h)
        return self.policy_head(h), self.value_head(h).squeeze(-1)

    def step(self, x: torch.Tensor, cache: dict) -> tuple[torch.Tensor, torch.Tensor]:
        """Incremental forward for the next position ``(B, input_size)``.

        Equivalent to the last position of :meth:`forward` over the full
        history whose earlier positions were fed through the same ``cache``.
        """
        t = cache.get("t", 0)
        layers = cache.setdefault("layers", [{} for _ in self.blocks])
        previous = cache.get("prev")
        if previous is None:
            previous = torch.zeros(x.shape[0], self.config.model_dim, dtype=self.embed.weight.dtype)
        h, cache["prev"] = self._embed(x, torch.tensor([t]), previous)
        for block, layer_cache in zip(self.blocks, layers):
            h = block.step(h, layer_cache)
        cache["t"] = t + 1
        h = self.ln_out(h)
        return self.policy_head(h), self.value_head(h).squeeze(-1)
