"""Toy decoder-only transformer with low-rank adapters on frozen weights."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

LORA_TARGETS = ("attn_q", "attn_k", "attn_v", "attn_o", "ff_in", "ff_out")


class SequenceTooLongError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    max_len: int = 256
    dropout: float = 0.0

    def __post_init__(self):
        for name in ("vocab_size", "n_layers", "n_heads", "d_model", "d_ff", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 16
    alpha: float = 32.0
    dropout: float = 0.05
    target_matrices: tuple[str, ...] = field(default=("attn_q", "attn_v"))

    def __post_init__(self):
        object.__setattr__(self, "target_matrices", tuple(self.target_matrices))
        if self.rank < 1 or self.alpha <= 0:
            raise ValueError("rank and alpha must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        unknown = set(self.target_matrices) - set(LORA_TARGETS)
        if unknown:
            raise ValueError(f"unknown LoRA targets {sorted(unknown)}")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


class LoRALinear(nn.Module):
    """``base(x) + (alpha/rank) * B A dropout(x)`` with ``B`` starting at zero."""

    def __init__(self, base: nn.Linear, config: LoraConfig):
        super().__init__()
        if config.rank > min(base.in_features, base.out_features):
            raise ValueError(f"rank {config.rank} exceeds the adapted matrix size")
        self.base = base
        self.scaling = config.scaling
        self.lora_A = nn.Parameter(torch.empty(config.rank, base.in_features, dtype=base.weight.dtype))
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, config.rank, dtype=base.weight.dtype))
        nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))
        self.dropout = nn.Dropout(config.dropout)

    @property
    def weight(self) -> torch.Tensor:
        return self.base.weight

    def forward(self, x):
        return self.base(x) + self.scaling * F.linear(F.linear(self.dropout(x), self.lora_A), self.lora_B)

    def merged(self) -> nn.Linear:
        out = copy.deepcopy(self.base)
        with torch.no_grad():
            out.weight.add_(self.scaling * self.lora_B @ self.lora_A)
        return out


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.ln1 = nn.LayerNorm(d)
        self.attn_q = nn.Linear(d, d, bias=False)
        self.attn_k = nn.Linear(d, d, bias=False)
        self.attn_v = nn.Linear(d, d, bias=False)
        self.attn_o = nn.Linear(d, d, bias=False)
        self.ln2 = nn.LayerNorm(d)
        self.ff_in = nn.Linear(d, cfg.d_ff)
        self.ff_out = nn.Linear(cfg.d_ff, d)
        self.drop = nn.Dropout(cfg.dropout)

    def attention(self, x, causal):
        b, s, d = x.shape
        h = self.n_heads

        def heads(t):
            return t.view(b, s, h, d // h).transpose(1, 2)

        q, k, v = heads(self.attn_q(x)), heads(self.attn_k(x)), heads(self.attn_v(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        if causal:
            mask = torch.ones(s, s, dtype=torch.bool, device=x.device).triu(1)
            scores = scores.masked_fill(mask, float("-inf"))
        att = self.drop(scores.softmax(dim=-1))
        return self.attn_o((att @ v).transpose(1, 2).reshape(b, s, d))

    def forward(self, x, causal=True):
        x = x + self.drop(self.attention(self.ln1(x), causal))
        return x + self.drop(self.ff_out(F.gelu(self.ff_in(self.ln2(x)))))


class DecoderLM(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.lora_config: LoraConfig | None = None
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.max_len, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)
        self.drop = nn.Dropout(cfg.dropout)
        self.apply(self._init)

    @staticmethod
    def _init(m):
        if isinstance(m, (nn.Linear, nn.Embedding)):
            nn.init.normal_(m.weight, std=0.02)
            if getattr(m, "bias", None) is not None:
                nn.init.zeros_(m.bias)

    def embed(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.tok_emb(tokens)

    def forward(self, x: torch.Tensor, causal: bool = True) -> torch.Tensor:
        """``x`` holds input embeddings (B x S x d or S x d); positions are added to every slot."""
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        s = x.shape[1]
        if s > self.config.max_len:
            raise SequenceTooLongError(f"sequence length {s} exceeds max_len {self.config.max_len}")
        x = self.drop(x + self.pos_emb(torch.arange(s, device=x.device)))
        for block in self.blocks:
            x = block(x, causal)
        logits = self.head(self.ln_f(x))
        return logits[0] if squeeze else logits

    # ------------------------------------------------------------ adapters

    def attach_lora(self, config: LoraConfig, seed: int = 0) -> None:
        if self.lora_config is not None:
            raise RuntimeError("adapters already attached")
        if config.rank > self.config.d_model:
            raise ValueError(f"rank {config.rank} exceeds d_model {self.config.d_model}")
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        try:
            for block in self.blocks:
                for name in config.target_matrices:
                    setattr(block, name, LoRALinear(getattr(block, name), config))
        finally:
            torch.random.set_rng_state(gen_state)
        self.lora_config = config

    def adapter_parameters(self) -> list[nn.Parameter]:
        return [p for n, p in self.named_parameters() if ".lora_" in n]

    def base_parameters(self) -> list[nn.Parameter]:
        return [p for n, p in self.named_parameters() if ".lora_" not in n]

    def freeze_base(self) -> None:
        for p in self.base_parameters():
            p.requires_grad_(False)

    def merged(self) -> "DecoderLM":
        """Adapter-free copy with ``W + (alpha/rank) B A`` folded into each adapted matrix."""
        out = copy.deepcopy(self)
        for block in out.blocks:
            for name in LORA_TARGETS:
                mod = getattr(block, name)
                if isinstance(mod, LoRALinear):
                    setattr(block, name, mod.merged())
        out.lora_config = None
        return out


def forward(model: DecoderLM, prefix_embeddings: torch.Tensor, causal: bool = True) -> torch.Tensor:
    return model(prefix_embeddings, causal=causal)


def loss(logits: torch.Tensor, targets: torch.Tensor, loss_mask: torch.Tensor, normalize: bool = False) -> torch.Tensor:
    """Summed negative log-likelihood of ``targets`` over masked positions.

    ``normalize`` divides by the number of masked positions instead.
    """
    if logits.shape[:-1] != targets.shape or targets.shape != loss_mask.shape:
        raise ValueError(f"misaligned shapes {tuple(logits.shape)}, {tuple(targets.shape)}, {tuple(loss_mask.shape)}")
    count = int(loss_mask.sum())
    if count == 0:
        raise ValueError("loss mask selects no positions")
    logp = logits.log_softmax(dim=-1)
    nll = -logp.gather(-1, targets.clamp_min(0).unsqueeze(-1)).squeeze(-1)
    total = torch.where(loss_mask, nll, torch.zeros_like(nll)).sum()
    return total / count if normalize else total


def count_parameters(params) -> int:
    return sum(p.numel() for p in params)
