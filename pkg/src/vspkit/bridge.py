"""Visual-to-text bridge: a learned affine map into the LM embedding space."""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn


class Projection(nn.Module):
    """``y = x W^T + b`` from encoder space (d_vis) to LM space (d_llm).

    The bias starts at zero so the bias-free map is the starting point.
    """

    def __init__(self, d_vis: int, d_llm: int, seed: int = 0):
        super().__init__()
        self.d_vis, self.d_llm = d_vis, d_llm
        gen = torch.Generator().manual_seed(seed)
        bound = 1.0 / math.sqrt(d_vis)
        self.weight = nn.Parameter(torch.empty(d_llm, d_vis).uniform_(-bound, bound, generator=gen))
        self.bias = nn.Parameter(torch.zeros(d_llm))

    def forward(self, reduced: torch.Tensor) -> torch.Tensor:
        if reduced.shape[-1] != self.d_vis:
            raise ValueError(f"expected feature dim {self.d_vis}, got {reduced.shape[-1]}")
        return reduced @ self.weight.T + self.bias


def project(p: Projection, reduced) -> torch.Tensor:
    if not torch.is_tensor(reduced):
        reduced = torch.as_tensor(np.asarray(reduced), dtype=p.weight.dtype)
    return p(reduced)


def textualize(embeddings, token_table) -> list[int]:
    """Most cosine-similar token per embedding row.

    Zero-norm rows (on either side) have similarity 0; ties go to the lowest id.
    """
    emb = torch.as_tensor(embeddings).detach().double()
    table = torch.as_tensor(token_table).detach().double()
    if table.ndim != 2 or table.shape[0] == 0:
        raise ValueError("textualize needs a nonempty token table")
    if emb.shape[-1] != table.shape[1]:
        raise ValueError(f"embedding dim {emb.shape[-1]} does not match token table dim {table.shape[1]}")
    en = emb.norm(dim=-1, keepdim=True)
    tn = table.norm(dim=-1, keepdim=True)
    emb_u = torch.where(en > 0, emb / en.clamp_min(1e-300), torch.zeros_like(emb))
    tab_u = torch.where(tn > 0, table / tn.clamp_min(1e-300), torch.zeros_like(table))
    sims = (emb_u @ tab_u.T).numpy()
    return [int(i) for i in np.argmax(sims, axis=1)]
