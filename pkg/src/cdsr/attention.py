"""Feedback/domain masks and the cross-transition multi-head self-attention block."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

MASK_MODES = ("additive", "hadamard")
CROSS_SCHEDULES = ("full", "only1", "only2", "only3", "only4", "none")
SINGLE_SCHEDULES = ("full", "only_f", "only_not_f", "none")


def _as_code_tensor(values) -> torch.Tensor:
    if isinstance(values, torch.Tensor):
        return values
    if isinstance(values, str):
        values = list(values)
    values = list(values)
    if values and isinstance(values[0], str):
        values = [{"A": 0, "B": 1, "+": 1, "-": -1}[v.upper()] for v in values]
    return torch.as_tensor(values, dtype=torch.long)


def feedback_mask(feedbacks) -> torch.Tensor:
    """``[i, j]`` is True where the two positions carry different feedback."""
    f = _as_code_tensor(feedbacks)
    return f.unsqueeze(-1) != f.unsqueeze(-2)


def domain_mask(domains) -> torch.Tensor:
    """``[i, j]`` is True where the two positions come from different domains."""
    d = _as_code_tensor(domains)
    return d.unsqueeze(-1) != d.unsqueeze(-2)


def cross_masks(m_f: torch.Tensor, m_d: torch.Tensor):
    """The four feedback-by-domain cross masks (M1..M4)."""
    if m_f.shape != m_d.shape:
        raise ValueError(f"mask shapes differ: {tuple(m_f.shape)} vs {tuple(m_d.shape)}")
    return m_f & m_d, m_f & ~m_d, ~m_f & m_d, ~m_f & ~m_d


@dataclass
class MaskSet:
    m_f: torch.Tensor
    m_d: torch.Tensor
    m1: torch.Tensor
    m2: torch.Tensor
    m3: torch.Tensor
    m4: torch.Tensor

    @classmethod
    def from_sequence(cls, domains, feedbacks) -> "MaskSet":
        m_f = feedback_mask(feedbacks)
        m_d = domain_mask(domains)
        return cls(m_f, m_d, *cross_masks(m_f, m_d))

    @property
    def cross(self):
        return (self.m1, self.m2, self.m3, self.m4)

    def head_masks(self, n_heads: int, scope: str = "cross", schedule: str = "full") -> torch.Tensor:
        return head_masks(self.m_f, self.m_d, n_heads, scope, schedule)


def head_schedule(n_heads: int, scope: str = "cross", schedule: str = "full") -> list[str]:
    """Mask name used by each head, e.g. ``['M1', 'M2', 'M3', 'M4', ...]``."""
    if scope == "cross":
        if schedule not in CROSS_SCHEDULES:
            raise ValueError(f"unknown cross schedule {schedule!r}")
        if schedule == "full":
            if n_heads % 4:
                raise ValueError(f"cross scope needs a head count divisible by 4, got {n_heads}")
            return [f"M{i % 4 + 1}" for i in range(n_heads)]
        if schedule == "none":
            return ["all"] * n_heads
        return [f"M{schedule[-1]}"] * n_heads
    if scope == "single":
        if schedule not in SINGLE_SCHEDULES:
            raise ValueError(f"unknown single schedule {schedule!r}")
        if schedule == "full":
            if n_heads % 2:
                raise ValueError(f"single scope needs an even head count, got {n_heads}")
            return ["Mf" if i % 2 == 0 else "~Mf" for i in range(n_heads)]
        return {"only_f": ["Mf"], "only_not_f": ["~Mf"], "none": ["all"]}[schedule] * n_heads
    raise ValueError(f"scope must be 'cross' or 'single', got {scope!r}")


def head_masks(m_f: torch.Tensor, m_d: torch.Tensor, n_heads: int, scope: str = "cross",
               schedule: str = "full") -> torch.Tensor:
    """Stack the per-head masks into shape ``(..., n_heads, L, L)``."""
    m1, m2, m3, m4 = cross_masks(m_f, m_d)
    table = {"M1": m1, "M2": m2, "M3": m3, "M4": m4, "Mf": m_f, "~Mf": ~m_f,
             "all": torch.ones_like(m_f)}
    names = head_schedule(n_heads, scope, schedule)
    return torch.stack([table[n] for n in names], dim=-3)


def causal_mask(L: int, device=None) -> torch.Tensor:
    return torch.ones(L, L, dtype=torch.bool, device=device).tril()


def masked_softmax(scores: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
    """Row softmax over allowed entries; rows with nothing allowed become zero."""
    filled = scores.masked_fill(~allowed, float("-inf"))
    has_any = allowed.any(dim=-1, keepdim=True)
    filled = torch.where(has_any, filled, torch.zeros_like(filled))
    return torch.softmax(filled, dim=-1) * allowed


def attention_weights(q: torch.Tensor, k: torch.Tensor, mask: torch.Tensor, mode: str = "additive",
                      structural: torch.Tensor | None = None) -> torch.Tensor:
    """Attention weights for queries ``q`` and keys ``k`` of width ``d_head``.

    ``mask`` is the transition mask. In ``additive`` mode masked-out pairs are
    excluded from the softmax; in ``hadamard`` mode the scaled scores are
    multiplied by the 0/1 mask before the softmax. ``structural`` (padding and
    causality) always excludes pairs.
    """
    if mode not in MASK_MODES:
        raise ValueError(f"mask mode must be one of {MASK_MODES}, got {mode!r}")
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if mode == "hadamard":
        scores = scores * mask.to(scores.dtype)
        allowed = structural if structural is not None else torch.ones_like(mask)
    else:
        allowed = mask if structural is None else mask & structural
    return masked_softmax(scores, allowed.expand_as(scores))


def masked_attention(E_hat: torch.Tensor, mask: torch.Tensor, query: torch.Tensor, key: torch.Tensor,
                     value: torch.Tensor, mode: str = "additive", structural: torch.Tensor | None = None):
    """Single-head masked attention. Projections are ``d x d_head`` matrices."""
    if not torch.isfinite(E_hat).all():
        raise ValueError("attention input contains non-finite values")
    w = attention_weights(E_hat @ query, E_hat @ key, mask, mode, structural)
    return w @ (E_hat @ value)


class CrossTransitionBlock(nn.Module):
    """Positional embedding, masked multi-head self-attention and a feed-forward
    layer, each wrapped in a residual connection."""

    def __init__(self, d: int, n_heads: int, scope: str = "cross", schedule: str = "full",
                 max_len: int = 200, dropout: float = 0.2, mask_mode: str = "additive",
                 causal: bool = True, ffn_mult: int = 4):
        super().__init__()
        if d % n_heads:
            raise ValueError(f"d={d} is not divisible by n_heads={n_heads}")
        head_schedule(n_heads, scope, schedule)
        if mask_mode not in MASK_MODES:
            raise ValueError(f"mask mode must be one of {MASK_MODES}, got {mask_mode!r}")
        self.d, self.n_heads, self.d_head = d, n_heads, d // n_heads
        self.scope, self.schedule = scope, schedule
        self.max_len, self.mask_mode, self.causal = max_len, mask_mode, causal
        self.pos = nn.Parameter(torch.empty(max_len, d))
        self.query = nn.Linear(d, d, bias=False)
        self.key = nn.Linear(d, d, bias=False)
        self.value = nn.Linear(d, d, bias=False)
        self.out = nn.Linear(d, d, bias=False)
        self.ffn_in = nn.Linear(d, ffn_mult * d)
        self.ffn_out = nn.Linear(ffn_mult * d, d)
        self.dropout = nn.Dropout(dropout)

    def _split(self, x):
        B, L, _ = x.shape
        return x.view(B, L, self.n_heads, self.d_head).transpose(1, 2)

    def forward(self, E_graph: torch.Tensor, domains: torch.Tensor | None, feedbacks: torch.Tensor,
                valid: torch.Tensor | None = None, return_weights: bool = False):
        """``E_graph`` is ``(B, L, d)``; ``domains``/``feedbacks`` are ``(B, L)``
        codes and ``valid`` marks real (non-padding) positions."""
        squeeze = E_graph.dim() == 2
        if squeeze:
            E_graph, feedbacks = E_graph.unsqueeze(0), _as_code_tensor(feedbacks).unsqueeze(0)
            if domains is not None:
                domains = _as_code_tensor(domains).unsqueeze(0)
            if valid is not None:
                valid = valid.unsqueeze(0)
        B, L, _ = E_graph.shape
        if L > self.max_len:
            raise ValueError(f"sequence length {L} exceeds the positional table (max_len={self.max_len})")
        if domains is None:
            domains = torch.zeros_like(feedbacks)
        x = E_graph + self.pos[:L]

        m_f = feedback_mask(feedbacks)
        m_d = domain_mask(domains)
        masks = head_masks(m_f, m_d, self.n_heads, self.scope, self.schedule)  # (B, H, L, L)
        structural = None
        if valid is not None:
            structural = valid[:, None, None, :]
        if self.causal:
            c = causal_mask(L, x.device)
            structural = c if structural is None else structural & c
        q, k, v = self._split(self.query(x)), self._split(self.key(x)), self._split(self.value(x))
        w = attention_weights(q, k, masks, self.mask_mode, structural)
        ctx = (w @ v).transpose(1, 2).reshape(B, L, self.d)
        h = x + self.dropout(self.out(ctx))
        y = h + self.dropout(self.ffn_out(F.gelu(self.ffn_in(h))))
        if squeeze:
            y, w = y[0], w[0]
        return (y, w) if return_weights else y
