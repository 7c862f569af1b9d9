"""Parameter container, batching and the full forward pass:
graph propagation -> masked attention encoders -> pooled views and logits."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .attention import CrossTransitionBlock
from .config import TrainConfig
from .data import UserHistory
from .graph import SignedGraph, build_transition_matrix, propagate
from .losses import PooledViews, alignment_loss, feedback_contrast_batch, masked_mean, total_loss

DOMAIN_CODE = {"A": 0, "B": 1}
LOSS_KEYS = ("single_A", "single_B", "cross_A", "cross_B", "align", "cont", "total")


def torch_dtype(name: str):
    return {"float32": torch.float32, "float64": torch.float64}[name]


def build_graphs(train_histories: Sequence[UserHistory], domain_sizes) -> dict[str, SignedGraph]:
    return {w: build_transition_matrix(train_histories, w, domain_sizes) for w in ("A", "B", "C")}


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    """Padded tensors for a set of sequences plus the prediction events.

    Event ``k`` predicts ``ev_target[k]`` (local id in domain ``ev_domain[k]``)
    from the prefix ending at position ``ev_pos[k]`` of row ``ev_row[k]``;
    ``ev_single[k]`` indexes the last event of the target domain in that
    prefix within the row's single-domain sequence (-1 if there is none).
    """

    user_ids: list
    items_C: torch.Tensor
    dom_C: torch.Tensor
    fb_C: torch.Tensor
    valid_C: torch.Tensor
    items_A: torch.Tensor
    fb_A: torch.Tensor
    valid_A: torch.Tensor
    items_B: torch.Tensor
    fb_B: torch.Tensor
    valid_B: torch.Tensor
    ev_row: torch.Tensor
    ev_pos: torch.Tensor
    ev_domain: torch.Tensor
    ev_target: torch.Tensor
    ev_single: torch.Tensor

    @property
    def n_rows(self) -> int:
        return self.items_C.shape[0]

    @property
    def n_events(self) -> int:
        return self.ev_row.shape[0]


def _pad(rows, fill=0):
    width = max((len(r) for r in rows), default=0)
    width = max(width, 1)
    out = np.full((len(rows), width), fill, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return torch.from_numpy(out)


def collate(sequences, events, domain_sizes, user_ids=None) -> Batch:
    """``sequences``: list of event lists (already truncated). ``events``: list
    of ``(row, pos, target_event)`` tuples."""
    n_a, n_b = domain_sizes
    items_c, dom_c, fb_c = [], [], []
    items_a, fb_a, items_b, fb_b = [], [], [], []
    single_index = []
    for seq in sequences:
        ic, dc, fc, ia, fa, ib, fbb, si = [], [], [], [], [], [], [], []
        for e in seq:
            limit = n_a if e.domain == "A" else n_b
            if e.item_id >= limit:
                raise IndexError(f"item {e.item_id} of domain {e.domain} exceeds table size {limit}")
            ic.append(e.item_id + (n_a if e.domain == "B" else 0))
            dc.append(DOMAIN_CODE[e.domain])
            fc.append(e.feedback)
            if e.domain == "A":
                si.append(len(ia))
                ia.append(e.item_id)
                fa.append(e.feedback)
            else:
                si.append(len(ib))
                ib.append(e.item_id)
                fbb.append(e.feedback)
        items_c.append(ic); dom_c.append(dc); fb_c.append(fc)
        items_a.append(ia); fb_a.append(fa); items_b.append(ib); fb_b.append(fbb)
        single_index.append(si)

    ev_row, ev_pos, ev_dom, ev_tgt, ev_single = [], [], [], [], []
    for row, pos, target in events:
        seq = sequences[row]
        code = DOMAIN_CODE[target.domain]
        # last event of the target's domain at or before pos
        last = -1
        for p in range(pos, -1, -1):
            if seq[p].domain == target.domain:
                last = single_index[row][p]
                break
        ev_row.append(row); ev_pos.append(pos); ev_dom.append(code)
        ev_tgt.append(target.item_id); ev_single.append(last)

    def lengths_mask(rows):
        t = _pad([[1] * len(r) for r in rows])
        return t.bool()

    as_long = lambda v: torch.as_tensor(v, dtype=torch.long)
    return Batch(
        user_ids=list(user_ids) if user_ids is not None else list(range(len(sequences))),
        items_C=_pad(items_c), dom_C=_pad(dom_c), fb_C=_pad(fb_c), valid_C=lengths_mask(items_c),
        items_A=_pad(items_a), fb_A=_pad(fb_a), valid_A=lengths_mask(items_a),
        items_B=_pad(items_b), fb_B=_pad(fb_b), valid_B=lengths_mask(items_b),
        ev_row=as_long(ev_row), ev_pos=as_long(ev_pos), ev_domain=as_long(ev_dom),
        ev_target=as_long(ev_tgt), ev_single=as_long(ev_single),
    )


def training_batch(histories: Sequence[UserHistory], domain_sizes, max_len: int) -> Batch:
    """One row per history, keeping its most recent ``max_len`` events; every
    position from ``target_start`` on is a target for the prefix before it."""
    sequences, events = [], []
    for h in histories:
        offset = max(0, len(h.seq_C) - max_len)
        seq = h.seq_C[offset:]
        row = len(sequences)
        sequences.append(seq)
        for t in range(max(h.target_start - offset, 1), len(seq)):
            events.append((row, t - 1, seq[t]))
    return collate(sequences, events, domain_sizes, [h.user_id for h in histories])


def prediction_rows(histories: Sequence[UserHistory], max_len: int):
    """One ``(user_id, context, target, position)`` per target event, the
    context being all earlier events truncated to the last ``max_len``."""
    out = []
    for h in histories:
        for t in range(max(h.target_start, 1), len(h.seq_C)):
            ctx = h.seq_C[max(0, t - max_len):t]
            out.append((h.user_id, ctx, h.seq_C[t], t))
    return out


def evaluation_batch(rows, domain_sizes) -> Batch:
    sequences = [ctx for _, ctx, _, _ in rows]
    events = [(i, len(ctx) - 1, target) for i, (_, ctx, target, _) in enumerate(rows)]
    return collate(sequences, events, domain_sizes, [u for u, *_ in rows])


# ---------------------------------------------------------------------------
# model


@dataclass
class ForwardOutputs:
    enc_A: torch.Tensor
    enc_B: torch.Tensor
    enc_C: torch.Tensor
    views: PooledViews
    rep_C: torch.Tensor
    rep_single: torch.Tensor
    logits_cross: dict
    logits_single: dict
    event_index: dict
    targets: dict


class CrossDomainRecModel(nn.Module):
    """Holds every learnable table: the three item embedding tables, the three
    attention encoders (each with its positional table) and the two heads."""

    def __init__(self, config: TrainConfig, domain_sizes, graphs: dict[str, SignedGraph] | None = None):
        super().__init__()
        self.config = config
        self.domain_sizes = tuple(int(s) for s in domain_sizes)
        n_a, n_b = self.domain_sizes
        d = config.d
        self.emb_A = nn.Parameter(torch.empty(n_a, d))
        self.emb_B = nn.Parameter(torch.empty(n_b, d))
        self.emb_C = nn.Parameter(torch.empty(n_a + n_b, d))
        block = dict(d=d, n_heads=config.n_heads, max_len=config.max_len, dropout=config.dropout,
                     mask_mode=config.mask_mode, causal=config.causal)
        self.enc_A = CrossTransitionBlock(scope="single", schedule=config.single_schedule, **block)
        self.enc_B = CrossTransitionBlock(scope="single", schedule=config.single_schedule, **block)
        self.enc_C = CrossTransitionBlock(scope="cross", schedule=config.cross_schedule, **block)
        self.head_A = nn.Linear(d, n_a)
        self.head_B = nn.Linear(d, n_b)
        self.graphs = graphs
        self._sparse = {}
        self._stale = None

    # graph propagation --------------------------------------------------

    def set_graphs(self, graphs: dict[str, SignedGraph]) -> None:
        self.graphs = graphs
        self._sparse = {}
        self._stale = None

    def _operator(self, name: str, dtype):
        key = (name, dtype)
        if key not in self._sparse:
            if self.graphs is None:
                raise RuntimeError("model has no graphs; call set_graphs() first")
            self._sparse[key] = self.graphs[name].torch_normalized(dtype=dtype)
        return self._sparse[key]

    def _propagate(self, name: str, table: torch.Tensor) -> torch.Tensor:
        return propagate(self._operator(name, table.dtype), table, self.config.layers, self.config.layer_mean)

    def propagated_tables(self) -> dict[str, torch.Tensor]:
        fresh = {n: self._propagate(n, getattr(self, "emb_" + n)) for n in ("A", "B", "C")}
        if self.config.propagate == "epoch" and self.training and self._stale is not None:
            # value from the last refresh, gradient of the current tables
            return {n: self._stale[n] + fresh[n] - fresh[n].detach() for n in fresh}
        return fresh

    def refresh_tables(self) -> None:
        """Snapshot propagated tables (used when ``propagate == 'epoch'``)."""
        with torch.no_grad():
            self._stale = {n: self._propagate(n, getattr(self, "emb_" + n)).clone() for n in ("A", "B", "C")}

    # forward ------------------------------------------------------------

    def _pool_rep(self, enc: torch.Tensor, valid: torch.Tensor, rows, pos) -> torch.Tensor:
        if self.config.pred_pool == "last":
            return enc[rows, pos]
        w = valid.to(enc.dtype).unsqueeze(-1)
        csum = torch.cumsum(enc * w, dim=1)
        count = torch.cumsum(w, dim=1).clamp(min=1)
        return (csum / count)[rows, pos]

    def forward(self, batch: Batch, training: bool = False) -> ForwardOutputs:
        self.train(training)
        tables = self.propagated_tables()
        x_C = tables["C"][batch.items_C]
        x_A = tables["A"][batch.items_A]
        x_B = tables["B"][batch.items_B]
        enc_C = self.enc_C(x_C, batch.dom_C, batch.fb_C, batch.valid_C)
        enc_A = self.enc_A(x_A, None, batch.fb_A, batch.valid_A)
        enc_B = self.enc_B(x_B, None, batch.fb_B, batch.valid_B)

        single_A, absent_A = masked_mean(enc_A, batch.valid_A)
        single_B, absent_B = masked_mean(enc_B, batch.valid_B)
        cross_A, _ = masked_mean(enc_C, batch.valid_C & (batch.dom_C == 0))
        cross_B, _ = masked_mean(enc_C, batch.valid_C & (batch.dom_C == 1))
        views = PooledViews(single_A, single_B, cross_A, cross_B, ~absent_A, ~absent_B)

        rep_C = self._pool_rep(enc_C, batch.valid_C, batch.ev_row, batch.ev_pos)
        rep_single = rep_C.new_zeros(rep_C.shape)
        logits_cross, logits_single, index, targets = {}, {}, {}, {}
        for code, name in ((0, "A"), (1, "B")):
            idx = torch.nonzero(batch.ev_domain == code, as_tuple=True)[0]
            enc, valid = (enc_A, batch.valid_A) if code == 0 else (enc_B, batch.valid_B)
            head = self.head_A if code == 0 else self.head_B
            rows, single_pos = batch.ev_row[idx], batch.ev_single[idx]
            has = single_pos >= 0
            r_single = self._pool_rep(enc, valid, rows, single_pos.clamp(min=0))
            r_single = r_single * has.unsqueeze(-1).to(r_single.dtype)
            rep_single = rep_single.index_copy(0, idx, r_single)
            logits_cross[name] = head(rep_C[idx])
            logits_single[name] = head(rep_C[idx] + r_single)
            index[name] = idx
            targets[name] = batch.ev_target[idx]
        return ForwardOutputs(enc_A, enc_B, enc_C, views, rep_C, rep_single,
                              logits_cross, logits_single, index, targets)


def compute_losses(out: ForwardOutputs, batch: Batch, config: TrainConfig) -> dict[str, torch.Tensor]:
    """Loss components for a batch. Recommendation terms are summed over the
    events of their domain and divided by the batch's event count, so the four
    terms add up to the mean per-event loss."""
    w = config.loss_weights
    n_events = max(batch.n_events, 1)
    comp = {}
    for name in ("A", "B"):
        tgt = out.targets[name]
        comp["single_" + name] = F.cross_entropy(out.logits_single[name], tgt, reduction="sum") / n_events
        comp["cross_" + name] = F.cross_entropy(out.logits_cross[name], tgt, reduction="sum") / n_events
    comp["align"] = alignment_loss(out.views, w.tau)
    cont = (feedback_contrast_batch(out.enc_A, batch.fb_A, batch.valid_A, w.alpha)
            + feedback_contrast_batch(out.enc_B, batch.fb_B, batch.valid_B, w.alpha)
            + feedback_contrast_batch(out.enc_C, batch.fb_C, batch.valid_C, w.alpha))
    comp["cont"] = cont.mean()
    comp["total"] = total_loss(comp["single_A"], comp["single_B"], comp["cross_A"], comp["cross_B"],
                               comp["align"], comp["cont"], w)
    return comp


def init_params(config: TrainConfig, domain_sizes, seed: int | None = None,
                graphs: dict[str, SignedGraph] | None = None) -> CrossDomainRecModel:
    """Build a model with weights drawn from N(0, 1/fan_in); biases start at zero.
    Deterministic for a given seed."""
    seed = config.seed if seed is None else seed
    model = CrossDomainRecModel(config, domain_sizes, graphs)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            else:
                fan_in = p.shape[1] if name.endswith("weight") else config.d
                p.copy_(torch.randn(p.shape, generator=gen) / np.sqrt(fan_in))
    return model.to(torch_dtype(config.dtype))
