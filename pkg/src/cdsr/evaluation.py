"""Sampled leave-one-out ranking metrics and representation diagnostics."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import UserHistory
from .model import CrossDomainRecModel, evaluation_batch, prediction_rows, training_batch

log = logging.getLogger(__name__)

METRIC_NAMES = ("MRR@10", "NDCG@5", "NDCG@10", "HR@1", "HR@5", "HR@10")
N_NEGATIVES = 999


@dataclass(frozen=True)
class RankResult:
    rank: int
    metrics: dict


def metrics_for_rank(rank: int) -> dict:
    return {
        "MRR@10": 1.0 / rank if rank <= 10 else 0.0,
        "NDCG@5": 1.0 / math.log2(rank + 1) if rank <= 5 else 0.0,
        "NDCG@10": 1.0 / math.log2(rank + 1) if rank <= 10 else 0.0,
        "HR@1": float(rank <= 1),
        "HR@5": float(rank <= 5),
        "HR@10": float(rank <= 10),
    }


def rank_and_score(scores, positive_index: int) -> RankResult:
    """1-based rank of the positive candidate. Ties count against the positive."""
    s = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ValueError("scores contain non-finite values")
    pos = s[positive_index]
    rank = 1 + int(np.sum(s > pos)) + int(np.sum(s == pos)) - 1
    return RankResult(rank, metrics_for_rank(rank))


def ranks_of_first(scores: np.ndarray) -> np.ndarray:
    """Vectorized ranks when column 0 of each row holds the positive."""
    pos = scores[:, :1]
    return 1 + (scores[:, 1:] >= pos).sum(axis=1)


def metric_table(ranks: np.ndarray) -> dict:
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        return {**{m: None for m in METRIC_NAMES}, "n": 0}
    gain = 1.0 / np.log2(ranks + 1)
    table = {
        "MRR@10": np.where(ranks <= 10, 1.0 / ranks, 0.0).mean(),
        "NDCG@5": np.where(ranks <= 5, gain, 0.0).mean(),
        "NDCG@10": np.where(ranks <= 10, gain, 0.0).mean(),
        "HR@1": (ranks <= 1).mean(),
        "HR@5": (ranks <= 5).mean(),
        "HR@10": (ranks <= 10).mean(),
    }
    return {**{k: float(v) for k, v in table.items()}, "n": int(ranks.size)}


def event_rng(seed: int, user_id, step: int) -> np.random.Generator:
    """Per-event generator so results do not depend on evaluation order."""
    return np.random.default_rng([int(seed), zlib.crc32(str(user_id).encode()), int(step)])


def sample_negatives(target: int, catalog, user_seen=(), n: int = N_NEGATIVES, seed=0,
                     rng: np.random.Generator | None = None) -> np.ndarray:
    """Draw ``n`` negatives uniformly without replacement from the catalog items
    the user has not seen. Falls back to sampling with replacement (and logs a
    warning) when too few unseen items remain."""
    catalog = np.arange(catalog) if np.isscalar(catalog) else np.asarray(list(catalog))
    if catalog.size == 0:
        raise ValueError("cannot sample negatives from an empty catalog")
    rng = rng if rng is not None else np.random.default_rng(seed)
    excluded = np.asarray(sorted(set(int(x) for x in user_seen) | {int(target)}), dtype=catalog.dtype)
    pool = np.setdiff1d(catalog, excluded)
    if pool.size >= n:
        return rng.choice(pool, size=n, replace=False)
    if pool.size == 0:
        pool = np.setdiff1d(catalog, [target])
        if pool.size == 0:
            raise ValueError("catalog holds only the target item")
    log.debug("only %d unseen candidates for %d negatives; sampling with replacement", pool.size, n)
    sample_negatives.with_replacement += 1
    return rng.choice(pool, size=n, replace=True)


sample_negatives.with_replacement = 0


@dataclass
class EvalSet:
    """Prediction events of one split with frozen candidate lists.

    ``candidates[k, 0]`` is the true item of event ``k``; the remaining
    columns are its sampled negatives.
    """

    rows: list
    domains: np.ndarray
    candidates: np.ndarray


def build_eval_set(histories: Sequence[UserHistory], domain_sizes, max_len: int, seed: int = 0,
                   n_negatives: int = N_NEGATIVES) -> EvalSet:
    rows = prediction_rows(histories, max_len)
    full = {h.user_id: h.seq_C for h in histories}
    cands = np.zeros((len(rows), n_negatives + 1), dtype=np.int64)
    before = sample_negatives.with_replacement
    domains = np.zeros(len(rows), dtype=np.int64)
    for k, (user, _, target, t) in enumerate(rows):
        seen = [e.item_id for e in full[user][:t] if e.domain == target.domain]
        size = domain_sizes[0] if target.domain == "A" else domain_sizes[1]
        negs = sample_negatives(target.item_id, size, seen, n_negatives, rng=event_rng(seed, user, t))
        cands[k, 0] = target.item_id
        cands[k, 1:] = negs
        domains[k] = 0 if target.domain == "A" else 1
    short = sample_negatives.with_replacement - before
    if short:
        log.warning("%d of %d events had fewer than %d unseen candidates; negatives drawn with replacement",
                    short, len(rows), n_negatives)
    return EvalSet(rows, domains, cands)


@torch.no_grad()
def score_candidates(model: CrossDomainRecModel, eval_set: EvalSet, chunk: int = 1024,
                     head: str = "cross") -> np.ndarray:
    """Scores of every candidate under the domain-matching head."""
    out = np.zeros(eval_set.candidates.shape, dtype=np.float64)
    for start in range(0, len(eval_set.rows), chunk):
        rows = eval_set.rows[start:start + chunk]
        batch = evaluation_batch(rows, model.domain_sizes)
        fwd = model(batch, training=False)
        logits = fwd.logits_cross if head == "cross" else fwd.logits_single
        for name in ("A", "B"):
            idx = fwd.event_index[name].numpy()
            if idx.size == 0:
                continue
            glob = start + idx
            cand = torch.from_numpy(eval_set.candidates[glob])
            out[glob] = torch.gather(logits[name], 1, cand).double().numpy()
    return out


def evaluate(model: CrossDomainRecModel, eval_set: EvalSet, head: str = "cross") -> dict:
    """Per-domain metric tables plus an ``all`` table over every event."""
    if not eval_set.rows:
        return {"A": metric_table([]), "B": metric_table([]), "all": metric_table([])}
    ranks = ranks_of_first(score_candidates(model, eval_set, head=head))
    return {
        "A": metric_table(ranks[eval_set.domains == 0]),
        "B": metric_table(ranks[eval_set.domains == 1]),
        "all": metric_table(ranks),
    }


def evaluate_split(model, histories, config, seed: int | None = None) -> dict:
    seed = config.seed if seed is None else seed
    es = build_eval_set(histories, model.domain_sizes, config.max_len, seed, config.eval_negatives)
    return evaluate(model, es)


def write_metrics(out_dir, table: dict, extra: dict | None = None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"metrics": table, **(extra or {})}
    (out_dir / "metrics.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["domain", *METRIC_NAMES, "n"])
    for dom, row in table.items():
        w.writerow([dom, *(("" if row[m] is None else f"{row[m]:.6f}") for m in METRIC_NAMES), row["n"]])
    (out_dir / "metrics.csv").write_text(buf.getvalue(), encoding="utf-8")


def format_table(table: dict) -> str:
    lines = ["domain  " + "  ".join(f"{m:>8}" for m in METRIC_NAMES) + "       n"]
    for dom, row in table.items():
        cells = "  ".join(f"{row[m]:8.4f}" if row[m] is not None else f"{'-':>8}" for m in METRIC_NAMES)
        lines.append(f"{dom:<6}  {cells}  {row['n']:6d}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# diagnostics


def cosine(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    return F.cosine_similarity(u, v, dim=-1, eps=1e-12)


def _pair_similarities(enc: torch.Tensor, fb: torch.Tensor, valid: torch.Tensor) -> dict:
    """Cosine similarity of every within-sequence position pair, keyed by feedback pair."""
    sims = {"pp": [], "pn": [], "nn": []}
    for b in range(enc.shape[0]):
        keep = valid[b]
        e = F.normalize(enc[b][keep], dim=-1, eps=1e-12)
        f = fb[b][keep]
        if e.shape[0] < 2:
            continue
        s = e @ e.T
        iu = torch.triu_indices(e.shape[0], e.shape[0], offset=1)
        fi, fj = f[iu[0]], f[iu[1]]
        vals = s[iu[0], iu[1]]
        sims["pp"].append(vals[(fi > 0) & (fj > 0)])
        sims["nn"].append(vals[(fi < 0) & (fj < 0)])
        sims["pn"].append(vals[fi != fj])
    return sims


@torch.no_grad()
def similarity_diagnostics(model: CrossDomainRecModel, histories: Sequence[UserHistory],
                           chunk: int = 512) -> dict:
    """Cosine similarity between pooled single-domain encodings and the
    matching slice of the cross-domain encoding, and within-sequence item
    similarity grouped by feedback pair (``pp``, ``pn``, ``nn``). Groups with
    no pair are reported as ``None``."""
    align = {"A": [], "B": []}
    encs = {"A": [], "B": [], "C": []}
    for start in range(0, len(histories), chunk):
        batch = training_batch(histories[start:start + chunk], model.domain_sizes, model.config.max_len)
        out = model(batch, training=False)
        v = out.views
        for name, cross, single, present in (("A", v.cross_A, v.single_A, v.present_A),
                                             ("B", v.cross_B, v.single_B, v.present_B)):
            align[name].append(cosine(cross[present], single[present]))
        encs["A"].append(_pair_similarities(out.enc_A, batch.fb_A, batch.valid_A))
        encs["B"].append(_pair_similarities(out.enc_B, batch.fb_B, batch.valid_B))
        encs["C"].append(_pair_similarities(out.enc_C, batch.fb_C, batch.valid_C))
    report = {"alignment_cosine": {}, "feedback_similarity": {}}
    for name, parts in align.items():
        vals = torch.cat(parts) if parts else torch.zeros(0)
        report["alignment_cosine"][name] = {
            "mean": float(vals.mean()) if vals.numel() else None,
            "n_users": int(vals.numel()),
            "values": [float(x) for x in vals],
        }
    for name, chunks in encs.items():
        stats = {}
        for key in ("pp", "pn", "nn"):
            parts = [t for c in chunks for t in c[key]]
            vals = torch.cat(parts) if parts else torch.zeros(0)
            stats[key] = float(vals.mean()) if vals.numel() else None
        report["feedback_similarity"][name] = stats
    return report


def plot_diagnostics(report: dict, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for name, color in (("A", "tab:blue"), ("B", "tab:orange")):
        vals = report["alignment_cosine"][name]["values"]
        if vals:
            axes[0].hist(vals, bins=30, alpha=0.6, color=color, label=f"domain {name}")
    axes[0].set_xlabel("cosine(single-domain, cross-domain slice)")
    axes[0].legend()
    groups = ("pp", "pn", "nn")
    width = 0.25
    for k, name in enumerate(("A", "B", "C")):
        vals = [report["feedback_similarity"][name][g] or 0.0 for g in groups]
        axes[1].bar(np.arange(3) + k * width, vals, width, label=name)
    axes[1].set_xticks(np.arange(3) + width, ["sim(p,p)", "sim(p,n)", "sim(n,n)"])
    axes[1].legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
