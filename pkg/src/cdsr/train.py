"""Optimizer steps, the epoch loop with best-MRR checkpointing, and the
finite-difference gradient harness."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import TrainConfig
from .data import DatasetSplit, UserHistory
from .evaluation import build_eval_set, evaluate
from .model import LOSS_KEYS, Batch, CrossDomainRecModel, build_graphs, compute_losses, init_params, training_batch

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class NonFiniteError(RuntimeError):
    """Raised when a loss or parameter stops being finite."""


def make_optimizer(model: CrossDomainRecModel, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=config.lr, betas=ADAM_BETAS, eps=ADAM_EPS)


def l2_penalty(model: CrossDomainRecModel) -> torch.Tensor:
    return sum((p ** 2).sum() for p in model.parameters())


def train_step(model: CrossDomainRecModel, batch: Batch, optimizer: torch.optim.Optimizer,
               config: TrainConfig) -> dict[str, float]:
    """One Adam update on ``total + l2 * ||theta||^2``. Returns the loss record."""
    optimizer.zero_grad(set_to_none=True)
    try:
        comp = compute_losses(model(batch, training=True), batch, config)
    except ValueError as exc:
        if "non-finite" not in str(exc):
            raise
        bad = [n for n, p in model.named_parameters() if not torch.isfinite(p).all()]
        raise NonFiniteError(f"{exc}; non-finite parameters: {bad}") from exc
    objective = comp["total"] + config.l2 * l2_penalty(model) if config.l2 else comp["total"]
    record = {k: float(v.detach()) for k, v in comp.items()}
    if not all(math.isfinite(v) for v in record.values()) or not torch.isfinite(objective):
        raise NonFiniteError(f"non-finite loss: {json.dumps(record)}")
    objective.backward()
    optimizer.step()
    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            raise NonFiniteError(f"parameter {name} became non-finite; losses {json.dumps(record)}")
    return record


def batches(histories: Sequence[UserHistory], batch_size: int, rng: np.random.Generator):
    order = rng.permutation(len(histories))
    for start in range(0, len(order), batch_size):
        yield [histories[i] for i in order[start:start + batch_size]]


@dataclass
class FitResult:
    model: CrossDomainRecModel
    best_epoch: int
    best_metrics: dict | None
    history: list = field(default_factory=list)


def fit(config: TrainConfig, dataset: DatasetSplit, out_dir=None, eval_every: int = 1,
        select_on_validation: bool = True) -> FitResult:
    """Train from scratch. The returned model (and ``best.ckpt`` when
    ``out_dir`` is given) is the state with the highest validation MRR@10;
    without a validation split the last state is kept."""
    from .checkpoint import save_checkpoint

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        try:
            probe.write_text("")
            probe.unlink()
        except OSError as exc:
            raise OSError(f"output directory {out} is not writable: {exc}") from None

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    graphs = build_graphs(dataset.train, dataset.domain_sizes)
    model = init_params(config, dataset.domain_sizes, config.seed, graphs)
    optimizer = make_optimizer(model, config)
    val_set = None
    if select_on_validation and dataset.validation:
        val_set = build_eval_set(dataset.validation, dataset.domain_sizes, config.max_len, config.seed,
                                 config.eval_negatives)

    log_file = open(out / "train_log.jsonl", "w", encoding="utf-8") if out is not None else None
    best_score, best_epoch, best_metrics, best_state = -1.0, 0, None, None
    history = []
    step = 0
    try:
        if config.epochs == 0 or val_set is None:
            best_state = _snapshot(model)
        for epoch in range(1, config.epochs + 1):
            model.refresh_tables()
            sums = dict.fromkeys(LOSS_KEYS, 0.0)
            n_batches = 0
            for chunk in batches(dataset.train, config.batch_size, rng):
                batch = training_batch(chunk, dataset.domain_sizes, config.max_len)
                if batch.n_events == 0:
                    continue
                record = train_step(model, batch, optimizer, config)
                step += 1
                n_batches += 1
                for k in LOSS_KEYS:
                    sums[k] += record[k]
                if log_file is not None:
                    log_file.write(json.dumps({"step": step, "epoch": epoch, **record}) + "\n")
            entry = {"epoch": epoch, **{k: v / max(n_batches, 1) for k, v in sums.items()}}
            if val_set is not None and (epoch % eval_every == 0 or epoch == config.epochs):
                metrics = evaluate(model, val_set)
                entry["val"] = metrics
                score = metrics["all"]["MRR@10"]
                if score > best_score:
                    best_score, best_epoch, best_metrics, best_state = score, epoch, metrics, _snapshot(model)
            elif val_set is None:
                best_epoch, best_state = epoch, _snapshot(model)
            history.append(entry)
            log.info("epoch %d total %.4f val MRR@10 %s", epoch, entry["total"],
                     entry.get("val", {}).get("all", {}).get("MRR@10"))
    finally:
        if log_file is not None:
            log_file.close()

    model.load_state_dict(best_state)
    model.set_graphs(graphs)
    if out is not None:
        save_checkpoint(out / "best.ckpt", model, optimizer if best_epoch == config.epochs else None,
                        extra={"best_epoch": best_epoch})
        (out / "history.json").write_text(json.dumps(history, indent=1) + "\n", encoding="utf-8")
    return FitResult(model, best_epoch, best_metrics, history)


def _snapshot(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


# ---------------------------------------------------------------------------
# gradient harness


GRAD_FLOOR = 1e-6


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = GRAD_FLOOR) -> float:
    """max |a - n| scaled by the larger of the two infinity norms.

    The floor keeps groups whose true gradient is exactly zero (for example an
    output bias under a translation-invariant loss) from dividing
    finite-difference noise by nothing.
    """
    a, n = analytic.double().flatten(), numeric.double().flatten()
    if a.numel() == 0:
        return 0.0
    scale = max(float(a.abs().max()), float(n.abs().max()), floor)
    return float((a - n).abs().max()) / scale


def compare_gradients(analytic: dict, numeric: dict) -> dict[str, float]:
    return {k: relative_error(analytic[k], numeric[k]) for k in numeric}


def _coords(numel: int, max_coords: int | None, rng: np.random.Generator) -> np.ndarray:
    if max_coords is None or numel <= max_coords:
        return np.arange(numel)
    return np.sort(rng.choice(numel, size=max_coords, replace=False))


def gradient_check(model: CrossDomainRecModel, batch: Batch, config: TrainConfig,
                   components=("align", "cont", "rec", "total"), h: float = 1e-5,
                   max_coords: int | None = 16, seed: int = 0, corrupt: float | None = None) -> dict:
    """Central differences against autograd for each loss component and each
    named parameter. Dropout is off. ``corrupt`` scales the analytic gradient
    as a negative control. Returns ``{"errors": {component: {param: err}},
    "max": float, "passed": bool}``."""
    if model.config.dtype != "float64":
        raise ValueError("gradient_check needs a float64 model")
    rng = np.random.default_rng(seed)
    params = dict(model.named_parameters())
    picks = {name: _coords(p.numel(), max_coords, rng) for name, p in params.items()}

    def losses():
        comp = compute_losses(model(batch, training=False), batch, config)
        comp["rec"] = comp["single_A"] + comp["single_B"] + comp["cross_A"] + comp["cross_B"]
        return comp

    analytic = {}
    for c in components:
        model.zero_grad(set_to_none=True)
        losses()[c].backward()
        analytic[c] = {n: (p.grad.flatten()[picks[n]].clone() if p.grad is not None
                           else torch.zeros(len(picks[n]), dtype=torch.float64))
                       for n, p in params.items()}
        if corrupt is not None:
            analytic[c] = {n: g * corrupt for n, g in analytic[c].items()}

    numeric = {c: {n: torch.zeros(len(picks[n]), dtype=torch.float64) for n in params} for c in components}
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            for k, idx in enumerate(picks[name]):
                orig = float(flat[idx])
                flat[idx] = orig + h
                up = losses()
                flat[idx] = orig - h
                down = losses()
                flat[idx] = orig
                for c in components:
                    numeric[c][name][k] = (float(up[c]) - float(down[c])) / (2 * h)
    model.zero_grad(set_to_none=True)
    errors = {c: compare_gradients(analytic[c], numeric[c]) for c in components}
    worst = max(max(v.values()) for v in errors.values())
    return {"errors": errors, "max": worst, "passed": worst < 1e-4}


def tiny_instance(seed: int = 0, d: int = 8, n_heads: int = 4, layers: int = 1, n_users: int = 4,
                  max_len: int = 6, items: tuple[int, int] = (5, 5), **overrides):
    """Small float64 model plus a training batch for the gradient harness.

    Every user has at least two events per domain and both feedback signs,
    so every loss component is active.
    """
    from .data import Interaction

    rng = np.random.default_rng(seed)
    histories = []
    for u in range(n_users):
        L = int(rng.integers(4, max_len + 1))
        doms = ["A", "A", "B", "B"] + list(rng.choice(["A", "B"], size=L - 4))
        rng.shuffle(doms)
        fbs = [1, -1] + list(rng.choice([1, -1], size=L - 2))
        rng.shuffle(fbs)
        events = [Interaction(f"u{u}", int(rng.integers(items[0] if dm == "A" else items[1])), dm, int(f), t)
                  for t, (dm, f) in enumerate(zip(doms, fbs))]
        histories.append(UserHistory.from_events(f"u{u}", events))
    cfg = dict(d=d, n_heads=n_heads, layers=layers, max_len=max_len, dtype="float64", dropout=0.0, seed=seed)
    cfg.update(overrides)
    config = TrainConfig(**cfg)
    graphs = build_graphs(histories, items)
    model = init_params(config, items, seed, graphs)
    # nonzero biases so their gradients are exercised too
    with torch.no_grad():
        gen = torch.Generator().manual_seed(seed + 1)
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.copy_(0.1 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return model, training_batch(histories, items, max_len), config
