"""``cdsr`` command line: data preparation, synthesis, statistics, training,
evaluation, diagnostics and artifact inspection."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

EXIT_OK = 0
EXIT_DATA = 2
EXIT_USAGE = 64
EXIT_INTERNAL = 70

log = logging.getLogger("cdsr")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        entry = {"time": round(record.created, 3), "level": record.levelname.lower(),
                 "logger": record.name, "message": record.getMessage()}
        return json.dumps(entry)


def _setup_logging(verbose: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.INFO if verbose else logging.WARNING)


def _default_seed() -> int:
    raw = os.environ.get("T2_SEED")
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"T2_SEED must be an integer, got {raw!r}") from None


def _seed(args) -> int:
    return args.seed if args.seed is not None else _default_seed()


def _file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _data_hashes(root: Path) -> dict:
    if root.is_file():
        return {root.name: _file_hash(root)}
    return {str(p.relative_to(root)): _file_hash(p) for p in sorted(root.rglob("*")) if p.is_file()}


def write_manifest(out_dir: Path, command: str, seed: int, config=None, inputs: dict | None = None) -> None:
    from . import __version__

    manifest = {
        "command": command,
        "artifact_version": __version__,
        "seed": seed,
        "config": config.to_dict() if config is not None else None,
        "config_hash": config.hash() if config is not None else None,
        "data_hashes": inputs or {},
        "created_unix": int(time.time()),
        "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _parse_value(text: str):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def _overrides(args) -> dict:
    values = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, val = item.split("=", 1)
        values[key.strip().replace("-", "_")] = _parse_value(val.strip())
    for name in ("epochs", "d", "n_heads", "layers", "batch_size", "lr", "l2", "mu1", "mu2", "propagate",
                 "mask_mode", "layer_mean", "pred_pool", "cross_schedule", "single_schedule", "max_len", "causal"):
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    return values


# ---------------------------------------------------------------------------
# commands


def cmd_prep(args) -> int:
    from .data import (build_histories, build_idmap, chronological_split, domain_sizes_of, parse_interactions,
                       save_histories, save_split, transition_stats)

    src = Path(args.input)
    interactions = parse_interactions(src, rating_threshold=args.threshold)
    idmap = build_idmap(interactions)
    sizes = domain_sizes_of(idmap)
    histories = build_histories(interactions, min_per_domain=args.min_per_domain,
                                max_span_seconds=args.max_span_seconds)
    split = chronological_split(histories, domain_sizes=sizes, mode=args.split_mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_split(out, split, idmap)
    save_histories(out / "histories.jsonl", histories)
    stats = transition_stats(histories)
    summary = {"users": len(histories), "interactions": len(interactions), "domain_sizes": list(sizes),
               "split_users": {k: len(split.get(k)) for k in ("train", "validation", "test")},
               "transitions": stats.to_dict()}
    (out / "stats.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    write_manifest(out, "prep", seed=0, inputs=_data_hashes(src))
    print(f"prepared {len(histories)} users ({len(interactions)} interactions) -> {out}")
    print(f"items: A={sizes[0]} B={sizes[1]}; users per split: {summary['split_users']}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .data import DataError, SynthSpec, generate_synthetic, transition_stats, build_histories, write_interactions

    spec = SynthSpec(n_users=args.users, items_a=args.items_a, items_b=args.items_b, min_len=args.min_len,
                     max_len=args.max_len, type1=args.type1, type2=args.type2, planted=args.planted,
                     pattern=args.pattern, switch_prob=args.switch_prob)
    try:
        spec.validate()
    except DataError as exc:
        raise UsageError(str(exc)) from None
    seed = _seed(args)
    interactions = generate_synthetic(spec, seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_interactions(out, interactions)
    stats = transition_stats(build_histories(interactions, min_per_domain=1))
    print(f"wrote {len(interactions)} interactions for {spec.n_users} users -> {out}")
    print(f"type1 {100 * stats.type1_rate:.2f}%  type2 {100 * stats.type2_rate:.2f}%  "
          f"({stats.total} cross-domain pairs)")
    return EXIT_OK


def _load_any_histories(path: Path, threshold: float):
    from .data import build_histories, load_histories, parse_interactions

    if path.is_dir():
        full = path / "histories.jsonl"
        if full.exists():
            return load_histories(full)
        return load_histories(path / "train" / "histories.jsonl")
    return build_histories(parse_interactions(path, rating_threshold=threshold), min_per_domain=1)


def cmd_stats(args) -> int:
    from .data import transition_stats

    stats = transition_stats(_load_any_histories(Path(args.data), args.threshold))
    print(f"cross-domain adjacent pairs: {stats.total}")
    print(f"Type 1 (+ to -): {stats.type1_count:7d}  {100 * stats.type1_rate:6.2f}%")
    print(f"Type 2 (- to +): {stats.type2_count:7d}  {100 * stats.type2_rate:6.2f}%")
    print(f"other:           {stats.other_count:7d}  {100 * stats.other_rate:6.2f}%")
    if args.json:
        print(json.dumps(stats.to_dict(), sort_keys=True))
    return EXIT_OK


def _config_from(args):
    from .config import load_config

    overrides = _overrides(args)
    if args.seed is not None or os.environ.get("T2_SEED"):
        overrides["seed"] = _seed(args)
    return load_config(args.config, preset=args.preset, overrides=overrides)


def cmd_train(args) -> int:
    from .config import dump_toml
    from .data import load_split
    from .train import fit

    config = _config_from(args)
    data = Path(args.data)
    split = load_split(data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(dump_toml(config), encoding="utf-8")
    result = fit(config, split, out)
    write_manifest(out, "train", config.seed, config, _data_hashes(data))
    print(f"trained {config.epochs} epochs; best epoch {result.best_epoch}; checkpoint {out / 'best.ckpt'}")
    if result.best_metrics:
        from .evaluation import format_table

        print("validation metrics:")
        print(format_table(result.best_metrics))
    return EXIT_OK


def _model_for(checkpoint: Path, data: Path):
    from .checkpoint import load_checkpoint
    from .data import load_split
    from .model import build_graphs

    split = load_split(data)
    model, _, header = load_checkpoint(checkpoint, domain_sizes=split.domain_sizes)
    model.set_graphs(build_graphs(split.train, split.domain_sizes))
    return model, split, header


def cmd_eval(args) -> int:
    from .evaluation import evaluate_split, format_table, write_metrics

    model, split, _ = _model_for(Path(args.checkpoint), Path(args.data))
    seed = _seed(args) if args.seed is not None or os.environ.get("T2_SEED") else model.config.seed
    histories = split.get(args.split)
    table = evaluate_split(model, histories, model.config, seed=seed)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / f"eval_{args.split}"
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(out, table, {"split": args.split, "seed": seed, "config_hash": model.config.hash()})
    write_manifest(out, "eval", seed, model.config,
                   {**_data_hashes(Path(args.data)), "checkpoint": _file_hash(Path(args.checkpoint))})
    print(f"{args.split} metrics ({table['all']['n']} events):")
    print(format_table(table))
    print(f"wrote {out / 'metrics.json'}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    from .evaluation import plot_diagnostics, similarity_diagnostics

    model, split, _ = _model_for(Path(args.checkpoint), Path(args.data))
    report = similarity_diagnostics(model, split.get(args.split))
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "diagnostics"
    out.mkdir(parents=True, exist_ok=True)
    (out / "diagnostics.json").write_text(json.dumps(report, indent=1) + "\n", encoding="utf-8")
    if args.plot:
        plot_diagnostics(report, out / "diagnostics.png")
    write_manifest(out, "diagnose", model.config.seed, model.config, _data_hashes(Path(args.data)))
    fmt = lambda v: "absent" if v is None else f"{v:.4f}"
    for dom in ("A", "B"):
        print(f"alignment cosine {dom}: {fmt(report['alignment_cosine'][dom]['mean'])}")
    for enc, vals in report["feedback_similarity"].items():
        print(f"encoder {enc}: sim(p,p) {fmt(vals['pp'])}  sim(p,n) {fmt(vals['pn'])}  sim(n,n) {fmt(vals['nn'])}")
    return EXIT_OK


def cmd_inspect_graph(args) -> int:
    import numpy as np

    from .data import load_split
    from .graph import build_transition_matrix

    split = load_split(Path(args.data))
    g = build_transition_matrix(split.train, args.which, split.domain_sizes)
    signs = np.array([s for (i, j), s in g.edges.items() if i < j])
    deg = g.degree
    print(f"graph {args.which}: {g.n} nodes, {g.num_edges} edges "
          f"({int((signs > 0).sum())} positive, {int((signs < 0).sum())} negative)")
    if g.n:
        print(f"degree: min {deg.min()} max {deg.max()} mean {deg.mean():.2f}; isolated {int((deg == 0).sum())}")
    if args.out:
        g.dump(args.out)
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_inspect_masks(args) -> int:
    from .attention import MaskSet

    if len(args.domains) != len(args.feedbacks):
        raise UsageError("--domains and --feedbacks must have the same length")
    try:
        ms = MaskSet.from_sequence(args.domains, args.feedbacks)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    for k, m in enumerate(ms.cross, start=1):
        print(f"M{k}")
        for row in m.int().tolist():
            print(" ".join(str(v) for v in row))
    return EXIT_OK


def cmd_inspect_checkpoint(args) -> int:
    from .checkpoint import read_header

    header = read_header(args.checkpoint)
    header.pop("_payload_start", None)
    if args.json:
        print(json.dumps(header, indent=1, sort_keys=True))
        return EXIT_OK
    n_params = sum(math.prod(t["shape"]) for t in header["tensors"] if t["name"].startswith("param/"))
    print(f"format {header['format']} v{header['version']}; config hash {header['config_hash']}")
    print(f"domain sizes {header['domain_sizes']}; {n_params} parameters; "
          f"optimizer state {'yes' if header['optimizer'] else 'no'}")
    for t in header["tensors"]:
        if t["name"].startswith("param/"):
            print(f"  {t['name'][6:]:<24} {t['dtype']:<8} {tuple(t['shape'])}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .config import load_config
    from .train import gradient_check, tiny_instance

    base = dict(d=8, n_heads=4, layers=1, max_len=6)
    if args.config:
        cfg = load_config(args.config).to_dict()
        base.update({k: cfg[k] for k in ("d", "n_heads", "layers", "max_len", "mu1", "mu2", "tau", "alpha",
                                          "mask_mode", "layer_mean", "pred_pool", "cross_schedule",
                                          "single_schedule")})
    if base["d"] > 8 or base["max_len"] > 6:
        raise UsageError("gradcheck needs d <= 8 and max_len <= 6")
    seed = _seed(args)
    worst = 0.0
    for k in range(args.instances):
        model, batch, config = tiny_instance(seed + k, **base)
        report = gradient_check(model, batch, config, max_coords=args.coords, seed=seed + k)
        worst = max(worst, report["max"])
        print(f"instance {k}: max relative error {report['max']:.3e}")
    passed = worst < 1e-4
    print(f"gradcheck {'passed' if passed else 'FAILED'}: max relative error {worst:.3e} (threshold 1e-4)")
    return EXIT_OK if passed else EXIT_INTERNAL


# ---------------------------------------------------------------------------
# parser


def _add_config_flags(p) -> None:
    p.add_argument("--config", help="flat TOML config file")
    p.add_argument("--preset", choices=["paper", "desk"], help="start from a named preset")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key (repeatable)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--d", type=int, help="embedding width")
    p.add_argument("--n-heads", dest="n_heads", type=int)
    p.add_argument("--layers", type=int, choices=range(4), help="graph propagation layers K (0-3)")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--max-len", dest="max_len", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--l2", type=float)
    p.add_argument("--mu1", type=float, help="alignment loss weight")
    p.add_argument("--mu2", type=float, help="feedback contrast loss weight")
    p.add_argument("--propagate", choices=["epoch", "step"], help="when graph propagation is recomputed")
    p.add_argument("--mask-mode", dest="mask_mode", choices=["additive", "hadamard"])
    p.add_argument("--layer-mean", dest="layer_mean", choices=["k+1", "k"])
    p.add_argument("--pred-pool", dest="pred_pool", choices=["last", "mean"])
    p.add_argument("--cross-schedule", dest="cross_schedule",
                   choices=["full", "only1", "only2", "only3", "only4", "none"])
    p.add_argument("--single-schedule", dest="single_schedule", choices=["full", "only_f", "only_not_f", "none"])
    p.add_argument("--no-causal", dest="causal", action="store_false", default=None,
                   help="let positions attend to later events")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cdsr", description="Cross-domain sequential recommendation with signed transition "
                                              "graphs and transition-masked attention.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress (JSON lines on stderr)")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    seed_help = "random seed (falls back to $T2_SEED, then 0)"

    p = sub.add_parser("prep", help="parse a rating log and write prepared splits")
    p.add_argument("--input", required=True, help="CSV/TSV with header user_id,item_id,domain,rating,timestamp")
    p.add_argument("--threshold", type=float, default=3.0, help="ratings above this are positive (default 3)")
    p.add_argument("--min-per-domain", type=int, default=3, help="minimum events per domain per user")
    p.add_argument("--max-span-seconds", type=int, default=None,
                   help="keep only events within this window before each user's last event")
    p.add_argument("--split-mode", choices=["per_user", "global"], default="per_user")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("synth", help="generate a synthetic rating log")
    p.add_argument("--users", type=int, default=1000)
    p.add_argument("--items-a", type=int, default=500)
    p.add_argument("--items-b", type=int, default=500)
    p.add_argument("--min-len", type=int, default=8)
    p.add_argument("--max-len", type=int, default=20)
    p.add_argument("--type1", type=float, default=0.1831, help="target rate of + to - cross-domain transitions")
    p.add_argument("--type2", type=float, default=0.1828, help="target rate of - to + cross-domain transitions")
    p.add_argument("--planted", action="store_true", help="make next items predictable from history")
    p.add_argument("--pattern", choices=["revisit", "successor"], default="revisit", help="planted rule")
    p.add_argument("--switch-prob", type=float, default=0.5, help="probability of changing domain per step")
    p.add_argument("--seed", type=int, help=seed_help)
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stats", help="Type-1/Type-2 transition statistics")
    p.add_argument("--data", required=True, help="raw CSV or prepared directory")
    p.add_argument("--threshold", type=float, default=3.0, help="rating threshold for raw input")
    p.add_argument("--json", action="store_true", help="also print a JSON line")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train a model and keep the best validation checkpoint")
    p.add_argument("--data", required=True, help="prepared directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help=seed_help)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="sampled-ranking metrics for a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="prepared directory")
    p.add_argument("--split", choices=["train", "validation", "test"], default="test")
    p.add_argument("--seed", type=int, help="negative-sampling seed (default: the training seed)")
    p.add_argument("--out", help="output directory (default: next to the checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", help="alignment and feedback similarity diagnostics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="prepared directory")
    p.add_argument("--split", choices=["train", "validation", "test"], default="train")
    p.add_argument("--plot", action="store_true", help="also write diagnostics.png (needs matplotlib)")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("inspect-graph", help="summarize a signed transition graph built from TRAIN")
    p.add_argument("--data", required=True, help="prepared directory")
    p.add_argument("--which", choices=["A", "B", "C"], required=True)
    p.add_argument("--out", help="write the edge list as JSON")
    p.set_defaults(func=cmd_inspect_graph)

    p = sub.add_parser("inspect-masks", help="print the four cross masks for a short sequence")
    p.add_argument("--domains", required=True, help="domain string, e.g. ABA")
    p.add_argument("--feedbacks", required=True, help="feedback string, e.g. ++-")
    p.set_defaults(func=cmd_inspect_masks)

    p = sub.add_parser("inspect-checkpoint", help="print a checkpoint header without loading tensors")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_inspect_checkpoint)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check on tiny instances")
    p.add_argument("--config", help="flat TOML config (d <= 8, max_len <= 6)")
    p.add_argument("--instances", type=int, default=3)
    p.add_argument("--coords", type=int, default=16, help="sampled coordinates per parameter")
    p.add_argument("--seed", type=int, help=seed_help)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("cdsr: error: a command is required", file=sys.stderr)
        return EXIT_USAGE
    _setup_logging(args.verbose)

    from .checkpoint import CheckpointError
    from .config import ConfigError
    from .data import DataError
    from .train import NonFiniteError

    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"cdsr {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError, IsADirectoryError, NotADirectoryError,
            PermissionError) as exc:
        print(f"cdsr {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, AssertionError) as exc:
        print(f"cdsr {args.command}: internal invariant failure: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
