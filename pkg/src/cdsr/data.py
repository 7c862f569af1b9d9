"""Rating-log ingestion, per-user histories, chronological splits and the
synthetic generator used for desk-scale experiments."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DOMAINS = ("A", "B")
HEADER = ("user_id", "item_id", "domain", "rating", "timestamp")


class DataError(ValueError):
    """Malformed input data. ``line`` is the 1-based line number when known."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"line {line}: "
        elif where:
            where += " "
        super().__init__(where + message)


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: int
    domain: str
    feedback: int
    timestamp: int
    rating: float | None = None
    raw_item: str | None = None
    # position in the source log; breaks timestamp ties
    seq_no: int = 0

    def __post_init__(self):
        if self.feedback not in (1, -1):
            raise DataError(f"feedback must be +1 or -1, got {self.feedback!r}")
        if self.domain not in DOMAINS:
            raise DataError(f"unknown domain {self.domain!r}")
        if self.item_id < 0:
            raise DataError(f"negative item id {self.item_id}")


def _order_key(ev: Interaction):
    return (ev.timestamp, ev.seq_no)


@dataclass(frozen=True)
class UserHistory:
    """One user's events. ``seq_C`` is the chronological merge of ``seq_A``
    and ``seq_B``. Positions ``>= target_start`` of ``seq_C`` are prediction
    targets; earlier positions are context only."""

    user_id: str
    seq_A: tuple[Interaction, ...]
    seq_B: tuple[Interaction, ...]
    seq_C: tuple[Interaction, ...]
    target_start: int = 1

    @classmethod
    def from_events(cls, user_id: str, events: Iterable[Interaction], target_start: int = 1):
        seq_c = tuple(sorted(events, key=_order_key))
        return cls(
            user_id=user_id,
            seq_A=tuple(e for e in seq_c if e.domain == "A"),
            seq_B=tuple(e for e in seq_c if e.domain == "B"),
            seq_C=seq_c,
            target_start=target_start,
        )

    def __len__(self):
        return len(self.seq_C)

    @property
    def targets(self) -> tuple[Interaction, ...]:
        return self.seq_C[max(self.target_start, 1):]


@dataclass
class DatasetSplit:
    train: list[UserHistory]
    validation: list[UserHistory]
    test: list[UserHistory]
    domain_sizes: tuple[int, int]

    def get(self, name: str) -> list[UserHistory]:
        if name not in ("train", "validation", "test"):
            raise KeyError(f"unknown split {name!r}")
        return getattr(self, name)


@dataclass(frozen=True)
class TransitionStats:
    type1_count: int
    type2_count: int
    other_count: int

    @property
    def total(self) -> int:
        return self.type1_count + self.type2_count + self.other_count

    def rate(self, count: int) -> float:
        return count / self.total if self.total else 0.0

    @property
    def type1_rate(self) -> float:
        return self.rate(self.type1_count)

    @property
    def type2_rate(self) -> float:
        return self.rate(self.type2_count)

    @property
    def other_rate(self) -> float:
        return self.rate(self.other_count)

    def to_dict(self) -> dict:
        return {
            "type1_count": self.type1_count,
            "type2_count": self.type2_count,
            "other_count": self.other_count,
            "cross_domain_pairs": self.total,
            "type1_pct": 100.0 * self.type1_rate,
            "type2_pct": 100.0 * self.type2_rate,
            "other_pct": 100.0 * self.other_rate,
        }


# ---------------------------------------------------------------------------
# parsing / serialisation


def _sniff_delimiter(header_line: str) -> str:
    if "\t" in header_line and "," not in header_line:
        return "\t"
    return ","


def parse_interactions(path, rating_threshold: float = 3.0, delimiter: str | None = None) -> list[Interaction]:
    """Read a ``user_id,item_id,domain,rating,timestamp`` log.

    Feedback is +1 when ``rating > rating_threshold`` and -1 otherwise. Raw
    item ids are re-indexed densely per domain in order of first appearance;
    the original id is kept on ``Interaction.raw_item``.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    return parse_interactions_text(text, rating_threshold, delimiter, source=str(path))


def parse_interactions_text(text: str, rating_threshold: float = 3.0, delimiter: str | None = None,
                            source: str | None = None) -> list[Interaction]:
    if not text.strip():
        return []
    first_line = text.splitlines()[0]
    delimiter = delimiter or _sniff_delimiter(first_line)
    reader = csv.reader(io.StringIO(text), delimiter=delimiter)
    header = [h.strip() for h in next(reader)]
    missing = [c for c in HEADER if c not in header]
    if missing:
        raise DataError(f"header is missing column(s) {missing}; expected {','.join(HEADER)}", line=1, path=source)
    col = {name: header.index(name) for name in HEADER}

    index: dict[str, dict[str, int]] = {d: {} for d in DOMAINS}
    out = []
    for row in reader:
        lineno = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataError(f"expected {len(header)} fields, got {len(row)}", line=lineno, path=source)
        user = row[col["user_id"]].strip()
        raw_item = row[col["item_id"]].strip()
        domain = row[col["domain"]].strip().upper()
        if not user or not raw_item:
            raise DataError("empty user_id or item_id", line=lineno, path=source)
        if domain not in DOMAINS:
            raise DataError(f"unknown domain label {row[col['domain']]!r} (expected A or B)", line=lineno, path=source)
        try:
            rating = float(row[col["rating"]])
        except ValueError:
            raise DataError(f"rating {row[col['rating']]!r} is not numeric", line=lineno, path=source) from None
        if not math.isfinite(rating):
            raise DataError(f"rating {rating} is not finite", line=lineno, path=source)
        try:
            timestamp = int(row[col["timestamp"]].strip())
        except ValueError:
            raise DataError(f"timestamp {row[col['timestamp']]!r} is not an integer", line=lineno, path=source) from None
        ids = index[domain]
        item_id = ids.setdefault(raw_item, len(ids))
        out.append(Interaction(
            user_id=user,
            item_id=item_id,
            domain=domain,
            feedback=1 if rating > rating_threshold else -1,
            timestamp=timestamp,
            rating=rating,
            raw_item=raw_item,
            seq_no=len(out),
        ))
    return out


def _fmt_rating(r: float) -> str:
    return str(int(r)) if float(r).is_integer() else repr(float(r))


def write_interactions(path, interactions: Sequence[Interaction], delimiter: str = ",") -> None:
    """Write the canonical log format read by :func:`parse_interactions`."""
    buf = io.StringIO()
    w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    w.writerow(HEADER)
    for ev in interactions:
        if ev.rating is None:
            raise DataError(f"interaction {ev} has no rating to serialise")
        w.writerow([ev.user_id, ev.raw_item if ev.raw_item is not None else ev.item_id,
                    ev.domain, _fmt_rating(ev.rating), ev.timestamp])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def build_idmap(interactions: Iterable[Interaction]) -> dict[str, dict[str, int]]:
    idmap: dict[str, dict[str, int]] = {d: {} for d in DOMAINS}
    for ev in interactions:
        raw = ev.raw_item if ev.raw_item is not None else str(ev.item_id)
        prev = idmap[ev.domain].setdefault(raw, ev.item_id)
        if prev != ev.item_id:
            raise DataError(f"raw item {raw!r} in domain {ev.domain} maps to both {prev} and {ev.item_id}")
    return {d: dict(sorted(m.items(), key=lambda kv: kv[1])) for d, m in idmap.items()}


def domain_sizes_of(idmap: dict[str, dict[str, int]]) -> tuple[int, int]:
    return (len(idmap["A"]), len(idmap["B"]))


# ---------------------------------------------------------------------------
# histories and splits


def build_histories(interactions: Iterable[Interaction], min_per_domain: int = 3,
                    max_span_seconds: int | None = None) -> list[UserHistory]:
    """Group by user, sort each user's events by timestamp (stable), and drop
    users with fewer than ``min_per_domain`` events in either domain.

    With ``max_span_seconds`` only events within that window before the
    user's latest event are kept.
    """
    if min_per_domain < 1:
        raise ValueError("min_per_domain must be >= 1")
    by_user: "OrderedDict[str, list[Interaction]]" = OrderedDict()
    for ev in interactions:
        by_user.setdefault(ev.user_id, []).append(ev)
    out = []
    for user, events in by_user.items():
        if max_span_seconds is not None:
            last = max(e.timestamp for e in events)
            events = [e for e in events if last - e.timestamp <= max_span_seconds]
        hist = UserHistory.from_events(user, events)
        if len(hist.seq_A) >= min_per_domain and len(hist.seq_B) >= min_per_domain:
            out.append(hist)
    return out


def merge_sequences(seq_a: Sequence[Interaction], seq_b: Sequence[Interaction]) -> tuple[Interaction, ...]:
    return tuple(sorted([*seq_a, *seq_b], key=_order_key))


def _as_fractions(fractions) -> tuple[Fraction, Fraction, Fraction]:
    if len(fractions) != 3:
        raise ValueError("fractions must have three entries (train, validation, test)")
    fr = tuple(Fraction(str(f)) for f in fractions)
    if any(f < 0 for f in fr):
        raise ValueError(f"fractions must be non-negative, got {fractions}")
    if sum(fr) != 1:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    return fr


def split_points(n: int, fractions=(0.8, 0.1, 0.1)) -> tuple[int, int]:
    """Cut positions for a sequence of ``n`` events (rounded down)."""
    f_train, f_val, _ = _as_fractions(fractions)
    return math.floor(n * f_train), math.floor(n * (f_train + f_val))


MIN_SLICE_EVENTS = 3


def chronological_split(histories: Sequence[UserHistory], fractions=(0.8, 0.1, 0.1),
                        domain_sizes: tuple[int, int] | None = None,
                        mode: str = "per_user") -> DatasetSplit:
    """Cut every user's merged sequence into train/validation/test slices.

    Validation and test histories carry all earlier events as context and set
    ``target_start`` to the first event of their slice. A slice is dropped for
    a user when it has no target event or when context plus slice holds fewer
    than three events.
    """
    fr = _as_fractions(fractions)
    if mode == "per_user":
        cuts = {h.user_id: split_points(len(h.seq_C), fr) for h in histories}
    elif mode == "global":
        cuts = _global_cuts(histories, fr)
    else:
        raise ValueError(f"unknown split mode {mode!r}")

    train, val, test = [], [], []
    for h in histories:
        c1, c2 = cuts[h.user_id]
        ev = h.seq_C
        n = len(ev)
        if c1 >= MIN_SLICE_EVENTS:
            train.append(UserHistory.from_events(h.user_id, ev[:c1], target_start=1))
        if c2 > c1 and c2 >= MIN_SLICE_EVENTS:
            val.append(UserHistory.from_events(h.user_id, ev[:c2], target_start=c1))
        if n > c2 and n >= MIN_SLICE_EVENTS:
            test.append(UserHistory.from_events(h.user_id, ev, target_start=c2))
    if domain_sizes is None:
        domain_sizes = infer_domain_sizes(histories)
    return DatasetSplit(train, val, test, tuple(domain_sizes))


def _global_cuts(histories, fr):
    events = sorted(((e.timestamp, e.seq_no, h.user_id, i)
                     for h in histories for i, e in enumerate(h.seq_C)))
    total = len(events)
    g1 = math.floor(total * fr[0])
    g2 = math.floor(total * (fr[0] + fr[1]))
    cuts = {h.user_id: [0, 0] for h in histories}
    for rank, (_, _, user, i) in enumerate(events):
        if rank < g1:
            cuts[user][0] = max(cuts[user][0], i + 1)
        if rank < g2:
            cuts[user][1] = max(cuts[user][1], i + 1)
    return {u: tuple(c) for u, c in cuts.items()}


def infer_domain_sizes(histories: Iterable[UserHistory]) -> tuple[int, int]:
    sizes = {"A": 0, "B": 0}
    for h in histories:
        for e in h.seq_C:
            sizes[e.domain] = max(sizes[e.domain], e.item_id + 1)
    return sizes["A"], sizes["B"]


def transition_stats(histories: Iterable[UserHistory]) -> TransitionStats:
    """Count Type-1 (+ to -) and Type-2 (- to +) feedback changes among
    adjacent cross-domain pairs of every merged sequence."""
    t1 = t2 = other = 0
    for h in histories:
        seq = h.seq_C
        for prev, nxt in zip(seq, seq[1:]):
            if prev.domain == nxt.domain:
                continue
            if prev.feedback == 1 and nxt.feedback == -1:
                t1 += 1
            elif prev.feedback == -1 and nxt.feedback == 1:
                t2 += 1
            else:
                other += 1
    return TransitionStats(t1, t2, other)


# ---------------------------------------------------------------------------
# persistence


def _event_to_list(e: Interaction) -> list:
    return [e.item_id, e.domain, e.feedback, e.timestamp, e.seq_no]


def history_to_json(h: UserHistory) -> dict:
    return {
        "user_id": h.user_id,
        "target_start": h.target_start,
        "seq_A": [_event_to_list(e) for e in h.seq_A],
        "seq_B": [_event_to_list(e) for e in h.seq_B],
        "seq_C": [_event_to_list(e) for e in h.seq_C],
    }


def history_from_json(obj: dict) -> UserHistory:
    user = obj["user_id"]
    events = [Interaction(user_id=user, item_id=int(i), domain=d, feedback=int(f), timestamp=int(t), seq_no=int(s))
              for i, d, f, t, s in obj["seq_C"]]
    return UserHistory.from_events(user, events, target_start=int(obj.get("target_start", 1)))


def save_histories(path, histories: Iterable[UserHistory]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for h in histories:
            fh.write(json.dumps(history_to_json(h), separators=(",", ":")) + "\n")


def load_histories(path) -> list[UserHistory]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(history_from_json(json.loads(line)))
            except (KeyError, ValueError, TypeError) as exc:
                raise DataError(f"bad history record: {exc}", line=lineno, path=str(path)) from None
    return out


SPLIT_NAMES = ("train", "validation", "test")


def save_split(out_dir, split: DatasetSplit, idmap: dict | None = None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in SPLIT_NAMES:
        save_histories(out_dir / name / "histories.jsonl", split.get(name))
    meta = {"domain_sizes": list(split.domain_sizes)}
    (out_dir / "dataset.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    if idmap is not None:
        (out_dir / "idmap.json").write_text(json.dumps(idmap, indent=1) + "\n", encoding="utf-8")


def load_split(data_dir) -> DatasetSplit:
    data_dir = Path(data_dir)
    meta_path = data_dir / "dataset.json"
    if not meta_path.exists():
        raise DataError(f"{data_dir} is not a prepared dataset (missing dataset.json)")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    parts = {name: load_histories(data_dir / name / "histories.jsonl") for name in SPLIT_NAMES}
    return DatasetSplit(domain_sizes=tuple(meta["domain_sizes"]), **parts)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthSpec:
    """Knobs for :func:`generate_synthetic`.

    With ``planted`` set, a user's next item in domain X is a deterministic
    function of that user's most recent X item: the same item again
    (``pattern="revisit"``) or its successor in a fixed cyclic table
    (``pattern="successor"``). Only the user's first item per domain is random.
    After a domain switch the answer lies behind the other domain's events, so
    the cross-domain attention heads are needed to recover it.
    """

    n_users: int = 1000
    items_a: int = 500
    items_b: int = 500
    min_len: int = 8
    max_len: int = 20
    type1: float = 0.1831
    type2: float = 0.1828
    planted: bool = False
    pattern: str = "revisit"
    switch_prob: float = 0.5
    positive_rate: float = 0.5
    min_per_domain: int = 3
    start_timestamp: int = 1_600_000_000
    extra: dict = field(default_factory=dict)

    def validate(self) -> None:
        problems = []
        if self.n_users < 1:
            problems.append("n_users must be >= 1")
        if self.items_a < 1 or self.items_b < 1:
            problems.append("item counts must be >= 1")
        if self.min_len < 2 or self.max_len < self.min_len:
            problems.append(f"need 2 <= min_len <= max_len, got {self.min_len}..{self.max_len}")
        if 2 * self.min_per_domain > self.min_len:
            problems.append(f"min_len {self.min_len} cannot hold {self.min_per_domain} events per domain")
        for name in ("type1", "type2", "switch_prob", "positive_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                problems.append(f"{name} must lie in [0, 1], got {v}")
        if self.type1 + self.type2 > 1.0:
            problems.append(f"type1 + type2 = {self.type1 + self.type2:.4f} exceeds 1")
        if not 0.0 < self.switch_prob < 1.0 and self.min_per_domain > 0:
            problems.append("switch_prob must be strictly between 0 and 1 so both domains occur")
        if self.pattern not in PLANTED_PATTERNS:
            problems.append(f"pattern must be one of {PLANTED_PATTERNS}, got {self.pattern!r}")
        if self.planted and (self.items_a < self.max_len or self.items_b < self.max_len):
            problems.append("planted successor cycles need at least max_len items per domain")
        if problems:
            raise DataError("infeasible synthetic spec: " + "; ".join(problems))


def _domain_sequence(rng, length: int, spec: SynthSpec) -> list[int]:
    while True:
        doms = [int(rng.integers(2))]
        for _ in range(length - 1):
            doms.append(1 - doms[-1] if rng.random() < spec.switch_prob else doms[-1])
        if min(doms.count(0), doms.count(1)) >= spec.min_per_domain:
            return doms


_STEER_WINDOW = 20.0
PLANTED_PATTERNS = ("successor", "revisit")


def generate_synthetic(spec: SynthSpec, seed: int = 0) -> list[Interaction]:
    """Generate a raw interaction log with controlled transition rates.

    At each cross-domain step the probability of flipping the feedback sign
    is steered by the running share of cross-domain pairs that start from a
    positive (or negative) event, so the realised Type-1/Type-2 rates track
    ``spec.type1``/``spec.type2``.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    sizes = (spec.items_a, spec.items_b)
    successor = []
    for n in sizes:
        order = rng.permutation(n)
        succ = np.empty(n, dtype=np.int64)
        succ[order] = np.roll(order, -1)
        successor.append(succ)

    n_cross = 0
    n_pos_start = 0
    n_type = [0, 0]
    out: list[Interaction] = []
    for u in range(spec.n_users):
        user = f"u{u:05d}"
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        doms = _domain_sequence(rng, length, spec)
        ts = spec.start_timestamp + int(rng.integers(0, 30 * 86400))
        last_item = [None, None]
        prev_fb = None
        for t, dom in enumerate(doms):
            if spec.planted and last_item[dom] is not None:
                item = last_item[dom] if spec.pattern == "revisit" else int(successor[dom][last_item[dom]])
            else:
                item = int(rng.integers(sizes[dom]))
            last_item[dom] = item

            if t > 0 and dom != doms[t - 1]:
                pi_pos = (n_pos_start + 1) / (n_cross + 2)
                if prev_fb == 1:
                    k, rate, share = 0, spec.type1, pi_pos
                    n_pos_start += 1
                else:
                    k, rate, share = 1, spec.type2, 1.0 - pi_pos
                # error feedback keeps the running count near rate * pairs
                deficit = rate * n_cross - n_type[k]
                flip = min(1.0, max(0.0, rate / share + deficit / _STEER_WINDOW)) if rate > 0 else 0.0
                n_cross += 1
                fb = -prev_fb if rng.random() < flip else prev_fb
                n_type[k] += fb != prev_fb
            else:
                fb = 1 if rng.random() < spec.positive_rate else -1
            prev_fb = fb

            rating = int(rng.integers(4, 6)) if fb == 1 else int(rng.integers(1, 4))
            label = "A" if dom == 0 else "B"
            out.append(Interaction(
                user_id=user,
                item_id=item,
                domain=label,
                feedback=fb,
                timestamp=ts,
                rating=float(rating),
                raw_item=f"{label.lower()}{item}",
                seq_no=len(out),
            ))
            ts += int(rng.integers(60, 86400))
    return out
