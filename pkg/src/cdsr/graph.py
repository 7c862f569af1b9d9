"""Signed item-item transition graphs and LightGCN-style signed propagation."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

from .data import UserHistory

LAYER_MEAN_RULES = ("k+1", "k")


@dataclass
class SignedGraph:
    """Symmetric signed adjacency over ``n`` item nodes.

    ``edges`` holds both orientations of every undirected edge. The
    normalized matrix is stored in coordinate form (``rows``, ``cols``,
    ``values``) once :func:`normalize_adjacency` has run.
    """

    n: int
    edges: dict[tuple[int, int], int] = field(default_factory=dict)
    degree: np.ndarray | None = None
    rows: np.ndarray | None = None
    cols: np.ndarray | None = None
    values: np.ndarray | None = None

    @property
    def normalized(self) -> bool:
        return self.values is not None

    @property
    def num_edges(self) -> int:
        return len(self.edges) // 2

    def dense_signs(self) -> np.ndarray:
        out = np.zeros((self.n, self.n))
        for (i, j), s in self.edges.items():
            out[i, j] = s
        return out

    def dense_normalized(self) -> np.ndarray:
        if not self.normalized:
            raise ValueError("graph is not normalized yet")
        out = np.zeros((self.n, self.n))
        out[self.rows, self.cols] = self.values
        return out

    def torch_normalized(self, dtype=torch.float64, device=None) -> torch.Tensor:
        if not self.normalized:
            raise ValueError("graph is not normalized yet")
        idx = torch.as_tensor(np.stack([self.rows, self.cols]), dtype=torch.long)
        vals = torch.as_tensor(self.values, dtype=dtype)
        return torch.sparse_coo_tensor(idx, vals, (self.n, self.n), device=device,
                                       check_invariants=False).coalesce()

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "num_edges": self.num_edges,
            "degree": [int(d) for d in self.degree] if self.degree is not None else None,
            "edges": [[i, j, s] for (i, j), s in sorted(self.edges.items()) if i < j],
        }

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n", encoding="utf-8")


def node_id(event, which: str, n_items_a: int) -> int:
    if which == "C" and event.domain == "B":
        return n_items_a + event.item_id
    return event.item_id


def build_transition_matrix(train_histories: Iterable[UserHistory], which: str,
                            domain_sizes: tuple[int, int]) -> SignedGraph:
    """Signed adjacency from consecutive items of the selected sequences.

    Every adjacent pair adds +1 when both feedbacks agree and -1 otherwise to
    a counter per unordered item pair; the edge keeps the counter's sign and
    vanishes when it sums to zero. In graph C, domain-B items are offset by
    ``|A|``.
    """
    if which not in ("A", "B", "C"):
        raise ValueError(f"which must be A, B or C, got {which!r}")
    n_a, n_b = domain_sizes
    n = {"A": n_a, "B": n_b, "C": n_a + n_b}[which]
    attr = "seq_" + which
    counter: dict[tuple[int, int], int] = defaultdict(int)
    for h in train_histories:
        seq = getattr(h, attr)
        for prev, nxt in zip(seq, seq[1:]):
            i, j = node_id(prev, which, n_a), node_id(nxt, which, n_a)
            if i == j:
                continue
            if i >= n or j >= n:
                raise ValueError(f"item node {max(i, j)} outside graph of size {n}")
            counter[(min(i, j), max(i, j))] += 1 if prev.feedback == nxt.feedback else -1
    edges = {}
    for (i, j), c in counter.items():
        if c == 0:
            continue
        s = 1 if c > 0 else -1
        edges[(i, j)] = s
        edges[(j, i)] = s
    return normalize_adjacency(SignedGraph(n=n, edges=edges))


def graph_from_edges(n: int, edges: Iterable[tuple[int, int, int]]) -> SignedGraph:
    """Build a normalized graph from an undirected ``(i, j, sign)`` list."""
    table = {}
    for i, j, s in edges:
        if i == j:
            raise ValueError("self-loops are not allowed")
        if s not in (1, -1):
            raise ValueError(f"edge sign must be +1 or -1, got {s}")
        table[(i, j)] = s
        table[(j, i)] = s
    return normalize_adjacency(SignedGraph(n=n, edges=table))


def normalize_adjacency(graph: SignedGraph) -> SignedGraph:
    """Fill in degrees and the symmetric normalization sign/sqrt(deg_i deg_j).

    Zero-degree nodes get empty rows and columns.
    """
    deg = np.zeros(graph.n, dtype=np.int64)
    for i, _ in graph.edges:
        deg[i] += 1
    keys = sorted(graph.edges)
    rows = np.array([k[0] for k in keys], dtype=np.int64)
    cols = np.array([k[1] for k in keys], dtype=np.int64)
    signs = np.array([graph.edges[k] for k in keys], dtype=np.float64)
    if keys:
        values = signs / np.sqrt(deg[rows].astype(np.float64) * deg[cols])
    else:
        values = np.zeros(0)
    graph.degree, graph.rows, graph.cols, graph.values = deg, rows, cols, values
    return graph


def layer_denominator(K: int, rule: str = "k+1") -> int:
    if rule not in LAYER_MEAN_RULES:
        raise ValueError(f"layer-mean rule must be one of {LAYER_MEAN_RULES}, got {rule!r}")
    if rule == "k+1":
        return K + 1
    # literal 1/K form; K=0 has a single term and keeps it unscaled
    return max(K, 1)


def propagate(graph, E0, K: int, layer_mean: str = "k+1"):
    """Average of ``E0, W E0, ..., W^K E0`` with W the normalized adjacency.

    ``graph`` may be a :class:`SignedGraph` or a prebuilt torch sparse matrix.
    ``E0`` may be a numpy array or a torch tensor; the result has the same
    type. Gradients flow through the torch path.
    """
    if K < 0:
        raise ValueError(f"K must be >= 0, got {K}")
    denom = layer_denominator(K, layer_mean)
    as_numpy = isinstance(E0, np.ndarray)
    x = torch.as_tensor(E0, dtype=torch.float64) if as_numpy else E0
    if isinstance(graph, SignedGraph):
        n = graph.n
        W = graph.torch_normalized(dtype=x.dtype, device=x.device) if K > 0 else None
    else:
        n = graph.shape[0]
        W = graph
    if x.dim() != 2 or x.shape[0] != n:
        raise ValueError(f"embedding matrix has shape {tuple(x.shape)}; expected ({n}, d)")
    total = x
    layer = x
    for _ in range(K):
        layer = torch.sparse.mm(W, layer)
        total = total + layer
    out = total / denom
    return out.numpy() if as_numpy else out
