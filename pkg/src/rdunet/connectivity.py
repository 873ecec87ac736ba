"""Layer-dependency graphs of a block: backpropagation distance, its maximum,
connection counts, and the gain of scaled shortcuts."""

from __future__ import annotations

import csv
import io
import math
from collections import deque
from dataclasses import dataclass

import numpy as np

SCHEMES = ("full-dense", "log-dense", "chain", "residual-chain")
ALIASES = {"full": "full-dense", "dense": "full-dense", "log": "log-dense", "residual": "residual-chain"}

UNREACHABLE = -1


def _canonical(scheme: str) -> str:
    scheme = ALIASES.get(scheme, scheme)
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    return scheme


def _sources(scheme: str, i: int) -> list[int]:
    """Layers read directly by layer ``i`` (layer 0 is the block input)."""
    if scheme == "full-dense":
        return list(range(i))
    if scheme == "log-dense":
        return [i - (1 << k) for k in range(i.bit_length())]
    if scheme == "chain":
        return [i - 1]
    # two-layer residual units: every even layer also reads its unit's input
    return [i - 1, i - 2] if i % 2 == 0 else [i - 1]


@dataclass(frozen=True)
class ConnectivityGraph:
    L: int
    scheme: str
    edges: frozenset     # (i, j): layer i reads layer j, j < i

    def reads(self, i: int) -> list[int]:
        return sorted((j for (a, j) in self.edges if a == i), reverse=True)


def build_graph(L: int, scheme: str) -> ConnectivityGraph:
    if L < 1:
        raise ValueError("L must be >= 1")
    scheme = _canonical(scheme)
    edges = frozenset((i, j) for i in range(1, L + 1) for j in _sources(scheme, i))
    return ConnectivityGraph(L, scheme, edges)


def _adjacency(g: ConnectivityGraph) -> list[list[int]]:
    adj = [[] for _ in range(g.L + 1)]
    for i, j in sorted(g.edges):
        adj[i].append(j)
    return adj


def _bfs(adj: list[list[int]], src: int) -> list[int]:
    dist = [UNREACHABLE] * len(adj)
    dist[src] = 0
    queue = deque([src])
    while queue:
        v = queue.popleft()
        for w in adj[v]:
            if dist[w] == UNREACHABLE:
                dist[w] = dist[v] + 1
                queue.append(w)
    return dist


def backprop_distance(g: ConnectivityGraph, i: int, j: int) -> int:
    """Shortest directed path length from layer ``i`` down to layer ``j``; -1 if unreachable."""
    if not (0 <= j < i <= g.L):
        raise ValueError(f"need 0 <= j < i <= {g.L}, got i={i}, j={j}")
    return _bfs(_adjacency(g), i)[j]


def distance_matrix(g: ConnectivityGraph) -> np.ndarray:
    """``D[i, j]`` = BD(i, j) for j < i, -1 elsewhere or when unreachable."""
    adj = _adjacency(g)
    d = np.full((g.L + 1, g.L + 1), UNREACHABLE, dtype=np.int64)
    for i in range(1, g.L + 1):
        row = _bfs(adj, i)
        d[i, :i] = row[:i]
    return d


def max_backprop_distance(g: ConnectivityGraph) -> int:
    d = distance_matrix(g)
    lower = d[np.tril_indices(g.L + 1, k=-1)]
    if (lower == UNREACHABLE).any():
        raise RuntimeError(f"{g.scheme} graph with L={g.L} has an unreachable pair")
    return int(lower.max())


def mbd_profile(scheme: str, L_max: int) -> np.ndarray:
    """MBD for every L in 1..L_max (index 0 unused).

    Edges only point to lower layers, so a shortest path from i to j stays
    inside [j, i] and BD(i, j) does not depend on L. One all-pairs pass on the
    largest graph therefore serves every smaller L.
    """
    d = distance_matrix(build_graph(L_max, scheme))
    if (d[np.tril_indices(L_max + 1, k=-1)] == UNREACHABLE).any():
        raise RuntimeError(f"{scheme} graph has an unreachable pair")
    row_max = d.max(axis=1)
    out = np.maximum.accumulate(row_max)
    out[0] = 0
    return out


def connection_count(L: int, scheme: str) -> int:
    """Number of edges of the scheme's graph on layers 0..L."""
    if L < 1:
        raise ValueError("L must be >= 1")
    scheme = _canonical(scheme)
    if scheme == "full-dense":
        return L * (L + 1) // 2
    if scheme == "log-dense":
        return sum(i.bit_length() for i in range(1, L + 1))
    if scheme == "chain":
        return L
    return L + L // 2


def log_dense_bound(L: int) -> float:
    """Upper bound L + L*log2(L) on log-dense connections."""
    return L + L * math.log2(L)


def shortcut_gain(lam, l: int, L: int) -> float:
    """Product of shortcut scales from unit ``l`` to ``L - 1``.

    ``lam`` is a constant or a sequence indexed by unit (length >= L).
    """
    if not L > l >= 0:
        raise ValueError(f"need L > l >= 0, got l={l}, L={L}")
    if np.ndim(lam) == 0:
        return float(lam) ** (L - l)
    lam = np.asarray(lam, dtype=np.float64)
    return float(np.prod(lam[l:L]))


def analysis_rows(schemes, L_values) -> list[dict]:
    rows = []
    for scheme in schemes:
        scheme = _canonical(scheme)
        L_values = list(L_values)
        profile = mbd_profile(scheme, max(L_values))
        for L in L_values:
            rows.append({"scheme": scheme, "L": L, "edges": connection_count(L, scheme), "MBD": int(profile[L])})
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["scheme", "L", "edges", "MBD"], lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def rows_to_table(rows: list[dict]) -> str:
    lines = [f"{'scheme':<16}{'L':>6}{'edges':>8}{'MBD':>6}"]
    lines += [f"{r['scheme']:<16}{r['L']:>6}{r['edges']:>8}{r['MBD']:>6}" for r in rows]
    return "\n".join(lines) + "\n"
