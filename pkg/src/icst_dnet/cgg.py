"""Causal-graph generation from trained pair parameters.

Temporal side: each pair's first projection matrix, read as a per-offset
weight map over the filtered history. Spatial side: the per-block 2x2
matrices combined with the layer-relevance weights into one matrix per pair,
from which directed edges are decided by off-diagonal magnitude.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .dataio import TimeFilterArray
from .errors import ContractError
from .stcl import PairCausalState


@dataclass(frozen=True)
class TimeCausalityMatrix:
    pair: tuple
    weights: np.ndarray = field(repr=False)  # (P, d_model), rows follow `offsets`
    row_scores: np.ndarray  # (P,) sum of |weights| per row
    offsets: tuple  # ascending time order (deepest first)


@dataclass(frozen=True)
class LocalCausalGraph:
    pair: tuple
    block: int
    a_q: np.ndarray  # (2, 2)


@dataclass(frozen=True)
class GlobalCausalGraph:
    pair_matrices: dict  # (m, n) -> (2, 2) combined matrix
    directed_edges: tuple = ()  # (src, dst, strength), strength = raw asymmetry


def extract_time_causality(
    state: PairCausalState, filt: TimeFilterArray
) -> TimeCausalityMatrix:
    """Read the pair's first-layer weights as per-offset causal strengths.

    Row scores are L1 norms: signed sums can cancel even when a timestep
    carries much weight.
    """
    b1 = np.asarray(state.b_mats[0], dtype=np.float64).copy()
    offsets = tuple(int(o) for o in filt.ascending())
    if b1.shape[0] != len(offsets):
        raise ContractError(
            f"first-layer weights have {b1.shape[0]} rows, filter selects {len(offsets)}"
        )
    if not b1.any():
        warnings.warn(f"pair {state.pair}: all-zero weights (untrained model?)")
    return TimeCausalityMatrix(
        pair=state.pair,
        weights=b1,
        row_scores=np.abs(b1).sum(axis=1),
        offsets=offsets,
    )


def top_offsets(tcm: TimeCausalityMatrix, k: int) -> list:
    """Offsets of the k largest row scores; ties go to the more recent offset."""
    order = sorted(
        range(len(tcm.offsets)),
        key=lambda i: (-tcm.row_scores[i], -tcm.offsets[i]),
    )
    return [tcm.offsets[i] for i in order[:k]]


def local_graphs(state: PairCausalState) -> list:
    return [
        LocalCausalGraph(pair=state.pair, block=q + 1, a_q=np.asarray(a))
        for q, a in enumerate(state.a_mats)
    ]


def build_global_graph(states: list, gammas: list) -> GlobalCausalGraph:
    """Combine each pair's per-block matrices: A_mn = sum_q gamma_q * A^q_mn."""
    matrices = {}
    for state in states:
        if len(state.a_mats) != len(gammas):
            raise ContractError(
                f"pair {state.pair}: {len(state.a_mats)} blocks vs {len(gammas)} relevances"
            )
        total = np.zeros((2, 2), dtype=np.float64)
        for gamma, a in zip(gammas, state.a_mats):
            total += gamma * np.asarray(a, dtype=np.float64)
        matrices[tuple(state.pair)] = total
    return GlobalCausalGraph(pair_matrices=matrices)


def decide_edges(
    graph: GlobalCausalGraph, margin: float = 0.05, symmetric: bool = False
) -> list:
    """Directed edges from off-diagonal magnitudes of each pair matrix.

    For a pair (m, n): |a12| is m's influence on n and |a21| the reverse.
    The larger direction wins with strength = the raw magnitude difference;
    an edge is kept when its strength, normalized by the graph's largest,
    strictly exceeds `margin`. Exact ties yield no edge. With
    `symmetric=True`, both directions are emitted for any pair where both
    normalized off-diagonal magnitudes exceed 2 * margin.
    """
    if margin < 0:
        raise ContractError(f"margin must be >= 0, got {margin}")
    candidates = []
    strengths = []
    for (m, n), a in sorted(graph.pair_matrices.items()):
        s_mn, s_nm = abs(float(a[0, 1])), abs(float(a[1, 0]))
        raw = abs(s_mn - s_nm)
        strengths.append(raw)
        if symmetric:
            candidates.append(((m, n), s_mn, s_nm, raw))
        elif s_mn > s_nm:
            candidates.append(((m, n), (m, n), raw))
        elif s_nm > s_mn:
            candidates.append(((m, n), (n, m), raw))

    edges = []
    if symmetric:
        mags = [max(s12, s21) for _, s12, s21, _ in candidates]
        top = max(mags, default=0.0)
        if top > 0:
            for (m, n), s12, s21, _ in candidates:
                if s12 / top > 2 * margin and s21 / top > 2 * margin:
                    edges.append((m, n, s12))
                    edges.append((n, m, s21))
                elif s12 / top > margin and s12 > s21:
                    edges.append((m, n, abs(s12 - s21)))
                elif s21 / top > margin and s21 > s12:
                    edges.append((n, m, abs(s21 - s12)))
    else:
        top = max(strengths, default=0.0)
        if top > 0:
            for _, (src, dst), raw in candidates:
                if raw / top > margin:
                    edges.append((src, dst, raw))
    return sorted(edges)


def with_edges(
    graph: GlobalCausalGraph, margin: float = 0.05, symmetric: bool = False
) -> GlobalCausalGraph:
    return replace(
        graph, directed_edges=tuple(decide_edges(graph, margin, symmetric))
    )


def directed_edge_f1(
    predicted, truth, restrict_pairs=None
) -> float:
    """F1 between predicted directed edges and a truth edge set.

    `predicted` may contain (src, dst) or (src, dst, strength) entries.
    With `restrict_pairs` (a set of unordered (m, n) tuples), both sides are
    filtered to edges whose endpoints form one of those pairs.
    """
    pred = {(e[0], e[1]) for e in predicted}
    true = set(truth)
    if restrict_pairs is not None:
        keep = {tuple(sorted(p)) for p in restrict_pairs}
        pred = {e for e in pred if tuple(sorted(e)) in keep}
        true = {e for e in true if tuple(sorted(e)) in keep}
    if not pred and not true:
        return 1.0
    hits = len(pred & true)
    if hits == 0:
        return 0.0
    precision = hits / len(pred)
    recall = hits / len(true)
    return 2 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# exports (all deterministic: same graph -> byte-identical text)


def export_dot(graph: GlobalCausalGraph) -> str:
    nodes = sorted({r for pair in graph.pair_matrices for r in pair})
    lines = ["digraph causal {"]
    lines += [f"  {r};" for r in nodes]
    for src, dst, strength in sorted(graph.directed_edges):
        lines.append(f'  {src} -> {dst} [label="{strength:.3f}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def export_json(graph: GlobalCausalGraph, margin: float) -> str:
    by_pair = {}
    for src, dst, strength in graph.directed_edges:
        by_pair.setdefault(tuple(sorted((src, dst))), []).append(
            {"src": src, "dst": dst, "strength": strength}
        )
    pairs = []
    for (m, n), a in sorted(graph.pair_matrices.items()):
        pairs.append(
            {
                "m": m,
                "n": n,
                "A": [[float(v) for v in row] for row in a],
                "edges": sorted(
                    by_pair.get((m, n), []), key=lambda e: (e["src"], e["dst"])
                ),
            }
        )
    return json.dumps({"pairs": pairs, "margin": margin}, sort_keys=True)


def export_heatmap_csv(tcm: TimeCausalityMatrix) -> str:
    d = tcm.weights.shape[1]
    header = "offset," + ",".join(f"w_{j}" for j in range(d)) + ",row_score"
    rows = [header]
    for i, offset in enumerate(tcm.offsets):
        cells = [str(offset)]
        cells += [repr(float(v)) for v in tcm.weights[i]]
        cells.append(repr(float(tcm.row_scores[i])))
        rows.append(",".join(cells))
    return "\n".join(rows) + "\n"
