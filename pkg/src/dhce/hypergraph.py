"""Per-visit disease hypergraphs and the chronic/acute split between visits."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .ehr import DiseaseVocabulary, PatientRecord


def multi_hot(indices: Iterable[int], size: int) -> np.ndarray:
    bits = np.zeros(size, dtype=np.uint8)
    bits[list(indices)] = 1
    return bits


def hyperedge_mean_operator(incidence: np.ndarray) -> np.ndarray:
    """``Dv^-1 H De^-1 H^T``: node <- mean of incident edges <- mean of members."""
    H = np.asarray(incidence, dtype=np.float64)
    if H.ndim != 2:
        raise ValueError("incidence must be 2-D")
    edge_deg = H.sum(axis=0)
    node_deg = H.sum(axis=1)
    if (edge_deg == 0).any():
        raise ValueError("incidence has an empty hyperedge")
    if (node_deg == 0).any():
        raise ValueError("incidence has a node in no hyperedge")
    return (H / node_deg[:, None]) @ (H / edge_deg).T


@dataclass(frozen=True)
class VisitHypergraph:
    """Nodes are code indices in ascending order; ``incidence`` is nodes x edges."""

    nodes: tuple[int, ...]
    incidence: np.ndarray

    @property
    def n_edges(self) -> int:
        return self.incidence.shape[1]

    @property
    def empty(self) -> bool:
        return not self.nodes

    @classmethod
    def empty_graph(cls) -> "VisitHypergraph":
        return cls((), np.zeros((0, 0), dtype=np.uint8))

    @cached_property
    def mean_operator(self) -> np.ndarray:
        """n x n matrix taking node rows to their two-stage hyperedge mean."""
        return hyperedge_mean_operator(self.incidence)

    def edge_members(self) -> list[list[int]]:
        return [[self.nodes[i] for i in np.flatnonzero(col)] for col in self.incidence.T]


@dataclass(frozen=True)
class DiseasePartition:
    chronic: np.ndarray
    acute: np.ndarray

    @property
    def current(self) -> np.ndarray:
        return self.chronic | self.acute


@dataclass(frozen=True)
class HypergraphEntry:
    graph: VisitHypergraph
    partition: DiseasePartition
    chronic_graph: VisitHypergraph
    acute_graph: VisitHypergraph


@dataclass(frozen=True)
class DynamicHypergraph:
    entries: tuple[HypergraphEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, t: int) -> HypergraphEntry:
        return self.entries[t]


def build_visit_hypergraph(codes: Iterable[int]) -> VisitHypergraph:
    """The visit as a single hyperedge over its (deduplicated) codes."""
    nodes = tuple(sorted(set(int(c) for c in codes)))
    if not nodes:
        raise ValueError("a visit hypergraph needs at least one code")
    return VisitHypergraph(nodes, np.ones((len(nodes), 1), dtype=np.uint8))


def partition_diseases(current: np.ndarray, previous: np.ndarray | None = None) -> DiseasePartition:
    """Chronic = present now and in the previous visit; acute = present now only."""
    cur = np.asarray(current, dtype=np.uint8)
    if previous is None:
        return DiseasePartition(np.zeros_like(cur), cur.copy())
    prev = np.asarray(previous, dtype=np.uint8)
    if prev.shape != cur.shape:
        raise ValueError(f"multi-hot length mismatch: {cur.shape} vs {prev.shape}")
    return DiseasePartition(cur & prev, cur & (1 - prev))


def build_subgraphs(partition: DiseasePartition) -> tuple[VisitHypergraph, VisitHypergraph]:
    """Chronic graph: one edge over all chronic codes.

    Acute graph: one edge per acute code, joining it with every chronic code.
    """
    chronic = np.flatnonzero(partition.chronic).tolist()
    acute = np.flatnonzero(partition.acute).tolist()
    chronic_graph = build_visit_hypergraph(chronic) if chronic else VisitHypergraph.empty_graph()
    if not acute:
        return chronic_graph, VisitHypergraph.empty_graph()
    nodes = tuple(sorted(chronic + acute))
    pos = {c: i for i, c in enumerate(nodes)}
    inc = np.zeros((len(nodes), len(acute)), dtype=np.uint8)
    for j, a in enumerate(acute):
        inc[pos[a], j] = 1
        for c in chronic:
            inc[pos[c], j] = 1
    return chronic_graph, VisitHypergraph(nodes, inc)


def build_dynamic_hypergraph(
    patient: PatientRecord | Sequence[Iterable[int]],
    vocab: DiseaseVocabulary | int,
    chronic_window: int = 1,
) -> DynamicHypergraph:
    """One hypergraph entry per visit.

    ``patient`` may be a record (codes looked up in ``vocab``) or a list of
    code-index sets with ``vocab`` giving the vocabulary size. A code counts
    as chronic if it appears in any of the ``chronic_window`` preceding visits.
    """
    if chronic_window < 1:
        raise ValueError("chronic_window must be >= 1")
    if isinstance(patient, PatientRecord):
        visits = [vocab.encode(v.codes) for v in patient.visits]
    else:
        visits = [list(v) for v in patient]
    size = len(vocab) if isinstance(vocab, DiseaseVocabulary) else int(vocab)
    hots = [multi_hot(v, size) for v in visits]
    entries = []
    for t, codes in enumerate(visits):
        if t == 0:
            previous = None
        else:
            previous = np.bitwise_or.reduce(hots[max(0, t - chronic_window) : t])
        part = partition_diseases(hots[t], previous)
        chronic_graph, acute_graph = build_subgraphs(part)
        entries.append(HypergraphEntry(build_visit_hypergraph(codes), part, chronic_graph, acute_graph))
    return DynamicHypergraph(tuple(entries))


def format_entry(entry: HypergraphEntry, vocab: DiseaseVocabulary | None = None) -> str:
    """Aligned text rendering of one visit's graphs, for debugging."""

    def label(i: int) -> str:
        return vocab.codes[i] if vocab is not None else str(i)

    def table(title: str, g: VisitHypergraph) -> list[str]:
        if g.empty:
            return [f"{title}: (empty)"]
        width = max(len(label(n)) for n in g.nodes)
        head = " " * width + " " + " ".join(f"e{j}" for j in range(g.n_edges))
        lines = [f"{title}: {len(g.nodes)} node(s), {g.n_edges} edge(s)", "  " + head]
        for n, row in zip(g.nodes, g.incidence):
            lines.append("  " + label(n).ljust(width) + " " + " ".join(f"{v:>2d}" for v in row))
        return lines

    chronic = [label(i) for i in np.flatnonzero(entry.partition.chronic)]
    acute = [label(i) for i in np.flatnonzero(entry.partition.acute)]
    out = [f"chronic: {chronic}", f"acute:   {acute}"]
    out += table("visit", entry.graph)
    out += table("chronic graph", entry.chronic_graph)
    out += table("acute graph", entry.acute_graph)
    return "\n".join(out)
