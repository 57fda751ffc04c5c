"""
Skeleton-based evaluation of a label volume.

Every ground-truth skeleton edge is classified as correct, split, merged or
omitted; omitted edges at skeleton leaves, or inside omitted stretches that
are flanked by a single segment, may be counted as correct. SegEM-style
split/merger counts are provided for comparison.
"""

from __future__ import annotations

import enum
import logging
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import networkx as nx
import numpy as np

from ffnseg.errors import BoundsError, SkeletonFormatError
from ffnseg.volume import SegmentationVolume

logger = logging.getLogger(__name__)

SKELETON_MAGIC = "# ffnseg skeletons 1"


@dataclass(eq=False)
class Skeleton:
    """
    One ground-truth object: integer voxel nodes and undirected edges between
    node indices. ``node_ids`` are the identifiers used in files.
    """

    id: int
    nodes: np.ndarray
    edges: np.ndarray
    node_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.id = int(self.id)
        self.nodes = np.asarray(self.nodes, dtype=np.int64).reshape(-1, 3)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if self.node_ids is None:
            self.node_ids = np.arange(len(self.nodes), dtype=np.int64)
        else:
            self.node_ids = np.asarray(self.node_ids, dtype=np.int64)
        if len(self.node_ids) != len(self.nodes):
            raise ValueError("node_ids and nodes differ in length")
        if len(np.unique(self.node_ids)) != len(self.node_ids):
            raise SkeletonFormatError(f"skeleton {self.id}: duplicate node id")
        if self.edges.size and (self.edges.min() < 0 or self.edges.max() >= len(self.nodes)):
            raise SkeletonFormatError(f"skeleton {self.id}: edge references a missing node")
        if not self.is_forest():
            warnings.warn(f"skeleton {self.id} contains a cycle", stacklevel=2)

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=len(self.nodes))

    def graph(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(range(len(self.nodes)))
        g.add_edges_from(map(tuple, self.edges))
        return g

    def is_forest(self) -> bool:
        if len(self.edges) == 0:
            return True
        return nx.is_forest(nx.MultiGraph(list(map(tuple, self.edges))))

    def __eq__(self, other):
        return (
            isinstance(other, Skeleton)
            and self.id == other.id
            and np.array_equal(self.nodes, other.nodes)
            and np.array_equal(self.edges, other.edges)
            and np.array_equal(self.node_ids, other.node_ids)
        )


class EdgeCategory(enum.IntEnum):
    CORRECT = 0
    SPLIT = 1
    MERGED = 2
    OMITTED = 3


@dataclass
class EdgeClassification:
    """
    Flat per-edge results over all skeletons, in skeleton then edge order.

    ``category`` holds the raw class; ``adjusted`` marks omitted edges that
    the leniency rules accept as correct.
    """

    skeleton_ids: np.ndarray
    edge_index: np.ndarray
    category: np.ndarray
    adjusted: np.ndarray

    @property
    def final(self) -> np.ndarray:
        return np.where(self.adjusted, EdgeCategory.CORRECT, self.category)

    @property
    def total(self) -> int:
        return len(self.category)

    def count(self, cat: EdgeCategory, final: bool = True) -> int:
        arr = self.final if final else self.category
        return int(np.sum(arr == cat))


def node_labels(skeleton: Skeleton, labels: np.ndarray) -> np.ndarray:
    nodes = skeleton.nodes
    if len(nodes) and (nodes.min() < 0 or np.any(nodes >= np.array(labels.shape))):
        bad = nodes[np.any((nodes < 0) | (nodes >= np.array(labels.shape)), axis=1)][0]
        raise BoundsError(f"skeleton {skeleton.id}: node {tuple(bad)} outside volume {labels.shape}")
    return labels[nodes[:, 0], nodes[:, 1], nodes[:, 2]] if len(nodes) else np.zeros(0, np.uint32)


def _labels(seg) -> np.ndarray:
    return seg.labels if isinstance(seg, SegmentationVolume) else np.asarray(seg)


def classify_edges(skeletons, segmentation) -> EdgeClassification:
    """
    Raw edge classes with precedence omitted, split, merged, correct.

    An edge is merged when the segment holding it also holds a node of a
    different skeleton.
    """
    labels = _labels(segmentation)
    per_skel = [node_labels(s, labels) for s in skeletons]
    touched = defaultdict(set)
    for s, nl in zip(skeletons, per_skel):
        for lab in np.unique(nl):
            if lab != 0:
                touched[int(lab)].add(s.id)
    sk_ids, e_idx, cats = [], [], []
    for s, nl in zip(skeletons, per_skel):
        for i, (u, v) in enumerate(s.edges):
            a, b = int(nl[u]), int(nl[v])
            if a == 0 or b == 0:
                cat = EdgeCategory.OMITTED
            elif a != b:
                cat = EdgeCategory.SPLIT
            elif len(touched[a]) > 1:
                cat = EdgeCategory.MERGED
            else:
                cat = EdgeCategory.CORRECT
            sk_ids.append(s.id)
            e_idx.append(i)
            cats.append(cat)
    n = len(cats)
    return EdgeClassification(
        np.array(sk_ids, dtype=np.int64),
        np.array(e_idx, dtype=np.int64),
        np.array(cats, dtype=np.int64),
        np.zeros(n, dtype=bool),
    )


def adjust_omitted(classification: EdgeClassification, skeletons, segmentation) -> EdgeClassification:
    """
    Accept omitted edges as correct if (a) an endpoint is a leaf, or (b) the
    connected stretch of omitted edges containing it touches at least two
    labelled nodes and all of those share one segment ID.
    """
    labels = _labels(segmentation)
    adjusted = classification.adjusted.copy()
    start = 0
    for s in skeletons:
        n_edges = len(s.edges)
        cats = classification.category[start:start + n_edges]
        omitted = np.flatnonzero(cats == EdgeCategory.OMITTED)
        if len(omitted):
            nl = node_labels(s, labels)
            deg = s.degrees()
            g = nx.Graph()
            for i in omitted:
                u, v = s.edges[i]
                g.add_edge(int(u), int(v), index=int(i))
                if deg[u] == 1 or deg[v] == 1:
                    adjusted[start + i] = True
            for comp in nx.connected_components(g):
                flank = [int(nl[n]) for n in comp if nl[n] != 0]
                if len(flank) >= 2 and len(set(flank)) == 1:
                    for _, _, idx in g.subgraph(comp).edges(data="index"):
                        adjusted[start + idx] = True
        start += n_edges
    return EdgeClassification(
        classification.skeleton_ids, classification.edge_index, classification.category, adjusted
    )


@dataclass(frozen=True)
class EvaluationReport:
    edge_accuracy: float
    merged: float
    split: float
    omitted_adjusted: float
    omitted_raw: float
    total_edges: int

    COLUMNS = (
        ("edge_accuracy", "Edge accuracy [%]"),
        ("merged", "Merged edges [%]"),
        ("split", "Split edges [%]"),
        ("omitted_adjusted", "Omitted edges (adjusted) [%]"),
        ("omitted_raw", "Omitted edges (raw) [%]"),
    )

    def row(self) -> tuple[float, ...]:
        return tuple(getattr(self, k) for k, _ in self.COLUMNS)

    def to_kv(self) -> str:
        lines = [f"{k} = {getattr(self, k):.6f}" for k, _ in self.COLUMNS]
        lines.append(f"total_edges = {self.total_edges}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_kv(cls, text: str) -> "EvaluationReport":
        kv = {}
        for line in text.splitlines():
            if "=" in line:
                k, v = (s.strip() for s in line.split("=", 1))
                kv[k] = v
        vals = {k: float(kv[k]) for k, _ in cls.COLUMNS}
        return cls(**vals, total_edges=int(kv["total_edges"]))

    def to_table(self, name: str = "Segmentation") -> str:
        heads = [h for _, h in self.COLUMNS]
        width = max(len(name), 12)
        out = [" | ".join([" " * width] + heads)]
        cells = [f"{v:>{len(h)}.1f}" for v, h in zip(self.row(), heads)]
        out.append(" | ".join([f"{name:<{width}}"] + cells))
        out.append(f"({self.total_edges} ground-truth edges)")
        return "\n".join(out) + "\n"


def edge_accuracy(classification: EdgeClassification) -> EvaluationReport:
    n = classification.total
    if n == 0:
        raise ValueError("no skeleton edges to evaluate")
    raw_omit = classification.category == EdgeCategory.OMITTED

    def pct(mask) -> float:
        return 100.0 * float(np.sum(mask)) / n

    return EvaluationReport(
        edge_accuracy=pct(classification.final == EdgeCategory.CORRECT),
        merged=pct(classification.category == EdgeCategory.MERGED),
        split=pct(classification.category == EdgeCategory.SPLIT),
        omitted_adjusted=pct(raw_omit & ~classification.adjusted),
        omitted_raw=pct(raw_omit),
        total_edges=n,
    )


def evaluate(skeletons, segmentation) -> EvaluationReport:
    """classify, adjust and tally in one call."""
    raw = classify_edges(skeletons, segmentation)
    return edge_accuracy(adjust_omitted(raw, skeletons, segmentation))


def pool_reports(reports) -> EvaluationReport:
    """Combine per-volume reports as if their edges had been tallied together."""
    reports = list(reports)
    n = sum(r.total_edges for r in reports)
    if n == 0:
        raise ValueError("no skeleton edges to evaluate")
    vals = {
        k: sum(getattr(r, k) * r.total_edges for r in reports) / n
        for k, _ in EvaluationReport.COLUMNS
    }
    return EvaluationReport(**vals, total_edges=n)


def segem_counts(skeletons, segmentation, k: int = 1) -> tuple[int, int]:
    """
    Split and merger counts from skeleton/segment correspondence: a skeleton
    corresponds to a segment holding at least ``k`` of its nodes.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    labels = _labels(segmentation)
    per_segment = defaultdict(int)
    splits = 0
    for s in skeletons:
        ids, counts = np.unique(node_labels(s, labels), return_counts=True)
        matched = [int(i) for i, c in zip(ids, counts) if i != 0 and c >= k]
        splits += max(0, len(matched) - 1)
        for i in matched:
            per_segment[i] += 1
    mergers = sum(max(0, n - 1) for n in per_segment.values())
    return splits, mergers


# --- file format ---

def save_skeletons(skeletons, path) -> Path:
    """
    Text format::

        # ffnseg skeletons 1
        skeleton 3
        node 0 12 40 7
        node 1 13 40 7
        edge 0 1
        end
    """
    lines = [SKELETON_MAGIC]
    for s in skeletons:
        lines.append(f"skeleton {s.id}")
        for nid, (x, y, z) in zip(s.node_ids, s.nodes):
            lines.append(f"node {nid} {x} {y} {z}")
        for u, v in s.edges:
            lines.append(f"edge {s.node_ids[u]} {s.node_ids[v]}")
        lines.append("end")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    return path


def load_skeletons(path) -> list[Skeleton]:
    path = Path(path)
    skeletons = []
    current = None
    for n, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        try:
            if tok[0] == "skeleton" and len(tok) == 2:
                if current is not None:
                    raise SkeletonFormatError(f"{path}:{n}: 'skeleton' before 'end'")
                current = dict(id=int(tok[1]), ids=[], nodes=[], edges=[], index={})
            elif current is None:
                raise SkeletonFormatError(f"{path}:{n}: {tok[0]!r} outside a skeleton block")
            elif tok[0] == "node" and len(tok) == 5:
                nid = int(tok[1])
                if nid in current["index"]:
                    raise SkeletonFormatError(
                        f"{path}:{n}: duplicate node id {nid} in skeleton {current['id']}"
                    )
                current["index"][nid] = len(current["ids"])
                current["ids"].append(nid)
                current["nodes"].append([int(t) for t in tok[2:]])
            elif tok[0] == "edge" and len(tok) == 3:
                a, b = int(tok[1]), int(tok[2])
                missing = [x for x in (a, b) if x not in current["index"]]
                if missing:
                    raise SkeletonFormatError(
                        f"{path}:{n}: edge {a} {b} in skeleton {current['id']} references "
                        f"missing node {missing[0]}"
                    )
                current["edges"].append((current["index"][a], current["index"][b]))
            elif tok[0] == "end" and len(tok) == 1:
                skeletons.append(
                    Skeleton(current["id"], current["nodes"], current["edges"], current["ids"])
                )
                current = None
            else:
                raise SkeletonFormatError(f"{path}:{n}: cannot parse {raw!r}")
        except ValueError as exc:
            raise SkeletonFormatError(f"{path}:{n}: bad number in {raw!r}") from exc
    if current is not None:
        raise SkeletonFormatError(f"{path}: skeleton {current['id']} not closed with 'end'")
    return skeletons
