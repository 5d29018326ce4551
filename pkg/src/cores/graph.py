"""Graphs, TU-format ingestion, the BA-Shapes generator, folds and batching."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Sequence

import networkx as nx
import numpy as np
import scipy.sparse as sp

from .tensor import ShapeError

logger = logging.getLogger(__name__)


class IngestionError(FileNotFoundError):
    pass


class FormatError(ValueError):
    pass


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


def canonical_edges(pairs, num_nodes: int) -> np.ndarray:
    """Undirected pairs as sorted unique (u, v) rows with u < v; self-loops dropped."""
    arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(arr) and (arr.min() < 0 or arr.max() >= num_nodes):
        raise ValueError(f"edge endpoint outside [0, {num_nodes})")
    arr = np.sort(arr, axis=1)
    arr = arr[arr[:, 0] != arr[:, 1]]
    if len(arr) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(arr, axis=0)


@dataclass(frozen=True, eq=False)
class Graph:
    num_nodes: int
    edges: np.ndarray
    node_features: np.ndarray
    label: int
    edge_features: np.ndarray | None = None
    node_labels: np.ndarray | None = None
    edge_labels: np.ndarray | None = None
    motif_mask: np.ndarray | None = None

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        feats = np.asarray(self.node_features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != self.num_nodes:
            raise ShapeError(f"node_features shape {feats.shape} does not match {self.num_nodes} nodes")
        if len(edges):
            if edges.min() < 0 or edges.max() >= self.num_nodes:
                raise ValueError("edge endpoint out of range")
            if np.any(edges[:, 0] >= edges[:, 1]):
                raise ValueError("edges must be canonical (u < v, no self-loops)")
            if len(np.unique(edges, axis=0)) != len(edges):
                raise ValueError("duplicate edges")
        object.__setattr__(self, "edges", _frozen(edges))
        object.__setattr__(self, "node_features", _frozen(feats))
        for name in ("edge_features", "node_labels", "edge_labels", "motif_mask"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, _frozen(np.asarray(value)))

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def num_features(self) -> int:
        return self.node_features.shape[1]

    def same_as(self, other: Graph) -> bool:
        def eq(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and np.array_equal(a, b)

        return (
            self.num_nodes == other.num_nodes
            and self.label == other.label
            and eq(self.edges, other.edges)
            and eq(self.node_features, other.node_features)
            and eq(self.edge_features, other.edge_features)
        )


@dataclass(frozen=True, eq=False)
class Subgraph:
    parent: Graph
    kept_nodes: np.ndarray
    kept_edges: np.ndarray

    @property
    def num_kept_nodes(self) -> int:
        return int(self.kept_nodes.sum())

    @property
    def num_kept_edges(self) -> int:
        return int(self.kept_edges.sum())

    @property
    def node_ratio(self) -> float:
        return self.num_kept_nodes / self.parent.num_nodes

    @property
    def edge_ratio(self) -> float:
        if self.parent.num_edges == 0:
            return 1.0
        return self.num_kept_edges / self.parent.num_edges

    def is_empty(self, mode: str) -> bool:
        """An action is invalid when nothing is left in the acting dimension."""
        if mode == "node":
            return self.num_kept_nodes == 0
        return self.parent.num_edges > 0 and self.num_kept_edges == 0

    def ratio(self, mode: str) -> float:
        return self.node_ratio if mode == "node" else self.edge_ratio

    def to_graph(self) -> Graph:
        p = self.parent
        keep = np.flatnonzero(self.kept_nodes)
        remap = np.full(p.num_nodes, -1, dtype=np.int64)
        remap[keep] = np.arange(len(keep))
        edges = remap[p.edges[self.kept_edges]]
        ef = p.edge_features[self.kept_edges] if p.edge_features is not None else None
        return Graph(
            num_nodes=len(keep),
            edges=edges,
            node_features=p.node_features[keep],
            label=p.label,
            edge_features=ef,
            motif_mask=p.motif_mask[keep] if p.motif_mask is not None else None,
        )


def apply_action(graph: Graph, mode: str, action) -> Subgraph:
    """Turn a removal mask (1 = remove) into a subgraph of ``graph``."""
    action = np.asarray(action).astype(bool).reshape(-1)
    if mode == "node":
        if len(action) != graph.num_nodes:
            raise ShapeError(f"node action has length {len(action)}, graph has {graph.num_nodes} nodes")
        kept_nodes = ~action
        if graph.num_edges:
            kept_edges = kept_nodes[graph.edges[:, 0]] & kept_nodes[graph.edges[:, 1]]
        else:
            kept_edges = np.zeros(0, dtype=bool)
    elif mode == "edge":
        if len(action) != graph.num_edges:
            raise ShapeError(f"edge action has length {len(action)}, graph has {graph.num_edges} edges")
        kept_nodes = np.ones(graph.num_nodes, dtype=bool)
        kept_edges = ~action
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return Subgraph(graph, _frozen(kept_nodes), _frozen(kept_edges))


# --- TU format --------------------------------------------------------------


def _read_ints(path: Path) -> np.ndarray:
    text = path.read_text().split()
    return np.array([int(float(t.strip(","))) for t in text], dtype=np.int64)


def _read_rows(path: Path) -> list[list[float]]:
    rows = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if line:
            rows.append([float(x) for x in line.split(",")])
    return rows


def _one_hot(values: np.ndarray) -> np.ndarray:
    uniq = np.unique(values)
    idx = np.searchsorted(uniq, values)
    out = np.zeros((len(values), len(uniq)))
    out[np.arange(len(values)), idx] = 1.0
    return out


def parse_tu_dataset(directory, name: str) -> list[Graph]:
    """Read a dataset in the TU Dortmund plain-text layout.

    Node features come from ``_node_attributes.txt`` when present, otherwise
    from one-hot encoded node labels, otherwise a constant 1. Graph labels
    are remapped to ``0..K-1`` in sorted order.
    """
    directory = Path(directory)

    def need(suffix: str) -> Path:
        p = directory / f"{name}_{suffix}.txt"
        if not p.exists():
            raise IngestionError(f"missing dataset file {p}")
        return p

    a_path = need("A")
    indicator = _read_ints(need("graph_indicator"))
    raw_labels = _read_ints(need("graph_labels"))
    num_graphs = len(raw_labels)
    total_nodes = len(indicator)
    if total_nodes and (indicator.min() < 1 or indicator.max() > num_graphs):
        raise FormatError(f"graph indicator references graphs outside 1..{num_graphs}")

    node_labels = None
    nl_path = directory / f"{name}_node_labels.txt"
    if nl_path.exists():
        node_labels = _read_ints(nl_path)
        if len(node_labels) != total_nodes:
            raise FormatError(f"{nl_path.name}: {len(node_labels)} rows for {total_nodes} nodes")
    attr_path = directory / f"{name}_node_attributes.txt"
    if attr_path.exists():
        features = np.array(_read_rows(attr_path), dtype=np.float64)
        if len(features) != total_nodes:
            raise FormatError(f"{attr_path.name}: {len(features)} rows for {total_nodes} nodes")
    elif node_labels is not None:
        features = _one_hot(node_labels)
    else:
        features = np.ones((total_nodes, 1))

    motif = None
    mm_path = directory / f"{name}_motif_mask.txt"
    if mm_path.exists():
        motif = _read_ints(mm_path).astype(bool)
        if len(motif) != total_nodes:
            raise FormatError(f"{mm_path.name}: {len(motif)} rows for {total_nodes} nodes")

    pairs = []
    for lineno, line in enumerate(a_path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            u, v = (int(x) for x in line.split(","))
        except ValueError:
            raise FormatError(f"{a_path.name}:{lineno}: expected 'u, v'") from None
        if not (1 <= u <= total_nodes and 1 <= v <= total_nodes):
            raise FormatError(f"{a_path.name}:{lineno}: edge ({u}, {v}) references a nonexistent node")
        if indicator[u - 1] != indicator[v - 1]:
            raise FormatError(f"{a_path.name}:{lineno}: edge ({u}, {v}) crosses graphs")
        pairs.append((u - 1, v - 1, lineno))

    edge_labels = None
    el_path = directory / f"{name}_edge_labels.txt"
    if el_path.exists():
        edge_labels = _read_ints(el_path)
        if len(edge_labels) != len(pairs):
            raise FormatError(f"{el_path.name}: {len(edge_labels)} rows for {len(pairs)} edges")
    edge_onehot = _one_hot(edge_labels) if edge_labels is not None else None

    label_values = np.unique(raw_labels)
    labels = np.searchsorted(label_values, raw_labels)

    graph_of_node = indicator - 1
    order = np.argsort(graph_of_node, kind="stable")
    starts = np.searchsorted(graph_of_node[order], np.arange(num_graphs))
    counts = np.bincount(graph_of_node, minlength=num_graphs)
    local = np.empty(total_nodes, dtype=np.int64)
    for g in range(num_graphs):
        members = order[starts[g] : starts[g] + counts[g]]
        local[members] = np.arange(len(members))

    per_graph_edges: list[dict[tuple[int, int], int]] = [dict() for _ in range(num_graphs)]
    self_loops = 0
    for k, (u, v, _) in enumerate(pairs):
        g = graph_of_node[u]
        a, b = sorted((int(local[u]), int(local[v])))
        if a == b:
            self_loops += 1
            continue
        per_graph_edges[g].setdefault((a, b), k)
    if self_loops:
        logger.warning("%s: dropped %d self-loops", name, self_loops)

    graphs = []
    for g in range(num_graphs):
        members = order[starts[g] : starts[g] + counts[g]]
        emap = per_graph_edges[g]
        keys = sorted(emap)
        edges = np.array(keys, dtype=np.int64).reshape(-1, 2)
        line_idx = np.array([emap[k] for k in keys], dtype=np.int64)
        graphs.append(
            Graph(
                num_nodes=len(members),
                edges=edges,
                node_features=features[members],
                label=int(labels[g]),
                edge_features=edge_onehot[line_idx] if edge_onehot is not None else None,
                node_labels=node_labels[members] if node_labels is not None else None,
                edge_labels=edge_labels[line_idx] if edge_labels is not None else None,
                motif_mask=motif[members] if motif is not None else None,
            )
        )
    return graphs


def write_tu_dataset(graphs: Sequence[Graph], directory, name: str) -> None:
    """Serialize graphs in TU layout; every undirected edge is written both ways."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    a_lines, el_lines, ind_lines, nl_lines, attr_lines, gl_lines = [], [], [], [], [], []
    offset = 0
    with_node_labels = all(g.node_labels is not None for g in graphs)
    with_edge_labels = all(g.edge_labels is not None for g in graphs)
    with_motif = bool(graphs) and all(g.motif_mask is not None for g in graphs)
    motif_lines = []
    for gid, g in enumerate(graphs, start=1):
        for k, (u, v) in enumerate(g.edges):
            for a, b in ((u, v), (v, u)):
                a_lines.append(f"{a + offset + 1}, {b + offset + 1}")
                if with_edge_labels:
                    el_lines.append(str(int(g.edge_labels[k])))
        ind_lines.extend([str(gid)] * g.num_nodes)
        if with_node_labels:
            nl_lines.extend(str(int(x)) for x in g.node_labels)
        else:
            attr_lines.extend(", ".join(repr(float(x)) for x in row) for row in g.node_features)
        if with_motif:
            motif_lines.extend(str(int(x)) for x in g.motif_mask)
        gl_lines.append(str(g.label))
        offset += g.num_nodes

    def dump(suffix, lines):
        (directory / f"{name}_{suffix}.txt").write_text("".join(line + "\n" for line in lines))

    dump("A", a_lines)
    dump("graph_indicator", ind_lines)
    dump("graph_labels", gl_lines)
    if with_node_labels:
        dump("node_labels", nl_lines)
    else:
        dump("node_attributes", attr_lines)
    if with_edge_labels:
        dump("edge_labels", el_lines)
    if with_motif:
        # not part of the TU layout; ground-truth explanation mask for synthetic data
        dump("motif_mask", motif_lines)


# --- synthetic motifs -------------------------------------------------------

HOUSE_EDGES = ((0, 1), (1, 2), (2, 3), (0, 3), (0, 4), (1, 4), (0, 2), (1, 3))
CYCLE_EDGES = ((0, 1), (1, 2), (2, 3), (3, 4), (0, 4))


def generate_ba_shapes(num_graphs: int, base_nodes: int, seed: int) -> list[Graph]:
    """Barabasi-Albert trees (m=1) with a house (label 0) or 5-cycle (label 1) attached.

    The motif hangs off the base by a single bridging edge. Node features
    are ``[1, degree]``; ``motif_mask`` marks the five motif nodes.
    """
    if base_nodes < 6:
        raise ValueError(f"base_nodes must be at least 6, got {base_nodes}")
    rng = np.random.default_rng(seed)
    labels = np.array([0] * ((num_graphs + 1) // 2) + [1] * (num_graphs // 2))
    rng.shuffle(labels)
    graphs = []
    for label in labels:
        base = nx.barabasi_albert_graph(base_nodes, 1, seed=int(rng.integers(2**31)))
        motif = HOUSE_EDGES if label == 0 else CYCLE_EDGES
        pairs = list(base.edges())
        pairs += [(base_nodes + u, base_nodes + v) for u, v in motif]
        anchor = int(rng.integers(base_nodes))
        pairs.append((anchor, base_nodes + int(rng.integers(5))))
        n = base_nodes + 5
        edges = canonical_edges(pairs, n)
        degree = np.bincount(edges.ravel(), minlength=n).astype(np.float64)
        feats = np.column_stack([np.ones(n), degree])
        mask = np.zeros(n, dtype=bool)
        mask[base_nodes:] = True
        graphs.append(Graph(n, edges, feats, int(label), motif_mask=mask))
    return graphs


# --- splits -----------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]
    fold_index: int = 0


def split_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    """Floor each share, then hand leftovers to the largest fractional parts."""
    raw = [n * r for r in ratios]
    sizes = [math.floor(x + 1e-9) for x in raw]
    rest = n - sum(sizes)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[:rest]:
        sizes[i] += 1
    return sizes


def split_folds(
    dataset: Sequence[Graph], ratios: Sequence[float], num_folds: int, seed: int
) -> list[DatasetSplit]:
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    if len(ratios) != 3:
        raise ValueError("expected (train, val, test) ratios")
    if num_folds < 1:
        raise ValueError("num_folds must be at least 1")
    n = len(dataset)
    rng = np.random.default_rng(seed)
    labels = np.array([g.label for g in dataset])
    classes, counts = np.unique(labels, return_counts=True)
    if len(counts) and counts.min() < num_folds:
        warnings.warn(
            f"a class has fewer than {num_folds} members; falling back to unstratified folds",
            stacklevel=2,
        )
        order = rng.permutation(n)
    else:
        # interleave classes so every contiguous window is close to stratified
        keys = np.empty(n)
        for c, count in zip(classes, counts):
            members = np.flatnonzero(labels == c)
            rng.shuffle(members)
            keys[members] = (np.arange(count) + rng.uniform(0, 1, count)) / count
        order = np.lexsort((rng.permutation(n), keys))
    n_train, n_val, _ = split_sizes(n, ratios)
    folds = []
    for k in range(num_folds):
        rotated = np.roll(order, -((k * n) // num_folds))
        folds.append(
            DatasetSplit(
                train=tuple(int(i) for i in rotated[:n_train]),
                val=tuple(int(i) for i in rotated[n_train : n_train + n_val]),
                test=tuple(int(i) for i in rotated[n_train + n_val :]),
                fold_index=k,
            )
        )
    return folds


# --- batching ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BatchedGraph:
    num_nodes: int
    num_graphs: int
    edges: np.ndarray
    node_features: np.ndarray
    node_to_graph: np.ndarray
    edge_to_graph: np.ndarray
    labels: np.ndarray
    node_offsets: np.ndarray
    edge_offsets: np.ndarray

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        """Symmetric 0/1 adjacency of the block graph."""
        n = self.num_nodes
        u, v = self.edges[:, 0], self.edges[:, 1]
        rows = np.concatenate([u, v])
        cols = np.concatenate([v, u])
        return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))

    @cached_property
    def gcn_adjacency(self) -> sp.csr_matrix:
        """``D^-1/2 (A + I) D^-1/2``."""
        a = self.adjacency + sp.identity(self.num_nodes, format="csr")
        deg = np.asarray(a.sum(axis=1)).ravel()
        scale = sp.diags(1.0 / np.sqrt(deg))
        return (scale @ a @ scale).tocsr()


def batch(graphs: Sequence[Graph | Subgraph]) -> BatchedGraph:
    """Disjoint union of graphs with per-node and per-edge graph ids."""
    graphs = [g.to_graph() if isinstance(g, Subgraph) else g for g in graphs]
    dims = {g.num_features for g in graphs}
    if len(dims) > 1:
        raise ShapeError(f"mixed node feature dimensions {sorted(dims)}")
    sizes = np.array([g.num_nodes for g in graphs], dtype=np.int64)
    esizes = np.array([g.num_edges for g in graphs], dtype=np.int64)
    node_offsets = np.concatenate([[0], np.cumsum(sizes)])
    edge_offsets = np.concatenate([[0], np.cumsum(esizes)])
    width = dims.pop() if dims else 0
    edges = [g.edges + node_offsets[i] for i, g in enumerate(graphs)]
    return BatchedGraph(
        num_nodes=int(node_offsets[-1]),
        num_graphs=len(graphs),
        edges=np.concatenate(edges) if edges else np.zeros((0, 2), dtype=np.int64),
        node_features=np.concatenate([g.node_features for g in graphs]) if graphs else np.zeros((0, width)),
        node_to_graph=np.repeat(np.arange(len(graphs)), sizes),
        edge_to_graph=np.repeat(np.arange(len(graphs)), esizes),
        labels=np.array([g.label for g in graphs], dtype=np.int64),
        node_offsets=node_offsets,
        edge_offsets=edge_offsets,
    )


def dataset_stats(graphs: Sequence[Graph]) -> dict:
    nodes = np.array([g.num_nodes for g in graphs], dtype=float)
    edges = np.array([g.num_edges for g in graphs], dtype=float)
    ef = graphs[0].edge_features.shape[1] if graphs and graphs[0].edge_features is not None else 0
    return {
        "graphs": len(graphs),
        "features": graphs[0].num_features if graphs else 0,
        "edge_features": ef,
        "classes": len({g.label for g in graphs}),
        "nodes_mean": float(nodes.mean()) if len(nodes) else 0.0,
        "nodes_std": float(nodes.std()) if len(nodes) else 0.0,
        "edges_mean": float(edges.mean()) if len(edges) else 0.0,
        "edges_std": float(edges.std()) if len(edges) else 0.0,
    }
