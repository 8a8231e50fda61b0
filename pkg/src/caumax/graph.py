"""Two-group networks: ingestion, k-core coreness, core-periphery split.

Node ids inside a :class:`TwoGroupNetwork` are local: sources are
``0..n_source-1`` and targets ``0..n_target-1``.  ``source_ids`` and
``target_ids`` map them back to ids of the raw graph.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .utils import FormatError, ParameterError, ParseError, SplitError, atomic_write_text

SPLIT_MAGIC = "CAUMAX-SPLIT v1"


@dataclass(eq=False)
class RawGraph:
    """Undirected simple graph on nodes ``0..node_count-1``.

    ``edges`` is an (m, 2) int array with ``u < v`` in every row, rows sorted
    and unique.  ``features`` is optional, one row per node.
    """

    node_count: int
    edges: np.ndarray
    features: np.ndarray | None = None

    def __post_init__(self):
        self.edges = _normalize_edges(self.edges)
        if len(self.edges) and (self.edges.min() < 0 or self.edges.max() >= self.node_count):
            raise ParameterError("edge endpoint outside 0..node_count-1")
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64)
            if self.features.ndim != 2 or self.features.shape[0] != self.node_count:
                raise ParameterError(
                    f"feature matrix has {self.features.shape[0]} rows for "
                    f"{self.node_count} nodes")

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.node_count)

    def neighbors(self) -> list[np.ndarray]:
        adj = sp.coo_matrix((np.ones(len(self.edges)), (self.edges[:, 0], self.edges[:, 1])),
                            shape=(self.node_count,) * 2)
        adj = (adj + adj.T).tocsr()
        return [adj.indices[adj.indptr[v]:adj.indptr[v + 1]] for v in range(self.node_count)]


def _normalize_edges(edges) -> np.ndarray:
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    e = e[e[:, 0] != e[:, 1]]
    e = np.sort(e, axis=1)
    if len(e) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(e, axis=0)


def load_edge_list(path, feature_path=None) -> RawGraph:
    """Read a whitespace-separated edge list and an optional CSV of covariates.

    Lines starting with ``#`` and blank lines are skipped.  Duplicate edges
    (in either orientation) and self-loops are dropped.
    """
    edges = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) != 2:
                raise ParseError(f"{path}:{lineno}: expected two node ids, got {text!r}")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: node ids must be integers, got {text!r}") \
                    from None
            if u < 0 or v < 0:
                raise ParseError(f"{path}:{lineno}: node ids must be non-negative")
            edges.append((u, v))
    node_count = max((max(u, v) for u, v in edges), default=-1) + 1

    features = None
    if feature_path is not None:
        features = np.loadtxt(feature_path, delimiter=",", dtype=np.float64, ndmin=2)
        if features.size == 0:
            features = features.reshape(0, 0)
        if features.shape[0] < node_count:
            raise ParameterError(
                f"{feature_path}: {features.shape[0]} feature rows but edge list "
                f"references {node_count} nodes")
        node_count = features.shape[0]
    return RawGraph(node_count, np.array(edges, dtype=np.int64).reshape(-1, 2), features)


def compute_coreness(g: RawGraph) -> np.ndarray:
    """Coreness of every node by bucket-ordered peeling (Batagelj-Zaversnik)."""
    n = g.node_count
    deg = g.degrees().astype(np.int64)
    if n == 0:
        return deg
    nbrs = g.neighbors()
    max_deg = int(deg.max())
    # bin sort nodes by current degree
    bin_start = np.zeros(max_deg + 2, dtype=np.int64)
    np.add.at(bin_start, deg + 1, 1)
    bin_start = np.cumsum(bin_start)
    order = np.argsort(deg, kind="stable")
    pos = np.empty(n, dtype=np.int64)
    pos[order] = np.arange(n)
    core = deg.copy()
    for i in range(n):
        v = order[i]
        for u in nbrs[v]:
            if core[u] > core[v]:
                du = core[u]
                pu = pos[u]
                pw = bin_start[du]
                w = order[pw]
                if u != w:
                    order[pu], order[pw] = w, u
                    pos[u], pos[w] = pw, pu
                bin_start[du] += 1
                core[u] -= 1
    return core


def synthesize_graph(n: int, attachment: int, seed: int) -> RawGraph:
    """Preferential-attachment graph.

    Starts from a clique on nodes ``0..attachment``; every later node links
    to ``attachment`` distinct earlier nodes drawn proportionally to their
    degree.  The edge count is therefore
    ``attachment * (n - attachment - 1) + attachment * (attachment + 1) / 2``.
    """
    if attachment < 1:
        raise ParameterError(f"attachment must be >= 1, got {attachment}")
    if n < attachment + 1:
        raise ParameterError(f"need n >= attachment + 1, got n={n}, attachment={attachment}")
    rng = np.random.default_rng(seed)
    m0 = attachment + 1
    edges = [(u, v) for u in range(m0) for v in range(u + 1, m0)]
    # every edge endpoint once: sampling from it is degree-proportional
    endpoints = [x for e in edges for x in e]
    for v in range(m0, n):
        chosen = set()
        while len(chosen) < attachment:
            chosen.add(endpoints[rng.integers(len(endpoints))])
        for u in sorted(chosen):
            edges.append((u, v))
            endpoints.extend((u, v))
    return RawGraph(n, np.array(edges, dtype=np.int64))


@dataclass(eq=False)
class TwoGroupNetwork:
    source_ids: np.ndarray
    target_ids: np.ndarray
    edges_A: np.ndarray
    edges_B: np.ndarray
    edges_AB: np.ndarray
    weights_AB: np.ndarray
    features_A: np.ndarray | None = None
    features_B: np.ndarray | None = None

    def __post_init__(self):
        self.source_ids = np.asarray(self.source_ids, dtype=np.int64)
        self.target_ids = np.asarray(self.target_ids, dtype=np.int64)
        self.edges_A = np.asarray(self.edges_A, dtype=np.int64).reshape(-1, 2)
        self.edges_B = np.asarray(self.edges_B, dtype=np.int64).reshape(-1, 2)
        self.edges_AB = np.asarray(self.edges_AB, dtype=np.int64).reshape(-1, 2)
        self.weights_AB = np.asarray(self.weights_AB, dtype=np.float64).reshape(-1)
        for name in ("features_A", "features_B"):
            val = getattr(self, name)
            if val is not None:
                setattr(self, name, np.asarray(val, dtype=np.float64))
        self.validate()

    @property
    def n_source(self) -> int:
        return len(self.source_ids)

    @property
    def n_target(self) -> int:
        return len(self.target_ids)

    @property
    def d_in(self) -> int | None:
        return None if self.features_A is None else self.features_A.shape[1]

    def validate(self):
        na, nb = self.n_source, self.n_target
        if np.intersect1d(self.source_ids, self.target_ids).size:
            raise SplitError("source and target groups overlap")
        if len(self.weights_AB) != len(self.edges_AB):
            raise SplitError("one weight per cross-group edge is required")
        for name, e, hi in (("edges_A", self.edges_A, (na, na)),
                            ("edges_B", self.edges_B, (nb, nb)),
                            ("edges_AB", self.edges_AB, (na, nb))):
            if len(e) and (e.min() < 0 or e[:, 0].max() >= hi[0] or e[:, 1].max() >= hi[1]):
                raise SplitError(f"{name} references a node outside its group")
        if nb and self.cross_degree.min() < 1:
            raise SplitError("every target node needs at least one source neighbour")
        if (self.features_A is None) != (self.features_B is None):
            raise SplitError("features must be given for both groups or neither")
        if self.features_A is not None:
            if self.features_A.shape[0] != na or self.features_B.shape[0] != nb:
                raise SplitError("feature rows do not match group sizes")
            if self.features_A.shape[1] != self.features_B.shape[1]:
                raise SplitError("source and target covariate widths differ")

    def with_features(self, features_A, features_B) -> "TwoGroupNetwork":
        return replace(self, features_A=features_A, features_B=features_B)

    @cached_property
    def cross_degree(self) -> np.ndarray:
        return np.bincount(self.edges_AB[:, 1], minlength=self.n_target)

    @cached_property
    def source_degree(self) -> np.ndarray:
        """Total degree of each source: within-source plus cross-group edges."""
        within = np.bincount(self.edges_A.ravel(), minlength=self.n_source)
        return within + np.bincount(self.edges_AB[:, 0], minlength=self.n_source)

    @cached_property
    def cross_adjacency(self) -> sp.csr_matrix:
        """(n_target, n_source) matrix of cross-edge weights."""
        return sp.csr_matrix((self.weights_AB, (self.edges_AB[:, 1], self.edges_AB[:, 0])),
                             shape=(self.n_target, self.n_source))

    @cached_property
    def spillover_operator(self) -> sp.csr_matrix:
        """Cross adjacency with row j scaled by 1/sqrt(d_j)."""
        inv = 1.0 / np.sqrt(np.maximum(self.cross_degree, 1))
        return sp.diags(inv) @ self.cross_adjacency

    @cached_property
    def mean_pool_operator(self) -> sp.csr_matrix:
        """Row j averages the source neighbours of target j (unweighted)."""
        ones = sp.csr_matrix((np.ones(len(self.edges_AB)),
                              (self.edges_AB[:, 1], self.edges_AB[:, 0])),
                             shape=(self.n_target, self.n_source))
        ones.sum_duplicates()
        ones.data[:] = 1.0
        return (sp.diags(1.0 / np.maximum(self.cross_degree, 1)) @ ones).tocsr()

    @cached_property
    def gcn_operator(self) -> sp.csr_matrix:
        """D^-1/2 (A + I) D^-1/2 on the source subgraph."""
        na = self.n_source
        e = self.edges_A
        a = sp.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(na, na))
        a = (a + a.T + sp.identity(na)).tocsr()
        a.data[:] = 1.0
        d = np.asarray(a.sum(axis=1)).ravel()
        inv = sp.diags(1.0 / np.sqrt(d))
        return (inv @ a @ inv).tocsr()

    def full_graph(self) -> sp.csr_matrix:
        """Unweighted adjacency on all nodes; sources first, then targets."""
        na, n = self.n_source, self.n_source + self.n_target
        e = np.vstack([self.edges_A, self.edges_B + na,
                       np.column_stack([self.edges_AB[:, 0], self.edges_AB[:, 1] + na])])
        a = sp.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
        a = (a + a.T).tocsr()
        a.data[:] = 1.0
        return a


def _top_count(p: float, n: int) -> int:
    return math.ceil(round(p * n / 100.0, 9))


def core_periphery_split(g: RawGraph, p: float) -> TwoGroupNetwork:
    """Sources are the top ``p`` percent of nodes by coreness.

    Ties in coreness are broken by higher degree, then lower node id.
    Targets are the remaining nodes with at least one source neighbour;
    the rest are dropped together with their edges.
    """
    if not 0 < p < 100:
        raise SplitError(f"p must lie strictly between 0 and 100, got {p}")
    n = g.node_count
    n_a = _top_count(p, n)
    if n_a == 0:
        raise SplitError("source group is empty")
    core = compute_coreness(g)
    deg = g.degrees()
    ranked = np.lexsort((np.arange(n), -deg, -core))
    is_source = np.zeros(n, dtype=bool)
    is_source[ranked[:n_a]] = True

    u, v = g.edges[:, 0], g.edges[:, 1]
    touches = np.zeros(n, dtype=bool)
    cross = is_source[u] != is_source[v]
    touches[u[cross]] = True
    touches[v[cross]] = True
    is_target = ~is_source & touches
    source_ids = np.flatnonzero(is_source)
    target_ids = np.flatnonzero(is_target)
    if len(target_ids) == 0:
        raise SplitError("no target node is adjacent to the source group")

    local = np.full(n, -1, dtype=np.int64)
    local[source_ids] = np.arange(len(source_ids))
    local[target_ids] = np.arange(len(target_ids))
    both_a = is_source[u] & is_source[v]
    both_b = is_target[u] & is_target[v]
    ab = cross & (is_target[u] | is_target[v])
    src = np.where(is_source[u], u, v)[ab]
    tgt = np.where(is_source[u], v, u)[ab]
    edges_AB = np.column_stack([local[src], local[tgt]])
    order = np.lexsort((edges_AB[:, 1], edges_AB[:, 0]))
    edges_AB = edges_AB[order]

    fa = fb = None
    if g.features is not None and g.features.size:
        fa, fb = g.features[source_ids], g.features[target_ids]
    return TwoGroupNetwork(
        source_ids=source_ids,
        target_ids=target_ids,
        edges_A=local[g.edges[both_a]],
        edges_B=local[g.edges[both_b]],
        edges_AB=edges_AB,
        weights_AB=np.ones(len(edges_AB)),
        features_A=fa,
        features_B=fb,
    )


def save_network(net: TwoGroupNetwork, path, config_hash: str = "") -> Path:
    body = {
        "config_hash": config_hash,
        "source_ids": net.source_ids.tolist(),
        "target_ids": net.target_ids.tolist(),
        "edges_A": net.edges_A.tolist(),
        "edges_B": net.edges_B.tolist(),
        "edges_AB": net.edges_AB.tolist(),
        "weights_AB": net.weights_AB.tolist(),
        "features_A": None if net.features_A is None else net.features_A.tolist(),
        "features_B": None if net.features_B is None else net.features_B.tolist(),
    }
    return atomic_write_text(path, SPLIT_MAGIC + "\n" + json.dumps(body) + "\n")


def load_network(path) -> tuple[TwoGroupNetwork, str]:
    """Returns the network and the config hash recorded with it."""
    text = Path(path).read_text(encoding="utf-8")
    head, _, rest = text.partition("\n")
    if head.strip() != SPLIT_MAGIC:
        raise FormatError(f"{path}: expected header {SPLIT_MAGIC!r}, found {head[:40]!r}")
    body = json.loads(rest)
    net = TwoGroupNetwork(
        source_ids=body["source_ids"],
        target_ids=body["target_ids"],
        edges_A=body["edges_A"],
        edges_B=body["edges_B"],
        edges_AB=body["edges_AB"],
        weights_AB=body["weights_AB"],
        features_A=body["features_A"],
        features_B=body["features_B"],
    )
    return net, body.get("config_hash", "")
