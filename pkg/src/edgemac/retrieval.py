"""Nearest-neighbor search, diffusion re-ranking, and retrieval metrics.

Two search protocols are supported:

* single-descriptor search: cosine similarity (dot product on unit vectors)
  between one query descriptor and one stored descriptor per item;
* instance-matching search: 10 pyramid descriptors per item and per query,
  compared one-to-one and averaged.

Re-ranking propagates query similarity through a kNN affinity graph over
the database by solving (I - alpha * S) f = y with conjugate gradients,
where S is the symmetrically normalized affinity matrix. Affinity graphs
built on different similarities can be combined before diffusing.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import cg

from .errors import (
    FormatError,
    InputError,
    ProtocolError,
    ShapeError,
    SizeError,
    SolverError,
)

UNIT_NORM_TOL = 1e-6

#: RankedList: list of (item_id, score) with scores non-increasing;
#: ties are broken by id ascending.
RankedList = list


def _rank(ids, scores) -> RankedList:
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    return [(ids[i], float(scores[i])) for i in order]


# ---------------------------------------------------------------------------
# Index
# ---------------------------------------------------------------------------

@dataclass
class Index:
    """Immutable searchable collection: ids plus unit descriptors per item.

    ``vectors`` has shape (items, per_item_count, dim).
    """

    ids: list
    vectors: np.ndarray
    per_item_count: int

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float32)
        if v.ndim == 2:
            v = v[:, None, :]
        if v.ndim != 3 or v.shape[0] != len(self.ids):
            raise ShapeError(f"index vectors shape {v.shape} does not match {len(self.ids)} ids")
        if v.shape[1] != self.per_item_count:
            raise ShapeError(
                f"vectors carry {v.shape[1]} descriptors per item, declared {self.per_item_count}"
            )
        if len(set(self.ids)) != len(self.ids):
            raise InputError("index ids must be unique")
        norms = np.linalg.norm(v.astype(np.float64), axis=2)
        if v.size and np.abs(norms - 1.0).max() > UNIT_NORM_TOL:
            raise InputError("index vectors must all be unit length")
        self.vectors = v

    def __len__(self) -> int:
        return len(self.ids)


def knn_search(q: np.ndarray, index: Index, k: int) -> RankedList:
    """Top-k items by cosine similarity to a single query descriptor."""
    if index.per_item_count != 1:
        raise ProtocolError("single-descriptor search needs an index with one vector per item")
    q = np.asarray(q, dtype=np.float64).ravel()
    if q.shape[0] != index.vectors.shape[2]:
        raise ShapeError(f"query dim {q.shape[0]} != index dim {index.vectors.shape[2]}")
    scores = index.vectors[:, 0, :].astype(np.float64) @ q
    k = max(0, min(int(k), len(index)))
    return _rank(index.ids, scores)[:k]


def search_multi(q: np.ndarray, index: Index) -> RankedList:
    """Instance-matching search: average the 10 one-to-one instance similarities."""
    q = np.asarray(q, dtype=np.float64)
    if index.per_item_count == 1 or q.ndim != 2:
        raise ProtocolError("instance-matching search needs 10 descriptors on both sides")
    if q.shape[0] != index.per_item_count or q.shape[1] != index.vectors.shape[2]:
        raise ProtocolError(
            f"query instances {q.shape} do not match index layout "
            f"({index.per_item_count}, {index.vectors.shape[2]})"
        )
    scores = (index.vectors.astype(np.float64) * q[None, :, :]).sum(axis=(1, 2)) / q.shape[0]
    return _rank(index.ids, scores)


# ---------------------------------------------------------------------------
# Affinity graphs and diffusion
# ---------------------------------------------------------------------------

@dataclass
class AffinityGraph:
    """Sparse symmetric nonnegative affinities with zero diagonal."""

    matrix: sp.csr_matrix

    def __post_init__(self):
        m = sp.csr_matrix(self.matrix)
        if m.shape[0] != m.shape[1]:
            raise ShapeError(f"affinity matrix must be square, got {m.shape}")
        if m.nnz and m.data.min() < 0.0:
            raise InputError("affinities must be nonnegative")
        if np.any(m.diagonal() != 0.0):
            raise InputError("affinity diagonal must be zero")
        if (m != m.T).nnz != 0:
            raise InputError("affinity matrix must be symmetric")
        m.eliminate_zeros()
        self.matrix = m

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


def build_knn_graph(descriptors: np.ndarray, k: int, gamma: float) -> AffinityGraph:
    """Mutual-inclusion kNN graph with affinities max(0, cos)^gamma.

    An edge (i, j) exists when j is among i's k nearest neighbors or vice
    versa; both directions get the same weight, so the graph is symmetric
    by construction. k is clipped to n - 1.
    """
    d = np.asarray(descriptors, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] < 2:
        raise SizeError(f"need at least 2 descriptors, got shape {d.shape}")
    if k < 1:
        raise InputError(f"k must be >= 1, got {k}")
    n = d.shape[0]
    k = min(k, n - 1)
    sims = d @ d.T
    np.fill_diagonal(sims, -np.inf)
    neighbor = np.zeros((n, n), dtype=bool)
    for i in range(n):
        top = np.argsort(-sims[i], kind="stable")[:k]
        neighbor[i, top] = True
    adjacency = neighbor | neighbor.T
    np.fill_diagonal(sims, 0.0)
    weights = np.where(adjacency, np.clip(sims, 0.0, None) ** gamma, 0.0)
    return AffinityGraph(sp.csr_matrix(weights))


def combine_graphs(a: AffinityGraph, b: AffinityGraph) -> AffinityGraph:
    """Elementwise sum, rescaled so the largest affinity is 1."""
    if a.n != b.n:
        raise ShapeError(f"graph sizes differ: {a.n} vs {b.n}")
    m = (a.matrix + b.matrix).tocsr()
    peak = m.max() if m.nnz else 0.0
    if peak > 0.0:
        m = m / peak
    return AffinityGraph(m)


def _normalized_affinity(g: AffinityGraph) -> sp.csr_matrix:
    degrees = np.asarray(g.matrix.sum(axis=1)).ravel()
    degrees[degrees == 0.0] = 1.0  # isolated nodes keep S well-defined
    inv_sqrt = sp.diags(1.0 / np.sqrt(degrees))
    return (inv_sqrt @ g.matrix @ inv_sqrt).tocsr()


def diffuse(g: AffinityGraph, y: np.ndarray, alpha: float) -> np.ndarray:
    """Solve (I - alpha * S) f = y by conjugate gradients.

    S is the symmetrically normalized affinity matrix; its spectral radius
    is at most 1, so the system is positive definite for alpha in (0, 1).
    The solve runs to residual ||(I - alpha S) f - y|| <= 1e-6 ||y||.
    """
    if not 0.0 < alpha < 1.0:
        raise InputError(f"alpha must be in (0, 1), got {alpha}")
    y = np.asarray(y, dtype=np.float64).ravel()
    if y.shape[0] != g.n:
        raise ShapeError(f"seed vector length {y.shape[0]} != graph size {g.n}")
    if y.min() < 0.0 or not np.any(y > 0.0):
        raise InputError("seed vector must be nonnegative with at least one positive entry")
    s = _normalized_affinity(g)
    op = sp.identity(g.n, format="csr") - alpha * s
    f, info = cg(op, y, rtol=1e-6, atol=0.0, maxiter=10 * g.n)
    residual = float(np.linalg.norm(op @ f - y))
    if info != 0 or residual > 1e-6 * float(np.linalg.norm(y)):
        raise SolverError(f"diffusion failed to converge (info={info}, residual={residual:.3g})")
    return f


def diffusion_rerank(ranked: RankedList, graphs, alpha: float, seed_k: int,
                     node_ids) -> RankedList:
    """Re-rank a cosine ranking by diffusing its top scores through the graph.

    The query stays outside the graph: its top ``seed_k`` database
    similarities (clipped at 0) seed the corresponding nodes, everything
    else starts at zero, and items are re-ranked by the diffused scores.
    ``node_ids`` gives the database id for each graph node, in node order.
    """
    graphs = list(graphs)
    if not graphs:
        raise InputError("need at least one affinity graph")
    g = graphs[0]
    for other in graphs[1:]:
        g = combine_graphs(g, other)
    node_ids = list(node_ids)
    if len(node_ids) != g.n:
        raise ShapeError(f"{len(node_ids)} node ids for a graph of size {g.n}")
    position = {item_id: i for i, item_id in enumerate(node_ids)}
    y = np.zeros(g.n)
    for item_id, score in ranked[: max(0, int(seed_k))]:
        if item_id not in position:
            raise InputError(f"ranked item {item_id!r} is not a graph node")
        y[position[item_id]] = max(float(score), 0.0)
    f = diffuse(g, y, alpha)
    return _rank(node_ids, f)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def evaluate_map(rankings, relevance) -> float:
    """Mean average precision over full rankings.

    AP for one query sums precision-at-hit over the retrieved relevant items
    and divides by the total number of relevant items, so relevant items
    missing from the ranking contribute zero. Queries with no relevant items
    contribute AP 0.
    """
    aps = []
    for qid, ranking in rankings.items():
        ids = [item_id for item_id, _ in ranking]
        if len(set(ids)) != len(ids):
            raise InputError(f"ranking for query {qid!r} contains duplicate ids")
        relevant = set(relevance.get(qid, ()))
        if not relevant:
            aps.append(0.0)
            continue
        hits = 0
        precision_sum = 0.0
        for rank, item_id in enumerate(ids, start=1):
            if item_id in relevant:
                hits += 1
                precision_sum += hits / rank
        aps.append(precision_sum / len(relevant))
    if not aps:
        raise InputError("no queries to evaluate")
    return float(np.mean(aps))


def evaluate_acc_at_k(rankings, true_match, k: int) -> float:
    """Fraction of queries whose single true match appears in the top k."""
    if k < 1:
        raise InputError(f"k must be >= 1, got {k}")
    if not rankings:
        raise InputError("no queries to evaluate")
    hits = 0
    for qid, ranking in rankings.items():
        match = true_match[qid]
        top = [item_id for item_id, _ in ranking[:k]]
        hits += int(match in top)
    return hits / len(rankings)


# ---------------------------------------------------------------------------
# Persistence: index files reuse the descriptor format; graphs get their own
# ---------------------------------------------------------------------------

def save_index(sink, index: Index) -> None:
    from .descriptors import save_descriptors

    save_descriptors(sink, index.ids, index.vectors)


def load_index(source) -> Index:
    from .descriptors import load_descriptors

    ids, vectors = load_descriptors(source)
    return Index(ids=ids, vectors=vectors, per_item_count=vectors.shape[1])


_GRAPH_MAGIC = b"EMGR"
_GRAPH_VERSION = 1


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError("graph file truncated")
    return data


def save_graph(sink, g: AffinityGraph, node_ids) -> None:
    """Write the upper triangle of the affinity matrix plus the node id table."""
    node_ids = list(node_ids)
    if len(node_ids) != g.n:
        raise ShapeError(f"{len(node_ids)} node ids for a graph of size {g.n}")
    upper = sp.triu(g.matrix, k=1).tocoo()
    buf = io.BytesIO()
    buf.write(_GRAPH_MAGIC)
    buf.write(struct.pack("<IQQ", _GRAPH_VERSION, g.n, upper.nnz))
    for i, j, v in zip(upper.row, upper.col, upper.data):
        buf.write(struct.pack("<IId", int(i), int(j), float(v)))
    for node_id in node_ids:
        raw = str(node_id).encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
    payload = buf.getvalue()
    if hasattr(sink, "write"):
        sink.write(payload)
        return
    with open(sink, "wb") as fh:
        fh.write(payload)


def load_graph(source):
    """Read a graph file; returns (AffinityGraph, node_ids)."""
    if hasattr(source, "read"):
        data = source.read()
    else:
        with open(source, "rb") as fh:
            data = fh.read()
    buf = io.BytesIO(data)
    if _read_exact(buf, 4) != _GRAPH_MAGIC:
        raise FormatError("not a graph file (bad magic)")
    version, n, nnz = struct.unpack("<IQQ", _read_exact(buf, 20))
    if version != _GRAPH_VERSION:
        raise FormatError(f"unsupported graph file version {version}")
    rows, cols, vals = [], [], []
    for _ in range(nnz):
        i, j, v = struct.unpack("<IId", _read_exact(buf, 16))
        if not (0 <= i < n and 0 <= j < n):
            raise FormatError("graph edge index out of range")
        rows.append(i)
        cols.append(j)
        vals.append(v)
    node_ids = []
    for _ in range(n):
        (length,) = struct.unpack("<I", _read_exact(buf, 4))
        node_ids.append(_read_exact(buf, length).decode("utf-8"))
    m = sp.coo_matrix((vals + vals, (rows + cols, cols + rows)), shape=(n, n)).tocsr()
    return AffinityGraph(m), node_ids
