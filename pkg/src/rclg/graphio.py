"""Graph ingestion, propagation operators, augmentations and synthetic graphs."""
from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import ndcore as nd

log = logging.getLogger(__name__)

DIRECT_SOLVE_MAX_N = 2000


class DatasetError(ValueError):
    pass


def _canonical_edges(edges) -> np.ndarray:
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if len(e) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.sort(e, axis=1)
    e = e[e[:, 0] != e[:, 1]]
    e = np.unique(e, axis=0)  # unique sorts lexicographically
    return e


@dataclass(eq=False)
class AttributedGraph:
    n: int
    edges: np.ndarray
    features: np.ndarray
    labels: np.ndarray | None = None
    name: str = "graph"
    edge_weight: np.ndarray | None = None
    warnings: int = 0
    _adj_cache: sp.csr_matrix | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features.reshape(self.n, -1)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.edges) > 1:
            order = np.lexsort((self.edges[:, 1], self.edges[:, 0]))
            self.edges = self.edges[order]
            if self.edge_weight is not None:
                self.edge_weight = np.asarray(self.edge_weight, dtype=np.float64)[order]
        self.validate()

    def validate(self) -> None:
        e = self.edges
        if len(e):
            if (e[:, 0] >= e[:, 1]).any():
                raise DatasetError("edges must be stored as (u, v) with u < v and no self-loops")
            if e.max() >= self.n or e.min() < 0:
                raise DatasetError(f"edge endpoint out of range for n={self.n}")
            if len(np.unique(e, axis=0)) != len(e):
                raise DatasetError("duplicate edges")
        if self.features.shape[0] != self.n:
            raise DatasetError(f"features have {self.features.shape[0]} rows, expected {self.n}")
        if self.labels is not None and self.labels.shape != (self.n,):
            raise DatasetError(f"labels length {self.labels.shape} does not match n={self.n}")
        if self.edge_weight is not None and len(self.edge_weight) != len(e):
            raise DatasetError("edge_weight length does not match edge count")

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def num_classes(self) -> int:
        return 0 if self.labels is None else int(self.labels.max()) + 1

    def with_edges(self, edges, edge_weight=None, name: str | None = None) -> AttributedGraph:
        return AttributedGraph(self.n, edges, self.features, self.labels, name or self.name,
                               edge_weight=edge_weight)

    def adjacency(self) -> sp.csr_matrix:
        """Symmetric (weighted) adjacency without self-loops."""
        w = np.ones(len(self.edges)) if self.edge_weight is None else self.edge_weight
        u, v = self.edges[:, 0], self.edges[:, 1]
        a = sp.coo_matrix((np.concatenate([w, w]), (np.concatenate([u, v]), np.concatenate([v, u]))),
                          shape=(self.n, self.n))
        return a.tocsr()

    def neighbors(self) -> list[list[int]]:
        nbrs: list[list[int]] = [[] for _ in range(self.n)]
        for u, v in self.edges:
            nbrs[u].append(int(v))
            nbrs[v].append(int(u))
        for lst in nbrs:
            lst.sort()
        return nbrs


# --
# Dataset directories


def load_dataset(path, row_normalize: bool = False) -> AttributedGraph:
    path = Path(path)
    meta_path = path / "meta.json"
    for required in (meta_path, path / "edges.tsv", path / "features.tsv"):
        if not required.exists():
            raise DatasetError(f"missing file: {required}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    n, d = int(meta["num_nodes"]), int(meta["num_features"])

    raw = []
    with open(path / "edges.tsv", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            try:
                if len(parts) != 2:
                    raise ValueError
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise DatasetError(f"edges.tsv line {lineno}: malformed edge {line.rstrip()!r}") from None
            if not (0 <= u < n and 0 <= v < n):
                raise DatasetError(f"edges.tsv line {lineno}: endpoint out of range for n={n}")
            raw.append((u, v))
    edges = _canonical_edges(raw)
    self_loops = sum(1 for u, v in raw if u == v)
    dropped = len(raw) - len(edges)
    if dropped:
        log.warning("%s: stripped %d self-loop(s) and %d duplicate edge(s)", path, self_loops,
                    dropped - self_loops)

    rows = []
    with open(path / "features.tsv", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = [float(x) for x in line.rstrip("\n").split("\t")]
            except ValueError:
                raise DatasetError(f"features.tsv line {lineno}: non-numeric value") from None
            if len(row) != d:
                raise DatasetError(f"features.tsv line {lineno}: expected {d} values, got {len(row)}")
            rows.append(row)
    if len(rows) != n:
        raise DatasetError(f"features.tsv has {len(rows)} rows but meta.json says num_nodes={n}")
    features = np.array(rows, dtype=np.float64).reshape(n, d)
    if row_normalize:
        s = features.sum(axis=1, keepdims=True)
        features = features / np.where(s == 0, 1.0, s)

    labels = None
    if (path / "labels.tsv").exists():
        vals = []
        with open(path / "labels.tsv", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    vals.append(int(line))
                except ValueError:
                    raise DatasetError(f"labels.tsv line {lineno}: malformed label") from None
        labels = np.array(vals, dtype=np.int64)
        if len(labels) != n:
            raise DatasetError(f"labels.tsv has {len(labels)} rows, expected {n}")
        k = int(meta.get("num_classes", labels.max() + 1))
        if labels.min() < 0 or labels.max() >= k:
            raise DatasetError(f"labels outside [0, {k})")

    g = AttributedGraph(n, edges, features, labels, name=meta.get("name", path.name))
    g.warnings = dropped
    return g


def write_dataset(g: AttributedGraph, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {"name": g.name, "num_nodes": g.n, "num_features": int(g.features.shape[1]),
            "num_classes": g.num_classes}
    (path / "meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    with open(path / "edges.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(f"{u}\t{v}\n" for u, v in g.edges)
    with open(path / "features.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines("\t".join(repr(float(x)) for x in row) + "\n" for row in g.features)
    if g.labels is not None:
        with open(path / "labels.tsv", "w", encoding="utf-8", newline="\n") as fh:
            fh.writelines(f"{int(y)}\n" for y in g.labels)


def dataset_checksum(path) -> str:
    import hashlib

    h = hashlib.sha256()
    for name in ("meta.json", "edges.tsv", "features.tsv", "labels.tsv"):
        p = Path(path) / name
        if p.exists():
            h.update(name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()


# --
# Propagation


def normalized_adjacency(g: AttributedGraph) -> sp.csr_matrix:
    """D̃^{-1/2} (A + I) D̃^{-1/2} as a CSR matrix with sorted indices."""
    if g._adj_cache is not None:
        return g._adj_cache
    a = (g.adjacency() + sp.identity(g.n, format="csr")).tocoo()
    deg = np.asarray(a.sum(axis=1)).ravel()
    # d_i * d_j is commutative, so (i, j) and (j, i) get bit-identical values
    vals = a.data / np.sqrt(deg[a.row] * deg[a.col])
    adj = sp.csr_matrix((vals, (a.row, a.col)), shape=a.shape)
    adj.sort_indices()
    g._adj_cache = adj
    return adj


def propagate(adj: sp.spmatrix, z, steps: int) -> list[nd.Tensor]:
    if steps < 1:
        raise ValueError("propagation steps must be >= 1")
    h = nd.as_tensor(z)
    if h.shape[0] != adj.shape[0]:
        raise nd.ShapeError(f"propagate: embeddings have {h.shape[0]} rows, adjacency is {adj.shape}")
    out = []
    for _ in range(steps):
        h = nd.spmatmul(adj, h)
        out.append(h)
    return out


# --
# Betweenness


def edge_betweenness(g: AttributedGraph) -> dict[tuple[int, int], float]:
    """Exact unweighted edge betweenness (Brandes), each unordered pair counted once."""
    nbrs = g.neighbors()
    score = {(int(u), int(v)): 0.0 for u, v in g.edges}
    for s in range(g.n):
        sigma = np.zeros(g.n)
        dist = np.full(g.n, -1)
        preds: list[list[int]] = [[] for _ in range(g.n)]
        sigma[s], dist[s] = 1.0, 0
        order = []
        queue = deque([s])
        while queue:
            v = queue.popleft()
            order.append(v)
            for w in nbrs[v]:
                if dist[w] < 0:
                    dist[w] = dist[v] + 1
                    queue.append(w)
                if dist[w] == dist[v] + 1:
                    sigma[w] += sigma[v]
                    preds[w].append(v)
        delta = np.zeros(g.n)
        for w in reversed(order):
            for v in preds[w]:
                c = sigma[v] / sigma[w] * (1.0 + delta[w])
                score[(v, w) if v < w else (w, v)] += c
                delta[v] += c
    # every source-target pair was visited from both ends
    return {e: s / 2.0 for e, s in score.items()}


def betweenness_ranking(g: AttributedGraph) -> list[tuple[int, int]]:
    """Edges by descending betweenness, lexicographically smallest edge first on ties."""
    scores = edge_betweenness(g)
    return sorted(scores, key=lambda e: (-round(scores[e], 9), e))


def remove_top_betweenness(g: AttributedGraph, m: int, recompute: bool = False) -> AttributedGraph:
    if m > g.num_edges:
        raise ValueError(f"cannot remove {m} edges from a graph with {g.num_edges}")
    if m < 0:
        raise ValueError("removal count must be non-negative")
    if m == 0:
        return g.with_edges(g.edges)
    if recompute:
        cur = g
        for _ in range(m):
            cur = remove_top_betweenness(cur, 1)
        return cur
    drop = set(betweenness_ranking(g)[:m])
    keep = [e for e in map(tuple, g.edges.tolist()) if e not in drop]
    return g.with_edges(keep)


# --
# Augmentations


@dataclass
class AugmentationSpec:
    strategy: str = "noise"
    drop_frac: float = 0.10
    add_frac: float = 0.10
    teleport: float = 0.20
    diffusion_topk: int | None = 64

    def __post_init__(self):
        if self.strategy not in ("noise", "drop", "add", "diffusion"):
            raise ValueError(f"unknown augmentation strategy {self.strategy!r}")
        if not (0.0 <= self.drop_frac <= 1.0 and 0.0 <= self.add_frac <= 1.0):
            raise ValueError("augmentation fractions must be in [0,1]")
        if not 0.0 < self.teleport < 1.0:
            raise ValueError("teleport must be in (0,1)")


def ppr_matrix(g: AttributedGraph, teleport: float) -> np.ndarray:
    """teleport * (I - (1 - teleport) Â)^{-1}, dense."""
    adj = normalized_adjacency(g)
    if g.n <= DIRECT_SOLVE_MAX_N:
        inner = np.eye(g.n) - (1.0 - teleport) * adj.toarray()
        return teleport * np.linalg.solve(inner, np.eye(g.n))
    # Π = t Σ_k ((1-t) Â)^k, truncated once the increment is below tolerance
    pi = teleport * np.eye(g.n)
    term = pi.copy()
    for _ in range(1000):
        term = (1.0 - teleport) * (adj @ term)
        pi += term
        if np.abs(term).max() < 1e-8:
            break
    return pi


def diffusion_graph(g: AttributedGraph, teleport: float, topk: int | None) -> AttributedGraph:
    pi = ppr_matrix(g, teleport)
    np.fill_diagonal(pi, 0.0)
    if topk is not None and topk < g.n - 1:
        keep = np.zeros_like(pi, dtype=bool)
        # stable sort keeps the lowest column index on ties
        idx = np.argsort(-pi, axis=1, kind="stable")[:, :topk]
        np.put_along_axis(keep, idx, True, axis=1)
        pi = np.where(keep, pi, 0.0)
    pi = np.maximum(pi, pi.T)
    u, v = np.nonzero(np.triu(pi, 1) > 0)
    return g.with_edges(np.stack([u, v], axis=1), edge_weight=pi[u, v], name=f"{g.name}-diffusion")


def augment(g: AttributedGraph, spec: AugmentationSpec, rng: np.random.Generator) -> AttributedGraph:
    if spec.strategy == "noise":
        return g.with_edges(g.edges, g.edge_weight)
    if spec.strategy == "drop":
        m = int(np.floor(spec.drop_frac * g.num_edges))
        drop = rng.choice(g.num_edges, size=m, replace=False)
        keep = np.setdiff1d(np.arange(g.num_edges), drop)
        return g.with_edges(g.edges[keep])
    if spec.strategy == "add":
        m = int(np.floor(spec.add_frac * g.num_edges))
        total = g.n * (g.n - 1) // 2
        if m > total - g.num_edges:
            raise ValueError(f"cannot add {m} edges: only {total - g.num_edges} non-edges available")
        new = _sample_pairs(g.n, m, rng, exclude=g.edges)
        return g.with_edges(np.concatenate([g.edges, new]))
    return diffusion_graph(g, spec.teleport, spec.diffusion_topk)


def _pair_index(edges: np.ndarray, n: int) -> np.ndarray:
    return edges[:, 0] * n + edges[:, 1]


def _sample_pairs(n: int, m: int, rng: np.random.Generator, exclude: np.ndarray | None = None) -> np.ndarray:
    """m distinct uniformly random unordered pairs (u < v) avoiding ``exclude``."""
    total = n * (n - 1) // 2
    taken = set() if exclude is None or len(exclude) == 0 else set(_pair_index(exclude, n).tolist())
    if m > total - len(taken):
        raise ValueError(f"cannot draw {m} pairs, only {total - len(taken)} available")
    if m == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if m + len(taken) > total // 2:
        iu = np.triu_indices(n, 1)
        pool = np.stack(iu, axis=1)
        if taken:
            pool = pool[~np.isin(_pair_index(pool, n), list(taken))]
        return pool[np.sort(rng.choice(len(pool), size=m, replace=False))]
    chosen: list[tuple[int, int]] = []
    while len(chosen) < m:
        u, v = rng.integers(0, n, size=2)
        if u == v:
            continue
        u, v = (int(u), int(v)) if u < v else (int(v), int(u))
        key = u * n + v
        if key in taken:
            continue
        taken.add(key)
        chosen.append((u, v))
    return np.array(chosen, dtype=np.int64)


# --
# Pair graphs


@dataclass
class PairGraph:
    n: int
    pairs: np.ndarray  # off-diagonal (u, v), u < v; the diagonal is implicit
    strategy: str

    def dense(self) -> np.ndarray:
        a = np.eye(self.n)
        if len(self.pairs):
            a[self.pairs[:, 0], self.pairs[:, 1]] = 1.0
            a[self.pairs[:, 1], self.pairs[:, 0]] = 1.0
        return a


def adjacency_pair_graph(g: AttributedGraph) -> PairGraph:
    return PairGraph(g.n, g.edges.copy(), "adjacency")


def random_pair_graph(n: int, m: int, rng: np.random.Generator) -> PairGraph:
    if m > n * (n - 1) // 2:
        raise ValueError(f"cannot link {m} random pairs among {n} nodes")
    return PairGraph(n, _canonical_edges(_sample_pairs(n, m, rng)), "random")


def knn_pair_graph(z, k: int) -> PairGraph:
    z = np.asarray(z.values if isinstance(z, nd.Tensor) else z, dtype=np.float64)
    n = len(z)
    if not 0 < k < n:
        raise ValueError(f"knn requires 0 < k < n, got k={k}, n={n}")
    norms = np.linalg.norm(z, axis=1)
    zero = norms == 0
    unit = z / np.where(zero, 1.0, norms)[:, None]
    score = unit @ unit.T
    if zero.any():
        log.warning("knn_pair_graph: %d zero-norm row(s), using Euclidean distance", int(zero.sum()))
        sq = (z * z).sum(axis=1)
        eucl = -(sq[:, None] + sq[None, :] - 2 * z @ z.T)
        score[zero] = eucl[zero]
    np.fill_diagonal(score, -np.inf)
    idx = np.argsort(-score, axis=1, kind="stable")[:, :k]
    rows = np.repeat(np.arange(n), k)
    return PairGraph(n, _canonical_edges(np.stack([rows, idx.ravel()], axis=1)), "knn")


# --
# Synthetic graphs


def generate_sbm(blocks, p_in: float, p_out: float, feature_dim: int, feature_sep: float,
                 rng: np.random.Generator, name: str = "sbm") -> AttributedGraph:
    """Stochastic block model with Gaussian features around one-hot block means."""
    if not (0.0 <= p_in <= 1.0 and 0.0 <= p_out <= 1.0):
        raise ValueError("probabilities must be in [0,1]")
    labels = np.repeat(np.arange(len(blocks)), blocks)
    n = len(labels)
    iu, ju = np.triu_indices(n, 1)
    p = np.where(labels[iu] == labels[ju], p_in, p_out)
    hit = rng.random(len(iu)) < p
    edges = np.stack([iu[hit], ju[hit]], axis=1)
    means = np.zeros((len(blocks), feature_dim))
    means[np.arange(len(blocks)), np.arange(len(blocks)) % feature_dim] = feature_sep
    features = means[labels] + rng.standard_normal((n, feature_dim))
    return AttributedGraph(n, edges, features, labels, name=name)
