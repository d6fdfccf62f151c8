"""Graph container, dataset I/O, splits, noise injection, and synthetic graphs.

The graph is stored as a symmetric CSR adjacency (no self-loops, every
undirected edge stored in both directions) plus dense float64 node features
and integer labels. All randomized operations are pure functions of their
inputs and an integer seed.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp


class DatasetError(ValueError):
    """Raised when a dataset directory or its contents are invalid."""


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _csr_from_pairs(pairs: np.ndarray, num_nodes: int) -> tuple[np.ndarray, np.ndarray]:
    """Build (row_offsets, col_indices) from unique undirected pairs (i < j)."""
    if len(pairs) == 0:
        return np.zeros(num_nodes + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
    both = np.concatenate([pairs, pairs[:, ::-1]], axis=0)
    order = np.lexsort((both[:, 1], both[:, 0]))
    both = both[order]
    row_offsets = np.zeros(num_nodes + 1, dtype=np.int64)
    np.add.at(row_offsets, both[:, 0] + 1, 1)
    return np.cumsum(row_offsets), both[:, 1].astype(np.int64)


def _unique_pairs(src: np.ndarray, dst: np.ndarray, num_nodes: int) -> np.ndarray:
    """Canonicalize edges to (min, max) pairs, drop duplicates. Self-loops must
    already be removed."""
    lo = np.minimum(src, dst).astype(np.int64)
    hi = np.maximum(src, dst).astype(np.int64)
    keys = lo * num_nodes + hi
    _, idx = np.unique(keys, return_index=True)
    return np.stack([lo[idx], hi[idx]], axis=1)


@dataclass(eq=False)
class Graph:
    """Immutable undirected graph with dense node features.

    row_offsets/col_indices form a CSR adjacency over ``num_nodes`` vertices.
    The adjacency is symmetric, has no self-loops, and stores each undirected
    edge in both directions. Construction validates all of this.
    """

    row_offsets: np.ndarray
    col_indices: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    _adj: sp.csr_matrix = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.row_offsets = np.array(self.row_offsets, dtype=np.int64)
        self.col_indices = np.array(self.col_indices, dtype=np.int64)
        self.features = np.array(self.features, dtype=np.float64, ndmin=2)
        self.labels = np.array(self.labels, dtype=np.int64)
        n = self.num_nodes
        if self.features.shape[0] != n:
            raise ValueError(f"features must be ({n}, F), got {self.features.shape}")
        if self.labels.shape != (n,):
            raise ValueError("labels must have one entry per node")
        if self.row_offsets[0] != 0:
            raise ValueError("row_offsets must start at 0")
        if np.any(np.diff(self.row_offsets) < 0):
            raise ValueError("row_offsets must be non-decreasing")
        if self.row_offsets[-1] != len(self.col_indices):
            raise ValueError("row_offsets[-1] must equal len(col_indices)")
        if len(self.col_indices) and (
            self.col_indices.min() < 0 or self.col_indices.max() >= n
        ):
            raise ValueError("col_indices out of range")
        rows = np.repeat(np.arange(n, dtype=np.int64), np.diff(self.row_offsets))
        if np.any(rows == self.col_indices):
            raise ValueError("self-loops are not allowed in the stored adjacency")
        # canonicalize column order within each row (fixed reduction order)
        order = np.lexsort((self.col_indices, rows))
        self.col_indices = self.col_indices[order]
        adj = sp.csr_matrix(
            (np.ones(len(self.col_indices)), self.col_indices, self.row_offsets),
            shape=(n, n),
        )
        adj_t = adj.T.tocsr()
        adj_t.sort_indices()
        if not (
            np.array_equal(adj.indptr, adj_t.indptr)
            and np.array_equal(adj.indices, adj_t.indices)
        ):
            raise ValueError("adjacency must be symmetric")
        if np.any(self.labels < 0) or np.any(self.labels >= self.num_classes):
            raise ValueError("labels must lie in [0, num_classes)")
        for a in (self.row_offsets, self.col_indices, self.features, self.labels):
            a.setflags(write=False)
        self._adj = adj

    @property
    def num_nodes(self) -> int:
        return len(self.row_offsets) - 1

    @property
    def feat_dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_edges(self) -> int:
        """Number of undirected edges (each stored twice in the CSR)."""
        return len(self.col_indices) // 2

    @property
    def adjacency(self) -> sp.csr_matrix:
        """Symmetric 0/1 CSR adjacency (read-only view)."""
        return self._adj

    def neighbors(self, i: int) -> np.ndarray:
        return self.col_indices[self.row_offsets[i] : self.row_offsets[i + 1]]

    def degrees(self) -> np.ndarray:
        return np.diff(self.row_offsets)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.row_offsets, other.row_offsets)
            and np.array_equal(self.col_indices, other.col_indices)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(eq=False)
class SplitMasks:
    """Disjoint train/validation/test node masks plus a pseudo-vertex marker."""

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    pseudo: np.ndarray

    def __post_init__(self) -> None:
        n = len(self.train)
        for name in ("train", "val", "test", "pseudo"):
            m = np.ascontiguousarray(getattr(self, name), dtype=bool)
            if m.shape != (n,):
                raise ValueError("all masks must share one length")
            setattr(self, name, m)
        if np.any(self.train & self.val) or np.any(self.train & self.test) or np.any(
            self.val & self.test
        ):
            raise ValueError("train/val/test masks must be pairwise disjoint")
        if np.any(self.test & self.pseudo):
            raise ValueError("pseudo vertices may not appear in the test mask")

    @property
    def num_nodes(self) -> int:
        return len(self.train)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SplitMasks):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("train", "val", "test", "pseudo")
        )


def make_graph(
    pairs: np.ndarray, features: np.ndarray, labels: np.ndarray, num_classes: int
) -> Graph:
    """Build a Graph from undirected pairs; each edge must appear exactly once."""
    n = len(features)
    row_offsets, col_indices = _csr_from_pairs(np.asarray(pairs, dtype=np.int64), n)
    return Graph(row_offsets, col_indices, features, labels, num_classes)


def load_graph(directory: str | Path) -> Graph:
    """Load a Graph from a CSV container directory.

    The directory must hold edges.csv ("src,dst" per line, either orientation),
    features.csv (N rows of F reals), labels.csv (N integers), and meta.csv
    (num_nodes=, num_classes=, feat_dim= lines). Duplicate edges collapse;
    self-loops are dropped with a warning.
    """
    directory = Path(directory)
    for name in ("edges.csv", "features.csv", "labels.csv", "meta.csv"):
        if not (directory / name).is_file():
            raise DatasetError(f"missing dataset file: {directory / name}")

    meta: dict[str, int] = {}
    for line in (directory / "meta.csv").read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        try:
            meta[key.strip()] = int(value)
        except ValueError as exc:
            raise DatasetError(f"bad meta line: {line!r}") from exc
    for key in ("num_nodes", "num_classes", "feat_dim"):
        if key not in meta:
            raise DatasetError(f"meta.csv missing key {key!r}")
    n, num_classes, feat_dim = meta["num_nodes"], meta["num_classes"], meta["feat_dim"]
    if n < 1 or num_classes < 1 or feat_dim < 1:
        raise DatasetError("meta.csv entries must be positive")

    try:
        features = np.loadtxt(
            directory / "features.csv", delimiter=",", dtype=np.float64, ndmin=2
        )
    except ValueError as exc:
        raise DatasetError(f"bad features.csv: {exc}") from exc
    if features.shape != (n, feat_dim):
        raise DatasetError(
            f"features.csv has shape {features.shape}, expected ({n}, {feat_dim})"
        )

    try:
        labels = np.loadtxt(directory / "labels.csv", dtype=np.int64, ndmin=1)
    except ValueError as exc:
        raise DatasetError(f"bad labels.csv: {exc}") from exc
    if labels.shape != (n,):
        raise DatasetError(f"labels.csv has {labels.shape[0]} rows, expected {n}")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise DatasetError("label out of range")

    edges_text = (directory / "edges.csv").read_text(encoding="utf-8")
    src_list: list[int] = []
    dst_list: list[int] = []
    for ln, line in enumerate(edges_text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise DatasetError(f"edges.csv line {ln}: expected 'src,dst', got {line!r}")
        try:
            a, b = int(parts[0]), int(parts[1])
        except ValueError as exc:
            raise DatasetError(f"edges.csv line {ln}: non-integer id") from exc
        if a < 0 or b < 0 or a >= n or b >= n:
            raise DatasetError(f"edges.csv line {ln}: node id outside [0, {n})")
        if a == b:
            warnings.warn(f"dropping self-loop on node {a} (edges.csv line {ln})")
            continue
        src_list.append(a)
        dst_list.append(b)

    src = np.asarray(src_list, dtype=np.int64)
    dst = np.asarray(dst_list, dtype=np.int64)
    pairs = _unique_pairs(src, dst, n) if len(src) else np.zeros((0, 2), dtype=np.int64)
    try:
        return make_graph(pairs, features, labels, num_classes)
    except ValueError as exc:
        raise DatasetError(str(exc)) from exc


def save_graph(g: Graph, directory: str | Path) -> None:
    """Write a Graph as a CSV container (inverse of load_graph, exact round-trip)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n = g.num_nodes
    rows = np.repeat(np.arange(n, dtype=np.int64), np.diff(g.row_offsets))
    keep = rows < g.col_indices
    edge_lines = [f"{i},{j}" for i, j in zip(rows[keep], g.col_indices[keep])]
    (directory / "edges.csv").write_text(
        "\n".join(edge_lines) + ("\n" if edge_lines else ""), encoding="utf-8"
    )
    feat_lines = [",".join(repr(float(v)) for v in row) for row in g.features]
    (directory / "features.csv").write_text("\n".join(feat_lines) + "\n", encoding="utf-8")
    (directory / "labels.csv").write_text(
        "\n".join(str(int(v)) for v in g.labels) + "\n", encoding="utf-8"
    )
    (directory / "meta.csv").write_text(
        f"num_nodes={n}\nnum_classes={g.num_classes}\nfeat_dim={g.feat_dim}\n",
        encoding="utf-8",
    )


def make_splits(
    g: Graph, ratios: tuple[float, float, float] = (0.2, 0.2, 0.6), seed: int = 0
) -> SplitMasks:
    """Randomly partition nodes into train/val/test masks.

    A seeded permutation assigns the first floor(ratios[0]*N) nodes to train,
    the next floor(ratios[1]*N) to validation, and the remainder to test.
    """
    if min(ratios) <= 0:
        raise ValueError("ratios must be positive")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    n = g.num_nodes
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(ratios[0] * n))
    n_val = int(math.floor(ratios[1] * n))
    train = np.zeros(n, dtype=bool)
    val = np.zeros(n, dtype=bool)
    test = np.zeros(n, dtype=bool)
    train[perm[:n_train]] = True
    val[perm[n_train : n_train + n_val]] = True
    test[perm[n_train + n_val :]] = True
    return SplitMasks(train, val, test, np.zeros(n, dtype=bool))


def augment_with_noise(
    g: Graph, masks: SplitMasks, fraction: float, seed: int
) -> tuple[Graph, SplitMasks]:
    """Inject pseudo vertices carrying standard-normal features and random labels.

    Adds round(fraction*N) pseudo vertices; each receives d distinct neighbors
    drawn uniformly from the original vertex set, where d = round(mean degree
    of the original graph), at least 1. The enlarged graph is re-split 20-20-60
    and pseudo vertices are then evicted from the test mask. ``masks`` is
    accepted for interface symmetry with the clean pipeline; the returned masks
    are regenerated from scratch.
    """
    if fraction <= 0:
        raise ValueError("fraction must be positive")
    if masks.num_nodes != g.num_nodes:
        raise ValueError("masks do not match graph")
    n = g.num_nodes
    k = _round_half_up(fraction * n)
    rng = np.random.default_rng((seed, 1))

    mean_deg = len(g.col_indices) / n if n else 0.0
    d = max(1, _round_half_up(mean_deg))
    d = min(d, n)

    new_feats = rng.standard_normal((k, g.feat_dim))
    new_labels = rng.integers(0, g.num_classes, size=k)
    pseudo_src = []
    pseudo_dst = []
    for p in range(k):
        nbrs = rng.choice(n, size=d, replace=False)
        pseudo_src.append(np.full(d, n + p, dtype=np.int64))
        pseudo_dst.append(nbrs.astype(np.int64))

    total = n + k
    old_rows = np.repeat(np.arange(n, dtype=np.int64), np.diff(g.row_offsets))
    keep = old_rows < g.col_indices
    old_pairs = np.stack([old_rows[keep], g.col_indices[keep]], axis=1)
    if k:
        add_src = np.concatenate(pseudo_src)
        add_dst = np.concatenate(pseudo_dst)
        new_pairs = np.stack([add_dst, add_src], axis=1)  # dst < n <= src
        pairs = np.concatenate([old_pairs, new_pairs], axis=0)
    else:
        pairs = old_pairs

    g2 = make_graph(
        pairs,
        np.concatenate([g.features, new_feats], axis=0),
        np.concatenate([g.labels, new_labels]),
        g.num_classes,
    )
    m2 = make_splits(g2, (0.2, 0.2, 0.6), seed)
    pseudo = np.zeros(total, dtype=bool)
    pseudo[n:] = True
    test = m2.test & ~pseudo
    return g2, SplitMasks(m2.train, m2.val, test, pseudo)


def synth_sbm(
    n: int,
    classes: int,
    p_in: float,
    p_out: float,
    feat_dim: int,
    feat_sep: float,
    seed: int,
) -> Graph:
    """Planted-partition graph with Gaussian features around per-class means.

    Nodes split into equal blocks (n must be divisible by classes). Edges are
    sampled independently with probability p_in within a block and p_out
    across blocks. Node features are standard normal plus feat_sep on the
    block's own coordinate axis; labels are the block ids.
    """
    if not (0 <= p_out <= p_in <= 1):
        raise ValueError("need 0 <= p_out <= p_in <= 1")
    if n % classes != 0:
        raise ValueError("n must be divisible by classes")
    if feat_dim < classes:
        raise ValueError("feat_dim must be at least classes (one axis per class)")
    rng = np.random.default_rng(seed)
    block = n // classes
    labels = np.repeat(np.arange(classes), block)

    pair_src: list[np.ndarray] = []
    pair_dst: list[np.ndarray] = []
    for b1 in range(classes):
        for b2 in range(b1, classes):
            p = p_in if b1 == b2 else p_out
            lo1, lo2 = b1 * block, b2 * block
            if b1 == b2:
                iu, ju = np.triu_indices(block, k=1)
            else:
                iu, ju = np.meshgrid(np.arange(block), np.arange(block), indexing="ij")
                iu, ju = iu.ravel(), ju.ravel()
            hit = rng.random(len(iu)) < p
            pair_src.append(iu[hit] + lo1)
            pair_dst.append(ju[hit] + lo2)
    src = np.concatenate(pair_src)
    dst = np.concatenate(pair_dst)
    pairs = np.stack([src, dst], axis=1).astype(np.int64)

    features = rng.standard_normal((n, feat_dim))
    features[np.arange(n), labels] += feat_sep
    return make_graph(pairs, features, labels, classes)
