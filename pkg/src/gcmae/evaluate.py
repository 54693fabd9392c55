"""Downstream task harness: logistic-regression probe, link prediction with
edge splits, k-means with NMI/ARI, and 2-D PCA projection.

Evaluation is read-only over a parameter snapshot; every function is
deterministic given its seed or generator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .graph import Dataset, SparseGraph, TEST, TRAIN, normalize
from .model import ModelParams, decode, embed


class EvalError(ValueError):
    pass


# ---------------------------------------------------------------------------
# node classification

def linear_probe(embeddings: np.ndarray, labels: np.ndarray, split: np.ndarray,
                 steps: int = 500, lr: float = 0.01, l2: float = 1e-4) -> float:
    """Multinomial logistic regression on frozen embeddings, full-batch GD.

    Trains on the train split, reports test accuracy; argmax ties resolve to
    the lowest class index.
    """
    train_idx = np.flatnonzero(split == TRAIN)
    test_idx = np.flatnonzero(split == TEST)
    if train_idx.size == 0 or test_idx.size == 0:
        raise EvalError("empty train or test split")
    classes = np.unique(labels)
    if not np.array_equal(np.unique(labels[train_idx]), classes):
        raise EvalError("a class is absent from the train split")
    k = classes.size
    x = embeddings.astype(np.float64)
    xtr = x[train_idx]
    onehot = np.zeros((train_idx.size, k))
    onehot[np.arange(train_idx.size), labels[train_idx]] = 1.0

    w = np.zeros((x.shape[1], k))
    b = np.zeros((1, k))
    n = xtr.shape[0]
    for _ in range(steps):
        logits = xtr @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        delta = (p - onehot) / n
        w -= lr * (xtr.T @ delta + l2 * w)
        b -= lr * delta.sum(axis=0, keepdims=True)

    pred = np.argmax(x[test_idx] @ w + b, axis=1)  # argmax takes the lowest tied index
    return float(np.mean(pred == labels[test_idx]))


# ---------------------------------------------------------------------------
# link prediction

@dataclass(frozen=True)
class EdgeSplit:
    """Disjoint undirected edge sets (stored as u < v pairs) plus sampled
    non-edge negatives, 1:1 per split. Val/test edges never enter the
    message-passing graph."""

    train_edges: np.ndarray
    val_edges: np.ndarray
    test_edges: np.ndarray
    train_negatives: np.ndarray
    val_negatives: np.ndarray
    test_negatives: np.ndarray
    seed: int


def _sample_non_edges(num_nodes: int, forbidden: set, count: int, rng) -> np.ndarray:
    out = []
    taken = set()
    while len(out) < count:
        u = int(rng.integers(0, num_nodes))
        v = int(rng.integers(0, num_nodes))
        if u == v:
            continue
        pair = (min(u, v), max(u, v))
        if pair in forbidden or pair in taken:
            continue
        taken.add(pair)
        out.append(pair)
    return np.asarray(out, dtype=np.int64).reshape(-1, 2)


def make_edge_split(graph: SparseGraph, seed: int,
                    fractions: tuple[float, float] = (0.85, 0.05)) -> EdgeSplit:
    """85/5/10 train/val/test split of the undirected edge set."""
    rows = np.repeat(np.arange(graph.num_nodes), graph.degrees())
    pairs = np.stack([rows, graph.col_indices], axis=1)
    pairs = pairs[pairs[:, 0] < pairs[:, 1]]
    m = pairs.shape[0]
    if m < 3:
        raise EvalError("graph has too few edges to split")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xED6E]))
    pairs = pairs[rng.permutation(m)]
    n_train = int(round(fractions[0] * m))
    n_val = int(round(fractions[1] * m))
    n_train = min(n_train, m - 2)
    train_e = pairs[:n_train]
    val_e = pairs[n_train:n_train + n_val]
    test_e = pairs[n_train + n_val:]
    if test_e.shape[0] == 0:
        raise EvalError("empty test split")
    all_edges = {(int(u), int(v)) for u, v in pairs}
    return EdgeSplit(
        train_edges=train_e, val_edges=val_e, test_edges=test_e,
        train_negatives=_sample_non_edges(graph.num_nodes, all_edges, train_e.shape[0], rng),
        val_negatives=_sample_non_edges(graph.num_nodes, all_edges, val_e.shape[0], rng),
        test_negatives=_sample_non_edges(graph.num_nodes, all_edges, test_e.shape[0], rng),
        seed=seed)


def train_graph_dataset(dataset: Dataset, split: EdgeSplit) -> Dataset:
    """The message-passing dataset: train edges only, same nodes and features."""
    graph = SparseGraph.from_edges(dataset.num_nodes, split.train_edges,
                                   is_undirected=True)
    return Dataset(graph, dataset.features, dataset.labels, dataset.split)


def edge_scores(params: ModelParams, dataset: Dataset, pairs: np.ndarray) -> np.ndarray:
    """sigmoid(z_u . z_v) on decoder outputs over the dataset's own graph."""
    adj = normalize(dataset.graph)
    h = T.tensor(embed(params, dataset, adj))
    z = decode(params, adj, h).values.astype(np.float64)
    dots = np.sum(z[pairs[:, 0]] * z[pairs[:, 1]], axis=1)
    return 1.0 / (1.0 + np.exp(-dots))


def link_prediction_eval(params: ModelParams, dataset: Dataset,
                         split: EdgeSplit) -> tuple[float, float]:
    """AUC and AP over the test edges vs sampled negatives.

    The dataset must be the train-edge message-passing graph the params were
    trained on; test pairs are only scored, never propagated.
    """
    if split.test_edges.shape[0] == 0:
        raise EvalError("empty test split")
    pos = edge_scores(params, dataset, split.test_edges)
    neg = edge_scores(params, dataset, split.test_negatives)
    return auc_score(pos, neg), average_precision(pos, neg)


def _mean_ranks(scores: np.ndarray) -> np.ndarray:
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    s = scores[order]
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and s[j + 1] == s[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auc_score(pos_scores: np.ndarray, neg_scores: np.ndarray) -> float:
    """P(random positive outscores random negative), ties counted half."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise EvalError("auc needs both positive and negative scores")
    ranks = _mean_ranks(np.concatenate([pos, neg]))
    rank_sum = ranks[:pos.size].sum()
    return float((rank_sum - pos.size * (pos.size + 1) / 2.0) / (pos.size * neg.size))


def average_precision(pos_scores: np.ndarray, neg_scores: np.ndarray) -> float:
    """Area under precision-recall by step interpolation over score thresholds."""
    scores = np.concatenate([pos_scores, neg_scores]).astype(np.float64)
    y = np.concatenate([np.ones(len(pos_scores)), np.zeros(len(neg_scores))])
    order = np.argsort(-scores, kind="mergesort")
    scores, y = scores[order], y[order]
    distinct = np.flatnonzero(np.diff(scores)) if scores.size > 1 else np.array([], dtype=int)
    boundaries = np.append(distinct, scores.size - 1)
    tp = np.cumsum(y)[boundaries]
    fp = np.cumsum(1 - y)[boundaries]
    recall = tp / len(pos_scores)
    precision = tp / (tp + fp)
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


# ---------------------------------------------------------------------------
# clustering

def _kmeans_pp_init(x: np.ndarray, k: int, rng) -> np.ndarray:
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[int(rng.integers(0, x.shape[0]))]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[i] = x[int(rng.integers(0, x.shape[0]))]
            continue
        probs = d2 / total
        centers[i] = x[int(rng.choice(x.shape[0], p=probs))]
        d2 = np.minimum(d2, np.sum((x - centers[i]) ** 2, axis=1))
    return centers


def kmeans_run(x: np.ndarray, k: int, rng, max_iter: int = 300,
               tol: float = 1e-6) -> tuple[np.ndarray, float, list[float]]:
    """One Lloyd run from a k-means++ seeding; returns labels, final inertia,
    and the per-iteration inertia history."""
    centers = _kmeans_pp_init(x, k, rng)
    history = []
    labels = np.zeros(x.shape[0], dtype=np.int64)
    for _ in range(max_iter):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(x.shape[0]), labels].sum()))
        new_centers = centers.copy()
        for c in range(k):
            members = x[labels == c]
            if members.shape[0]:
                new_centers[c] = members.mean(axis=0)
        shift = float(np.sqrt(((new_centers - centers) ** 2).sum(axis=1)).max())
        centers = new_centers
        if shift < tol:
            break
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(x.shape[0]), labels].sum())
    history.append(inertia)
    return labels, inertia, history


def kmeans_cluster(embeddings: np.ndarray, k: int, restarts: int = 10,
                   rng=None) -> np.ndarray:
    """Lloyd's algorithm, k-means++ seeding, best of restarts by inertia."""
    if k < 2:
        raise EvalError("k must be >= 2")
    x = np.asarray(embeddings, dtype=np.float64)
    if k > x.shape[0]:
        raise EvalError("k larger than the number of points")
    rng = rng or np.random.default_rng(0)
    best_labels, best_inertia = None, np.inf
    for _ in range(restarts):
        labels, inertia, _ = kmeans_run(x, k, rng)
        if inertia < best_inertia:
            best_labels, best_inertia = labels, inertia
    return best_labels


def _contingency(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ka, kb = int(a.max()) + 1, int(b.max()) + 1
    table = np.zeros((ka, kb), dtype=np.int64)
    np.add.at(table, (a, b), 1)
    return table


def nmi_ari(pred: np.ndarray, true: np.ndarray) -> tuple[float, float]:
    """NMI with arithmetic-mean normalization; standard pair-counting ARI.

    Degenerate cases (either labeling constant) give 0 by the 0/0 = 0
    convention.
    """
    pred = np.asarray(pred, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    if pred.size == 0 or pred.size != true.size:
        raise EvalError("labelings must be non-empty and the same length")
    n = pred.size
    table = _contingency(pred, true)
    pa = table.sum(axis=1) / n
    pb = table.sum(axis=0) / n

    def entropy(p):
        p = p[p > 0]
        return float(-(p * np.log(p)).sum())

    ha, hb = entropy(pa), entropy(pb)
    mi = 0.0
    for i in range(table.shape[0]):
        for j in range(table.shape[1]):
            nij = table[i, j]
            if nij:
                mi += (nij / n) * np.log(nij / n / (pa[i] * pb[j]))
    denom = (ha + hb) / 2.0
    nmi = mi / denom if denom > 0 else 0.0

    def comb2(v):
        return v * (v - 1) / 2.0

    sum_ij = comb2(table.astype(np.float64)).sum()
    sum_a = comb2(table.sum(axis=1).astype(np.float64)).sum()
    sum_b = comb2(table.sum(axis=0).astype(np.float64)).sum()
    total = comb2(float(n))
    expected = sum_a * sum_b / total if total else 0.0
    max_index = (sum_a + sum_b) / 2.0
    ari = ((sum_ij - expected) / (max_index - expected)
           if max_index != expected else 0.0)
    return float(max(0.0, min(1.0, nmi))), float(ari)


# ---------------------------------------------------------------------------
# projection

def pca_2d(embeddings: np.ndarray, tol: float = 1e-7,
           max_iter: int = 5000) -> np.ndarray:
    """Mean-centered projection onto the top-2 principal directions.

    Power iteration with deflation; sign convention: the largest-magnitude
    loading of each direction is positive.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.shape[0] < 2:
        raise EvalError("pca needs at least 2 rows")
    xc = x - x.mean(axis=0, keepdims=True)
    cov = xc.T @ xc / x.shape[0]
    dims = cov.shape[0]
    directions: list[np.ndarray] = []

    def orthogonalize(v):
        for d in directions:
            v = v - (d @ v) * d
        return v

    work = cov.copy()
    for component in range(2):
        v = orthogonalize(np.ones(dims) / np.sqrt(dims))
        norm = np.linalg.norm(v)
        v = v / norm if norm > 1e-12 else _any_orthogonal(directions, dims)
        for _ in range(max_iter):
            nxt = orthogonalize(work @ v)
            norm = np.linalg.norm(nxt)
            if norm < 1e-30:
                break  # deflated matrix is (numerically) zero on this subspace
            nxt /= norm
            done = np.linalg.norm(nxt - v) < tol
            v = nxt
            if done:
                break
        lam = float(v @ work @ v)
        peak = int(np.argmax(np.abs(v)))
        if v[peak] < 0:
            v = -v
        directions.append(v)
        work = work - lam * np.outer(v, v)
    basis = np.stack(directions, axis=1)
    return xc @ basis


def _any_orthogonal(directions: list[np.ndarray], dims: int) -> np.ndarray:
    for i in range(dims):
        v = np.zeros(dims)
        v[i] = 1.0
        for d in directions:
            v = v - (d @ v) * d
        n = np.linalg.norm(v)
        if n > 1e-9:
            return v / n
    raise EvalError("could not find an orthogonal direction")


def aggregate_metrics(per_seed: list[dict]) -> dict:
    """mean and population std per metric across per-seed result dicts."""
    keys = [k for k in per_seed[0] if k != "seed"]
    agg = {}
    for key in keys:
        vals = np.array([r[key] for r in per_seed], dtype=np.float64)
        agg[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return agg
