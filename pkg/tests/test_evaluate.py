import numpy as np
import pytest

from gcmae.config import TrainConfig
from gcmae.evaluate import (EvalError, auc_score, average_precision,
                            kmeans_cluster, kmeans_run, linear_probe,
                            link_prediction_eval, make_edge_split, nmi_ari,
                            pca_2d, train_graph_dataset)
from gcmae.graph import Dataset, SbmSpec, SparseGraph, TEST, TRAIN, generate_sbm


# ---------------------------------------------------------------------------
# oracles

def auc_pairwise_oracle(pos, neg):
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def ari_pair_oracle(a, b):
    n = len(a)
    same_a = same_b = same_both = 0
    pairs = 0
    for i in range(n):
        for j in range(i + 1, n):
            pairs += 1
            sa, sb = a[i] == a[j], b[i] == b[j]
            same_a += sa
            same_b += sb
            same_both += sa and sb
    expected = same_a * same_b / pairs
    max_index = (same_a + same_b) / 2.0
    if max_index == expected:
        return 0.0
    return (same_both - expected) / (max_index - expected)


def nmi_direct_oracle(a, b):
    n = len(a)
    mi = 0.0
    for ca in np.unique(a):
        for cb in np.unique(b):
            nij = np.sum((a == ca) & (b == cb))
            if nij:
                pa, pb = np.sum(a == ca) / n, np.sum(b == cb) / n
                mi += nij / n * np.log((nij / n) / (pa * pb))

    def ent(v):
        p = np.bincount(v) / n
        p = p[p > 0]
        return -(p * np.log(p)).sum()

    denom = (ent(a) + ent(b)) / 2
    return mi / denom if denom > 0 else 0.0


class TestLinearProbe:
    def test_one_hot_embeddings_perfect(self):
        labels = np.array([0, 1, 2] * 30)
        emb = np.eye(3, dtype=np.float32)[labels]
        split = np.full(90, TEST, dtype=np.int8)
        split[:30] = TRAIN
        labels_train_ok = labels.copy()
        assert linear_probe(emb, labels_train_ok, split) == 1.0

    def test_shuffled_labels_chance_level(self):
        rng = np.random.default_rng(0)
        n, k = 300, 3
        emb = rng.normal(size=(n, 16)).astype(np.float32)
        labels = rng.integers(0, k, size=n)
        split = np.full(n, TEST, dtype=np.int8)
        train = rng.choice(n, size=60, replace=False)
        split[train] = TRAIN
        if np.unique(labels[train]).size < k:  # keep all classes in train
            labels[train[:k]] = np.arange(k)
        acc = linear_probe(emb, labels, split)
        assert abs(acc - 1.0 / k) < 0.1

    def test_class_absent_from_train_split(self):
        emb = np.eye(2, dtype=np.float32)[[0, 0, 1, 1]]
        labels = np.array([0, 0, 1, 1])
        split = np.array([TRAIN, TRAIN, TEST, TEST], dtype=np.int8)
        with pytest.raises(EvalError, match="absent"):
            linear_probe(emb, labels, split)

    def test_orthogonal_rotation_invariance(self):
        rng = np.random.default_rng(1)
        ds = generate_sbm(SbmSpec(blocks=3, nodes_per_block=50, p_in=0.2,
                                  p_out=0.02, feature_dim=8,
                                  feature_separation=2.0, noise_sigma=0.5, seed=4))
        emb = ds.features
        q, _ = np.linalg.qr(rng.normal(size=(8, 8)))
        base = linear_probe(emb, ds.labels, ds.split)
        rotated = linear_probe((emb @ q).astype(np.float32), ds.labels, ds.split)
        assert abs(base - rotated) <= 0.01


class TestAuc:
    def test_perfect_separation(self):
        assert auc_score(np.ones(5), np.zeros(7)) == 1.0

    def test_all_equal_scores(self):
        assert auc_score(np.full(4, 0.3), np.full(6, 0.3)) == 0.5

    def test_matches_pairwise_oracle_exactly(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            pos = np.round(rng.random(10), 1)  # coarse grid forces ties
            neg = np.round(rng.random(10), 1)
            assert auc_score(pos, neg) == auc_pairwise_oracle(pos, neg)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(3)
        pos, neg = rng.random(15), rng.random(20)
        a = auc_score(pos, neg)
        b = auc_score(np.exp(3 * pos), np.exp(3 * neg))
        assert a == pytest.approx(b, abs=1e-12)


class TestAveragePrecision:
    def test_perfect_separation(self):
        assert average_precision(np.ones(5) * 0.9, np.zeros(5)) == 1.0

    def test_known_small_case(self):
        # scores: pos 0.9, 0.6; neg 0.7, 0.2 -> ranking pos neg pos neg
        ap = average_precision(np.array([0.9, 0.6]), np.array([0.7, 0.2]))
        # thresholds: tp/fp -> P at recall steps: 1/1 (R .5), 2/3 (R 1)
        assert ap == pytest.approx(0.5 * 1.0 + 0.5 * (2 / 3), rel=1e-12)

    def test_threshold_grouping_with_ties(self):
        pos = np.array([0.8, 0.5])
        neg = np.array([0.5, 0.1])
        # at threshold .5 both the tied pos and neg enter together
        ap = average_precision(pos, neg)
        assert ap == pytest.approx(0.5 * 1.0 + 0.5 * (2 / 3), rel=1e-12)


class TestEdgeSplit:
    def graph(self):
        rng = np.random.default_rng(5)
        edges = [(i, j) for i in range(40) for j in range(i + 1, 40)
                 if rng.random() < 0.2]
        return SparseGraph.from_edges(40, edges)

    def test_fractions_and_disjoint(self):
        g = self.graph()
        split = make_edge_split(g, seed=0)
        m = g.num_arcs // 2
        total = (split.train_edges.shape[0] + split.val_edges.shape[0]
                 + split.test_edges.shape[0])
        assert total == m
        assert split.train_edges.shape[0] == int(round(0.85 * m))
        sets = [set(map(tuple, e.tolist())) for e in
                (split.train_edges, split.val_edges, split.test_edges)]
        assert not (sets[0] & sets[1]) and not (sets[0] & sets[2]) and not (sets[1] & sets[2])

    def test_no_leakage_into_message_graph(self):
        g = self.graph()
        split = make_edge_split(g, seed=1)
        ds = Dataset(g, np.zeros((40, 3), dtype=np.float32))
        mp = train_graph_dataset(ds, split)
        arcs = mp.graph.arc_set()
        for u, v in split.test_edges.tolist() + split.val_edges.tolist():
            assert (u, v) not in arcs and (v, u) not in arcs

    def test_negatives_are_non_edges(self):
        g = self.graph()
        split = make_edge_split(g, seed=2)
        arcs = g.arc_set()
        for u, v in split.test_negatives.tolist():
            assert (u, v) not in arcs and (v, u) not in arcs
        assert split.test_negatives.shape == split.test_edges.shape

    def test_deterministic(self):
        g = self.graph()
        a, b = make_edge_split(g, seed=3), make_edge_split(g, seed=3)
        assert np.array_equal(a.test_edges, b.test_edges)
        assert np.array_equal(a.test_negatives, b.test_negatives)


class TestKmeans:
    def test_two_far_blobs(self):
        x = np.array([[0.0, 0], [0.1, 0], [10, 10], [10.1, 10]])
        labels = kmeans_cluster(x, 2, rng=np.random.default_rng(0))
        assert labels[0] == labels[1] and labels[2] == labels[3]
        assert labels[0] != labels[2]

    def test_k_equals_n_zero_inertia(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(6, 3))
        labels, inertia, _ = kmeans_run(x, 6, np.random.default_rng(0))
        assert inertia == pytest.approx(0.0, abs=1e-12)

    def test_inertia_non_increasing(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(120, 5))
        for seed in range(5):
            _, _, history = kmeans_run(x, 4, np.random.default_rng(seed))
            assert all(b <= a + 1e-9 for a, b in zip(history, history[1:]))

    def test_k_larger_than_n(self):
        with pytest.raises(EvalError):
            kmeans_cluster(np.zeros((3, 2)), 5)

    def test_deterministic_in_seed(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(50, 4))
        a = kmeans_cluster(x, 3, rng=np.random.default_rng(7))
        b = kmeans_cluster(x, 3, rng=np.random.default_rng(7))
        assert np.array_equal(a, b)


class TestNmiAri:
    def test_identical_labelings(self):
        a = np.array([0, 0, 1, 1, 2, 2])
        nmi, ari = nmi_ari(a, a.copy())
        assert nmi == pytest.approx(1.0)
        assert ari == pytest.approx(1.0)

    def test_constant_labeling_degenerate(self):
        pred = np.zeros(10, dtype=np.int64)
        true = np.array([0, 1] * 5)
        nmi, ari = nmi_ari(pred, true)
        assert nmi == 0.0
        assert ari == 0.0

    def test_matches_pair_counting_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            a = rng.integers(0, 4, size=30)
            b = rng.integers(0, 3, size=30)
            nmi, ari = nmi_ari(a, b)
            assert ari == pytest.approx(ari_pair_oracle(a, b), abs=1e-12)
            assert nmi == pytest.approx(nmi_direct_oracle(a, b), abs=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(5)
        a = rng.integers(0, 3, size=40)
        b = rng.integers(0, 5, size=40)
        assert nmi_ari(a, b) == pytest.approx(nmi_ari(b, a))

    def test_label_permutation_invariance(self):
        a = np.array([0, 0, 1, 1, 2, 2, 0, 1])
        b = np.array([2, 2, 0, 0, 1, 1, 2, 0])  # same partition, renamed
        nmi, ari = nmi_ari(a, b)
        assert nmi == pytest.approx(1.0)
        assert ari == pytest.approx(1.0)


class TestPca:
    def test_collinear_points_second_coordinate_zero(self):
        rng = np.random.default_rng(6)
        direction = np.array([1.0, 2.0, -1.0, 0.5])
        x = np.outer(rng.normal(size=30), direction)
        coords = pca_2d(x)
        assert np.max(np.abs(coords[:, 1])) < 1e-5

    def test_variance_ordering(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(40, 6)) * np.array([5, 3, 1, 1, 1, 1])
        coords = pca_2d(x)
        assert coords[:, 0].var() >= coords[:, 1].var()

    def test_matches_eigendecomposition_oracle(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(10, 4))
        coords = pca_2d(x)
        xc = x - x.mean(axis=0)
        cov = xc.T @ xc / x.shape[0]
        evals, evecs = np.linalg.eigh(cov)
        basis = evecs[:, ::-1][:, :2]
        for j in range(2):  # match the sign convention
            peak = np.argmax(np.abs(basis[:, j]))
            if basis[peak, j] < 0:
                basis[:, j] = -basis[:, j]
        expect = xc @ basis
        assert np.max(np.abs(coords - expect)) < 1e-5

    def test_reconstruction_error_matches_oracle(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(10, 4))
        coords = pca_2d(x)
        xc = x - x.mean(axis=0)
        cov = xc.T @ xc / x.shape[0]
        evals = np.linalg.eigvalsh(cov)
        # residual variance = sum of trailing eigenvalues
        residual = (xc ** 2).sum() / x.shape[0] - (coords ** 2).sum() / x.shape[0]
        assert residual == pytest.approx(evals[:2].sum(), abs=1e-5)


class TestLinkPredictionEndToEnd:
    def test_auc_on_separable_sbm(self):
        ds = generate_sbm(SbmSpec(blocks=2, nodes_per_block=30, p_in=0.3,
                                  p_out=0.02, feature_dim=8,
                                  feature_separation=2.0, noise_sigma=0.5, seed=6))
        split = make_edge_split(ds.graph, seed=0)
        mp = train_graph_dataset(ds, split)
        cfg = TrainConfig(epochs=60, d_hidden=16, d_proj=16, depth=2,
                          block_size=60, probe_every=0, seed=0).validate()
        from gcmae.training import train
        params, _ = train(mp, cfg)
        auc, ap = link_prediction_eval(params, mp, split)
        assert 0.0 <= auc <= 1.0 and 0.0 <= ap <= 1.0
        assert auc > 0.6  # well above chance on a strongly separable graph
