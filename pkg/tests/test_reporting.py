import numpy as np
import pytest

from spurscope.attribution import BinaryMap, Heatmap, attention_row_map
from spurscope.data import SpuriousDatasetSpec, build_balanced_testset
from spurscope.models import SmallCnnConfig, SmallVitConfig, build_model, encode
from spurscope.reporting import (
    EmbeddingSet,
    Projection2D,
    cluster_alignment,
    export_embeddings,
    joint_probabilities,
    kl_divergence,
    read_pgm,
    render_heatmap,
    tsne_project,
    write_pgm,
)
from spurscope.tensor import ContractError


@pytest.fixture(scope="module")
def ds():
    return build_balanced_testset(SpuriousDatasetSpec(seed=2), 6)


@pytest.fixture(scope="module")
def blobs():
    rng = np.random.default_rng(0)
    X = np.vstack([rng.normal(0, 0.3, (40, 5)), rng.normal(10, 0.3, (40, 5))])
    lab = np.repeat([0, 1], 40)
    return EmbeddingSet(X, lab, lab, 2 * lab + lab)


def brute_silhouette(X, labels) -> float:
    total = 0.0
    for i in range(len(X)):
        d = [float(np.sqrt(((X[i] - X[j]) ** 2).sum())) for j in range(len(X))]
        own = [d[j] for j in range(len(X)) if labels[j] == labels[i] and j != i]
        if not own:
            continue
        a = sum(own) / len(own)
        b = min(
            sum(d[j] for j in range(len(X)) if labels[j] == c) / sum(1 for j in range(len(X)) if labels[j] == c)
            for c in set(labels.tolist()) - {labels[i]}
        )
        total += (b - a) / max(a, b)
    return total / len(X)


class TestEmbeddings:
    def test_rows_match_encode(self, ds):
        m = build_model(SmallCnnConfig(), seed=0)
        emb = export_embeddings(m, ds)
        assert emb.matrix.shape == (24, 64)
        for j in (0, 5, 23):
            np.testing.assert_array_equal(emb.matrix[j], encode(m, ds.images[j : j + 1])[0])
        np.testing.assert_array_equal(emb.g, ds.g)

    def test_permutation(self, ds):
        m = build_model(SmallVitConfig(), seed=0)
        perm = np.random.default_rng(1).permutation(len(ds))
        a, b = export_embeddings(m, ds), export_embeddings(m, ds.subset(perm))
        np.testing.assert_allclose(b.matrix, a.matrix[perm], rtol=1e-5, atol=1e-6)
        np.testing.assert_array_equal(b.y, a.y[perm])

    def test_length_check(self):
        with pytest.raises(ContractError):
            EmbeddingSet(np.zeros((3, 2)), np.zeros(2), np.zeros(3), np.zeros(3))

    def test_empty(self, ds):
        with pytest.raises(ContractError):
            export_embeddings(build_model(SmallCnnConfig(), seed=0), ds.subset([]))

    def test_csv(self, blobs):
        lines = blobs.to_csv().splitlines()
        assert lines[0] == "y,s,g,z0,z1,z2,z3,z4" and len(lines) == 81


class TestTsne:
    def test_shape_finite_and_deterministic(self, blobs):
        a = tsne_project(blobs, perplexity=10, iters=300, seed=3)
        b = tsne_project(blobs, perplexity=10, iters=300, seed=3)
        assert a.coords.shape == (80, 2) and np.isfinite(a.coords).all()
        assert a.coords.tobytes() == b.coords.tobytes() and a.kl >= 0
        assert a.to_json()["schema"] == 1

    def test_kl_non_increasing_after_exaggeration(self, blobs):
        p = tsne_project(blobs, perplexity=10, iters=500, seed=0)
        assert len(p.kl_history) == 401
        assert (np.diff(p.kl_history) <= 1e-6).sum() == 400

    def test_duplicate_rows_coincide(self):
        X = np.random.default_rng(4).normal(size=(40, 6))
        X[7] = X[19]
        p = tsne_project(X, perplexity=8, iters=500, seed=1)
        assert np.linalg.norm(p.coords[7] - p.coords[19]) <= 1e-3

    def test_kl_matches_definition(self):
        X = np.random.default_rng(5).normal(size=(12, 3))
        Y = np.random.default_rng(6).normal(size=(12, 2))
        P = joint_probabilities(X, 3)
        d2 = ((Y[:, None] - Y[None]) ** 2).sum(-1)
        num = 1 / (1 + d2)
        np.fill_diagonal(num, 0)
        Q = num / num.sum()
        mask = ~np.eye(12, dtype=bool)
        assert kl_divergence(P, Y) == pytest.approx(float((P[mask] * np.log(P[mask] / Q[mask])).sum()), rel=1e-6)
        np.testing.assert_allclose(P, P.T)
        assert P.sum() == pytest.approx(1.0)

    def test_infeasible_perplexity(self):
        with pytest.raises(ContractError):
            tsne_project(np.zeros((20, 2)), perplexity=30)
        with pytest.raises(ContractError):
            tsne_project(np.zeros((2001, 2)), perplexity=30)


class TestClusterAlignment:
    def test_separated_blobs(self, blobs):
        assert cluster_alignment(blobs, "y") > 0.9

    def test_random_labels(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(400, 4))
        lab = rng.integers(0, 2, 400)
        assert abs(cluster_alignment(EmbeddingSet(X, lab, lab, lab), "s")) < 0.1

    def test_matches_brute_force_with_duplicates(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(30, 3))
        lab = rng.integers(0, 2, 30)
        X2, l2 = np.vstack([X, X]), np.concatenate([lab, lab])
        for A, L in ((X, lab), (X2, l2)):
            assert cluster_alignment(EmbeddingSet(A, L, L, L), "y") == pytest.approx(brute_silhouette(A, L), abs=1e-9)

    def test_duplicated_points_large_clusters(self):
        rng = np.random.default_rng(3)
        X = np.vstack([rng.normal(0, 1, (500, 2)), rng.normal(3, 1, (500, 2))])
        lab = np.repeat([0, 1], 500)
        a = cluster_alignment(EmbeddingSet(X, lab, lab, lab), "y")
        X2, l2 = np.vstack([X, X]), np.concatenate([lab, lab])
        assert cluster_alignment(EmbeddingSet(X2, l2, l2, l2), "y") == pytest.approx(a, abs=1e-3)

    def test_single_cluster(self, blobs):
        one = EmbeddingSet(blobs.matrix, np.zeros(80, int), np.zeros(80, int), np.zeros(80, int))
        with pytest.raises(ContractError):
            cluster_alignment(one, "s")
        with pytest.raises(ContractError):
            cluster_alignment(Projection2D(np.zeros((2, 2)), 0.0, []), "s")


class TestPgm:
    def test_zero_and_one(self, tmp_path):
        render_heatmap(np.zeros((32, 32)), tmp_path / "z.pgm")
        raw = (tmp_path / "z.pgm").read_bytes()
        assert raw.startswith(b"P5\n32 32\n255\n") and set(raw[len(b"P5\n32 32\n255\n") :]) == {0}
        render_heatmap(np.ones((4, 4)), tmp_path / "o.pgm")
        assert (tmp_path / "o.pgm").read_bytes()[-16:] == b"\xff" * 16

    def test_round_trip_within_quantisation(self, tmp_path):
        v = np.random.default_rng(0).random((32, 32))
        write_pgm(tmp_path / "r.pgm", v)
        assert np.abs(read_pgm(tmp_path / "r.pgm") - v).max() <= 1 / 255

    def test_byte_identical_reruns(self, tmp_path):
        v = np.random.default_rng(1).random((32, 32))
        render_heatmap(Heatmap(v, 0), tmp_path / "a.pgm")
        render_heatmap(Heatmap(v, 0), tmp_path / "b.pgm")
        assert (tmp_path / "a.pgm").read_bytes() == (tmp_path / "b.pgm").read_bytes()

    def test_composite_and_attention(self, tmp_path, ds):
        img = ds.images[0]
        render_heatmap(BinaryMap(np.eye(32, dtype=bool), 0.5), tmp_path / "c.pgm", overlay=img, mask=ds.masks[0])
        assert read_pgm(tmp_path / "c.pgm").shape == (32, 96)
        a = attention_row_map(build_model(SmallVitConfig(), seed=0), img, 1)
        render_heatmap(a, tmp_path / "a.pgm", overlay=img)
        out = read_pgm(tmp_path / "a.pgm")
        assert out.shape == (32, 64) and out[:, 32:].max() == 1.0

    def test_io_error_carries_path(self, tmp_path):
        bad = tmp_path / "missing" / "x.pgm"
        with pytest.raises(OSError, match="missing"):
            render_heatmap(np.zeros((2, 2)), bad)
