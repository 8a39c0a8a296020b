"""Tests for the synthetic task generator, k-means, and quantization."""

import numpy as np
import pytest

import uniticl as u
from uniticl.seeding import derive_rng
from uniticl.tasks import (
    Codebook,
    MotifPoolExhaustedError,
    anchors,
    load_tasks,
    motif_pool,
    save_tasks,
    task_from_dict,
    task_to_dict,
)

DIFF = u.Difficulty(noise_rate=0.0, motif_len=3)


class TestGenTaskSpec:
    def test_distinct_motifs_within_task(self):
        task = u.gen_task_spec(1, 2, DIFF, "train", n_units=32)
        motifs = task.motifs()
        assert len(motifs) == 2
        assert motifs[0] != motifs[1]
        assert all(len(m) == 3 for m in motifs)

    def test_deterministic(self):
        a = u.gen_task_spec(1, 4, DIFF, "train", n_units=32)
        b = u.gen_task_spec(1, 4, DIFF, "train", n_units=32)
        assert a.task_id == b.task_id
        assert a.motifs() == b.motifs()
        for ga, gb in zip(a.class_gens, b.class_gens):
            np.testing.assert_array_equal(ga.unigram_bias, gb.unigram_bias)

    def test_motif_pool_exhausted(self):
        with pytest.raises(MotifPoolExhaustedError, match="motif pool exhausted"):
            u.gen_task_spec(2, 300, DIFF, "train", n_units=32)

    def test_small_symbol_space_exhausts_pool(self):
        small = u.Difficulty(noise_rate=0.0, motif_len=2)
        # 3 symbols -> 9 motifs -> 4 per group; 5 classes cannot fit.
        with pytest.raises(MotifPoolExhaustedError):
            u.gen_task_spec(0, 5, small, "train", n_units=3)
        task = u.gen_task_spec(0, 4, small, "train", n_units=3)
        assert task.num_classes == 4

    def test_num_classes_bounds(self):
        with pytest.raises(ValueError):
            u.gen_task_spec(1, 1, DIFF, "train", n_units=32)
        with pytest.raises(ValueError):
            u.gen_task_spec(1, 9, DIFF, "train", n_units=32)

    def test_unseen_task_separation(self):
        for seed in range(5):
            tr = u.gen_task_spec(seed, 6, DIFF, "train", n_units=32)
            te = u.gen_task_spec(seed + 100, 6, DIFF, "test", n_units=32)
            assert not set(tr.motifs()) & set(te.motifs())

    def test_pool_halves_disjoint(self):
        train_half, test_half = motif_pool(32, 3)
        assert len(train_half) == len(test_half) == 128
        assert not set(train_half) & set(test_half)

    def test_json_round_trip(self, tmp_path):
        task = u.gen_task_spec(5, 3, DIFF, "test", n_units=16)
        doc = task_to_dict(task)
        back = task_from_dict(doc)
        assert back.task_id == task.task_id
        assert back.motifs() == task.motifs()
        assert back.group == task.group
        assert back.difficulty == task.difficulty
        path = tmp_path / "tasks.json"
        save_tasks([task], path)
        assert load_tasks(path)[0].motifs() == task.motifs()


class TestSampleFeatures:
    def test_deterministic_under_seed(self):
        task = u.gen_task_spec(1, 2, DIFF, "train", n_units=16)
        a = u.sample_features(task, 0, 12, derive_rng("x", 0))
        b = u.sample_features(task, 0, 12, derive_rng("x", 0))
        np.testing.assert_array_equal(a, b)

    def test_length_shorter_than_motif_rejected(self):
        task = u.gen_task_spec(1, 2, DIFF, "train", n_units=16)
        with pytest.raises(ValueError, match="motif_len"):
            u.sample_features(task, 0, 2, derive_rng("x", 0))

    def test_class_index_out_of_range(self):
        task = u.gen_task_spec(1, 2, DIFF, "train", n_units=16)
        with pytest.raises(ValueError):
            u.sample_features(task, 2, 8, derive_rng("x", 0))


class TestKmeans:
    def test_k1_centroid_is_mean(self):
        pts = np.random.default_rng(0).normal(size=(40, 3))
        cb = u.kmeans_fit(pts, 1, max_iters=10, seed=0)
        np.testing.assert_allclose(cb.centroids[0], pts.mean(axis=0), atol=1e-12)

    def test_k_distinct_points_fixed_point(self):
        pts = np.arange(12, dtype=float).reshape(4, 3) * 7.0
        cb = u.kmeans_fit(pts, 4, max_iters=20, seed=1)
        # centroids are a permutation of the points, inertia 0
        matched = {tuple(c) for c in cb.centroids}
        assert matched == {tuple(p) for p in pts}
        assert cb.inertia_trace[-1] == pytest.approx(0.0, abs=1e-12)

    def test_blob_inertia_monotone_and_oracle_assignment(self):
        rng = np.random.default_rng(3)
        blobs = np.concatenate([rng.normal(c, 0.4, size=(60, 2)) for c in ((0, 0), (5, 5), (-5, 4))])
        cb = u.kmeans_fit(blobs, 3, max_iters=30, seed=0)
        trace = cb.inertia_trace
        assert all(trace[i + 1] <= trace[i] + 1e-9 for i in range(len(trace) - 1))
        # brute-force nearest-centroid oracle
        assign = u.quantize(cb, blobs)
        for i, p in enumerate(blobs):
            best, best_d = 0, np.inf
            for j, c in enumerate(cb.centroids):
                d = float(np.sum((p - c) ** 2))
                if d < best_d:
                    best, best_d = j, d
            assert assign[i] == best

    def test_fewer_distinct_points_than_k(self):
        pts = np.zeros((10, 2))
        pts[5:] = 1.0
        with pytest.raises(ValueError, match="distinct"):
            u.kmeans_fit(pts, 3, seed=0)

    def test_no_duplicate_centroids(self):
        rng = np.random.default_rng(5)
        pts = rng.normal(size=(120, 4))
        cb = u.kmeans_fit(pts, 10, max_iters=40, seed=2)
        assert np.unique(cb.centroids, axis=0).shape[0] == 10


class TestQuantize:
    def test_exact_centroid_maps_to_itself(self):
        cb = Codebook(centroids=np.eye(4) * 3.0, k=4)
        units = u.quantize(cb, np.array([[0.0, 0.0, 3.0, 0.0]]))
        assert units.tolist() == [2]

    def test_tie_breaks_to_lowest_index(self):
        cents = np.zeros((6, 2))
        cents[2] = (1.0, 0.0)
        cents[5] = (-1.0, 0.0)
        cents[0] = (9.0, 9.0)
        cents[1] = (9.0, -9.0)
        cents[3] = (-9.0, 9.0)
        cents[4] = (-9.0, -9.0)
        cb = Codebook(centroids=cents, k=6)
        units = u.quantize(cb, np.array([[0.0, 0.0]]))  # equidistant from 2 and 5
        assert units.tolist() == [2]

    def test_matches_exhaustive_scan(self):
        rng = np.random.default_rng(9)
        cb = Codebook(centroids=rng.normal(size=(20, 5)), k=20)
        frames = rng.normal(size=(500, 5))
        fast = u.quantize(cb, frames)
        for i in range(frames.shape[0]):
            dists = [float(np.sum((frames[i] - c) ** 2)) for c in cb.centroids]
            best = 0
            for j in range(1, 20):
                if dists[j] < dists[best]:
                    best = j
            assert fast[i] == best

    def test_dimension_mismatch(self):
        cb = Codebook(centroids=np.zeros((3, 4)), k=3)
        with pytest.raises(ValueError, match="dim"):
            u.quantize(cb, np.zeros((5, 3)))

    def test_idempotence_on_centroids(self):
        rng = np.random.default_rng(2)
        cb = Codebook(centroids=rng.normal(size=(11, 6)), k=11)
        np.testing.assert_array_equal(u.quantize(cb, cb.centroids), np.arange(11))


class TestSampleUtterance:
    def test_motif_recovered_exactly_at_motif_length(self, tiny_tasks, tiny_codebook):
        task = u.gen_task_spec(3, 2, DIFF, "train", n_units=16)
        useq = u.sample_utterance(task, 1, 3, tiny_codebook, derive_rng("m", 1))
        assert tuple(useq) == task.motifs()[1]

    def test_motif_contained_after_quantization(self, tiny_codebook):
        # noise_rate=0: the quantized stream contains the motif verbatim
        task = u.gen_task_spec(4, 2, DIFF, "train", n_units=16)
        for trial in range(10):
            seq = u.sample_utterance(task, 0, 14, tiny_codebook, derive_rng("c", trial))
            m = task.motifs()[0]
            assert any(tuple(seq[j : j + 3]) == m for j in range(12))

    def test_deterministic(self, tiny_codebook):
        task = u.gen_task_spec(3, 2, DIFF, "train", n_units=16)
        a = u.sample_utterance(task, 0, 10, tiny_codebook, derive_rng("d", 5))
        b = u.sample_utterance(task, 0, 10, tiny_codebook, derive_rng("d", 5))
        np.testing.assert_array_equal(a, b)

    def test_histogram_classifier_learns_task(self, tiny_codebook):
        # tasks must be solvable from unit counts alone
        task = u.gen_task_spec(8, 4, u.Difficulty(noise_rate=0.05, motif_len=2), "train", n_units=16)
        k = 16

        def hist(seq):
            c = np.bincount(seq, minlength=k).astype(float)
            return c / c.sum()

        means = []
        for c in range(4):
            hs = [hist(u.sample_utterance(task, c, 14, tiny_codebook, derive_rng("tr", c, i))) for i in range(60)]
            means.append(np.mean(hs, axis=0))
        means = np.stack(means)
        hits = 0
        n_eval = 200
        for c in range(4):
            for i in range(n_eval // 4):
                s = u.sample_utterance(task, c, 14, tiny_codebook, derive_rng("te", c, i))
                hits += int(np.argmin(((hist(s)[None] - means) ** 2).sum(axis=1)) == c)
        assert hits / (n_eval // 4 * 4) >= 0.9


class TestFitTaskCodebook:
    def test_anchor_alignment_keeps_units_stable(self, tiny_tasks, tiny_codebook):
        ref = anchors(16, 8)
        aligned = np.sqrt(((tiny_codebook.centroids - ref) ** 2).sum(axis=1))
        # most units sit on their anchors (rarely-visited symbols may drift)
        assert np.median(aligned) < 1.0

    def test_inertia_trace_recorded(self, tiny_codebook):
        trace = tiny_codebook.inertia_trace
        assert len(trace) >= 2
        assert all(trace[i + 1] <= trace[i] + 1e-9 for i in range(len(trace) - 1))
