"""Datasets and episode sampling: statistics oracles and format contracts."""

import numpy as np
import pytest
from scipy import stats as scipy_stats

from bhmaml.episodes import (
    Dataset,
    load_image_dataset,
    make_synthetic,
    sample_episode,
    save_dataset,
)
from bhmaml.errors import CapacityError, ContractError, FormatError


@pytest.fixture(scope="module")
def blobs():
    return make_synthetic("blobs", 20, 2, 30, 0.1, seed=0)


class TestSampleEpisode:
    def test_five_way_one_shot_support_size(self, blobs):
        ep = sample_episode(blobs, "train", 5, 1, 7, np.random.default_rng(0))
        assert len(ep.support_y) == 5
        assert len(ep.query_y) == 5 * 7

    def test_fixed_seed_reproduces_episode(self, blobs):
        e1 = sample_episode(blobs, "train", 5, 1, 7, np.random.default_rng(3))
        e2 = sample_episode(blobs, "train", 5, 1, 7, np.random.default_rng(3))
        np.testing.assert_array_equal(e1.support_x, e2.support_x)
        np.testing.assert_array_equal(e1.query_x, e2.query_x)
        assert e1.class_map == e2.class_map

    def test_class_frequencies_uniform(self, blobs):
        """Over 1000 draws every eligible class appears, within 4 sigma of
        the multinomial expectation."""
        rng = np.random.default_rng(4)
        counts = {cid: 0 for cid in blobs.splits["train"]}
        n_draws, n_way = 1000, 5
        for _ in range(n_draws):
            ep = sample_episode(blobs, "train", n_way, 1, 2, rng)
            for cid in ep.class_map:
                counts[cid] += 1
        n_classes = len(counts)
        expected = n_draws * n_way / n_classes
        sigma = np.sqrt(n_draws * (n_way / n_classes) * (1 - n_way / n_classes))
        for cid, c in counts.items():
            assert c > 0, f"class {cid} never appeared"
            assert abs(c - expected) < 4 * sigma

    def test_support_query_disjoint(self, blobs):
        rng = np.random.default_rng(5)
        for _ in range(50):
            ep = sample_episode(blobs, "train", 5, 2, 5, rng)
            sup = {row.tobytes() for row in ep.support_x}
            qry = {row.tobytes() for row in ep.query_x}
            assert not sup & qry

    def test_class_map_bijection(self, blobs):
        ep = sample_episode(blobs, "val", 4, 1, 3, np.random.default_rng(6))
        assert len(set(ep.class_map)) == 4
        assert ep.class_map == sorted(ep.class_map)  # local labels by sorted global id
        recovered = [ep.class_map[y] for y in ep.support_y]
        assert sorted(set(recovered)) == ep.class_map

    def test_insufficient_classes(self, blobs):
        with pytest.raises(CapacityError):
            sample_episode(blobs, "val", 50, 1, 1, np.random.default_rng(7))

    def test_insufficient_examples(self, blobs):
        with pytest.raises(CapacityError):
            sample_episode(blobs, "train", 2, 10, 25, np.random.default_rng(8))

    def test_independent_streams_chi_square(self, blobs):
        """Class occurrence counts from disjoint rng streams look multinomial."""
        streams = np.random.SeedSequence(9).spawn(600)
        counts = {cid: 0 for cid in blobs.splits["train"]}
        for ss in streams:
            ep = sample_episode(blobs, "train", 5, 1, 2, np.random.default_rng(ss))
            for cid in ep.class_map:
                counts[cid] += 1
        _, p = scipy_stats.chisquare(list(counts.values()))
        assert p > 0.01


class TestMakeSynthetic:
    def test_same_seed_identical(self):
        d1 = make_synthetic("blobs", 6, 6, 10, 0.2, seed=3)
        d2 = make_synthetic("blobs", 6, 6, 10, 0.2, seed=3)
        for cid in d1.classes:
            np.testing.assert_array_equal(d1.classes[cid], d2.classes[cid])

    def test_simplex_pairwise_distances(self):
        d = make_synthetic("blobs", 6, 8, 200, 1e-9, seed=1, separation=4.0)
        means = np.stack([d.classes[c].mean(axis=0) for c in range(6)])
        dist = np.linalg.norm(means[:, None] - means[None, :], axis=-1)
        off = dist[~np.eye(6, dtype=bool)]
        np.testing.assert_allclose(off, 4.0, atol=1e-6)

    def test_polygon_minimum_distance(self):
        d = make_synthetic("blobs", 12, 2, 100, 1e-9, seed=2, separation=4.0)
        means = np.stack([d.classes[c].mean(axis=0) for c in range(12)])
        dist = np.linalg.norm(means[:, None] - means[None, :], axis=-1)
        off = dist[~np.eye(12, dtype=bool)]
        assert abs(off.min() - 4.0) < 1e-6

    def test_vanishing_spread_separable(self):
        d = make_synthetic("blobs", 8, 8, 20, 1e-12, seed=4)
        means = np.stack([d.classes[c].mean(axis=0) for c in range(8)])
        within = max(
            np.linalg.norm(d.classes[c] - means[c], axis=1).max() for c in range(8)
        )
        between = np.linalg.norm(means[:, None] - means[None, :], axis=-1)
        assert within < 1e-9 < between[~np.eye(8, dtype=bool)].min()

    def test_bayes_error_bound_spread_vs_separation(self):
        """spread 0.1 at distance 4: distance to the wrong mean exceeds the
        decision midpoint by ~20 noise sigmas, so the Bayes error is < 1e-6."""
        d = make_synthetic("blobs", 10, 2, 500, 0.1, seed=5, separation=4.0)
        means = np.stack([d.classes[c].mean(axis=0) for c in range(10)])
        mis = 0
        for c in range(10):
            dist = np.linalg.norm(d.classes[c][:, None] - means[None], axis=-1)
            mis += int((dist.argmin(axis=1) != c).sum())
        assert mis == 0

    def test_rings_radii(self):
        d = make_synthetic("rings", 4, 3, 300, 0.05, seed=6, separation=4.0)
        for cid in range(4):
            r = np.linalg.norm(d.classes[cid], axis=1)
            assert abs(r.mean() - (cid + 1) * 2.0) < 0.05

    def test_splits_disjoint_and_interleaved(self):
        d = make_synthetic("blobs", 20, 2, 10, 0.1, seed=7)
        all_ids = sorted(d.splits["train"] + d.splits["val"] + d.splits["test"])
        assert all_ids == list(range(20))
        assert 1 in d.splits["val"] and 3 in d.splits["test"]

    def test_preconditions(self):
        with pytest.raises(ContractError):
            make_synthetic("blobs", 1, 4, 5, 0.1, seed=0)
        with pytest.raises(ContractError):
            make_synthetic("spiral", 4, 4, 5, 0.1, seed=0)


class TestDiskFormats:
    def test_vector_dataset_round_trip(self, tmp_path, blobs):
        root = str(tmp_path / "ds")
        save_dataset(blobs, root)
        loaded = load_image_dataset(root)
        assert loaded.input_shape == blobs.input_shape
        assert {k: len(v) for k, v in loaded.splits.items()} == {
            k: len(v) for k, v in blobs.splits.items()
        }
        orig = np.sort(blobs.classes[blobs.splits["train"][0]], axis=0)
        got_id = loaded.splits["train"][0]
        np.testing.assert_allclose(np.sort(loaded.classes[got_id], axis=0), orig, rtol=0, atol=0)

    def test_pgm_round_trip_and_scaling(self, tmp_path):
        rng = np.random.default_rng(8)
        img = (rng.integers(0, 256, size=(6, 5, 1)) / 255.0).astype(np.float64)
        img[0, 0, 0] = 1.0  # pixel 255
        img[0, 1, 0] = 0.0  # pixel 0
        ds = Dataset(
            classes={0: np.stack([img, img]), 1: np.stack([img, img])},
            splits={"train": [0], "val": [1], "test": []},
            input_shape=(6, 5, 1),
        )
        root = str(tmp_path / "imgs")
        save_dataset(ds, root)
        loaded = load_image_dataset(root)
        ex = loaded.classes[loaded.splits["train"][0]][0]
        assert ex[0, 0, 0] == 1.0 and ex[0, 1, 0] == 0.0
        np.testing.assert_allclose(ex, img, atol=1 / 255.0 / 2 + 1e-12)

    def test_two_classes_three_images(self, tmp_path):
        root = tmp_path / "two"
        for cls in ("a", "b"):
            d = root / "train" / cls
            d.mkdir(parents=True)
            for i in range(3):
                img = np.full((4, 4), i * 40, dtype=np.uint8)
                (d / f"{i}.pgm").write_bytes(b"P5\n4 4\n255\n" + img.tobytes())
        ds = load_image_dataset(str(root))
        assert len(ds.splits["train"]) == 2
        assert all(len(ds.classes[c]) == 3 for c in ds.splits["train"])

    def test_malformed_pgm_header(self, tmp_path):
        d = tmp_path / "bad" / "train" / "c"
        d.mkdir(parents=True)
        (d / "x.pgm").write_bytes(b"P6\n4 4\n255\n" + bytes(16))
        with pytest.raises(FormatError, match="x.pgm"):
            load_image_dataset(str(tmp_path / "bad"))

    def test_truncated_raster(self, tmp_path):
        d = tmp_path / "trunc" / "train" / "c"
        d.mkdir(parents=True)
        (d / "x.pgm").write_bytes(b"P5\n4 4\n255\n" + bytes(10))
        with pytest.raises(FormatError, match="raster"):
            load_image_dataset(str(tmp_path / "trunc"))

    def test_inconsistent_sizes_names_file(self, tmp_path):
        d = tmp_path / "mix" / "train" / "c"
        d.mkdir(parents=True)
        (d / "a.pgm").write_bytes(b"P5\n2 2\n255\n" + bytes(4))
        (d / "b.pgm").write_bytes(b"P5\n3 3\n255\n" + bytes(9))
        with pytest.raises(FormatError, match="b.pgm"):
            load_image_dataset(str(tmp_path / "mix"))

    def test_empty_class_dir(self, tmp_path):
        d = tmp_path / "empty" / "train" / "c"
        d.mkdir(parents=True)
        with pytest.raises(CapacityError):
            load_image_dataset(str(tmp_path / "empty"))

    def test_overlapping_split_ids_rejected(self):
        with pytest.raises(ContractError):
            Dataset(classes={0: np.zeros((3, 2))}, splits={"train": [0], "val": [0]},
                    input_shape=(2,))
