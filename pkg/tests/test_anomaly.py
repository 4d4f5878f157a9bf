import numpy as np
import pytest
import torch

from aam.anomaly import (
    MemoryBank,
    build_memory_bank,
    calibrate,
    calibration_stats,
    collect_bank_features,
    coreset_subsample,
    extract_patch_features,
    feature_dim,
    load_bank,
    nearest_distances,
    patch_grid_shape,
    save_bank,
    score,
    score_batch,
)
from aam.denoiser import Denoiser, DenoiserConfig
from aam.errors import ConfigError
from aam.schedule import build_schedule
from tests.conftest import random_images


def brute_force_nearest(queries, rows):
    """Independent oracle: full scan, one query at a time, float64."""
    q = queries.astype(np.float64)
    r = rows.astype(np.float64)
    out = np.empty(q.shape[0])
    for i in range(q.shape[0]):
        out[i] = np.sqrt(((r - q[i]) ** 2).sum(axis=1)).min()
    return out


def seed_with_start_zero(n):
    return next(s for s in range(1000) if np.random.default_rng(s).integers(n) == 0)


@pytest.fixture(scope="module")
def zero_model():
    model = Denoiser(DenoiserConfig(image_size=8))
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    model.eval()
    return model


class TestExtractPatchFeatures:
    def test_shape_counting(self):
        torch.manual_seed(0)
        model = Denoiser(DenoiserConfig(image_size=32))
        model.eval()
        feats = extract_patch_features(random_images(2, 32, seed=0), model, 10)
        # taps at 16x16 (64ch) and 8x8 (64ch) -> 64 rows of dim 128 per image
        assert patch_grid_shape(model) == (8, 8)
        assert feats.shape == (2, 64, 128)
        assert feature_dim(model) == 128

    def test_constant_network_gives_identical_rows(self, zero_model):
        feats = extract_patch_features(random_images(1, 8, seed=1), zero_model, 0)
        assert np.allclose(feats, feats[0, 0])

    def test_identical_images_identical_features(self, tiny_model):
        img = random_images(1, 8, seed=2)
        pair = np.concatenate([img, img])
        feats = extract_patch_features(pair, tiny_model, 3)
        assert np.array_equal(feats[0], feats[1])


class TestCoreset:
    def test_fraction_one_selects_all(self):
        feats = np.random.default_rng(0).standard_normal((17, 3)).astype(np.float32)
        idx = coreset_subsample(feats, 1.0, seed=0)
        assert sorted(idx.tolist()) == list(range(17))

    def test_hand_traced_collinear(self):
        feats = np.array([[0.0], [1.0], [10.0]], dtype=np.float32)
        seed = seed_with_start_zero(3)
        idx = coreset_subsample(feats, 2.0 / 3.0, seed=seed)
        assert idx.tolist() == [0, 2]

    def test_greedy_beats_random_coverage(self):
        wins = 0
        for trial in range(100):
            rng = np.random.default_rng(trial)
            points = rng.standard_normal((500, 8)).astype(np.float32)
            k = 50
            greedy = coreset_subsample(points, k / 500.0, seed=trial)
            random_idx = rng.choice(500, size=k, replace=False)
            cov_g = nearest_distances(points, points[greedy]).max()
            cov_r = nearest_distances(points, points[random_idx]).max()
            wins += cov_g <= cov_r
        assert wins >= 90

    def test_invalid_fraction(self):
        feats = np.zeros((3, 1), dtype=np.float32)
        with pytest.raises(ConfigError):
            coreset_subsample(feats, 0.0)
        with pytest.raises(ConfigError):
            coreset_subsample(np.zeros((0, 2), dtype=np.float32), 0.5)

    def test_bank_drops_duplicate_rows(self):
        base = np.random.default_rng(1).standard_normal((6, 4)).astype(np.float32)
        feats = np.concatenate([base, base, base])
        bank = build_memory_bank(feats, 1.0, seed=0)
        assert bank.features.shape[0] <= 6 + 1  # duplicates collapse
        d = nearest_distances(bank.features, bank.features)  # self-distance is 0
        for i, row in enumerate(bank.features):
            rest = np.delete(bank.features, i, axis=0)
            if rest.shape[0]:
                assert nearest_distances(row[None], rest)[0] > 1e-9


class TestNearestDistances:
    def test_single_row_bank(self):
        q = np.array([[1.0, 2.0, 2.0]], dtype=np.float32)
        b = np.array([[1.0, 0.0, 0.0]], dtype=np.float32)
        assert nearest_distances(q, b)[0] == np.sqrt(np.sum((q[0] - b[0]).astype(np.float64) ** 2))

    def test_matches_brute_force_on_100_random_sets(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            n = int(rng.integers(5, 200))
            m = int(rng.integers(2, 50))
            d = int(rng.integers(2, 16))
            rows = rng.standard_normal((n, d)).astype(np.float32) * rng.uniform(0.1, 10)
            queries = rng.standard_normal((m, d)).astype(np.float32) * rng.uniform(0.1, 10)
            assert np.array_equal(
                nearest_distances(queries, rows), brute_force_nearest(queries, rows)
            )

    def test_matches_brute_force_large_bank(self):
        rng = np.random.default_rng(4)
        rows = rng.standard_normal((10_000, 32)).astype(np.float32)
        queries = rng.standard_normal((100, 32)).astype(np.float32)
        assert np.array_equal(
            nearest_distances(queries, rows), brute_force_nearest(queries, rows)
        )

    def test_monotone_under_bank_growth(self):
        rng = np.random.default_rng(5)
        rows = rng.standard_normal((50, 6)).astype(np.float32)
        queries = rng.standard_normal((20, 6)).astype(np.float32)
        small = nearest_distances(queries, rows[:20])
        big = nearest_distances(queries, rows)
        assert np.all(big <= small)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(6)
        rows = rng.standard_normal((30, 5)).astype(np.float32)
        queries = rng.standard_normal((10, 5)).astype(np.float32)
        shuffled = rows[rng.permutation(30)]
        assert np.array_equal(
            nearest_distances(queries, rows), nearest_distances(queries, shuffled)
        )

    def test_dim_mismatch(self):
        with pytest.raises(ConfigError, match="dim"):
            nearest_distances(np.zeros((1, 3)), np.zeros((2, 4)))


class TestScore:
    def test_bank_member_scores_zero(self, tiny_model):
        img = random_images(1, 8, seed=7)
        feats = extract_patch_features(img, tiny_model, 2)[0]
        bank = build_memory_bank(feats, 1.0, seed=0)
        result = score(bank, img, tiny_model, 2)
        assert result.score == 0.0
        assert np.all(result.heatmap == 0.0)
        assert np.all(result.grid == 0.0)

    def test_score_is_grid_max_and_heatmap_nonnegative(self, tiny_model):
        imgs = random_images(3, 8, seed=8)
        bank_feats = extract_patch_features(random_images(4, 8, seed=9), tiny_model, 2)
        bank = build_memory_bank(bank_feats.reshape(-1, bank_feats.shape[-1]), 0.5, seed=0)
        scores, heat, grids = score_batch(bank, imgs, tiny_model, 2)
        assert heat.shape == (3, 8, 8)
        for i in range(3):
            assert scores[i] == grids[i].max()
            assert np.all(heat[i] >= 0)
            assert np.isfinite(heat[i]).all()

    def test_dimension_mismatch_rejected(self, tiny_model):
        bank = MemoryBank(
            features=np.zeros((4, 7), dtype=np.float32),
            coreset_indices=np.arange(4),
        )
        with pytest.raises(ConfigError, match="dim"):
            score_batch(bank, random_images(1, 8, seed=10), tiny_model, 0)


class TestCalibration:
    def test_hand_statistics(self):
        mu, sigma = calibration_stats(np.array([1.0, 2.0, 3.0]))
        assert mu == 2.0
        assert sigma == pytest.approx(np.sqrt(2.0 / 3.0), rel=1e-12)

    def test_degenerate_distribution(self):
        mu, sigma = calibration_stats(np.full(5, 4.25))
        assert mu == 4.25 and sigma == 0.0

    def test_beta_rule(self):
        bank = MemoryBank(
            features=np.zeros((1, 2), dtype=np.float32),
            coreset_indices=np.zeros(1, dtype=np.int64),
            mu_s=2.0,
            sigma_s=0.5,
            calibration_count=10,
        )
        assert bank.mask_threshold(1.5) == 2.0 + 1.5 * 0.5

    def test_uncalibrated_threshold_rejected(self):
        bank = MemoryBank(
            features=np.zeros((1, 2), dtype=np.float32),
            coreset_indices=np.zeros(1, dtype=np.int64),
        )
        with pytest.raises(ConfigError, match="calibrat"):
            bank.mask_threshold()

    def test_calibrate_end_to_end_constant_network(self, zero_model):
        # constant features make every score zero: mu=0, sigma=0
        schedule = build_schedule(100)
        images = random_images(6, 8, seed=11)
        feats = extract_patch_features(images[:4], zero_model, 0)
        bank = build_memory_bank(feats.reshape(-1, feats.shape[-1]), 1.0, seed=0)
        calibrate(bank, images[4:], zero_model, schedule, [70, 90], seed=1)
        assert bank.mu_s == 0.0 and bank.sigma_s == 0.0
        assert bank.calibration_count == 4
        assert bank.calibrated

    def test_empty_holdout_rejected(self, zero_model, schedule100):
        bank = MemoryBank(
            features=np.zeros((1, 2), dtype=np.float32),
            coreset_indices=np.zeros(1, dtype=np.int64),
        )
        with pytest.raises(ConfigError, match="holdout"):
            calibrate(bank, np.zeros((0, 1, 8, 8), dtype=np.float32), zero_model, schedule100, [50])


class TestBankIO:
    def test_roundtrip_identity(self, tmp_path):
        rng = np.random.default_rng(12)
        bank = MemoryBank(
            features=rng.standard_normal((9, 5)).astype(np.float32),
            coreset_indices=rng.integers(0, 100, 9).astype(np.int64),
            descriptor={"tap_indices": [5, 8], "pooling": "avg3x3"},
            mu_s=1.25,
            sigma_s=0.75,
            calibration_count=42,
        )
        path = str(tmp_path / "bank.bin")
        save_bank(bank, path)
        loaded = load_bank(path)
        assert np.array_equal(loaded.features, bank.features)
        assert np.array_equal(loaded.coreset_indices, bank.coreset_indices)
        assert loaded.descriptor == bank.descriptor
        assert loaded.mu_s == bank.mu_s and loaded.sigma_s == bank.sigma_s
        assert loaded.calibration_count == 42

    def test_file_bytes_deterministic(self, tmp_path, tiny_model, schedule100):
        images = random_images(6, 8, seed=13)

        def build(path):
            feats = collect_bank_features(images[:4], tiny_model, schedule100, [80], 1, seed=3)
            bank = build_memory_bank(feats, 0.5, seed=3, descriptor={"k": 1})
            calibrate(bank, images[4:], tiny_model, schedule100, [80], seed=4)
            save_bank(bank, path)
            return open(path, "rb").read()

        assert build(str(tmp_path / "a.bin")) == build(str(tmp_path / "b.bin"))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"WHAT" + b"\x00" * 16)
        with pytest.raises(ConfigError, match="magic"):
            load_bank(str(path))
