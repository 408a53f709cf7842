"""Tests for the grouped product quantizer."""

import math

import numpy as np
import pytest

from fedlite.quantizer import (
    CorruptMessageError,
    QuantizerConfig,
    QuantizerConfigError,
    decode,
    encode,
    group_of,
    kmeans,
    message_bits,
    nearest_centroids,
    quantization_error,
)
from helpers import brute_force_kmeans, naive_decode, two_blob_points


# ---------------------------------------------------------------------------
# config and grouping


def test_group_layout_is_contiguous():
    assert [group_of(s, 8, 2) for s in range(8)] == [0, 0, 0, 0, 1, 1, 1, 1]
    assert [group_of(s, 6, 3) for s in range(6)] == [0, 0, 1, 1, 2, 2]
    assert all(group_of(s, 5, 1) == 0 for s in range(5))
    assert [group_of(s, 4, 4) for s in range(4)] == [0, 1, 2, 3]


def test_group_of_validates_position():
    with pytest.raises(QuantizerConfigError):
        group_of(8, 8, 2)
    with pytest.raises(QuantizerConfigError):
        group_of(-1, 8, 2)
    with pytest.raises(QuantizerConfigError):
        group_of(0, 8, 3)


def test_config_rejects_bad_shapes():
    with pytest.raises(QuantizerConfigError):
        QuantizerConfig(subvectors=8, groups=3, centroids=2)
    with pytest.raises(QuantizerConfigError):
        QuantizerConfig(subvectors=0, groups=1, centroids=2)
    with pytest.raises(QuantizerConfigError):
        QuantizerConfig(subvectors=4, groups=1, centroids=0)
    cfg = QuantizerConfig(subvectors=4, groups=2, centroids=2)
    with pytest.raises(QuantizerConfigError):
        cfg.validate_dim(10)  # 4 does not divide 10


def test_index_width():
    widths = {1: 0, 2: 1, 3: 2, 4: 2, 5: 3, 8: 3, 9: 4, 256: 8}
    for n_cent, expect in widths.items():
        assert QuantizerConfig(1, 1, n_cent).index_width == expect


# ---------------------------------------------------------------------------
# k-means


def test_kmeans_two_blobs_matches_brute_force_exactly():
    pts = two_blob_points()
    fit = kmeans(pts, 2, seed=0)
    oracle = brute_force_kmeans(pts, 2, restarts=1000, seed=1)
    assert fit.inertia == oracle
    # blob structure recovered: each blob maps to a single centroid
    assert len(set(fit.assignments[:4])) == 1
    assert len(set(fit.assignments[4:])) == 1
    assert fit.assignments[0] != fit.assignments[4]


def test_kmeans_plane_inertia_close_to_restart_oracle():
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(2, 8))
    fit = kmeans(pts, 2, seed=3)
    oracle = brute_force_kmeans(pts, 2, restarts=1000, seed=4)
    assert fit.inertia <= oracle + 1e-9


def test_kmeans_exact_cover_when_centroids_exceed_distinct_points():
    pts = np.array([[0.0, 1.0, 0.0, 2.0, 1.0]])
    fit = kmeans(pts, 3, seed=0)
    assert fit.inertia == 0.0
    rebuilt = fit.centroids[:, fit.assignments]
    assert np.array_equal(rebuilt, pts)

    # more centroids than points: surplus duplicates, still zero inertia
    fit = kmeans(pts, 9, seed=0)
    assert fit.inertia == 0.0
    assert fit.centroids.shape == (1, 9)
    rebuilt = fit.centroids[:, fit.assignments]
    assert np.array_equal(rebuilt, pts)


def test_kmeans_is_deterministic_per_seed():
    pts = np.random.default_rng(9).normal(size=(3, 40))
    a = kmeans(pts, 4, seed=123)
    b = kmeans(pts, 4, seed=123)
    assert np.array_equal(a.centroids, b.centroids)
    assert np.array_equal(a.assignments, b.assignments)
    assert a.inertia == b.inertia


def test_kmeans_inertia_history_never_increases():
    rng = np.random.default_rng(2)
    for trial in range(200):
        n = int(rng.integers(2, 40))
        dim = int(rng.integers(1, 6))
        k = int(rng.integers(1, min(n, 6) + 1))
        pts = rng.normal(size=(dim, n)) * rng.uniform(0.1, 10)
        fit = kmeans(pts, k, seed=trial)
        hist = fit.inertia_history
        assert all(b <= a for a, b in zip(hist, hist[1:]))
        assert fit.inertia == hist[-1]
        assert fit.assignments.shape == (n,)
        assert fit.centroids.shape == (dim, k)
        assert 0 <= fit.assignments.min() and fit.assignments.max() < k


def test_kmeans_input_validation():
    with pytest.raises(ValueError):
        kmeans(np.zeros((2, 0)), 2, seed=0)
    with pytest.raises(ValueError):
        kmeans(np.zeros((2, 4)), 0, seed=0)
    with pytest.raises(ValueError):
        kmeans(np.zeros(4), 2, seed=0)


def test_nearest_centroids_tie_goes_to_lowest_index():
    centroids = np.array([[0.0, 2.0, 1.0]])
    # the point 1.0 is equidistant to centroids 0 and 2... and exactly on 2
    assert nearest_centroids(np.array([[1.0]]), centroids)[0] == 2
    centroids = np.array([[0.0, 2.0]])
    assert nearest_centroids(np.array([[1.0]]), centroids)[0] == 0
    pts = np.array([[0.1, 1.9, 1.0]])
    assert list(nearest_centroids(pts, centroids)) == [0, 1, 0]


# ---------------------------------------------------------------------------
# encode / decode


def test_round_trip_shapes_and_reference_decoder():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(12, 7))
    cfg = QuantizerConfig(subvectors=4, groups=2, centroids=3)
    msg = encode(z, cfg, seed=1)
    assert msg.codebook.shape == (2, 3, 3)
    assert msg.codewords.shape == (7, 4)
    z_hat = decode(msg)
    assert z_hat.shape == z.shape
    assert np.array_equal(z_hat, naive_decode(msg))


def test_decode_matches_reference_decoder_across_configs():
    rng = np.random.default_rng(1)
    for subvectors, groups, centroids in [(1, 1, 2), (6, 1, 4), (6, 6, 2),
                                          (6, 3, 5), (12, 4, 1)]:
        z = rng.normal(size=(12, 5))
        msg = encode(z, QuantizerConfig(subvectors, groups, centroids), seed=7)
        assert np.array_equal(decode(msg), naive_decode(msg))


def test_lossless_when_centroids_cover_distinct_subvectors():
    rng = np.random.default_rng(3)
    pool = rng.normal(size=(4, 2))  # four distinct subvector values
    picks = rng.integers(0, 4, size=(4, 8))
    # stitch each column out of pool entries, one per subvector position
    z = np.concatenate([pool[picks[s]].T for s in range(4)], axis=0)
    cfg = QuantizerConfig(subvectors=4, groups=1, centroids=6)
    msg = encode(z, cfg, seed=0)
    assert np.array_equal(decode(msg), z)
    errors, kappa = quantization_error(z, decode(msg))
    assert kappa == 0.0
    assert np.all(errors == 0.0)


def test_encode_is_deterministic_and_seed_sensitive():
    z = np.random.default_rng(4).normal(size=(10, 9))
    cfg = QuantizerConfig(subvectors=5, groups=1, centroids=4)
    a = encode(z, cfg, seed=11)
    b = encode(z, cfg, seed=11)
    assert np.array_equal(a.codebook, b.codebook)
    assert np.array_equal(a.codewords, b.codewords)
    results = {encode(z, cfg, seed=s).codebook.tobytes() for s in range(6)}
    assert len(results) > 1  # seeding actually reaches the fit


def test_encode_validates_before_computing():
    cfg = QuantizerConfig(subvectors=5, groups=1, centroids=2)
    z_bad = np.full((12, 4), np.nan)  # dimension 12 not divisible by 5
    with pytest.raises(QuantizerConfigError):
        encode(z_bad, cfg, seed=0)
    cfg_ok = QuantizerConfig(subvectors=4, groups=1, centroids=2)
    with pytest.raises(ValueError):
        encode(np.zeros((12, 0)), cfg_ok, seed=0)
    with pytest.raises(ValueError):
        encode(np.zeros(12), cfg_ok, seed=0)
    with pytest.raises(ValueError):
        encode(np.zeros((12, 4)), cfg_ok, seed=0, labels=np.array([1, 2]))


def test_decode_rejects_out_of_range_codeword():
    z = np.random.default_rng(5).normal(size=(6, 4))
    msg = encode(z, QuantizerConfig(3, 1, 2), seed=0)
    msg.codewords[2, 1] = 2  # only centroids 0 and 1 exist
    with pytest.raises(CorruptMessageError):
        decode(msg)
    msg.codewords[2, 1] = -1
    with pytest.raises(CorruptMessageError):
        decode(msg)


def test_labels_travel_with_the_message():
    z = np.random.default_rng(6).normal(size=(6, 4))
    labels = np.array([3, 1, 4, 1])
    msg = encode(z, QuantizerConfig(2, 1, 3), seed=0, labels=labels)
    assert np.array_equal(msg.labels, labels)
    msg.labels[0] = 99
    assert labels[0] == 3  # encode copied, caller's array untouched


def test_reachable_reconstructions_bounded_by_centroids_per_position():
    rng = np.random.default_rng(7)
    z = rng.normal(size=(6, 40))
    msg = encode(z, QuantizerConfig(subvectors=3, groups=1, centroids=2), seed=0)
    distinct_columns = {decode(msg)[:, j].tobytes() for j in range(40)}
    assert len(distinct_columns) <= 2 ** 3

    # q = 1 degenerates to plain k-means: at most L distinct reconstructions
    msg = encode(z, QuantizerConfig(subvectors=1, groups=1, centroids=4), seed=0)
    distinct_columns = {decode(msg)[:, j].tobytes() for j in range(40)}
    assert len(distinct_columns) <= 4


def test_mean_error_shrinks_as_centroids_double():
    z = np.random.default_rng(8).normal(size=(16, 24))
    cfgs = {L: QuantizerConfig(subvectors=4, groups=2, centroids=L)
            for L in (1, 2, 4, 8)}
    mean_kappa = {}
    for L, cfg in cfgs.items():
        kappas = []
        for seed in range(20):
            msg = encode(z, cfg, seed=seed)
            _, kappa = quantization_error(z, decode(msg))
            kappas.append(kappa)
        mean_kappa[L] = np.mean(kappas)
    assert mean_kappa[2] <= mean_kappa[1]
    assert mean_kappa[4] <= mean_kappa[2]
    assert mean_kappa[8] <= mean_kappa[4]


def test_quantization_error_hand_case():
    z = np.zeros((3, 2))
    z_hat = np.array([[3.0, 0.0], [4.0, 0.0], [0.0, 2.0]])
    errors, kappa = quantization_error(z, z_hat)
    assert np.array_equal(errors, [5.0, 2.0])
    assert kappa == 5.0
    with pytest.raises(ValueError):
        quantization_error(z, np.zeros((3, 3)))


# ---------------------------------------------------------------------------
# size accounting


def test_message_bits_flagship_config():
    cfg = QuantizerConfig(subvectors=1152, groups=1, centroids=2, float_bits=64)
    bits = message_bits(cfg, dim=9216, batch=20)
    assert bits.codebook_bits == 1024
    assert bits.ideal == 24064.0
    assert bits.raw_bits == 64 * 9216 * 20
    assert abs(bits.ideal_ratio - 490.2) < 1.0


def test_message_bits_fractional_ideal_versus_wire():
    cfg = QuantizerConfig(subvectors=2, groups=1, centroids=3, float_bits=64)
    bits = message_bits(cfg, dim=4, batch=2)
    ideal_codewords = bits.ideal - bits.codebook_bits
    assert ideal_codewords == pytest.approx(4 * math.log2(3))
    assert bits.codeword_bits == 8  # four indices, two bits each
    assert bits.padding_bits == 0


def test_message_bits_single_centroid_needs_no_index_bits():
    cfg = QuantizerConfig(subvectors=2, groups=2, centroids=1)
    bits = message_bits(cfg, dim=8, batch=5)
    assert bits.ideal == bits.codebook_bits == 64 * 4 * 2
    assert bits.codeword_bits == 0
    assert bits.padding_bits == 0


def test_message_bits_pads_codewords_to_a_byte():
    cfg = QuantizerConfig(subvectors=3, groups=1, centroids=3)
    bits = message_bits(cfg, dim=3, batch=3)  # 9 indices * 2 bits = 18 bits
    assert bits.codeword_bits == 18
    assert bits.padding_bits == 6
    assert (bits.codeword_bits + bits.padding_bits) % 8 == 0


def test_message_bits_validates_inputs():
    cfg = QuantizerConfig(subvectors=3, groups=1, centroids=2)
    with pytest.raises(QuantizerConfigError):
        message_bits(cfg, dim=10, batch=2)
    with pytest.raises(ValueError):
        message_bits(cfg, dim=9, batch=0)
