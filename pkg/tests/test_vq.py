"""Quantizer oracles: brute-force nearest neighbour, tie breaking,
round trips, half-distance recovery, straight-through gradients,
k-means initialisation, and the bit-packed wire format.
"""
import warnings

import numpy as np
import pytest

from ulbsc import autodiff as ad
from ulbsc import vq


def _toy_codebook():
    # two 2-vector codewords, granularity 1, c' = 2
    return vq.Codebook(np.array([[0.0, 0.0], [1.0, 1.0]]), granularity=1)


def _latent_from_vec(vec):
    # a single-block latent (c=2, h=1, w=1)
    return np.array(vec, dtype=np.float64).reshape(2, 1, 1)


def brute_force_nearest(block, vectors):
    best, best_d = 0, np.inf
    for i, c in enumerate(vectors):
        d = float(((block - c) ** 2).sum())
        if d < best_d:  # strict: keeps the lowest index on ties
            best, best_d = i, d
    return best


def test_quantize_matches_brute_force_oracle():
    rng = np.random.default_rng(3)
    cb = vq.Codebook(rng.normal(size=(16, 8)), granularity=1)
    for _ in range(50):
        latent = rng.normal(size=(8, 4, 4))
        idx, _ = vq.quantize(latent, cb)
        blocks = vq.blocks_from_latent(latent, 1)
        expected = [brute_force_nearest(b, cb.vectors) for b in blocks]
        assert idx.ravel().tolist() == expected


def test_quantize_examples():
    cb = _toy_codebook()
    idx, _ = vq.quantize(_latent_from_vec([0.2, 0.1]), cb)
    assert idx.ravel().tolist() == [0]
    # equidistant -> lowest index wins
    idx, _ = vq.quantize(_latent_from_vec([0.5, 0.5]), cb)
    assert idx.ravel().tolist() == [0]
    # exact codeword -> itself
    idx, lat_q = vq.quantize(_latent_from_vec([1.0, 1.0]), cb)
    assert idx.ravel().tolist() == [1]
    assert np.array_equal(lat_q, _latent_from_vec([1.0, 1.0]))


def test_dequantize_lookup_and_global_mode():
    cb = _toy_codebook()
    lat = vq.dequantize(np.array([[1]]), cb)
    assert np.array_equal(lat, _latent_from_vec([1.0, 1.0]))

    rng = np.random.default_rng(4)
    gcb = vq.Codebook(rng.normal(size=(5, 2 * 3 * 3)), granularity=3)  # g = h' = w'
    lat = vq.dequantize(np.array([[2]]), gcb)
    assert lat.shape == (2, 3, 3)
    idx, _ = vq.quantize(lat, gcb)
    assert idx.ravel().tolist() == [2]

    with pytest.raises(IndexError):
        vq.dequantize(np.array([[7]]), cb)


def test_dequantize_quantize_roundtrip_property():
    rng = np.random.default_rng(5)
    cb = vq.Codebook(rng.normal(size=(16, 8)), granularity=1)
    for _ in range(100):
        grid = rng.integers(0, 16, size=(4, 4))
        lat = vq.dequantize(grid, cb)
        idx, lat_q = vq.quantize(lat, cb)
        assert np.array_equal(idx, grid)
        assert np.array_equal(lat_q, lat)


def test_quantize_idempotent():
    rng = np.random.default_rng(6)
    cb = vq.Codebook(rng.normal(size=(12, 8)), granularity=1)
    for _ in range(100):
        latent = rng.normal(size=(8, 4, 4))
        idx1, lat_q = vq.quantize(latent, cb)
        idx2, _ = vq.quantize(lat_q, cb)
        assert np.array_equal(idx1, idx2)


def test_reproject_half_distance_recovery():
    rng = np.random.default_rng(7)
    cb = vq.Codebook(rng.normal(size=(16, 8)), granularity=1)
    half = cb.d_min() / 2.0
    for i in range(cb.n_idx):
        direction = rng.normal(size=(200, cb.dim))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        radius = rng.uniform(0.0, half * (1 - 1e-9), size=(200, 1))
        noisy = cb.vectors[i] + direction * radius
        for row in noisy:
            got = vq.reproject(row.reshape(cb.dim, 1, 1), cb)
            assert got.ravel()[0] == i


def test_reproject_zero_noise_equals_quantize():
    rng = np.random.default_rng(8)
    cb = vq.Codebook(rng.normal(size=(8, 4)), granularity=1)
    latent = rng.normal(size=(4, 2, 2))
    assert np.array_equal(vq.reproject(latent, cb), vq.quantize(latent, cb)[0])


def test_latent_dims_must_divide():
    cb = vq.Codebook(np.zeros((4, 2 * 2 * 2)) + np.arange(4)[:, None], granularity=2)
    with pytest.raises(ValueError):
        vq.quantize(np.zeros((2, 3, 3)), cb)


# ---------------------------------------------------------------------------
# losses and straight-through


def test_vq_losses_values():
    z = np.zeros((1, 2))
    zq = np.ones((1, 2))
    cb_loss, commit = vq.vq_losses(z, zq)
    assert cb_loss == 1.0 and commit == 1.0
    cb0, cm0 = vq.vq_losses(zq, zq)
    assert cb0 == 0.0 and cm0 == 0.0
    with pytest.raises(ValueError):
        vq.vq_losses(np.zeros((1, 2)), np.zeros((2, 1)))


def test_vq_losses_gradient_routing():
    z = ad.Parameter(np.array([[0.0, 0.0]]), "z")
    zq = ad.Parameter(np.array([[1.0, 1.0]]), "zq")
    cb_loss, commit = vq.vq_losses(z, zq)
    cb_loss.backward()
    assert z.grad is None and np.allclose(zq.grad, [[1.0, 1.0]])  # d mean((z-zq)^2)/dzq
    commit.backward()
    assert np.allclose(z.grad, [[-1.0, -1.0]])


def test_straight_through_gradient_matches_identity_bypass():
    """Grad through the quantizer == finite differences of the decoder
    evaluated at the quantized point with the quantizer replaced by identity."""
    rng = np.random.default_rng(9)
    cb_vec = rng.normal(size=(4, 8))
    codebook = ad.Parameter(cb_vec, "cb")
    w = ad.Tensor(rng.normal(size=(8, 3)))
    z0 = rng.normal(size=(1, 8, 1, 1))

    z = ad.Parameter(z0.copy(), "z")
    z_st, idx, _, _ = vq.quantize_straight_through(z, codebook, g=1)
    loss = ad.sumsq(ad.matmul(ad.reshape(z_st, (1, 8)), w))
    loss.backward()
    st_grad = z.grad.reshape(8).copy()

    # identity bypass evaluated AT the quantized point
    zq = cb_vec[int(idx.ravel()[0])]

    def f(vec):
        return float(((vec @ w.data) ** 2).sum())

    eps = 1e-6
    fd = np.zeros(8)
    for i in range(8):
        up, dn = zq.copy(), zq.copy()
        up[i] += eps
        dn[i] -= eps
        fd[i] = (f(up) - f(dn)) / (2 * eps)
    assert ad.relative_error(st_grad, fd) < 1e-4


def test_straight_through_forward_is_quantized():
    rng = np.random.default_rng(10)
    codebook = ad.Parameter(rng.normal(size=(4, 8)), "cb")
    z = ad.Tensor(rng.normal(size=(2, 2, 2, 2)))
    z_st, idx, _, _ = vq.quantize_straight_through(z, codebook, g=2)
    for b in range(2):
        _, lat_q = vq.quantize(z.data[b], vq.Codebook(codebook.data, 2))
        assert np.allclose(z_st.data[b], lat_q)


# ---------------------------------------------------------------------------
# init_codebook


def test_kmeans_k1_is_sample_mean():
    rng = np.random.default_rng(11)
    sample = rng.normal(size=(40, 6))
    centers = vq.kmeans(sample, k=1, rng=np.random.default_rng(0))
    assert np.allclose(centers[0], sample.mean(axis=0))


def test_init_codebook_separates_two_clusters():
    rng = np.random.default_rng(12)
    a = rng.normal(size=(50, 4)) * 0.1 + 10.0
    b = rng.normal(size=(50, 4)) * 0.1 - 10.0
    cb = vq.init_codebook(np.concatenate([a, b]), n_idx=2, seed=1, granularity=1)
    d_within = min(
        np.linalg.norm(cb.vectors - a.mean(axis=0), axis=1).min(),
        np.linalg.norm(cb.vectors - b.mean(axis=0), axis=1).min(),
    )
    d_between = np.linalg.norm(cb.vectors[0] - cb.vectors[1])
    assert d_within < d_between
    # one codeword sits in each cluster
    assert {brute_force_nearest(a.mean(axis=0), cb.vectors),
            brute_force_nearest(b.mean(axis=0), cb.vectors)} == {0, 1}


def test_init_codebook_deterministic():
    rng = np.random.default_rng(13)
    sample = rng.normal(size=(60, 5))
    cb1 = vq.init_codebook(sample, 8, seed=5)
    cb2 = vq.init_codebook(sample, 8, seed=5)
    assert np.array_equal(cb1.vectors, cb2.vectors)
    cb3 = vq.init_codebook(sample, 8, seed=6)
    assert not np.array_equal(cb1.vectors, cb3.vectors)


def test_init_codebook_fallback_warns():
    sample = np.tile(np.array([[1.0, 2.0], [3.0, 4.0]]), (5, 1))  # 2 distinct blocks
    with pytest.warns(RuntimeWarning):
        cb = vq.init_codebook(sample, n_idx=4, seed=0, granularity=1)
    assert cb.n_idx == 4
    assert cb.d_min() > 0  # jitter keeps codewords distinct


# ---------------------------------------------------------------------------
# wire format


def test_payload_bits_exactness():
    for n_idx, cells, expected_bits in ((256, 1, 8), (256, 64, 512), (16, 64, 256), (5, 3, 9)):
        assert vq.payload_bits(cells, n_idx) == expected_bits
        assert vq.payload_bytes(cells, n_idx) == (expected_bits + 7) // 8


def test_pack_unpack_roundtrip():
    rng = np.random.default_rng(14)
    for n_idx in (2, 5, 16, 256):
        idx = rng.integers(0, n_idx, size=37)
        data = vq.pack_indices(idx, n_idx)
        assert len(data) == vq.payload_bytes(37, n_idx)
        back = vq.unpack_indices(data, 37, n_idx)
        assert np.array_equal(back, idx)


def test_pack_golden_bytes_big_endian():
    # 4-bit indices: [0xA, 0xB, 0xC] -> 0xAB, 0xC0 (zero-padded)
    data = vq.pack_indices(np.array([0xA, 0xB, 0xC]), n_idx=16)
    assert data == bytes([0xAB, 0xC0])
    # 8-bit: identity bytes
    assert vq.pack_indices(np.array([1, 255, 0]), 256) == bytes([1, 255, 0])
