"""Learnable codebook quantizer shared by transmitter and receiver.

Latents are cut into g x g x c blocks, each replaced by its nearest
codeword (Euclidean, ties to the lowest index). The receiver re-projects
noisy receptions onto the same codebook. Also holds the k-means++
initializer, the VQ training losses with a straight-through gradient,
and the bit-packed index wire format.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

DEFAULT_N_IDX = 256
DEFAULT_GRANULARITY = 8  # = latent edge -> one global index per map
BETA_COMMIT = 0.25


@dataclass
class Codebook:
    """vectors (N_idx, D) with D = g*g*c; shared, pre-synchronised."""

    vectors: np.ndarray
    granularity: int

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors)
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 2:
            raise ValueError("codebook needs at least 2 codewords, shape (N, D)")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("codebook contains non-finite codewords")

    @property
    def n_idx(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def d_min(self) -> float:
        """Smallest pairwise codeword distance."""
        sq = _pairwise_sq(self.vectors, self.vectors)
        np.fill_diagonal(sq, np.inf)
        return float(np.sqrt(sq.min()))

    def unit_power(self) -> "Codebook":
        """Each codeword rescaled to unit mean-square symbol power."""
        ms = np.mean(self.vectors**2, axis=1, keepdims=True)
        if np.any(ms <= 0):
            raise ValueError("cannot power-normalise a zero codeword")
        return Codebook(self.vectors / np.sqrt(ms), self.granularity)


def _pairwise_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    sq = (a**2).sum(axis=1)[:, None] + (b**2).sum(axis=1)[None, :] - 2.0 * a @ b.T
    return np.maximum(sq, 0.0)


def _check_grid(latent: np.ndarray, g: int):
    c, h, w = latent.shape
    if h % g or w % g:
        raise ValueError(f"latent {h}x{w} not divisible by granularity {g}")
    return c, h // g, w // g


def blocks_from_latent(latent: np.ndarray, g: int) -> np.ndarray:
    """(c, h, w) -> (gh*gw, g*g*c) block vectors, row-major over the block grid."""
    c, gh, gw = _check_grid(latent, g)
    blocks = latent.reshape(c, gh, g, gw, g).transpose(1, 3, 0, 2, 4)
    return np.ascontiguousarray(blocks).reshape(gh * gw, c * g * g)


def latent_from_blocks(blocks: np.ndarray, grid_shape, g: int, c: int) -> np.ndarray:
    gh, gw = grid_shape
    lat = blocks.reshape(gh, gw, c, g, g).transpose(2, 0, 3, 1, 4)
    return np.ascontiguousarray(lat).reshape(c, gh * g, gw * g)


def _nearest(blocks: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    # argmin returns the lowest index on ties, which is the contract
    return np.argmin(_pairwise_sq(blocks, vectors), axis=1)


def quantize(latent: np.ndarray, codebook: Codebook):
    """-> (index grid (gh, gw), quantized latent). Idempotent on its output."""
    g = codebook.granularity
    c, gh, gw = _check_grid(latent, g)
    if codebook.dim != c * g * g:
        raise ValueError(f"codebook dim {codebook.dim} != block dim {c * g * g}")
    blocks = blocks_from_latent(latent, g)
    idx = _nearest(blocks, codebook.vectors)
    lat_q = latent_from_blocks(codebook.vectors[idx], (gh, gw), g, c)
    return idx.reshape(gh, gw), lat_q.astype(latent.dtype)


def dequantize(indices: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Index grid -> stitched latent (c, gh*g, gw*g)."""
    indices = np.asarray(indices)
    if indices.min() < 0 or indices.max() >= codebook.n_idx:
        raise IndexError(f"codebook index out of range [0, {codebook.n_idx})")
    g = codebook.granularity
    c = codebook.dim // (g * g)
    return latent_from_blocks(codebook.vectors[indices.ravel()], indices.shape, g, c)


def reproject(noisy_latent: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Nearest-codeword projection of a noisy latent -> index grid."""
    return quantize(noisy_latent, codebook)[0]


def vq_losses(latent, latent_q):
    """Codebook and commitment losses with gradient stops.

    Accepts numpy arrays (returns floats) or tape tensors (returns scalar
    tensors). The codebook loss stops gradients into `latent`, the
    commitment loss stops gradients into `latent_q`; the values are equal,
    only the gradient routing differs. The training objective weights the
    commitment term by BETA_COMMIT.
    """
    if isinstance(latent, ad.Tensor) or isinstance(latent_q, ad.Tensor):
        lt = latent if isinstance(latent, ad.Tensor) else ad.Tensor(latent)
        lq = latent_q if isinstance(latent_q, ad.Tensor) else ad.Tensor(latent_q)
        if lt.shape != lq.shape:
            raise ValueError(f"shape mismatch {lt.shape} vs {lq.shape}")
        n = lt.size
        codebook_loss = ad.mul(ad.sumsq(ad.detach(lt) - lq), 1.0 / n)
        commitment_loss = ad.mul(ad.sumsq(lt - ad.detach(lq)), 1.0 / n)
        return codebook_loss, commitment_loss
    latent = np.asarray(latent)
    latent_q = np.asarray(latent_q)
    if latent.shape != latent_q.shape:
        raise ValueError(f"shape mismatch {latent.shape} vs {latent_q.shape}")
    gap = float(np.mean((latent - latent_q) ** 2))
    return gap, gap


def quantize_straight_through(z: "ad.Tensor", codebook_param: "ad.Parameter", g: int):
    """Quantize a batched latent tensor (B, c, h, w) on the tape.

    Returns (z_st, indices (B, gh, gw), codebook_loss, commitment_loss):
    z_st carries the quantized values forward but routes gradients to z
    unchanged; codebook_loss trains the codewords, commitment_loss the
    encoder.
    """
    b, c, h, w = z.shape
    if h % g or w % g:
        raise ValueError(f"latent {h}x{w} not divisible by granularity {g}")
    gh, gw = h // g, w // g
    flat_blocks = np.concatenate([blocks_from_latent(s, g) for s in z.data])
    idx = _nearest(flat_blocks, codebook_param.data)

    # stitch codeword rows back into latent layout on the tape
    zq_rows = ad.index_rows(codebook_param, idx)  # (B*gh*gw, c*g*g)
    zq = ad.reshape(zq_rows, (b, gh, gw, c, g, g))
    zq = ad.permute(zq, (0, 3, 1, 4, 2, 5))
    zq = ad.reshape(zq, (b, c, h, w))

    z_st = ad.add(z, ad.Tensor(zq.data - z.data))
    codebook_loss, commitment_loss = vq_losses(z, zq)
    return z_st, idx.reshape(b, gh, gw), codebook_loss, commitment_loss


def kmeans(blocks: np.ndarray, k: int, rng: np.random.Generator, lloyd_iters: int = 10) -> np.ndarray:
    """k-means++ seeding plus fixed Lloyd iterations; k=1 yields the mean."""
    centers = np.empty((k, blocks.shape[1]))
    centers[0] = blocks[int(rng.integers(blocks.shape[0]))]
    closest = ((blocks - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        probs = closest / closest.sum() if closest.sum() > 0 else None
        centers[j] = blocks[int(rng.choice(blocks.shape[0], p=probs))]
        closest = np.minimum(closest, ((blocks - centers[j]) ** 2).sum(axis=1))
    for _ in range(lloyd_iters):
        assign = _nearest(blocks, centers)
        for j in range(k):
            members = blocks[assign == j]
            if members.shape[0]:  # empty cluster keeps its previous center
                centers[j] = members.mean(axis=0)
    return centers


def init_codebook(sample_blocks: np.ndarray, n_idx: int, seed: int, granularity: int = DEFAULT_GRANULARITY) -> Codebook:
    """Seeded k-means++ codebook over sample block vectors."""
    blocks = np.asarray(sample_blocks, dtype=np.float64)
    if blocks.ndim != 2 or blocks.shape[0] == 0:
        raise ValueError("sample must be a non-empty (M, D) array")
    rng = np.random.default_rng(seed)
    distinct = np.unique(blocks, axis=0)
    if n_idx > distinct.shape[0]:
        warnings.warn(
            f"requested {n_idx} codewords from {distinct.shape[0]} distinct blocks; "
            "falling back to sample-plus-jitter",
            RuntimeWarning,
        )
        picks = blocks[rng.integers(0, blocks.shape[0], size=n_idx)]
        scale = max(float(blocks.std()), 1e-3)
        centers = picks + rng.normal(0.0, 1e-3 * scale, size=picks.shape)
        return Codebook(centers, granularity)
    return Codebook(kmeans(blocks, n_idx, rng), granularity)


# ---------------------------------------------------------------------------
# index wire format: big-endian bit-packed, zero-padded to a byte boundary


def bits_per_index(n_idx: int) -> int:
    return max(1, math.ceil(math.log2(n_idx)))


def payload_bits(n_cells: int, n_idx: int) -> int:
    return n_cells * bits_per_index(n_idx)


def payload_bytes(n_cells: int, n_idx: int) -> int:
    return (payload_bits(n_cells, n_idx) + 7) // 8


def indices_to_bits(indices: np.ndarray, n_idx: int) -> np.ndarray:
    """Flat index array -> bit array, MSB first within each index."""
    b = bits_per_index(n_idx)
    idx = np.asarray(indices).ravel().astype(np.uint64)
    shifts = np.arange(b - 1, -1, -1, dtype=np.uint64)
    return ((idx[:, None] >> shifts) & 1).astype(np.uint8).ravel()


def bits_to_indices(bits: np.ndarray, n_cells: int, n_idx: int) -> np.ndarray:
    b = bits_per_index(n_idx)
    bits = np.asarray(bits, dtype=np.uint64).ravel()[: n_cells * b].reshape(n_cells, b)
    weights = (np.uint64(1) << np.arange(b - 1, -1, -1, dtype=np.uint64))
    return (bits * weights).sum(axis=1).astype(np.int64)


def pack_indices(indices: np.ndarray, n_idx: int) -> bytes:
    return np.packbits(indices_to_bits(indices, n_idx)).tobytes()


def unpack_indices(data: bytes, n_cells: int, n_idx: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))
    if bits.size < payload_bits(n_cells, n_idx):
        raise ValueError("index payload too short")
    return bits_to_indices(bits, n_cells, n_idx)
