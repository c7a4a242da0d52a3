"""AWGN physical channel and the saliency-index transmission modes.

SNR is defined against unit signal power, so the noise variance is
10**(-snr_db/10). Text and saliency ride two independent links whose
generators are seeded as (seed) and (seed + 1).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import vq

MODES = ("analog-codeword", "digital-index", "analog-index")


class DegenerateSignalError(ValueError):
    """An all-zero signal cannot be power-normalised."""


@dataclass
class ChannelConfig:
    snr_db: float | None = 12.0  # None means noiseless
    mode: str = "analog-codeword"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES and self.mode != "analog-baseline":
            raise ValueError(f"unknown channel mode {self.mode!r}")

    @property
    def noiseless(self) -> bool:
        return self.snr_db is None


@dataclass
class NoiseStats:
    mean: float
    var: float
    count: int

    @classmethod
    def of(cls, noise: np.ndarray) -> "NoiseStats":
        if noise.size == 0:
            raise ValueError("noise stats need at least one sample")
        return cls(float(noise.mean()), float(noise.var()), int(noise.size))

    def merged(self, other: "NoiseStats") -> "NoiseStats":
        n = self.count + other.count
        m = (self.mean * self.count + other.mean * other.count) / n
        # pooled second moment
        sq = (
            (self.var + self.mean**2) * self.count
            + (other.var + other.mean**2) * other.count
        ) / n
        return NoiseStats(m, sq - m**2, n)


def noise_sigma(snr_db: float) -> float:
    return 10.0 ** (-snr_db / 20.0)


def normalize_power(x: np.ndarray) -> np.ndarray:
    """Scale to unit mean-square power; errors on an all-zero signal."""
    x = np.asarray(x, dtype=np.float64)
    ms = float(np.mean(x**2))
    if ms <= 0.0:
        raise DegenerateSignalError("cannot normalise an all-zero signal")
    return x / np.sqrt(ms)


def awgn(x: np.ndarray, snr_db: float | None, rng: np.random.Generator) -> np.ndarray:
    """x + n with n ~ N(0, 10**(-snr_db/10)); callers pass unit-power x."""
    if snr_db is None:
        return np.array(x, copy=True)
    return x + rng.normal(0.0, noise_sigma(snr_db), size=np.shape(x))


def _rng_for(config: ChannelConfig, rng, offset: int = 0) -> np.random.Generator:
    return rng if rng is not None else np.random.default_rng(config.seed + offset)


def send_text(z: np.ndarray, config: ChannelConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Power-normalise and push the text symbols through the AWGN link."""
    z = normalize_power(z)
    return awgn(z, config.snr_db, _rng_for(config, rng, offset=1))


def _analog_index_scale(n_idx: int) -> float:
    # rms of a uniform index in [0, n_idx): both ends know this constant
    return float(np.sqrt((n_idx - 1) * (2 * n_idx - 1) / 6.0))


def send_saliency(
    indices: np.ndarray,
    codebook: vq.Codebook,
    config: ChannelConfig,
    rng: np.random.Generator | None = None,
):
    """Transmit an index grid in the configured mode.

    -> (received index grid, index error count, NoiseStats or None).
    """
    indices = np.asarray(indices)
    rng = _rng_for(config, rng)
    flat = indices.ravel()

    if config.noiseless:
        return indices.copy(), 0, None

    if config.mode == "analog-codeword":
        cb_unit = codebook.unit_power()
        tx = cb_unit.vectors[flat]  # (cells, D), each row unit power
        noise = rng.normal(0.0, noise_sigma(config.snr_db), size=tx.shape)
        rx_blocks = tx + noise
        rx_flat = vq._nearest(rx_blocks, cb_unit.vectors)
    elif config.mode == "digital-index":
        bits = vq.indices_to_bits(flat, codebook.n_idx).astype(np.float64)
        tx = 1.0 - 2.0 * bits  # BPSK: 0 -> +1, 1 -> -1
        noise = rng.normal(0.0, noise_sigma(config.snr_db), size=tx.shape)
        rx_bits = ((tx + noise) < 0).astype(np.uint8)  # hard decision
        rx_flat = vq.bits_to_indices(rx_bits, flat.size, codebook.n_idx)
    elif config.mode == "analog-index":
        scale = _analog_index_scale(codebook.n_idx)
        tx = flat.astype(np.float64) / scale
        noise = rng.normal(0.0, noise_sigma(config.snr_db), size=tx.shape)
        rx = np.rint((tx + noise) * scale)
        rx_flat = np.clip(rx, 0, codebook.n_idx - 1).astype(np.int64)
    else:
        raise ValueError(f"send_saliency cannot handle mode {config.mode!r}")

    errors = int((rx_flat != flat).sum())
    return rx_flat.reshape(indices.shape), errors, NoiseStats.of(noise)


def send_analog_latent(
    latent: np.ndarray, config: ChannelConfig, rng: np.random.Generator | None = None
) -> np.ndarray:
    """DeepJSCC-style baseline: the raw latent rides the channel.

    The transmit normalisation factor is treated as known at the receiver,
    so the round trip is latent + noise * scale.
    """
    rng = _rng_for(config, rng)
    flat = latent.ravel()
    scale = float(np.sqrt(np.mean(flat**2)))
    if scale <= 0.0:
        raise DegenerateSignalError("cannot normalise an all-zero latent")
    rx = awgn(flat / scale, config.snr_db, rng) * scale
    return rx.reshape(latent.shape)
