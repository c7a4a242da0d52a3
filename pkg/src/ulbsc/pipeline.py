"""End-to-end link orchestration: both branches through the channel,
the no-codebook analog baseline, manifest export for an external
conditional generator, and SNR-sweep experiments.
"""
from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import channel as ch
from . import dataset
from . import metrics
from . import text_link as tl
from . import vq
from .saliency_codec import SaliencyCodec, load_codec

SNR_GRID = tuple(float(s) for s in range(-3, 16, 3))  # -3..15 dB, step 3
SWEEP_MODES = ("analog-codeword", "digital-index", "analog-index", "analog-baseline")
CSV_HEADER = (
    "snr_db,mode,mae,precision,recall,f_measure,caption_acc,map_bytes,caption_bytes,seed"
)

# wire format of the hand-off manifest for an external conditional generator
CONDITION_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "properties": {
        "caption": {"type": "string"},
        "saliency_map": {"type": ["string", "null"]},
        "map_format": {"const": "pgm-p5"},
        "codebook": {
            "type": "object",
            "properties": {
                "n_idx": {"type": "integer", "minimum": 2},
                "granularity": {"type": "integer", "minimum": 1},
            },
            "required": ["n_idx", "granularity"],
        },
        "snr_db": {"type": ["number", "null"]},
        "mode": {"type": "string"},
        "payload_bytes": {
            "type": "object",
            "properties": {
                "caption": {"type": "integer", "minimum": 0},
                "map": {"type": "integer", "minimum": 0},
            },
            "required": ["caption", "map"],
        },
    },
    "required": ["caption", "saliency_map", "map_format", "codebook", "snr_db", "mode", "payload_bytes"],
}


@dataclass
class SystemConfig:
    codec_dir: str
    text_dir: str
    mode: str = "analog-codeword"
    snr_db: float | None = 12.0
    seed: int = 0
    out_dir: str = "."
    threshold_policy: str = "adaptive"
    original_bytes: int | None = None  # default: raw RGB size of the source image


@dataclass
class LinkReport:
    snr_db: float | None
    mode: str
    rows: list = field(default_factory=list)
    noise: ch.NoiseStats | None = None
    runtime_s: float = 0.0

    def aggregate(self) -> dict:
        if not self.rows:
            raise ValueError("no link rows to aggregate")
        agg = {
            k: float(np.mean([r[k] for r in self.rows]))
            for k in ("mae", "precision", "recall", "f_measure")
        }
        agg["caption_acc"] = float(np.mean([r["caption_match"] for r in self.rows]))
        agg["map_bytes"] = int(self.rows[0]["map_bytes"])
        agg["caption_bytes"] = int(round(np.mean([r["caption_bytes"] for r in self.rows])))
        return agg


class LinkSystem:
    """Frozen trained checkpoints wired together for inference."""

    def __init__(self, codec: SaliencyCodec, codebook: vq.Codebook, link: tl.TextLink):
        self.codec = codec
        self.codebook = codebook
        self.link = link

    @classmethod
    def load(cls, codec_dir: str, text_dir: str) -> "LinkSystem":
        codec, codebook = load_codec(codec_dir)
        link = tl.load_text_link(text_dir)
        return cls(codec, codebook, link)

    @property
    def grid_cells(self) -> int:
        hw = self.codec.arch.latent_hw
        return (hw // self.codebook.granularity) ** 2

    def original_bytes(self, config: SystemConfig) -> int:
        if config.original_bytes is not None:
            return config.original_bytes
        return self.codec.arch.hw * self.codec.arch.hw * 3

    def ledger(self, caption: str, config: SystemConfig, caption_only: bool = False) -> metrics.OverheadLedger:
        cells = 0 if caption_only else self.grid_cells
        return metrics.ledger(
            cells, self.codebook.n_idx, len(caption.encode("utf-8")), self.original_bytes(config)
        )


def _encode_maps(system: LinkSystem, maps: np.ndarray, batch: int = 64) -> np.ndarray:
    outs = []
    with ad.no_grad():
        for i in range(0, maps.shape[0], batch):
            outs.append(system.codec.encode(maps[i : i + batch, None, :, :]).data)
    return np.concatenate(outs)


def _decode_latents(system: LinkSystem, latents: np.ndarray, batch: int = 64) -> np.ndarray:
    outs = []
    with ad.no_grad():
        for i in range(0, latents.shape[0], batch):
            outs.append(system.codec.decode(latents[i : i + batch].astype(np.float32)).data[:, 0])
    return np.concatenate(outs)


def run_link(system: LinkSystem, smap: np.ndarray, caption: str, config: SystemConfig):
    """One sample through both branches.

    -> (reconstructed map, reconstructed caption, row dict). The two links
    use independent generators seeded (seed) and (seed + 1).
    """
    t0 = time.time()
    cfg = ch.ChannelConfig(snr_db=config.snr_db, mode=config.mode, seed=config.seed)
    smap = np.asarray(smap, dtype=np.float32)

    # saliency branch
    z = _encode_maps(system, smap[None])[0]
    if config.mode == "analog-baseline":
        z_rx = ch.send_analog_latent(z, cfg)
        map_hat = _decode_latents(system, z_rx[None])[0]
        idx_errors = 0
        noise = None
        map_bytes = int(z.size * 4)  # raw float32 latent, DeepJSCC-style accounting
    else:
        idx, _ = vq.quantize(z, system.codebook)
        rx_idx, idx_errors, noise = ch.send_saliency(idx, system.codebook, cfg)
        map_hat = _decode_latents(system, vq.dequantize(rx_idx, system.codebook)[None])[0]
        map_bytes = vq.payload_bytes(idx.size, system.codebook.n_idx)

    # text branch
    ids = system.link.vocab.tokenize(caption, system.link.l_max)
    with ad.no_grad():
        z_text = system.link.transmit(ids[None]).data
    zh_text = ch.send_text(z_text, cfg)
    _, tokens = system.link.decode(zh_text)
    caption_hat = system.link.vocab.detokenize(tokens[0])

    score = metrics.score_map(map_hat, smap, config.threshold_policy)
    row = {
        "snr_db": config.snr_db,
        "mode": config.mode,
        "mae": score.mae,
        "precision": score.precision,
        "recall": score.recall,
        "f_measure": score.f_measure,
        "caption_match": caption_hat == caption,
        "index_errors": idx_errors,
        "map_bytes": map_bytes,
        "caption_bytes": len(caption.encode("utf-8")),
        "seed": config.seed,
        "runtime_s": time.time() - t0,
        "noise": noise,
    }
    return map_hat, caption_hat, row


def run_baseline_analog(system: LinkSystem, smap: np.ndarray, config: SystemConfig) -> np.ndarray:
    """The no-codebook analog path: latent rides the channel directly."""
    cfg = ch.ChannelConfig(snr_db=config.snr_db, mode="analog-baseline", seed=config.seed)
    z = _encode_maps(system, np.asarray(smap, dtype=np.float32)[None])[0]
    z_rx = ch.send_analog_latent(z, cfg)
    return _decode_latents(system, z_rx[None])[0]


def export_manifest(
    map_hat: np.ndarray | None,
    caption_hat: str,
    out_dir: str,
    codebook: vq.Codebook,
    snr_db: float | None,
    mode: str,
    grid_cells: int,
    caption_only: bool = False,
) -> str:
    """Write condition.json (+ saliency.pgm) for an external generator."""
    os.makedirs(out_dir, exist_ok=True)
    if caption_only or map_hat is None:
        map_entry = None
        map_bytes = 0
    else:
        dataset.save_pgm(map_hat, os.path.join(out_dir, "saliency.pgm"))
        map_entry = "saliency.pgm"
        map_bytes = vq.payload_bytes(grid_cells, codebook.n_idx)
    manifest = {
        "caption": caption_hat,
        "saliency_map": map_entry,
        "map_format": "pgm-p5",
        "codebook": {"n_idx": codebook.n_idx, "granularity": codebook.granularity},
        "snr_db": snr_db,
        "mode": mode,
        "payload_bytes": {"caption": len(caption_hat.encode("utf-8")), "map": map_bytes},
    }
    path = os.path.join(out_dir, "condition.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=1)
        f.write("\n")
    return path


def load_manifest(out_dir: str):
    """-> (manifest dict, saliency map or None); round-trip of export_manifest."""
    with open(os.path.join(out_dir, "condition.json")) as f:
        manifest = json.load(f)
    smap = None
    if manifest.get("saliency_map"):
        smap = dataset.load_pgm(os.path.join(out_dir, manifest["saliency_map"]))
    return manifest, smap


def _link_seed(base_seed: int, snr_index: int, sample_index: int) -> int:
    # even spacing keeps the text stream (seed + 1) collision-free
    return (base_seed + snr_index) * 1_000_003 + 2 * sample_index


def run_point(
    system: LinkSystem,
    maps: np.ndarray,
    captions,
    snr_db: float | None,
    mode: str,
    seed: int,
    snr_index: int,
    threshold_policy: str = "adaptive",
) -> LinkReport:
    """All samples of one (SNR, mode) sweep point, batched where possible.

    Per-sample channel seeds depend only on (seed, snr_index, sample), so
    every mode at one SNR sees identical noise streams: paired runs.
    """
    t0 = time.time()
    maps = np.asarray(maps, dtype=np.float32)
    n = maps.shape[0]
    latents = _encode_maps(system, maps)

    # saliency branch, per-sample seeded channel
    rx_latents = np.empty_like(latents)
    idx_errors = 0
    noise_stats = None
    if mode == "analog-baseline":
        map_bytes = int(latents[0].size * 4)
        for j in range(n):
            cfg = ch.ChannelConfig(snr_db=snr_db, mode=mode, seed=_link_seed(seed, snr_index, j))
            rx_latents[j] = ch.send_analog_latent(latents[j], cfg)
    else:
        map_bytes = vq.payload_bytes(system.grid_cells, system.codebook.n_idx)
        for j in range(n):
            cfg = ch.ChannelConfig(snr_db=snr_db, mode=mode, seed=_link_seed(seed, snr_index, j))
            idx, _ = vq.quantize(latents[j], system.codebook)
            rx_idx, errs, nstats = ch.send_saliency(idx, system.codebook, cfg)
            idx_errors += errs
            rx_latents[j] = vq.dequantize(rx_idx, system.codebook)
            if nstats is not None:
                noise_stats = nstats if noise_stats is None else noise_stats.merged(nstats)
    maps_hat = _decode_latents(system, rx_latents)

    # text branch, independent streams (seed + 1)
    ids = np.stack([system.link.vocab.tokenize(c, system.link.l_max) for c in captions])
    with ad.no_grad():
        z_text = system.link.transmit(ids).data
    zh_text = np.empty_like(z_text)
    for j in range(n):
        cfg = ch.ChannelConfig(snr_db=snr_db, mode=mode, seed=_link_seed(seed, snr_index, j))
        zh_text[j] = ch.send_text(z_text[j], cfg)
    _, tokens = system.link.decode(zh_text)

    report = LinkReport(snr_db=snr_db, mode=mode, noise=noise_stats)
    for j in range(n):
        score = metrics.score_map(maps_hat[j], maps[j], threshold_policy)
        report.rows.append(
            {
                "mae": score.mae,
                "precision": score.precision,
                "recall": score.recall,
                "f_measure": score.f_measure,
                "caption_match": system.link.vocab.detokenize(tokens[j]) == captions[j],
                "map_bytes": map_bytes,
                "caption_bytes": len(captions[j].encode("utf-8")),
            }
        )
    report.runtime_s = time.time() - t0
    return report


def sweep(
    system: LinkSystem,
    maps: np.ndarray,
    captions,
    out_csv: str,
    snr_list=SNR_GRID,
    modes=SWEEP_MODES,
    seed: int = 0,
    threshold_policy: str = "adaptive",
):
    """SNR x mode grid; one aggregate CSV row per point, flushed as it lands.

    Precision/recall aggregate per image, then average. On failure the
    completed rows are already on disk.
    """
    reports = []
    os.makedirs(os.path.dirname(os.path.abspath(out_csv)), exist_ok=True)
    with open(out_csv, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_HEADER.split(","))
        f.flush()
        for si, snr_db in enumerate(snr_list):
            for mode in modes:
                rep = run_point(
                    system, maps, captions, snr_db, mode, seed, si, threshold_policy
                )
                agg = rep.aggregate()
                writer.writerow(
                    [
                        snr_db,
                        mode,
                        f"{agg['mae']:.6f}",
                        f"{agg['precision']:.6f}",
                        f"{agg['recall']:.6f}",
                        f"{agg['f_measure']:.6f}",
                        f"{agg['caption_acc']:.6f}",
                        agg["map_bytes"],
                        agg["caption_bytes"],
                        seed + si,
                    ]
                )
                f.flush()
                reports.append(rep)
    return reports
