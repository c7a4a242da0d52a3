"""Command-line front end: train the two codecs, run single links,
sweep SNR, print the overhead ledger, export generation manifests.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import dataset, metrics, pipeline, text_link as tl, vq
from . import saliency_codec as sc


def _add_data_args(p):
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-test", type=int, default=500)
    p.add_argument("--data-seed", type=int, default=7)


def _split(args):
    return dataset.make_split(args.n_train, args.n_test, args.data_seed)


def _cmd_train_codec(args):
    train, test = _split(args)
    maps = dataset.maps_for_specs(train)
    val = dataset.maps_for_specs(test[: min(len(test), 128)])
    codec, codebook, hist = sc.train_codec(
        maps,
        epochs=args.epochs,
        lr=args.lr,
        batch=args.batch,
        seed=args.seed,
        n_idx=args.n_idx,
        granularity=args.granularity,
        warmup_epochs=args.warmup_epochs,
        train_snr_db=args.train_snr,
        val_maps=val,
        out_dir=args.out,
        verbose=not args.quiet,
    )
    print(
        f"saved codec to {args.out}: val loss {hist['val_loss_initial']:.4f} -> "
        f"{hist['val_loss_final']:.4f}, codebook {codebook.n_idx}x{codebook.dim} "
        f"(d_min {codebook.d_min():.3f})"
    )


def _cmd_train_text(args):
    train, test = _split(args)
    caps = [dataset.caption_for(s) for s in train]
    link, _, hist = tl.train_text_link(
        caps,
        epochs=args.epochs,
        lr=args.lr,
        eta=args.eta,
        seed=args.seed,
        batch=args.batch,
        l_max=args.lmax,
        k_sym=args.ksym,
        out_dir=args.out,
        verbose=not args.quiet,
    )
    test_caps = [dataset.caption_for(s) for s in test]
    acc = tl.evaluate_exact_match(link, test_caps, 12.0, seed=args.seed)
    print(f"saved text link to {args.out}: final CE {hist['ce'][-1]:.4f}, "
          f"exact match @12dB {acc:.3f}")


def _system_config(args) -> pipeline.SystemConfig:
    snr = None if getattr(args, "noiseless", False) else args.snr
    return pipeline.SystemConfig(
        codec_dir=args.codec,
        text_dir=args.text,
        mode=args.mode,
        snr_db=snr,
        seed=args.seed,
        threshold_policy=args.policy,
    )


def _cmd_run(args):
    system = pipeline.LinkSystem.load(args.codec, args.text)
    config = _system_config(args)
    spec = dataset.make_split(1, 1, args.sample_seed)[1][0]
    smap, caption = dataset.generate_pair(spec)
    map_hat, caption_hat, row = pipeline.run_link(system, smap, caption, config)
    led = system.ledger(caption, config)
    out = {
        "caption": caption,
        "caption_hat": caption_hat,
        "ledger": led.__dict__,
        **{k: v for k, v in row.items() if k != "noise"},
    }
    if row["noise"] is not None:
        out["noise_stats"] = row["noise"].__dict__
    print(json.dumps(out, indent=1, default=float))


def _cmd_sweep(args):
    system = pipeline.LinkSystem.load(args.codec, args.text)
    _, test = _split(args)
    test = test[: args.samples]
    maps = dataset.maps_for_specs(test)
    caps = [dataset.caption_for(s) for s in test]
    snr_list = [float(s) for s in args.snr_list.split(",")] if args.snr_list else pipeline.SNR_GRID
    modes = args.modes.split(",") if args.modes else pipeline.SWEEP_MODES
    pipeline.sweep(
        system, maps, caps, args.out,
        snr_list=snr_list, modes=modes, seed=args.seed, threshold_policy=args.policy,
    )
    print(f"wrote {args.out}")


def _cmd_ledger(args):
    led = metrics.ledger(args.cells, args.n_idx, len(args.caption.encode("utf-8")), args.original_bytes)
    print(json.dumps(led.__dict__, indent=1))


def _cmd_export(args):
    system = pipeline.LinkSystem.load(args.codec, args.text)
    config = _system_config(args)
    spec = dataset.make_split(1, 1, args.sample_seed)[1][0]
    smap, caption = dataset.generate_pair(spec)
    map_hat, caption_hat, _ = pipeline.run_link(system, smap, caption, config)
    path = pipeline.export_manifest(
        None if args.caption_only else map_hat,
        caption_hat,
        args.out,
        system.codebook,
        config.snr_db,
        config.mode,
        system.grid_cells,
        caption_only=args.caption_only,
    )
    print(f"wrote {path}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ulbsc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-codec", help="train the saliency codec + codebook")
    _add_data_args(p)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--warmup-epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-idx", type=int, default=vq.DEFAULT_N_IDX)
    p.add_argument("--granularity", type=int, default=vq.DEFAULT_GRANULARITY)
    p.add_argument("--train-snr", type=float, default=None,
                   help="inject AWGN at this SNR during joint training (default: noise-free)")
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train_codec)

    p = sub.add_parser("train-text", help="train the caption codec")
    _add_data_args(p)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--eta", type=float, default=tl.ETA_DEFAULT)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ksym", type=int, default=tl.K_SYM)
    p.add_argument("--lmax", type=int, default=tl.L_MAX)
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train_text)

    def add_link_args(p):
        p.add_argument("--codec", required=True)
        p.add_argument("--text", required=True)
        p.add_argument("--snr", type=float, default=12.0)
        p.add_argument("--noiseless", action="store_true")
        p.add_argument("--mode", default="analog-codeword",
                       choices=list(pipeline.SWEEP_MODES))
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--policy", default="adaptive", choices=list(metrics.THRESHOLD_POLICIES))
        p.add_argument("--sample-seed", type=int, default=123)

    p = sub.add_parser("run", help="run one sample through the link")
    add_link_args(p)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("sweep", help="SNR x mode sweep to CSV")
    add_link_args(p)
    _add_data_args(p)
    p.add_argument("--samples", type=int, default=500)
    p.add_argument("--snr-list", default=None, help="comma-separated dB values")
    p.add_argument("--modes", default=None, help="comma-separated mode names")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("ledger", help="print the overhead ledger")
    p.add_argument("--cells", type=int, default=1)
    p.add_argument("--n-idx", type=int, default=vq.DEFAULT_N_IDX)
    p.add_argument("--caption", default="a small ellipse in the middle center")
    p.add_argument("--original-bytes", type=int, default=64 * 64 * 3)
    p.set_defaults(func=_cmd_ledger)

    p = sub.add_parser("export", help="write the generation manifest for one sample")
    add_link_args(p)
    p.add_argument("--caption-only", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_export)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
