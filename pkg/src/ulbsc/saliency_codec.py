"""Saliency-map semantic codec: conv + ResBlock autoencoder.

Encoder: three stride-2 3x3 conv stages with a residual block after the
first two, 64x64x1 down to 8x8x8 by default. Decoder mirrors it with
transposed convs and a final sigmoid. Trained jointly with the shared
codebook quantizer via a straight-through estimator.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from . import channel as ch
from . import vq

LAMBDA_PRIOR = 0.001  # weight of the latent prior term in the training loss


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the failing step index."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(f"training diverged at step {step}{': ' + message if message else ''}")


@dataclass(frozen=True)
class CodecArch:
    hw: int = 64
    chans: tuple = (16, 32)
    latent_ch: int = 8
    ksize: int = 3

    @property
    def latent_hw(self) -> int:
        return self.hw // 8  # three stride-2 stages

    def to_json(self) -> dict:
        d = asdict(self)
        d["chans"] = list(self.chans)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "CodecArch":
        return cls(hw=d["hw"], chans=tuple(d["chans"]), latent_ch=d["latent_ch"], ksize=d["ksize"])


def _he_conv(rng, co, ci, k, dtype):
    std = np.sqrt(2.0 / (ci * k * k))
    return rng.normal(0.0, std, size=(co, ci, k, k)).astype(dtype)


def _he_tconv(rng, ci, co, k, dtype):
    std = np.sqrt(2.0 / (ci * k * k))
    return rng.normal(0.0, std, size=(ci, co, k, k)).astype(dtype)


class SaliencyCodec:
    """Owns the encoder/decoder parameters and the forward passes."""

    def __init__(self, arch: CodecArch = CodecArch(), seed: int = 0, dtype=np.float32):
        self.arch = arch
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        k = arch.ksize
        c1, c2 = arch.chans
        cl = arch.latent_ch
        p = {}

        def conv_p(name, co, ci):
            p[name + ".w"] = ad.Parameter(_he_conv(rng, co, ci, k, dtype), name + ".w")
            p[name + ".b"] = ad.Parameter(np.zeros(co, dtype=dtype), name + ".b")

        def tconv_p(name, ci, co):
            p[name + ".w"] = ad.Parameter(_he_tconv(rng, ci, co, k, dtype), name + ".w")
            p[name + ".b"] = ad.Parameter(np.zeros(co, dtype=dtype), name + ".b")

        conv_p("enc.c1", c1, 1)
        conv_p("enc.rb1.f1", c1, c1)
        conv_p("enc.rb1.f2", c1, c1)
        conv_p("enc.c2", c2, c1)
        conv_p("enc.rb2.f1", c2, c2)
        conv_p("enc.rb2.f2", c2, c2)
        conv_p("enc.c3", cl, c2)
        tconv_p("dec.t1", cl, c2)
        conv_p("dec.rb1.f1", c2, c2)
        conv_p("dec.rb1.f2", c2, c2)
        tconv_p("dec.t2", c2, c1)
        conv_p("dec.rb2.f1", c1, c1)
        conv_p("dec.rb2.f2", c1, c1)
        tconv_p("dec.t3", c1, 1)
        self.params = p

    def params_list(self):
        return list(self.params.values())

    def _conv(self, x, name, stride=1):
        pad = self.arch.ksize // 2
        return ad.conv2d(x, self.params[name + ".w"], self.params[name + ".b"], stride=stride, padding=pad)

    def _tconv(self, x, name):
        pad = self.arch.ksize // 2
        return ad.conv2d_transpose(
            x, self.params[name + ".w"], self.params[name + ".b"], stride=2, padding=pad, output_padding=1
        )

    def _resblock(self, x, name):
        f = self._conv(ad.relu(self._conv(x, name + ".f1")), name + ".f2")
        return ad.add(x, f)

    def encode(self, maps) -> ad.Tensor:
        """maps (B, 1, H, W) array or tensor -> latent (B, c', h', w')."""
        x = maps if isinstance(maps, ad.Tensor) else ad.Tensor(np.asarray(maps, dtype=self.dtype))
        if x.data.ndim != 4 or x.shape[2] != self.arch.hw or x.shape[3] != self.arch.hw:
            raise ValueError(f"expected (B, 1, {self.arch.hw}, {self.arch.hw}), got {x.shape}")
        x = ad.relu(self._conv(x, "enc.c1", stride=2))
        x = self._resblock(x, "enc.rb1")
        x = ad.relu(self._conv(x, "enc.c2", stride=2))
        x = self._resblock(x, "enc.rb2")
        return self._conv(x, "enc.c3", stride=2)

    def decode(self, latent) -> ad.Tensor:
        """latent (B, c', h', w') -> maps (B, 1, H, W) in [0, 1]."""
        z = latent if isinstance(latent, ad.Tensor) else ad.Tensor(np.asarray(latent, dtype=self.dtype))
        hw = self.arch.latent_hw
        if z.data.ndim != 4 or z.shape[1:] != (self.arch.latent_ch, hw, hw):
            raise ValueError(f"expected (B, {self.arch.latent_ch}, {hw}, {hw}), got {z.shape}")
        x = ad.relu(self._tconv(z, "dec.t1"))
        x = self._resblock(x, "dec.rb1")
        x = ad.relu(self._tconv(x, "dec.t2"))
        x = self._resblock(x, "dec.rb2")
        return ad.sigmoid(self._tconv(x, "dec.t3"))


def encode_saliency(smap: np.ndarray, codec: SaliencyCodec) -> np.ndarray:
    """Single map (H, W) -> latent (c', h', w'), no tape."""
    with ad.no_grad():
        z = codec.encode(np.asarray(smap)[None, None, :, :].astype(codec.dtype))
    return z.data[0]


def decode_saliency(latent: np.ndarray, codec: SaliencyCodec) -> np.ndarray:
    """Single latent (c', h', w') -> map (H, W) in [0, 1], no tape."""
    with ad.no_grad():
        m = codec.decode(np.asarray(latent)[None, :, :, :].astype(codec.dtype))
    return m.data[0, 0]


def loss_sal(m, m_hat, z, lam: float = LAMBDA_PRIOR):
    """Reconstruction MSE plus lam * 0.5 * mean(z^2) latent prior."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    as_tensor = any(isinstance(t, ad.Tensor) for t in (m, m_hat, z))
    if as_tensor:
        mt = m if isinstance(m, ad.Tensor) else ad.Tensor(m)
        ht = m_hat if isinstance(m_hat, ad.Tensor) else ad.Tensor(m_hat)
        zt = z if isinstance(z, ad.Tensor) else ad.Tensor(z)
        if mt.shape != ht.shape:
            raise ValueError(f"map shapes differ: {mt.shape} vs {ht.shape}")
        mse = ad.mul(ad.sumsq(mt - ht), 1.0 / mt.size)
        prior = ad.mul(ad.sumsq(zt), 0.5 * lam / zt.size)
        return ad.add(mse, prior)
    m = np.asarray(m)
    m_hat = np.asarray(m_hat)
    z = np.asarray(z)
    if m.shape != m_hat.shape:
        raise ValueError(f"map shapes differ: {m.shape} vs {m_hat.shape}")
    return float(np.mean((m - m_hat) ** 2) + lam * 0.5 * np.mean(z**2))


def _batched_encode(codec: SaliencyCodec, maps: np.ndarray, batch: int = 64) -> np.ndarray:
    outs = []
    with ad.no_grad():
        for i in range(0, maps.shape[0], batch):
            outs.append(codec.encode(maps[i : i + batch, None, :, :]).data)
    return np.concatenate(outs)


def train_codec(
    train_maps: np.ndarray,
    epochs: int = 50,
    lr: float = 1e-3,
    batch: int = 16,
    seed: int = 0,
    n_idx: int = vq.DEFAULT_N_IDX,
    granularity: int = vq.DEFAULT_GRANULARITY,
    lam: float = LAMBDA_PRIOR,
    beta_commit: float = vq.BETA_COMMIT,
    warmup_epochs: int = 10,
    train_snr_db: float | None = None,
    val_maps: np.ndarray | None = None,
    out_dir: str | None = None,
    arch: CodecArch = CodecArch(),
    verbose: bool = False,
):
    """Joint codec + codebook training.

    Runs `warmup_epochs` without the quantizer, initialises the codebook
    with k-means++ over the warmed-up latents, then trains end to end with
    the straight-through estimator. When train_snr_db is set, AWGN is
    injected on the quantized latent during the joint phase.

    -> (codec, Codebook, history dict). Writes a checkpoint when out_dir
    is given.
    """
    maps = np.asarray(train_maps, dtype=np.float32)
    if maps.ndim != 3 or maps.shape[0] == 0:
        raise ValueError("train_maps must be a non-empty (N, H, W) array")
    warmup_epochs = min(warmup_epochs, epochs)

    codec = SaliencyCodec(arch, seed=seed)
    rng = np.random.default_rng(seed + 1)
    opt = ad.Adam(codec.params_list(), lr=lr)

    if val_maps is None:
        val_maps = maps[: min(64, maps.shape[0])]
    val_maps = np.asarray(val_maps, dtype=np.float32)

    def val_loss() -> float:
        with ad.no_grad():
            x = ad.Tensor(val_maps[:, None, :, :])
            z = codec.encode(x)
            m_hat = codec.decode(z)
            return float(loss_sal(x, m_hat, z, lam).data)

    history = {"epoch_loss": [], "val_loss_initial": val_loss()}
    codebook_param = None
    n = maps.shape[0]
    step = 0
    for epoch in range(epochs):
        if epoch == warmup_epochs:
            # quantizer joins: k-means++ codebook over current latents
            sample = maps[rng.permutation(n)[: min(1024, n)]]
            latents = _batched_encode(codec, sample)
            blocks = np.concatenate([vq.blocks_from_latent(z, granularity) for z in latents])
            cb = vq.init_codebook(blocks, n_idx, seed=seed + 2, granularity=granularity)
            codebook_param = ad.Parameter(cb.vectors.astype(np.float32), "codebook")
            opt = ad.Adam(codec.params_list() + [codebook_param], lr=lr)

        order = rng.permutation(n)
        epoch_losses = []
        for i in range(0, n, batch):
            idx = order[i : i + batch]
            x = ad.Tensor(maps[idx][:, None, :, :])
            opt.zero_grad()
            try:
                z = codec.encode(x)
                if codebook_param is None:
                    m_hat = codec.decode(z)
                    loss = loss_sal(x, m_hat, z, lam)
                else:
                    z_st, _, cb_loss, commit = vq.quantize_straight_through(
                        z, codebook_param, granularity
                    )
                    if train_snr_db is not None:
                        noise = rng.normal(
                            0.0, ch.noise_sigma(train_snr_db), size=z_st.shape
                        ).astype(np.float32)
                        z_st = ad.add(z_st, ad.Tensor(noise))
                    m_hat = codec.decode(z_st)
                    loss = ad.add(
                        loss_sal(x, m_hat, z, lam),
                        ad.add(cb_loss, ad.mul(commit, beta_commit)),
                    )
                loss.backward()
            except ad.NumericError as e:
                raise TrainingDivergedError(step, str(e)) from e
            lv = float(loss.data)
            if not np.isfinite(lv):
                raise TrainingDivergedError(step)
            opt.step()
            epoch_losses.append(lv)
            step += 1
        history["epoch_loss"].append(float(np.mean(epoch_losses)))
        if verbose:
            print(f"epoch {epoch + 1}/{epochs} loss {history['epoch_loss'][-1]:.5f}")

    history["val_loss_final"] = val_loss()
    if codebook_param is None:  # all-warmup run still yields a usable codebook
        latents = _batched_encode(codec, maps[: min(512, n)])
        blocks = np.concatenate([vq.blocks_from_latent(z, granularity) for z in latents])
        cb = vq.init_codebook(blocks, n_idx, seed=seed + 2, granularity=granularity)
        codebook = cb
    else:
        codebook = vq.Codebook(codebook_param.data.astype(np.float64), granularity)
    if out_dir is not None:
        save_codec(out_dir, codec, codebook)
    return codec, codebook, history


CODEBOOK_FILE = "codebook.bin"


def save_codec(dirpath: str, codec: SaliencyCodec, codebook: vq.Codebook) -> str:
    import os

    os.makedirs(dirpath, exist_ok=True)
    cb32 = np.ascontiguousarray(codebook.vectors, dtype="<f4")
    with open(os.path.join(dirpath, CODEBOOK_FILE), "wb") as f:
        f.write(cb32.tobytes())
    extra = {
        "kind": "saliency-codec",
        "architecture": codec.arch.to_json(),
        "codebook": {
            "file": CODEBOOK_FILE,
            "n_idx": codebook.n_idx,
            "dim": codebook.dim,
            "granularity": codebook.granularity,
        },
    }
    return ad.save_checkpoint(dirpath, ad.params_to_dict(codec.params_list()), extra)


def load_codec(dirpath: str):
    """-> (SaliencyCodec, Codebook) with shape-validated parameters."""
    import os

    tensors, extra = ad.load_checkpoint(dirpath)
    arch = CodecArch.from_json(extra["architecture"])
    codec = SaliencyCodec(arch, seed=0)
    for name, param in codec.params.items():
        if name not in tensors:
            raise ad.CheckpointError(f"checkpoint missing parameter {name}")
        if tuple(tensors[name].shape) != param.data.shape:
            raise ad.CheckpointError(
                f"parameter {name} shape {tensors[name].shape} != expected {param.data.shape}"
            )
        param.data = tensors[name].astype(codec.dtype)
    meta = extra["codebook"]
    with open(os.path.join(dirpath, meta["file"]), "rb") as f:
        raw = f.read()
    vectors = np.frombuffer(raw, dtype="<f4").reshape(meta["n_idx"], meta["dim"]).astype(np.float64)
    return codec, vq.Codebook(vectors, meta["granularity"])
