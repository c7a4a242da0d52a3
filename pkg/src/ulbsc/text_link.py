"""Caption branch: tokenizer, transformer semantic codec, linear channel
codec, and the mutual-information estimator used during training.

The semantic encoder is one self-attention block over embedded tokens
with sinusoidal positions; channel coding is a per-token linear map to
k_sym real symbols, power-normalised per sentence. Training minimises
cross-entropy minus eta times a neural mutual-information lower bound,
alternating with estimator updates, under random SNR per batch.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import channel as ch
from . import dataset
from .saliency_codec import TrainingDivergedError

L_MAX = 16
V_DIM = 32
K_SYM = 16
FF_DIM = 64
ETA_DEFAULT = 0.1
MIN_MI_BATCH = 16
CE_CLAMP = 1e-12

PAD, START, END, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<start>", "<end>", "<unk>")

# counts how often loss_ce had to clamp a vanishing target probability
clamp_warnings = 0


class Vocabulary:
    """word -> id map with the four specials pinned at ids 0..3."""

    def __init__(self, words):
        self.words = list(SPECIALS) + [w for w in words if w not in SPECIALS]
        if len(self.words) > 64:
            raise ValueError("vocabulary capped at 64 entries")
        self.ids = {w: i for i, w in enumerate(self.words)}
        if len(self.ids) != len(self.words):
            raise ValueError("duplicate words in vocabulary")

    @classmethod
    def default(cls) -> "Vocabulary":
        return cls(dataset.VOCAB_WORDS)

    def __len__(self):
        return len(self.words)

    def tokenize(self, caption: str, l_max: int = L_MAX) -> np.ndarray:
        """-> ids of length l_max: <start> words <end> then padding."""
        words = caption.split()
        if len(words) > l_max - 2:
            raise ValueError(f"caption has {len(words)} words, limit is {l_max - 2}")
        ids = [START] + [self.ids.get(w, UNK) for w in words] + [END]
        return np.array(ids + [PAD] * (l_max - len(ids)), dtype=np.int64)

    def detokenize(self, ids) -> str:
        out = []
        for i in np.asarray(ids).ravel():
            if i == END:
                break
            if i in (PAD, START):
                continue
            out.append(self.words[int(i)] if 0 <= int(i) < len(self.words) else SPECIALS[UNK])
        return " ".join(out)


def sinusoidal_positions(l_max: int, dim: int) -> np.ndarray:
    pos = np.arange(l_max)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return pe


def _glorot(rng, fan_in, fan_out, dtype):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out)).astype(dtype)


class TextLink:
    """Transformer text codec plus linear channel codec (both directions)."""

    def __init__(
        self,
        vocab: Vocabulary | None = None,
        l_max: int = L_MAX,
        v_dim: int = V_DIM,
        k_sym: int = K_SYM,
        ff_dim: int = FF_DIM,
        seed: int = 0,
        dtype=np.float64,
    ):
        self.vocab = vocab or Vocabulary.default()
        self.l_max = l_max
        self.v_dim = v_dim
        self.k_sym = k_sym
        self.ff_dim = ff_dim
        self.dtype = dtype
        self.n_symbols = l_max * k_sym
        self.pe = sinusoidal_positions(l_max, v_dim).astype(dtype)
        rng = np.random.default_rng(seed)
        p = {}

        def lin(name, fi, fo):
            p[name + ".w"] = ad.Parameter(_glorot(rng, fi, fo, dtype), name + ".w")
            p[name + ".b"] = ad.Parameter(np.zeros(fo, dtype=dtype), name + ".b")

        def block(prefix):
            for nm in ("wq", "wk", "wv", "wo"):
                lin(f"{prefix}.{nm}", v_dim, v_dim)
            lin(f"{prefix}.ff1", v_dim, ff_dim)
            lin(f"{prefix}.ff2", ff_dim, v_dim)
            for nm in ("ln1", "ln2"):
                p[f"{prefix}.{nm}.g"] = ad.Parameter(np.ones(v_dim, dtype=dtype), f"{prefix}.{nm}.g")
                p[f"{prefix}.{nm}.b"] = ad.Parameter(np.zeros(v_dim, dtype=dtype), f"{prefix}.{nm}.b")

        p["embed"] = ad.Parameter(
            rng.normal(0.0, 0.1, size=(len(self.vocab), v_dim)).astype(dtype), "embed"
        )
        block("enc")
        lin("tc", v_dim, k_sym)  # channel encoder
        lin("rc", k_sym, v_dim)  # channel decoder
        block("dec")
        lin("head", v_dim, len(self.vocab))
        self.params = p

    def params_list(self):
        return list(self.params.values())

    def _linear(self, x, name):
        b, l, d = x.shape
        flat = ad.reshape(x, (b * l, d))
        out = ad.add(ad.matmul(flat, self.params[name + ".w"]), self.params[name + ".b"])
        return ad.reshape(out, (b, l, out.shape[-1]))

    def _block(self, x, prefix):
        q = self._linear(x, f"{prefix}.wq")
        k = self._linear(x, f"{prefix}.wk")
        v = self._linear(x, f"{prefix}.wv")
        scores = ad.mul(ad.matmul(q, ad.permute(k, (0, 2, 1))), 1.0 / np.sqrt(self.v_dim))
        ctx = ad.matmul(ad.softmax(scores), v)
        x = ad.layer_norm(
            ad.add(x, self._linear(ctx, f"{prefix}.wo")),
            self.params[f"{prefix}.ln1.g"],
            self.params[f"{prefix}.ln1.b"],
        )
        ff = self._linear(ad.relu(self._linear(x, f"{prefix}.ff1")), f"{prefix}.ff2")
        return ad.layer_norm(
            ad.add(x, ff), self.params[f"{prefix}.ln2.g"], self.params[f"{prefix}.ln2.b"]
        )

    def encode(self, ids: np.ndarray) -> ad.Tensor:
        """Token ids (B, L) -> semantic features (B, L, v_dim)."""
        ids = np.atleast_2d(np.asarray(ids))
        if ids.shape[1] != self.l_max:
            raise ValueError(f"expected sequences of length {self.l_max}, got {ids.shape}")
        x = ad.add(ad.embedding(self.params["embed"], ids), ad.Tensor(self.pe))
        return self._block(x, "enc")

    def channel_encode(self, feats: ad.Tensor) -> ad.Tensor:
        """Features (B, L, v_dim) -> unit-power symbols (B, L*k_sym)."""
        b = feats.shape[0]
        sym = ad.reshape(self._linear(feats, "tc"), (b, self.n_symbols))
        ms = ad.mean(ad.mul(sym, sym), axes=(1,), keepdims=True)
        if np.any(ms.data <= 0.0):
            raise ch.DegenerateSignalError("all-zero symbol vector cannot be normalised")
        return ad.mul(sym, pow_neg_half(ms))

    def transmit(self, ids: np.ndarray) -> ad.Tensor:
        return self.channel_encode(self.encode(ids))

    def decode_logits(self, symbols) -> ad.Tensor:
        """Received symbols (B, N) -> vocabulary logits (B, L, |V|)."""
        sym = symbols if isinstance(symbols, ad.Tensor) else ad.Tensor(np.atleast_2d(symbols).astype(self.dtype))
        b = sym.shape[0]
        if sym.shape[1] != self.n_symbols:
            raise ValueError(f"expected {self.n_symbols} symbols, got {sym.shape}")
        x = ad.reshape(sym, (b, self.l_max, self.k_sym))
        x = self._linear(x, "rc")
        x = self._block(x, "dec")
        return self._linear(x, "head")

    def decode(self, symbols):
        """-> (probabilities (B, L, |V|), greedy token ids cut at <end>)."""
        with ad.no_grad():
            probs = ad.softmax(self.decode_logits(symbols)).data
        tokens = probs.argmax(axis=-1)
        out = np.full_like(tokens, PAD)
        for r, row in enumerate(tokens):
            for c, t in enumerate(row):
                out[r, c] = t
                if t == END:
                    break
        return probs, out


def pow_neg_half(t: ad.Tensor) -> ad.Tensor:
    return ad.pow_scalar(t, -0.5)


def encode_text(ids: np.ndarray, link: TextLink) -> np.ndarray:
    with ad.no_grad():
        return link.encode(ids).data


def channel_encode_text(feats: np.ndarray, link: TextLink) -> np.ndarray:
    with ad.no_grad():
        return link.channel_encode(ad.Tensor(np.asarray(feats, dtype=link.dtype))).data


def decode_text(symbols: np.ndarray, link: TextLink):
    return link.decode(symbols)


def loss_ce(probs, targets: np.ndarray) -> ad.Tensor:
    """Mean -log p(target) over non-pad positions; probs rows sum to 1."""
    global clamp_warnings
    pt = probs if isinstance(probs, ad.Tensor) else ad.Tensor(probs)
    targets = np.asarray(targets)
    picked = ad.gather_last(pt, targets)
    n_clamped = int((picked.data < CE_CLAMP).sum())
    if n_clamped:
        clamp_warnings += n_clamped
    lp = ad.log(ad.clamp_min(picked, CE_CLAMP))
    mask = (targets != PAD).astype(pt.data.dtype)
    total = ad.tsum(ad.mul(lp, ad.Tensor(mask)))
    return ad.mul(ad.neg(total), 1.0 / max(mask.sum(), 1.0))


class MineNet:
    """Small MLP scoring (z, zhat) pairs; the estimator's critic."""

    def __init__(self, in_dim: int, hidden: int = 64, seed: int = 0, dtype=np.float64):
        rng = np.random.default_rng(seed)
        self.in_dim = in_dim
        p = {}
        p["w1"] = ad.Parameter(_glorot(rng, 2 * in_dim, hidden, dtype), "mine.w1")
        p["b1"] = ad.Parameter(np.zeros(hidden, dtype=dtype), "mine.b1")
        p["w2"] = ad.Parameter(_glorot(rng, hidden, hidden, dtype), "mine.w2")
        p["b2"] = ad.Parameter(np.zeros(hidden, dtype=dtype), "mine.b2")
        # zero-init head: the initial critic scores exactly 0 everywhere
        p["w3"] = ad.Parameter(np.zeros((hidden, 1), dtype=dtype), "mine.w3")
        p["b3"] = ad.Parameter(np.zeros(1, dtype=dtype), "mine.b3")
        self.params = p

    def params_list(self):
        return list(self.params.values())

    def score(self, z: ad.Tensor, zh: ad.Tensor) -> ad.Tensor:
        x = ad.concat_last(z, zh)
        h = ad.relu(ad.add(ad.matmul(x, self.params["w1"]), self.params["b1"]))
        h = ad.relu(ad.add(ad.matmul(h, self.params["w2"]), self.params["b2"]))
        return ad.add(ad.matmul(h, self.params["w3"]), self.params["b3"])


def mi_estimate(z, zh, mine: MineNet, perm: np.ndarray) -> ad.Tensor:
    """Donsker-Varadhan lower bound: E_joint[f] - log E_marginal[e^f].

    The marginal pairs are (z, zh[perm]) with a caller-seeded permutation.
    exp is stabilised by subtracting the detached max score.
    """
    zt = z if isinstance(z, ad.Tensor) else ad.Tensor(z)
    zht = zh if isinstance(zh, ad.Tensor) else ad.Tensor(zh)
    n = zt.shape[0]
    if n < MIN_MI_BATCH:
        raise ad.ContractError(f"mi_estimate needs a batch of >= {MIN_MI_BATCH} pairs, got {n}")
    if len(perm) != n:
        raise ValueError("permutation length must match the batch")
    joint = mine.score(zt, zht)
    marg = mine.score(zt, ad.index_rows(zht, np.asarray(perm)))
    m = ad.tmax(marg)
    log_mean_exp = ad.add(ad.log(ad.mean(ad.exp(ad.add(marg, -m)))), ad.Tensor(np.asarray(m)))
    return ad.add(ad.mean(joint), ad.neg(log_mean_exp))


def evaluate_exact_match(link: TextLink, captions, snr_db: float | None, seed: int = 0) -> float:
    """Fraction of captions recovered verbatim through the channel."""
    ids = np.stack([link.vocab.tokenize(c, link.l_max) for c in captions])
    with ad.no_grad():
        z = link.transmit(ids).data
    cfg = ch.ChannelConfig(snr_db=snr_db, seed=seed)
    zh = ch.send_text(z, cfg)
    _, tokens = link.decode(zh)
    hits = sum(link.vocab.detokenize(t) == c for t, c in zip(tokens, captions))
    return hits / len(captions)


def train_text_link(
    captions,
    vocab: Vocabulary | None = None,
    epochs: int = 40,
    lr: float = 1e-3,
    eta: float = ETA_DEFAULT,
    seed: int = 0,
    snr_range: tuple = (-3.0, 15.0),
    batch: int = 32,
    l_max: int = L_MAX,
    k_sym: int = K_SYM,
    out_dir: str | None = None,
    verbose: bool = False,
):
    """Alternating MINE-maximisation / codec-minimisation training.

    Each batch draws one SNR uniformly from snr_range, updates the
    estimator on detached symbols, then updates the codec on
    CE - eta * MI. -> (TextLink, MineNet, history dict).
    """
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must lie in [0, 1]")
    captions = list(captions)
    if not captions:
        raise ValueError("empty caption corpus")
    link = TextLink(vocab=vocab, l_max=l_max, k_sym=k_sym, seed=seed)
    mine = MineNet(link.n_symbols, seed=seed + 1)
    ids_all = np.stack([link.vocab.tokenize(c, l_max) for c in captions])
    rng = np.random.default_rng(seed + 2)
    opt_link = ad.Adam(link.params_list(), lr=lr)
    opt_mine = ad.Adam(mine.params_list(), lr=lr)
    n = len(captions)
    history = {"ce": [], "mi": []}
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        ce_losses, mi_vals = [], []
        for i in range(0, n, batch):
            ids = ids_all[order[i : i + batch]]
            if ids.shape[0] < 2:
                continue
            snr_db = float(rng.uniform(*snr_range))
            sigma = ch.noise_sigma(snr_db)
            perm = rng.permutation(ids.shape[0])
            noise = rng.normal(0.0, sigma, size=(ids.shape[0], link.n_symbols))

            try:
                # (a) tighten the MI bound on detached symbols
                if eta > 0.0 and ids.shape[0] >= MIN_MI_BATCH:
                    with ad.no_grad():
                        z_const = link.transmit(ids).data
                    opt_mine.zero_grad()
                    est = mi_estimate(ad.Tensor(z_const), ad.Tensor(z_const + noise), mine, perm)
                    ad.neg(est).backward()
                    opt_mine.step()

                # (b) codec step on CE - eta * MI
                opt_link.zero_grad()
                opt_mine.zero_grad()  # mine grads from this pass are discarded
                z = link.transmit(ids)
                zh = ad.add(z, ad.Tensor(noise))
                probs = ad.softmax(link.decode_logits(zh))
                ce = loss_ce(probs, ids)
                if eta > 0.0 and ids.shape[0] >= MIN_MI_BATCH:
                    mi = mi_estimate(z, zh, mine, perm)
                    loss = ad.add(ce, ad.mul(mi, -eta))
                    mi_vals.append(float(mi.data))
                else:
                    loss = ce
                loss.backward()
            except ad.NumericError as e:
                raise TrainingDivergedError(step, str(e)) from e
            if not np.isfinite(float(loss.data)):
                raise TrainingDivergedError(step)
            opt_link.step()
            ce_losses.append(float(ce.data))
            step += 1
        history["ce"].append(float(np.mean(ce_losses)))
        history["mi"].append(float(np.mean(mi_vals)) if mi_vals else 0.0)
        if verbose:
            print(f"epoch {epoch + 1}/{epochs} ce {history['ce'][-1]:.4f} mi {history['mi'][-1]:.3f}")
    if out_dir is not None:
        save_text_link(out_dir, link)
    return link, mine, history


def save_text_link(dirpath: str, link: TextLink) -> str:
    extra = {
        "kind": "text-link",
        "vocab": link.vocab.words[len(SPECIALS) :],
        "l_max": link.l_max,
        "v_dim": link.v_dim,
        "k_sym": link.k_sym,
        "ff_dim": link.ff_dim,
    }
    return ad.save_checkpoint(dirpath, ad.params_to_dict(link.params_list()), extra)


def load_text_link(dirpath: str) -> TextLink:
    tensors, extra = ad.load_checkpoint(dirpath)
    link = TextLink(
        vocab=Vocabulary(extra["vocab"]),
        l_max=extra["l_max"],
        v_dim=extra["v_dim"],
        k_sym=extra["k_sym"],
        ff_dim=extra["ff_dim"],
    )
    for name, param in link.params.items():
        if name not in tensors:
            raise ad.CheckpointError(f"checkpoint missing parameter {name}")
        if tuple(tensors[name].shape) != param.data.shape:
            raise ad.CheckpointError(f"parameter {name} has wrong shape in checkpoint")
        param.data = tensors[name].astype(link.dtype)
    return link
