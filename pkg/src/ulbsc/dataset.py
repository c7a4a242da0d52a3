"""Synthetic (saliency map, caption) pairs plus binary PGM I/O.

A seeded scene generator stands in for the pretrained captioner and
saliency detector: each scene is one soft grayscale shape with a
template caption that is a deterministic function of the scene fields.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

SHAPES = ("ellipse", "rectangle", "blob")

# template language; every caption is "a <size> <shape> in the <row> <col>"
SIZE_WORDS = ("small", "medium", "large")
ROW_WORDS = ("top", "middle", "bottom")
COL_WORDS = ("left", "center", "right")
VOCAB_WORDS = ("a", "in", "the") + SIZE_WORDS + SHAPES + ROW_WORDS + COL_WORDS

DEFAULT_HW = 64


class PgmFormatError(ValueError):
    """File is not the binary PGM variant this package writes."""


@dataclass(frozen=True)
class SceneSpec:
    """One synthetic scene; map and caption are pure functions of the fields."""

    kind: str
    center_r: float
    center_c: float
    size: float
    blur: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SHAPES:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        for name in ("center_r", "center_c", "size"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name}={v} must lie in (0, 1)")
        if self.blur < 0:
            raise ValueError("blur must be non-negative")


def _word_from_thirds(value: float, words) -> str:
    if value < 1.0 / 3.0:
        return words[0]
    if value < 2.0 / 3.0:
        return words[1]
    return words[2]


def caption_for(spec: SceneSpec) -> str:
    size_word = _word_from_thirds(spec.size, SIZE_WORDS)
    row_word = _word_from_thirds(spec.center_r, ROW_WORDS)
    col_word = _word_from_thirds(spec.center_c, COL_WORDS)
    return f"a {size_word} {spec.kind} in the {row_word} {col_word}"


def _ellipse_mask(h, w, cr, cc, ar, ac):
    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    return (((rows - cr) / ar) ** 2 + ((cols - cc) / ac) ** 2) <= 1.0


def render_map(spec: SceneSpec, h: int = DEFAULT_HW, w: int = DEFAULT_HW) -> np.ndarray:
    """Render the scene as a soft saliency map in [0, 1], shape (h, w)."""
    cr = spec.center_r * (h - 1)
    cc = spec.center_c * (w - 1)
    ar = max(spec.size * h * 0.35, 1.0)
    ac = max(spec.size * w * 0.5, 1.0)
    if spec.kind == "ellipse":
        mask = _ellipse_mask(h, w, cr, cc, ar, ac)
    elif spec.kind == "rectangle":
        rows = np.arange(h, dtype=np.float64)[:, None]
        cols = np.arange(w, dtype=np.float64)[None, :]
        mask = (np.abs(rows - cr) <= ar) & (np.abs(cols - cc) <= ac)
    else:  # blob: union of jittered ellipses, deterministic per spec.seed
        rng = np.random.default_rng(spec.seed)
        mask = _ellipse_mask(h, w, cr, cc, ar, ac)
        for _ in range(2):
            jr = cr + rng.uniform(-0.08, 0.08) * h
            jc = cc + rng.uniform(-0.08, 0.08) * w
            scale = rng.uniform(0.5, 1.0)
            mask |= _ellipse_mask(h, w, jr, jc, ar * scale, ac * scale)
    m = mask.astype(np.float64)
    if spec.blur > 0:
        m = gaussian_filter(m, sigma=spec.blur)
    return np.clip(m, 0.0, 1.0)


def generate_pair(spec: SceneSpec, h: int = DEFAULT_HW, w: int = DEFAULT_HW):
    """-> (saliency map (h, w) in [0,1], template caption string)."""
    return render_map(spec, h, w), caption_for(spec)


def make_split(n_train: int, n_test: int, seed: int):
    """Seeded uniform SceneSpec sampling; train/test disjoint by stream position."""
    if n_train <= 0 or n_test <= 0:
        raise ValueError("split sizes must be positive")
    # object sizes keep the salient fraction around 10%; much smaller and
    # plain-MSE training falls into the all-background local optimum
    rng = np.random.default_rng(seed)
    specs = []
    for _ in range(n_train + n_test):
        specs.append(
            SceneSpec(
                kind=SHAPES[int(rng.integers(len(SHAPES)))],
                center_r=float(rng.uniform(0.25, 0.75)),
                center_c=float(rng.uniform(0.25, 0.75)),
                size=float(rng.uniform(0.25, 0.7)),
                blur=float(rng.uniform(0.5, 1.5)),
                seed=int(rng.integers(2**32)),
            )
        )
    return specs[:n_train], specs[n_train:]


def maps_for_specs(specs, h: int = DEFAULT_HW, w: int = DEFAULT_HW, dtype=np.float32) -> np.ndarray:
    """Stack rendered maps as (N, h, w)."""
    return np.stack([render_map(s, h, w) for s in specs]).astype(dtype)


# ---------------------------------------------------------------------------
# binary PGM (P5), maxval 255: b"P5\n<w> <h>\n255\n" + h*w payload bytes


def pgm_encode(m: np.ndarray) -> bytes:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("saliency map must be 2-D")
    if m.min() < 0.0 or m.max() > 1.0:
        raise ValueError("saliency map values must lie in [0, 1]")
    h, w = m.shape
    payload = np.floor(m * 255.0 + 0.5).astype(np.uint8)  # round half up
    return b"P5\n%d %d\n255\n" % (w, h) + payload.tobytes()


def _next_header_token(data: bytes, pos: int):
    while pos < len(data) and data[pos : pos + 1].isspace():
        pos += 1
    start = pos
    while pos < len(data) and not data[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise PgmFormatError("truncated PGM header")
    return data[start:pos], pos


def pgm_decode(data: bytes) -> np.ndarray:
    if not data.startswith(b"P5"):
        raise PgmFormatError("bad magic, expected P5")
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _next_header_token(data, pos)
        fields.append(tok)
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError as e:
        raise PgmFormatError("non-numeric PGM header field") from e
    if maxval != 255:
        raise PgmFormatError(f"unsupported maxval {maxval}, expected 255")
    # exactly one whitespace byte separates the header from the payload
    payload = data[pos + 1 :]
    if len(payload) < h * w:
        raise PgmFormatError(f"truncated payload: {len(payload)} < {h * w} bytes")
    pixels = np.frombuffer(payload[: h * w], dtype=np.uint8)
    return pixels.reshape(h, w).astype(np.float64) / 255.0


def save_pgm(m: np.ndarray, path: str):
    with open(path, "wb") as f:
        f.write(pgm_encode(m))


def load_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        return pgm_decode(f.read())
