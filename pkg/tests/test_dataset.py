"""Scene generator and PGM format oracles."""
import numpy as np
import pytest

from ulbsc import dataset
from ulbsc.text_link import UNK, Vocabulary


def test_unblurred_ellipse_hits_one_inside_zero_at_corners():
    spec = dataset.SceneSpec("ellipse", 0.5, 0.5, 0.2, blur=0.0)
    m = dataset.render_map(spec)
    assert m[32, 32] == 1.0
    assert m.max() == 1.0
    for r, c in ((0, 0), (0, 63), (63, 0), (63, 63)):
        assert m[r, c] == 0.0


def test_generate_pair_deterministic():
    spec = dataset.SceneSpec("blob", 0.4, 0.6, 0.25, blur=1.0, seed=9)
    m1, c1 = dataset.generate_pair(spec)
    m2, c2 = dataset.generate_pair(spec)
    assert np.array_equal(m1, m2) and c1 == c2


def test_caption_template_rules():
    spec = dataset.SceneSpec("rectangle", 0.15, 0.15, 0.1, blur=1.5)
    _, caption = dataset.generate_pair(spec)
    assert caption == "a small rectangle in the top left"
    # thirds boundaries derived from the template rules
    assert dataset.caption_for(dataset.SceneSpec("ellipse", 0.5, 0.5, 0.5, 0)) == \
        "a medium ellipse in the middle center"
    assert dataset.caption_for(dataset.SceneSpec("blob", 0.9, 0.7, 0.8, 0)) == \
        "a large blob in the bottom right"


def test_spec_validation():
    with pytest.raises(ValueError):
        dataset.SceneSpec("circle", 0.5, 0.5, 0.2, 0.0)
    with pytest.raises(ValueError):
        dataset.SceneSpec("ellipse", 1.5, 0.5, 0.2, 0.0)
    with pytest.raises(ValueError):
        dataset.SceneSpec("ellipse", 0.5, 0.5, 0.2, -1.0)


def test_make_split_reproducible_and_seed_sensitive():
    a_train, a_test = dataset.make_split(10, 5, seed=3)
    b_train, b_test = dataset.make_split(10, 5, seed=3)
    assert a_train == b_train and a_test == b_test
    c_train, _ = dataset.make_split(10, 5, seed=4)
    assert a_train != c_train


def test_generated_maps_in_range_with_object_present():
    train, test = dataset.make_split(30, 10, seed=123)
    vocab = Vocabulary.default()
    for spec in train + test:
        m, caption = dataset.generate_pair(spec)
        assert m.min() >= 0.0 and m.max() <= 1.0
        assert (m > 0.5).any(), f"no salient pixel for {spec}"
        ids = vocab.tokenize(caption)
        assert UNK not in ids, f"caption {caption!r} not tokenizable"


# ---------------------------------------------------------------------------
# PGM


def test_pgm_exact_bytes_all_zero():
    m = np.zeros((4, 4))
    data = dataset.pgm_encode(m)
    assert data == b"P5\n4 4\n255\n" + b"\x00" * 16


def test_pgm_round_half_up():
    m = np.array([[0.0, 0.5], [1.0, 0.2], [0.8, 0.999]])
    data = dataset.pgm_encode(m)
    payload = data[len(b"P5\n2 3\n255\n") :]
    assert list(payload) == [0, 128, 255, 51, 204, 255]


def test_pgm_roundtrip_quantization_bound(tmp_path):
    rng = np.random.default_rng(0)
    m = rng.uniform(0, 1, size=(16, 12))
    path = tmp_path / "m.pgm"
    dataset.save_pgm(m, str(path))
    back = dataset.load_pgm(str(path))
    assert back.shape == m.shape
    assert np.abs(back - m).max() <= 1.0 / 510.0 + 1e-12


def test_pgm_payload_with_whitespace_bytes_survives():
    # pixel values 10 (\n) and 32 (space) must not be eaten by the parser
    m = np.array([[10 / 255.0, 32 / 255.0]])
    assert np.allclose(dataset.pgm_decode(dataset.pgm_encode(m)), m)


def test_pgm_format_errors():
    with pytest.raises(dataset.PgmFormatError):
        dataset.pgm_decode(b"P6\n1 1\n255\n\x00")
    with pytest.raises(dataset.PgmFormatError):
        dataset.pgm_decode(b"P5\n2 2\n255\n\x00\x00")  # truncated payload
    with pytest.raises(dataset.PgmFormatError):
        dataset.pgm_decode(b"P5\n1 1\n65535\n\x00\x00")
    with pytest.raises(ValueError):
        dataset.pgm_encode(np.array([[1.5]]))
