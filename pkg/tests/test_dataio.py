import json

import numpy as np
import pytest

from mdmkit.dataio import (EmbeddingPairSet, SyntheticSet, ToySpec, fnv1a64, gen_toy, load_matrix,
                           load_pairs, load_synthetic, matrix_bytes, parse_matrix,
                           parse_synthetic, save_matrix, save_pairs, save_synthetic,
                           synthetic_bytes)
from mdmkit.errors import ConfigError, FormatError
from mdmkit.numerics import Rng


def _fnv_reference(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) % 2 ** 64
    return h


@pytest.mark.parametrize("data,expected", [(b"", "cbf29ce484222325"), (b"a", "af63dc4c8601ec8c"),
                                           (b"foobar", "85944171f73967e8")])
def test_fnv1a64_published_vectors(data, expected):
    assert fnv1a64(data) == expected


def test_fnv1a64_matches_reference_loop():
    blob = bytes(range(256)) * 3
    assert int(fnv1a64(blob), 16) == _fnv_reference(blob)


def test_matrix_roundtrip(tmp_path):
    m = Rng(0).normal((7, 3))
    save_matrix(tmp_path / "m.mdmx", m)
    back = load_matrix(tmp_path / "m.mdmx")
    np.testing.assert_array_equal(back, m.astype(np.float32).astype(np.float64))
    raw = matrix_bytes(m)
    assert raw[:4] == b"MDMX" and len(raw) == 14 + 7 * 3 * 4


def test_matrix_format_errors():
    raw = matrix_bytes(np.ones((2, 2)))
    for bad in (b"MDMY" + raw[4:], raw[:-1], raw + b"\0\0\0\0"):
        with pytest.raises(FormatError):
            parse_matrix(bad)


def test_pairs_roundtrip_and_fingerprint(tmp_path):
    train, _ = gen_toy(ToySpec(n_pairs=30, n_clusters=3, d_v_raw=4, d_t_raw=5, seed=1))
    man = save_pairs(tmp_path / "train", train)
    back = load_pairs(tmp_path / "train.json")
    np.testing.assert_array_equal(back.image, train.image.astype(np.float32))
    np.testing.assert_array_equal(back.text, train.text.astype(np.float32))
    assert back.manifest["fingerprint"] == man["fingerprint"] == back.fingerprint()
    assert back.manifest["labels"] == train.manifest["labels"]


def test_pairs_flipped_byte(tmp_path):
    train, _ = gen_toy(ToySpec(n_pairs=30, n_clusters=3, d_v_raw=4, d_t_raw=4, seed=1))
    save_pairs(tmp_path / "p", train)
    path = tmp_path / "p.mdmx"
    data = bytearray(path.read_bytes())
    data[40] ^= 0x01
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError, match="fingerprint"):
        load_pairs(tmp_path / "p")


def test_pairs_manifest_n_mismatch(tmp_path):
    train, _ = gen_toy(ToySpec(n_pairs=30, n_clusters=3, d_v_raw=4, d_t_raw=4, seed=1))
    save_pairs(tmp_path / "p", train)
    man = json.loads((tmp_path / "p.json").read_text())
    man["N"] = 31
    (tmp_path / "p.json").write_text(json.dumps(man))
    with pytest.raises(FormatError):
        load_pairs(tmp_path / "p")


def _syn(k=4, dv=3, dt=2, seed=0):
    r = Rng(seed)
    return SyntheticSet(r.normal((k, dv)), r.normal((k, dt)), r.normal((k, dv)), r.normal((k, dt)), 17)


def test_synthetic_roundtrip_f64_with_state(tmp_path):
    syn = _syn()
    state = Rng(5).get_state()
    save_synthetic(tmp_path / "s.mdms", syn, rng_state=state, precision="f64")
    back, st = load_synthetic(tmp_path / "s.mdms", with_rng=True)
    for a in ("img_params", "txt_params", "vel_img", "vel_txt"):
        np.testing.assert_array_equal(getattr(back, a), getattr(syn, a))
    assert back.iteration == 17
    assert Rng.from_state(st).uniform() == Rng.from_state(state).uniform()


def test_synthetic_roundtrip_f32_without_state():
    syn = _syn()
    back, st = parse_synthetic(synthetic_bytes(syn, include_state=False))
    assert st is None
    np.testing.assert_array_equal(back.img_params, syn.img_params.astype(np.float32))
    assert not back.vel_img.any()


def test_synthetic_format_errors():
    raw = synthetic_bytes(_syn())
    for bad in (b"MDMX" + raw[4:], raw[:-2], raw + b"x"):
        with pytest.raises(FormatError):
            parse_synthetic(bad)


def test_gen_toy_deterministic_bytes(tmp_path):
    a, _ = gen_toy(ToySpec(n_pairs=50, n_clusters=5, seed=9))
    b, _ = gen_toy(ToySpec(n_pairs=50, n_clusters=5, seed=9))
    save_pairs(tmp_path / "a", a)
    save_pairs(tmp_path / "b", b)
    assert (tmp_path / "a.mdmx").read_bytes() == (tmp_path / "b.mdmx").read_bytes()
    c, _ = gen_toy(ToySpec(n_pairs=50, n_clusters=5, seed=10))
    assert c.fingerprint() != a.fingerprint()


def test_gen_toy_noise_free_pairs_sit_on_centers():
    train, _ = gen_toy(ToySpec(n_pairs=12, n_clusters=12, d_v_raw=6, d_t_raw=5,
                               intra_noise=0.0, cross_noise=0.0, seed=2))
    labels = np.array(train.manifest["labels"])
    assert sorted(labels.tolist()) == list(range(12))
    # every cluster's image row is its own unit center: rows are distinct and unit
    np.testing.assert_allclose(np.linalg.norm(train.image, axis=1), 1.0)
    again, _ = gen_toy(ToySpec(n_pairs=24, n_clusters=12, d_v_raw=6, d_t_raw=5,
                               intra_noise=0.0, cross_noise=0.0, seed=2))
    lab2 = np.array(again.manifest["labels"])
    for c in np.unique(lab2):
        rows = again.text[lab2 == c]
        np.testing.assert_allclose(rows, rows[0][None, :].repeat(len(rows), 0), atol=1e-12)


def test_gen_toy_sizes_and_validation():
    train, test = gen_toy(ToySpec(n_pairs=80, n_clusters=4, seed=0))
    assert (train.n, test.n) == (80, 20)
    with pytest.raises(ConfigError):
        gen_toy(ToySpec(n_pairs=5, n_clusters=6))
    with pytest.raises(ConfigError):
        gen_toy(ToySpec(intra_noise=-0.1))


def test_gen_toy_class_balance():
    n, k = 1000, 10
    for seed in range(10):
        train, _ = gen_toy(ToySpec(n_pairs=n, n_clusters=k, d_v_raw=4, d_t_raw=4, seed=seed))
        counts = np.bincount(train.manifest["labels"], minlength=k)
        assert np.all(np.abs(counts - n / k) <= 3 * np.sqrt(n / k))


def test_pair_set_row_mismatch():
    from mdmkit.errors import DataError
    with pytest.raises(DataError):
        EmbeddingPairSet(np.ones((3, 2)), np.ones((2, 2)))
