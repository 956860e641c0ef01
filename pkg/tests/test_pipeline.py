import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from advembed import codec
from advembed import neuralkey as nk
from advembed.attack import AttackConfig
from advembed.pipeline import (EmbeddingError, Manifest, ManifestError, StegoSequence,
                               decoding_rate, embed_message, extract_message, image_name,
                               load_stego, quantize_image, read_digits, save_stego)


def test_quantize_image_rule():
    assert quantize_image(np.array([0.0, 1.0])).tolist() == [0.0, 1.0]
    assert quantize_image(np.array([0.5]))[0] == np.float32(128 / 255)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=50))
def test_quantize_idempotent(values):
    q = quantize_image(np.array(values))
    assert np.array_equal(quantize_image(q), q)


def test_hello_round_trip(desk):
    bits = codec.bytes_to_bits(b"hello")
    stego = embed_message(bits, desk.model, desk.pool.images, AttackConfig(), 0)
    assert len(stego) == 13 == len(stego.images)
    assert stego.manifest.chunk_lengths == [1] * 13
    assert stego.manifest.key_fingerprint == desk.model.fingerprint
    assert extract_message(stego, desk.model) == bits


def test_k2_round_trip_after_png(desk, tmp_path):
    bits = [int(b) for b in np.random.default_rng(8).integers(0, 2, 64)]
    stego = embed_message(bits, desk.model, desk.pool.images, AttackConfig(k=2, gamma=4.0), 1)
    assert sum(stego.manifest.chunk_lengths) == codec.required_images(64, 10)
    assert np.array_equal(stego.images, quantize_image(stego.images))
    save_stego(stego, tmp_path)
    loaded = load_stego(tmp_path)
    assert np.array_equal(loaded.images, stego.images)
    assert loaded.manifest == stego.manifest
    assert extract_message(loaded, desk.model) == bits


def test_empty_message(small_model, small_pool, tmp_path):
    stego = embed_message([], small_model, small_pool, AttackConfig(), 0)
    assert len(stego) == 0 and stego.manifest.bit_length == 0
    assert extract_message(stego, small_model) == []
    save_stego(stego, tmp_path)
    assert extract_message(load_stego(tmp_path), small_model) == []


def test_many_random_messages(small_model, small_pool):
    rng = np.random.default_rng(21)
    for i in range(100):
        bits = [int(b) for b in rng.integers(0, 2, int(rng.integers(1, 13)))]
        k = 1 + i % 2
        stego = embed_message(bits, small_model, small_pool, AttackConfig(k=k), i)
        assert extract_message(stego, small_model) == bits


def test_all_or_nothing(small_model, small_pool):
    cfg = AttackConfig(k=4, restarts=1, iterations=1, epsilon=0.01, epsilon_step=0.001)
    sink = []
    with pytest.raises(EmbeddingError) as err:
        embed_message([1, 0] * 12, small_model, small_pool, cfg, 0, outcome_sink=sink)
    assert err.value.failed_chunks
    assert err.value.failed_chunks == np.flatnonzero(~sink[0].per_chunk_success).tolist()


def test_invalid_config_rejected(small_model, small_pool):
    with pytest.raises(ValueError):
        embed_message([1], small_model, small_pool, AttackConfig(k=5), 0)


def test_manifest_n_mismatch(desk, small_model):
    stego = StegoSequence(np.zeros((1,) + small_model.input_shape, np.float32),
                          Manifest(n=10, k=1, bit_length=3, chunk_lengths=[1]))
    with pytest.raises(ManifestError):
        extract_message(stego, small_model)


def test_single_image_reads_class_7():
    model = nk.build_model(nk.ArchSpec((2, 2, 1), (nk.Flatten(), nk.Dense(10))), 0)
    model.params = [np.zeros_like(p) for p in model.params]
    model.params[1][7] = 5.0
    img = np.zeros((1, 2, 2, 1), np.float32)
    assert read_digits(model, img, [1]) == [7]
    stego = StegoSequence(img, Manifest(n=10, k=1, bit_length=3, chunk_lengths=[1]))
    assert extract_message(stego, model) == [1, 1, 1]


def test_overflow_is_corrupt():
    model = nk.build_model(nk.ArchSpec((2, 2, 1), (nk.Flatten(), nk.Dense(10))), 0)
    model.params = [np.zeros_like(p) for p in model.params]
    model.params[1][9] = 5.0
    stego = StegoSequence(np.zeros((1, 2, 2, 1), np.float32),
                          Manifest(n=10, k=1, bit_length=3, chunk_lengths=[1]))
    with pytest.raises(codec.CorruptMessageError):
        extract_message(stego, model)


@pytest.mark.parametrize("change", [
    dict(version=2), dict(n=1), dict(k=0), dict(chunk_lengths=[2]), dict(chunk_lengths=[1, 1]),
    dict(images=["a.png", "b.png"]), dict(bit_length=-1),
])
def test_manifest_validation(change):
    base = dict(n=10, k=1, bit_length=3, chunk_lengths=[1], images=["a.png"])
    with pytest.raises(ManifestError):
        Manifest(**{**base, **change}).validate()


def test_manifest_json_round_trip():
    m = Manifest(n=10, k=2, bit_length=8, chunk_lengths=[2, 1], images=["x", "y"],
                 key_fingerprint="ab")
    d = json.loads(m.to_json())
    assert d["version"] == 1 and d["chunk_lengths"] == [2, 1]
    assert Manifest.from_json(m.to_json()) == m
    with pytest.raises(ManifestError):
        Manifest.from_json("{not json")
    with pytest.raises(ManifestError):
        Manifest.from_json('{"n": 10}')


def test_load_errors(tmp_path, small_model, small_pool):
    with pytest.raises(ManifestError):
        load_stego(tmp_path)
    stego = embed_message([1, 0, 1], small_model, small_pool, AttackConfig(), 0)
    save_stego(stego, tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["manifest.json"] + [image_name(i) for i in range(len(stego))]
    (tmp_path / image_name(0)).unlink()
    with pytest.raises(ManifestError):
        load_stego(tmp_path)


def test_image_names_sort_in_order():
    names = [image_name(i) for i in (0, 9, 10, 99, 100, 12345)]
    assert names == sorted(names)


def test_decoding_rate(desk, small_model):
    rng = np.random.default_rng(3)
    bits = [int(b) for b in rng.integers(0, 2, 30)]
    stego = embed_message(bits, desk.model, desk.pool.images, AttackConfig(), 3)
    assert decoding_rate(stego, desk.model, desk.model) == 1.0
    other = nk.train(nk.build_model(desk.model.arch, 99), desk.train_set, 1, seed=99)
    assert 0 <= decoding_rate(stego, desk.model, other) < 1.0
    with pytest.raises(ValueError):
        decoding_rate(stego, desk.model, small_model)
