import numpy as np
import pytest

from scribblesod import data
from scribblesod.data import (DatasetManifest, ManifestEntry, ScribbleLabel, State, generate_toy_dataset,
                              load_scribble, read_manifest, write_manifest)
from scribblesod.imaging import save_png


def test_scribble_all_unknown(tmp_path):
    save_png(np.zeros((5, 6), np.uint8), tmp_path / "s.png")
    lab = load_scribble(tmp_path / "s.png")
    assert (lab.states == State.UNKNOWN).all() and lab.shape == (5, 6)


def test_scribble_values(tmp_path):
    px = np.zeros((8, 8), np.uint8)
    px[3, 4] = 128
    px[1, 1] = 255
    save_png(px, tmp_path / "s.png")
    lab = load_scribble(tmp_path / "s.png")
    assert lab.states[3, 4] == State.BACKGROUND
    assert lab.states[1, 1] == State.FOREGROUND
    assert lab.labeled.sum() == 2


def test_scribble_bad_value(tmp_path):
    px = np.zeros((4, 4), np.uint8)
    px[2, 2] = 17
    save_png(px, tmp_path / "s.png")
    with pytest.raises(data.FormatError, match="17"):
        load_scribble(tmp_path / "s.png")


def test_scribble_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    lab = ScribbleLabel(rng.integers(0, 3, size=(9, 7)))
    data.save_scribble(lab, tmp_path / "s.png")
    assert load_scribble(tmp_path / "s.png") == lab


@pytest.fixture(scope="module")
def toy():
    return generate_toy_dataset(40, 64, seed=5)


def test_toy_deterministic(toy):
    again = generate_toy_dataset(40, 64, seed=5)
    for a, b in zip(toy, again):
        assert a.image.tobytes() == b.image.tobytes()
        assert a.label == b.label and np.array_equal(a.gt, b.gt)


def test_toy_order_independent(toy):
    # sample i only depends on (seed, i)
    assert generate_toy_dataset(3, 64, seed=5)[2].image.tobytes() == toy[2].image.tobytes()


def test_toy_scribbles_consistent(toy):
    for s in toy:
        gt = s.gt.astype(bool)
        assert s.label.is_trainable()
        assert not (s.label.fg.astype(bool) & ~gt).any()
        assert not (s.label.bg.astype(bool) & gt).any()
        assert s.image.min() >= 0 and s.image.max() <= 1


def test_toy_area_fraction():
    for s in generate_toy_dataset(200, 64, seed=11):
        assert 0.05 <= s.gt.mean() <= 0.40


def test_toy_bad_count():
    with pytest.raises(ValueError):
        generate_toy_dataset(0)


def test_manifest_roundtrip(tmp_path):
    for name in ("a.png", "b.png"):
        (tmp_path / name).write_bytes(b"x")
    m = DatasetManifest([ManifestEntry("s0", "a.png", "b.png", []),
                         ManifestEntry("s1", "a.png", "b.png", [], gt="a.png", split="test")])
    write_manifest(m, tmp_path / "m.jsonl")
    assert read_manifest(tmp_path / "m.jsonl") == m


def test_manifest_missing_file(tmp_path):
    m = DatasetManifest([ManifestEntry("s0", "nope.png", "also_nope.png")])
    write_manifest(m, tmp_path / "m.jsonl")
    with pytest.raises(data.ManifestError, match="nope.png"):
        read_manifest(tmp_path / "m.jsonl")


def test_manifest_empty(tmp_path):
    (tmp_path / "m.jsonl").write_text("")
    assert read_manifest(tmp_path / "m.jsonl").entries == []


def test_write_toy_dataset(tmp_path, toy):
    m = data.write_toy_dataset(toy[:4], tmp_path, n_test=1)
    back = read_manifest(tmp_path / "manifest.jsonl")
    assert back == m
    assert [e.split for e in back.entries] == ["train"] * 3 + ["test"]
    s = data.load_sample(back, back.entries[0])
    np.testing.assert_array_equal(s.image, toy[0].image)
    assert s.label == toy[0].label
    np.testing.assert_array_equal(s.gt, toy[0].gt)
