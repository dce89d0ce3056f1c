import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vbd.data import (
    DatasetFormatError,
    LabeledImageSet,
    SyntheticSpec,
    generate_synthetic,
    load_cifar10,
    load_dataset,
    read_cifar10_batch,
    save_dataset,
    split,
)
from vbd.fileio import (
    FormatError,
    read_float_container,
    read_image,
    read_netpbm,
    write_float_container,
    write_pgm,
    write_ppm,
)

RECORD = 1 + 3072


def _cifar_bytes(labels, rng):
    out = bytearray()
    for y in labels:
        out.append(y)
        out += rng.integers(0, 256, 3072, dtype=np.uint8).tobytes()
    return bytes(out)


# --- synthetic -------------------------------------------------------------


def test_synthetic_counts_and_determinism():
    spec = SyntheticSpec(class_count=10, per_class=500)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    assert len(a) == 5000 and a.dims == (32, 32, 3)
    assert np.all(np.bincount(a.labels) == 500)
    assert np.array_equal(a.images, b.images)
    assert a.images.min() >= 0 and a.images.max() <= 1


def test_synthetic_zero_noise_classes_constant():
    d = generate_synthetic(SyntheticSpec(class_count=3, per_class=4, dims=(8, 8, 3), noise_std=0.0))
    for k in range(3):
        imgs = d.images[d.labels == k]
        assert np.all(imgs == imgs[0])
    assert not np.array_equal(d.images[0], d.images[4])


def test_synthetic_sample_is_independent_draw():
    spec = SyntheticSpec(class_count=2, per_class=5, dims=(8, 8, 3))
    assert not np.array_equal(generate_synthetic(spec).images, generate_synthetic(spec, sample=1).images)


# --- split -----------------------------------------------------------------


def test_split_examples():
    d = generate_synthetic(SyntheticSpec(class_count=4, per_class=500, dims=(4, 4, 1)))
    tr, ho = split(d, 0.8, seed=5)
    assert np.all(np.bincount(tr.labels) == 400) and np.all(np.bincount(ho.labels) == 100)
    tr2, _ = split(d, 0.8, seed=5)
    assert np.array_equal(tr.ids, tr2.ids)
    assert sorted(np.concatenate([tr.ids, ho.ids]).tolist()) == d.ids.tolist()
    with pytest.raises(ValueError):
        split(d, 1.0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 30), min_size=1, max_size=6), st.floats(0.05, 0.95), st.integers(0, 1000))
def test_split_is_stratified_partition(counts, frac, seed):
    labels = np.repeat(np.arange(len(counts)), counts)
    d = LabeledImageSet(np.zeros((len(labels), 2, 2, 1)), labels, len(counts), ids=np.arange(len(labels)) * 3 + 1)
    tr, ho = split(d, frac, seed)
    assert not set(tr.ids) & set(ho.ids)
    assert set(tr.ids) | set(ho.ids) == set(d.ids)
    for k, n in enumerate(counts):
        assert abs(np.sum(tr.labels == k) - frac * n) <= 1


# --- container -------------------------------------------------------------


def test_dataset_container_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    pix = rng.integers(0, 256, (7, 5, 6, 3)) / 255.0
    d = LabeledImageSet(pix, rng.integers(0, 4, 7), 4, ids=[10, 3, 99, 4, 5, 6, 1000])
    save_dataset(tmp_path / "a.vbds", d)
    back = load_dataset(tmp_path / "a.vbds")
    assert np.array_equal(back.images, d.images)
    assert np.array_equal(back.ids, d.ids) and np.array_equal(back.labels, d.labels)
    save_dataset(tmp_path / "b.vbds", back)
    assert (tmp_path / "a.vbds").read_bytes() == (tmp_path / "b.vbds").read_bytes()


def test_dataset_container_rejects_truncation(tmp_path):
    d = LabeledImageSet(np.zeros((3, 2, 2, 1)), [0, 1, 0], 2)
    save_dataset(tmp_path / "a.vbds", d)
    raw = (tmp_path / "a.vbds").read_bytes()
    (tmp_path / "b.vbds").write_bytes(raw[:-1])
    with pytest.raises(DatasetFormatError, match="offset"):
        load_dataset(tmp_path / "b.vbds")
    (tmp_path / "c.vbds").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(DatasetFormatError):
        load_dataset(tmp_path / "c.vbds")


def test_labeled_set_validation():
    with pytest.raises(ValueError):
        LabeledImageSet(np.zeros((2, 2, 2, 1)), [0, 5], 2)
    with pytest.raises(ValueError):
        LabeledImageSet(np.zeros((2, 2, 2, 1)), [0, 1], 2, ids=[3, 3])


# --- CIFAR-10 --------------------------------------------------------------


def test_cifar_record_layout(tmp_path):
    rng = np.random.default_rng(0)
    raw = bytearray(_cifar_bytes([6, 2], rng))
    raw[1] = 200      # record 0, red plane, pixel (0, 0)
    raw[1 + 1024] = 17   # green plane, pixel (0, 0)
    raw[1 + 2048 + 33] = 99   # blue plane, pixel (1, 1)
    path = tmp_path / "b.bin"
    path.write_bytes(bytes(raw))
    x, y = read_cifar10_batch(path)
    assert y.tolist() == [6, 2]
    assert x.shape == (2, 32, 32, 3)
    assert x[0, 0, 0, 0] == np.float32(200 / 255)
    assert x[0, 0, 0, 1] == np.float32(17 / 255)
    assert x[0, 1, 1, 2] == np.float32(99 / 255)


def test_cifar_errors(tmp_path):
    rng = np.random.default_rng(0)
    good = _cifar_bytes([1, 2], rng)
    (tmp_path / "t.bin").write_bytes(good[:-10])
    with pytest.raises(DatasetFormatError, match=f"byte offset {RECORD}"):
        read_cifar10_batch(tmp_path / "t.bin")
    (tmp_path / "l.bin").write_bytes(_cifar_bytes([1, 12], rng))
    with pytest.raises(DatasetFormatError, match="label byte 12"):
        read_cifar10_batch(tmp_path / "l.bin")
    with pytest.raises(FileNotFoundError):
        load_cifar10(tmp_path)


def test_cifar_directory(tmp_path):
    rng = np.random.default_rng(1)
    files = [f"data_batch_{i}.bin" for i in range(1, 6)]
    for i, name in enumerate(files):
        (tmp_path / name).write_bytes(_cifar_bytes([i, (i + 3) % 10], rng))
    d = load_cifar10(tmp_path, files, records_per_file=2)
    assert len(d) == 10 and d.class_count == 10
    with pytest.raises(DatasetFormatError):
        load_cifar10(tmp_path, files, records_per_file=10000)


# --- image files -----------------------------------------------------------


def test_netpbm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (5, 7, 3)) / 255.0
    write_ppm(tmp_path / "a.ppm", img)
    assert np.array_equal(read_image(tmp_path / "a.ppm"), img)
    gray = rng.integers(0, 256, (4, 3)) / 255.0
    write_pgm(tmp_path / "g.pgm", gray)
    assert np.array_equal(read_image(tmp_path / "g.pgm")[..., 0], gray)


def test_netpbm_header_comments_and_maxval(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# a comment\n2 1\n# another\n15\n\x0f\x00")
    assert read_netpbm(tmp_path / "c.pgm").tolist() == [[255, 0]]
    (tmp_path / "bad.pgm").write_bytes(b"P5\n2 2\n255\n\x00")
    with pytest.raises(FormatError):
        read_netpbm(tmp_path / "bad.pgm")
    (tmp_path / "p3.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(FormatError):
        read_netpbm(tmp_path / "p3.ppm")


def test_float_container_round_trip(tmp_path):
    v = np.random.default_rng(0).normal(size=(4, 6))
    write_float_container(tmp_path / "v.vbdf", v)
    assert np.array_equal(read_float_container(tmp_path / "v.vbdf"), v)
    w = np.random.default_rng(1).normal(size=(3, 2, 3))
    write_float_container(tmp_path / "w.vbdf", w)
    assert np.array_equal(read_float_container(tmp_path / "w.vbdf"), w)
    (tmp_path / "x.vbdf").write_bytes((tmp_path / "w.vbdf").read_bytes()[:-3])
    with pytest.raises(FormatError):
        read_float_container(tmp_path / "x.vbdf")
