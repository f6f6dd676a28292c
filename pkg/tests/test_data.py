from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from advleaf import data, netpbm
from advleaf.errors import ConfigError, DataError, FormatError

FIXTURES = Path(__file__).parent / "fixtures"


def _ppm(path, h=4, w=4, fill=0):
    path.parent.mkdir(parents=True, exist_ok=True)
    netpbm.write_ppm(path, np.full((3, h, w), fill, np.uint8))


def small(counts=(10, 10), size=16, seed=0):
    return data.generate_synthetic(data.SynthConfig(class_count=len(counts), samples_per_class=list(counts),
                                                    image_size=size, seed=seed))


# ---- netpbm


def test_ppm_round_trip():
    img = np.random.default_rng(0).integers(0, 256, (3, 5, 7), dtype=np.uint8)
    assert np.array_equal(netpbm.read_ppm(netpbm.encode_ppm(img)), img)


def test_pgm_round_trip_and_header():
    img = np.arange(12, dtype=np.uint8).reshape(3, 4)
    raw = netpbm.encode_pgm(img)
    assert raw.startswith(b"P5\n4 3\n255\n")
    assert np.array_equal(netpbm.read_pgm(raw), img)


def test_ppm_header_comments_and_maxval():
    raw = b"P6 # comment\n2 1\n# another\n15\n" + bytes([15, 0, 15, 0, 15, 0])
    img = netpbm.read_ppm(raw)
    assert img[:, 0, 0].tolist() == [255, 0, 255] and img[:, 0, 1].tolist() == [0, 255, 0]


@pytest.mark.parametrize("raw, offset", [
    (b"P3\n2 2\n255\n" + bytes(12), "offset 0"),
    (b"P6\n2 x\n255\n" + bytes(12), "offset 5"),
    (b"P6\n2 2\n255\n" + bytes(5), "offset 16"),
])
def test_ppm_malformed_reports_offset(raw, offset):
    with pytest.raises(FormatError, match=offset):
        netpbm.read_ppm(raw)


# ---- folder ingestion


def test_folder_two_classes(tmp_path):
    _ppm(tmp_path / "b" / "x.ppm", fill=1)
    _ppm(tmp_path / "a" / "y.ppm", fill=2)
    ds = data.load_image_folder(tmp_path)
    assert len(ds) == 2 and ds.class_names == ["a", "b"]
    assert sorted(ds.labels.tolist()) == [0, 1]
    assert ds.images[0, 0, 0, 0] == 2


def test_folder_twelve_images_three_classes(tmp_path):
    for cls, n in (("tomato", 5), ("apple", 4), ("corn", 3)):
        for i in range(n):
            _ppm(tmp_path / cls / f"{i:02d}.ppm", fill=i)
    ds = data.load_image_folder(tmp_path)
    assert ds.class_names == ["apple", "corn", "tomato"]
    assert ds.class_counts().tolist() == [4, 3, 5]
    assert ds.ids.tolist() == list(range(12))
    assert ds.labels.tolist() == [0] * 4 + [1] * 3 + [2] * 5


def test_folder_malformed_ppm(tmp_path):
    _ppm(tmp_path / "a" / "ok.ppm")
    (tmp_path / "b").mkdir()
    (tmp_path / "b" / "bad.ppm").write_bytes(b"P6\n4 4\n999\n" + bytes(48))
    with pytest.raises(FormatError, match="bad.ppm"):
        data.load_image_folder(tmp_path)


def test_folder_mixed_shapes_names_offender(tmp_path):
    _ppm(tmp_path / "a" / "1.ppm")
    _ppm(tmp_path / "a" / "2.ppm")
    _ppm(tmp_path / "b" / "odd.ppm", h=5)
    with pytest.raises(DataError, match="odd.ppm"):
        data.load_image_folder(tmp_path)


def test_folder_empty_class_kept_with_warning(tmp_path):
    _ppm(tmp_path / "a" / "1.ppm")
    _ppm(tmp_path / "c" / "1.ppm")
    (tmp_path / "b").mkdir()
    ds = data.load_image_folder(tmp_path)
    assert ds.class_names == ["a", "b", "c"]
    assert ds.class_counts().tolist() == [1, 0, 1]
    assert any("'b'" in w for w in ds.warnings)


def test_folder_needs_two_classes(tmp_path):
    _ppm(tmp_path / "a" / "1.ppm")
    with pytest.raises(DataError):
        data.load_image_folder(tmp_path)


# ---- synthetic generator


def test_synthetic_is_deterministic():
    a, b = small(seed=3), small(seed=3)
    assert a == b and a.images.tobytes() == b.images.tobytes()
    assert small(seed=4).images.tobytes() != a.images.tobytes()


def test_synthetic_imbalance_exact():
    ds = small(counts=(100, 20))
    assert ds.class_counts().tolist() == [100, 20]


def test_synthetic_shape_and_dtype():
    ds = data.generate_synthetic(data.SynthConfig(class_count=3, samples_per_class=2, image_size=24))
    assert ds.images.shape == (6, 3, 24, 24) and ds.images.dtype == np.uint8
    assert len(set(ds.class_names)) == 3


@pytest.mark.parametrize("kw", [{"class_count": 1}, {"image_size": 8}, {"class_count": 3, "samples_per_class": [1, 2]}])
def test_synthetic_config_errors(kw):
    with pytest.raises(ConfigError):
        data.generate_synthetic(data.SynthConfig(**kw))


# ---- splits


def test_split_all_train():
    ds = data.split(small(), (1, 0, 0))
    assert len(ds.split_indices("train")) == 20
    assert len(ds.split_indices("val")) == 0 and len(ds.split_indices("test")) == 0


def test_split_stratified_exact():
    ds = data.split(small(counts=(10, 10, 10)), (0.8, 0.1, 0.1), seed=1)
    for name, want in (("train", 8), ("val", 1), ("test", 1)):
        assert np.bincount(ds.labels[ds.split_indices(name)], minlength=3).tolist() == [want] * 3


def test_split_deterministic():
    a = data.split(small(), seed=5)
    b = data.split(small(), seed=5)
    assert all(np.array_equal(a.splits[k], b.splits[k]) for k in data.SPLIT_NAMES)


def test_split_fraction_error():
    with pytest.raises(ConfigError):
        data.split(small(), (0.5, 0.3, 0.3))


@settings(max_examples=40, deadline=None)
@given(counts=st.lists(st.integers(0, 30), min_size=2, max_size=5),
       f=st.tuples(st.integers(0, 10), st.integers(0, 10), st.integers(1, 10)),
       seed=st.integers(0, 2**31), stratified=st.booleans())
def test_split_disjoint_exhaustive_and_balanced(counts, f, seed, stratified):
    n = sum(counts)
    labels = np.repeat(np.arange(len(counts)), counts)
    ds = data.Dataset(np.zeros((n, 1, 1, 1), np.uint8), labels, np.arange(n), [str(i) for i in range(len(counts))])
    fr = np.array(f, float) / sum(f)
    out = data.split(ds, tuple(fr), seed=seed, stratified=stratified)
    allidx = np.concatenate([out.split_indices(k) for k in data.SPLIT_NAMES])
    assert sorted(allidx.tolist()) == list(range(n))
    if stratified:
        for j, name in enumerate(data.SPLIT_NAMES):
            got = np.bincount(labels[out.split_indices(name)], minlength=len(counts))
            assert np.all(np.abs(got - fr[j] * np.array(counts)) <= 1 + 1e-9)


def test_dataset_rejects_overlapping_splits():
    with pytest.raises(DataError):
        data.Dataset(np.zeros((3, 1, 1, 1), np.uint8), [0, 1, 0], [0, 1, 2], ["a", "b"],
                     {"train": [0, 1], "test": [1]})


def test_dataset_rejects_out_of_range_label():
    with pytest.raises(DataError):
        data.Dataset(np.zeros((2, 1, 1, 1), np.uint8), [0, 2], [0, 1], ["a", "b"])


# ---- batches and normalisation


def test_batch_scaling_endpoints():
    imgs = np.array([[[[0]]], [[[255]]]], np.uint8)
    ds = data.Dataset(imgs, [0, 1], [0, 1], ["a", "b"], {"train": [0, 1]})
    x, _ = next(data.batches(ds, "train", 2))
    assert x.data.dtype == np.float32 and x.data.ravel().tolist() == [0.0, 1.0]


def test_batch_sizes_keep_partial():
    ds = data.split(small(counts=(5, 5)), (1, 0, 0))
    assert [len(y) for _, y in data.batches(ds, "train", 4)] == [4, 4, 2]


def test_batch_shuffle_deterministic():
    ds = data.split(small(counts=(5, 5)), (1, 0, 0))
    order = lambda seed: np.concatenate([i for _, _, i in data.batches(ds, "train", 3, seed, with_indices=True)])
    assert np.array_equal(order(7), order(7))
    assert sorted(order(7).tolist()) == list(range(10))
    assert not np.array_equal(order(7), order(None))


def test_batch_errors():
    ds = data.split(small())
    with pytest.raises(DataError):
        next(data.batches(ds, "holdout", 4))
    with pytest.raises(ConfigError):
        next(data.batches(ds, "train", 0))


@given(st.binary(min_size=1, max_size=64))
def test_normalisation_round_trip(raw):
    b = np.frombuffer(raw, np.uint8)
    assert np.array_equal(data.to_uint8(data.to_float(b)), b)


# ---- packed container


def test_packed_round_trip(tmp_path):
    ds = data.split(small(counts=(6, 3)), seed=2)
    ds.warnings.append("class x has no images")
    path = tmp_path / "d.alds"
    data.save_packed(ds, path)
    back = data.load_packed(path)
    assert back == ds and back.warnings == ds.warnings and back.metadata == ds.metadata
    data.save_packed(back, tmp_path / "e.alds")
    assert (tmp_path / "e.alds").read_bytes() == path.read_bytes()


@pytest.mark.parametrize("cut", [1, 4, 50])
def test_packed_truncated(tmp_path, cut):
    path = tmp_path / "d.alds"
    data.save_packed(small(counts=(2, 2)), path)
    path.write_bytes(path.read_bytes()[:-cut])
    with pytest.raises(FormatError):
        data.load_packed(path)


def test_packed_bad_magic_and_crc(tmp_path):
    raw = bytearray(data.encode_packed(small(counts=(2, 2))))
    with pytest.raises(FormatError, match="magic"):
        data.decode_packed(b"XXXX" + bytes(raw[4:]))
    raw[40] ^= 1
    with pytest.raises(FormatError, match="CRC"):
        data.decode_packed(bytes(raw))


def test_packed_fixture_five_samples():
    # hand-assembled with struct/zlib, independent of the encoder
    ds = data.load_packed(FIXTURES / "five.alds")
    assert ds.ids.tolist() == [10, 11, 12, 20, 21]
    assert ds.labels.tolist() == [0, 0, 1, 1, 1]
    assert ds.class_names == ["healthy", "rust"]
    assert ds.image_shape == (1, 2, 2)
    assert ds.images[3].ravel().tolist() == [30, 31, 32, 255]
    assert ds.split_indices("train").tolist() == [0, 1, 2, 3, 4]
    assert data.decode_packed(data.encode_packed(ds)) == ds
