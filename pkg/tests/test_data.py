import hashlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from caprmil.data import (BagFolder, BagRecord, ManifestEntry, SyntheticBags, SyntheticSpec, Subset,
                          bag_file_size, benchmark_splits, decode_bag, encode_bag, format_manifest,
                          kfold_manifests, load_manifest, morphology_means, open_split, parse_manifest,
                          preset, read_bag, split_indices, summarize, write_bag, write_dataset)
from caprmil.errors import ConfigError, CorruptionError, DataError, FormatError


def small_bag(n=5, d=3, coords=True, seed=0):
    rng = np.random.default_rng(seed)
    c = rng.integers(0, 50, (n, 2)).astype(np.uint32) if coords else None
    return BagRecord("b", rng.standard_normal((n, d)).astype(np.float32), 1, c)


# -- bag files ---------------------------------------------------------------------

@pytest.mark.parametrize("coords", [True, False])
def test_round_trip_bit_exact(tmp_path, coords):
    bag = small_bag(coords=coords)
    write_bag(bag, tmp_path / "x.bag")
    back = read_bag(tmp_path / "x.bag", label=1)
    assert back.features.tobytes() == bag.features.tobytes()
    if coords:
        np.testing.assert_array_equal(back.coords, bag.coords)
    else:
        assert back.coords is None
    assert back.id == "x"


def test_file_size_formula(tmp_path):
    for coords in (True, False):
        bag = BagRecord("b", np.zeros((1000, 1024), np.float32), 0,
                        np.zeros((1000, 2), np.uint32) if coords else None)
        write_bag(bag, tmp_path / "b.bag")
        size = (tmp_path / "b.bag").stat().st_size
        assert size == bag_file_size(1000, 1024, coords) == 20 + 1000 * 1024 * 4 + (8000 if coords else 0)


def test_empty_bag_rejected():
    with pytest.raises(DataError):
        BagRecord("e", np.zeros((0, 4), np.float32), 0)
    buf = bytearray(encode_bag(small_bag()))
    buf[8:12] = (0).to_bytes(4, "little")
    with pytest.raises(FormatError):
        decode_bag(bytes(buf))


def test_reader_errors():
    buf = encode_bag(small_bag())
    with pytest.raises(FormatError, match="magic"):
        decode_bag(b"NOPE" + buf[4:])
    with pytest.raises(CorruptionError) as info:
        decode_bag(buf[:-3])
    assert info.value.offset == len(buf) - 3
    bad = bytearray(buf)
    bad[20:24] = np.array([np.nan], "<f4").tobytes()
    with pytest.raises(DataError, match="non-finite"):
        decode_bag(bytes(bad))


@given(pos=st.integers(0, 19), value=st.integers(0, 255), extra=st.binary(max_size=8))
@settings(max_examples=300)
def test_header_fuzz_gives_typed_errors(pos, value, extra):
    buf = bytearray(encode_bag(small_bag()))
    buf[pos] = value
    try:
        decode_bag(bytes(buf) + extra)
    except DataError:
        pass


@given(data=st.binary(max_size=64))
@settings(max_examples=200)
def test_random_bytes_never_crash(data):
    try:
        decode_bag(data)
    except DataError:
        pass


# -- manifests ------------------------------------------------------------------------

def test_manifest_parsing():
    entries = parse_manifest("# header\na.bag,0,train\n\nb.bag,1,test  # trailing\n")
    assert [(e.path, e.label, e.split) for e in entries] == [("a.bag", 0, "train"), ("b.bag", 1, "test")]
    with pytest.raises(ConfigError):
        parse_manifest("a.bag,0,holdout\n")
    with pytest.raises(DataError):
        parse_manifest("x/a.bag,0,train\ny/a.bag,1,test\n")
    with pytest.raises(DataError):
        parse_manifest("a.bag,0,train\nb.bag,2,test\n")
    with pytest.raises(DataError):
        parse_manifest("a.bag,zero,train\n")
    assert parse_manifest(format_manifest(entries)) == entries


@given(n=st.integers(6, 60), k=st.integers(3, 10), seed=st.integers(0, 1000))
@settings(max_examples=50)
def test_kfold_manifests_cover_every_bag(n, k, seed):
    entries = [ManifestEntry(f"b{i}.bag", i % 2, "train") for i in range(n)]
    folds = kfold_manifests(entries, k, seed)
    assert len(folds) == k
    test_count = np.zeros(n, int)
    for fold in folds:
        assert [e.path for e in fold] == [e.path for e in entries]
        assert {e.split for e in fold} <= {"train", "val", "test"}
        test_count += [e.split == "test" for e in fold]
    np.testing.assert_array_equal(test_count, 1)


def test_bag_folder_and_open_split(tmp_path):
    spec = preset("easy", n_bags=3, bag_size=(5, 9), d_in=8)
    bags = SyntheticBags(spec)
    splits = split_indices(6, 2, 2, bags.labels, 0)
    write_dataset(bags, tmp_path, splits)
    entries = load_manifest(tmp_path / "manifest.csv")
    assert len(entries) == 6
    test = open_split(tmp_path, "test")
    assert isinstance(test, BagFolder) and len(test) == 2
    assert sorted(test.labels.tolist()) == [0, 1]
    np.testing.assert_array_equal(test[0].features, bags[int(splits["test"][0])].features)
    with pytest.raises(ConfigError):
        open_split(tmp_path, "holdout")


# -- synthetic generator --------------------------------------------------------------------

def test_spec_validation():
    for bad in (dict(witness_rate=0.0), dict(witness_rate=1.5), dict(n_morphologies=1), dict(noise=0.0),
                dict(bag_size=(5, 2)), dict(composition_alpha=0)):
        with pytest.raises(ConfigError):
            SyntheticSpec(**bad)
    with pytest.raises(ConfigError):
        preset("medium")


def test_presets():
    hard, easy = preset("hard"), preset("easy")
    assert (hard.witness_rate, hard.bag_size, hard.n_morphologies, hard.d_in) == (0.02, (2000, 6000), 8, 1024)
    assert (easy.witness_rate, easy.bag_size) == (0.5, (300, 700))
    assert hard.separation == 4.0 and hard.noise == 1.0
    sizes = SyntheticBags(hard).sizes
    assert sizes.min() >= 2000 and sizes.max() <= 6000


def test_generation_is_deterministic():
    spec = SyntheticSpec(n_bags=2, bag_size=(10, 20), d_in=16, seed=4)
    a, b = SyntheticBags(spec), SyntheticBags(spec)
    for i in range(4):
        assert hashlib.sha256(encode_bag(a[i])).digest() == hashlib.sha256(encode_bag(b[i])).digest()
    assert not np.array_equal(a[0].features, SyntheticBags(spec.replace(seed=5))[0].features[: a[0].n])


def test_morphology_geometry():
    spec = SyntheticSpec(d_in=64, separation=4.0)
    means, signal = morphology_means(spec)
    np.testing.assert_allclose(np.linalg.norm(means, axis=1), 1.0)
    assert abs(np.linalg.norm(signal - means[0]) - 4.0) < 1e-9


def test_fisher_separable_when_every_patch_is_witness():
    spec = SyntheticSpec(n_bags=20, bag_size=(30, 60), d_in=32, witness_rate=1.0, separation=10.0, seed=1)
    bags = SyntheticBags(spec)
    x = np.array([b.features.mean(axis=0) for b in bags], dtype=np.float64)
    y = bags.labels
    m0, m1 = x[y == 0].mean(0), x[y == 1].mean(0)
    sw = np.cov(x[y == 0].T) + np.cov(x[y == 1].T) + 1e-6 * np.eye(x.shape[1])
    w = np.linalg.solve(sw, m1 - m0)
    p0, p1 = x[y == 0] @ w, x[y == 1] @ w
    fisher = (p1.mean() - p0.mean()) ** 2 / (p0.var() + p1.var())
    assert fisher > 100
    assert p0.max() < p1.min()


def test_witness_rate_contract():
    spec = SyntheticSpec(n_bags=6, bag_size=(2000, 6000), d_in=8, witness_rate=0.01, seed=3)
    bags = SyntheticBags(spec)
    pos = [bags[i] for i in range(len(bags)) if bags.labels[i] == 1]
    total = sum(b.n for b in pos)
    hits = sum(int(b.witness.sum()) for b in pos)
    sd = np.sqrt(total * 0.01 * 0.99)
    assert abs(hits - 0.01 * total) <= 3 * sd
    for b in pos:
        assert abs(b.witness.mean() - 0.01) <= 3 * np.sqrt(0.01 * 0.99 / b.n)
    assert all(not bags[i].witness.any() for i in range(len(bags)) if bags.labels[i] == 0)
    assert abs(summarize(bags)["witness_rate"] - 0.01) < 0.005


def test_bag_sizes_carry_no_label_information():
    spec = preset("hard", n_bags=150, d_in=8)
    bags = SyntheticBags(spec)
    same_stream = SyntheticBags(spec.replace(witness_rate=0.3, separation=1.0)).sizes
    np.testing.assert_array_equal(bags.sizes, same_stream)
    assert stats.ks_2samp(bags.sizes[bags.labels == 0], bags.sizes[bags.labels == 1]).pvalue > 0.01


def test_synthetic_coords_form_raster():
    b = SyntheticBags(preset("easy", n_bags=1, d_in=8))[1]
    side = int(np.ceil(np.sqrt(b.n)))
    assert b.coords.shape == (b.n, 2)
    assert len({tuple(c) for c in b.coords}) == b.n
    assert b.coords.max() < side


def test_benchmark_splits_are_balanced():
    s = benchmark_splits("easy", 0, n_train=20, n_val=4, n_test=6, d_in=8, bag_size=(5, 10))
    assert {k: len(v) for k, v in s.items()} == {"train": 20, "val": 4, "test": 6}
    for part in s.values():
        assert part.labels.sum() * 2 == len(part)
        assert isinstance(part, Subset)
    ids = [s[k][i].id for k in s for i in range(len(s[k]))]
    assert len(set(ids)) == 30
    with pytest.raises(ConfigError):
        benchmark_splits("easy", 0, n_train=3, n_val=0, n_test=0)
