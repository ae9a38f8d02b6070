import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dplatent.data import CIFAR10_CLASSES, PRESETS, LabeledDataset
from dplatent.errors import EmptyResultError, InvalidArgument
from dplatent.partition import partition_dataset, read_split, split_test_private, write_split

from conftest import blank_dataset


def cifar_like(n_per_class=5000):
    labels = np.repeat(np.arange(10), n_per_class)
    return LabeledDataset(np.zeros((len(labels), 1, 1, 1), np.float32), labels, "cifar-like", 10,
                          CIFAR10_CLASSES)


def test_cifar_preset_classes():
    preset = PRESETS["cifar10"]
    names = {CIFAR10_CLASSES[i] for i in preset.public}
    assert names == {"automobile", "bird", "cat", "deer", "dog"}
    assert {CIFAR10_CLASSES[i] for i in preset.private} == {"frog", "horse", "ship", "truck", "airplane"}
    split = partition_dataset(cifar_like(50), preset.public, seed=1)
    assert set(split.d_p.labels) <= set(preset.public)
    assert set(split.d_s.labels) <= set(preset.private)


def test_svhn_preset_digits():
    preset = PRESETS["svhn"]
    assert set(preset.public) == {1, 5, 7, 8, 9}
    assert set(preset.private) == {0, 2, 3, 4, 6}


def test_fifty_thousand_counts():
    split = partition_dataset(cifar_like(), PRESETS["cifar10"].public, seed=0)
    assert len(split.d_l) == 16_667
    assert len(split.d_p) + len(split.d_s) == 33_333


def test_partition_is_a_partition(toy_source):
    train, _ = toy_source
    split = partition_dataset(train, {0, 2, 4}, seed=3)
    idx = split.index_lists()
    sets = [set(idx[k]) for k in ("d_l", "d_p", "d_s")]
    assert all(a.isdisjoint(b) for a in sets for b in sets if a is not b)
    assert set().union(*sets) == set(range(len(train)))
    assert split.public_classes.isdisjoint(split.private_classes)


@pytest.mark.parametrize("public", [set(), set(range(6))])
def test_degenerate_public_sets_rejected(toy_source, public):
    with pytest.raises(InvalidArgument):
        partition_dataset(toy_source[0], public)


@pytest.mark.parametrize("fraction", [0.0, 1.0, -0.1, 1.5])
def test_fraction_out_of_range(toy_source, fraction):
    with pytest.raises(InvalidArgument):
        partition_dataset(toy_source[0], {0}, label_fraction=fraction)


def test_unknown_class_rejected(toy_source):
    with pytest.raises(InvalidArgument):
        partition_dataset(toy_source[0], {0, 17})


def test_deterministic_manifest(toy_source):
    a = partition_dataset(toy_source[0], {0, 2, 4}, seed=9).manifest()
    b = partition_dataset(toy_source[0], {0, 2, 4}, seed=9).manifest()
    c = partition_dataset(toy_source[0], {0, 2, 4}, seed=10).manifest()
    assert a == b
    assert a["checksums"]["d_l"] != c["checksums"]["d_l"]


def test_stratified_draw_balances_classes():
    ds = blank_dataset(np.repeat(np.arange(4), 300), 4)
    split = partition_dataset(ds, {0, 1}, label_fraction=0.25, seed=0, stratified=True)
    counts = np.bincount(split.d_l.labels, minlength=4)
    assert counts.tolist() == [75, 75, 75, 75]


def test_split_roundtrip(tmp_path, toy_source):
    train, _ = toy_source
    split = partition_dataset(train, {0, 2, 4}, seed=0)
    write_split(split, tmp_path)
    for name in ("d_l", "d_p", "d_s"):
        lines = (tmp_path / f"{name}.idx").read_text().split()
        values = [int(v) for v in lines]
        assert values == sorted(values)
    back = read_split(tmp_path, train)
    assert back.manifest() == split.manifest()


def test_split_test_private_counts():
    test = cifar_like(1000)
    private = PRESETS["cifar10"].private
    out = split_test_private(test, private)
    assert len(out) == 5000
    assert np.all(np.diff(out.indices) > 0)  # order preserving
    assert len(split_test_private(test, set(range(10)))) == 10_000


def test_split_test_private_empty():
    test = blank_dataset([0, 1, 1, 0], 4)
    with pytest.raises(EmptyResultError):
        split_test_private(test, {2, 3})


@settings(max_examples=40, deadline=None)
@given(n=st.integers(3, 400), k=st.integers(2, 6), fraction=st.floats(0.01, 0.99), seed=st.integers(0, 2**31))
def test_partition_properties(n, k, fraction, seed):
    labels = np.random.default_rng(seed).integers(0, k, size=n)
    ds = blank_dataset(labels, k)
    public = set(range(k // 2 or 1))
    split = partition_dataset(ds, public, label_fraction=fraction, seed=seed)
    assert abs(len(split.d_l) / n - fraction) <= 1 / n
    assert set(split.d_p.labels.tolist()) <= public
    assert not set(split.d_s.labels.tolist()) & public
    assert len(split.d_l) + len(split.d_p) + len(split.d_s) == n
