import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from querywatch.data import (
    Dataset,
    DatasetFormatError,
    QueryStream,
    benign_stream,
    concat,
    gen_npd_pool,
    gen_synthetic_dataset,
    load_raw_tensors,
    make_outlier_dataset,
    save_raw_tensors,
    split_holdout_classes,
    train_test_split,
)
from querywatch.numerics import Rng


@pytest.fixture(scope="module")
def synth():
    return gen_synthetic_dataset(64, 4, 500, 0.005, Rng(0, (1,)))


def test_synthetic_shapes_range_and_determinism(synth):
    assert synth.X.shape == (2000, 64) and synth.k == 4
    assert synth.X.min() >= 0 and synth.X.max() <= 1
    again = gen_synthetic_dataset(64, 4, 500, 0.005, Rng(0, (1,)))
    np.testing.assert_array_equal(synth.X, again.X)


def test_synthetic_classes_are_linearly_separable(synth):
    """Least-squares one-vs-rest linear model, fit on half, scored on the rest."""
    g = np.random.default_rng(0)
    perm = g.permutation(len(synth))
    tr, te = perm[:1000], perm[1000:]
    A = np.hstack([synth.X, np.ones((len(synth), 1))])
    W = np.linalg.lstsq(A[tr], np.eye(4)[synth.y[tr]], rcond=None)[0]
    acc = np.mean((A[te] @ W).argmax(1) == synth.y[te])
    assert acc > 0.9


def test_holdout_split_retains_lowest_classes():
    ds = Dataset(np.full((100, 4), 0.5), np.repeat(np.arange(10), 10), 10)
    b = split_holdout_classes(ds, 0.5, 0.2, Rng(0))
    assert sorted(set(b.train.y) | set(b.test.y)) == [0, 1, 2, 3, 4]
    assert sorted(set(b.held_out.y)) == [5, 6, 7, 8, 9]
    assert b.train.k == 5 and len(b.test) == 10
    b3 = split_holdout_classes(ds, 0.75, 0.2, Rng(0))
    assert sorted(set(b3.train.y)) == [0, 1, 2]
    with pytest.raises(ValueError):
        split_holdout_classes(Dataset(np.zeros((4, 2)), [0, 1, 2, 3], 4), 0.9)


def test_stratified_split_is_disjoint_and_complete(synth):
    tr, te = train_test_split(synth, 0.2, Rng(3))
    assert len(tr) + len(te) == len(synth)
    assert all(np.sum(te.y == c) == 100 for c in range(4))
    rows = {r.tobytes() for r in tr.X}
    assert not any(r.tobytes() in rows for r in te.X)


def test_outliers_follow_noise_mixing_rule(synth):
    out = make_outlier_dataset(synth, Rng(5))
    assert out.X.shape == synth.X.shape
    clipped = np.mean((out.X == 0.0) | (out.X == 1.0))
    assert clipped > 0
    # nu = 1 reproduces the confidential data; nu = 0 is pure N(0, 1) noise, clamped
    np.testing.assert_array_equal(make_outlier_dataset(synth, Rng(5), mix=1.0).X, synth.X)
    pure = make_outlier_dataset(synth, Rng(5), mix=0.0).X
    assert abs(np.mean(pure == 0.0) - 0.5) < 0.02
    with pytest.raises(ValueError):
        make_outlier_dataset(Dataset(np.empty((0, 3)), np.empty(0, int), 2), Rng(0))


def test_heldout_classes_share_the_signal_domain(synth):
    """Class means differ by far less than the distance to uniform noise."""
    means = np.array([synth.X[synth.y == c].mean(0) for c in range(4)])
    spread_between = np.linalg.norm(means[:, None] - means[None], axis=2).max()
    assert spread_between < 0.5 * np.linalg.norm(means[0] - 0.5)


def test_benign_stream_and_tags(synth):
    s = benign_stream("AltPD", synth, 50, Rng(1))
    assert len(s) == 50 and s.provenance == "AltPD"
    with pytest.raises(ValueError):
        benign_stream("Syn", synth, 5, Rng(1))
    with pytest.raises(ValueError):
        QueryStream(np.zeros((3, 2)), ["PD"])
    mix = QueryStream(np.zeros((2, 2)), ["PD", "Syn"])
    assert mix.provenance == "mixed" and len(mix.head(1)) == 1


def test_npd_pool_in_range_and_deterministic():
    a = gen_npd_pool(32, 200, Rng(9))
    b = gen_npd_pool(32, 200, Rng(9))
    np.testing.assert_array_equal(a.X, b.X)
    assert a.X.min() >= 0 and a.X.max() <= 1


@pytest.mark.parametrize("dtype", ["f32", "u8"])
def test_raw_tensor_round_trip(tmp_path, synth, dtype):
    sub = synth.subset(np.arange(0, 2000, 97))
    save_raw_tensors(sub, tmp_path / "t", dtype)
    back = load_raw_tensors(tmp_path / "t" / "manifest.json")
    tol = 1e-7 if dtype == "f32" else 0.5 / 255 + 1e-12
    np.testing.assert_allclose(back.X, sub.X, atol=tol)
    np.testing.assert_array_equal(back.y, sub.y)


def test_raw_tensor_errors(tmp_path, synth):
    p = save_raw_tensors(synth.subset([0, 1, 2]), tmp_path / "t")
    (p / "x.bin").write_bytes((p / "x.bin").read_bytes()[:-4])
    with pytest.raises(DatasetFormatError, match="x.bin"):
        load_raw_tensors(p)
    p2 = save_raw_tensors(synth.subset([0, 1]), tmp_path / "u")
    (p2 / "y.bin").write_bytes(np.array([0, 7], "<u2").tobytes())
    with pytest.raises(DatasetFormatError, match="byte offset 2"):
        load_raw_tensors(p2)
    m = json.loads((p2 / "manifest.json").read_text())
    m["version"] = 3
    (p2 / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(DatasetFormatError, match="version"):
        load_raw_tensors(p2)
    with pytest.raises(DatasetFormatError):
        load_raw_tensors(tmp_path / "nowhere")


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.full((2, 2), 1.5), [0, 0], 1)
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), [0, 2], 2)
    assert len(concat([Dataset(np.zeros((1, 2)), [0], 1), Dataset(np.zeros((2, 2)), [1, 0], 2)])) == 3


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 12), st.floats(0.05, 0.95))
def test_split_keeps_ceil_of_retained_fraction(k, fraction):
    import math

    n_keep = math.ceil(k * (1 - fraction) - 1e-9)
    ds = Dataset(np.full((k * 5, 2), 0.5), np.repeat(np.arange(k), 5), k)
    if n_keep < 2:
        with pytest.raises(ValueError):
            split_holdout_classes(ds, fraction)
        return
    b = split_holdout_classes(ds, fraction)
    assert set(b.train.y) == set(range(n_keep))
    assert set(b.held_out.y) == set(range(n_keep, k))
