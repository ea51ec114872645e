import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from tsadnas.dataset import (
    SynthSpec,
    TimeSeriesDataset,
    add_rolling_features,
    augment,
    load_csv,
    make_windows,
    normalize,
    save_csv,
    synth_generate,
    windows,
)
from tsadnas.errors import ContractError, ParseError


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


# ------------------------------------------------------------------ csv


def test_load_three_by_two(tmp_path):
    tr = write(tmp_path / "tr.csv", "0,1\n1,2\n2,3\n")
    te = write(tmp_path / "te.csv", "0,1\n5,5\n")
    lb = write(tmp_path / "lb.csv", "0\n1\n")
    ds = load_csv(tr, te, lb)
    assert ds.train.shape == (3, 2) and ds.n_features == 2
    assert ds.test_labels.tolist() == [0, 1]


def test_header_is_auto_detected(tmp_path):
    tr = write(tmp_path / "tr.csv", "a,b\n0,1\n1,2\n")
    te = write(tmp_path / "te.csv", "a,b\n0,1\n")
    lb = write(tmp_path / "lb.csv", "0\n")
    ds = load_csv(tr, te, lb)
    assert ds.names == ("a", "b") and ds.train.shape == (2, 2)


def test_label_length_mismatch_names_both_lengths(tmp_path):
    tr = write(tmp_path / "tr.csv", "0,1\n1,2\n")
    te = write(tmp_path / "te.csv", "0,1\n1,2\n3,4\n")
    lb = write(tmp_path / "lb.csv", "0\n1\n")
    with pytest.raises(ParseError, match="2.*3"):
        load_csv(tr, te, lb)


def test_ragged_row_reports_row_number(tmp_path):
    tr = write(tmp_path / "tr.csv", "0,1\n1,2\n3\n")
    te = write(tmp_path / "te.csv", "0,1\n")
    lb = write(tmp_path / "lb.csv", "0\n")
    with pytest.raises(ParseError) as err:
        load_csv(tr, te, lb)
    assert err.value.row == 3


def test_non_numeric_cell_reports_row_number(tmp_path):
    tr = write(tmp_path / "tr.csv", "0,1\n1,x\n")
    te = write(tmp_path / "te.csv", "0,1\n")
    lb = write(tmp_path / "lb.csv", "0\n")
    with pytest.raises(ParseError, match="tr.csv:2"):
        load_csv(tr, te, lb)


def test_per_dimension_labels_reduce_by_or(tmp_path):
    tr = write(tmp_path / "tr.csv", "0,1\n1,2\n")
    te = write(tmp_path / "te.csv", "0,1\n1,2\n3,4\n")
    lb = write(tmp_path / "lb.csv", "0,0\n1,0\n0,1\n")
    ds = load_csv(tr, te, lb)
    assert ds.test_labels.tolist() == [0, 1, 1]
    assert ds.label_dims.shape == (3, 2)


def test_missing_file_is_parse_error(tmp_path):
    with pytest.raises(ParseError, match="not found"):
        load_csv(tmp_path / "a.csv", tmp_path / "b.csv", tmp_path / "c.csv")


def test_save_load_round_trip_is_bit_identical(tmp_path):
    ds = synth_generate(SynthSpec(T=300, T_test=200, m=3, seed=4))
    paths = save_csv(ds, tmp_path)
    back = load_csv(paths["train"], paths["test"], paths["labels"])
    assert np.array_equal(back.train, ds.train)
    assert np.array_equal(back.test, ds.test)
    assert np.array_equal(back.test_labels, ds.test_labels)


# ------------------------------------------------------------ normalize


def make_ds(train, test=None):
    train = np.asarray(train, dtype=np.float64)
    test = train.copy() if test is None else np.asarray(test, dtype=np.float64)
    return TimeSeriesDataset(train, test, np.zeros(len(test), dtype=np.int64))


def test_constant_column_normalizes_to_zero():
    out = normalize(make_ds([[5.0], [5.0], [5.0]]), eps=1e-8)
    assert np.array_equal(out.train, np.zeros((3, 1)))


def test_two_point_column():
    out = normalize(make_ds([[0.0], [10.0]]), eps=1e-8)
    assert out.train[0, 0] == 0.0
    assert out.train[1, 0] == pytest.approx(10 / (10 + 1e-8), abs=1e-15)


def test_test_split_reuses_train_statistics():
    out = normalize(make_ds([[0.0], [10.0]], [[20.0], [-10.0]]), eps=1e-8)
    assert out.test[:, 0] == pytest.approx([20 / (10 + 1e-8), -10 / (10 + 1e-8)])


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(2, 30), st.integers(1, 4)),
                  elements=st.floats(-1e6, 1e6)))
def test_normalized_train_lies_in_unit_interval(x):
    out = normalize(make_ds(x))
    assert np.all(out.train >= 0) and np.all(out.train < 1)
    assert np.all(np.isfinite(out.test))


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(2, 30), st.integers(1, 4)),
                  elements=st.floats(-1e3, 1e3)))
def test_normalize_is_idempotent_up_to_eps(x):
    eps = 1e-8
    once = normalize(make_ds(x), eps)
    twice = normalize(once, eps)
    assert np.all(np.abs(twice.train - once.train) < 10 * eps)


def test_normalize_rejects_bad_eps():
    with pytest.raises(ContractError):
        normalize(make_ds([[1.0], [2.0]]), eps=0.0)


# -------------------------------------------------------------- windows


def test_padding_rule():
    s = np.array([[1.0], [2.0], [3.0], [4.0]])  # a, b, c, d
    W = windows(s, 3)[..., 0]
    assert W.tolist() == [[1, 1, 1], [1, 1, 2], [1, 2, 3], [2, 3, 4]]


def test_window_of_one_is_the_point():
    s = np.arange(6.0).reshape(3, 2)
    assert np.array_equal(windows(s, 1)[:, 0, :], s)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_window_structure(T, m, seed):
    s = np.random.default_rng(seed).normal(size=(T, m))
    K = min(T, 1 + seed % 12)
    W = windows(s, K)
    assert W.shape == (T, K, m)
    assert np.array_equal(W[:, -1, :], s)  # last row of window t is x_t
    assert np.array_equal(W[-1, -1], s[-1])


def test_window_larger_than_series_is_error():
    with pytest.raises(ContractError):
        windows(np.zeros((3, 1)), 4)


def test_window_outside_search_range_warns():
    ds = make_ds(np.zeros((12, 1)))
    with pytest.warns(UserWarning):
        make_windows(ds, 3)


# -------------------------------------------------------------- augment


def flags(noise=0.0, warp=False, mask=False):
    return SimpleNamespace(gaussian_noise=noise, time_warping=warp, time_masking=mask)


def test_all_flags_off_is_identity():
    x = np.random.default_rng(0).normal(size=(4, 10, 2))
    assert np.array_equal(augment(x, flags(), np.random.default_rng(1)), x)


def test_masking_zeroes_one_span_of_ceil_tenth():
    x = np.ones((6, 10, 2))
    out = augment(x, flags(mask=True), np.random.default_rng(2))
    for b in range(6):
        zero_rows = np.flatnonzero((out[b] == 0).all(axis=1))
        assert len(zero_rows) == math.ceil(0.1 * 10) == 1


def test_masking_span_for_k_25_is_contiguous_three():
    out = augment(np.ones((5, 25, 1)), flags(mask=True), np.random.default_rng(3))
    for b in range(5):
        rows = np.flatnonzero(out[b, :, 0] == 0)
        assert len(rows) == 3 and np.all(np.diff(rows) == 1)


def test_same_seed_same_augmented_batch():
    x = np.random.default_rng(0).normal(size=(4, 12, 3))
    f = flags(noise=0.01, warp=True, mask=True)
    assert np.array_equal(augment(x, f, np.random.default_rng(5)), augment(x, f, np.random.default_rng(5)))


def test_warp_keeps_shape_and_endpoints():
    x = np.random.default_rng(0).normal(size=(3, 15, 2))
    out = augment(x, flags(warp=True), np.random.default_rng(6))
    assert out.shape == x.shape
    assert np.allclose(out[:, 0], x[:, 0]) and np.allclose(out[:, -1], x[:, -1])


# ------------------------------------------------------------ synthetic


def test_rate_zero_is_contract_error():
    with pytest.raises(ContractError):
        synth_generate(SynthSpec(rate=0.0))


def test_rate_half_is_contract_error():
    with pytest.raises(ContractError):
        synth_generate(SynthSpec(rate=0.5))


def test_fixed_seed_is_deterministic():
    a = synth_generate(SynthSpec(T=200, T_test=200, seed=3))
    b = synth_generate(SynthSpec(T=200, T_test=200, seed=3))
    assert np.array_equal(a.train, b.train) and np.array_equal(a.test, b.test)
    assert np.array_equal(a.test_labels, b.test_labels)


def test_spike_rate_within_band():
    ds = synth_generate(SynthSpec(T=500, T_test=2000, anomaly_types=("spike",), rate=0.05, seed=1))
    assert 0.04 <= ds.anomaly_fraction <= 0.06


@pytest.mark.parametrize("types", [("spike", "level_shift"), ("flatline",), ("frequency_shift",),
                                   ("spike", "level_shift", "flatline", "frequency_shift")])
def test_every_type_hits_rate_within_twenty_percent(types):
    ds = synth_generate(SynthSpec(T=500, T_test=2000, anomaly_types=types, rate=0.08, seed=2))
    assert abs(ds.anomaly_fraction - 0.08) <= 0.2 * 0.08


def test_unknown_anomaly_type_rejected():
    with pytest.raises(ContractError):
        synth_generate(SynthSpec(anomaly_types=("drift",)))


def test_rolling_features_append_two_channels_per_dimension():
    ds = normalize(synth_generate(SynthSpec(T=100, T_test=80, m=2, seed=0)))
    out = add_rolling_features(ds, 5)
    assert out.n_features == 6
    assert np.array_equal(out.train[:, :2], ds.train)
    assert len(out.names) == 6
