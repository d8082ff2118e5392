import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowemg.data import (PAPER_TEST_TRIALS, PAPER_TRAIN_TRIALS, BadMagicError, RecordingSession,
                          SynthConfig, TruncatedPayloadError, VersionMismatchError, WindowDataset,
                          augment_baseline, bandlimited_noise, dataset_load, dataset_save,
                          decode_dataset, drop_rest_and_split, encode_dataset, mixup_pair,
                          read_session_csv, segment_windows, synth_generate, zscore_apply,
                          zscore_fit, zscore_invert)


def session(T, C=2, fs=2000.0, labels=None, trials=None):
    rng = np.random.default_rng(T)
    return RecordingSession("s0", fs, rng.normal(size=(C, T)),
                            np.zeros(T, np.int64) if labels is None else np.asarray(labels),
                            np.ones(T, np.int64) if trials is None else np.asarray(trials))


def small_ds(n=6, C=2, L=8, split="train", seed=0):
    rng = np.random.default_rng(seed)
    return WindowDataset(rng.normal(size=(n, C, L)), np.arange(n) % 3 + 1, np.arange(n) % 2 + 1,
                         "s0", split, 3)


# --- windowing --------------------------------------------------------------


def test_window_length_matches_preprocessing():
    ds = segment_windows(session(2000), 200, 50)
    assert ds.shape[1] == 400


def test_window_count_and_offsets():
    s = session(1000)
    ds = segment_windows(s, 200, 50)
    assert len(ds) == 7
    assert np.array_equal(ds.windows[6], s.signal[:, 600:1000].astype(np.float32))


def test_short_session_gives_empty_dataset():
    assert len(segment_windows(session(399), 200, 50)) == 0


def test_non_integer_samples_rejected():
    with pytest.raises(ValueError):
        segment_windows(session(1000, fs=1000.0), 200.5, 50)


@settings(max_examples=60, deadline=None)
@given(T=st.integers(4, 300), L=st.integers(1, 40), stride=st.integers(1, 30))
def test_window_count_formula(T, L, stride):
    if T < L:
        return
    s = session(T, C=1, fs=1000.0)
    assert len(segment_windows(s, L, stride)) == (T - L) // stride + 1


def test_majority_label_and_earliest_tie():
    labels = [1, 1, 1, 2, 3, 3, 2, 2]  # window of 8: 1 and 2 tie with 3 each -> 1 occurs first
    s = session(8, fs=1000.0, labels=labels)
    ds = segment_windows(s, 8, 8)
    assert ds.labels.tolist() == [1]
    s = session(8, fs=1000.0, labels=[3, 2, 2, 2, 1, 1, 1, 3])
    assert segment_windows(s, 8, 8).labels.tolist() == [2]


# --- splits ----------------------------------------------------------------


def test_paper_split_constants():
    assert PAPER_TRAIN_TRIALS == {1, 3, 4, 6}
    assert PAPER_TEST_TRIALS == {2, 5}


def test_drop_rest_and_split_routes_and_reindexes():
    ds = WindowDataset(np.zeros((6, 1, 4)), [0, 3, 5, 3, 5, 0], [1, 1, 2, 3, 5, 2])
    train, test = drop_rest_and_split(ds)
    assert train.labels.tolist() == [1, 1] and train.trials.tolist() == [1, 3]
    assert test.labels.tolist() == [2, 2]
    assert train.K == test.K == 2
    assert train.split == "train" and test.split == "test"
    assert not set(train.trials) & set(test.trials)


def test_all_rest_gives_empty_splits():
    ds = WindowDataset(np.zeros((3, 1, 4)), [0, 0, 0], [1, 2, 3])
    train, test = drop_rest_and_split(ds)
    assert len(train) == len(test) == 0


def test_overlapping_trial_sets_rejected():
    with pytest.raises(ValueError):
        drop_rest_and_split(small_ds(), {1, 2}, {2, 3})


def test_orphan_trials_dropped_with_warning(caplog):
    ds = WindowDataset(np.zeros((3, 1, 4)), [1, 1, 2], [1, 2, 9])
    with caplog.at_level(logging.WARNING):
        train, test = drop_rest_and_split(ds, {1}, {2})
    assert len(train) + len(test) == 2
    assert "1 windows" in caplog.text


# --- normalization ---------------------------------------------------------------


def test_zscore_fit_apply_on_train():
    ds = small_ds(n=20, L=50)
    ds.windows[:, 0] = ds.windows[:, 0] * 4 + 7
    out = zscore_apply(ds, zscore_fit(ds))
    assert np.all(np.abs(out.windows.mean(axis=(0, 2))) < 1e-5)
    assert np.all(np.abs(out.windows.std(axis=(0, 2)) - 1) < 1e-4)


def test_zscore_hand_values():
    ds = WindowDataset(np.array([[[1.0, 2.0, 3.0]]]), [1], [1])
    out = zscore_apply(ds, zscore_fit(ds))
    assert np.allclose(out.windows[0, 0], [-1.2247449, 0.0, 1.2247449], atol=1e-6)


def test_test_split_uses_train_stats():
    train = small_ds(n=10, L=20)
    test = WindowDataset(train.windows * 3 + 1, train.labels, train.trials, split="test", K=3)
    stats = zscore_fit(train)
    out = zscore_apply(test, stats)
    expect = (test.windows - stats.mean[None, :, None]) / stats.std[None, :, None]
    assert np.allclose(out.windows, expect, atol=1e-5)
    assert abs(out.windows.mean()) > 0.5  # not re-centred with its own stats
    with pytest.raises(ValueError):
        zscore_fit(test)


def test_zero_variance_channel_clamped(caplog):
    ds = small_ds()
    ds.windows[:, 1] = 2.0
    with caplog.at_level(logging.WARNING):
        stats = zscore_fit(ds)
    assert stats.std[1] == 1e-8
    assert "zero variance" in caplog.text
    assert np.all(np.isfinite(zscore_apply(ds, stats).windows))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 1000), scale=st.floats(0.1, 10), shift=st.floats(-10, 10))
def test_zscore_inverse(seed, scale, shift):
    ds = small_ds(seed=seed)
    ds.windows[:] = ds.windows * scale + shift
    stats = zscore_fit(ds)
    back = zscore_invert(zscore_apply(ds, stats), stats)
    assert np.allclose(back.windows, ds.windows, atol=1e-5 * max(1.0, abs(shift) + scale))


def test_empty_fit_rejected():
    with pytest.raises(ValueError):
        zscore_fit(small_ds().subset([]))


# --- synthetic corpus -------------------------------------------------------------


def test_synth_deterministic():
    cfg = SynthConfig(windows_per_class_trial=3)
    a, b = synth_generate(cfg, 4)[0], synth_generate(cfg, 4)[0]
    assert a.signal.tobytes() == b.signal.tobytes()
    assert np.array_equal(a.labels, b.labels) and np.array_equal(a.trials, b.trials)
    c = synth_generate(cfg, 5)[0]
    assert a.signal.tobytes() != c.signal.tobytes()


def test_synth_label_coverage():
    cfg = SynthConfig(K=4, windows_per_class_trial=2, subjects=2)
    sessions = synth_generate(cfg, 0)
    assert len(sessions) == 2
    for s in sessions:
        assert set(np.unique(s.labels)) == {0, 1, 2, 3, 4}
        assert set(np.unique(s.trials)) == set(range(1, 7))


def test_synth_band_energy_oracle():
    # energy is taken relative to each window's total, since classes also differ in channel gain
    cfg = SynthConfig(windows_per_class_trial=5)
    s = synth_generate(cfg, 0)[0]
    ds = segment_windows(s, 200, 50)
    freqs = np.fft.rfftfreq(ds.shape[1], 1 / cfg.sampling_rate)
    power = np.abs(np.fft.rfft(ds.windows, axis=-1)) ** 2
    for k in range(cfg.K):
        lo, hi = cfg.band(k)
        band = (freqs >= lo) & (freqs <= hi)
        energy = power[..., band].sum(axis=(1, 2)) / power.sum(axis=(1, 2))
        own = energy[ds.labels == k + 1].mean()
        others = [energy[ds.labels == j + 1].mean() for j in range(cfg.K) if j != k]
        assert own > max(others), k


def test_bandlimited_noise_stays_in_band():
    rng = np.random.default_rng(0)
    x = bandlimited_noise(rng, 4000, 2000.0, 100, 200)
    spec = np.abs(np.fft.rfft(x)) ** 2
    f = np.fft.rfftfreq(4000, 1 / 2000)
    assert spec[(f < 99) | (f > 201)].sum() < 1e-12 * spec.sum()


def test_synth_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(K=1)
    with pytest.raises(ValueError):
        SynthConfig(band_low=900)


# --- file format ---------------------------------------------------------------------


def test_dataset_round_trip(tmp_path):
    ds = small_ds(split="test")
    dataset_save(ds, tmp_path / "d.emgw")
    back = dataset_load(tmp_path / "d.emgw")
    assert back.windows.tobytes() == ds.windows.tobytes()
    assert np.array_equal(back.labels, ds.labels) and np.array_equal(back.trials, ds.trials)
    assert (back.subject_id, back.split, back.K) == ("s0", "test", 3)


def test_empty_dataset_round_trip(tmp_path):
    ds = small_ds().subset([])
    dataset_save(ds, tmp_path / "e.emgw")
    back = dataset_load(tmp_path / "e.emgw")
    assert len(back) == 0 and back.shape == (2, 8)


def test_dataset_header_layout():
    raw = encode_dataset(small_ds())
    assert raw[:4] == b"EMGW"
    assert np.frombuffer(raw[4:24], "<u4").tolist() == [1, 6, 2, 8, 3]


def test_dataset_format_errors():
    raw = encode_dataset(small_ds())
    with pytest.raises(BadMagicError):
        decode_dataset(b"NOPE" + raw[4:])
    with pytest.raises(VersionMismatchError):
        decode_dataset(raw[:4] + (7).to_bytes(4, "little") + raw[8:])
    with pytest.raises(TruncatedPayloadError, match="truncated payload"):
        decode_dataset(raw[: len(raw) // 2])


# --- augmentation -----------------------------------------------------------------------


def test_replicate_appends_copy():
    ds = small_ds()
    out = augment_baseline(ds, "replicate")
    assert len(out) == 2 * len(ds)
    assert np.array_equal(out.windows[len(ds):], ds.windows)
    assert np.array_equal(out.labels[len(ds):], ds.labels)


def test_jitter_scale_zero_is_identity():
    ds = small_ds()
    out = augment_baseline(ds, "jitter_scale", {"sigma_scale": 0.0, "sigma_jitter": 0.0})
    assert np.array_equal(out.windows[len(ds):], ds.windows)


def test_jitter_scale_statistics():
    ds = WindowDataset(np.ones((400, 1, 50)), np.ones(400), np.ones(400), K=1)
    out = augment_baseline(ds, "jitter_scale", {"sigma_scale": 0.2, "sigma_jitter": 0.0}, seed=1)
    scales = out.windows[400:, 0, 0]
    assert abs(scales.mean() - 1) < 0.05 and abs(scales.std() - 0.2) < 0.03


def test_mixup_endpoint():
    xi, xj = np.ones((2, 3), np.float32), np.zeros((2, 3), np.float32)
    x, y = mixup_pair(xi, xj, 1, 2, 1.0)
    assert np.array_equal(x, xi) and y == 1
    assert mixup_pair(xi, xj, 1, 2, 0.5)[1] == 1
    assert mixup_pair(xi, xj, 1, 2, 0.2)[1] == 2


def test_mixup_errors():
    with pytest.raises(ValueError):
        augment_baseline(small_ds(n=1), "mixup")
    with pytest.raises(ValueError):
        augment_baseline(small_ds(), "mixup", {"alpha": 0.0})
    with pytest.raises(ValueError):
        augment_baseline(small_ds().subset([]), "replicate")


@settings(max_examples=20, deadline=None)
@given(method=st.sampled_from(["replicate", "jitter_scale", "mixup"]), seed=st.integers(0, 99))
def test_augmented_shapes_and_labels(method, seed):
    ds = small_ds(n=5, seed=seed)
    out = augment_baseline(ds, method, seed=seed)
    assert out.windows.shape == (10, 2, 8)
    assert set(out.labels) <= set(ds.labels)
    assert np.all(np.isfinite(out.windows))


# --- CSV import -------------------------------------------------------------------------


def test_read_session_csv(tmp_path):
    path = tmp_path / "s.csv"
    rows = ["t,ch0,ch1,label,trial"]
    for i in range(10):
        rows.append(f"{i / 2000},{i},{-i},{i // 5},{1 + i // 5}")
    path.write_text("\n".join(rows) + "\n")
    s = read_session_csv(path, "subj")
    assert s.sampling_rate == 2000.0
    assert s.signal.shape == (2, 10) and s.signal[1, 3] == -3
    assert s.labels.tolist() == [0] * 5 + [1] * 5
    bad = tmp_path / "bad.csv"
    bad.write_text("time,a,b\n0,1,2\n")
    with pytest.raises(ValueError):
        read_session_csv(bad)
