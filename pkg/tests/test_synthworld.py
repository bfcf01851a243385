import json
import math

import numpy as np
import pytest

from avgaze.audio_features import FilterbankConfig, extract_features, mel_filter_centers
from avgaze.data import fit_label_norm, load_manifest, select_chunks
from avgaze.errors import InvalidInputError, LookupFailure
from avgaze.synthworld import (
    WorldConfig,
    clip_labels,
    formant_frequencies,
    gaze_zone,
    generate_clip,
    generate_world,
    oracle_provider,
    pupil_positions,
)


def r2(y, pred):
    return 1.0 - np.sum((y - pred) ** 2) / np.sum((y - y.mean()) ** 2)


def lstsq_fit(x_tr, y_tr, x_te, ridge=1e-3):
    a = np.hstack([x_tr, np.ones((len(x_tr), 1))])
    w = np.linalg.solve(a.T @ a + ridge * np.eye(a.shape[1]), a.T @ y_tr)
    return np.hstack([x_te, np.ones((len(x_te), 1))]) @ w


def test_clip_determinism():
    cfg = WorldConfig(seed=3, n_clips=4, image_size=16)
    a, b = generate_clip(cfg, 2), generate_clip(cfg, 2)
    assert np.array_equal(a.frames, b.frames)
    assert np.array_equal(a.audio.samples, b.audio.samples)
    assert np.array_equal(a.labels.headpose, b.labels.headpose)
    assert not np.array_equal(a.frames, generate_clip(cfg, 1).frames)
    assert a.clip_id == "clip00002"


def test_world_is_pure_function_of_seed(tmp_path):
    cfg = WorldConfig(seed=5, n_clips=3, frames_per_clip=8, image_size=16)
    m1 = generate_world(cfg, tmp_path / "a")
    m2 = generate_world(cfg, tmp_path / "b")
    assert m1.read_text() == m2.read_text()
    assert (tmp_path / "a" / "audio" / "clip00001.wav").read_bytes() == \
        (tmp_path / "b" / "audio" / "clip00001.wav").read_bytes()
    entries = load_manifest(m1)
    assert [e.split for e in entries] == ["train", "train", "train"]
    assert json.loads((tmp_path / "a" / "world.json").read_text())["seed"] == 5


def test_labels_bounded_and_consistent():
    cfg = WorldConfig(seed=0, frames_per_clip=50)
    for i in range(20):
        lab = clip_labels(cfg, i)
        assert np.all(np.abs(lab.yaw) < 0.9) and np.all(np.abs(lab.pitch) < 0.5)
        np.testing.assert_allclose(np.linalg.norm(lab.gaze, axis=1), 1.0)
        assert set(lab.zones) <= set(range(1, 10))
        assert np.all(lab.headpose[:, 3:] == [0, 0, 1])


def test_zero_walk_constant_pose_all_windows_pass():
    cfg = WorldConfig(seed=1, n_clips=6, frames_per_clip=21, pose_walk_scale=0.0, image_size=16)
    entries = []
    from avgaze.data import ManifestEntry
    for i in range(cfg.n_clips):
        lab = clip_labels(cfg, i)
        hp = lab.headpose
        assert np.allclose(hp, hp[0])
        entries.append(ManifestEntry(f"c{i}", ["x"] * 21, "a", 25.0, np.zeros((21, 2)), pseudo_headpose=hp))
    stats = fit_label_norm(entries)
    assert all(len(select_chunks(e, stats)) == 3 for e in entries)


def test_default_walk_mostly_passes():
    cfg = WorldConfig(seed=2, frames_per_clip=21)
    from avgaze.data import ManifestEntry
    entries = [ManifestEntry(f"c{i}", ["x"] * 21, "a", 25.0, np.zeros((21, 2)),
                             pseudo_headpose=clip_labels(cfg, i).headpose) for i in range(100)]
    stats = fit_label_norm(entries)
    passed = sum(len(select_chunks(e, stats)) for e in entries)
    assert passed / 300 > 0.5


def test_gaze_zone_grid():
    assert gaze_zone(0.0, 0.0) == 5
    assert gaze_zone(0.3, -0.5) == 1
    assert gaze_zone(-0.3, 0.5) == 9


# --- oracle provider ----------------------------------------------------------


def test_oracle_exact_and_unknown():
    cfg = WorldConfig(seed=4, n_clips=3)
    p = oracle_provider(cfg)
    lab = clip_labels(cfg, 1)
    np.testing.assert_array_equal(p.headpose("clip00001", 5), lab.headpose[5])
    np.testing.assert_array_equal(p.gaze("clip00001", 5), lab.gaze[5])
    for bad in (("clip00003", 0), ("clip00001", 21), ("bogus", 0)):
        with pytest.raises(LookupFailure):
            p.headpose(*bad)


def test_oracle_noise_folded_normal():
    cfg = WorldConfig(seed=4, n_clips=500)
    sigma = 0.05
    noisy, exact = oracle_provider(cfg, noise=sigma, noise_seed=9), oracle_provider(cfg)
    diffs = []
    for i in range(500):
        for f in range(4):
            diffs.append(noisy.headpose(f"clip{i:05d}", f) - exact.headpose(f"clip{i:05d}", f))
    diffs = np.abs(np.concatenate(diffs))[:10_000]
    assert diffs.size == 10_000
    expected = sigma * math.sqrt(2 / math.pi)
    assert abs(diffs.mean() - expected) <= 0.1 * expected
    # lookups are a pure function of the key
    assert np.array_equal(noisy.gaze("clip00007", 3), noisy.gaze("clip00007", 3))


# --- identifiability ------------------------------------------------------------


@pytest.fixture(scope="module")
def world_100():
    cfg = WorldConfig(seed=0, n_clips=100, frames_per_clip=21, image_size=16)
    return cfg, [generate_clip(cfg, i) for i in range(cfg.n_clips)]


def test_formant_peak_tracks_yaw(world_100):
    cfg, clips = world_100
    fb = FilterbankConfig()
    centers = mel_filter_centers(fb, cfg.sample_rate)
    f1_lo, f1_hi = formant_frequencies(-1.0, 0)[0], formant_frequencies(1.0, 0)[0]
    band = np.flatnonzero((centers > f1_lo - 100) & (centers < f1_hi + 100))
    peaks, yaws = [], []
    for c in clips:
        feats = extract_features(c.audio, fb)
        for k in range(cfg.frames_per_clip):
            lo, hi = c.audio_offsets[k]
            rows = (feats.frame_times * cfg.sample_rate >= lo) & (feats.frame_times * cfg.sample_rate < hi)
            spec = feats.values[rows][:, band].mean(axis=0)
            peaks.append(centers[band][np.argmax(spec)])
            yaws.append(c.labels.yaw[k])
    r = np.corrcoef(peaks, yaws)[0, 1]
    assert abs(r) > 0.9, r


def test_audio_linear_identifiability(world_100):
    cfg, clips = world_100
    x, y = [], []
    for c in clips:
        feats = extract_features(c.audio, FilterbankConfig())
        for s in range(0, 21, 7):
            lo, hi = c.audio_offsets[s][0], c.audio_offsets[s + 6][1]
            t = feats.frame_times * cfg.sample_rate
            x.append(feats.values[(t >= lo) & (t < hi)].mean(axis=0))
            y.append(c.labels.yaw[s + 3])
    x, y = np.array(x), np.array(y)
    split = np.array([c.split == "test" for c in clips for _ in range(3)])
    pred = lstsq_fit(x[~split], y[~split], x[split])
    assert r2(y[split], pred) > 0.5


def test_pupil_centroid_identifiability(world_100):
    cfg, clips = world_100
    feats, targets = [], []
    for c in clips[:40]:
        for k in range(0, 21, 3):
            blue = c.frames[k, :, :, 2].astype(np.float64) / 255.0
            w = np.clip(blue - 0.2, 0, None)
            yy, xx = np.mgrid[0:cfg.image_size, 0:cfg.image_size]
            feats.append([np.sum(w * xx) / np.sum(w), np.sum(w * yy) / np.sum(w)])
            targets.append([c.labels.eye_yaw[k], c.labels.eye_pitch[k]])
    feats, targets = np.array(feats), np.array(targets)
    pred = lstsq_fit(feats, targets, feats)
    assert r2(targets[:, 0], pred[:, 0]) > 0.9
    assert r2(targets[:, 1], pred[:, 1]) > 0.9


def test_pupil_positions_affine():
    base = pupil_positions(64, 0.0, 0.0)
    moved = pupil_positions(64, 0.1, 0.0)
    assert moved[0][1] - base[0][1] == pytest.approx(0.5 * 64 * math.sin(0.1))
    assert moved[0][0] == base[0][0]


def test_invalid_world_config():
    with pytest.raises(InvalidInputError):
        WorldConfig(n_clips=0)
    with pytest.raises(InvalidInputError):
        WorldConfig(image_size=4)
