"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The lines are collected on the pytest config object and echoed in the
terminal summary (see conftest.py), so they show up under ``pytest -v``.
"""

import json
import math
import time
from contextlib import contextmanager

import numpy as np
import pytest
import torch

from avgaze.audio_features import AudioClip, apply_norm, extract_features, fit_norm_stats
from avgaze.cli import main as cli_main
from avgaze.data import select_chunks
from avgaze.evaluation import extract_embeddings, gaze_metrics, linear_probe, weighted_knn
from avgaze.geometry import gaze_loss, head_direction, headpose_loss, vector_to_pitchyaw
from avgaze.model import AV, ModalityMask, ModelConfig, backbone_hash, build_model, predict
from avgaze.synthworld import WorldConfig, generate_world
from avgaze.training import TrainConfig, TrainLog, train

import oracles
from test_data import UNIT, entry, hand_trajectory
from test_model import gradient_check

AUDIO_ONLY = ModalityMask(use_visual=False, use_audio=True)
VISUAL_ONLY = ModalityMask(use_visual=True, use_audio=False)


@pytest.fixture
def criterion(request):
    results = request.config.__dict__.setdefault("avgaze_acceptance", [])

    @contextmanager
    def run(n, title):
        t0 = time.perf_counter()
        detail = {}
        try:
            yield detail
        except BaseException as exc:
            line = f"criterion {n:>2} FAIL  {title}  ({time.perf_counter() - t0:.1f} s) {exc!s:.200}"
            results.append(line)
            print(line)
            raise
        extra = " ".join(f"{k}={v}" for k, v in detail.items())
        line = f"criterion {n:>2} PASS  {title}  ({time.perf_counter() - t0:.1f} s) {extra}".rstrip()
        results.append(line)
        print(line)

    return run


# 1 -------------------------------------------------------------------------------


def test_c01_filterbank_oracle(criterion):
    with criterion(1, "filterbank vs naive-DFT oracle") as d:
        rng = np.random.default_rng(2024)
        t0 = time.perf_counter()
        worst = 0.0
        for _ in range(50):
            x = rng.normal(scale=rng.uniform(0.01, 1.0), size=8000)
            got = np.exp(extract_features(AudioClip(x, 16000)).values)
            ref = np.exp(oracles.log_fbank(x))
            worst = max(worst, float(np.max(np.abs(got - ref) / ref)))
        elapsed = time.perf_counter() - t0
        d["max_rel_err"] = f"{worst:.2e}"
        assert worst < 1e-6
        assert elapsed < 30.0


# 2 -------------------------------------------------------------------------------


def test_c02_normalization_contract(criterion):
    with criterion(2, "normalization contract on 1000 frames") as d:
        rng = np.random.default_rng(5)
        feats = [extract_features(AudioClip(rng.normal(scale=s, size=8080), 16000))
                 for s in (0.1, 0.5, 1.0, 2.0, 0.05, 0.3, 0.7, 1.5, 0.2, 0.9)]
        assert sum(f.n_frames for f in feats) == 1000
        stats = fit_norm_stats(feats)
        z = np.concatenate([apply_norm(f, stats).values for f in feats])
        d["max_abs_mean"] = f"{np.max(np.abs(z.mean(axis=0))):.1e}"
        d["max_var_dev"] = f"{np.max(np.abs(z.var(axis=0) - 1)):.1e}"
        assert np.max(np.abs(z.mean(axis=0))) < 1e-6
        assert np.max(np.abs(z.var(axis=0) - 1)) < 1e-5


# 3 -------------------------------------------------------------------------------


def test_c03_loss_identities(criterion, small_data, tmp_path):
    with criterion(3, "loss identities and per-step additivity") as d:
        g = np.array([0.3, -0.2, -0.9])
        perp = np.cross(g, [1.0, 0.0, 0.0])
        assert gaze_loss(g, 2.5 * g) == pytest.approx(0.0, abs=1e-12)
        assert gaze_loss(g, perp) == pytest.approx(1.0, abs=1e-12)
        assert gaze_loss(g, -g) == pytest.approx(2.0, abs=1e-12)
        h = np.array([0.1, -0.2, 0.3, 0.0, 0.5, 1.2])
        assert headpose_loss(h, h) == 0.0
        assert headpose_loss(h, h + np.eye(6)[2] * 1e-3) > 0.0

        from conftest import small_model_cfg
        cfg = TrainConfig(epochs=2, batch_size=4, loss_weights=(0.6, 1.7), learning_rate=1e-3)
        train(None, cfg, small_model_cfg(), out_dir=tmp_path, data=small_data)
        steps = TrainLog.read(tmp_path / "train_log.jsonl").steps
        worst = max(abs(s["l_total"] - (0.6 * s["l_hp"] + 1.7 * s["l_pg"])) for s in steps)
        d["steps"] = len(steps)
        d["max_additivity_err"] = f"{worst:.1e}"
        assert steps and worst <= 1e-6


# 4 -------------------------------------------------------------------------------


def test_c04_gradient_check(criterion):
    with criterion(4, "analytic vs central-difference gradients") as d:
        t0 = time.perf_counter()
        errs = gradient_check(n_params=200, seed=0)
        elapsed = time.perf_counter() - t0
        d["params"] = errs.size
        d["max_rel_err"] = f"{errs.max():.1e}"
        assert errs.size >= 200 and errs.max() < 1e-4
        assert elapsed < 120.0


# 5 -------------------------------------------------------------------------------


def test_c05_chunk_filter_hand_trajectory(criterion):
    with criterion(5, "chunk filter on hand-built 20-frame trajectory") as d:
        chunks = select_chunks(entry(hand_trajectory()), UNIT)
        starts = [c.start + 1 for c in chunks]
        d["windows_1_based"] = starts
        assert starts == [1, 8]


# 6 -------------------------------------------------------------------------------


def test_c06_frozen_backbone(criterion, small_data):
    with criterion(6, "backbone hash unchanged by probing and kNN"):
        from conftest import small_model_cfg
        m = build_model(small_model_cfg(), seed=1)
        h0 = backbone_hash(m)
        tr = extract_embeddings(m, small_data.split("train"), AV)
        te = extract_embeddings(m, small_data.split("test"), AV)
        for task in ("gaze", "headpose", "zone"):
            linear_probe(tr, te, task, epochs=10)
        weighted_knn(tr.embeddings, tr.zones, te.embeddings, te.zones)
        assert backbone_hash(m) == h0 == tr.backbone_hash == te.backbone_hash


# 7 -------------------------------------------------------------------------------


def test_c07_modality_paths(criterion):
    with criterion(7, "audio / visual / AV paths and dropped-encoder gradients"):
        cfg = ModelConfig()
        m = build_model(cfg, seed=0)
        g = torch.Generator().manual_seed(0)
        frames = torch.rand(1, 7, 3, cfg.input_resolution, cfg.input_resolution, generator=g) - 0.5
        audio = torch.randn(1, 24, cfg.n_mels, generator=g)
        for mask in (AUDIO_ONLY, VISUAL_ONLY, AV):
            m.zero_grad(set_to_none=True)
            out = m(frames, audio, mask)
            assert tuple(out.headpose.shape[1:]) + tuple(out.gaze.shape[1:]) + tuple(out.embedding.shape[1:]) \
                == (6, 3, 256)
            for t in out:
                assert torch.isfinite(t).all()
            (out.headpose.square().sum() + out.gaze.sum()).backward()
            dropped = []
            if not mask.use_audio:
                dropped.append(m.audio)
            if not mask.use_visual:
                dropped.extend([m.visual, m.temporal])
            for enc in dropped:
                for p in enc.parameters():
                    assert p.grad is None or torch.all(p.grad == 0)


# 8 and 9 -------------------------------------------------------------------------


def _yaw(rotvecs):
    return np.array([vector_to_pitchyaw(head_direction(r))[1] for r in rotvecs])


@pytest.fixture(scope="module")
def closed_loop(tmp_path_factory):
    """One 200-clip world and one AV training run with modality dropout."""
    root = tmp_path_factory.mktemp("closed_loop")
    t0 = time.perf_counter()
    manifest = generate_world(WorldConfig(seed=3, n_clips=200), root / "world")
    cfg = TrainConfig(learning_rate=3e-4, epochs=20, seed=3, modality_drop_prob=0.2)
    res = train(manifest, cfg, ModelConfig(), out_dir=root / "run")
    return res, time.perf_counter() - t0


def test_c08_audio_only_yaw(criterion, closed_loop):
    with criterion(8, "closed-loop audio-only yaw vs train-mean baseline") as d:
        res, elapsed = closed_loop
        data = res.data
        tr, te = data.split("train"), data.split("test")
        h, _, _ = predict(res.model, None, te.audio, AUDIO_ONLY)
        stats = data.label_stats
        yaw_pred = _yaw((h * stats.std + stats.mean)[:, :3])
        yaw_true = _yaw(te.headpose[:, :3])
        mae = float(np.mean(np.abs(yaw_pred - yaw_true)))
        baseline = float(np.mean(np.abs(_yaw(tr.headpose[:, :3]).mean() - yaw_true)))
        d["yaw_mae"] = f"{mae:.4f}"
        d["baseline"] = f"{baseline:.4f}"
        d["ratio"] = f"{mae / baseline:.3f}"
        d["train_s"] = f"{elapsed:.0f}"
        assert elapsed <= 600.0
        assert mae < 0.5 * baseline


def test_c09_fusion_ordering(criterion, closed_loop):
    with criterion(9, "closed-loop AV gaze error <= audio-only gaze error") as d:
        res, _ = closed_loop
        te = res.data.split("test")
        _, g_av, _ = predict(res.model, te.frames, te.audio, AV)
        _, g_a, _ = predict(res.model, None, te.audio, AUDIO_ONLY)
        e_av = gaze_metrics(g_av, te.gaze)["all_360"]
        e_a = gaze_metrics(g_a, te.gaze)["all_360"]
        d["av_deg"] = f"{e_av:.2f}"
        d["audio_deg"] = f"{e_a:.2f}"
        assert e_av <= e_a


# 10 ------------------------------------------------------------------------------


def test_c10_ablation_harness(criterion, tmp_path):
    with criterion(10, "ablate: five configurations on a 50-clip world") as d:
        t0 = time.perf_counter()
        world = tmp_path / "world"
        assert cli_main(["synth", "--seed", "5", "--clips", "50", "--out", str(world)]) == 0
        out = tmp_path / "ablate"
        assert cli_main(["ablate", "--manifest", str(world / "manifest.jsonl"), "--out", str(out)]) == 0
        elapsed = time.perf_counter() - t0
        rows = json.loads((out / "ablation.json").read_text())
        names = {r["name"] for r in rows}
        assert len(rows) == 5 and len(names) == 5
        for r in rows:
            assert r["error"] is None
            assert math.isfinite(r["gaze_error_deg"]) and math.isfinite(r["head_gaze_error_deg"])
        table = (out / "ablation.txt").read_text().splitlines()
        assert len(table) >= 7
        d["rows"] = len(rows)
        d["elapsed_s"] = f"{elapsed:.0f}"
        assert elapsed < 1800.0


# 11 ------------------------------------------------------------------------------


def _pipeline(root):
    assert cli_main(["synth", "--seed", "13", "--clips", "15", "--out", str(root / "world")]) == 0
    manifest = str(root / "world" / "manifest.jsonl")
    assert cli_main(["train", "--manifest", manifest, "--epochs", "2", "--seed", "13", "--out", str(root / "train")]) == 0
    ckpt = str(root / "train" / "checkpoint.ckpt")
    for cmd in ("eval", "probe", "knn"):
        assert cli_main([cmd, "--manifest", manifest, "--checkpoint", ckpt, "--seed", "13",
                         "--out", str(root / cmd)]) == 0


def test_c11_determinism(criterion, tmp_path):
    with criterion(11, "rerun gives bit-identical checkpoints and metrics") as d:
        _pipeline(tmp_path / "a")
        _pipeline(tmp_path / "b")
        files = ["world/manifest.jsonl", "train/checkpoint.ckpt", "train/checkpoints/epoch_0001.ckpt",
                 "eval/metrics.json", "probe/metrics.json", "knn/metrics.json"]
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
        d["files_compared"] = len(files)
