"""Synthetic audio-visual world with known head-pose and gaze.

Each clip is a talking "head" whose orientation follows a smoothed, bounded
random walk.  Frames are rendered parametrically (red face ellipse, green
nose marker displaced with yaw/pitch, blue pupils displaced by the eye
offset).  Audio is a harmonic tone whose two formant-like spectral peaks
track yaw and pitch, so coarse head-pose is audible but the eye offset is
visual-only.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .audio_features import AudioClip, write_wav
from .data import ManifestEntry, write_manifest
from .errors import InvalidInputError, LookupFailure
from .geometry import pitchyaw_to_vector, rotvec_from_angles

YAW_RANGE = 0.8
PITCH_RANGE = 0.4
ROLL_RANGE = 0.3
TRANSLATION = np.array([0.0, 0.0, 1.0])
F0_HZ = 110.0


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 0
    n_clips: int = 100
    frames_per_clip: int = 21
    fps: float = 25.0
    sample_rate: int = 16000
    pose_walk_scale: float = 0.02
    eye_offset_scale: float = 0.1
    image_size: int = 64
    snr_db: float = 20.0
    label_noise: float = 0.0
    test_every: int = 5  # every n-th clip is held out

    def __post_init__(self):
        if self.n_clips <= 0 or self.frames_per_clip <= 0 or self.fps <= 0 or self.sample_rate <= 0:
            raise InvalidInputError("n_clips, frames_per_clip, fps and sample_rate must be positive")
        if self.image_size < 8 or self.pose_walk_scale < 0 or self.eye_offset_scale < 0:
            raise InvalidInputError("invalid world configuration")


@dataclass
class ClipLabels:
    yaw: np.ndarray
    pitch: np.ndarray
    roll: np.ndarray
    eye_yaw: np.ndarray
    eye_pitch: np.ndarray

    @property
    def headpose(self) -> np.ndarray:
        rot = np.stack([rotvec_from_angles(y, p, r) for y, p, r in zip(self.yaw, self.pitch, self.roll)])
        return np.concatenate([rot, np.broadcast_to(TRANSLATION, rot.shape)], axis=1)

    @property
    def gaze(self) -> np.ndarray:
        return pitchyaw_to_vector(self.pitch + self.eye_pitch, self.yaw + self.eye_yaw)

    @property
    def zones(self) -> list:
        return [gaze_zone(p, y) for p, y in zip(self.pitch + self.eye_pitch, self.yaw + self.eye_yaw)]


@dataclass
class SynthClip:
    clip_id: str
    labels: ClipLabels
    frames: np.ndarray  # (N, S, S, 3) uint8
    audio: AudioClip
    audio_offsets: np.ndarray
    split: str


def gaze_zone(pitch: float, yaw: float) -> int:
    """3x3 grid over gaze direction; zone ids 1..9 row-major from top-left."""
    col = int(np.digitize(yaw, [-0.3, 0.3]))
    row = int(np.digitize(-pitch, [-0.15, 0.15]))
    return 1 + 3 * row + col


def _rng(cfg: WorldConfig, clip_index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, clip_index, stream])


def _walk(rng, n, scale, bound, start):
    """Smoothed random walk softly bounded to (-bound, bound)."""
    steps = rng.standard_normal(n + 4) * scale
    steps = np.convolve(steps, np.ones(5) / 5.0, mode="valid")[:n]
    steps[0] = 0.0
    raw = np.arctanh(np.clip(start / bound, -0.999, 0.999)) + np.cumsum(steps) / bound
    return bound * np.tanh(raw)


def clip_labels(cfg: WorldConfig, clip_index: int) -> ClipLabels:
    rng = _rng(cfg, clip_index, 0)
    n = cfg.frames_per_clip
    s = cfg.pose_walk_scale
    yaw = _walk(rng, n, s, YAW_RANGE + 0.1, rng.uniform(-YAW_RANGE, YAW_RANGE))
    pitch = _walk(rng, n, 0.5 * s, PITCH_RANGE + 0.1, rng.uniform(-PITCH_RANGE, PITCH_RANGE))
    roll = _walk(rng, n, 0.25 * s, ROLL_RANGE + 0.1, rng.uniform(-ROLL_RANGE, ROLL_RANGE))
    t = np.arange(n) / cfg.fps
    amp = rng.uniform(-1.0, 1.0, size=2) * cfg.eye_offset_scale
    phase = rng.uniform(0, 2 * np.pi, size=2)
    eye_yaw = amp[0] * np.cos(2 * np.pi * 0.3 * t + phase[0])
    eye_pitch = amp[1] * np.cos(2 * np.pi * 0.3 * t + phase[1])
    return ClipLabels(yaw, pitch, roll, eye_yaw, eye_pitch)


def formant_frequencies(yaw, pitch):
    """Formant-like peak frequencies (Hz): the first tracks yaw, the second pitch."""
    return 750.0 + 500.0 * np.asarray(yaw), 2300.0 + 1400.0 * np.asarray(pitch)


def synth_audio(cfg: WorldConfig, labels: ClipLabels, rng: np.random.Generator) -> AudioClip:
    sr = cfg.sample_rate
    n_samples = int(round(cfg.frames_per_clip * sr / cfg.fps))
    t = np.arange(n_samples) / sr
    frame_t = (np.arange(cfg.frames_per_clip) + 0.5) / cfg.fps
    f1, f2 = formant_frequencies(np.interp(t, frame_t, labels.yaw), np.interp(t, frame_t, labels.pitch))
    f0 = F0_HZ * (1.0 + 0.03 * np.sin(2 * np.pi * 3.0 * t + rng.uniform(0, 2 * np.pi)))
    phase0 = 2 * np.pi * np.cumsum(f0) / sr
    out = np.zeros(n_samples)
    for k in range(1, int((sr / 2 - 200) / (F0_HZ * 1.03)) + 1):
        fk = k * f0
        env = (np.exp(-0.5 * ((fk - f1) / 90.0) ** 2)
               + 0.7 * np.exp(-0.5 * ((fk - f2) / 130.0) ** 2)
               + 0.02)
        out += env * np.sin(k * phase0 + rng.uniform(0, 2 * np.pi))
    out *= 1.0 + 0.3 * np.sin(2 * np.pi * 4.0 * t + rng.uniform(0, 2 * np.pi))
    rms = np.sqrt(np.mean(out ** 2))
    noise = rng.standard_normal(n_samples) * rms * 10 ** (-cfg.snr_db / 20.0)
    out = out + noise
    out *= 0.5 / np.max(np.abs(out))
    return AudioClip(out, sr)


def _blob(yy, xx, cy, cx, sigma):
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))


def nose_position(size, yaw, pitch):
    c = (size - 1) / 2.0
    return c - 0.22 * size * np.sin(pitch), c + 0.25 * size * np.sin(yaw)


EYE_ROW = 0.40
EYE_COLS = (0.36, 0.64)
PUPIL_GAIN = 0.5  # pupil shift per unit sin(eye offset), as a fraction of image size


def pupil_positions(size, eye_yaw, eye_pitch):
    dy = -PUPIL_GAIN * size * np.sin(eye_pitch)
    dx = PUPIL_GAIN * size * np.sin(eye_yaw)
    return [(EYE_ROW * (size - 1) + dy, c * (size - 1) + dx) for c in EYE_COLS]


def render_frame(size, yaw, pitch, roll, eye_yaw, eye_pitch, rng) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    cr, sr_ = np.cos(roll), np.sin(roll)
    u = (xx - c) * cr + (yy - c) * sr_
    v = -(xx - c) * sr_ + (yy - c) * cr
    face = 1.0 / (1.0 + np.exp(((u / (0.36 * size)) ** 2 + (v / (0.45 * size)) ** 2 - 1.0) * 12.0))
    ny, nx = nose_position(size, yaw, pitch)
    nose = _blob(yy, xx, ny, nx, 0.05 * size)
    pupils = sum(_blob(yy, xx, py, px, 0.035 * size) for py, px in pupil_positions(size, eye_yaw, eye_pitch))
    img = np.stack([0.15 + 0.7 * face, 0.1 + 0.8 * nose, 0.1 + 0.8 * pupils], axis=-1)
    img += rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def generate_clip(cfg: WorldConfig, clip_index: int) -> SynthClip:
    """Render one clip; a pure function of ``(cfg, clip_index)``."""
    labels = clip_labels(cfg, clip_index)
    rng = _rng(cfg, clip_index, 1)
    frames = np.stack([
        render_frame(cfg.image_size, labels.yaw[i], labels.pitch[i], labels.roll[i],
                     labels.eye_yaw[i], labels.eye_pitch[i], rng)
        for i in range(cfg.frames_per_clip)
    ])
    audio = synth_audio(cfg, labels, _rng(cfg, clip_index, 2))
    edges = np.round(np.arange(cfg.frames_per_clip + 1) * cfg.sample_rate / cfg.fps).astype(np.int64)
    offsets = np.stack([edges[:-1], edges[1:]], axis=1)
    split = "test" if cfg.test_every and clip_index % cfg.test_every == cfg.test_every - 1 else "train"
    return SynthClip(f"clip{clip_index:05d}", labels, frames, audio, offsets, split)


class OracleProvider:
    """Exact (or teacher-noise corrupted) labels for any (clip_id, frame_idx).

    Noise is a deterministic function of the key, so concurrent or repeated
    lookups agree.
    """

    def __init__(self, cfg: WorldConfig, noise: float = 0.0, noise_seed: int = 0):
        self.cfg = cfg
        self.noise = float(noise)
        self.noise_seed = noise_seed
        self._cache: dict = {}

    def _labels(self, clip_id: str) -> ClipLabels:
        if clip_id not in self._cache:
            try:
                idx = int(clip_id.removeprefix("clip"))
            except ValueError:
                raise LookupFailure(f"unknown clip {clip_id!r}") from None
            if not clip_id.startswith("clip") or not 0 <= idx < self.cfg.n_clips:
                raise LookupFailure(f"unknown clip {clip_id!r}")
            lab = clip_labels(self.cfg, idx)
            self._cache[clip_id] = (idx, lab.headpose, lab.gaze)
        return self._cache[clip_id]

    def _check(self, clip_id, frame_idx):
        idx, hp, gz = self._labels(clip_id)
        if not 0 <= frame_idx < self.cfg.frames_per_clip:
            raise LookupFailure(f"unknown frame {frame_idx} of {clip_id}")
        return idx, hp, gz

    def _noise(self, idx, frame_idx, stream, n):
        if self.noise == 0.0:
            return 0.0
        rng = np.random.default_rng([self.noise_seed, idx, int(frame_idx), stream])
        return rng.normal(0.0, self.noise, size=n)

    def headpose(self, clip_id, frame_idx):
        idx, hp, _ = self._check(clip_id, frame_idx)
        return hp[frame_idx] + self._noise(idx, frame_idx, 0, 6)

    def gaze(self, clip_id, frame_idx):
        idx, _, gz = self._check(clip_id, frame_idx)
        return gz[frame_idx] + self._noise(idx, frame_idx, 1, 3)


def oracle_provider(world_cfg: WorldConfig, noise: float = 0.0, noise_seed: int = 0) -> OracleProvider:
    return OracleProvider(world_cfg, noise, noise_seed)


def generate_world(cfg: WorldConfig, out_dir, provider: Optional[OracleProvider] = None) -> Path:
    """Write frames (PNG), audio (16-bit WAV) and ``manifest.jsonl`` under ``out_dir``."""
    out = Path(out_dir).resolve()
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    provider = provider or oracle_provider(cfg, cfg.label_noise)
    entries = []
    for i in range(cfg.n_clips):
        clip = generate_clip(cfg, i)
        fdir = out / "frames" / clip.clip_id
        fdir.mkdir(exist_ok=True)
        paths = []
        for k, frame in enumerate(clip.frames):
            p = fdir / f"{k:04d}.png"
            Image.fromarray(frame).save(p, optimize=False)
            paths.append(str(p))
        wav = out / "audio" / f"{clip.clip_id}.wav"
        write_wav(wav, clip.audio)
        n = cfg.frames_per_clip
        lab = clip.labels
        entries.append(ManifestEntry(
            clip_id=clip.clip_id,
            frame_paths=paths,
            audio_path=str(wav),
            fps=cfg.fps,
            audio_offsets=clip.audio_offsets,
            pseudo_headpose=np.stack([provider.headpose(clip.clip_id, k) for k in range(n)]),
            pseudo_gaze=np.stack([provider.gaze(clip.clip_id, k) for k in range(n)]),
            task_label=lab.zones,
            split=clip.split,
            ground_truth={
                "yaw": lab.yaw.tolist(),
                "pitch": lab.pitch.tolist(),
                "roll": lab.roll.tolist(),
                "eye_yaw": lab.eye_yaw.tolist(),
                "eye_pitch": lab.eye_pitch.tolist(),
            },
        ))
    manifest = write_manifest(out / "manifest.jsonl", entries)
    (out / "world.json").write_text(json.dumps(asdict(cfg), indent=1, sort_keys=True))
    return manifest
