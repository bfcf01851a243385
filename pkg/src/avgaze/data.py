"""Manifests, 7-frame chunk selection, audio alignment and pseudo-label providers.

A manifest is JSON-lines, one clip per line::

    {"schema_version": 1, "clip_id": "clip0000", "fps": 25.0,
     "frame_paths": ["frames/clip0000/000.png", ...],
     "audio_path": "audio/clip0000.wav",
     "audio_offsets": [[0, 640], [640, 1280], ...],
     "pseudo_headpose": [[rx, ry, rz, tx, ty, tz], ...],   # optional
     "pseudo_gaze": [[gx, gy, gz], ...],                    # optional
     "task_label": [zone, ...],                             # optional
     "split": "train"}                                      # optional

Relative paths resolve against the manifest's directory.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np
from PIL import Image

from .audio_features import (
    AudioClip,
    FilterbankConfig,
    NormStats,
    apply_norm,
    extract_features,
    fit_norm_stats,
    read_wav,
)
from .errors import AlignmentError, InsufficientDataError, LookupFailure, ManifestError
from .geometry import head_direction

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CHUNK_LEN = 7
CENTER = CHUNK_LEN // 2  # zero-based index of the 4th frame
LABEL_STD_EPS = 1e-8


@dataclass
class ManifestEntry:
    clip_id: str
    frame_paths: list
    audio_path: str
    fps: float
    audio_offsets: np.ndarray
    pseudo_headpose: Optional[np.ndarray] = None
    pseudo_gaze: Optional[np.ndarray] = None
    task_label: Optional[list] = None
    split: str = "train"
    ground_truth: Optional[dict] = None

    @property
    def n_frames(self) -> int:
        return len(self.frame_paths)

    @property
    def chunk_eligible(self) -> bool:
        return self.n_frames >= CHUNK_LEN

    def to_json(self, root: Optional[Path] = None) -> dict:
        def rel(p):
            if root is None:
                return str(p)
            try:
                return str(Path(p).relative_to(root))
            except ValueError:
                return str(p)

        rec = {
            "schema_version": SCHEMA_VERSION,
            "clip_id": self.clip_id,
            "fps": self.fps,
            "frame_paths": [rel(p) for p in self.frame_paths],
            "audio_path": rel(self.audio_path),
            "audio_offsets": np.asarray(self.audio_offsets).astype(int).tolist(),
            "split": self.split,
        }
        if self.pseudo_headpose is not None:
            rec["pseudo_headpose"] = np.asarray(self.pseudo_headpose).tolist()
        if self.pseudo_gaze is not None:
            rec["pseudo_gaze"] = np.asarray(self.pseudo_gaze).tolist()
        if self.task_label is not None:
            rec["task_label"] = list(self.task_label)
        if self.ground_truth is not None:
            rec["ground_truth"] = self.ground_truth
        return rec


@dataclass
class FrameChunk:
    clip_id: str
    start: int
    frames: Optional[np.ndarray] = None  # (7, H, W, 3) uint8
    audio: Optional[AudioClip] = None
    center_headpose: Optional[np.ndarray] = None
    center_gaze: Optional[np.ndarray] = None
    zone: Optional[int] = None
    center_index: int = CENTER + 1  # 1-based, as in "the 4th frame"

    @property
    def frame_indices(self) -> list:
        return list(range(self.start, self.start + CHUNK_LEN))

    @property
    def center_frame(self) -> int:
        return self.start + CENTER


@dataclass(frozen=True)
class LabelNormStats:
    mean: np.ndarray
    std: np.ndarray

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, d) -> "LabelNormStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


# --- manifest ----------------------------------------------------------------

_REQUIRED = ("clip_id", "frame_paths", "audio_path", "fps", "audio_offsets")


def _parse_entry(rec: dict, root: Path) -> ManifestEntry:
    missing = [k for k in _REQUIRED if k not in rec]
    if missing:
        raise ValueError(f"missing fields {missing}")
    version = rec.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema_version {version}")
    frames = [str(root / p) for p in rec["frame_paths"]]
    offsets = np.asarray(rec["audio_offsets"], dtype=np.int64).reshape(-1, 2)
    if len(offsets) != len(frames):
        raise ValueError(f"{len(offsets)} audio offsets for {len(frames)} frames")
    if len(offsets) and (np.any(np.diff(offsets[:, 0]) <= 0) or np.any(offsets[:, 1] < offsets[:, 0])):
        raise ValueError("audio offsets must increase monotonically")
    hp = rec.get("pseudo_headpose")
    hp = None if hp is None else np.asarray(hp, dtype=np.float64).reshape(-1, 6)
    gz = rec.get("pseudo_gaze")
    gz = None if gz is None else np.asarray(gz, dtype=np.float64).reshape(-1, 3)
    for name, arr in (("pseudo_headpose", hp), ("pseudo_gaze", gz)):
        if arr is not None and len(arr) != len(frames):
            raise ValueError(f"{name} has {len(arr)} rows for {len(frames)} frames")
    fps = float(rec["fps"])
    if fps <= 0:
        raise ValueError("fps must be positive")
    return ManifestEntry(
        clip_id=str(rec["clip_id"]),
        frame_paths=frames,
        audio_path=str(root / rec["audio_path"]),
        fps=fps,
        audio_offsets=offsets,
        pseudo_headpose=hp,
        pseudo_gaze=gz,
        task_label=rec.get("task_label"),
        split=rec.get("split", "train"),
        ground_truth=rec.get("ground_truth"),
    )


def load_manifest(path, check_files: bool = True) -> list:
    """Parse and validate a JSON-lines manifest.

    Raises :class:`ManifestError` listing every bad line (parse errors,
    schema violations, duplicate ids, missing referenced files).
    """
    path = Path(path)
    root = path.parent
    entries, problems, seen = [], [], {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            problems.append((lineno, f"JSON parse error at column {exc.colno}: {exc.msg}"))
            continue
        try:
            entry = _parse_entry(rec, root)
        except (ValueError, TypeError) as exc:
            problems.append((lineno, str(exc)))
            continue
        if entry.clip_id in seen:
            problems.append((lineno, f"duplicate clip_id {entry.clip_id!r} (first on line {seen[entry.clip_id]})"))
            continue
        seen[entry.clip_id] = lineno
        if check_files:
            absent = [p for p in [entry.audio_path, *entry.frame_paths] if not Path(p).exists()]
            if absent:
                problems.append((lineno, f"{len(absent)} referenced files missing, e.g. {absent[0]}"))
                continue
        if not entry.chunk_eligible:
            log.warning("clip %s has %d frames; not chunk-eligible", entry.clip_id, entry.n_frames)
        entries.append(entry)
    if problems:
        raise ManifestError(problems)
    return entries


def write_manifest(path, entries: Sequence[ManifestEntry]) -> Path:
    path = Path(path)
    root = path.parent.resolve()
    with open(path, "w") as fh:
        for e in entries:
            fh.write(json.dumps(e.to_json(root), sort_keys=True) + "\n")
    return path


# --- label normalization and chunk selection ---------------------------------


def fit_label_norm(entries, eps: float = LABEL_STD_EPS) -> LabelNormStats:
    rows = [np.asarray(e.pseudo_headpose) for e in entries if getattr(e, "pseudo_headpose", None) is not None]
    total = sum(len(r) for r in rows)
    if total < 2:
        raise InsufficientDataError(f"need at least 2 labeled frames, got {total}")
    stacked = np.concatenate(rows, axis=0)
    mean = stacked.mean(axis=0)
    # pin constant dimensions so they normalize to exactly zero despite rounding in the mean
    const = np.all(stacked == stacked[0], axis=0)
    mean[const] = stacked[0, const]
    return LabelNormStats(mean, np.maximum(stacked.std(axis=0), eps))


def normalize_headpose(h, stats: LabelNormStats) -> np.ndarray:
    return (np.asarray(h, dtype=np.float64) - stats.mean) / stats.std


def denormalize_headpose(z, stats: LabelNormStats) -> np.ndarray:
    return np.asarray(z, dtype=np.float64) * stats.std + stats.mean


def window_spread(poses: np.ndarray, stats: LabelNormStats) -> float:
    """Largest per-dimension std (population) of normalized head-pose over a window."""
    return float(normalize_headpose(poses, stats).std(axis=0).max())


def select_chunks(entry: ManifestEntry, stats: LabelNormStats, chunk_len: int = CHUNK_LEN,
                  std_threshold: float = 0.1) -> list:
    """Non-overlapping windows whose normalized head-pose is stable enough."""
    if entry.pseudo_headpose is None:
        log.warning("clip %s has no pseudo head-pose; skipped", entry.clip_id)
        return []
    poses = np.asarray(entry.pseudo_headpose)
    chunks = []
    for start in range(0, entry.n_frames - chunk_len + 1, chunk_len):
        if window_spread(poses[start:start + chunk_len], stats) > std_threshold:
            continue
        center = start + chunk_len // 2
        gaze = None if entry.pseudo_gaze is None else np.asarray(entry.pseudo_gaze[center])
        zone = None if entry.task_label is None else entry.task_label[center]
        chunks.append(FrameChunk(entry.clip_id, start, center_headpose=poses[center].copy(),
                                 center_gaze=gaze, zone=zone))
    return chunks


_AUDIO_CACHE: dict = {}


def _load_audio(path) -> AudioClip:
    key = str(path)
    if key not in _AUDIO_CACHE:
        if len(_AUDIO_CACHE) > 64:
            _AUDIO_CACHE.clear()
        _AUDIO_CACHE[key] = read_wav(path)
    return _AUDIO_CACHE[key]


def align_audio(entry: ManifestEntry, chunk: FrameChunk, audio: Optional[AudioClip] = None) -> AudioClip:
    """Audio from the start of the chunk's first frame to the end of its last."""
    audio = audio if audio is not None else _load_audio(entry.audio_path)
    first, last = chunk.start, chunk.start + CHUNK_LEN - 1
    if first < 0 or last >= len(entry.audio_offsets):
        raise AlignmentError(f"chunk frames {first}..{last} outside clip {entry.clip_id}")
    lo, hi = int(entry.audio_offsets[first][0]), int(entry.audio_offsets[last][1])
    if lo < 0 or hi > len(audio):
        raise AlignmentError(
            f"offsets [{lo}, {hi}) exceed audio length {len(audio)} in clip {entry.clip_id}"
        )
    return AudioClip(audio.samples[lo:hi], audio.sample_rate)


def load_frames(entry: ManifestEntry, indices, resolution: int = 64) -> np.ndarray:
    out = np.empty((len(indices), resolution, resolution, 3), dtype=np.uint8)
    for k, i in enumerate(indices):
        with Image.open(entry.frame_paths[i]) as im:
            im = im.convert("RGB")
            if im.size != (resolution, resolution):
                im = im.resize((resolution, resolution), Image.BILINEAR)
            out[k] = np.asarray(im)
    return out


# --- pseudo-label providers --------------------------------------------------


class LabelProvider(Protocol):
    def headpose(self, clip_id: str, frame_idx: int) -> Optional[np.ndarray]: ...

    def gaze(self, clip_id: str, frame_idx: int) -> Optional[np.ndarray]: ...


class ManifestLabelProvider:
    """Serves the per-frame pseudo-labels stored inside manifest entries."""

    def __init__(self, entries):
        self._by_id = {e.clip_id: e for e in entries}

    def headpose(self, clip_id, frame_idx):
        e = self._by_id.get(clip_id)
        if e is None or e.pseudo_headpose is None:
            return None
        return np.asarray(e.pseudo_headpose[frame_idx])

    def gaze(self, clip_id, frame_idx):
        e = self._by_id.get(clip_id)
        if e is None or e.pseudo_gaze is None:
            return None
        return np.asarray(e.pseudo_gaze[frame_idx])


class CsvLabelProvider:
    """Per-frame labels exported by an external teacher.

    Columns: ``clip_id, frame_idx, rx, ry, rz, tx, ty, tz[, gx, gy, gz]``.
    The file is read once; lookups are read-only and thread-safe.
    """

    def __init__(self, path):
        self.path = Path(path)
        self._hp, self._gz = {}, {}
        with open(self.path, newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].strip() in ("clip_id", "") or row[0].startswith("#"):
                    continue
                key = (row[0].strip(), int(row[1]))
                vals = [float(v) for v in row[2:] if v.strip() != ""]
                self._hp[key] = np.asarray(vals[:6])
                if len(vals) >= 9:
                    self._gz[key] = np.asarray(vals[6:9])

    def headpose(self, clip_id, frame_idx):
        return self._hp.get((clip_id, int(frame_idx)))

    def gaze(self, clip_id, frame_idx):
        return self._gz.get((clip_id, int(frame_idx)))


def write_label_csv(path, rows) -> None:
    """rows: iterable of (clip_id, frame_idx, headpose6, gaze3 or None)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["clip_id", "frame_idx", "rx", "ry", "rz", "tx", "ty", "tz", "gx", "gy", "gz"])
        for clip_id, idx, hp, gz in rows:
            tail = [] if gz is None else [repr(float(v)) for v in gz]
            w.writerow([clip_id, int(idx), *[repr(float(v)) for v in hp], *tail])


def attach_pseudo_labels(chunk: FrameChunk, headpose_provider, gaze_provider=None) -> Optional[FrameChunk]:
    """Set the center-frame labels; returns None when head-pose is unavailable.

    Without a gaze label the head orientation stands in for gaze.
    """
    center = chunk.center_frame
    try:
        hp = headpose_provider.headpose(chunk.clip_id, center)
    except (LookupFailure, KeyError, IndexError):
        hp = None
    if hp is None:
        log.warning("no head-pose for %s frame %d; chunk dropped", chunk.clip_id, center)
        return None
    hp = np.asarray(hp, dtype=np.float64)
    gaze = None
    if gaze_provider is not None:
        try:
            gaze = gaze_provider.gaze(chunk.clip_id, center)
        except (LookupFailure, KeyError, IndexError):
            gaze = None
    if gaze is None:
        gaze = head_direction(hp[:3])
    return replace(chunk, center_headpose=hp, center_gaze=np.asarray(gaze, dtype=np.float64))


# --- materialized datasets ---------------------------------------------------


@dataclass
class ChunkSet:
    """All chunks of a manifest, materialized as arrays ready for batching."""

    clip_ids: list
    starts: np.ndarray
    splits: np.ndarray
    frames: np.ndarray  # (N, 7, H, W, 3) uint8
    audio: list  # N arrays of shape (T_i, n_filters), normalized
    headpose: np.ndarray  # (N, 6) raw
    headpose_norm: np.ndarray  # (N, 6)
    gaze: np.ndarray  # (N, 3)
    zones: np.ndarray  # (N,) int, 0 when unknown
    label_stats: LabelNormStats
    audio_stats: NormStats
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.clip_ids)

    def subset(self, idx) -> "ChunkSet":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(
            self,
            clip_ids=[self.clip_ids[i] for i in idx],
            starts=self.starts[idx],
            splits=self.splits[idx],
            frames=self.frames[idx],
            audio=[self.audio[i] for i in idx],
            headpose=self.headpose[idx],
            headpose_norm=self.headpose_norm[idx],
            gaze=self.gaze[idx],
            zones=self.zones[idx],
        )

    def split(self, name: str) -> "ChunkSet":
        return self.subset(np.flatnonzero(self.splits == name))

    def sample_ids(self) -> list:
        return [f"{c}:{s}" for c, s in zip(self.clip_ids, self.starts)]


def build_chunk_set(entries, resolution: int = 64, fb_cfg: FilterbankConfig = FilterbankConfig(),
                    label_stats: Optional[LabelNormStats] = None, audio_stats: Optional[NormStats] = None,
                    headpose_provider=None, gaze_provider=None, std_threshold: float = 0.1) -> ChunkSet:
    """Select, label and load every chunk of ``entries``.

    Label and audio normalization statistics are fit on the training split
    unless given (pass the training statistics when building a test set).
    """
    entries = list(entries)
    train_entries = [e for e in entries if e.split == "train"] or entries
    if label_stats is None:
        label_stats = fit_label_norm(train_entries)
    hp_provider = headpose_provider or ManifestLabelProvider(entries)
    gz_provider = gaze_provider or ManifestLabelProvider(entries)

    chunks, owners = [], []
    for e in entries:
        for ch in select_chunks(e, label_stats, std_threshold=std_threshold):
            ch = attach_pseudo_labels(ch, hp_provider, gz_provider)
            if ch is not None:
                chunks.append(ch)
                owners.append(e)
    if not chunks:
        raise InsufficientDataError("no eligible chunks in manifest")

    feats, frames = [], np.empty((len(chunks), CHUNK_LEN, resolution, resolution, 3), dtype=np.uint8)
    for k, (ch, e) in enumerate(zip(chunks, owners)):
        feats.append(extract_features(align_audio(e, ch), fb_cfg).values)
        frames[k] = load_frames(e, ch.frame_indices, resolution)
    splits = np.array([e.split for e in owners])
    if audio_stats is None:
        train_feats = [f for f, s in zip(feats, splits) if s == "train"] or feats
        audio_stats = fit_norm_stats(train_feats)
    audio = [apply_norm(f, audio_stats).astype(np.float32) for f in feats]
    headpose = np.stack([c.center_headpose for c in chunks])
    return ChunkSet(
        clip_ids=[c.clip_id for c in chunks],
        starts=np.array([c.start for c in chunks], dtype=np.int64),
        splits=splits,
        frames=frames,
        audio=audio,
        headpose=headpose,
        headpose_norm=normalize_headpose(headpose, label_stats),
        gaze=np.stack([c.center_gaze for c in chunks]),
        zones=np.array([0 if c.zone is None else int(c.zone) for c in chunks], dtype=np.int64),
        label_stats=label_stats,
        audio_stats=audio_stats,
    )

