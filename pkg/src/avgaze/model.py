"""Cascaded audio-visual network.

frames (B, 7, 3, H, W) --residual CNN--> (B, 7, Dv) --BiLSTM+FC--> z_v
filterbank (B, T, n_mels) --mean-pool, 2 FC--> z_a
[z_v | z_a | mask bits] --2 FC--> z'  --FC--> h'  ;  [h' | z'] --FC--> g'

A disabled modality is replaced by zeros and its encoder is not run, so it
receives no gradient.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, InvalidInputError, ShapeError

CHUNK_LEN = 7
CKPT_MAGIC = b"AVGZCKPT"
CKPT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    visual_feat_dim: int = 256
    audio_embed_dim: int = 256
    temporal_hidden: int = 128
    fused_dim: int = 256
    input_resolution: int = 64
    headpose_dim: int = 6
    gaze_dim: int = 3
    n_mels: int = 40
    audio_hidden: int = 256
    visual_backbone_depth: str = "small"  # "small": 4 single-block stages; "full": ResNet-18 layout
    conv_widths: Optional[tuple] = None
    pooled_grid: int = 4  # final feature map is pooled to grid x grid and flattened

    def __post_init__(self):
        if self.gaze_dim != 3 or self.headpose_dim != 6:
            raise InvalidInputError("gaze_dim must be 3 and headpose_dim 6")
        dims = (self.visual_feat_dim, self.audio_embed_dim, self.temporal_hidden, self.fused_dim,
                self.input_resolution, self.n_mels, self.audio_hidden, self.pooled_grid)
        if min(dims) <= 0:
            raise InvalidInputError("all model dimensions must be positive")
        if self.visual_backbone_depth not in ("small", "full"):
            raise InvalidInputError(f"unknown backbone depth {self.visual_backbone_depth!r}")
        if self.conv_widths is not None:
            object.__setattr__(self, "conv_widths", tuple(int(w) for w in self.conv_widths))

    @classmethod
    def tiny(cls) -> "ModelConfig":
        """8x8 inputs, width 8 everywhere; used for finite-difference checks."""
        return cls(visual_feat_dim=8, audio_embed_dim=8, temporal_hidden=8, fused_dim=8,
                   input_resolution=8, n_mels=8, audio_hidden=8, conv_widths=(8, 8, 8, 8),
                   pooled_grid=1)

    def widths(self) -> tuple:
        if self.conv_widths is not None:
            return self.conv_widths
        return (16, 32, 64, 128) if self.visual_backbone_depth == "small" else (64, 128, 256, 512)

    def to_json(self) -> dict:
        d = asdict(self)
        d["conv_widths"] = None if self.conv_widths is None else list(self.conv_widths)
        return d

    @classmethod
    def from_json(cls, d) -> "ModelConfig":
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True)
class ModalityMask:
    use_visual: bool = True
    use_audio: bool = True

    def __post_init__(self):
        if not (self.use_visual or self.use_audio):
            raise InvalidInputError("at least one modality must be enabled")

    @classmethod
    def from_name(cls, name: str) -> "ModalityMask":
        try:
            return {"av": cls(True, True), "visual": cls(True, False), "audio": cls(False, True)}[name]
        except KeyError:
            raise InvalidInputError(f"unknown modality {name!r}; use av, visual or audio") from None

    @property
    def name(self) -> str:
        if self.use_visual and self.use_audio:
            return "av"
        return "visual" if self.use_visual else "audio"


AV = ModalityMask(True, True)


class ForwardOutput(NamedTuple):
    headpose: torch.Tensor  # h', (B, 6) in normalized label space
    gaze: torch.Tensor  # g', (B, 3), unnormalized
    embedding: torch.Tensor  # z', (B, fused_dim)


class BasicBlock(nn.Module):
    def __init__(self, c_in, c_out, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False)
        self.norm1 = nn.GroupNorm(1, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1, bias=False)
        self.norm2 = nn.GroupNorm(1, c_out)
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride, bias=False), nn.GroupNorm(1, c_out))

    def forward(self, x):
        y = torch.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return torch.relu(y + (x if self.shortcut is None else self.shortcut(x)))


class VisualEncoder(nn.Module):
    """Residual CNN mapping one frame to a ``visual_feat_dim`` vector."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        widths = cfg.widths()
        blocks = 1 if cfg.visual_backbone_depth == "small" else 2
        if cfg.visual_backbone_depth == "full":
            stem = [nn.Conv2d(3, widths[0], 7, 2, 3, bias=False), nn.GroupNorm(1, widths[0]), nn.ReLU(),
                    nn.MaxPool2d(3, 2, 1)]
        else:
            stem = [nn.Conv2d(3, widths[0], 3, 2, 1, bias=False), nn.GroupNorm(1, widths[0]), nn.ReLU()]
        layers = list(stem)
        c_in = widths[0]
        for i, w in enumerate(widths):
            for b in range(blocks):
                layers.append(BasicBlock(c_in, w, stride=2 if (i > 0 and b == 0) else 1))
                c_in = w
        self.body = nn.Sequential(*layers)
        # a pooled grid rather than a global average keeps marker positions
        self.pool = nn.AdaptiveAvgPool2d(cfg.pooled_grid)
        self.fc = nn.Linear(c_in * cfg.pooled_grid ** 2, cfg.visual_feat_dim)
        self.resolution = cfg.input_resolution

    def forward(self, frames):
        if frames.shape[-3:] != (3, self.resolution, self.resolution):
            raise ShapeError(f"expected frames (..., 3, {self.resolution}, {self.resolution}), got {tuple(frames.shape)}")
        lead = frames.shape[:-3]
        x = self.body(frames.reshape(-1, *frames.shape[-3:]))
        x = self.fc(self.pool(x).flatten(1))
        return x.reshape(*lead, -1)


class TemporalEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.lstm = nn.LSTM(cfg.visual_feat_dim, cfg.temporal_hidden, batch_first=True, bidirectional=True)
        self.fc = nn.Linear(2 * cfg.temporal_hidden, cfg.visual_feat_dim)

    def forward(self, seq):
        if seq.dim() != 3 or seq.shape[1] != CHUNK_LEN:
            raise ShapeError(f"expected (B, {CHUNK_LEN}, D) sequence, got {tuple(seq.shape)}")
        _, (h_n, _) = self.lstm(seq)
        # h_n: (2, B, H) = final forward state, final backward state
        return self.fc(torch.cat([h_n[0], h_n[1]], dim=-1))


class AudioEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.fc1 = nn.Linear(cfg.n_mels, cfg.audio_hidden)
        self.fc2 = nn.Linear(cfg.audio_hidden, cfg.audio_embed_dim)

    def forward(self, feats):
        if feats.dim() != 3 or feats.shape[1] == 0:
            raise ShapeError(f"expected non-empty (B, T, n_mels) features, got {tuple(feats.shape)}")
        return self.fc2(torch.relu(self.fc1(feats.mean(dim=1))))


class Fusion(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.fc1 = nn.Linear(cfg.visual_feat_dim + cfg.audio_embed_dim + 2, cfg.fused_dim)
        self.fc2 = nn.Linear(cfg.fused_dim, cfg.fused_dim)

    def forward(self, z):
        return self.fc2(torch.relu(self.fc1(z)))


class AVGazeNet(nn.Module):
    BACKBONE = ("visual", "temporal", "audio", "fusion")
    HEADS = ("headpose_head", "gaze_head")

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        self.visual = VisualEncoder(cfg)
        self.temporal = TemporalEncoder(cfg)
        self.audio = AudioEncoder(cfg)
        self.fusion = Fusion(cfg)
        self.headpose_head = nn.Linear(cfg.fused_dim, cfg.headpose_dim)
        self.gaze_head = nn.Linear(cfg.headpose_dim + cfg.fused_dim, cfg.gaze_dim)

    # -- stages ---------------------------------------------------------------

    def encode_frames(self, frames):
        return self.visual(frames)

    def encode_sequence(self, per_frame):
        return self.temporal(per_frame)

    def encode_audio(self, feats):
        return self.audio(feats)

    def fuse(self, z_v, z_a, mask: ModalityMask):
        if not (mask.use_visual or mask.use_audio):
            raise InvalidInputError("at least one modality must be enabled")
        ref = z_v if z_v is not None else z_a
        batch = ref.shape[0]
        if mask.use_visual:
            zv = z_v
        else:
            zv = ref.new_zeros(batch, self.cfg.visual_feat_dim)
        if mask.use_audio:
            za = z_a
        else:
            za = ref.new_zeros(batch, self.cfg.audio_embed_dim)
        bits = ref.new_tensor([float(mask.use_visual), float(mask.use_audio)]).expand(batch, 2)
        return self.fusion(torch.cat([zv, za, bits], dim=-1))

    def predict_headpose(self, z):
        return self.headpose_head(z)

    def predict_gaze(self, h, z):
        return self.gaze_head(torch.cat([h, z], dim=-1))

    def forward(self, frames=None, audio=None, mask: ModalityMask = AV) -> ForwardOutput:
        z_v = z_a = None
        if mask.use_visual:
            if frames is None:
                raise InvalidInputError("visual modality enabled but no frames given")
            z_v = self.encode_sequence(self.encode_frames(frames))
        if mask.use_audio:
            if audio is None:
                raise InvalidInputError("audio modality enabled but no audio features given")
            z_a = self.encode_audio(audio)
        z = self.fuse(z_v, z_a, mask)
        h = self.predict_headpose(z)
        g = self.predict_gaze(h, z)
        return ForwardOutput(h, g, z)

    # -- parameter partition --------------------------------------------------

    def backbone_named_parameters(self):
        for part in self.BACKBONE:
            for name, p in getattr(self, part).named_parameters():
                yield f"{part}.{name}", p

    def head_named_parameters(self):
        for part in self.HEADS:
            for name, p in getattr(self, part).named_parameters():
                yield f"{part}.{name}", p


def build_model(cfg: ModelConfig = ModelConfig(), seed: int = 0, dtype=torch.float32) -> AVGazeNet:
    """Deterministic initialization from ``seed`` without touching the global RNG."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = AVGazeNet(cfg)
    return model.to(dtype)


def param_hash(named_params) -> str:
    """SHA-256 over parameter names, shapes and raw bytes."""
    h = hashlib.sha256()
    for name, p in named_params:
        arr = p.detach().cpu().contiguous().numpy()
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def backbone_hash(model: AVGazeNet) -> str:
    return param_hash(model.backbone_named_parameters())


def frames_to_tensor(frames: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """uint8 (..., H, W, 3) -> float (..., 3, H, W) centered around 0."""
    x = torch.from_numpy(np.ascontiguousarray(frames)).to(dtype) / 255.0 - 0.5
    return x.movedim(-1, -3)


def audio_to_tensor(feats, dtype=torch.float32) -> torch.Tensor:
    """Stack per-sample (T_i, n_mels) arrays, cropping to the shortest T."""
    if isinstance(feats, np.ndarray) and feats.ndim == 3:
        return torch.from_numpy(np.ascontiguousarray(feats)).to(dtype)
    t = min(f.shape[0] for f in feats)
    return torch.from_numpy(np.stack([np.asarray(f)[:t] for f in feats])).to(dtype)


# --- checkpoint container ----------------------------------------------------


@dataclass
class Checkpoint:
    model: AVGazeNet
    seed: int
    label_stats: Optional[dict] = None
    audio_stats: Optional[dict] = None
    extra: dict = field(default_factory=dict)
    optimizer_state: Optional[dict] = None


def _blob_table(named_arrays, offset0=0):
    table, blobs, offset = [], [], offset0
    for name, arr in named_arrays:
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        data = le.tobytes()
        table.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str, "offset": offset,
                      "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    return table, blobs


def save_checkpoint(path, model: AVGazeNet, seed: int, label_stats=None, audio_stats=None,
                    extra=None, optimizer=None) -> Path:
    """Write a self-describing binary checkpoint.

    Layout: magic, u32 version, u64 header length, JSON header, raw blobs.
    Byte-identical for identical inputs (no timestamps, sorted keys).
    """
    path = Path(path)
    arrays = [(f"param.{k}", v.detach().cpu().numpy()) for k, v in model.state_dict().items()]
    opt_meta = None
    if optimizer is not None:
        sd = optimizer.state_dict()
        opt_meta = {"param_groups": sd["param_groups"], "state": {}}
        for idx in sorted(sd["state"]):
            st = sd["state"][idx]
            entry = {}
            for key, val in sorted(st.items()):
                if torch.is_tensor(val) and val.dim() > 0:
                    arrays.append((f"opt.{idx}.{key}", val.detach().cpu().numpy()))
                    entry[key] = "blob"
                else:
                    entry[key] = float(val)
            opt_meta["state"][str(idx)] = entry
    table, blobs = _blob_table(arrays)
    header = {
        "format_version": CKPT_VERSION,
        "model_config": model.cfg.to_json(),
        "config_hash": model.cfg.digest(),
        "dtype": str(next(model.parameters()).dtype),
        "seed": int(seed),
        "label_stats": label_stats,
        "audio_stats": audio_stats,
        "extra": extra or {},
        "optimizer": opt_meta,
        "blobs": table,
    }
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise InvalidInputError(f"{path} is not a checkpoint file")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != CKPT_VERSION:
        raise InvalidInputError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[20:20 + hlen])
    body = raw[20 + hlen:]
    cfg = ModelConfig.from_json(header["model_config"])
    if cfg.digest() != header["config_hash"]:
        raise ConfigError("checkpoint config hash mismatch")
    arrays = {}
    for b in header["blobs"]:
        buf = body[b["offset"]:b["offset"] + b["nbytes"]]
        arrays[b["name"]] = np.frombuffer(buf, dtype=np.dtype(b["dtype"])).reshape(b["shape"]).copy()
    dtype = getattr(torch, header["dtype"].replace("torch.", ""))
    model = AVGazeNet(cfg).to(dtype)
    state = {k[len("param."):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("param.")}
    model.load_state_dict(state, strict=True)
    opt_state = None
    if header.get("optimizer") is not None:
        meta = header["optimizer"]
        st = {}
        for idx, entry in meta["state"].items():
            st[int(idx)] = {
                key: (torch.from_numpy(arrays[f"opt.{idx}.{key}"]) if val == "blob" else torch.tensor(val))
                for key, val in entry.items()
            }
        opt_state = {"state": st, "param_groups": meta["param_groups"]}
    return Checkpoint(model, header["seed"], header.get("label_stats"), header.get("audio_stats"),
                      header.get("extra", {}), opt_state)


@torch.no_grad()
def predict(model: AVGazeNet, frames, audio, mask: ModalityMask = AV, batch_size: int = 64):
    """Batched eval-mode inference; returns numpy (h', g', z')."""
    model.eval()
    dtype = next(model.parameters()).dtype
    n = len(frames) if frames is not None else len(audio)
    hs, gs, zs = [], [], []
    for lo in range(0, n, batch_size):
        sl = slice(lo, min(lo + batch_size, n))
        f = frames_to_tensor(frames[sl], dtype) if mask.use_visual else None
        a = audio_to_tensor(audio[sl], dtype) if mask.use_audio else None
        out = model(f, a, mask)
        hs.append(out.headpose.numpy())
        gs.append(out.gaze.numpy())
        zs.append(out.embedding.numpy())
    return np.concatenate(hs), np.concatenate(gs), np.concatenate(zs)
