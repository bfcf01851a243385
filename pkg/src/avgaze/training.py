"""Joint weakly-supervised training: L = w_hp * MSE(h, h') + w_pg * (1 - cos(g, g'))."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .data import ChunkSet, build_chunk_set, load_manifest
from .errors import ConfigError, InsufficientDataError, NonFiniteLossError
from .geometry import angular_error_deg
from .model import (
    AVGazeNet,
    ModalityMask,
    ModelConfig,
    audio_to_tensor,
    build_model,
    frames_to_tensor,
    load_checkpoint,
    predict,
    save_checkpoint,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 16
    epochs: int = 1
    seed: int = 0
    modality_drop_prob: float = 0.2
    loss_weights: tuple = (1.0, 1.0)  # (w_hp, w_pg); a zero weight disables that loss
    grad_clip_norm: float = 5.0
    modalities: str = "av"  # "av" samples masks with dropout; "visual"/"audio" pin one modality
    log_every: int = 20

    def __post_init__(self):
        object.__setattr__(self, "loss_weights", tuple(float(w) for w in self.loss_weights))
        if not 0.0 <= self.modality_drop_prob <= 0.5:
            raise ConfigError("modality_drop_prob must be in [0, 0.5]")
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.epochs < 0:
            raise ConfigError("learning_rate and batch_size must be positive, epochs >= 0")
        if self.modalities not in ("av", "visual", "audio"):
            raise ConfigError(f"unknown modalities {self.modalities!r}")
        if min(self.loss_weights) < 0 or max(self.loss_weights) == 0:
            raise ConfigError("loss weights must be >= 0 with at least one positive")

    @property
    def use_hp(self) -> bool:
        return self.loss_weights[0] > 0

    @property
    def use_pg(self) -> bool:
        return self.loss_weights[1] > 0

    def to_json(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        return d


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    def write(self, path) -> Path:
        path = Path(path)
        with open(path, "w") as fh:
            for rec in self.steps:
                fh.write(json.dumps({"kind": "step", **rec}, sort_keys=True) + "\n")
            for rec in self.epochs:
                fh.write(json.dumps({"kind": "epoch", **rec}, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "TrainLog":
        out = cls()
        for line in Path(path).read_text().splitlines():
            rec = json.loads(line)
            kind = rec.pop("kind")
            (out.steps if kind == "step" else out.epochs).append(rec)
        return out


def sample_modality_mask(rng: np.random.Generator, drop_prob: float) -> ModalityMask:
    """Drop each modality independently with ``drop_prob``; redraw if both drop."""
    if not 0.0 <= drop_prob <= 0.5:
        raise ConfigError("drop_prob must be in [0, 0.5]")
    while True:
        drop_audio = rng.random() < drop_prob
        drop_visual = rng.random() < drop_prob
        if not (drop_audio and drop_visual):
            return ModalityMask(use_visual=not drop_visual, use_audio=not drop_audio)


def headpose_mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return torch.mean((pred - target) ** 2)


def gaze_cosine_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    p = pred / pred.norm(dim=-1, keepdim=True).clamp_min(eps)
    t = target / target.norm(dim=-1, keepdim=True).clamp_min(eps)
    return torch.mean(1.0 - (p * t).sum(dim=-1))


def make_batch(data: ChunkSet, idx, dtype=torch.float32) -> dict:
    idx = np.asarray(idx)
    return {
        "frames": frames_to_tensor(data.frames[idx], dtype),
        "audio": audio_to_tensor([data.audio[i] for i in idx], dtype),
        "headpose": torch.from_numpy(data.headpose_norm[idx]).to(dtype),
        "gaze": torch.from_numpy(data.gaze[idx]).to(dtype),
        "ids": [f"{data.clip_ids[i]}:{data.starts[i]}" for i in idx],
    }


def compute_losses(model: AVGazeNet, batch: dict, mask: ModalityMask, cfg: TrainConfig):
    out = model(batch["frames"] if mask.use_visual else None,
                batch["audio"] if mask.use_audio else None, mask)
    w_hp, w_pg = cfg.loss_weights
    l_hp = headpose_mse(out.headpose, batch["headpose"]) if cfg.use_hp else None
    l_pg = gaze_cosine_loss(out.gaze, batch["gaze"]) if cfg.use_pg else None
    total = 0.0
    if l_hp is not None:
        total = total + w_hp * l_hp
    if l_pg is not None:
        total = total + w_pg * l_pg
    return total, l_hp, l_pg


def train_step(model: AVGazeNet, optimizer: torch.optim.Optimizer, batch: dict, cfg: TrainConfig,
               mask: ModalityMask, step: int = 0) -> dict:
    """One clipped adaptive-moment update; returns the step record for the log."""
    if len(batch["ids"]) == 0:
        raise InsufficientDataError("empty batch")
    model.train()
    optimizer.zero_grad(set_to_none=True)
    total, l_hp, l_pg = compute_losses(model, batch, mask, cfg)
    if not torch.isfinite(total):
        raise NonFiniteLossError(
            f"non-finite loss at step {step}",
            snapshot={"step": step, "mask": mask.name, "batch_ids": batch["ids"],
                      "l_hp": None if l_hp is None else float(l_hp.detach()),
                      "l_pg": None if l_pg is None else float(l_pg.detach())},
        )
    total.backward()
    params = [p for p in model.parameters() if p.grad is not None]
    torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip_norm)
    optimizer.step()
    w_hp, w_pg = cfg.loss_weights
    rec_hp = None if l_hp is None else float(l_hp.detach())
    rec_pg = None if l_pg is None else float(l_pg.detach())
    return {
        "step": step,
        "l_hp": rec_hp,
        "l_pg": rec_pg,
        "l_total": w_hp * (rec_hp or 0.0) + w_pg * (rec_pg or 0.0),
        "l_total_graph": float(total.detach()),
        "mask": mask.name,
    }


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1000003, epoch])


def _mask_for_step(cfg: TrainConfig, rng) -> ModalityMask:
    if cfg.modalities == "av":
        return sample_modality_mask(rng, cfg.modality_drop_prob)
    return ModalityMask.from_name(cfg.modalities)


def make_optimizer(model: AVGazeNet, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)


def evaluate_split(model: AVGazeNet, data: ChunkSet, mask: ModalityMask) -> dict:
    h, g, _ = predict(model, data.frames, data.audio, mask)
    return {
        "gaze_deg": float(np.mean(angular_error_deg(g, data.gaze))),
        "hp_mse": float(np.mean((h - data.headpose_norm) ** 2)),
    }


@dataclass
class TrainResult:
    model: AVGazeNet
    log: TrainLog
    checkpoint: Optional[Path]
    data: ChunkSet


def _stats_json(data: ChunkSet):
    return data.label_stats.to_json(), {"mean": data.audio_stats.mean.tolist(), "std": data.audio_stats.std.tolist()}


def train(manifest, cfg: TrainConfig = TrainConfig(), model_cfg: ModelConfig = ModelConfig(),
          out_dir=None, resume_from=None, data: Optional[ChunkSet] = None) -> TrainResult:
    """Train on the training split of ``manifest`` (a path, entry list, or prebuilt ``data``).

    Writes ``checkpoints/epoch_XXXX.ckpt`` after each epoch, ``checkpoint.ckpt``
    and ``train_log.jsonl`` to ``out_dir`` when given.  Shuffling and modality
    masks are drawn from an RNG keyed on (seed, epoch), so resuming from any
    epoch checkpoint continues exactly as an uninterrupted run.
    """
    if data is None:
        entries = load_manifest(manifest) if isinstance(manifest, (str, Path)) else list(manifest)
        try:
            data = build_chunk_set(entries, resolution=model_cfg.input_resolution)
        except InsufficientDataError as exc:
            raise ConfigError(f"no trainable chunks: {exc}") from exc
    train_idx = np.flatnonzero(data.splits == "train")
    if train_idx.size == 0:
        raise ConfigError("manifest yields no training chunks")
    val = data.split("test")

    start_epoch = 0
    tlog = TrainLog()
    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        model = ck.model
        if ck.seed != cfg.seed:
            raise ConfigError(f"checkpoint seed {ck.seed} differs from config seed {cfg.seed}")
        optimizer = make_optimizer(model, cfg)
        if ck.optimizer_state is not None:
            optimizer.load_state_dict(ck.optimizer_state)
        start_epoch = int(ck.extra.get("epoch", 0))
        if out_dir is not None and (Path(out_dir) / "train_log.jsonl").exists():
            prev = TrainLog.read(Path(out_dir) / "train_log.jsonl")
            tlog.steps = [s for s in prev.steps if s["epoch"] < start_epoch]
            tlog.epochs = [e for e in prev.epochs if e["epoch"] < start_epoch]
    else:
        model = build_model(model_cfg, seed=cfg.seed)
        optimizer = make_optimizer(model, cfg)

    out = None
    if out_dir is not None:
        out = Path(out_dir)
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    label_json, audio_json = _stats_json(data)

    def checkpoint(path, epoch):
        return save_checkpoint(path, model, cfg.seed, label_json, audio_json,
                               extra={"epoch": epoch, "train_config": cfg.to_json()}, optimizer=optimizer)

    step = len(tlog.steps)
    for epoch in range(start_epoch, cfg.epochs):
        rng = _epoch_rng(cfg.seed, epoch)
        order = train_idx[rng.permutation(train_idx.size)]
        hist = Counter()
        for lo in range(0, order.size, cfg.batch_size):
            mask = _mask_for_step(cfg, rng)
            hist[mask.name] += 1
            rec = train_step(model, optimizer, make_batch(data, order[lo:lo + cfg.batch_size]), cfg, mask, step)
            rec["epoch"] = epoch
            tlog.steps.append(rec)
            if cfg.log_every and step % cfg.log_every == 0:
                log.info("epoch %d step %d  l_hp=%s l_pg=%s total=%.4f [%s]", epoch, step,
                         _fmt(rec["l_hp"]), _fmt(rec["l_pg"]), rec["l_total"], rec["mask"])
            step += 1
        ep = {"epoch": epoch, "mask_histogram": dict(sorted(hist.items()))}
        if len(val):
            ep["val"] = evaluate_split(model, val, _eval_mask(cfg))
        tlog.epochs.append(ep)
        if out is not None:
            checkpoint(out / "checkpoints" / f"epoch_{epoch + 1:04d}.ckpt", epoch + 1)

    final = None
    if out is not None:
        final = checkpoint(out / "checkpoint.ckpt", max(cfg.epochs, start_epoch))
        tlog.write(out / "train_log.jsonl")
    return TrainResult(model, tlog, final, data)


def _eval_mask(cfg: TrainConfig) -> ModalityMask:
    return ModalityMask.from_name(cfg.modalities)


def _fmt(x):
    return "absent" if x is None else f"{x:.4f}"
