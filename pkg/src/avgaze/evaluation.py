"""Frozen-backbone evaluation: embeddings, linear probing, weighted k-NN,
Gaze360-style subset errors and the PG / HP / Audio ablation grid."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
import torch.nn.functional as F

from .data import ChunkSet, build_chunk_set, load_manifest
from .errors import AVGazeError, InsufficientDataError, InvalidInputError
from .geometry import angular_error_deg, frontal_mask
from .model import AVGazeNet, ModalityMask, ModelConfig, backbone_hash, load_checkpoint, predict
from .training import TrainConfig, train

log = logging.getLogger(__name__)

N_ZONES = 9
FRONT_180_DEG = 90.0
FRONT_FACING_DEG = 20.0


class FrozenBackboneViolation(AVGazeError, RuntimeError):
    pass


class DegenerateTaskError(AVGazeError, ValueError):
    pass


@dataclass
class EmbeddingSet:
    embeddings: np.ndarray
    gaze: np.ndarray
    headpose: np.ndarray  # normalized label space
    zones: np.ndarray
    sample_ids: list
    modality: str
    backbone_hash: str = ""
    skipped: list = field(default_factory=list)

    def __len__(self):
        return self.embeddings.shape[0]

    def labels(self, task: str) -> np.ndarray:
        return {"gaze": self.gaze, "headpose": self.headpose, "zone": self.zones}[task]


@dataclass
class ProbeHead:
    task: str
    weight: np.ndarray  # (out, D), acting on standardized embeddings
    bias: np.ndarray
    feat_mean: np.ndarray
    feat_std: np.ndarray

    def __call__(self, emb: np.ndarray) -> np.ndarray:
        x = (np.asarray(emb, dtype=np.float64) - self.feat_mean) / self.feat_std
        return x @ self.weight.T + self.bias


@dataclass
class ProbeResult:
    head: ProbeHead
    metric: float
    metric_name: str
    predictions: np.ndarray


def _as_model(model_or_ckpt) -> AVGazeNet:
    if isinstance(model_or_ckpt, AVGazeNet):
        return model_or_ckpt
    return load_checkpoint(model_or_ckpt).model


def extract_embeddings(model_or_ckpt: Union[AVGazeNet, str, Path], data: ChunkSet,
                       mask: ModalityMask) -> EmbeddingSet:
    """z' for every sample under ``mask``; the backbone hash must not change."""
    model = _as_model(model_or_ckpt)
    before = backbone_hash(model)
    keep = np.ones(len(data), dtype=bool)
    if mask.use_audio:
        keep &= np.array([a.shape[0] > 0 for a in data.audio], dtype=bool)
    skipped = [sid for sid, k in zip(data.sample_ids(), keep) if not k]
    if skipped:
        log.warning("skipping %d samples lacking data for modality %s", len(skipped), mask.name)
        data = data.subset(np.flatnonzero(keep))
    if len(data) == 0:
        raise InsufficientDataError(f"no samples usable under modality {mask.name}")
    _, _, z = predict(model, data.frames, data.audio, mask)
    after = backbone_hash(model)
    if before != after:
        raise FrozenBackboneViolation("backbone parameters changed during embedding extraction")
    return EmbeddingSet(z.astype(np.float64), data.gaze.copy(), data.headpose_norm.copy(), data.zones.copy(),
                        data.sample_ids(), mask.name, after, skipped)


def _probe_loss(task, out, y):
    if task == "gaze":
        return torch.mean(1.0 - F.cosine_similarity(out, y, dim=-1, eps=1e-12))
    if task == "headpose":
        return torch.mean((out - y) ** 2)
    return F.cross_entropy(out, y)


def probe_metric(task: str, pred: np.ndarray, y: np.ndarray) -> tuple:
    if task == "gaze":
        return float(np.mean(angular_error_deg(pred, y))), "mean_angular_error_deg"
    if task == "headpose":
        return float(np.mean((pred - y) ** 2)), "mse"
    acc = 100.0 * float(np.mean(np.argmax(pred, axis=1) + 1 == y))
    return acc, "accuracy_pct"


def linear_probe(train_set: EmbeddingSet, test_set: EmbeddingSet, task: str = "gaze", epochs: int = 100,
                 lr: float = 1e-2, batch_size: int = 64, seed: int = 0) -> ProbeResult:
    """Fit one linear map on frozen embeddings and score it on ``test_set``.

    Loss per task: cosine (gaze), MSE (head-pose), cross-entropy over the 9
    zones (labels 1..9).  Metric: mean angular error in degrees, MSE, or
    accuracy in percent.
    """
    if task not in ("gaze", "headpose", "zone"):
        raise InvalidInputError(f"unknown task {task!r}")
    overlap = set(train_set.sample_ids) & set(test_set.sample_ids)
    if overlap:
        raise InvalidInputError(f"{len(overlap)} samples appear in both train and test sets")
    x = np.asarray(train_set.embeddings, dtype=np.float64)
    y = train_set.labels(task)
    if len(x) == 0:
        raise InsufficientDataError("empty probe training set")
    if task == "zone":
        if np.unique(y).size < 2:
            raise DegenerateTaskError("zone probe needs at least two classes in the training set")
        if y.min() < 1 or y.max() > N_ZONES:
            raise InvalidInputError("zone labels must lie in 1..9")
        out_dim = N_ZONES
        yt = torch.from_numpy(np.asarray(y) - 1).long()
    else:
        out_dim = y.shape[1]
        yt = torch.from_numpy(np.asarray(y, dtype=np.float64))
    mean = x.mean(axis=0)
    std = np.maximum(x.std(axis=0), 1e-8)
    xt = torch.from_numpy((x - mean) / std)

    gen = torch.Generator().manual_seed(seed)
    lin = torch.nn.Linear(x.shape[1], out_dim).double()
    with torch.no_grad():
        lin.weight.copy_(torch.randn(lin.weight.shape, generator=gen, dtype=torch.float64) * 0.01)
        lin.bias.zero_()
    opt = torch.optim.Adam(lin.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    n = len(x)
    for _ in range(epochs):
        order = torch.from_numpy(rng.permutation(n))
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            opt.zero_grad()
            _probe_loss(task, lin(xt[idx]), yt[idx]).backward()
            opt.step()
    head = ProbeHead(task, lin.weight.detach().numpy().copy(), lin.bias.detach().numpy().copy(), mean, std)
    pred = head(test_set.embeddings)
    metric, name = probe_metric(task, pred, test_set.labels(task))
    return ProbeResult(head, metric, name, pred)


def weighted_knn(train_emb, train_labels, test_emb, test_labels=None, k: int = 20, temperature: float = 0.07,
                 uniform: bool = False):
    """Cosine-similarity k-NN with exp(sim / temperature) votes.

    Ties between classes go to the lowest class id.  ``uniform=True`` gives
    every neighbor one vote.  Returns ``(predictions, accuracy_pct or None)``.
    """
    train_emb = np.asarray(train_emb, dtype=np.float64)
    test_emb = np.atleast_2d(np.asarray(test_emb, dtype=np.float64))
    train_labels = np.asarray(train_labels)
    if train_emb.shape[0] == 0:
        raise InsufficientDataError("weighted k-NN needs a non-empty training set")
    k = min(k, train_emb.shape[0])
    a = train_emb / np.maximum(np.linalg.norm(train_emb, axis=1, keepdims=True), 1e-12)
    b = test_emb / np.maximum(np.linalg.norm(test_emb, axis=1, keepdims=True), 1e-12)
    sim = b @ a.T
    nn_idx = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    classes = np.unique(train_labels)
    onehot = (train_labels[nn_idx][..., None] == classes[None, None, :]).astype(np.float64)
    if uniform:
        w = np.ones(nn_idx.shape)
    else:
        s = np.take_along_axis(sim, nn_idx, axis=1)
        w = np.exp((s - s.max(axis=1, keepdims=True)) / temperature)  # shift keeps exp finite
    scores = np.einsum("nk,nkc->nc", w, onehot)
    pred = classes[np.argmax(scores, axis=1)]
    acc = None
    if test_labels is not None:
        acc = 100.0 * float(np.mean(pred == np.asarray(test_labels)))
    return pred, acc


def gaze_metrics(preds, gts) -> dict:
    """Mean angular error overall and on the Front 180 / Front Facing subsets.

    A subset with no samples is reported as None (absent), never as 0.
    """
    preds = np.atleast_2d(np.asarray(preds, dtype=np.float64))
    gts = np.atleast_2d(np.asarray(gts, dtype=np.float64))
    if preds.shape != gts.shape:
        raise InvalidInputError(f"prediction/label shape mismatch {preds.shape} vs {gts.shape}")
    err = np.atleast_1d(angular_error_deg(preds, gts))
    m180 = frontal_mask(gts, FRONT_180_DEG)
    m20 = frontal_mask(gts, FRONT_FACING_DEG)

    def mean(mask):
        return float(err[mask].mean()) if mask.any() else None

    return {
        "all_360": float(err.mean()),
        "front_180": mean(m180),
        "front_facing": mean(m20),
        "counts": {"all_360": int(err.size), "front_180": int(m180.sum()), "front_facing": int(m20.sum())},
        "per_sample": err,
        "masks": {"front_180": m180, "front_facing": m20},
    }


def metrics_json(m: dict) -> dict:
    """Drop per-sample arrays for serialization."""
    return {k: v for k, v in m.items() if k not in ("per_sample", "masks")}


def write_predictions_csv(path, sample_ids, preds, gts, metrics: dict) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "pred_x", "pred_y", "pred_z", "gt_x", "gt_y", "gt_z", "error_deg",
                    "front_180", "front_facing"])
        for i, sid in enumerate(sample_ids):
            w.writerow([sid, *(f"{v:.6f}" for v in preds[i]), *(f"{v:.6f}" for v in gts[i]),
                        f"{metrics['per_sample'][i]:.6f}", int(metrics["masks"]["front_180"][i]),
                        int(metrics["masks"]["front_facing"][i])])
    return path


# --- ablation grid -----------------------------------------------------------


@dataclass(frozen=True)
class AblationCell:
    name: str
    pg: bool
    hp: bool
    audio: bool

    @property
    def modality(self) -> str:
        if not self.audio:
            return "visual"
        return "av" if (self.pg or self.hp) else "audio"

    def loss_weights(self, base) -> tuple:
        # the Audio-only row has no label flag of its own; it trains on both losses
        if not (self.pg or self.hp):
            return tuple(base)
        return (base[0] if self.hp else 0.0, base[1] if self.pg else 0.0)


ABLATION_CELLS = (
    AblationCell("PG", pg=True, hp=False, audio=False),
    AblationCell("HP", pg=False, hp=True, audio=False),
    AblationCell("Audio", pg=False, hp=False, audio=True),
    AblationCell("PG+HP", pg=True, hp=True, audio=False),
    AblationCell("PG+HP+Audio", pg=True, hp=True, audio=True),
)


@dataclass
class AblationRow:
    name: str
    pg: bool
    hp: bool
    audio: bool
    train_modalities: str
    test_modality: str
    loss_weights: tuple
    gaze_error_deg: Optional[float] = None  # linear probe on frozen z'
    head_gaze_error_deg: Optional[float] = None  # the trained gaze head itself
    error: Optional[str] = None


def ablation_grid(manifest, base_cfg: TrainConfig = TrainConfig(), model_cfg: ModelConfig = ModelConfig(),
                  data: Optional[ChunkSet] = None, out_dir=None, probe_epochs: int = 100) -> list:
    """Train and evaluate the five PG / HP / Audio configurations.

    Rows without Audio train and test on the visual stream only; the
    Audio-only row drops vision at train and test time (both losses on, since
    something must supervise it); the full row trains with modality dropout
    and is tested audio-visually.  Gaze error is measured by a linear probe
    on the frozen embedding so that rows trained without the gaze loss are
    comparable.  A failing cell is recorded and the rest still run.
    """
    if data is None:
        entries = load_manifest(manifest) if isinstance(manifest, (str, Path)) else list(manifest)
        data = build_chunk_set(entries, resolution=model_cfg.input_resolution)
    train_part, test_part = data.split("train"), data.split("test")
    rows = []
    for cell in ABLATION_CELLS:
        weights = cell.loss_weights(base_cfg.loss_weights)
        row = AblationRow(cell.name, cell.pg, cell.hp, cell.audio, cell.modality, cell.modality, weights)
        try:
            cfg = replace(base_cfg, loss_weights=weights, modalities=cell.modality)
            cell_dir = None if out_dir is None else Path(out_dir) / cell.name.replace("+", "_")
            res = train(None, cfg, model_cfg, out_dir=cell_dir, data=data)
            mask = ModalityMask.from_name(cell.modality)
            emb_tr = extract_embeddings(res.model, train_part, mask)
            emb_te = extract_embeddings(res.model, test_part, mask)
            probe = linear_probe(emb_tr, emb_te, "gaze", epochs=probe_epochs, seed=base_cfg.seed)
            row.gaze_error_deg = probe.metric
            _, g, _ = predict(res.model, test_part.frames, test_part.audio, mask)
            row.head_gaze_error_deg = float(np.mean(angular_error_deg(g, test_part.gaze)))
        except Exception as exc:  # noqa: BLE001 - one failed cell must not sink the grid
            log.exception("ablation cell %s failed", cell.name)
            row.error = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.json").write_text(json.dumps([asdict(r) for r in rows], indent=1, sort_keys=True))
        (out / "ablation.txt").write_text(format_ablation_table(rows))
    return rows


def _cell(v):
    return "absent" if v is None else f"{v:.2f}"


def format_ablation_table(rows) -> str:
    lines = [f"{'PG':^4}|{'HP':^4}|{'Audio':^7}|| {'GE (LP)':>8} | {'GE (head)':>9} | note"]
    lines.append("-" * len(lines[0]))
    for r in rows:
        mark = lambda b: "x" if b else " "  # noqa: E731
        lines.append(f"{mark(r.pg):^4}|{mark(r.hp):^4}|{mark(r.audio):^7}|| {_cell(r.gaze_error_deg):>8} | "
                     f"{_cell(r.head_gaze_error_deg):>9} | {r.name}{'  ERROR: ' + r.error if r.error else ''}")
    return "\n".join(lines) + "\n"


def format_metrics_table(m: dict) -> str:
    names = [("all_360", "All 360"), ("front_180", "Front 180"), ("front_facing", "Front Facing")]
    head = " | ".join(f"{label:>12}" for _, label in names)
    vals = " | ".join(f"{_cell(m[key]):>12}" for key, _ in names)
    counts = " | ".join(f"{'n=' + str(m['counts'][key]):>12}" for key, _ in names)
    return f"{head}\n{vals}\n{counts}\n"
