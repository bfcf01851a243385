"""``avgaze`` command line: synth, features, chunks, train, probe, knn, eval, ablate.

Options resolve as built-in defaults < ``--config`` file (``key = value``
lines) < explicit flags.  Every command writes ``run_config.json`` and a
``summary.json`` into its ``--out`` directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .audio_features import FilterbankConfig, NormStats, extract_features, fit_norm_stats, read_wav, write_features
from .data import LabelNormStats, build_chunk_set, fit_label_norm, load_manifest, select_chunks
from .errors import AVGazeError
from .evaluation import (
    ablation_grid,
    extract_embeddings,
    format_ablation_table,
    format_metrics_table,
    gaze_metrics,
    linear_probe,
    metrics_json,
    weighted_knn,
    write_predictions_csv,
)
from .model import ModalityMask, ModelConfig, load_checkpoint, predict
from .synthworld import WorldConfig, generate_world
from .training import TrainConfig, train

log = logging.getLogger("avgaze")


class CommandError(Exception):
    """A user-facing failure; the message is printed as one line."""


DEFAULTS = {
    "seed": 0,
    "modality": "av",
    "force": False,
    # synth
    "clips": 20,
    "frames": 21,
    "image_size": 64,
    "label_noise": 0.0,
    # chunks
    "std_threshold": 0.1,
    # train / ablate
    "epochs": 5,
    "lr": 3e-4,
    "batch_size": 16,
    "drop_prob": 0.2,
    "w_hp": 1.0,
    "w_pg": 1.0,
    "clip_norm": 5.0,
    "backbone": "small",
    # probe / knn
    "task": "gaze",
    "probe_epochs": 100,
    "k": 20,
    "temperature": 0.07,
}


def read_config_file(path) -> dict:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CommandError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _coerce(key, value):
    default = DEFAULTS.get(key)
    if isinstance(default, bool):
        return str(value).lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def resolve(args: argparse.Namespace) -> dict:
    cfg = {k: v for k, v in DEFAULTS.items()}
    if getattr(args, "config", None):
        for k, v in read_config_file(args.config).items():
            cfg[k] = _coerce(k, v)
    for k, v in vars(args).items():
        if v is not None and k not in ("func", "config"):
            cfg[k] = v
    return cfg


def _positive_int(s):
    v = int(s)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {s}")
    return v


def _prepare_out(opts, allow_existing=True) -> Path:
    out = Path(opts["out"])
    if out.exists() and any(out.iterdir()) and not allow_existing and not opts.get("force"):
        raise CommandError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    record = {"command": opts["command"], "version": __version__,
              "options": {k: v for k, v in sorted(opts.items())}}
    (out / "run_config.json").write_text(json.dumps(record, indent=1, sort_keys=True, default=str))
    return out


def _write_summary(out: Path, summary: dict) -> None:
    summary = {"version": __version__, **summary}
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True, default=str))
    print(json.dumps(summary, sort_keys=True, default=str))


def _require(path, what, producer) -> Path:
    if path is None:
        raise CommandError(f"no {what} given; produce one with `avgaze {producer}`")
    p = Path(path)
    if not p.exists():
        raise CommandError(f"{what} not found: {p}; produce it with `avgaze {producer}`")
    return p


def _model_cfg(opts) -> ModelConfig:
    return ModelConfig(visual_backbone_depth=opts["backbone"])


def _data_for_checkpoint(opts):
    ckpt_path = _require(opts.get("checkpoint"), "checkpoint", "train")
    manifest = _require(opts.get("manifest"), "manifest", "synth")
    ck = load_checkpoint(ckpt_path)
    label_stats = LabelNormStats.from_json(ck.label_stats) if ck.label_stats else None
    audio_stats = None
    if ck.audio_stats:
        audio_stats = NormStats(np.asarray(ck.audio_stats["mean"]), np.asarray(ck.audio_stats["std"]))
    data = build_chunk_set(load_manifest(manifest), resolution=ck.model.cfg.input_resolution,
                           label_stats=label_stats, audio_stats=audio_stats,
                           std_threshold=opts["std_threshold"])
    return ck, data


# --- commands ----------------------------------------------------------------


def cmd_synth(opts):
    out = _prepare_out(opts, allow_existing=False)
    cfg = WorldConfig(seed=opts["seed"], n_clips=opts["clips"], frames_per_clip=opts["frames"],
                      image_size=opts["image_size"], label_noise=opts["label_noise"])
    manifest = generate_world(cfg, out)
    _write_summary(out, {"manifest": str(manifest), "world": asdict(cfg)})
    print(manifest)


def cmd_features(opts):
    entries = load_manifest(_require(opts.get("manifest"), "manifest", "synth"))
    out = _prepare_out(opts)
    fb = FilterbankConfig()
    feats = {}
    for e in entries:
        clip = read_wav(e.audio_path)
        f = extract_features(clip, fb)
        write_features(out / f"{e.clip_id}.fbk", f, clip.sample_rate, fb)
        feats[e.clip_id] = (f, e.split)
    stats = fit_norm_stats([f for f, s in feats.values() if s == "train"] or [f for f, _ in feats.values()])
    (out / "norm_stats.json").write_text(json.dumps({"mean": stats.mean.tolist(), "std": stats.std.tolist()},
                                                    sort_keys=True))
    _write_summary(out, {"clips": len(feats), "n_filters": fb.n_filters, "config_hash": fb.digest(),
                         "frames_total": int(sum(f.n_frames for f, _ in feats.values()))})


def cmd_chunks(opts):
    entries = load_manifest(_require(opts.get("manifest"), "manifest", "synth"))
    out = _prepare_out(opts)
    stats = fit_label_norm([e for e in entries if e.split == "train"] or entries)
    n_windows, rows = 0, []
    for e in entries:
        n_windows += max(e.n_frames // 7, 0)
        for ch in select_chunks(e, stats, std_threshold=opts["std_threshold"]):
            rows.append({"clip_id": ch.clip_id, "start": ch.start, "center_frame": ch.center_frame,
                         "split": e.split})
    with open(out / "chunks.jsonl", "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    (out / "label_stats.json").write_text(json.dumps(stats.to_json(), sort_keys=True))
    _write_summary(out, {"chunks": len(rows), "windows": n_windows,
                         "pass_rate": len(rows) / n_windows if n_windows else None})


def _train_cfg(opts) -> TrainConfig:
    return TrainConfig(learning_rate=opts["lr"], batch_size=opts["batch_size"], epochs=opts["epochs"],
                       seed=opts["seed"], modality_drop_prob=opts["drop_prob"],
                       loss_weights=(opts["w_hp"], opts["w_pg"]), grad_clip_norm=opts["clip_norm"],
                       modalities=opts["modality"])


def cmd_train(opts):
    manifest = _require(opts.get("manifest"), "manifest", "synth")
    out = _prepare_out(opts)
    resume = opts.get("resume")
    if resume is not None:
        _require(resume, "resume checkpoint", "train")
    res = train(manifest, _train_cfg(opts), _model_cfg(opts), out_dir=out, resume_from=resume)
    last = res.log.epochs[-1] if res.log.epochs else {}
    _write_summary(out, {"checkpoint": str(res.checkpoint), "steps": len(res.log.steps),
                         "train_chunks": int(np.sum(res.data.splits == "train")),
                         "final_epoch": last})


def _embedding_pair(opts):
    ck, data = _data_for_checkpoint(opts)
    mask = ModalityMask.from_name(opts["modality"])
    tr, te = data.split("train"), data.split("test")
    if len(tr) == 0 or len(te) == 0:
        raise CommandError("manifest needs both train and test splits for probing")
    return ck, extract_embeddings(ck.model, tr, mask), extract_embeddings(ck.model, te, mask)


def cmd_probe(opts):
    ck, emb_tr, emb_te = _embedding_pair(opts)
    out = _prepare_out(opts)
    res = linear_probe(emb_tr, emb_te, opts["task"], epochs=opts["probe_epochs"], seed=opts["seed"])
    metrics = {"task": opts["task"], "modality": opts["modality"], res.metric_name: res.metric,
               "n_train": len(emb_tr), "n_test": len(emb_te), "backbone_hash": emb_te.backbone_hash}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True))
    _write_summary(out, metrics)


def cmd_knn(opts):
    ck, emb_tr, emb_te = _embedding_pair(opts)
    out = _prepare_out(opts)
    _, acc = weighted_knn(emb_tr.embeddings, emb_tr.zones, emb_te.embeddings, emb_te.zones,
                          k=opts["k"], temperature=opts["temperature"])
    metrics = {"task": "zone", "modality": opts["modality"], "accuracy_pct": acc, "k": opts["k"],
               "temperature": opts["temperature"], "backbone_hash": emb_te.backbone_hash}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True))
    _write_summary(out, metrics)


def cmd_eval(opts):
    ck, data = _data_for_checkpoint(opts)
    out = _prepare_out(opts)
    test = data.split("test")
    if len(test) == 0:
        test = data
    mask = ModalityMask.from_name(opts["modality"])
    _, g, _ = predict(ck.model, test.frames, test.audio, mask)
    m = gaze_metrics(g, test.gaze)
    doc = {"modality": mask.name, "gaze": metrics_json(m)}
    (out / "metrics.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    (out / "metrics.txt").write_text(format_metrics_table(m))
    write_predictions_csv(out / "predictions.csv", test.sample_ids(), g, test.gaze, m)
    print(format_metrics_table(m), end="")
    _write_summary(out, doc)


def cmd_ablate(opts):
    manifest = _require(opts.get("manifest"), "manifest", "synth")
    out = _prepare_out(opts)
    rows = ablation_grid(manifest, _train_cfg(opts), _model_cfg(opts), out_dir=out,
                         probe_epochs=opts["probe_epochs"])
    print(format_ablation_table(rows), end="")
    _write_summary(out, {"rows": len(rows), "failed": [r.name for r in rows if r.error]})


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value file; explicit flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--modality", choices=["audio", "visual", "av"])
    common.add_argument("--force", action="store_true", default=None)
    common.add_argument("-v", "--verbose", action="store_true", default=None)

    p = argparse.ArgumentParser(prog="avgaze", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic audio-visual world")
    s.add_argument("--clips", type=_positive_int)
    s.add_argument("--frames", type=_positive_int)
    s.add_argument("--image-size", dest="image_size", type=_positive_int)
    s.add_argument("--label-noise", dest="label_noise", type=float)
    s.set_defaults(func=cmd_synth)

    def with_manifest(name, func, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.add_argument("--manifest")
        sp.add_argument("--std-threshold", dest="std_threshold", type=float)
        sp.set_defaults(func=func)
        return sp

    with_manifest("features", cmd_features, "extract log mel-filterbank features")
    with_manifest("chunks", cmd_chunks, "select stable 7-frame chunks")

    def add_train_flags(sp):
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--batch-size", dest="batch_size", type=_positive_int)
        sp.add_argument("--drop-prob", dest="drop_prob", type=float)
        sp.add_argument("--w-hp", dest="w_hp", type=float)
        sp.add_argument("--w-pg", dest="w_pg", type=float)
        sp.add_argument("--clip-norm", dest="clip_norm", type=float)
        sp.add_argument("--backbone", choices=["small", "full"])

    t = with_manifest("train", cmd_train, "joint pseudo-label training")
    add_train_flags(t)
    t.add_argument("--resume", help="epoch checkpoint to continue from")

    for name, func, help_ in (("probe", cmd_probe, "linear probe on the frozen backbone"),
                              ("knn", cmd_knn, "weighted k-NN zone classification"),
                              ("eval", cmd_eval, "gaze angular errors with subsets")):
        sp = with_manifest(name, func, help_)
        sp.add_argument("--checkpoint")
        if name == "probe":
            sp.add_argument("--task", choices=["gaze", "headpose", "zone"])
            sp.add_argument("--probe-epochs", dest="probe_epochs", type=_positive_int)
        if name == "knn":
            sp.add_argument("--k", type=_positive_int)
            sp.add_argument("--temperature", type=float)

    a = with_manifest("ablate", cmd_ablate, "train and evaluate the five PG/HP/Audio configurations")
    add_train_flags(a)
    a.add_argument("--probe-epochs", dest="probe_epochs", type=_positive_int)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        opts = resolve(args)
        opts["command"] = args.command
        args.func(opts)
    except (CommandError, AVGazeError, FileNotFoundError) as exc:
        print(f"avgaze {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
