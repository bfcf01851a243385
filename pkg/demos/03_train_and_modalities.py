# coding: utf-8

# # Training with modality dropout, then testing each modality
#
# A single model is trained with randomly dropped modalities, so at test time
# it can run on audio only, video only, or both.  A small world and a few
# epochs keep this to about a minute on a CPU.

import tempfile
from pathlib import Path

from avgaze.evaluation import format_metrics_table, gaze_metrics
from avgaze.model import ModalityMask, ModelConfig, predict
from avgaze.synthworld import WorldConfig, generate_world
from avgaze.training import TrainConfig, train

root = Path(tempfile.mkdtemp(prefix="avgaze_demo_"))
manifest = generate_world(WorldConfig(seed=4, n_clips=60), root / "world")

res = train(manifest, TrainConfig(learning_rate=3e-4, epochs=8, seed=0, modality_drop_prob=0.2),
            ModelConfig(), out_dir=root / "run")
for ep in res.log.epochs:
    print(f"epoch {ep['epoch']}: val gaze {ep['val']['gaze_deg']:.2f} deg, masks {ep['mask_histogram']}")

test = res.data.split("test")
for name in ("audio", "visual", "av"):
    mask = ModalityMask.from_name(name)
    _, g, _ = predict(res.model, test.frames, test.audio, mask)
    print(f"\n{name}:")
    print(format_metrics_table(gaze_metrics(g, test.gaze)), end="")

print("\ncheckpoint:", res.checkpoint)
