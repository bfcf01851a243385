# coding: utf-8

# # A synthetic world and its training chunks
#
# The synthetic world renders a face whose nose follows the head and whose
# pupils follow the eyes, with a voice whose formants drift with head yaw.
# Labels come from an oracle with known ground truth.

import tempfile
from pathlib import Path

import numpy as np

from avgaze.data import build_chunk_set, fit_label_norm, load_manifest, select_chunks, window_spread
from avgaze.synthworld import WorldConfig, generate_world, oracle_provider

root = Path(tempfile.mkdtemp(prefix="avgaze_demo_"))
cfg = WorldConfig(seed=2, n_clips=20, frames_per_clip=28)
manifest = generate_world(cfg, root)
entries = load_manifest(manifest)
print(f"{len(entries)} clips in {root}; splits:", {s: sum(e.split == s for e in entries) for s in ("train", "test")})

# Head-pose labels are normalized with training-set statistics.  Each clip is
# cut into 7-frame windows, and only windows where the head barely moves survive.

stats = fit_label_norm([e for e in entries if e.split == "train"])
e = entries[0]
for start in range(0, e.n_frames - 6, 7):
    spread = window_spread(e.pseudo_headpose[start:start + 7], stats)
    print(f"  window at frame {start:2d}: spread {spread:.3f}")
print("kept starts:", [c.start for c in select_chunks(e, stats)])

# The oracle provider can also hand out noisy labels, as an off-the-shelf
# teacher would.

noisy = oracle_provider(cfg, noise=0.05, noise_seed=0)
exact = oracle_provider(cfg)
print("noisy vs exact head-pose at clip00003 frame 10:")
print(np.round(noisy.headpose("clip00003", 10), 3))
print(np.round(exact.headpose("clip00003", 10), 3))

data = build_chunk_set(entries, resolution=32)
print("chunk set:", len(data), "chunks, frames", data.frames.shape, "audio rows", data.audio[0].shape)
