# coding: utf-8

# # Log mel filterbank features
#
# The audio branch sees speech as 40 log mel energies every 5 ms.  Here we
# push a few synthetic signals through the front-end and look at what comes out.

import numpy as np

from avgaze.audio_features import (AudioClip, FilterbankConfig, apply_norm, extract_features,
                                   fit_norm_stats, mel_filter_centers)

sr = 16000
cfg = FilterbankConfig()
centers = mel_filter_centers(cfg, sr)
print("filter centers (Hz), first and last five:")
print(np.round(centers[:5]), np.round(centers[-5:]))

# A pure tone lands in the filter whose center is nearest to it.

t = np.arange(sr // 2) / sr
for f0 in (300.0, 1000.0, 3000.0):
    feats = extract_features(AudioClip(np.sin(2 * np.pi * f0 * t), sr), cfg)
    j = int(np.argmax(feats.values.mean(axis=0)))
    print(f"{f0:6.0f} Hz tone -> filter {j:2d} (center {centers[j]:.0f} Hz), {feats.n_frames} frames")

# Doubling the amplitude adds log(4) to every coefficient, since the
# energies are squared magnitudes.

x = np.random.default_rng(0).normal(scale=0.1, size=sr // 2)
a = extract_features(AudioClip(x, sr), cfg).values
b = extract_features(AudioClip(2 * x, sr), cfg).values
print("gain shift:", float(np.mean(b - a)), "vs log 4 =", np.log(4))

# Corpus normalization: per-coefficient z-scores fitted on training clips.

rng = np.random.default_rng(1)
corpus = [extract_features(AudioClip(rng.normal(scale=s, size=sr), sr), cfg) for s in (0.05, 0.2, 1.0)]
stats = fit_norm_stats(corpus)
z = np.concatenate([apply_norm(f, stats).values for f in corpus])
print("after normalization: max |mean| %.1e, max |var - 1| %.1e"
      % (np.abs(z.mean(axis=0)).max(), np.abs(z.var(axis=0) - 1).max()))
