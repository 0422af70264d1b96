"""
Objective metrics: EER, speaker centroids and emotion accuracy
==============================================================

Speaker identity is scored two ways. Spk-Cent SIM is the cosine between a
converted utterance's speaker embedding and the unit-normalised mean embedding
of the target speaker over all emotions. EER treats the same embeddings as a
verification task: accept a trial when its score clears a threshold, sweep the
threshold, and report the rate at which false accepts equal false rejects.
"""

import sys
from pathlib import Path

import numpy as np

from emoprefix.evalkit import binomial_ci, eer, speaker_centroids, spk_cent_sim

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))
from oracles import eer_brute_force  # noqa: E402

rng = np.random.default_rng(0)

# EER on a small worked example, against a brute-force walk along the ROC.
g, i = [0.9, 0.8, 0.4], [0.7, 0.3, 0.2]
print(f"genuine {g} impostor {i}: EER {eer(g, i):.4f} (brute force {eer_brute_force(g, i):.4f})")
print("separated lists:", eer([0.9, 0.8], [0.1, 0.2]), " identical lists:", eer([0.3, 0.6], [0.6, 0.3]))

# Overlap grows as the genuine and impostor score distributions move together.
for gap in (2.0, 1.0, 0.5, 0.0):
    gs, im = rng.normal(gap, 1.0, 500), rng.normal(0.0, 1.0, 500)
    print(f"mean gap {gap:.1f}: EER {eer(gs, im):.3f}")

# Centroids: 3 speakers x 10 utterances each; an utterance near its own
# speaker's cluster scores high against its centroid.
means = rng.normal(size=(3, 8)) * 2
emb = np.concatenate([m + rng.normal(size=(10, 8)) for m in means])
ids = np.repeat(np.arange(3), 10)
cent = speaker_centroids(emb, ids)
probe = means[[0, 1, 2]] + rng.normal(size=(3, 8))
print(f"Spk-Cent SIM, right speaker {spk_cent_sim(probe, cent, [0, 1, 2]):.3f} "
      f"vs wrong speaker {spk_cent_sim(probe, cent, [1, 2, 0]):.3f}")

# ECA is a proportion, reported with an exact binomial interval.
k, n = 171, 240
lo, hi = binomial_ci(k, n)
print(f"ECA {k}/{n} = {k / n:.3f}, 95% CI [{lo:.3f}, {hi:.3f}]")
