"""
Building the emotion-aware prefix from a reference recording
============================================================

The prefix encoder turns a reference mel into k vectors:

1. the frames are temporally shuffled (training-time augmentation), which
   keeps every frame and every per-channel statistic but destroys the order,
   so the encoder cannot copy the reference's content sequence;
2. a small bidirectional transformer encodes the frames;
3. k learned latents cross-attend to them (a perceiver bottleneck), giving a
   fixed k x D_style summary for any reference length;
4. an utterance-level emotion embedding from a frozen classifier is appended
   to every latent and a linear layer maps the pair to the model width.
"""

import numpy as np
import torch

from emoprefix.config import RunConfig
from emoprefix.pipeline import train_emotion_embedder
from emoprefix.prefix_encoder import PrefixEncoder, emotion_embed, encode_prefix, temporal_shuffle
from emoprefix.toyspeech import EMOTION_NAMES, Corpus

torch.manual_seed(0)
cfg = RunConfig()
corpus = Corpus(cfg.corpus, cfg.split)
g = corpus.gcfg

ref = corpus.mel(corpus.spec(int(corpus.split.reference_contents[0]), 1, 3))
shuf = temporal_shuffle(ref, 0)
print(f"reference: {ref.shape[0]} frames; shuffled rows are a permutation:",
      sorted(map(tuple, shuf)) == sorted(map(tuple, ref)))
print("per-channel means unchanged:", np.allclose(shuf.mean(0), ref.mean(0)),
      "| frame order changed:", not np.array_equal(shuf, ref))

# The perceiver output has the same shape whatever the reference length.
enc = PrefixEncoder(cfg.prefix)
for T in (2, 10, 50, 200):
    lat = enc.perceive(enc.encode_style(torch.randn(T, g.n_mel)))
    print(f"T={T:3d} -> latents {tuple(lat.shape)}")

# The emotion embedding comes from a mean-pool classifier trained on the
# training split and then frozen. References of the same emotion land close
# together whatever the speaker or sentence.
embedder = train_emotion_embedder(corpus, cfg)
print(f"emotion embedder held-out accuracy: {embedder.heldout_accuracy.item():.3f}")
refs = [corpus.spec(c, s, e) for c in corpus.split.reference_contents[:2] for s in range(g.n_speakers) for e in range(g.n_emotions)]
emb = emotion_embed(embedder, [corpus.mel(r) for r in refs]).numpy()
emb /= np.linalg.norm(emb, axis=1, keepdims=True)
labels = np.array([r.emotion_id for r in refs])
cos = emb @ emb.T
same = cos[labels[:, None] == labels[None]].mean()
diff = cos[labels[:, None] != labels[None]].mean()
print(f"mean cosine, same emotion {same:.2f} vs different emotion {diff:.2f}")

# Full prefix for a batch of variable-length references: (B, k, d_model).
E = encode_prefix(enc, embedder, [corpus.mel(r) for r in refs[:3]], shuffle_rng=np.random.default_rng(0))
print("prefix batch:", tuple(E.shape), "for emotions", [EMOTION_NAMES[r.emotion_id] for r in refs[:3]])
