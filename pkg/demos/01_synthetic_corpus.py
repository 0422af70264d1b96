"""
A speech-like corpus with known factors
=======================================

Every utterance is a (content, speaker, emotion) cell rendered as a T x 16
matrix of mel-like frames. Channels are grouped: pitch (0-1), energy (2-3),
content (4-9) and timbre (10-15). Emotion moves pitch, energy and durations;
the speaker moves timbre and a little pitch; content picks the frame
templates. Nothing is recorded, so every factor is available as ground truth.
"""

import numpy as np

from emoprefix.config import RunConfig
from emoprefix.pipeline import train_codebook
from emoprefix.toyspeech import EMOTION_NAMES, Corpus, audio_tokenize, content_tokenize, tokenizer_view

cfg = RunConfig()
corpus = Corpus(cfg.corpus, cfg.split)
g = corpus.gcfg
print(f"{g.n_speakers} speakers x {g.n_emotions} emotions x {g.n_contents} contents = {len(corpus.all_specs)} utterances")
print("split sizes (content ids):", len(corpus.split.train_contents), len(corpus.split.reference_contents),
      len(corpus.split.test_contents))

# The same sentence read by one speaker in each emotion: durations and the
# pitch/energy channel means move, the content and timbre channels do not.
c = int(corpus.split.test_contents[0])
for e in range(g.n_emotions):
    m = corpus.mel(corpus.spec(c, 0, e))
    print(f"{EMOTION_NAMES[e]:>9}: T={len(m):3d}  pitch {m[:, 0].mean():+.2f}  energy {m[:, 2].mean():+.2f}  "
          f"timbre {m[:, 10].mean():+.2f}")

# Content tokens are one per pseudo-phoneme and ignore speaker and emotion.
print("content tokens:", content_tokenize(corpus.spec(c, 0, 0), g).tokens)
print("same for another speaker and emotion:", content_tokenize(corpus.spec(c, 3, 2), g).tokens)

# The audio tokenizer quantizes a view of the frames in which the energy and
# timbre channels are mean-normalised per utterance. Tokens therefore keep
# pitch, timing and content but drop who is speaking and how loud.
codebook = train_codebook(corpus, cfg)
a = corpus.mel(corpus.spec(c, 0, 1))
b = corpus.mel(corpus.spec(c, 2, 1))
ta, tb = audio_tokenize(a, codebook), audio_tokenize(b, codebook)
print(f"codebook: {codebook.size} codes, 95th percentile quantization error {codebook.error_q95:.3f}")
print("speaker 0 vs speaker 2, same content and emotion, token agreement:",
      f"{np.mean(ta.tokens[: min(len(ta), len(tb))] == tb.tokens[: min(len(ta), len(tb))]):.2f}")
view = tokenizer_view(a, g)
print("normalised channel means in the tokenizer view:", np.round(view[:, list(g.normalized_channels)].mean(0), 12)[:4] + 0.0)
