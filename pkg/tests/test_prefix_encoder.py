import itertools

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import tiny_prefix_cfg
from emoprefix.errors import ConfigError, InputError, StateError
from emoprefix.numerics import grad_check_param
from emoprefix.prefix_encoder import PrefixEncoder, PrefixEncoderConfig, emotion_embed, encode_prefix, pad_frames, temporal_shuffle
from emoprefix.probes import MeanPoolClassifier
from emoprefix.toyspeech import Corpus, GeneratorConfig, SplitConfig


def test_shuffle_single_frame_is_identity():
    m = np.arange(5.0)[None]
    assert np.array_equal(temporal_shuffle(m, 3), m)


@settings(max_examples=60, deadline=None)
@given(mel=arrays(np.float64, st.tuples(st.integers(1, 40), st.integers(1, 6)),
                  elements=st.floats(-4, 4, allow_nan=False)), seed=st.integers(0, 2**31))
def test_shuffle_preserves_rows_and_moments(mel, seed):
    out = temporal_shuffle(mel, seed)
    assert out.shape == mel.shape
    key = lambda a: sorted(map(tuple, a))  # noqa: E731
    assert key(out) == key(mel)
    # per-channel moments survive exactly once the summation order is fixed
    assert np.array_equal(np.sort(out, axis=0), np.sort(mel, axis=0))
    assert np.array_equal(np.sort(out, axis=0).mean(0), np.sort(mel, axis=0).mean(0))
    assert np.array_equal(np.sort(out, axis=0).var(0), np.sort(mel, axis=0).var(0))


@pytest.mark.parametrize("seed", range(8))
def test_shuffle_t3_matches_enumerated_permutation(seed):
    mel = np.array([[0.0, 1.0], [2.0, 3.0], [4.0, 5.0]])
    out = temporal_shuffle(mel, seed)
    hits = [p for p in itertools.permutations(range(3)) if np.array_equal(mel[list(p)], out)]
    assert len(hits) == 1
    assert list(hits[0]) == np.random.default_rng(seed).permutation(3).tolist()


def test_shuffle_draws_fresh_permutations_from_a_generator():
    rng = np.random.default_rng(0)
    mel = np.arange(40.0).reshape(20, 2)
    assert not np.array_equal(temporal_shuffle(mel, rng), temporal_shuffle(mel, rng))


@pytest.mark.parametrize("T", [2, 50, 120])
def test_encode_style_shape(T):
    enc = PrefixEncoder(PrefixEncoderConfig())
    assert enc.encode_style(torch.randn(T, 16)).shape == (T, 32)


def test_gradient_reaches_every_encoder_parameter():
    cfg = tiny_prefix_cfg()
    enc = PrefixEncoder(cfg)
    E = enc(torch.randn(2, 7, 4), torch.randn(2, 4))
    (E * torch.randn(E.shape)).sum().backward()
    for name, p in enc.named_parameters():
        assert p.grad is not None and p.grad.abs().sum() > 0, name


@pytest.mark.parametrize("T", [1, 2, 10, 50, 200])
def test_perceiver_fixed_length(T):
    enc = PrefixEncoder(PrefixEncoderConfig())
    assert enc.perceive(torch.randn(T, 32)).shape == (8, 32)


def test_perceiver_rejects_empty_input():
    enc = PrefixEncoder(tiny_prefix_cfg())
    with pytest.raises(InputError):
        enc.perceive(torch.zeros(0, 8))


def test_perceiver_identical_features_duplication_invariant():
    enc = PrefixEncoder(tiny_prefix_cfg())
    v = torch.randn(1, 8)
    a = enc.perceive(v.expand(3, 8))
    b = enc.perceive(v.expand(11, 8))
    torch.testing.assert_close(a, b, rtol=0, atol=1e-12)


def test_perceiver_single_latent_single_feature_closed_form():
    cfg = tiny_prefix_cfg(n_latents=1)
    enc = PrefixEncoder(cfg)
    f = torch.randn(1, cfg.d_style)
    blk = enc.perceiver[0]
    a = blk.attn
    # with one key the softmax weight is 1: attention returns the value projection
    value = F.linear(F.layer_norm(f, (cfg.d_style,), blk.ln_kv.weight, blk.ln_kv.bias), a.v.weight, a.v.bias)
    x = enc.latents + F.linear(value, a.o.weight, a.o.bias)
    h = F.layer_norm(x, (cfg.d_style,), blk.ln_ff.weight, blk.ln_ff.bias)
    expected = x + F.linear(F.gelu(F.linear(h, blk.ff.fc1.weight, blk.ff.fc1.bias)), blk.ff.fc2.weight, blk.ff.fc2.bias)
    torch.testing.assert_close(enc.perceive(f), expected, rtol=0, atol=1e-12)


def test_padding_does_not_change_prefix():
    cfg = tiny_prefix_cfg()
    enc = PrefixEncoder(cfg)
    mels = [np.random.default_rng(i).normal(size=(n, 4)) for i, n in enumerate((5, 9, 2))]
    e = torch.randn(3, 4)
    x, mask = pad_frames(mels)
    batched = enc(x, e, mask)
    for i, m in enumerate(mels):
        single = enc(torch.as_tensor(m), e[i])
        torch.testing.assert_close(batched[i], single, rtol=0, atol=1e-12)


# -- fusion ---------------------------------------------------------------------


def test_zero_fusion_gives_zero_prefix():
    enc = PrefixEncoder(tiny_prefix_cfg())
    with torch.no_grad():
        enc.fusion.weight.zero_()
        enc.fusion.bias.zero_()
    assert torch.equal(enc.fuse(torch.randn(3, 8), torch.randn(4)), torch.zeros(3, 8))


def test_fusion_broadcasts_the_same_emotion_to_every_row():
    cfg = tiny_prefix_cfg(n_latents=2)
    enc = PrefixEncoder(cfg)
    seen = {}
    enc.fusion.register_forward_hook(lambda mod, inp, out: seen.setdefault("x", inp[0]))
    enc.fuse(torch.randn(2, 8), torch.randn(4))
    x = seen["x"][0]
    assert x.shape == (2, 12)
    assert torch.equal(x[0, 8:] - x[1, 8:], torch.zeros(4))


def test_fusion_hand_set_projection():
    cfg = tiny_prefix_cfg(d_model=1)
    enc = PrefixEncoder(cfg)
    w = torch.randn(1, 12)
    with torch.no_grad():
        enc.fusion.weight.copy_(w)
        enc.fusion.bias.fill_(0.25)
    s, e = torch.randn(3, 8), torch.randn(4)
    got = enc.fuse(s, e)
    for r in range(3):
        expected = sum(w[0, j].item() * s[r, j].item() for j in range(8))
        expected += sum(w[0, 8 + j].item() * e[j].item() for j in range(4)) + 0.25
        assert abs(got[r, 0].item() - expected) < 1e-12


def test_fusion_width_mismatch_is_config_error():
    enc = PrefixEncoder(tiny_prefix_cfg())
    with pytest.raises(ConfigError):
        enc.fuse(torch.randn(3, 8), torch.randn(5))


@pytest.mark.parametrize("seed", range(20))
def test_prefix_gradients_match_finite_differences(seed):
    torch.manual_seed(seed)
    cfg = tiny_prefix_cfg(n_layers=1, d_style=4, d_ff=8, n_latents=2, d_emo=3, d_model=4)
    enc = PrefixEncoder(cfg)
    mel, e = torch.randn(5, 4), torch.randn(3)
    w = torch.randn(2, 4)
    loss = lambda: (enc(mel, e) * w).sum()  # noqa: E731
    for p in (enc.fusion.weight, enc.latents, enc.in_proj.weight, enc.blocks[0].attn.q.weight):
        assert grad_check_param(loss, p) < 1e-4


# -- emotion embedder ---------------------------------------------------------------


def test_untrained_embedder_is_state_error():
    with pytest.raises(StateError):
        emotion_embed(MeanPoolClassifier(16, 4), [np.zeros((3, 16))])


@pytest.fixture(scope="module")
def small_corpus():
    return Corpus(GeneratorConfig(), SplitConfig(n_train=60))


@pytest.fixture(scope="module")
def embedder(small_corpus):
    c = small_corpus
    tr, te = c.split.train, c.split.test
    m = MeanPoolClassifier(16, 4, 16)
    m.fit([c.mel(s) for s in tr], [s.emotion_id for s in tr], [c.mel(s) for s in te], [s.emotion_id for s in te],
          steps=400, seed=11)
    return m


def test_embedder_accuracy_and_clustering(embedder, small_corpus):
    assert embedder.heldout_accuracy.item() >= 0.95
    te = small_corpus.split.test
    e = embedder.embed([small_corpus.mel(s) for s in te]).numpy()
    e = e / np.linalg.norm(e, axis=1, keepdims=True)
    cos = e @ e.T
    lab = np.array([s.emotion_id for s in te])
    same = lab[:, None] == lab[None, :]
    off = ~np.eye(len(te), dtype=bool)
    assert cos[same & off].mean() > cos[~same].mean()
    # deterministic: the same frames give the same embedding
    a, b = small_corpus.mel(te[0]), small_corpus.mel(te[0])
    assert torch.equal(embedder.embed([a]), embedder.embed([b]))


def test_encode_prefix_uses_unshuffled_reference_for_emotion(embedder, small_corpus):
    cfg = PrefixEncoderConfig()
    enc = PrefixEncoder(cfg)
    mels = [small_corpus.mel(s) for s in small_corpus.split.reference[:3]]
    a = encode_prefix(enc, embedder, mels)
    b = encode_prefix(enc, embedder, mels)
    assert torch.equal(a, b) and a.shape == (3, cfg.n_latents, cfg.d_model)
    shuffled = encode_prefix(enc, embedder, mels, shuffle_rng=np.random.default_rng(1))
    assert not torch.equal(a, shuffled)


def test_shuffle_statistic_separates_utterances(small_corpus):
    """Two shuffles of one utterance land closer than two different utterances."""
    torch.manual_seed(5)
    enc = PrefixEncoder(PrefixEncoderConfig())
    specs = small_corpus.split.test[:60]
    rng = np.random.default_rng(0)
    with torch.no_grad():
        emb = [[enc.perceive(enc.encode_style(torch.as_tensor(temporal_shuffle(small_corpus.mel(s), rng)))).reshape(-1)
                for _ in range(2)] for s in specs]
    within = np.array([torch.dist(a, b).item() for a, b in emb])
    across = np.array([torch.dist(emb[i][0], emb[(i + 1) % len(emb)][1]).item() for i in range(len(emb))])
    assert np.median(within) < np.median(across)
    assert (within < across).mean() > 0.8
