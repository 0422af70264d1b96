"""Acceptance criteria, one test per numbered criterion.

Criteria 1-6 and the toy half of 11 exercise the mechanisms on tiny models.
Criteria 7-10 and the reconstruction half of 11 share one from-scratch run of
the whole pipeline at the default configuration. Verdicts are collected in
``conftest.ACCEPTANCE`` and printed one line per criterion at the end.
"""

import copy
import logging
import time

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE, tiny_acoustic_cfg, tiny_prefix_cfg, tiny_seq_cfg
from oracles import constant_flow_toy, eer_brute_force, euler_halving_ratio, naive_prefix_logits, random_batch
from emoprefix import evalkit
from emoprefix.acoustic_model import FlowDecoder, batch_packs, condition_pack, decode_batch, fm_loss, layout_targets
from emoprefix.config import RunConfig
from emoprefix.numerics import AdamW, attention, causal_mask, grad_check, grad_check_param, tensor_checksum
from emoprefix.pipeline import Tokens, build_all
from emoprefix.prefix_encoder import PrefixEncoder, temporal_shuffle
from emoprefix.sequence_model import SequenceModel, adapter_modules, lm_loss, make_batch, train_step

CHANCE = 0.25  # four emotions at the default corpus configuration


def record(n: int, ok: bool, detail: str):
    prev = ACCEPTANCE.get(n)
    if prev is not None:
        ok, detail = prev[0] and ok, f"{prev[1]}; {detail}"
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    return ok


def finetune_model(cfg, deep=True, seed=0, lora_b_scale=0.0):
    torch.manual_seed(seed)
    model = SequenceModel(cfg).prepare_finetune(deep_prefix=deep, seed=seed)
    if lora_b_scale:
        g = torch.Generator().manual_seed(seed + 1)
        with torch.no_grad():
            for m in adapter_modules(model):
                m.lora_B.copy_(torch.randn(m.lora_B.shape, generator=g) * lora_b_scale)
            for w in list(model.prefix_proj.w_k) + list(model.prefix_proj.w_v):
                w.copy_(torch.randn(w.shape, generator=g) * 0.3)
    return model


# ---------------------------------------------------------------------------
# 1-6: mechanisms


def test_1_deep_prefix_equals_materialised_oracle():
    t0, worst, n = time.perf_counter(), 0.0, 0
    for seed in range(120):
        rng = np.random.default_rng([seed, 11])
        heads = int(rng.choice([1, 2, 4]))
        cfg = tiny_seq_cfg(n_layers=int(rng.integers(1, 4)), n_heads=heads, d_model=max(4, heads * int(rng.integers(2, 5))))
        model = finetune_model(cfg, seed=seed, lora_b_scale=0.1)
        batch = random_batch(cfg, rng, B=int(rng.integers(1, 4)))
        E = torch.randn(batch.tokens.shape[0], int(rng.integers(1, 5)), cfg.d_model,
                        generator=torch.Generator().manual_seed(seed))
        with torch.no_grad():
            got = model.forward_logits(batch, E, "deep-prefix")
        worst = max(worst, (got - naive_prefix_logits(model, batch, E, "deep-prefix")).abs().max().item())
        n += 1
    dt = time.perf_counter() - t0
    assert record(1, worst <= 1e-9 and dt < 60, f"{n} combinations, max |diff| {worst:.2e}, {dt:.1f}s")


def test_2_gradient_suite():
    t0, worst = time.perf_counter(), {}

    def note(name, v):
        worst[name] = max(worst.get(name, 0.0), v)

    for seed in range(20):
        g = torch.Generator().manual_seed(seed)
        # attention, with respect to q, k and v under a causal mask
        q, k, v, w = (torch.randn(3, 4, generator=g) for _ in range(4))
        for i, x in enumerate((q, k, v)):
            def f(t, i=i):
                args = [q, k, v]
                args[i] = t
                return (attention(*args, causal_mask(3)) * w).sum()
            note("attention", grad_check(f, x))

        # deep-prefix projections and LoRA factors, through the LM loss
        cfg = tiny_seq_cfg(n_layers=2, d_model=8, n_heads=2, d_ff=8, audio_vocab=5, content_vocab=4)
        model = finetune_model(cfg, seed=seed, lora_b_scale=0.3)
        rng = np.random.default_rng(seed)
        batch = random_batch(cfg, rng, 2)
        E = torch.randn(2, 2, cfg.d_model, generator=g)
        loss = lambda: lm_loss(model, batch, E, "deep-prefix")  # noqa: E731
        for l in range(2):
            note("prefix projections", grad_check_param(loss, model.prefix_proj.w_k[l]))
            note("prefix projections", grad_check_param(loss, model.prefix_proj.w_v[l]))
        blk = model.blocks[int(rng.integers(2))]
        for p in (blk.attn.q.lora_A, blk.attn.q.lora_B, blk.attn.v.lora_A, blk.attn.v.lora_B):
            note("LoRA", grad_check_param(loss, p))

        # fusion of style latents with the emotion embedding
        torch.manual_seed(seed)
        enc = PrefixEncoder(tiny_prefix_cfg(d_style=4, d_ff=8, n_latents=2, d_emo=3, d_model=4))
        mel, e, wt = torch.randn(5, 4, generator=g), torch.randn(3, generator=g), torch.randn(2, 4, generator=g)
        note("fusion", grad_check_param(lambda: (enc(mel, e) * wt).sum(), enc.fusion.weight))
        note("fusion", grad_check(lambda x: (enc(mel, x) * wt).sum(), e))

        # flow-matching loss
        acfg = tiny_acoustic_cfg(d_model=8, d_ff=8)
        torch.manual_seed(seed)
        fm = FlowDecoder(acfg)
        packs, targets = [], []
        for _ in range(2):
            T, R = int(rng.integers(1, 6)), int(rng.integers(1, 4))
            packs.append(condition_pack(rng.integers(10, size=T), rng.integers(10, size=R), rng.normal(size=(R, 3))))
            targets.append(rng.normal(size=(T, 3)))
        pb = batch_packs(packs, 3)
        x1 = layout_targets(pb, targets)
        x0, t = torch.randn(x1.shape, generator=g) * pb.target[..., None], torch.rand(2, generator=g)
        for p in (fm.out.weight, fm.state_in.weight, fm.ref_in.weight, fm.blocks[0].attn.q.weight):
            note("flow matching", grad_check_param(lambda: fm_loss(fm, pb, x1, x0, t), p))
    dt = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-4 and dt < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert record(2, ok, f"20 seeds each; worst {detail}; {dt:.1f}s")


def test_3_frozen_backbone_and_zero_init():
    cfg = tiny_seq_cfg(d_model=16, d_ff=32)
    torch.manual_seed(0)
    backbone = SequenceModel(cfg)
    tuned = copy.deepcopy(backbone).prepare_finetune(deep_prefix=True, seed=1)
    batch = random_batch(cfg, np.random.default_rng(0), 3)
    with torch.no_grad():
        same = torch.equal(tuned.forward_logits(batch, torch.zeros(3, 0, cfg.d_model), "deep-prefix"),
                           backbone.forward_logits(batch))
    before = tensor_checksum(tuned.sections()["backbone"])
    enc = PrefixEncoder(tiny_prefix_cfg(d_model=16))
    opt = AdamW(list(enc.parameters()) + tuned.adapter_parameters(), lr=1e-2)
    rng = np.random.default_rng(1)
    contents = [rng.integers(cfg.content_vocab, size=3) for _ in range(4)]
    tb = make_batch(cfg, contents, None, [rng.integers(cfg.audio_vocab, size=4) for _ in range(4)])
    mels, emo = torch.randn(4, 5, 4), torch.randn(4, 4)
    for _ in range(20):
        train_step(tuned, tb, opt, lambda: enc(mels, emo), "deep-prefix")
    unchanged = tensor_checksum(tuned.sections()["backbone"]) == before
    moved = any(p.abs().sum() > 0 for m in adapter_modules(tuned) for p in [m.lora_B])
    assert record(3, same and unchanged and moved,
                  f"step-0 logits bit-equal {same}; backbone checksum unchanged after 20 steps {unchanged}; "
                  f"LoRA B moved off zero {moved}")


def test_4_temporal_shuffle():
    ok = True
    for seed in range(50):
        rng = np.random.default_rng(seed)
        mel = rng.normal(size=(int(rng.integers(2, 40)), int(rng.integers(1, 8))))
        out = temporal_shuffle(mel, seed)
        ok &= sorted(map(tuple, out)) == sorted(map(tuple, mel))
        ok &= np.array_equal(np.sort(out, axis=0), np.sort(mel, axis=0))  # every per-channel moment follows
    one = np.arange(6.0)[None]
    ok_one = np.array_equal(temporal_shuffle(one, 3), one)
    assert record(4, ok and ok_one, f"row multiset and per-channel values exact on 50 draws {ok}; T=1 identity {ok_one}")


def test_5_perceiver_fixed_length():
    cfg = tiny_prefix_cfg()
    enc = PrefixEncoder(cfg)
    shapes = {T: tuple(enc.perceive(enc.encode_style(torch.randn(T, cfg.n_mel))).shape) for T in (2, 10, 50, 200)}
    ok = all(s == (cfg.n_latents, cfg.d_style) for s in shapes.values())
    assert record(5, ok, f"shapes {shapes}, expected {(cfg.n_latents, cfg.d_style)}")


def test_6_eer_matches_threshold_sweep():
    worst = 0.0
    for seed in range(60):
        rng = np.random.default_rng([seed, 6])
        g = np.round(rng.normal(1, 1, int(rng.integers(1, 30))), int(rng.integers(1, 4)))
        i = np.round(rng.normal(0, 1, int(rng.integers(1, 30))), int(rng.integers(1, 4)))
        worst = max(worst, abs(evalkit.eer(g, i) - eer_brute_force(list(g), list(i))))
    sep = evalkit.eer([0.9, 0.8, 0.7], [0.1, 0.2])
    same = evalkit.eer([0.2, 0.5, 0.9], [0.2, 0.5, 0.9])
    ok = worst <= 1e-9 and sep == 0.0 and same == 0.5
    assert record(6, ok, f"60 pairs, max |diff| {worst:.1e}; separated {sep}; identical {same}")


# ---------------------------------------------------------------------------
# 7-11: one full run


@pytest.fixture(scope="module")
def full_run():
    logging.getLogger("emoprefix").setLevel(logging.INFO)
    t0 = time.perf_counter()
    cfg = RunConfig()
    cfg.resolve()
    bundle = build_all(cfg, variants=("deep-prefix", "input-prepend"))
    table = evalkit.ablation_grid(bundle, ["baseline", "deep-prefix"])
    prepend, _ = evalkit.run_stage_isolation(bundle, "input-prepend", "joint", evalkit.speaker_anchors(bundle))
    elapsed = time.perf_counter() - t0
    eca = {(r["model"], r["setting"]): r["eca"] for r in table}
    rows = {(r["model"], r["setting"]): r for r in table}
    for r in table:
        print(f"{r['model']:>12} {r['setting']:>9} ECA {r['eca']:.3f} EER {r['eer']:.3f} "
              f"SpkCent {r['spk_cent_sim']:.3f} EmoSIM {r['emo_sim']:.3f} content {r['content_acc']:.3f}")
    print(f"input-prepend joint ECA {prepend.eca:.3f}; total {elapsed:.0f}s; stages {bundle.timings}")
    return dict(bundle=bundle, eca=eca, rows=rows, prepend=prepend.eca, elapsed=elapsed)


@pytest.mark.slow
def test_7_joint_control_headline(full_run):
    e, dt = full_run["eca"], full_run["elapsed"]
    base, prop = e[("baseline", "joint")], e[("deep-prefix", "joint")]
    ok = prop - base >= 0.25 and prop >= 0.80 and CHANCE <= base <= 0.60 and dt <= 1800
    assert record(7, ok, f"Joint ECA baseline {base:.3f} -> prefix {prop:.3f} (gain {100 * (prop - base):.1f} pts); "
                         f"pipeline {dt / 60:.1f} min")


@pytest.mark.slow
def test_8_stage_isolation_ordering(full_run):
    e = full_run["eca"]
    j, s, a = (e[("deep-prefix", k)] for k in ("joint", "sequence", "acoustic"))
    ordered = j - s >= 0.05 and s - a >= 0.05
    synergy = j > s + 0.5 * (a - CHANCE)
    assert record(8, ordered and synergy, f"prefix ECA joint {j:.3f} > sequence {s:.3f} > acoustic {a:.3f}; "
                                          f"non-additive bound {s + 0.5 * (a - CHANCE):.3f}")


@pytest.mark.slow
def test_9_speaker_identity_preserved(full_run):
    b, p = full_run["rows"][("baseline", "joint")], full_run["rows"][("deep-prefix", "joint")]
    ok = p["eer"] <= b["eer"] + 0.03 and p["spk_cent_sim"] >= b["spk_cent_sim"] - 0.05
    assert record(9, ok, f"EER {b['eer']:.3f} -> {p['eer']:.3f}; Spk-Cent SIM {b['spk_cent_sim']:.3f} -> "
                         f"{p['spk_cent_sim']:.3f}")


@pytest.mark.slow
def test_10_deep_prefix_vs_input_prepend(full_run):
    e = full_run["eca"]
    deep, prep, base = e[("deep-prefix", "joint")], full_run["prepend"], e[("baseline", "joint")]
    floor = lambda x: x >= 0.80 and x - base >= 0.25  # noqa: E731
    ok = abs(deep - prep) <= 0.05 and floor(deep) and floor(prep)
    assert record(10, ok, f"joint ECA deep prefix {deep:.3f} vs input prepend {prep:.3f}")


def test_11_euler_convergence_on_toy():
    ratio = euler_halving_ratio(*constant_flow_toy(seed=0))
    assert record(11, 1.5 <= ratio <= 3.0, f"Euler err(16)/err(32) on the 1-D toy {ratio:.2f}")


@pytest.mark.slow
def test_11_stage2_reconstruction_beats_mean(full_run):
    b = full_run["bundle"]
    corpus, cfg, g = b.corpus, b.cfg, b.corpus.gcfg
    toks = Tokens(corpus, b.codebook)
    n2 = cfg.train.stage2_ref_frames
    train_frames = np.concatenate([corpus.mel(corpus.spec(c, s, e)) for c in corpus.split.train_contents
                                   for s in range(g.n_speakers) for e in range(g.n_emotions)])
    mean = train_frames.mean(0)
    ref_c = int(corpus.split.reference_contents[0])
    items = [corpus.spec(c, s, e) for c in corpus.split.test_contents for s in range(g.n_speakers)
             for e in range(g.n_emotions)]
    refs = [corpus.spec(ref_c, t.speaker_id, t.emotion_id) for t in items]
    mels = decode_batch(b.stage2, [toks.audio(t) for t in items], [toks.audio(r)[:n2] for r in refs],
                        [corpus.mel(r)[:n2] for r in refs], steps=cfg.sampling.fm_steps,
                        seeds=range(len(items)), batch_size=cfg.eval.batch_size)
    true = [corpus.mel(t) for t in items]
    mse = np.mean(np.concatenate([((m - x) ** 2).ravel() for m, x in zip(mels, true)]))
    base = np.mean(np.concatenate([((mean - x) ** 2).ravel() for x in true]))
    assert record(11, base >= 2 * mse, f"held-out Stage-2 MSE {mse:.4f} vs predict-the-mean {base:.4f} "
                                       f"({base / mse:.1f}x) on {len(items)} utterances")
