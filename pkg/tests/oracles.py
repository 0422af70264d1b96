"""Independent reference computations used by several test modules."""

import math

import numpy as np
import torch
import torch.nn.functional as F


def _lin(x, layer):
    return x @ layer.merged_weight().detach().T + layer.bias.detach()


def naive_prefix_logits(model, batch, E=None, mode="none"):
    """Stage-1 forward written out per head and per query.

    Deep-prefix rows are materialised as k extra positions that only contribute
    keys/values (K = E W_K, V = E W_V) and emit no queries; input-prepend rows
    are ordinary positions at the front of the sequence. Masked keys are dropped
    outright instead of penalised.
    """
    x = model.embed(batch.tokens, batch.positions, batch.segments).detach()
    valid = batch.valid.numpy()
    B, L = valid.shape
    k = 0 if E is None else E.shape[1]
    if mode == "input-prepend":
        x = torch.cat([E.detach(), x], dim=1)
        valid = np.concatenate([np.ones((B, k), bool), valid], axis=1)
        L = L + k
    n_kv = k if mode == "deep-prefix" else 0
    h_count = model.blocks[0].attn.n_heads
    for l, blk in enumerate(model.blocks):
        a = blk.attn
        h = F.layer_norm(x, x.shape[-1:], blk.ln1.weight.detach(), blk.ln1.bias.detach())
        q, ks, vs = _lin(h, a.q), _lin(h, a.k), _lin(h, a.v)
        if n_kv:
            ks = torch.cat([E.detach() @ model.prefix_proj.w_k[l].detach(), ks], dim=1)
            vs = torch.cat([E.detach() @ model.prefix_proj.w_v[l].detach(), vs], dim=1)
        d = q.shape[-1] // h_count
        out = torch.zeros_like(q)
        for b in range(B):
            for i in range(L):
                keys = list(range(n_kv)) + [n_kv + j for j in range(L) if (j <= i and valid[b, j]) or j == i]
                for hd in range(h_count):
                    sl = slice(hd * d, (hd + 1) * d)
                    s = torch.stack([q[b, i, sl] @ ks[b, j, sl] for j in keys]) / math.sqrt(d)
                    w = torch.softmax(s, dim=0)
                    out[b, i, sl] = sum(w[t] * vs[b, j, sl] for t, j in enumerate(keys))
        x = x + _lin(out, a.o)
        h2 = F.layer_norm(x, x.shape[-1:], blk.ln2.weight.detach(), blk.ln2.bias.detach())
        x = x + _lin(F.gelu(_lin(h2, blk.ff.fc1)), blk.ff.fc2)
    logits = F.linear(F.layer_norm(x, x.shape[-1:], model.ln_f.weight.detach(), model.ln_f.bias.detach()),
                      model.head.weight.detach(), model.head.bias.detach())
    start = (k if mode == "input-prepend" else 0) + batch.audio_start
    return logits[:, start:]


def random_batch(cfg, rng, B, with_refs=True):
    from emoprefix.sequence_model import make_batch

    contents = [rng.integers(cfg.content_vocab, size=rng.integers(1, 5)) for _ in range(B)]
    refs = [rng.integers(cfg.audio_vocab, size=rng.integers(0, 4)) for _ in range(B)] if with_refs else None
    audios = [rng.integers(cfg.audio_vocab, size=rng.integers(0, 5)) for _ in range(B)]
    return make_batch(cfg, contents, refs, audios)


def eer_brute_force(genuine, impostor):
    """Walk the ROC polyline point by point and intersect it with FAR = FRR."""
    pts = []
    for t in sorted(set(genuine) | set(impostor)) + [np.inf]:
        far = sum(x >= t for x in impostor) / len(impostor)
        frr = sum(x < t for x in genuine) / len(genuine)
        pts.append((far, frr))
    for (f0, r0), (f1, r1) in zip(pts, pts[1:]):
        if f0 == r0:
            return f0
        if (f0 - r0) * (f1 - r1) <= 0:
            a = (f0 - r0) / ((f0 - r0) - (f1 - r1))
            return f0 + a * (f1 - f0)
    return pts[-1][0]


def constant_flow_toy(seed=0, c=1.5, steps=800, frames=4, batch=32):
    """Flow decoder trained with no reference to map noise onto the constant c (1-D frames)."""
    from emoprefix.acoustic_model import AcousticConfig, FlowDecoder, batch_packs, condition_pack, fm_train_step
    from emoprefix.numerics import AdamW

    torch.manual_seed(seed)
    model = FlowDecoder(AcousticConfig(audio_vocab=2, n_mel=1, d_model=16, n_layers=1, n_heads=2, d_ff=32))
    opt = AdamW(model.parameters(), lr=3e-3, weight_decay=0.0)
    g = torch.Generator().manual_seed(seed)
    packs = [condition_pack(np.zeros(frames, dtype=np.int64), np.zeros(0, dtype=np.int64), None) for _ in range(batch)]
    pb = batch_packs(packs, 1)
    x1 = torch.full((batch, frames, 1), c)
    for _ in range(steps):
        fm_train_step(model, opt, pb, x1, g)
    return model, packs


def euler_halving_ratio(model, packs, coarse=16, reference=1024):
    """err(coarse) / err(2 * coarse), errors measured against a fine-step solution of the same ODE."""
    from emoprefix.acoustic_model import fm_sample

    seeds = list(range(len(packs)))
    ref = np.stack(fm_sample(model, packs, reference, seeds))
    err = [np.abs(np.stack(fm_sample(model, packs, n, seeds)) - ref).mean() for n in (coarse, 2 * coarse)]
    return err[0] / err[1]
