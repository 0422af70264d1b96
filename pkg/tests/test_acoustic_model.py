import numpy as np
import pytest
import torch

from conftest import tiny_acoustic_cfg
from emoprefix.acoustic_model import (
    SEG_REF,
    SEG_TARGET,
    FlowDecoder,
    batch_packs,
    condition_pack,
    decode_batch,
    decode_utterance,
    fm_loss,
    fm_sample,
    fm_train_step,
    interpolate,
    layout_targets,
)
from emoprefix.errors import ConfigError, InputError, NumericError
from emoprefix.numerics import AdamW, grad_check_param
from oracles import constant_flow_toy, euler_halving_ratio


def random_packs(cfg, rng, n, with_ref=True):
    packs, targets = [], []
    for _ in range(n):
        T, R = int(rng.integers(1, 6)), int(rng.integers(1, 4)) if with_ref else 0
        packs.append(condition_pack(rng.integers(cfg.audio_vocab, size=T), rng.integers(cfg.audio_vocab, size=R),
                                    rng.normal(size=(R, cfg.n_mel)) if R else None))
        targets.append(rng.normal(size=(T, cfg.n_mel)))
    return packs, targets


def test_pack_layout_and_reference_pass_through(rng):
    A, A_ref, M_ref = rng.integers(10, size=7), rng.integers(10, size=4), rng.normal(size=(4, 3))
    p = condition_pack(A, A_ref, M_ref)
    assert len(p) == 11 and p.n_ref == 4 and p.n_target == 7
    assert np.array_equal(p.tokens, np.concatenate([A_ref, A]))
    assert np.array_equal(p.ref_channels[:4], M_ref)
    assert np.all(p.ref_channels[4:] == 0)
    assert p.segments.tolist() == [SEG_REF] * 4 + [SEG_TARGET] * 7


def test_empty_reference_leaves_target_region_only(rng):
    p = condition_pack(rng.integers(10, size=5), np.zeros(0, dtype=int), None)
    assert len(p) == 5 and p.n_ref == 0
    assert p.segments.tolist() == [SEG_TARGET] * 5


def test_reference_length_mismatch_is_an_input_error(rng):
    with pytest.raises(InputError):
        condition_pack(rng.integers(10, size=5), rng.integers(10, size=3), rng.normal(size=(4, 3)))
    with pytest.raises(InputError):
        condition_pack(np.zeros(0, dtype=int), rng.integers(10, size=2), rng.normal(size=(2, 3)))


def test_layout_targets_rejects_wrong_length(rng):
    cfg = tiny_acoustic_cfg()
    packs, targets = random_packs(cfg, rng, 2)
    pb = batch_packs(packs, cfg.n_mel)
    with pytest.raises(InputError):
        layout_targets(pb, [targets[0], targets[1][:-1] if len(targets[1]) > 1 else np.zeros((2, cfg.n_mel))])


def test_path_endpoints_are_bitwise(rng):
    x0, x1 = torch.randn(3, 5, 2), torch.randn(3, 5, 2)
    assert torch.equal(interpolate(x0, x1, torch.zeros(3)), x0)
    assert torch.equal(interpolate(x0, x1, torch.ones(3)), x1)
    mid = interpolate(x0, x1, torch.tensor([0.25, 0.5, 0.75]))
    assert torch.allclose(mid[1], 0.5 * (x0[1] + x1[1]))


def _zero_velocity(model):
    with torch.no_grad():
        model.out.weight.zero_()
        model.out.bias.zero_()
    return model


def test_zero_velocity_loss_is_mean_square_of_the_gap(rng):
    cfg = tiny_acoustic_cfg()
    model = _zero_velocity(FlowDecoder(cfg))
    packs, targets = random_packs(cfg, rng, 4)
    pb = batch_packs(packs, cfg.n_mel)
    x1 = layout_targets(pb, targets)
    x0 = torch.randn(x1.shape) * pb.target[..., None]
    loss = fm_loss(model, pb, x1, x0, torch.rand(4))
    gap = np.concatenate([(x1 - x0)[i, p.n_ref:len(p)].numpy().ravel() for i, p in enumerate(packs)])
    assert loss.item() == pytest.approx(np.mean(gap ** 2), rel=1e-12)


def test_zero_velocity_expected_loss_matches_closed_form(rng):
    # for x0 ~ N(0, I): E (x1 - x0)^2 = x1^2 + 1 per element
    cfg = tiny_acoustic_cfg()
    model = _zero_velocity(FlowDecoder(cfg))
    packs, targets = random_packs(cfg, rng, 3)
    pb = batch_packs(packs, cfg.n_mel)
    x1 = layout_targets(pb, targets)
    g = torch.Generator().manual_seed(0)
    mc = np.mean([fm_loss(model, pb, x1, torch.randn(x1.shape, generator=g) * pb.target[..., None], torch.rand(3, generator=g)).item()
                  for _ in range(4000)])
    closed = np.mean(np.concatenate([t.ravel() for t in targets]) ** 2) + 1.0
    assert mc == pytest.approx(closed, rel=0.02)


def test_oracle_velocity_gives_zero_loss(rng):
    cfg = tiny_acoustic_cfg()
    packs, targets = random_packs(cfg, rng, 3)
    pb = batch_packs(packs, cfg.n_mel)
    x1 = layout_targets(pb, targets)
    x0 = torch.randn(x1.shape) * pb.target[..., None]
    assert fm_loss(lambda xt, t, _: x1 - x0, pb, x1, x0, torch.rand(3)).item() == 0.0


def test_reference_region_contributes_no_gradient(rng):
    cfg = tiny_acoustic_cfg()
    model = FlowDecoder(cfg)
    packs, targets = random_packs(cfg, rng, 3)
    pb = batch_packs(packs, cfg.n_mel)
    x1 = layout_targets(pb, targets)
    x1[~pb.target] = torch.randn(int((~pb.target).sum()), cfg.n_mel)  # junk outside the target region
    x1.requires_grad_(True)
    x0 = torch.randn(x1.shape, requires_grad=True)
    fm_loss(model, pb, x1, x0, torch.rand(3)).backward()
    outside = ~pb.target
    assert torch.count_nonzero(x1.grad[outside]) == 0
    assert torch.count_nonzero(x0.grad[outside]) == 0
    assert torch.count_nonzero(x1.grad[pb.target]) > 0


def test_non_finite_loss_aborts(rng):
    cfg = tiny_acoustic_cfg()
    packs, targets = random_packs(cfg, rng, 2)
    pb = batch_packs(packs, cfg.n_mel)
    x1 = layout_targets(pb, targets)
    x1[pb.target] = float("nan")
    with pytest.raises(NumericError):
        fm_loss(FlowDecoder(cfg), pb, x1, torch.zeros_like(x1), torch.rand(2))


def test_train_step_reduces_loss_on_a_fixed_batch(rng):
    cfg = tiny_acoustic_cfg()
    model = FlowDecoder(cfg)
    packs, targets = random_packs(cfg, rng, 4)
    pb = batch_packs(packs, cfg.n_mel)
    x1 = layout_targets(pb, targets)
    opt = AdamW(model.parameters(), lr=3e-3, weight_decay=0.0)
    g = torch.Generator().manual_seed(0)
    losses = [fm_train_step(model, opt, pb, x1, g) for _ in range(300)]
    assert np.mean(losses[-30:]) < 0.6 * np.mean(losses[:30])


def test_sampler_is_deterministic_and_shaped(rng):
    cfg = tiny_acoustic_cfg()
    model = FlowDecoder(cfg)
    packs, _ = random_packs(cfg, rng, 3)
    a = fm_sample(model, packs, 8, seed=5)
    b = fm_sample(model, packs, 8, seed=5)
    c = fm_sample(model, packs, 8, seed=6)
    for p, x, y, z in zip(packs, a, b, c):
        assert x.shape == (p.n_target, cfg.n_mel)
        assert np.array_equal(x, y)
        assert not np.array_equal(x, z)


def test_sampler_output_does_not_depend_on_batch_companions(rng):
    cfg = tiny_acoustic_cfg()
    model = FlowDecoder(cfg)
    packs, _ = random_packs(cfg, rng, 4)
    together = fm_sample(model, packs, 4, seed=[10, 11, 12, 13])
    alone = fm_sample(model, packs[2:3], 4, seed=[12])
    np.testing.assert_allclose(together[2], alone[0], atol=1e-12)


def test_sampler_needs_a_step():
    cfg = tiny_acoustic_cfg()
    packs = [condition_pack([1, 2], [], None)]
    with pytest.raises(ConfigError):
        fm_sample(FlowDecoder(cfg), packs, 0)


def test_decode_shapes(rng):
    cfg = tiny_acoustic_cfg()
    model = FlowDecoder(cfg)
    out = decode_utterance(model, rng.integers(10, size=9), rng.integers(10, size=3), rng.normal(size=(3, 3)), steps=4)
    assert out.shape == (9, 3)
    As = [rng.integers(10, size=n) for n in (2, 5, 1)]
    outs = decode_batch(model, As, [[]] * 3, [None] * 3, steps=2, batch_size=2)
    assert [o.shape for o in outs] == [(2, 3), (5, 3), (1, 3)]


@pytest.mark.parametrize("seed", range(20))
def test_flow_loss_gradients_match_finite_differences(seed):
    cfg = tiny_acoustic_cfg(d_model=8, n_heads=2, d_ff=8, n_layers=1)
    torch.manual_seed(seed)
    model = FlowDecoder(cfg)
    rng = np.random.default_rng(seed)
    packs, targets = random_packs(cfg, rng, 2)
    pb = batch_packs(packs, cfg.n_mel)
    x1 = layout_targets(pb, targets)
    g = torch.Generator().manual_seed(seed)
    x0, t = torch.randn(x1.shape, generator=g) * pb.target[..., None], torch.rand(2, generator=g)
    loss = lambda: fm_loss(model, pb, x1, x0, t)  # noqa: E731
    blk = model.blocks[0]
    for p in (model.out.weight, model.state_in.weight, model.ref_in.weight, model.time_mlp[0].weight,
              blk.attn.q.weight, blk.ff.fc1.weight):
        assert grad_check_param(loss, p) < 1e-4


@pytest.fixture(scope="module")
def constant_toy():
    return constant_flow_toy(seed=0)


def test_constant_toy_samples_land_on_the_constant(constant_toy):
    model, packs = constant_toy
    out = np.stack(fm_sample(model, packs, 32, seed=list(range(len(packs)))))
    assert np.abs(out - 1.5).mean() < 0.1


def test_constant_toy_euler_error_is_first_order(constant_toy):
    assert 1.5 <= euler_halving_ratio(*constant_toy) <= 3.0
