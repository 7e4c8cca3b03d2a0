import pytest
import torch
from torch import nn

from sam_aging.encoder import (Map2Style, SamModel, build_encoder, condition, encode_age_residual, invert,
                               sam_cycle, sam_transform, zero_residual_)
from sam_aging.generator import ToyGenerator, layer_groups


def test_invert_deterministic_and_frozen(small_model, toy_batch):
    x = toy_batch.images
    assert torch.equal(invert(small_model, x), invert(small_model, x))
    y = small_model.transform(x, 40.0)
    y.pow(2).mean().backward()
    assert all(p.grad is None and not p.requires_grad for p in small_model.inversion_encoder.parameters())
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in small_model.aging_encoder.parameters())


def test_invert_resolution_mismatch(small_model):
    with pytest.raises(ValueError):
        invert(small_model, torch.zeros(1, 3, 16, 16))


@pytest.mark.parametrize("num_layers, style_dim", [(8, 64), (18, 512)])
def test_residual_shape(num_layers, style_dim):
    gen = ToyGenerator(num_layers, style_dim, 32, seed=0, n_stats=64)
    aging = build_encoder(4, num_layers, style_dim, 32, width=4)
    model = SamModel(aging, build_encoder(3, num_layers, style_dim, 32, width=4), gen)
    out = encode_age_residual(model, condition(torch.zeros(2, 3, 32, 32), 30.0))
    assert out.shape == (2, num_layers, style_dim)


def test_encode_age_residual_needs_residual_mode(gen):
    model = SamModel(build_encoder(4, width=4), build_encoder(3, width=4), gen, mode="direct")
    with pytest.raises(ValueError):
        encode_age_residual(model, condition(torch.zeros(1, 3, 32, 32), 30.0))


def test_zero_residual_reproduces_inversion(small_model, toy_batch):
    zero_residual_(small_model.aging_encoder)
    x = toy_batch.images
    residual = encode_age_residual(small_model, condition(x, 70.0))
    assert torch.equal(residual, torch.zeros_like(residual))
    with torch.no_grad():
        assert torch.equal(sam_transform(small_model, x, 70.0), small_model.generator(invert(small_model, x)))
        assert torch.equal(sam_transform(small_model, x[0], 70.0), small_model.generator(invert(small_model, x[:1]))[0])


def test_direct_mode_ignores_inverter(gen, toy_batch):
    aging = build_encoder(4, width=4, seed=1)
    inverter = build_encoder(3, width=4, seed=2)
    model = SamModel(aging, inverter, gen, mode="direct")
    x = toy_batch.images
    with torch.no_grad():
        before = sam_transform(model, x, 50.0)
        for p in inverter.parameters():
            p.add_(torch.randn_like(p))
        after = sam_transform(model, x, 50.0)
    assert torch.equal(before, after)


def test_sam_cycle_shapes_and_conditioning(small_model, small_oracles, toy_batch):
    x = toy_batch.images
    planes = []
    hook = small_model.aging_encoder.register_forward_pre_hook(lambda m, args: planes.append(args[0][:, 3]))
    source = small_oracles.age(x).clamp(5, 100)
    y_out, y_cycle, est = sam_cycle(small_model, x, source, small_oracles.age)
    hook.remove()
    assert y_out.shape == y_cycle.shape == x.shape
    assert torch.equal(est, small_oracles.age(x))
    assert len(planes) == 2 and torch.equal(planes[0], planes[1])


def test_cycle_gradient_nonzero_at_init(small_model, small_oracles, toy_batch):
    x = toy_batch.images
    _, y_cycle, _ = sam_cycle(small_model, x, 80.0, small_oracles.age)
    (y_cycle - x).pow(2).mean().backward()
    grads = [p.grad for p in small_model.aging_encoder.parameters()]
    assert any(g is not None and g.abs().sum() > 0 for g in grads)


def test_map2style_heads_only_downsample():
    enc = build_encoder(4, 8, 64, 32, width=8)
    for head, rows in zip(enc.styles, layer_groups(8)):
        assert isinstance(head, Map2Style) and head.count == len(rows)
        convs = [m for m in head.convs if isinstance(m, nn.Conv2d)]
        assert all(c.stride == (2, 2) for c in convs)
        assert head.linear.kernel_size == (1, 1)
    feats = []
    for head in enc.styles:
        head.convs.register_forward_hook(lambda m, a, out: feats.append(out.shape[-2:]))
    enc(torch.zeros(1, 4, 32, 32))
    assert all(tuple(s) == (1, 1) for s in feats)


def test_grouped_heads_are_independent():
    # perturbing one head's parameters changes only that head's style row
    head = Map2Style(8, 8, 16, count=3)
    x = torch.randn(2, 8, 8, 8)
    before = head(x).detach()
    with torch.no_grad():
        head.linear.weight[16:32].add_(1.0)
    after = head(x).detach()
    assert torch.equal(before[:, 0], after[:, 0]) and torch.equal(before[:, 2], after[:, 2])
    assert not torch.equal(before[:, 1], after[:, 1])


def test_encoder_rejects_wrong_input():
    enc = build_encoder(4, 8, 64, 32, width=4)
    with pytest.raises(ValueError):
        enc(torch.zeros(1, 3, 32, 32))


def test_model_train_keeps_inverter_in_eval(small_model):
    small_model.train()
    assert small_model.aging_encoder.training and not small_model.inversion_encoder.training


def test_model_rejects_swapped_encoders(gen):
    with pytest.raises(ValueError):
        SamModel(build_encoder(3, width=4), build_encoder(4, width=4), gen)
