import copy

import numpy as np
import pytest
import torch

from sam_aging.generator import (PARAM_NAMES, PARAM_RANGE, GeneratorSpec, ToyGenerator, ToySceneParams,
                                 average_latent, layer_groups, sample_latent, sample_latents, synthesize,
                                 toy_dataset, toy_true_age)

from toy_oracles import ring_count


def test_layer_groups():
    assert [len(g) for g in layer_groups(8)] == [3, 3, 2]
    assert [len(g) for g in layer_groups(18)] == [6, 6, 6]
    assert layer_groups(8)[2] == range(6, 8)
    with pytest.raises(ValueError):
        layer_groups(2)


def test_synthesize_deterministic(gen):
    w = average_latent(gen)
    assert torch.equal(synthesize(gen, w), synthesize(gen, w))
    assert synthesize(gen, w).shape == (3, 32, 32)


def test_synthesize_shape_mismatch(gen):
    with pytest.raises(ValueError):
        synthesize(gen, torch.zeros(7, 64))


def test_images_in_range(gen):
    images = toy_dataset(gen, 64, seed=1).images
    assert images.min() >= -1 and images.max() <= 1
    assert torch.isfinite(images).all()


def test_generator_parameters_receive_no_gradient(gen):
    code = sample_latent(gen, 3).requires_grad_(True)
    synthesize(gen, code).sum().backward()
    assert code.grad is not None and code.grad.abs().sum() > 0
    assert all(p.grad is None and not p.requires_grad for p in gen.parameters())


def test_mean_pixel_gradient_matches_finite_differences(gen):
    g64 = copy.deepcopy(gen).double()
    code = sample_latent(gen, 11).double().requires_grad_(True)
    g64(code).mean().backward()
    rng = np.random.default_rng(0)
    h = 1e-4
    for _ in range(10):
        i, j = rng.integers(0, 8), rng.integers(0, 64)
        plus, minus = code.detach().clone(), code.detach().clone()
        plus[i, j] += h
        minus[i, j] -= h
        fd = (g64(plus).mean() - g64(minus).mean()).item() / (2 * h)
        ad = code.grad[i, j].item()
        assert abs(ad - fd) <= 1e-3 * max(abs(ad), abs(fd)) or abs(ad - fd) < 1e-10


@pytest.mark.parametrize("seed", [4, 5, 6])
@pytest.mark.parametrize("freq", [1.0, 1.2, 2.0, 2.2, 2.8, 3.0])
def test_ring_count_matches_frequency(gen, freq, seed):
    # a centered disc at full radius keeps the outer ring resolvable at 32 px
    code = gen.plant(sample_latents(gen, 1, seed=seed), ring_frequency=freq, radius=0.85, center_x=0.0,
                     center_y=0.0)
    params = gen.scene_params(code)
    image = gen(code)[0]
    assert ring_count(image, params.center_x.item(), params.center_y.item(), params.radius.item()) == round(freq)


def test_plant_moves_only_the_requested_parameter(gen):
    codes = sample_latents(gen, 16, seed=5)
    before = gen.scene_params(codes)
    target = torch.linspace(1.1, 2.9, 16)
    after = gen.scene_params(gen.plant(codes, ring_frequency=target))
    assert torch.allclose(after.ring_frequency, target, atol=1e-4)
    for name in ("center_x", "center_y", "radius", "hue"):
        assert torch.allclose(getattr(after, name), getattr(before, name), atol=1e-5)


def test_true_age_affine_map():
    lo, hi = PARAM_RANGE["ring_frequency"]
    params = ToySceneParams.from_values(center_x=[0, 0, 0], center_y=[0, 0, 0], radius=[0.7] * 3,
                                        ring_frequency=[lo, hi, (lo + hi) / 2], hue=[0, 0, 0])
    assert toy_true_age(params).tolist() == [5.0, 100.0, 52.5]


def test_scene_params_within_ranges(gen):
    params = gen.scene_params(sample_latents(gen, 256, seed=6)).as_dict()
    for name in PARAM_NAMES:
        lo, hi = PARAM_RANGE[name]
        assert (params[name] >= lo).all() and (params[name] <= hi).all()


def test_sample_latent_seeded_and_broadcast(gen):
    a, b = sample_latent(gen, 9), sample_latent(gen, 9)
    assert torch.equal(a, b)
    assert a.shape == (8, 64)
    assert torch.equal(a, a[:1].expand(8, 64))
    assert not torch.equal(a, sample_latent(gen, 10))


def test_sample_latent_moments(gen):
    w = sample_latents(gen, 1000, seed=21)[:, 0].double()
    ref = sample_latents(gen, 20000, seed=22)[:, 0].double()
    se = torch.sqrt(w.var(0) / 1000 + ref.var(0) / 20000)
    assert ((w.mean(0) - ref.mean(0)).abs() <= 3 * se).all()


def test_average_latent_single_sample(gen):
    assert torch.equal(average_latent(gen, 1, seed=33), sample_latent(gen, 33))


def test_average_latent_cached_and_reproducible(gen):
    a = average_latent(gen, 64, seed=1)
    assert average_latent(gen, 64, seed=1) is a
    fresh = ToyGenerator(8, 64, 32, seed=0)
    assert torch.equal(average_latent(fresh, 64, seed=1), a)
    with pytest.raises(ValueError):
        average_latent(gen, 0)


def test_average_of_symmetric_pairs_is_mapping_fixed_point():
    odd = ToyGenerator(8, 16, 16, seed=2, mapping_bias=False, n_stats=256)
    z = torch.randn(500, 16, generator=torch.Generator().manual_seed(0))
    w = odd.map_z(torch.cat([z, -z])).mean(0)
    fixed = odd.map_z(torch.zeros(1, 16))[0]
    assert torch.equal(fixed, torch.zeros(16))
    assert torch.allclose(w, fixed, atol=1e-6)


def test_generator_spec_round_trip(tmp_path):
    spec = GeneratorSpec(18, 512, 64, 7)
    path = tmp_path / "gen.cfg"
    path.write_text(spec.to_text())
    assert GeneratorSpec.from_file(path) == spec
    assert ToyGenerator.from_spec(GeneratorSpec(8, 16, 16, 3), n_stats=64).spec == GeneratorSpec(8, 16, 16, 3)


def test_dataset_ages_are_exact(gen):
    data = toy_dataset(gen, 32, seed=3)
    assert torch.allclose(data.ages, toy_true_age(gen.scene_params(data.codes)))
    assert data.ages.min() >= 5 and data.ages.max() <= 100
