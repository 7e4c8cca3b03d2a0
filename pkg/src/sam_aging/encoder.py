"""FPN style encoders, age conditioning and the SAM composition."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .core import AGE_MAX, AGE_MIN, AGE_SCALE, check_images
from .generator import ToyGenerator, layer_groups


def _conv(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), nn.LeakyReLU(0.2))


class Map2Style(nn.Module):
    """``count`` map2style heads sharing one input map, run as grouped convolutions.

    Each head reduces the square map to a single style vector with stride-2
    convolutions followed by a linear layer; grouping keeps the heads independent.
    """

    def __init__(self, channels: int, spatial: int, style_dim: int, count: int = 1):
        super().__init__()
        self.count = count
        self.style_dim = style_dim
        n_down = int(math.log2(spatial))
        layers = []
        for i in range(n_down):
            groups = 1 if i == 0 else count
            cin = channels if i == 0 else channels * count
            layers += [nn.Conv2d(cin, channels * count, 3, 2, 1, groups=groups), nn.LeakyReLU(0.2)]
        self.convs = nn.Sequential(*layers)
        self.linear = nn.Conv2d(channels * count, style_dim * count, 1, groups=count)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not len(self.convs):
            x = x.repeat(1, self.count, 1, 1)
        out = self.linear(self.convs(x))
        return out.reshape(x.shape[0], self.count, self.style_dim)


class StyleEncoder(nn.Module):
    """Feature pyramid at three scales feeding L map2style heads.

    Coarse heads read the deepest (R/8) map, middle heads the R/4 map and
    fine heads the R/2 map, mirroring the generator's row groups.
    """

    def __init__(self, in_channels: int, num_layers: int, style_dim: int, resolution: int,
                 width: int = 32):
        super().__init__()
        if resolution < 8 or resolution & (resolution - 1):
            raise ValueError("resolution must be a power of two >= 8")
        self.in_channels = in_channels
        self.num_layers = num_layers
        self.style_dim = style_dim
        self.resolution = resolution
        self.stem = _conv(in_channels, width)
        self.body1 = nn.Sequential(_conv(width, width, 2), _conv(width, width))
        self.body2 = nn.Sequential(_conv(width, 2 * width, 2), _conv(2 * width, 2 * width))
        self.body3 = nn.Sequential(_conv(2 * width, 2 * width, 2), _conv(2 * width, 2 * width))
        self.lateral3 = nn.Conv2d(2 * width, width, 1)
        self.lateral2 = nn.Conv2d(2 * width, width, 1)
        self.lateral1 = nn.Conv2d(width, width, 1)
        self.groups = layer_groups(num_layers)
        spatial = (resolution // 8, resolution // 4, resolution // 2)
        self.styles = nn.ModuleList(
            Map2Style(width, spatial[g], style_dim, len(rows)) for g, rows in enumerate(self.groups))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_channels or x.shape[-1] != self.resolution:
            raise ValueError(f"encoder expects ({self.in_channels}, {self.resolution}, {self.resolution}) "
                             f"inputs, got {tuple(x.shape[1:])}")
        c1 = self.body1(self.stem(x))
        c2 = self.body2(c1)
        c3 = self.body3(c2)
        p3 = self.lateral3(c3)
        p2 = F.interpolate(p3, scale_factor=2, mode="nearest") + self.lateral2(c2)
        p1 = F.interpolate(p2, scale_factor=2, mode="nearest") + self.lateral1(c1)
        return torch.cat([heads(p) for heads, p in zip(self.styles, (p3, p2, p1))], 1)

    def final_layers(self) -> list[nn.Conv2d]:
        return [head.linear for head in self.styles]


def condition(image: torch.Tensor, target) -> torch.Tensor:
    """Append a constant age plane (value target/100) to a batch of images."""
    check_images(image)
    target = torch.as_tensor(target, dtype=image.dtype, device=image.device).reshape(-1)
    if target.numel() == 1:
        target = target.expand(image.shape[0])
    if target.numel() != image.shape[0]:
        raise ValueError("one target age per image expected")
    if bool(((target < AGE_MIN) | (target > AGE_MAX)).any()):
        raise ValueError(f"target ages must lie in [{AGE_MIN}, {AGE_MAX}], got {target.tolist()}")
    plane = (target / AGE_SCALE)[:, None, None, None].expand(-1, 1, *image.shape[2:])
    return torch.cat([image, plane], 1)


def uncondition(x_age: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Inverse of :func:`condition`: split back into images and target ages."""
    return x_age[:, :3], x_age[:, 3, 0, 0] * AGE_SCALE


class SamModel(nn.Module):
    """Trainable aging encoder on top of a frozen inverter and frozen generator."""

    def __init__(self, aging_encoder: StyleEncoder, inversion_encoder: StyleEncoder,
                 generator: ToyGenerator, mode: str = "residual"):
        super().__init__()
        if mode not in ("residual", "direct"):
            raise ValueError(f"unknown mode {mode!r}")
        if aging_encoder.in_channels != 4 or inversion_encoder.in_channels != 3:
            raise ValueError("aging encoder takes 4 planes, inverter takes 3")
        self.aging_encoder = aging_encoder
        self.inversion_encoder = inversion_encoder.requires_grad_(False).eval()
        self.generator = generator.requires_grad_(False)
        self.mode = mode

    @property
    def resolution(self) -> int:
        return self.generator.resolution

    def train(self, mode: bool = True):
        super().train(mode)
        self.inversion_encoder.eval()
        return self

    def latent(self, images: torch.Tensor, ages) -> torch.Tensor:
        residual = self.aging_encoder(condition(images, ages))
        if self.mode == "direct":
            return residual
        return residual + invert(self, images)

    def transform(self, images: torch.Tensor, ages) -> torch.Tensor:
        return self.generator(self.latent(images, ages))

    def forward(self, images: torch.Tensor, ages) -> torch.Tensor:
        return self.transform(images, ages)


def build_encoder(in_channels: int, num_layers: int = 8, style_dim: int = 64, resolution: int = 32,
                  width: int = 32, seed: int = 0) -> StyleEncoder:
    torch.manual_seed(seed)
    return StyleEncoder(in_channels, num_layers, style_dim, resolution, width)


def invert(model: SamModel, image: torch.Tensor) -> torch.Tensor:
    """w* from the frozen inversion encoder.

    The inverter has no trainable parameters, so for data images w* is a
    constant; when the input itself depends on trainable weights (the cycle
    pass) the gradient still reaches those weights through the input.
    """
    check_images(image, model.resolution)
    return model.inversion_encoder(image)


def encode_age_residual(model: SamModel, x_age: torch.Tensor) -> torch.Tensor:
    if model.mode != "residual":
        raise ValueError("encode_age_residual needs a residual-mode model")
    return model.aging_encoder(x_age)


def sam_transform(model: SamModel, image: torch.Tensor, target) -> torch.Tensor:
    """Residual mode: G(E_age(x ++ t) + w*); direct mode: G(E_age(x ++ t))."""
    single = image.dim() == 3
    if single:
        image = image[None]
    out = model.transform(image, target)
    return out[0] if single else out


def sam_cycle(model: SamModel, image: torch.Tensor, target, age_predictor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Forward pass to ``target`` then back to the estimated source age.

    Returns ``(y_out, y_cycle, source_age)``. Gradients flow through both passes.
    """
    with torch.no_grad():
        source_age = age_predictor(image)
    y_out = model.transform(image, target)
    y_cycle = model.transform(y_out, source_age.clamp(AGE_MIN, AGE_MAX))
    return y_out, y_cycle, source_age


def zero_residual_(encoder: StyleEncoder) -> StyleEncoder:
    """Zero the final linear layer of every head so the encoder outputs exactly 0."""
    with torch.no_grad():
        for layer in encoder.final_layers():
            layer.weight.zero_()
            layer.bias.zero_()
    return encoder


def pretrain_inverter(gen: ToyGenerator, extractor, steps: int, seed: int, width: int = 32,
                      batch: int = 32, lr: float = 1e-3, n_heldout: int = 256) -> tuple[StyleEncoder, dict]:
    """Fit the 3-plane inversion encoder by pixel + perceptual reconstruction, then freeze.

    The returned stats hold the held-out reconstruction MSE (mean and 99th
    percentile); the percentile serves as the inversion bound in tests.
    """
    from .core import derive_seed
    from .generator import toy_dataset
    from .losses import feature_distance

    encoder = build_encoder(3, gen.num_layers, gen.style_dim, gen.resolution, width,
                            seed=derive_seed(seed, "inverter-init"))
    opt = torch.optim.Adam(encoder.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(steps, 1))
    for step in range(steps):
        x = toy_dataset(gen, batch, derive_seed(seed, f"inverter-batch-{step}")).images
        y = gen(encoder(x))
        loss = F.mse_loss(y, x) + 0.1 * feature_distance(extractor(x), extractor(y)).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
    encoder.requires_grad_(False).eval()
    held = toy_dataset(gen, n_heldout, derive_seed(seed, "inverter-heldout")).images
    with torch.no_grad():
        mse = (gen(encoder(held)) - held).pow(2).flatten(1).mean(1)
    stats = {"recon_mse_mean": mse.mean().item(), "recon_mse_q99": mse.quantile(0.99).item()}
    return encoder, stats
