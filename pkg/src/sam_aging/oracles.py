"""Frozen auxiliary networks: age predictor, identity embedder, perceptual features.

The desk-scale stand-ins are trained here on toy-generator images and then
frozen.  Real pretrained networks can be dropped in behind the same call
signatures (images in [-1, 1] -> ages / unit embeddings / feature lists).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .core import Checkpoint, derive_seed, module_arrays, torch_generator
from .generator import ToyGenerator, sample_latents, toy_dataset, PARAM_RANGE

log = logging.getLogger(__name__)


def resize(images: torch.Tensor, resolution: int) -> torch.Tensor:
    if images.shape[-1] == resolution:
        return images
    return F.interpolate(images, size=(resolution, resolution), mode="bilinear", align_corners=False)


def center_crop(images: torch.Tensor, fraction: float) -> torch.Tensor:
    size = images.shape[-1]
    crop = max(1, int(round(size * fraction)))
    start = (size - crop) // 2
    return images[..., start:start + crop, start:start + crop]


class AgePredictor(nn.Module):
    """Small convolutional age regressor; outputs years."""

    def __init__(self, input_resolution: int = 32, width: int = 16):
        super().__init__()
        self.input_resolution = input_resolution
        self.width = width
        w = width
        self.features = nn.Sequential(
            nn.Conv2d(3, w, 3, 1, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(w, 2 * w, 3, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * w, 4 * w, 3, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(4 * w, 4 * w, 3, 2, 1), nn.LeakyReLU(0.2),
        )
        spatial = input_resolution // 8
        self.head = nn.Sequential(nn.Linear(4 * w * spatial * spatial, 64), nn.LeakyReLU(0.2), nn.Linear(64, 1))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = self.features(resize(images, self.input_resolution))
        return 50.0 + 100.0 * self.head(x.flatten(1))[:, 0]


class IdentityEmbedder(nn.Module):
    """Center-crop, resize, embed, L2-normalize."""

    def __init__(self, crop_fraction: float = 0.7, input_resolution: int = 24, embed_dim: int = 32,
                 width: int = 16):
        super().__init__()
        self.crop_fraction = crop_fraction
        self.input_resolution = input_resolution
        self.embed_dim = embed_dim
        w = width
        self.features = nn.Sequential(
            nn.Conv2d(3, w, 3, 1, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(w, 2 * w, 3, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * w, 2 * w, 3, 2, 1), nn.LeakyReLU(0.2),
        )
        spatial = input_resolution // 4
        self.head = nn.Sequential(nn.Linear(2 * w * spatial * spatial, 64), nn.LeakyReLU(0.2),
                                  nn.Linear(64, embed_dim))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = resize(center_crop(images, self.crop_fraction), self.input_resolution)
        return F.normalize(self.head(self.features(x).flatten(1)), dim=1)


class PerceptualExtractor(nn.Module):
    """Fixed random-weight pyramid. Level i has ``channels[i]`` maps at resolution R / 2**i."""

    def __init__(self, channels: tuple[int, ...] = (16, 32, 32), seed: int = 0):
        super().__init__()
        self.channels = tuple(channels)
        g = torch_generator(seed)
        convs = []
        cin = 3
        for cout in self.channels:
            conv = nn.Conv2d(cin, cout, 3, 1, 1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * (2.0 / (cin * 9)) ** 0.5)
                conv.bias.zero_()
            convs.append(conv)
            cin = cout
        self.convs = nn.ModuleList(convs)
        self.requires_grad_(False)

    def forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        x = images
        for i, conv in enumerate(self.convs):
            if i > 0:
                x = F.avg_pool2d(x, 2)
            x = F.relu(conv(x))
            feats.append(x)
        return feats

    def feature_shapes(self, resolution: int) -> list[tuple[int, int, int]]:
        return [(c, resolution >> i, resolution >> i) for i, c in enumerate(self.channels)]


@dataclass
class Oracles:
    age: AgePredictor
    identity: IdentityEmbedder
    perceptual: PerceptualExtractor

    def modules(self) -> dict[str, nn.Module]:
        return {"age": self.age, "identity": self.identity, "perceptual": self.perceptual}

    def freeze(self) -> "Oracles":
        for m in self.modules().values():
            m.requires_grad_(False).eval()
        return self


def predict_age(predictor: AgePredictor, image: torch.Tensor) -> torch.Tensor:
    single = image.dim() == 3
    out = predictor(image[None] if single else image)
    return out[0] if single else out


def identity_embedding(embedder: IdentityEmbedder, image: torch.Tensor) -> torch.Tensor:
    single = image.dim() == 3
    out = embedder(image[None] if single else image)
    return out[0] if single else out


def perceptual_features(extractor: PerceptualExtractor, image: torch.Tensor) -> list[torch.Tensor]:
    return extractor(image)


# ---------------------------------------------------------------------------
# pretraining of the stand-ins


def pretrain_age_predictor(gen: ToyGenerator, steps: int, seed: int, width: int = 16,
                           batch: int = 64, lr: float = 2e-3, n_heldout: int = 512) -> tuple[AgePredictor, dict]:
    """Regress exact toy ages from freshly rendered images, then freeze.

    Returns the model and ``{"heldout_mae": ...}`` measured on unseen samples.
    """
    torch.manual_seed(derive_seed(seed, "age-predictor-init"))
    model = AgePredictor(gen.resolution, width)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(steps, 1))
    for step in range(steps):
        data = toy_dataset(gen, batch, derive_seed(seed, f"age-batch-{step}"))
        images = data.images
        flip = torch.rand(batch, generator=torch_generator(derive_seed(seed, f"age-flip-{step}"))) < 0.5
        images = torch.where(flip[:, None, None, None], images.flip(-1), images)
        loss = F.mse_loss(model(images) / 100.0, data.ages / 100.0)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if step % 250 == 0:
            log.info("age predictor step %d loss %.5f", step, loss.item())
    model.requires_grad_(False).eval()
    held = toy_dataset(gen, n_heldout, derive_seed(seed, "age-heldout"))
    with torch.no_grad():
        mae = (model(held.images) - held.ages).abs().mean().item()
    log.info("age predictor (width %d) held-out MAE %.3f years", width, mae)
    return model, {"heldout_mae": mae}


def identity_pairs(gen: ToyGenerator, n: int, seed: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Two renders of the same identity at independent ages, plus a third unrelated identity."""
    lo, hi = PARAM_RANGE["ring_frequency"]
    g = torch_generator(derive_seed(seed, "freqs"))
    base = sample_latents(gen, n, derive_seed(seed, "base"))
    other = sample_latents(gen, n, derive_seed(seed, "other"))
    f1, f2, f3 = (lo + (hi - lo) * torch.rand(n, generator=g) for _ in range(3))
    with torch.no_grad():
        a = gen(gen.plant(base, ring_frequency=f1))
        b = gen(gen.plant(base, ring_frequency=f2))
        c = gen(gen.plant(other, ring_frequency=f3))
    return a, b, c


def pretrain_identity(gen: ToyGenerator, steps: int, seed: int, crop_fraction: float = 0.7,
                      width: int = 16, batch: int = 64, lr: float = 2e-3, temperature: float = 0.1,
                      n_pairs: int = 1000) -> tuple[IdentityEmbedder, dict]:
    """Contrastive training: identity = (position, radius, hue), ring frequency is the nuisance.

    The returned stats are cosine similarities on ``n_pairs`` fresh pairs.
    """
    torch.manual_seed(derive_seed(seed, "identity-init"))
    model = IdentityEmbedder(crop_fraction, width=width)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(steps, 1))
    labels = torch.arange(batch)
    for step in range(steps):
        a, b, _ = identity_pairs(gen, batch, derive_seed(seed, f"identity-batch-{step}"))
        ea, eb = model(a), model(b)
        logits = ea @ eb.T / temperature
        loss = 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels))
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if step % 200 == 0:
            log.info("identity step %d loss %.4f", step, loss.item())
    model.requires_grad_(False).eval()
    a, b, c = identity_pairs(gen, n_pairs, derive_seed(seed, "identity-heldout"))
    with torch.no_grad():
        ea, eb, ec = model(a), model(b), model(c)
    same = (ea * eb).sum(1)
    diff = (ea * ec).sum(1)
    stats = {"same_mean": same.mean().item(), "same_q05": same.quantile(0.05).item(),
             "diff_mean": diff.mean().item(), "diff_q95": diff.quantile(0.95).item()}
    log.info("identity embedder stats %s", stats)
    return model, stats


def oracle_checkpoint(module: nn.Module, kind: str, stats: dict | None = None, **shape) -> Checkpoint:
    extra = {f"stat_{k}": repr(float(v)) for k, v in (stats or {}).items()}
    extra.update({k: str(v) for k, v in shape.items()})
    return Checkpoint(arrays=module_arrays(module), kind=kind, extra=extra)


def age_predictor_from_checkpoint(ckpt: Checkpoint) -> AgePredictor:
    model = AgePredictor(int(ckpt.extra["input_resolution"]), int(ckpt.extra["width"]))
    model.load_state_dict(ckpt.state_dict(""))
    return model.requires_grad_(False).eval()


def identity_from_checkpoint(ckpt: Checkpoint) -> IdentityEmbedder:
    model = IdentityEmbedder(float(ckpt.extra["crop_fraction"]), width=int(ckpt.extra.get("width", 16)))
    model.load_state_dict(ckpt.state_dict(""))
    return model.requires_grad_(False).eval()


def perceptual_from_checkpoint(ckpt: Checkpoint) -> PerceptualExtractor:
    channels = tuple(int(c) for c in ckpt.extra["channels"].split(","))
    model = PerceptualExtractor(channels)
    model.load_state_dict(ckpt.state_dict(""))
    return model.requires_grad_(False).eval()
