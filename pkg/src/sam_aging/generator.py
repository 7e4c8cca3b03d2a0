"""Frozen style-based generator with a procedural, differentiable renderer.

The toy generator maps z -> w with two tanh layers and renders a soft disc
with concentric rings.  Rows of a W+ code are split into coarse / middle /
fine groups (see :func:`layer_groups`):

* coarse rows set the disc center and radius (the "identity" geometry),
* middle rows set the ring frequency, which is the age axis,
* fine rows set the hue.

Each scene parameter is ``lo + (hi - lo) * sigmoid(gain * z)`` where ``z`` is
the standardized projection of the group's mean row on a fixed direction.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .core import AGE_MAX, AGE_MIN, derive_seed, read_key_values, torch_generator

PARAM_NAMES = ("center_x", "center_y", "radius", "ring_frequency", "hue")
PARAM_GROUP = {"center_x": 0, "center_y": 0, "radius": 0, "ring_frequency": 1, "hue": 2}
PARAM_RANGE = {
    "center_x": (-0.15, 0.15),
    "center_y": (-0.15, 0.15),
    "radius": (0.55, 0.85),
    "ring_frequency": (1.0, 3.0),
    "hue": (0.0, 0.8),
}
IDENTITY_PARAMS = ("center_x", "center_y", "radius", "hue")
SIGMOID_GAIN = 1.7
EDGE_SHARPNESS = 25.0
RING_AMPLITUDE = 0.25
BACKGROUND = -0.8


def layer_groups(num_layers: int) -> tuple[range, range, range]:
    """Split rows into (coarse, middle, fine) as evenly as possible, extra rows go coarse first."""
    if num_layers < 3:
        raise ValueError("need at least 3 style layers")
    base, rem = divmod(num_layers, 3)
    sizes = [base + (i < rem) for i in range(3)]
    starts = [0, sizes[0], sizes[0] + sizes[1]]
    return tuple(range(s, s + n) for s, n in zip(starts, sizes))  # type: ignore[return-value]


@dataclass(frozen=True)
class GeneratorSpec:
    num_layers: int = 8
    style_dim: int = 64
    resolution: int = 32
    seed: int = 0

    def to_text(self) -> str:
        return (f"L={self.num_layers}\nD={self.style_dim}\n"
                f"resolution={self.resolution}\nseed={self.seed}\n")

    @classmethod
    def from_text(cls, text: str) -> "GeneratorSpec":
        kv = read_key_values(text)
        return cls(int(kv["L"]), int(kv["D"]), int(kv["resolution"]), int(kv["seed"]))

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "GeneratorSpec":
        return cls.from_text(Path(path).read_text())


@dataclass
class ToySceneParams:
    """Per-sample scene parameters, each a tensor of shape (N,)."""

    center_x: torch.Tensor
    center_y: torch.Tensor
    radius: torch.Tensor
    ring_frequency: torch.Tensor
    hue: torch.Tensor

    def as_dict(self) -> dict[str, torch.Tensor]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    @classmethod
    def from_values(cls, **values) -> "ToySceneParams":
        return cls(**{k: torch.as_tensor(v, dtype=torch.float32).reshape(-1) for k, v in values.items()})


def toy_true_age(params: ToySceneParams) -> torch.Tensor:
    """Exact age of a toy scene: ring frequency mapped affinely onto [5, 100]."""
    lo, hi = PARAM_RANGE["ring_frequency"]
    return AGE_MIN + (AGE_MAX - AGE_MIN) * (params.ring_frequency - lo) / (hi - lo)


def frequency_for_age(age):
    lo, hi = PARAM_RANGE["ring_frequency"]
    return lo + (hi - lo) * (age - AGE_MIN) / (AGE_MAX - AGE_MIN)


def hue_colors(hue: torch.Tensor) -> torch.Tensor:
    """Disc color above the background, shape (N, 3), values in [0.1, 1.1]."""
    offsets = torch.arange(3, dtype=hue.dtype, device=hue.device) / 3.0
    return 0.6 + 0.5 * torch.cos(2 * math.pi * (hue[:, None] - offsets))


def render(params: ToySceneParams, resolution: int, supersample: int = 2) -> torch.Tensor:
    """Differentiable rendering of scene parameters to (N, 3, R, R) images in [-1, 1]."""
    n = resolution * supersample
    ref = params.ring_frequency
    coords = (torch.arange(n, dtype=ref.dtype, device=ref.device) + 0.5) / n * 2.0 - 1.0
    dx = coords[None, None, :] - params.center_x[:, None, None]
    dy = coords[None, :, None] - params.center_y[:, None, None]
    rho = torch.sqrt(dx * dx + dy * dy + 1e-8) / params.radius[:, None, None]
    disc = torch.sigmoid((1.0 - rho) * EDGE_SHARPNESS)
    rings = RING_AMPLITUDE * torch.sin(2 * math.pi * params.ring_frequency[:, None, None] * rho)
    color = hue_colors(params.hue)[:, :, None, None]
    image = BACKGROUND + disc[:, None] * (color + rings[:, None])
    if supersample > 1:
        image = F.avg_pool2d(image, supersample)
    return image


class ToyGenerator(nn.Module):
    """Frozen generator handle. All parameters have ``requires_grad=False``."""

    def __init__(self, num_layers: int = 8, style_dim: int = 64, resolution: int = 32, seed: int = 0,
                 mapping_bias: bool = True, supersample: int = 2, n_stats: int = 4096,
                 n_avg: int = 4096):
        super().__init__()
        self.num_layers = num_layers
        self.style_dim = style_dim
        self.resolution = resolution
        self.seed = seed
        self.supersample = supersample
        self.n_avg = n_avg
        self.groups = layer_groups(num_layers)

        g = torch_generator(seed)
        d = style_dim
        self.map_w1 = nn.Parameter(torch.randn(d, d, generator=g) * 1.5 / math.sqrt(d))
        self.map_w2 = nn.Parameter(torch.randn(d, d, generator=g) * 1.5 / math.sqrt(d))
        bias_scale = 0.2 if mapping_bias else 0.0
        self.map_b1 = nn.Parameter(torch.randn(d, generator=g) * bias_scale)
        self.map_b2 = nn.Parameter(torch.randn(d, generator=g) * bias_scale)
        directions = torch.randn(len(PARAM_NAMES), d, generator=g)
        self.directions = nn.Parameter(directions / directions.norm(dim=1, keepdim=True))
        self.proj_mean = nn.Parameter(torch.zeros(len(PARAM_NAMES)))
        self.proj_std = nn.Parameter(torch.ones(len(PARAM_NAMES)))
        self.requires_grad_(False)

        with torch.no_grad():
            z = torch.randn(n_stats, d, generator=torch_generator(derive_seed(seed, "proj-stats")))
            proj = self.map_z(z) @ self.directions.T
            self.proj_mean.copy_(proj.mean(0))
            self.proj_std.copy_(proj.std(0))
        self._avg_cache: dict[tuple[int, int], torch.Tensor] = {}

    @classmethod
    def from_spec(cls, spec: GeneratorSpec, **kwargs) -> "ToyGenerator":
        return cls(spec.num_layers, spec.style_dim, spec.resolution, spec.seed, **kwargs)

    @property
    def spec(self) -> GeneratorSpec:
        return GeneratorSpec(self.num_layers, self.style_dim, self.resolution, self.seed)

    @property
    def mean_latent(self) -> torch.Tensor:
        return average_latent(self, self.n_avg)

    def map_z(self, z: torch.Tensor) -> torch.Tensor:
        h = torch.tanh(z @ self.map_w1.T + self.map_b1)
        return 2.0 * torch.tanh(h @ self.map_w2.T + self.map_b2)

    def check_codes(self, codes: torch.Tensor) -> torch.Tensor:
        if codes.shape[-2:] != (self.num_layers, self.style_dim):
            raise ValueError(f"latent shape {tuple(codes.shape)} does not match "
                             f"(L={self.num_layers}, D={self.style_dim})")
        return codes

    def scene_params(self, codes: torch.Tensor) -> ToySceneParams:
        self.check_codes(codes)
        squeeze = codes.dim() == 2
        if squeeze:
            codes = codes[None]
        values = {}
        for k, name in enumerate(PARAM_NAMES):
            rows = self.groups[PARAM_GROUP[name]]
            mean_row = codes[:, rows.start:rows.stop].mean(1)
            z = (mean_row @ self.directions[k].to(codes.dtype) - self.proj_mean[k]) / self.proj_std[k]
            lo, hi = PARAM_RANGE[name]
            values[name] = lo + (hi - lo) * torch.sigmoid(SIGMOID_GAIN * z)
        return ToySceneParams(**values)

    def forward(self, codes: torch.Tensor) -> torch.Tensor:
        single = codes.dim() == 2
        images = render(self.scene_params(codes), self.resolution, self.supersample)
        return images[0] if single else images

    def projection_for(self, name: str, value: torch.Tensor) -> torch.Tensor:
        """Raw projection that produces parameter ``value`` (inverse of the sigmoid map)."""
        k = PARAM_NAMES.index(name)
        lo, hi = PARAM_RANGE[name]
        p = ((value - lo) / (hi - lo)).clamp(1e-6, 1 - 1e-6)
        return self.proj_mean[k] + self.proj_std[k] * torch.logit(p) / SIGMOID_GAIN

    def plant(self, codes: torch.Tensor, **targets) -> torch.Tensor:
        """Return codes whose scene parameters are moved to ``targets``.

        Each affected group is shifted by the least-norm vector in the span of
        the group's directions; the other parameters of the group keep their values.
        """
        codes = self.check_codes(codes).clone()
        current = self.scene_params(codes).as_dict()
        n = codes.shape[0]
        for g, rows in enumerate(self.groups):
            names = [p for p in PARAM_NAMES if PARAM_GROUP[p] == g]
            if not any(p in targets for p in names):
                continue
            idx = [PARAM_NAMES.index(p) for p in names]
            dirs = self.directions[idx].to(codes.dtype)  # (k, D)
            mean_row = codes[:, rows.start:rows.stop].mean(1)
            want = torch.stack([
                self.projection_for(p, torch.as_tensor(targets[p], dtype=codes.dtype).expand(n)
                                    if p in targets else current[p])
                for p in names], 1)
            gap = want - mean_row @ dirs.T
            coeffs = torch.linalg.solve(dirs @ dirs.T, gap.T).T  # (N, k)
            codes[:, rows.start:rows.stop] += (coeffs @ dirs)[:, None, :]
        return codes


def synthesize(gen: ToyGenerator, code: torch.Tensor) -> torch.Tensor:
    """G(code). Accepts (L, D) or (N, L, D)."""
    return gen(code)


def sample_latents(gen: ToyGenerator, n: int, seed: int) -> torch.Tensor:
    """W-space samples: one mapped vector per sample broadcast to all L rows."""
    z = torch.randn(n, gen.style_dim, generator=torch_generator(seed))
    with torch.no_grad():
        w = gen.map_z(z)
    return w[:, None, :].expand(n, gen.num_layers, gen.style_dim).contiguous()


def sample_latent(gen: ToyGenerator, seed: int) -> torch.Tensor:
    return sample_latents(gen, 1, seed)[0]


def average_latent(gen: ToyGenerator, n_avg: int | None = None, seed: int | None = None) -> torch.Tensor:
    """Mean of ``n_avg`` mapped samples, broadcast to (L, D) and cached on the handle."""
    n_avg = gen.n_avg if n_avg is None else n_avg
    if n_avg < 1:
        raise ValueError("n_avg must be >= 1")
    seed = derive_seed(gen.seed, "average-latent") if seed is None else seed
    key = (n_avg, seed)
    if key not in gen._avg_cache:
        gen._avg_cache[key] = sample_latents(gen, n_avg, seed).mean(0)
    return gen._avg_cache[key]


@dataclass
class ToyDataset:
    images: torch.Tensor  # (N, 3, R, R)
    codes: torch.Tensor  # (N, L, D)
    ages: torch.Tensor  # (N,) exact toy ages

    def __len__(self) -> int:
        return self.images.shape[0]


def toy_dataset(gen: ToyGenerator, n: int, seed: int, chunk: int = 512) -> ToyDataset:
    """Generator samples with ring frequency planted so ages are uniform (p in [0.01, 0.99])."""
    codes = sample_latents(gen, n, derive_seed(seed, "codes"))
    u = torch.rand(n, generator=torch_generator(derive_seed(seed, "ages")))
    lo, hi = PARAM_RANGE["ring_frequency"]
    freq = lo + (hi - lo) * (0.01 + 0.98 * u)
    with torch.no_grad():
        codes = gen.plant(codes, ring_frequency=freq)
        images = torch.cat([gen(codes[i:i + chunk]) for i in range(0, n, chunk)])
        ages = toy_true_age(gen.scene_params(codes))
    return ToyDataset(images, codes, ages)
