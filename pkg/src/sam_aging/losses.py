"""Loss terms and their aggregation.

Normalization conventions (all per sample, then averaged over the batch):

* pixel: ``sqrt(sum(mask * (x - y)**2) / (C * H * W))``; the center/outer
  lambdas live in the mask weights.
* perceptual: sum over pyramid levels of ``sqrt(mean((F_l(x) - F_l(y))**2))``,
  evaluated once on center-masked and once on outer-masked images, each
  scaled by its own lambda.
* identity: ``w(delta) * (1 - cos)``, computed as ``0.5 * |e_x - e_y|**2``
  on the unit-norm embeddings.
* aging: ``((target - A(y)) / 100)**2``, ages expressed in units of 100 years.
* latent regularization: mean over the L*D entries of ``(code - w_avg)**2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import torch

from .core import LossWeights, RegionMask, center_indicator, make_region_mask
from .oracles import Oracles, resize

CSV_COLUMNS = ("step", "l2", "lpips", "reg", "id", "age", "cycle_total", "forward_total", "grand_total")


def _safe_sqrt(v: torch.Tensor) -> torch.Tensor:
    # exact 0 at 0 with a zero (not NaN) gradient there
    positive = v > 0
    return torch.where(positive, torch.where(positive, v, torch.ones_like(v)).sqrt(), torch.zeros_like(v))


def _check_same_shape(x: torch.Tensor, y: torch.Tensor) -> None:
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")


def pixel_loss_per_sample(x: torch.Tensor, y: torch.Tensor, mask: RegionMask) -> torch.Tensor:
    _check_same_shape(x, y)
    weights = mask.weights.to(x.dtype)
    if weights.shape != x.shape[-2:]:
        raise ValueError("mask resolution does not match images")
    sq = (x - y).pow(2) * weights
    return _safe_sqrt(sq.flatten(1).sum(1) / sq[0].numel())


def pixel_loss(x: torch.Tensor, y: torch.Tensor, mask: RegionMask) -> torch.Tensor:
    return pixel_loss_per_sample(x, y, mask).mean()


def feature_distance(feats_x: list[torch.Tensor], feats_y: list[torch.Tensor]) -> torch.Tensor:
    """Per-sample sum over levels of the RMS feature difference."""
    total = 0
    for fx, fy in zip(feats_x, feats_y, strict=True):
        total = total + _safe_sqrt((fx - fy).pow(2).flatten(1).mean(1))
    return total


def perceptual_loss(x: torch.Tensor, y: torch.Tensor, extractor) -> torch.Tensor:
    _check_same_shape(x, y)
    return feature_distance(extractor(x), extractor(y)).mean()


def region_perceptual_per_sample(x: torch.Tensor, y: torch.Tensor, extractor, center: torch.Tensor,
                                 center_w: float, outer_w: float) -> torch.Tensor:
    _check_same_shape(x, y)
    center = center.to(x.dtype)
    out = torch.zeros(x.shape[0], dtype=x.dtype, device=x.device)
    for plane, weight in ((center, center_w), (1.0 - center, outer_w)):
        if weight:
            out = out + weight * feature_distance(extractor(x * plane), extractor(y * plane))
    return out


def delta_age(source, target):
    """|source - target| / 100."""
    if isinstance(source, torch.Tensor) or isinstance(target, torch.Tensor):
        return (torch.as_tensor(source) - torch.as_tensor(target)).abs() / 100.0
    return abs(source - target) / 100.0


def age_weight(delta):
    """0.25 * cos(pi * delta) + 0.75; 1 for no age change, 0.5 at the maximal change."""
    if isinstance(delta, torch.Tensor):
        if bool(((delta < 0) | (delta > 1)).any()):
            raise ValueError("delta must lie in [0, 1]")
        return 0.25 * torch.cos(math.pi * delta) + 0.75
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"delta must lie in [0, 1], got {delta}")
    return 0.25 * math.cos(math.pi * delta) + 0.75


def identity_loss_per_sample(emb_x: torch.Tensor, emb_y: torch.Tensor, source, target) -> torch.Tensor:
    delta = delta_age(torch.as_tensor(source, dtype=emb_x.dtype), torch.as_tensor(target, dtype=emb_x.dtype))
    weight = age_weight(delta.clamp(0, 1)).detach()
    # 1 - cos written as half the squared chord between unit embeddings: exactly 0 when emb_x == emb_y
    return weight * 0.5 * (emb_x - emb_y).pow(2).sum(-1)


def identity_loss(x: torch.Tensor, y: torch.Tensor, source, target, embedder) -> torch.Tensor:
    return identity_loss_per_sample(embedder(x), embedder(y), source, target).mean()


def aging_loss(y: torch.Tensor, target, predictor) -> torch.Tensor:
    predicted = predictor(y)
    target = torch.as_tensor(target, dtype=predicted.dtype)
    return ((target - predicted) / 100.0).pow(2).mean()


def latent_regularization(code: torch.Tensor, mean_latent: torch.Tensor) -> torch.Tensor:
    if code.shape[-2:] != mean_latent.shape[-2:]:
        raise ValueError("latent shapes do not match")
    return (code - mean_latent.to(code.dtype)).pow(2).mean()


@dataclass
class LossBreakdown:
    """Scalar tensors. ``l2`` and ``lpips`` already carry their region lambdas."""

    l2: torch.Tensor
    lpips: torch.Tensor
    reg: torch.Tensor
    id: torch.Tensor
    age: torch.Tensor
    forward_total: torch.Tensor
    cycle_total: torch.Tensor
    grand_total: torch.Tensor
    delta_age: torch.Tensor
    id_weight: torch.Tensor

    def floats(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}

    def csv_row(self, step: int) -> list[str]:
        vals = self.floats()
        return [str(step)] + [repr(vals[c]) for c in CSV_COLUMNS[1:]]

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.floats().values())


@dataclass
class PassInputs:
    """One pass: ``y`` generated from ``code`` and compared against ``x``.

    For the cycle pass ``source_age`` is the age ``y_out`` was moved to and
    ``target_age`` the estimated age of the original input.
    """

    x: torch.Tensor
    y: torch.Tensor
    code: torch.Tensor
    source_age: torch.Tensor
    target_age: torch.Tensor


def forward_objective(sample: PassInputs, weights: LossWeights, oracles: Oracles, mean_latent: torch.Tensor,
                      center_fraction: float = 0.5, loss_resolution: int | None = None,
                      emb_x: torch.Tensor | None = None) -> LossBreakdown:
    """Weighted sum of pixel, perceptual, latent, identity and aging terms for one pass."""
    x, y = sample.x, sample.y
    if loss_resolution and loss_resolution != x.shape[-1]:
        x, y = resize(x, loss_resolution), resize(y, loss_resolution)
    res = x.shape[-1]
    mask = make_region_mask(res, center_fraction, weights.lambda_l2_center, weights.lambda_l2_outer,
                            allow_zero=True)
    l2 = pixel_loss(x, y, mask)
    lpips = region_perceptual_per_sample(x, y, oracles.perceptual, center_indicator(res, center_fraction),
                                         weights.lambda_lpips_center, weights.lambda_lpips_outer).mean()
    reg = latent_regularization(sample.code, mean_latent)
    if emb_x is None:
        emb_x = oracles.identity(x)
    source = sample.source_age.to(x.dtype)
    target = torch.as_tensor(sample.target_age, dtype=x.dtype).expand_as(source)
    ident = identity_loss_per_sample(emb_x, oracles.identity(y), source, target).mean()
    age = aging_loss(y, target, oracles.age)
    total = (l2 + lpips + weights.lambda_reg * reg + weights.lambda_id * ident + weights.lambda_age * age)
    delta = delta_age(source, target)
    zero = torch.zeros((), dtype=total.dtype)
    return LossBreakdown(l2=l2, lpips=lpips, reg=reg, id=ident, age=age, forward_total=total,
                         cycle_total=zero, grand_total=total, delta_age=delta.mean().detach(),
                         id_weight=age_weight(delta.clamp(0, 1)).mean().detach())


def total_objective(forward: LossBreakdown, cycle: LossBreakdown, weights: LossWeights) -> torch.Tensor:
    return forward.forward_total + weights.lambda_cycle * cycle.forward_total


def combine(forward: LossBreakdown, cycle: LossBreakdown | None, weights: LossWeights) -> LossBreakdown:
    """Forward-pass breakdown with the cycle pass folded into ``cycle_total``/``grand_total``."""
    if cycle is None:
        return forward
    return LossBreakdown(
        l2=forward.l2, lpips=forward.lpips, reg=forward.reg, id=forward.id, age=forward.age,
        forward_total=forward.forward_total, cycle_total=cycle.forward_total,
        grand_total=total_objective(forward, cycle, weights),
        delta_age=forward.delta_age, id_weight=forward.id_weight)

