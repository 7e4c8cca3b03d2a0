"""Editing on top of a trained model: style mixing, multi-modal aging, patch edits."""

from __future__ import annotations

import numpy as np
import torch

from .generator import layer_groups


def default_mix_layers(num_layers: int) -> tuple[int, int]:
    """Inclusive row range swapped in multi-modal aging.

    For 18 rows this is (8, 9); otherwise the fine group.
    """
    if num_layers == 18:
        return (8, 9)
    fine = layer_groups(num_layers)[2]
    return (fine[0], fine[-1])


def _check_layers(layers: tuple[int, int], num_layers: int) -> tuple[int, int]:
    start, end = (int(v) for v in layers)
    if not 0 <= start <= end < num_layers:
        raise ValueError(f"layer range {layers} invalid for {num_layers} rows")
    return start, end


def style_mix(base, reference, layers: tuple[int, int]):
    """Copy of ``base`` with rows ``layers[0]..layers[1]`` (inclusive) taken from ``reference``.

    Works on (L, D) or (N, L, D) codes, as tensors or arrays.
    """
    if tuple(base.shape) != tuple(reference.shape):
        raise ValueError(f"code shapes differ: {tuple(base.shape)} vs {tuple(reference.shape)}")
    start, end = _check_layers(layers, base.shape[-2])
    out = base.clone() if isinstance(base, torch.Tensor) else np.array(base, copy=True)
    out[..., start:end + 1, :] = reference[..., start:end + 1, :]
    return out


@torch.no_grad()
def multimodal_transform(model, image: torch.Tensor, target: float, references,
                         layers: tuple[int, int] | None = None) -> list[torch.Tensor]:
    """One output per reference image: the input's aged code with the chosen rows
    replaced by the reference's aged code at the same target age."""
    if image.dim() == 3:
        image = image[None]
    if layers is None:
        layers = default_mix_layers(model.generator.num_layers)
    code = model.latent(image, target)
    outputs = []
    for ref in references:
        ref = ref[None] if ref.dim() == 3 else ref
        mixed = style_mix(code, model.latent(ref, target), layers)
        outputs.append(model.generator(mixed)[0])
    return outputs


def patch_edit(image: torch.Tensor, patch: torch.Tensor, position: tuple[int, int]) -> torch.Tensor:
    """Paste ``patch`` (C, h, w) into a copy of ``image`` (C, H, W) with its top-left at (x, y)."""
    if image.dim() != 3 or patch.dim() != 3 or patch.shape[0] != image.shape[0]:
        raise ValueError("image and patch must both be (C, H, W) with matching C")
    x, y = (int(v) for v in position)
    h, w = patch.shape[1:]
    H, W = image.shape[1:]
    if x < 0 or y < 0 or x + w > W or y + h > H:
        raise ValueError(f"patch of size {h}x{w} at (x={x}, y={y}) leaves the {H}x{W} image")
    out = image.clone()
    out[:, y:y + h, x:x + w] = patch
    return out


@torch.no_grad()
def edit_and_age(model, image: torch.Tensor, patch: torch.Tensor, position: tuple[int, int],
                 target: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Paste a patch, then age the edited image. Returns ``(edited, aged)``."""
    edited = patch_edit(image, patch, position)
    return edited, model.transform(edited[None], target)[0]
