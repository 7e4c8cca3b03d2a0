"""Evaluation protocols: nearest-age selection, identity vs age gap, ablations."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .core import AGE_MAX, AGE_MIN

log = logging.getLogger(__name__)

DEFAULT_TARGETS = (10.0, 30.0, 50.0, 70.0, 90.0)
DEFAULT_GAPS = (0.0, 20.0, 40.0, 60.0)


def select_nearest_age(predicted, target: float) -> int:
    """Index of the prediction closest to ``target``; ties go to the lowest index."""
    predicted = np.asarray(predicted, dtype=np.float64).reshape(-1)
    if predicted.size == 0:
        raise ValueError("no candidates to select from")
    return int(np.argmin(np.abs(predicted - target)))


def candidate_grid(n_candidates: int = 80, age_min: float = AGE_MIN, age_max: float = AGE_MAX) -> np.ndarray:
    if n_candidates < 1:
        raise ValueError("need at least one candidate")
    return np.linspace(age_min, age_max, n_candidates)


@torch.no_grad()
def candidate_ages(model, image: torch.Tensor, predictor, n_candidates: int = 80,
                   chunk: int = 80) -> np.ndarray:
    """Predicted age of each grid output for one source image."""
    grid = torch.as_tensor(candidate_grid(n_candidates), dtype=image.dtype)
    preds = []
    for start in range(0, len(grid), chunk):
        ages = grid[start:start + chunk]
        outputs = model.transform(image[None].expand(len(ages), -1, -1, -1), ages)
        preds.append(predictor(outputs).double())
    return torch.cat(preds).numpy()


def aging_accuracy(model, images: torch.Tensor, targets=DEFAULT_TARGETS, predictor=None,
                   n_candidates: int = 80) -> dict[float, float]:
    """Mean |target - predicted| per target after nearest-age selection among the grid outputs."""
    if predictor is None:
        raise ValueError("an evaluation predictor is required")
    targets = [float(t) for t in targets]
    totals = np.zeros(len(targets))
    for x in images:
        preds = candidate_ages(model, x, predictor, n_candidates)
        for j, t in enumerate(targets):
            totals[j] += abs(t - preds[select_nearest_age(preds, t)])
    return {t: float(totals[j] / len(images)) for j, t in enumerate(targets)}


def gap_target(source: float, gap: float, age_min: float = AGE_MIN, age_max: float = AGE_MAX) -> float:
    """Target ``gap`` years from ``source``; goes down when up would leave the range."""
    up, down = source + gap, source - gap
    if up <= age_max:
        return up
    if down >= age_min:
        return down
    # neither fits: head to whichever endpoint is farther away
    return age_max if age_max - source >= source - age_min else age_min


@torch.no_grad()
def identity_vs_age_gap(model, images: torch.Tensor, gaps=DEFAULT_GAPS, embedder=None,
                        predictor=None) -> dict[float, float]:
    """Mean cosine between the identity embeddings of each input and its output ``gap`` years away."""
    if embedder is None or predictor is None:
        raise ValueError("identity embedder and age predictor are required")
    gaps = [float(g) for g in gaps]
    sources = predictor(images).double().clamp(AGE_MIN, AGE_MAX).numpy()
    emb_x = embedder(images)
    out = {}
    for g in gaps:
        targets = torch.tensor([gap_target(float(s), g) for s in sources], dtype=images.dtype)
        emb_y = embedder(model.transform(images, targets))
        cos = (emb_x * emb_y).sum(1).double().numpy()
        out[g] = float(np.sum(cos) / len(cos))
    return out


def write_aging_csv(result: dict[float, float], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["target", "mae"])
        for t, mae in result.items():
            w.writerow([repr(t), repr(mae)])


def write_gap_csv(result: dict[float, float], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["gap", "mean_cosine"])
        for g, cos in result.items():
            w.writerow([repr(g), repr(cos)])


def read_metric_csv(path: str | os.PathLike) -> dict[float, float]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return {float(a): float(b) for a, b in rows[1:]}


@dataclass(frozen=True)
class AblationVariant:
    """A named set of :class:`TrainConfig` overrides."""

    name: str
    overrides: dict = field(default_factory=dict)


STANDARD_VARIANTS = (
    AblationVariant("sam"),
    AblationVariant("sam_direct", {"mode": "direct"}),
    AblationVariant("no_forward_recon", {"forward_reconstruction": False}),
    AblationVariant("no_cycle", {"cycle": False}),
    AblationVariant("no_latent_reg", {"latent_reg": False}),
)


@dataclass
class AblationRow:
    variant: str
    aging: dict[float, float]
    identity: dict[float, float]

    @property
    def mean_mae(self) -> float:
        return float(np.mean(list(self.aging.values())))

    @property
    def mean_cosine(self) -> float:
        return float(np.mean(list(self.identity.values())))


def ablation_run(cfg, variants, run, images: torch.Tensor, targets=DEFAULT_TARGETS, gaps=DEFAULT_GAPS,
                 out_dir: str | os.PathLike | None = None, n_candidates: int = 80) -> list[AblationRow]:
    """Train each variant from the same seed and data, then evaluate it.

    ``run`` is a :class:`sam_aging.pipeline.Run` holding the frozen networks.
    """
    from .pipeline import evaluate_model, train_model

    rows = []
    for variant in variants:
        vcfg = cfg.replace(**variant.overrides)
        sub = os.path.join(out_dir, variant.name) if out_dir is not None else None
        log.info("ablation variant %s", variant.name)
        model, _ = train_model(run, vcfg, sub)
        aging, ident = evaluate_model(run, model, images, targets, gaps, n_candidates)
        rows.append(AblationRow(variant.name, aging, ident))
    if out_dir is not None:
        write_ablation_csv(rows, os.path.join(out_dir, "ablation.csv"))
    return rows


def write_ablation_csv(rows: list[AblationRow], path: str | os.PathLike) -> None:
    if not rows:
        raise ValueError("no ablation rows")
    targets = list(rows[0].aging)
    gaps = list(rows[0].identity)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant"] + [f"mae_{t:g}" for t in targets] + ["mean_mae"]
                   + [f"cos_gap_{g:g}" for g in gaps] + ["mean_cosine"])
        for row in rows:
            w.writerow([row.variant] + [repr(row.aging[t]) for t in targets] + [repr(row.mean_mae)]
                       + [repr(row.identity[g]) for g in gaps] + [repr(row.mean_cosine)])
