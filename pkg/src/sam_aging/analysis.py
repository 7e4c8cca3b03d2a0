"""Latent-path analysis: age traces, PCA planes, linear baselines, traversals."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np
import torch
from sklearn.svm import SVC


@dataclass(frozen=True)
class TraceEntry:
    target_age: float
    code: np.ndarray  # (L, D) float64
    predicted_age: float


@dataclass
class PathTrace:
    entries: list[TraceEntry]

    def __post_init__(self):
        ages = [e.target_age for e in self.entries]
        if any(b <= a for a, b in zip(ages, ages[1:])):
            raise ValueError("trace target ages must be strictly increasing")
        shapes = {e.code.shape for e in self.entries}
        if len(shapes) > 1:
            raise ValueError(f"trace codes disagree in shape: {shapes}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def codes(self) -> np.ndarray:
        """Flattened codes, shape (n, L*D)."""
        return np.stack([e.code.reshape(-1) for e in self.entries])

    @property
    def target_ages(self) -> np.ndarray:
        return np.array([e.target_age for e in self.entries])

    @property
    def predicted_ages(self) -> np.ndarray:
        return np.array([e.predicted_age for e in self.entries])


def age_grid(spec: str) -> list[float]:
    """Parse ``a:b:step`` (inclusive of b when it lands on the grid) or a comma list."""
    if ":" in spec:
        a, b, step = (float(v) for v in spec.split(":"))
        if step <= 0:
            raise ValueError("grid step must be positive")
        n = int(np.floor((b - a) / step + 1e-9)) + 1
        return [a + i * step for i in range(n)]
    return [float(v) for v in spec.split(",") if v.strip()]


@torch.no_grad()
def trace_age_path(model, image: torch.Tensor, targets, predictor) -> PathTrace:
    """Full latent code and predicted output age for each target age."""
    targets = [float(t) for t in targets]
    if any(b <= a for a, b in zip(targets, targets[1:])):
        raise ValueError("targets must be sorted ascending")
    if image.dim() == 3:
        image = image[None]
    images = image.expand(len(targets), -1, -1, -1)
    codes = model.latent(images, torch.tensor(targets, dtype=image.dtype))
    predicted = predictor(model.generator(codes))
    return PathTrace([TraceEntry(t, c.double().numpy(), float(p))
                      for t, c, p in zip(targets, codes, predicted)])


@dataclass
class PcaPlane:
    mean: np.ndarray  # (F,)
    components: np.ndarray  # (2, F)
    variances: np.ndarray  # (2,)

    def project(self, codes: np.ndarray) -> np.ndarray:
        codes = np.asarray(codes, dtype=np.float64).reshape(len(codes), -1)
        return (codes - self.mean) @ self.components.T


def fit_pca_plane(codes: np.ndarray) -> PcaPlane:
    x = np.asarray(codes, dtype=np.float64).reshape(len(codes), -1)
    if len(x) < 2:
        raise ValueError("need at least 2 codes to fit a plane")
    mean = x.mean(0)
    centered = x - mean
    if not np.any(centered):
        raise ValueError("rank-deficient fit: all codes are identical")
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    comps = np.zeros((2, x.shape[1]))
    k = min(2, vt.shape[0])
    comps[:k] = vt[:k]
    for row in comps:
        pivot = np.argmax(np.abs(row))
        if row[pivot] < 0:
            row *= -1
    variances = np.zeros(2)
    variances[:k] = s[:k] ** 2 / (len(x) - 1)
    return PcaPlane(mean, comps, variances)


def pca_project(traces: list[PathTrace], fit_on: int = 0) -> tuple[list[np.ndarray], PcaPlane]:
    """Fit the principal plane on one trace and project every trace onto it."""
    plane = fit_pca_plane(traces[fit_on].codes)
    return [plane.project(t.codes) for t in traces], plane


@dataclass(frozen=True)
class LinearDirection:
    direction: np.ndarray  # unit vector, flattened code space
    bias: float
    shape: tuple[int, ...]

    def score(self, codes) -> np.ndarray:
        codes = np.asarray(codes, dtype=np.float64).reshape(-1, self.direction.size)
        return codes @ self.direction + self.bias

    def as_code(self) -> np.ndarray:
        return self.direction.reshape(self.shape)


def fit_linear_direction(codes, ages, threshold: float = 50.0, C: float = 1.0) -> LinearDirection:
    """Max-margin (linear SVM) boundary between codes older / not older than ``threshold``.

    Codes are centered and divided by one global scale before fitting, so the
    direction does not change under translation or uniform scaling.
    """
    codes = np.asarray(codes, dtype=np.float64)
    shape = codes.shape[1:]
    x = codes.reshape(len(codes), -1)
    labels = np.asarray(ages, dtype=np.float64) > threshold
    if labels.all() or not labels.any():
        raise ValueError("need codes on both sides of the age threshold")
    mean = x.mean(0)
    scale = (x - mean).std()
    if scale == 0:
        raise ValueError("all codes are identical")
    svm = SVC(kernel="linear", C=C, tol=1e-6)
    svm.fit((x - mean) / scale, labels)
    coef = svm.coef_[0]
    norm = np.linalg.norm(coef)
    direction = coef / norm
    bias = float(-direction @ mean + svm.intercept_[0] * scale / norm)
    return LinearDirection(direction, bias, tuple(shape))


@torch.no_grad()
def fit_run_direction(run, samples: int = 1000, threshold: float = 50.0) -> LinearDirection:
    """Linear baseline for a run: sampled generator codes labelled by the training age predictor."""
    from .core import derive_seed
    from .generator import toy_dataset

    data = toy_dataset(run.generator, samples, derive_seed(run.cfg.seed, "linear-fit"))
    ages = run.oracles.age(data.images)
    return fit_linear_direction(data.codes.double().numpy(), ages.double().numpy(), threshold)


def walk_codes(code, direction: LinearDirection, steps: int, stride: float) -> np.ndarray:
    """Codes ``code + i * stride * direction`` for i in [-steps, steps], float64."""
    base = np.asarray(code, dtype=np.float64).reshape(-1)
    offsets = np.arange(-steps, steps + 1, dtype=np.float64) * stride
    walk = base[None, :] + offsets[:, None] * direction.direction[None, :]
    return walk.reshape(len(offsets), *direction.shape)


@torch.no_grad()
def traverse(generator, code, direction: LinearDirection, steps: int, stride: float) -> torch.Tensor:
    codes = torch.from_numpy(walk_codes(code, direction, steps, stride)).float()
    return generator(codes)


def path_nonlinearity(path) -> float:
    """Largest distance of an interior code from the endpoint chord, over the chord length."""
    points = path.codes if isinstance(path, PathTrace) else np.asarray(path, dtype=np.float64)
    points = points.reshape(len(points), -1)
    if len(points) < 3:
        raise ValueError("need at least 3 codes")
    start, chord = points[0], points[-1] - points[0]
    length = np.linalg.norm(chord)
    if length == 0:
        raise ValueError("zero-length chord")
    unit = chord / length
    rel = points[1:-1] - start
    perp = rel - np.outer(rel @ unit, unit)
    return float(np.linalg.norm(perp, axis=1).max() / length)


def trace_to_csv(trace: PathTrace, path: str | os.PathLike) -> None:
    codes = trace.codes
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["target_age", "predicted_age"] + [f"c{i}" for i in range(codes.shape[1])])
        for entry, row in zip(trace.entries, codes):
            w.writerow([repr(entry.target_age), repr(entry.predicted_age)] + [repr(float(v)) for v in row])


def projection_to_csv(traces: list[PathTrace], coords: list[np.ndarray], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trace", "target_age", "pc1", "pc2"])
        for i, (trace, xy) in enumerate(zip(traces, coords)):
            for entry, (a, b) in zip(trace.entries, xy):
                w.writerow([i, repr(entry.target_age), repr(float(a)), repr(float(b))])
