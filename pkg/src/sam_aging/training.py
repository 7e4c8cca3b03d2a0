"""Training loop: target sampling, forward + cycle passes, RAdam with Lookahead."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core import (AGE_MAX, AGE_MIN, Checkpoint, TrainConfig, derive_seed, module_arrays,
                   rng_from_text, rng_state_to_text, save_checkpoint)
from .encoder import SamModel
from .generator import ToyDataset
from .losses import CSV_COLUMNS, LossBreakdown, PassInputs, combine, forward_objective
from .oracles import Oracles

log = logging.getLogger(__name__)


class Ranger:
    """RAdam inner steps with Lookahead slow weights synced every ``k`` steps."""

    def __init__(self, params, lr: float = 1e-3, k: int = 5, alpha: float = 0.5):
        self.params = [p for p in params if p.requires_grad]
        self.inner = torch.optim.RAdam(self.params, lr=lr)
        self.k = k
        self.alpha = alpha
        self.slow = [p.detach().clone() for p in self.params]
        self.counter = 0

    def zero_grad(self) -> None:
        self.inner.zero_grad(set_to_none=True)

    @torch.no_grad()
    def step(self) -> None:
        self.inner.step()
        self.counter += 1
        if self.counter % self.k == 0:
            for p, slow in zip(self.params, self.slow):
                slow.add_(p - slow, alpha=self.alpha)
                p.copy_(slow)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"optim/counter": np.array(self.counter, dtype=np.int64)}
        for i, slow in enumerate(self.slow):
            out[f"optim/slow/{i}"] = slow.numpy().copy()
        for i, state in self.inner.state_dict()["state"].items():
            for key, value in state.items():
                out[f"optim/inner/{i}/{key}"] = torch.as_tensor(value).numpy().copy()
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.counter = int(arrays["optim/counter"])
        for i, slow in enumerate(self.slow):
            slow.copy_(torch.from_numpy(arrays[f"optim/slow/{i}"]))
        state: dict[int, dict[str, torch.Tensor]] = {}
        for name, value in arrays.items():
            if name.startswith("optim/inner/"):
                _, _, idx, key = name.split("/")
                state.setdefault(int(idx), {})[key] = torch.from_numpy(value.copy())
        sd = self.inner.state_dict()
        sd["state"] = state
        self.inner.load_state_dict(sd)


@dataclass
class TrainState:
    step: int
    optimizer: Ranger
    rng: np.random.Generator
    running: dict[str, float] = field(default_factory=dict)

    def update_running(self, breakdown: LossBreakdown, momentum: float = 0.98) -> None:
        for key, value in breakdown.floats().items():
            prev = self.running.get(key, value)
            self.running[key] = momentum * prev + (1 - momentum) * value


def sample_target_age(rng: np.random.Generator, source_age: float, p_same: float,
                      age_min: float = AGE_MIN, age_max: float = AGE_MAX) -> float:
    """Keep the (estimated) source age with probability ``p_same``, else draw U(age_min, age_max)."""
    if not 0.0 <= p_same <= 1.0:
        raise ValueError("p_same must lie in [0, 1]")
    if rng.random() < p_same:
        return float(source_age)
    return float(rng.uniform(age_min, age_max))


def sample_target_ages(rng: np.random.Generator, source_ages: torch.Tensor, p_same: float,
                       age_min: float = AGE_MIN, age_max: float = AGE_MAX) -> torch.Tensor:
    """Batch version: one keep-the-source decision per batch, as in the training recipe."""
    if not 0.0 <= p_same <= 1.0:
        raise ValueError("p_same must lie in [0, 1]")
    if rng.random() < p_same:
        return source_ages.clone()
    draws = rng.uniform(age_min, age_max, size=source_ages.shape[0])
    return torch.as_tensor(draws, dtype=source_ages.dtype)


def pass_weights(cfg: TrainConfig):
    """Loss weights for the forward and cycle passes after applying the ablation switches."""
    weights = cfg.loss_weights
    if not cfg.latent_reg:
        weights = weights.replace(lambda_reg=0.0)
    forward = weights
    if not cfg.forward_reconstruction:
        forward = weights.replace(lambda_l2_center=0.0, lambda_l2_outer=0.0,
                                  lambda_lpips_center=0.0, lambda_lpips_outer=0.0)
    return forward, weights


def compute_objective(model: SamModel, x: torch.Tensor, target_ages: torch.Tensor, oracles: Oracles,
                      cfg: TrainConfig, source_ages: torch.Tensor | None = None) -> LossBreakdown:
    """Both passes for a batch with fixed target ages. Deterministic given its inputs."""
    with torch.no_grad():
        if source_ages is None:
            source_ages = oracles.age(x)
        source_ages = source_ages.clamp(AGE_MIN, AGE_MAX)
        emb_x = oracles.identity(x)
    mean_latent = model.generator.mean_latent
    fw_weights, cyc_weights = pass_weights(cfg)
    kwargs = dict(center_fraction=cfg.center_fraction, loss_resolution=cfg.effective_loss_resolution,
                  emb_x=emb_x)

    code = model.latent(x, target_ages)
    y_out = model.generator(code)
    forward = forward_objective(PassInputs(x, y_out, code, source_ages, target_ages),
                                fw_weights, oracles, mean_latent, **kwargs)
    if not cfg.cycle:
        return forward
    code_cycle = model.latent(y_out, source_ages)
    y_cycle = model.generator(code_cycle)
    cycle = forward_objective(PassInputs(x, y_cycle, code_cycle, target_ages, source_ages),
                              cyc_weights, oracles, mean_latent, **kwargs)
    return combine(forward, cycle, cfg.loss_weights)


def train_step(model: SamModel, batch: torch.Tensor, oracles: Oracles, state: TrainState,
               cfg: TrainConfig) -> tuple[TrainState, LossBreakdown]:
    """One optimizer step on the aging encoder. Mutates ``state`` in place and returns it."""
    rng = state.rng
    flips = rng.random(batch.shape[0]) < cfg.flip_probability
    if flips.any():
        batch = batch.clone()
        batch[flips] = batch[flips].flip(-1)
    with torch.no_grad():
        source = oracles.age(batch).clamp(AGE_MIN, AGE_MAX)
    targets = sample_target_ages(rng, source, cfg.same_age_probability, cfg.age_min, cfg.age_max)

    breakdown = compute_objective(model, batch, targets, oracles, cfg, source_ages=source)
    if not breakdown.is_finite():
        raise FloatingPointError(f"non-finite loss at step {state.step}: {breakdown.floats()}")
    state.optimizer.zero_grad()
    breakdown.grand_total.backward()
    state.optimizer.step()
    state.step += 1
    state.update_running(breakdown)
    return state, breakdown


def init_state(model: SamModel, cfg: TrainConfig) -> TrainState:
    opt = Ranger(model.aging_encoder.parameters(), lr=cfg.learning_rate, k=cfg.lookahead_k,
                 alpha=cfg.lookahead_alpha)
    rng = np.random.default_rng(derive_seed(cfg.seed, "train-stream"))
    return TrainState(0, opt, rng)


def sam_checkpoint(model: SamModel, state: TrainState, cfg: TrainConfig) -> Checkpoint:
    arrays = module_arrays(model.aging_encoder, "aging_encoder/")
    arrays.update(state.optimizer.arrays())
    extra = {"mode": model.mode}
    extra.update({f"running_{k}": repr(v) for k, v in sorted(state.running.items())})
    return Checkpoint(arrays=arrays, kind="sam", config=cfg.to_dict(), step=state.step,
                      rng_state=rng_state_to_text(state.rng), extra=extra)


def restore_state(ckpt: Checkpoint, model: SamModel, cfg: TrainConfig) -> TrainState:
    """Load encoder weights and optimizer/RNG state from a SAM checkpoint."""
    model.aging_encoder.load_state_dict(ckpt.state_dict("aging_encoder/"))
    state = init_state(model, cfg)
    if "optim/counter" in ckpt.arrays:
        state.optimizer.load_arrays(ckpt.arrays)
    state.step = ckpt.step
    if ckpt.rng_state:
        state.rng = rng_from_text(ckpt.rng_state)
    state.running = {k[len("running_"):]: float(v) for k, v in ckpt.extra.items() if k.startswith("running_")}
    return state


def train(cfg: TrainConfig, dataset: ToyDataset, model: SamModel, oracles: Oracles,
          out_dir: str | os.PathLike | None = None, resume: Checkpoint | None = None) -> Checkpoint:
    """Run ``cfg.steps`` total steps (continuing from ``resume`` if given).

    Writes ``losses.csv`` and ``sam.npz`` (plus ``sam_step{N}.npz`` every
    ``cfg.checkpoint_every`` steps) into ``out_dir`` when given.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    model.train()
    state = restore_state(resume, model, cfg) if resume is not None else init_state(model, cfg)
    out = Path(out_dir) if out_dir is not None else None
    writer = None
    handle = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "losses.csv"
        appending = resume is not None and csv_path.exists()
        handle = open(csv_path, "a" if appending else "w", newline="")
        writer = csv.writer(handle, lineterminator="\n")
        if not appending:
            writer.writerow(CSV_COLUMNS)
    try:
        n = len(dataset)
        while state.step < cfg.steps:
            idx = state.rng.integers(0, n, size=cfg.batch_size)
            state, breakdown = train_step(model, dataset.images[torch.as_tensor(idx)], oracles, state, cfg)
            if writer is not None:
                writer.writerow(breakdown.csv_row(state.step))
            if state.step % 100 == 0 or state.step == cfg.steps:
                log.info("step %d grand_total %.4f age %.4f", state.step, state.running["grand_total"],
                         state.running["age"])
            if out is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                try:
                    save_checkpoint(out / f"sam_step{state.step}.npz", sam_checkpoint(model, state, cfg))
                except OSError as exc:
                    raise OSError(f"writing checkpoint at step {state.step} failed: {exc}") from exc
    finally:
        if handle is not None:
            handle.close()
    model.eval()
    ckpt = sam_checkpoint(model, state, cfg)
    if out is not None:
        try:
            save_checkpoint(out / "sam.npz", ckpt)
        except OSError as exc:
            raise OSError(f"writing final checkpoint at step {state.step} failed: {exc}") from exc
    return ckpt
