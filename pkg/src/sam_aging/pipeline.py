"""Run directories: build or reload the frozen networks, train, evaluate.

A run directory holds everything one experiment needs::

    config.cfg          effective TrainConfig (key=value)
    generator.cfg       toy generator spec
    age_predictor.npz   training age predictor
    eval_predictor.npz  held-out evaluation predictor (different seed and width)
    identity.npz        identity embedder
    perceptual.npz      perceptual feature extractor
    inverter.npz        frozen inversion encoder
    sam_init.npz        aging encoder at step 0
    sam.npz             trained aging encoder plus optimizer/RNG state
    losses.csv, aging_accuracy.csv, aging_accuracy_step0.csv, identity_gap.csv
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .core import Checkpoint, CheckpointError, TrainConfig, derive_seed, load_checkpoint, save_checkpoint
from .encoder import SamModel, StyleEncoder, build_encoder, pretrain_inverter
from .evaluation import (DEFAULT_GAPS, DEFAULT_TARGETS, aging_accuracy, identity_vs_age_gap,
                         write_aging_csv, write_gap_csv)
from .generator import GeneratorSpec, ToyDataset, ToyGenerator, toy_dataset
from .oracles import (AgePredictor, Oracles, PerceptualExtractor, age_predictor_from_checkpoint,
                      identity_from_checkpoint, oracle_checkpoint, perceptual_from_checkpoint,
                      pretrain_age_predictor, pretrain_identity)
from .training import init_state, sam_checkpoint, train

log = logging.getLogger(__name__)

# config keys each artifact depends on; a cached artifact built under other values is rejected
_GENERATOR_KEYS = ("num_layers", "style_dim", "resolution", "generator_seed", "seed")
_ARTIFACT_KEYS = {
    "age_predictor": _GENERATOR_KEYS + ("predictor_steps", "age_width", "pretrain_batch"),
    "eval_predictor": _GENERATOR_KEYS + ("predictor_steps", "eval_age_width", "pretrain_batch"),
    "identity": _GENERATOR_KEYS + ("identity_steps", "identity_width", "id_crop_fraction", "pretrain_batch"),
    "perceptual": ("seed", "perceptual_channels"),
    "inverter": _GENERATOR_KEYS + ("inverter_steps", "inverter_width", "perceptual_channels",
                                   "pretrain_batch"),
}


def _fingerprint(cfg: TrainConfig, kind: str) -> dict[str, str]:
    values = cfg.to_dict()
    return {f"cfg_{k}": values[k] for k in _ARTIFACT_KEYS[kind]}


@dataclass
class Run:
    cfg: TrainConfig
    generator: ToyGenerator
    oracles: Oracles
    eval_predictor: AgePredictor
    inverter: StyleEncoder
    root: Path | None = None
    stats: dict[str, dict[str, float]] = field(default_factory=dict)

    def train_data(self) -> ToyDataset:
        return toy_dataset(self.generator, self.cfg.n_train, derive_seed(self.cfg.seed, "train-data"))

    def heldout_data(self) -> ToyDataset:
        return toy_dataset(self.generator, self.cfg.n_heldout, derive_seed(self.cfg.seed, "heldout-data"))


def make_generator(cfg: TrainConfig) -> ToyGenerator:
    return ToyGenerator(cfg.num_layers, cfg.style_dim, cfg.resolution, cfg.generator_seed, n_avg=cfg.n_avg)


def _channels(cfg: TrainConfig) -> tuple[int, ...]:
    return tuple(int(c) for c in cfg.perceptual_channels.split(","))


def _build_artifact(kind: str, cfg: TrainConfig, gen: ToyGenerator, perceptual=None) -> Checkpoint:
    seed = cfg.seed
    batch = cfg.pretrain_batch
    if kind == "age_predictor":
        model, stats = pretrain_age_predictor(gen, cfg.predictor_steps, derive_seed(seed, "age-predictor"),
                                              cfg.age_width, batch)
        ckpt = oracle_checkpoint(model, kind, stats, input_resolution=model.input_resolution, width=model.width)
    elif kind == "eval_predictor":
        model, stats = pretrain_age_predictor(gen, cfg.predictor_steps, derive_seed(seed, "eval-predictor"),
                                              cfg.eval_age_width, batch)
        ckpt = oracle_checkpoint(model, kind, stats, input_resolution=model.input_resolution, width=model.width)
    elif kind == "identity":
        model, stats = pretrain_identity(gen, cfg.identity_steps, derive_seed(seed, "identity"),
                                         cfg.id_crop_fraction, cfg.identity_width, batch)
        ckpt = oracle_checkpoint(model, kind, stats, crop_fraction=cfg.id_crop_fraction, width=cfg.identity_width)
    elif kind == "perceptual":
        model = PerceptualExtractor(_channels(cfg), derive_seed(seed, "perceptual"))
        ckpt = oracle_checkpoint(model, kind, channels=cfg.perceptual_channels)
    elif kind == "inverter":
        model, stats = pretrain_inverter(gen, perceptual, cfg.inverter_steps, derive_seed(seed, "inverter"),
                                         cfg.inverter_width, batch)
        ckpt = oracle_checkpoint(model, kind, stats, width=cfg.inverter_width)
    else:
        raise ValueError(f"unknown artifact {kind!r}")
    ckpt.extra.update(_fingerprint(cfg, kind))
    return ckpt


def _inverter_from_checkpoint(ckpt: Checkpoint, gen: ToyGenerator) -> StyleEncoder:
    enc = StyleEncoder(3, gen.num_layers, gen.style_dim, gen.resolution, int(ckpt.extra["width"]))
    enc.load_state_dict(ckpt.state_dict(""))
    return enc.requires_grad_(False).eval()


def _artifact(kind: str, cfg: TrainConfig, gen: ToyGenerator, root: Path | None, perceptual=None) -> Checkpoint:
    path = root / f"{kind}.npz" if root is not None else None
    if path is not None and path.exists():
        ckpt = load_checkpoint(path)
        expected = _fingerprint(cfg, kind)
        stale = {k: (ckpt.extra.get(k), v) for k, v in expected.items() if ckpt.extra.get(k) != v}
        if stale:
            raise CheckpointError(f"{path} was built with a different config: {stale}; use a fresh run dir")
        return ckpt
    log.info("building %s", kind)
    ckpt = _build_artifact(kind, cfg, gen, perceptual)
    if path is not None:
        save_checkpoint(path, ckpt)
    return ckpt


def prepare(cfg: TrainConfig, root: str | os.PathLike | None = None, with_inverter: bool = True) -> Run:
    """Load the frozen networks from ``root``, pretraining and saving whatever is missing."""
    torch.set_num_threads(1)
    out = Path(root) if root is not None else None
    gen = make_generator(cfg)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        spec_path = out / "generator.cfg"
        if spec_path.exists() and GeneratorSpec.from_file(spec_path) != gen.spec:
            raise CheckpointError(f"{spec_path} describes a different generator; use a fresh run dir")
        spec_path.write_text(gen.spec.to_text())
    ckpts = {kind: _artifact(kind, cfg, gen, out) for kind in ("age_predictor", "eval_predictor", "identity",
                                                             "perceptual")}
    perceptual = perceptual_from_checkpoint(ckpts["perceptual"])
    oracles = Oracles(age_predictor_from_checkpoint(ckpts["age_predictor"]),
                      identity_from_checkpoint(ckpts["identity"]), perceptual).freeze()
    inverter = None
    if with_inverter:
        ckpts["inverter"] = _artifact("inverter", cfg, gen, out, perceptual)
        inverter = _inverter_from_checkpoint(ckpts["inverter"], gen)
    stats = {kind: {k[5:]: float(v) for k, v in c.extra.items() if k.startswith("stat_")}
             for kind, c in ckpts.items()}
    return Run(cfg, gen, oracles, age_predictor_from_checkpoint(ckpts["eval_predictor"]), inverter, out, stats)


def new_model(run: Run, cfg: TrainConfig | None = None) -> SamModel:
    """Fresh aging encoder (seeded from the config) on top of the run's frozen networks."""
    cfg = cfg or run.cfg
    if run.inverter is None:
        raise ValueError("run was prepared without an inverter")
    enc = build_encoder(4, cfg.num_layers, cfg.style_dim, cfg.resolution, cfg.encoder_width,
                        seed=derive_seed(cfg.seed, "aging-encoder-init"))
    return SamModel(enc, run.inverter, run.generator, cfg.mode)


def load_model(run: Run, path: str | os.PathLike) -> tuple[SamModel, Checkpoint]:
    ckpt = load_checkpoint(path)
    if ckpt.kind != "sam":
        raise CheckpointError(f"{path} holds a {ckpt.kind!r} checkpoint, not a SAM one")
    cfg = TrainConfig.from_dict(ckpt.config)
    model = new_model(run, cfg)
    model.aging_encoder.load_state_dict(ckpt.state_dict("aging_encoder/"))
    return model.eval(), ckpt


def train_model(run: Run, cfg: TrainConfig | None = None, out_dir: str | os.PathLike | None = None,
                resume: str | os.PathLike | None = None) -> tuple[SamModel, Checkpoint]:
    """Train a fresh (or resumed) model; saves ``sam_init.npz`` and ``sam.npz`` under ``out_dir``."""
    cfg = cfg or run.cfg
    torch.set_num_threads(1)
    model = new_model(run, cfg)
    resume_ckpt = None
    if resume is not None:
        resume_ckpt = load_checkpoint(resume)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "config.cfg").write_text(cfg.to_text())
        if resume_ckpt is None:
            save_checkpoint(Path(out_dir) / "sam_init.npz", sam_checkpoint(model, init_state(model, cfg), cfg))
    ckpt = train(cfg, run.train_data(), model, run.oracles, out_dir, resume=resume_ckpt)
    return model.eval(), ckpt


def evaluate_model(run: Run, model: SamModel, images: torch.Tensor, targets=DEFAULT_TARGETS,
                   gaps=DEFAULT_GAPS, n_candidates: int = 80) -> tuple[dict[float, float], dict[float, float]]:
    model.eval()
    aging = aging_accuracy(model, images, targets, run.eval_predictor, n_candidates)
    ident = identity_vs_age_gap(model, images, gaps, run.oracles.identity, run.oracles.age)
    return aging, ident


@dataclass
class PipelineResult:
    run: Run
    model: SamModel
    aging: dict[float, float]
    aging_step0: dict[float, float]
    identity: dict[float, float]


def run_pipeline(cfg: TrainConfig, root: str | os.PathLike, targets=DEFAULT_TARGETS,
                 gaps=DEFAULT_GAPS, n_candidates: int = 80) -> PipelineResult:
    """Pretrain (or reload) the frozen networks, train, evaluate step 0 and final; write all CSVs."""
    root = Path(root)
    run = prepare(cfg, root)
    held = run.heldout_data().images
    init = new_model(run, cfg).eval()
    aging0 = aging_accuracy(init, held, targets, run.eval_predictor, n_candidates)
    write_aging_csv(aging0, root / "aging_accuracy_step0.csv")
    model, _ = train_model(run, cfg, root)
    aging, ident = evaluate_model(run, model, held, targets, gaps, n_candidates)
    write_aging_csv(aging, root / "aging_accuracy.csv")
    write_gap_csv(ident, root / "identity_gap.csv")
    log.info("aging MAE %s (step 0: %s)", aging, aging0)
    log.info("identity cosine by gap %s", ident)
    return PipelineResult(run, model, aging, aging0, ident)

