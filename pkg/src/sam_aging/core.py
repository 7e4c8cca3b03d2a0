"""Shared types, configuration, seeding and the checkpoint container."""

from __future__ import annotations

import dataclasses
import io
import json
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = 1
AGE_MIN = 5.0
AGE_MAX = 100.0
# the age plane stores target/AGE_SCALE
AGE_SCALE = 100.0


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_l2_center: float = 1.0
    lambda_l2_outer: float = 0.25
    lambda_lpips_center: float = 0.6
    lambda_lpips_outer: float = 0.1
    lambda_reg: float = 0.005
    lambda_id: float = 0.1
    lambda_age: float = 5.0
    lambda_cycle: float = 1.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{f.name} must be a non-negative finite number, got {value}")

    def replace(self, **changes) -> "LossWeights":
        return dataclasses.replace(self, **changes)

    @classmethod
    def zeros(cls) -> "LossWeights":
        return cls(**{f.name: 0.0 for f in dataclasses.fields(cls)})


# config keys that differ from the attribute names
_KEY_ALIASES = {"lr": "learning_rate", "p_same": "same_age_probability"}
_ATTR_TO_KEY = {v: k for k, v in _KEY_ALIASES.items()}


@dataclass(frozen=True)
class TrainConfig:
    """Every knob of a toy run. Serialized as flat ``key=value`` lines."""

    steps: int = 2000
    batch_size: int = 6
    learning_rate: float = 0.001
    same_age_probability: float = 0.33
    resolution: int = 32
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    age_min: float = AGE_MIN
    age_max: float = AGE_MAX
    # generator / encoder shape
    num_layers: int = 8
    style_dim: int = 64
    generator_seed: int = 0
    n_avg: int = 4096
    encoder_width: int = 16
    mode: str = "residual"
    # losses
    center_fraction: float = 0.5
    id_crop_fraction: float = 0.7
    loss_resolution: int = 0  # 0 means same as resolution
    # optimizer
    lookahead_k: int = 5
    lookahead_alpha: float = 0.5
    flip_probability: float = 0.5
    # ablation switches
    forward_reconstruction: bool = True
    cycle: bool = True
    latent_reg: bool = True
    # data and pretraining budgets
    n_train: int = 2048
    n_heldout: int = 64
    predictor_steps: int = 1500
    identity_steps: int = 800
    inverter_steps: int = 2000
    pretrain_batch: int = 32
    checkpoint_every: int = 0
    # stand-in sizes
    age_width: int = 8
    eval_age_width: int = 12
    identity_width: int = 16
    inverter_width: int = 16
    perceptual_channels: str = "8,16,16"

    def __post_init__(self):
        if not 0.0 <= self.same_age_probability <= 1.0:
            raise ValueError("same_age_probability must lie in [0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.mode not in ("residual", "direct"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not self.age_min < self.age_max:
            raise ValueError("age_min must be below age_max")

    @property
    def effective_loss_resolution(self) -> int:
        return self.loss_resolution or self.resolution

    def replace(self, **changes) -> "TrainConfig":
        weight_changes = {k: changes.pop(k) for k in list(changes) if k.startswith("lambda_")}
        cfg = dataclasses.replace(self, **changes)
        if weight_changes:
            cfg = dataclasses.replace(cfg, loss_weights=cfg.loss_weights.replace(**weight_changes))
        return cfg

    def to_dict(self) -> dict[str, str]:
        out: dict[str, str] = {}
        for f in dataclasses.fields(self):
            if f.name == "loss_weights":
                for wf in dataclasses.fields(LossWeights):
                    out[wf.name] = repr(getattr(self.loss_weights, wf.name))
            else:
                out[_ATTR_TO_KEY.get(f.name, f.name)] = _format_value(getattr(self, f.name))
        return out

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.to_dict().items())

    @classmethod
    def from_dict(cls, values: dict[str, str], base: "TrainConfig | None" = None) -> "TrainConfig":
        base = base or cls()
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        changes: dict[str, object] = {}
        for key, raw in values.items():
            name = _KEY_ALIASES.get(key, key)
            if name.startswith("lambda_"):
                if name not in {f.name for f in dataclasses.fields(LossWeights)}:
                    raise KeyError(f"unknown config key {key!r}")
                changes[name] = float(raw)
            elif name in types and name != "loss_weights":
                changes[name] = _parse_value(getattr(base, name), raw)
            else:
                raise KeyError(f"unknown config key {key!r}")
        return base.replace(**changes)

    @classmethod
    def from_file(cls, path: str | os.PathLike, base: "TrainConfig | None" = None) -> "TrainConfig":
        return cls.from_dict(read_key_values(Path(path).read_text()), base)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(template, raw: str):
    raw = raw.strip()
    if isinstance(template, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(template, int):
        return int(raw)
    if isinstance(template, float):
        return float(raw)
    return raw


def read_key_values(text: str) -> dict[str, str]:
    """Parse flat ``key=value`` text. Blank lines and ``#`` comments are skipped."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def derive_seed(seed: int, name: str) -> int:
    """Stable per-component seed so components never share a random stream."""
    return (seed * 1_000_003 + zlib.crc32(name.encode())) % (2**31 - 1)


def torch_generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed))


# ---------------------------------------------------------------------------
# region mask


@dataclass(frozen=True)
class RegionMask:
    weights: torch.Tensor  # (H, W)
    center_weight: float
    outer_weight: float


def center_box(resolution: int, center_fraction: float) -> tuple[int, int]:
    """Start and stop index of the centered rectangle along one axis."""
    if not 0.0 < center_fraction <= 1.0:
        raise ValueError("center_fraction must lie in (0, 1]")
    size = max(1, int(round(resolution * center_fraction)))
    start = (resolution - size) // 2
    return start, start + size


def make_region_mask(resolution: int, center_fraction: float = 0.5, center_w: float = 1.0,
                     outer_w: float = 0.25, allow_zero: bool = False) -> RegionMask:
    """Two-valued weight plane: ``center_w`` inside a centered box, ``outer_w`` elsewhere.

    Loss code passes ``allow_zero=True`` so a disabled term can reuse the same path.
    """
    lowest = min(center_w, outer_w)
    if lowest < 0 or (lowest == 0 and not allow_zero):
        raise ValueError("region weights must be positive")
    start, stop = center_box(resolution, center_fraction)
    weights = torch.full((resolution, resolution), float(outer_w))
    weights[start:stop, start:stop] = float(center_w)
    return RegionMask(weights, float(center_w), float(outer_w))


def center_indicator(resolution: int, center_fraction: float) -> torch.Tensor:
    start, stop = center_box(resolution, center_fraction)
    plane = torch.zeros(resolution, resolution)
    plane[start:stop, start:stop] = 1.0
    return plane


# ---------------------------------------------------------------------------
# images


def check_images(images: torch.Tensor, resolution: int | None = None) -> torch.Tensor:
    if images.dim() != 4 or images.shape[1] != 3:
        raise ValueError(f"expected images of shape (N, 3, H, W), got {tuple(images.shape)}")
    if images.shape[2] != images.shape[3]:
        raise ValueError("images must be square")
    if resolution is not None and images.shape[-1] != resolution:
        raise ValueError(f"expected resolution {resolution}, got {images.shape[-1]}")
    return images


def load_image(path: str | os.PathLike, resolution: int | None = None) -> torch.Tensor:
    """Read an 8-bit RGB PNG as a (1, 3, H, W) tensor in [-1, 1]."""
    from PIL import Image

    img = Image.open(path).convert("RGB")
    if resolution is not None and img.size != (resolution, resolution):
        img = img.resize((resolution, resolution), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 127.5 - 1.0
    return torch.from_numpy(arr).permute(2, 0, 1).unsqueeze(0).contiguous()


def save_image(image: torch.Tensor, path: str | os.PathLike) -> None:
    from PIL import Image

    if image.dim() == 4:
        image = image[0]
    arr = ((image.detach().cpu().clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr.permute(1, 2, 0).numpy()).save(path)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    """Named arrays plus a flat text metadata record."""

    arrays: dict[str, np.ndarray]
    kind: str = "encoder"
    config: dict[str, str] = field(default_factory=dict)
    step: int = 0
    rng_state: str = ""
    extra: dict[str, str] = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        if (self.kind, self.config, self.step, self.rng_state, self.extra) != \
                (other.kind, other.config, other.step, other.rng_state, other.extra):
            return False
        if self.arrays.keys() != other.arrays.keys():
            return False
        return all(arrays_identical(self.arrays[k], other.arrays[k]) for k in self.arrays)

    def state_dict(self, prefix: str) -> dict[str, torch.Tensor]:
        return {k[len(prefix):]: torch.from_numpy(v.copy()) for k, v in self.arrays.items()
                if k.startswith(prefix)}


def arrays_identical(a: np.ndarray, b: np.ndarray) -> bool:
    a, b = np.asarray(a), np.asarray(b)
    return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()


def module_arrays(module: torch.nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def _metadata_text(ckpt: Checkpoint) -> str:
    lines = [f"format_version={FORMAT_VERSION}", f"kind={ckpt.kind}", f"step={ckpt.step}"]
    if ckpt.rng_state:
        lines.append(f"rng_state={ckpt.rng_state}")
    lines += [f"extra.{k}={v}" for k, v in ckpt.extra.items()]
    lines += [f"config.{k}={v}" for k, v in ckpt.config.items()]
    return "\n".join(lines) + "\n"


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if any(k == "__metadata__" for k in ckpt.arrays):
        raise CheckpointError("array name __metadata__ is reserved")
    meta = np.frombuffer(_metadata_text(ckpt).encode("utf-8"), dtype=np.uint8)
    buffer = io.BytesIO()
    np.savez(buffer, __metadata__=meta, **ckpt.arrays)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buffer.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    with np.load(path, allow_pickle=False) as data:
        if "__metadata__" not in data.files:
            raise CheckpointError(f"{path} has no metadata record")
        meta = read_key_values(data["__metadata__"].tobytes().decode("utf-8"))
        arrays = {k: data[k] for k in data.files if k != "__metadata__"}
    version = meta.get("format_version")
    if version != str(FORMAT_VERSION):
        raise CheckpointVersionError(f"{path}: format_version {version}, expected {FORMAT_VERSION}")
    return Checkpoint(
        arrays=arrays,
        kind=meta.get("kind", ""),
        config={k[7:]: v for k, v in meta.items() if k.startswith("config.")},
        step=int(meta.get("step", 0)),
        rng_state=meta.get("rng_state", ""),
        extra={k[6:]: v for k, v in meta.items() if k.startswith("extra.")},
    )


def rng_state_to_text(rng: np.random.Generator) -> str:
    return json.dumps(rng.bit_generator.state, sort_keys=True)


def rng_from_text(text: str) -> np.random.Generator:
    state = json.loads(text)
    bitgen = getattr(np.random, state["bit_generator"])()
    bitgen.state = state
    return np.random.Generator(bitgen)


def checksum(module: torch.nn.Module) -> str:
    """CRC over every parameter and buffer; used to assert frozen-ness."""
    crc = 0
    for name, tensor in sorted(module.state_dict().items()):
        crc = zlib.crc32(name.encode(), crc)
        crc = zlib.crc32(tensor.detach().cpu().contiguous().numpy().tobytes(), crc)
    return f"{crc:08x}"
