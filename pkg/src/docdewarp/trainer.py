"""Training and evaluation driver.

Configuration is a ``key=value`` text file. Training fields are plain keys;
model and objective fields are addressed as ``model.<field>`` and
``objective.<field>``::

    epochs=200
    batch_size=4
    learning_rate=1e-4
    model.scale=0.25
    model.input_size=64
    objective.lam=0.9
"""

from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image

from docdewarp import grid as wg
from docdewarp.errors import ConfigError, NumericError
from docdewarp.metrics import MetricsReport, SampleMetrics, local_distortion, ms_ssim, pyramid_ssim
from docdewarp.model import IdentityGridModel, ModelConfig, build_model, parse_key_values, save_model
from docdewarp.nn import SGD, Adam, Tensor, no_grad
from docdewarp.objective import ObjectiveConfig, combined_loss
from docdewarp.synth.dataset import DatasetItem, read_dataset
from docdewarp.synth.pages import resize_rgb

LOG_COLUMNS = ("step", "epoch", "grid_loss", "edge_loss", "combined_loss", "wall_time")
FINAL_CHECKPOINT = "model.gbsu"
DIAGNOSTIC_CHECKPOINT = "diagnostic.gbsu"


@dataclass
class TrainConfig:
    epochs: int = 1
    batch_size: int = 4
    learning_rate: float = 1e-4
    optimizer: str = "adam"
    momentum: float = 0.9
    seed: int = 0
    max_steps: int = 0
    val_fraction: float = 0.1
    checkpoint_every: int = 0
    data_path: str = ""
    out_dir: str = "run"
    log_path: str = ""
    model: ModelConfig = field(default_factory=ModelConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.epochs < 0 or self.max_steps < 0 or self.checkpoint_every < 0:
            raise ConfigError("epochs, max_steps and checkpoint_every must be >= 0")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError(f"val_fraction must be in [0, 1), got {self.val_fraction}")

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name in ("model", "objective"):
                lines += [f"{f.name}.{sub.name}={getattr(value, sub.name)}" for sub in fields(value)]
            else:
                lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, overrides: dict[str, str] | None = None) -> "TrainConfig":
        sections: dict[str, list[str]] = {"": [], "model": [], "objective": []}
        entries = [ln for ln in text.splitlines()]
        entries += [f"{k}={v}" for k, v in (overrides or {}).items()]
        for raw in entries:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key = line.split("=", 1)[0].strip()
            prefix, _, rest = key.partition(".")
            if rest and prefix in ("model", "objective"):
                sections[prefix].append(line[line.index(".") + 1:])
            else:
                sections[""].append(line)
        model = ModelConfig(**parse_key_values("\n".join(sections["model"]), ModelConfig))
        objective = ObjectiveConfig(**parse_key_values("\n".join(sections["objective"]), ObjectiveConfig))
        top = parse_key_values("\n".join(sections[""]), cls, exclude=("model", "objective"))
        return cls(model=model, objective=objective, **top)


@dataclass
class TrainLogRecord:
    step: int
    epoch: int
    grid_loss: float
    edge_loss: float | None
    combined_loss: float
    wall_time: float

    def row(self) -> list[str]:
        edge = "" if self.edge_loss is None else f"{self.edge_loss:.9g}"
        return [str(self.step), str(self.epoch), f"{self.grid_loss:.9g}", edge,
                f"{self.combined_loss:.9g}", f"{self.wall_time:.3f}"]


@dataclass
class TrainResult:
    model: object
    log: list[TrainLogRecord]
    checkpoint: Path
    train_indices: list[int]
    val_indices: list[int]


# ------------------------------------------------------------------ data

@dataclass
class Batchable:
    images: np.ndarray   # (N, 3, S, S) float32 in [0, 1]
    grids: np.ndarray    # (N, 2, S, S) float32
    edges: np.ndarray    # (N, 1, S, S) float32 in {0, 1}


def image_to_input(img: np.ndarray, size: int) -> np.ndarray:
    """uint8 or float RGB image -> ``(3, size, size)`` float32 in [0, 1]."""
    arr = resize_rgb(img, (size, size))
    arr = arr.astype(np.float32) / 255.0 if arr.dtype == np.uint8 else arr.astype(np.float32)
    return arr.transpose(2, 0, 1)


def prepare(items: Sequence[DatasetItem], size: int) -> Batchable:
    """Stack dataset items at the model input size."""
    images, grids, edges = [], [], []
    for it in items:
        images.append(image_to_input(it.warped, size))
        g = it.grid if it.grid.shape[:2] == (size, size) else wg.upsample_grid(it.grid, size, size)
        grids.append(g.astype(np.float32).transpose(2, 0, 1))
        e = it.edge
        if e.shape != (size, size):
            e = np.asarray(Image.fromarray(e.astype(np.uint8) * 255).resize((size, size), Image.NEAREST)) > 127
        edges.append(e.astype(np.float32)[None])
    return Batchable(np.stack(images), np.stack(grids), np.stack(edges))


def split_indices(n: int, val_fraction: float) -> tuple[list[int], list[int]]:
    """Index-based split: the last ``floor(n * val_fraction)`` samples validate."""
    n_val = int(math.floor(n * val_fraction))
    return list(range(n - n_val)), list(range(n - n_val, n))


# ------------------------------------------------------------------ training

def make_optimizer(cfg: TrainConfig, params):
    if cfg.optimizer == "adam":
        return Adam(params, lr=cfg.learning_rate)
    return SGD(params, lr=cfg.learning_rate, momentum=cfg.momentum)


def train(cfg: TrainConfig, items: Sequence[DatasetItem] | None = None,
          on_step: Callable[[TrainLogRecord], None] | None = None) -> TrainResult:
    """Train a model from scratch; returns the model, its log and the final checkpoint path.

    ``items`` overrides ``cfg.data_path``. Training stops after ``cfg.epochs``
    epochs or ``cfg.max_steps`` optimizer steps, whichever comes first
    (``max_steps = 0`` means no step cap).
    """
    if items is None:
        if not cfg.data_path:
            raise ConfigError("no training data: set data_path")
        items = list(read_dataset(cfg.data_path))
    items = list(items)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = Path(cfg.log_path) if cfg.log_path else out_dir / "train_log.csv"
    (out_dir / "train_config.txt").write_text(cfg.to_text(), encoding="utf-8")

    train_idx, val_idx = split_indices(len(items), cfg.val_fraction)
    if cfg.epochs > 0 and not train_idx:
        raise ConfigError("training split is empty")
    data = prepare([items[i] for i in train_idx], cfg.model.input_size) if train_idx else None

    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    model = build_model(cfg.model, seed=int(seeds[0].generate_state(1)[0]))
    shuffle_rng = np.random.default_rng(seeds[1])
    opt = make_optimizer(cfg, model.parameters())

    log: list[TrainLogRecord] = []
    start = time.perf_counter()
    step = 0
    with open(log_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        done = cfg.epochs == 0
        epoch = 0
        while not done:
            epoch += 1
            order = shuffle_rng.permutation(len(train_idx))
            for lo in range(0, len(order), cfg.batch_size):
                sel = order[lo:lo + cfg.batch_size]
                out = model(Tensor(data.images[sel]))
                loss = combined_loss(out, data.grids[sel], data.edges[sel], cfg.objective)
                total = float(loss.total.data)
                if not math.isfinite(total):
                    save_model(out_dir / DIAGNOSTIC_CHECKPOINT, model)
                    raise NumericError(f"non-finite loss at step {step + 1} (grid={loss.grid}, edge={loss.edge}); "
                                       f"parameters saved to {out_dir / DIAGNOSTIC_CHECKPOINT}")
                opt.zero_grad()
                loss.total.backward()
                opt.step()
                step += 1
                rec = TrainLogRecord(step, epoch, loss.grid, loss.edge, total, time.perf_counter() - start)
                log.append(rec)
                writer.writerow(rec.row())
                fh.flush()
                if on_step is not None:
                    on_step(rec)
                if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    save_model(out_dir / f"step_{step:06d}.gbsu", model)
                if cfg.max_steps and step >= cfg.max_steps:
                    done = True
                    break
            if epoch >= cfg.epochs:
                done = True
    final = out_dir / FINAL_CHECKPOINT
    save_model(final, model)
    return TrainResult(model, log, final, train_idx, val_idx)


def read_log(path: str | os.PathLike) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# ------------------------------------------------------------------ evaluation

def predict_grid(model, image: np.ndarray) -> np.ndarray:
    """Model grid for one RGB image, as an ``(S, S, 2)`` float64 array."""
    size = model.config.input_size
    x = image_to_input(image, size)[None]
    with no_grad():
        out = model(Tensor(x))
    return out.grid.data[0].transpose(1, 2, 0).astype(np.float64)


def rectify(image: np.ndarray, grid: np.ndarray, native: bool, size: int | None = None) -> np.ndarray:
    """Sample ``image`` through ``grid``.

    With ``native`` the grid is upsampled to ``size`` (default: the image's own
    size) and the full-resolution image is sampled; otherwise the image is
    first resized to the grid's size.
    """
    img = image.astype(np.float64) / 255.0 if image.dtype == np.uint8 else image.astype(np.float64)
    if native:
        h, w = size if size is not None else img.shape[:2]
        g = grid if grid.shape[:2] == (h, w) else wg.upsample_grid(grid, h, w)
        return wg.sample(img, g, fill=0.0)
    gh, gw = grid.shape[:2]
    return wg.sample(resize_rgb(img, (gh, gw)), grid, fill=0.0)


def evaluate(model, items: Sequence[DatasetItem], original_resolution: bool = True) -> MetricsReport:
    """Rectify every item with ``model`` and score it against its flat page.

    With ``original_resolution`` the predicted grid is upsampled to the flat
    page's size and the warped image is sampled at its native resolution;
    otherwise everything is compared at the model's input size.
    """
    report = MetricsReport()
    for it in items:
        if it.flat is None:
            report.skipped += 1
            continue
        grid = predict_grid(model, it.warped)
        flat = it.flat.astype(np.float64) / 255.0 if it.flat.dtype == np.uint8 else it.flat
        if original_resolution:
            rect = rectify(it.warped, grid, native=True, size=flat.shape[:2])
        else:
            rect = rectify(it.warped, grid, native=False)
            flat = resize_rgb(flat, grid.shape[:2])
        levels = pyramid_ssim(rect, flat)
        ld = None
        if it.grid is not None:
            gt = it.grid.astype(np.float64)
            pred = grid if grid.shape == gt.shape else wg.upsample_grid(grid, *gt.shape[:2])
            mask = np.all(np.abs(gt) <= 1.0, axis=-1)
            ld = local_distortion(pred, gt, mask=mask, source_size=it.warped.shape[:2])
        report.add(SampleMetrics(f"{it.index:06d}", levels, ms_ssim(rect, flat), ld))
    return report


def identity_baseline(items: Sequence[DatasetItem], input_size: int,
                      original_resolution: bool = True) -> MetricsReport:
    """Scores of the unrectified input (identity grid), the floor any model must beat."""
    stub = IdentityGridModel(ModelConfig(input_size=input_size, architecture="identity"))
    return evaluate(stub, items, original_resolution)


# ------------------------------------------------------------------ ablations

def ablation_presets(base: ModelConfig | None = None) -> dict[str, ModelConfig]:
    """The full model and its three ablations, otherwise identical to ``base``."""
    base = base if base is not None else ModelConfig()
    base = replace(base, gate_enabled=True, bifurcated=True, decoder_shared_weights=False, architecture="stacked")
    return {
        "full": base,
        "no_gate": replace(base, gate_enabled=False),
        "shared_decoders": replace(base, decoder_shared_weights=True),
        "single_decoder": replace(base, bifurcated=False),
    }
