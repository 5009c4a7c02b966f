"""Generating, storing and reading synthetic datasets.

On disk a dataset is a flat directory::

    warped_000000.png  flat_000000.png  grid_000000.wgrd  edge_000000.png
    ...
    manifest.jsonl     one JSON record per sample (seed, warp parameters)

Every sample draws from its own generator seeded with ``(base_seed, index)``,
so serial and parallel generation write identical files, and a manifest
record is enough to regenerate its sample.
"""

from __future__ import annotations

import json
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from PIL import Image

from docdewarp import grid as wg
from docdewarp.errors import DataIntegrityError, DegenerateWarpError
from docdewarp.synth.mesh import WarpSpec
from docdewarp.synth.pages import list_images, load_rgb, synthetic_page, synthetic_texture
from docdewarp.synth.render import DocumentSample, synthesize_sample

MANIFEST = "manifest.jsonl"
MAX_ATTEMPTS = 5
_KINDS = ("warped", "flat", "grid", "edge")
_INDEX_RE = re.compile(r"^(warped|flat|grid|edge)_(\d{6})\.(png|wgrd)$")


@dataclass
class GenerationConfig:
    size: int = 256
    min_perturbations: int = 1
    max_perturbations: int = 4
    kinds: tuple[str, ...] = ("fold", "curve")
    fold_alpha_range: tuple[float, float] = (0.2, 0.6)
    curve_alpha_range: tuple[float, float] = (1.5, 3.0)
    displacement_range: tuple[float, float] = (0.05, 0.25)
    edge_threshold: float = 0.2
    flat_dir: str | None = None
    texture_dir: str | None = None

    def __post_init__(self):
        if self.size < 16:
            raise ValueError(f"sample size must be at least 16, got {self.size}")
        if not 0 <= self.min_perturbations <= self.max_perturbations:
            raise ValueError("need 0 <= min_perturbations <= max_perturbations")
        self.kinds = tuple(self.kinds)
        for name in ("fold_alpha_range", "curve_alpha_range", "displacement_range"):
            setattr(self, name, tuple(getattr(self, name)))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GenerationConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class DatasetItem:
    index: int
    warped: np.ndarray
    flat: np.ndarray
    grid: np.ndarray
    edge: np.ndarray
    record: dict = field(default_factory=dict)


def sample_seed(base_seed: int, index: int, attempt: int = 0) -> int:
    key = [base_seed, index] if attempt == 0 else [base_seed, index, attempt]
    return int(np.random.SeedSequence(key).generate_state(1, np.uint64)[0])


def _pick_image(directory: str | None, rng: np.random.Generator, size: int, make) -> tuple[np.ndarray, str]:
    if directory is None:
        return make(rng, size), "builtin"
    files = list_images(directory)
    path = files[int(rng.integers(len(files)))]
    return load_rgb(path, (size, size)), path.name


def generate_sample(base_seed: int, index: int, cfg: GenerationConfig | None = None) -> tuple[DocumentSample, dict]:
    """Generate sample ``index`` of the dataset seeded by ``base_seed``.

    A warp the inverter rejects is redrawn from a fresh sub-seed, up to
    ``MAX_ATTEMPTS`` times; the attempt number goes into the record.
    """
    cfg = cfg if cfg is not None else GenerationConfig()
    last: DegenerateWarpError | None = None
    for attempt in range(MAX_ATTEMPTS):
        seed = sample_seed(base_seed, index, attempt)
        rng = np.random.default_rng(seed)
        n = int(rng.integers(cfg.min_perturbations, cfg.max_perturbations + 1))
        flat, flat_src = _pick_image(cfg.flat_dir, rng, cfg.size, synthetic_page)
        texture, tex_src = _pick_image(cfg.texture_dir, rng, cfg.size, synthetic_texture)
        spec = WarpSpec(
            rng_seed=int(rng.integers(2 ** 63)),
            num_perturbations=n,
            kinds=cfg.kinds,
            fold_alpha_range=cfg.fold_alpha_range,
            curve_alpha_range=cfg.curve_alpha_range,
            displacement_range=cfg.displacement_range,
            edge_threshold=cfg.edge_threshold,
        )
        try:
            sample = synthesize_sample(flat, texture, spec, cfg.size)
        except DegenerateWarpError as exc:
            last = exc
            continue
        record = {
            "index": index,
            "base_seed": base_seed,
            "seed": seed,
            "attempt": attempt,
            "flat": flat_src,
            "texture": tex_src,
            "kinds": [p.kind for p in sample.mesh.history],
            "perturbations": [asdict(p) for p in sample.mesh.history],
            "spec": asdict(spec),
            "config": cfg.to_dict(),
        }
        return sample, record
    raise DegenerateWarpError(f"sample {index}: no valid warp in {MAX_ATTEMPTS} attempts ({last})")


def _generate_star(args):
    return generate_sample(*args)


def generate_samples(base_seed: int, count: int, cfg: GenerationConfig | None = None,
                     workers: int = 1, start: int = 0) -> Iterator[tuple[DocumentSample, dict]]:
    """Yield ``count`` samples in index order, optionally across processes."""
    jobs = [(base_seed, start + i, cfg) for i in range(count)]
    if workers <= 1:
        yield from map(_generate_star, jobs)
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        yield from pool.map(_generate_star, jobs)


def replay(record: dict) -> DocumentSample:
    """Regenerate the sample a manifest record describes."""
    cfg = GenerationConfig.from_dict(record["config"])
    sample, _ = generate_sample(int(record["base_seed"]), int(record["index"]), cfg)
    return sample


# ------------------------------------------------------------------ disk I/O

def _paths(directory: Path, index: int) -> dict[str, Path]:
    return {
        "warped": directory / f"warped_{index:06d}.png",
        "flat": directory / f"flat_{index:06d}.png",
        "grid": directory / f"grid_{index:06d}.wgrd",
        "edge": directory / f"edge_{index:06d}.png",
    }


def write_sample(directory: str | os.PathLike, index: int, sample: DocumentSample) -> None:
    d = Path(directory)
    p = _paths(d, index)
    Image.fromarray(sample.warped).save(p["warped"])
    Image.fromarray(sample.flat).save(p["flat"])
    wg.write_grid(p["grid"], sample.gt_grid)
    Image.fromarray((sample.edge_mask > 0).astype(np.uint8) * 255).save(p["edge"])


def write_dataset(samples: Iterable[tuple[DocumentSample, dict]], directory: str | os.PathLike) -> list[dict]:
    """Write samples and their records; returns the manifest records.

    Records are appended to an existing manifest, so a dataset can be
    extended by writing further index ranges.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    written = []
    with open(d / MANIFEST, "a", encoding="utf-8") as manifest:
        for sample, record in samples:
            write_sample(d, int(record["index"]), sample)
            manifest.write(json.dumps(record, sort_keys=True) + "\n")
            manifest.flush()
            written.append(record)
    return written


def read_manifest(directory: str | os.PathLike) -> list[dict]:
    path = Path(directory) / MANIFEST
    if not path.exists():
        return []
    records = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataIntegrityError(f"{path}:{lineno}: malformed manifest record ({exc.msg})") from None
            records[int(rec["index"])] = rec
    return [records[i] for i in sorted(records)]


def dataset_indices(directory: str | os.PathLike) -> list[int]:
    """Indices present in ``directory``; raises if any sample is incomplete."""
    d = Path(directory)
    if not d.is_dir():
        raise DataIntegrityError(f"dataset directory not found: {d}")
    seen: dict[int, set[str]] = {}
    for p in d.iterdir():
        m = _INDEX_RE.match(p.name)
        if m:
            seen.setdefault(int(m.group(2)), set()).add(m.group(1))
    for rec in read_manifest(d):
        seen.setdefault(int(rec["index"]), set())
    missing = [str(path.name) for i in sorted(seen) for kind, path in _paths(d, i).items() if kind not in seen[i]]
    if missing:
        shown = ", ".join(missing[:20]) + (" ..." if len(missing) > 20 else "")
        raise DataIntegrityError(f"{d}: incomplete dataset, {len(missing)} file(s) missing: {shown}")
    return sorted(seen)


def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im).copy()


def read_item(directory: str | os.PathLike, index: int, record: dict | None = None) -> DatasetItem:
    p = _paths(Path(directory), index)
    edge = _read_png(p["edge"])
    return DatasetItem(
        index=index,
        warped=_read_png(p["warped"]),
        flat=_read_png(p["flat"]),
        grid=wg.read_grid(p["grid"]),
        edge=(edge > 127).astype(np.uint8),
        record=record or {},
    )


def read_dataset(directory: str | os.PathLike) -> Iterator[DatasetItem]:
    """Iterate the samples of a dataset directory in index order.

    The completeness check runs before the first item is produced.
    """
    indices = dataset_indices(directory)
    records = {int(r["index"]): r for r in read_manifest(directory)}

    def items():
        for i in indices:
            yield read_item(directory, i, records.get(i))

    return items()
