"""Sparse control meshes and the fold / curve perturbations applied to them."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from docdewarp.errors import DegenerateWarpError
from docdewarp.grid import upsample_grid

MESH_BOUND = 1.3
MAX_RETRIES = 10
# no cell may be squeezed below this fraction of its reference size along
# any direction; stronger compression destroys detail the dewarp cannot recover
MIN_STRETCH = 0.7


@dataclass(frozen=True)
class Perturbation:
    kind: str
    anchor: tuple[float, float]
    direction: tuple[float, float]
    alpha: float
    strength: float
    radius: float


@dataclass(frozen=True)
class SparseMesh:
    """Control vertices in normalized frame coordinates, shape ``(rows, cols, 2)``."""

    positions: np.ndarray
    history: tuple[Perturbation, ...] = ()

    @property
    def rows(self) -> int:
        return self.positions.shape[0]

    @property
    def cols(self) -> int:
        return self.positions.shape[1]

    @classmethod
    def regular(cls, rows: int = 21, cols: int = 21) -> "SparseMesh":
        xs = np.linspace(-1.0, 1.0, cols)
        ys = np.linspace(-1.0, 1.0, rows)
        gx, gy = np.meshgrid(xs, ys)
        return cls(np.stack([gx, gy], axis=-1))


@dataclass
class WarpSpec:
    """Everything that determines one synthetic warp, given the page images."""

    rng_seed: int
    num_perturbations: int = 2
    kinds: tuple[str, ...] = ("fold", "curve")
    fold_alpha_range: tuple[float, float] = (0.2, 0.6)
    curve_alpha_range: tuple[float, float] = (1.5, 3.0)
    displacement_range: tuple[float, float] = (0.05, 0.25)
    doc_scale_range: tuple[float, float] = (0.70, 0.95)
    max_rotation_deg: float = 15.0
    mesh_size: int = 21
    edge_threshold: float = 0.2

    def __post_init__(self):
        for name in ("fold_alpha_range", "curve_alpha_range", "displacement_range", "doc_scale_range"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ValueError(f"{name} must be a positive interval, got {(lo, hi)}")
        if self.num_perturbations < 0:
            raise ValueError("num_perturbations must be >= 0")
        for k in self.kinds:
            if k not in ("fold", "curve"):
                raise ValueError(f"unknown perturbation kind {k!r}")


def fold_kernel(d, alpha: float):
    return alpha / (np.asarray(d) + alpha)


def curve_kernel(d, alpha: float, radius: float):
    return np.maximum(0.0, 1.0 - (np.asarray(d) / radius) ** alpha)


def cell_areas(positions: np.ndarray) -> np.ndarray:
    """Signed area of every quad cell (shoelace), positive for the regular mesh."""
    p00 = positions[:-1, :-1]
    p01 = positions[:-1, 1:]
    p11 = positions[1:, 1:]
    p10 = positions[1:, :-1]
    quad = [p00, p01, p11, p10]
    area = np.zeros(p00.shape[:2])
    for a, b in zip(quad, quad[1:] + quad[:1]):
        area += a[..., 0] * b[..., 1] - b[..., 0] * a[..., 1]
    return 0.5 * area


def cell_jacobians(positions: np.ndarray) -> np.ndarray:
    """Per-cell 2x2 Jacobian estimated from the mean horizontal and vertical edges."""
    du = 0.5 * (positions[:-1, 1:] - positions[:-1, :-1] + positions[1:, 1:] - positions[1:, :-1])
    dv = 0.5 * (positions[1:, :-1] - positions[:-1, :-1] + positions[1:, 1:] - positions[:-1, 1:])
    return np.stack([du, dv], axis=-1)


def min_stretch(positions: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Smallest singular value of each cell's map from ``reference`` to ``positions``."""
    rel = cell_jacobians(positions) @ np.linalg.inv(cell_jacobians(reference))
    return np.linalg.svd(rel, compute_uv=False)[..., -1]


def is_valid(positions: np.ndarray, reference: np.ndarray | None = None,
             min_ratio: float = MIN_STRETCH) -> bool:
    """Fold-over free, not over-compressed relative to ``reference``, in bounds."""
    areas = cell_areas(positions)
    if not np.all(areas > 0):
        return False
    if reference is not None and np.any(min_stretch(positions, reference) < min_ratio):
        return False
    boundary = np.concatenate([positions[0], positions[-1], positions[:, 0], positions[:, -1]])
    return bool(np.all(np.abs(boundary) <= MESH_BOUND))


def displace(positions: np.ndarray, pert: Perturbation) -> np.ndarray:
    """Move each vertex by ``w(d) * s * v``; ``d`` is its distance to the line
    through the anchor orthogonal to ``v``."""
    p = np.asarray(pert.anchor)
    v = np.asarray(pert.direction)
    d = np.abs((positions - p) @ v)
    if pert.kind == "fold":
        w = fold_kernel(d, pert.alpha)
    else:
        w = curve_kernel(d, pert.alpha, pert.radius)
    return positions + (w * pert.strength)[..., None] * v


def perturb_mesh(mesh: SparseMesh, kind: str, rng: np.random.Generator, spec: WarpSpec | None = None,
                 *, alpha: float | None = None, strength: float | None = None,
                 anchor=None, direction=None, reference: np.ndarray | None = None) -> SparseMesh:
    """Apply one fold or curve perturbation.

    Unspecified parameters are drawn from ``rng`` using the ranges in
    ``spec``. A result with a folded cell (or a boundary leaving
    ``[-1.3, 1.3]``) is retried with half the displacement, up to 10 times.
    Compression is measured against ``reference`` (default: the input mesh),
    so chained perturbations can pass the unperturbed mesh to bound the
    cumulative squeeze.
    """
    if kind not in ("fold", "curve"):
        raise ValueError(f"unknown perturbation kind {kind!r}")
    spec = spec if spec is not None else WarpSpec(rng_seed=0)
    pos = mesh.positions
    if anchor is None:
        anchor = pos[rng.integers(mesh.rows), rng.integers(mesh.cols)]
    if direction is None:
        theta = rng.uniform(0.0, 2 * np.pi)
        direction = (np.cos(theta), np.sin(theta))
    direction = np.asarray(direction, dtype=np.float64)
    direction = direction / np.linalg.norm(direction)
    if alpha is None:
        lo, hi = spec.fold_alpha_range if kind == "fold" else spec.curve_alpha_range
        alpha = rng.uniform(lo, hi)
    if strength is None:
        strength = rng.uniform(*spec.displacement_range)
    extent = pos.reshape(-1, 2)
    radius = 0.5 * float(np.linalg.norm(extent.max(0) - extent.min(0)))

    for _ in range(MAX_RETRIES + 1):
        pert = Perturbation(kind, (float(anchor[0]), float(anchor[1])),
                            (float(direction[0]), float(direction[1])), float(alpha), float(strength), radius)
        moved = displace(pos, pert)
        if is_valid(moved, pos if reference is None else reference):
            return replace(mesh, positions=moved, history=mesh.history + (pert,))
        strength *= 0.5
    raise DegenerateWarpError(f"{kind} perturbation still folds the mesh after {MAX_RETRIES} retries")


def frame_mesh(mesh: SparseMesh, scale: float, rotation: float, offset=(0.0, 0.0)) -> SparseMesh:
    """Place the document in the frame: scale, rotate (radians), translate."""
    c, s = np.cos(rotation), np.sin(rotation)
    rot = np.array([[c, -s], [s, c]])
    pos = scale * mesh.positions @ rot.T + np.asarray(offset)
    return replace(mesh, positions=pos)


def densify(mesh: SparseMesh, h: int, w: int) -> np.ndarray:
    """Bilinearly interpolate the vertex positions onto an ``h x w`` lattice.

    The result is the forward map flat -> warped in normalized coordinates.
    """
    return upsample_grid(mesh.positions, h, w)
