"""Rendering one synthetic training sample from a flat page."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from docdewarp import grid as wg
from docdewarp.metrics import ssim_maps, to_gray
from docdewarp.synth.mesh import SparseMesh, WarpSpec, densify, frame_mesh, perturb_mesh
from docdewarp.synth.pages import resize_rgb, to_uint8

_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)


@dataclass
class DocumentSample:
    flat: np.ndarray        # (S, S, 3) uint8
    warped: np.ndarray      # (S, S, 3) uint8
    gt_grid: np.ndarray     # (S, S, 2) float32 backward dewarp map into `warped`
    edge_mask: np.ndarray   # (S, S) uint8 in {0, 1}
    doc_mask: np.ndarray | None = None
    mesh: SparseMesh | None = None

    @property
    def size(self) -> int:
        return self.warped.shape[0]


def edge_ground_truth(warped: np.ndarray, doc_mask: np.ndarray, threshold: float = 0.2) -> np.ndarray:
    """Binary edge map: dilated document outline plus strong interior gradients.

    Interior edges are Sobel magnitudes above ``threshold`` times the largest
    magnitude found strictly inside the document (one pixel in from the
    outline, so the background never contributes).
    """
    mask = np.asarray(doc_mask).astype(bool)
    if mask.shape != warped.shape[:2]:
        raise ValueError(f"mask {mask.shape} and image {warped.shape[:2]} differ in size")
    st = ndimage.generate_binary_structure(2, 2)
    interior = ndimage.binary_erosion(mask, structure=st)
    outline = ndimage.binary_dilation(mask & ~interior, structure=st)

    gray = to_gray(warped)
    gx = ndimage.correlate(gray, _SOBEL_X, mode="nearest")
    gy = ndimage.correlate(gray, _SOBEL_X.T, mode="nearest")
    mag = np.hypot(gx, gy) * interior
    peak = mag.max()
    strong = mag > threshold * peak if peak > 1e-6 else np.zeros_like(mask)
    return (outline | strong).astype(np.uint8)


def _sample_framing(rng: np.random.Generator, spec: WarpSpec) -> tuple[float, float, tuple[float, float]]:
    scale = rng.uniform(*spec.doc_scale_range)
    rot = np.deg2rad(rng.uniform(-spec.max_rotation_deg, spec.max_rotation_deg))
    slack = max(0.0, 1.0 - scale)
    offset = (rng.uniform(-slack, slack) * 0.5, rng.uniform(-slack, slack) * 0.5)
    return scale, rot, offset


def build_mesh(spec: WarpSpec, rng: np.random.Generator) -> SparseMesh:
    mesh = SparseMesh.regular(spec.mesh_size, spec.mesh_size)
    scale, rot, offset = _sample_framing(rng, spec)
    mesh = frame_mesh(mesh, scale, rot, offset)
    framed = mesh.positions
    for _ in range(spec.num_perturbations):
        kind = spec.kinds[int(rng.integers(len(spec.kinds)))]
        mesh = perturb_mesh(mesh, kind, rng, spec, reference=framed)
    return mesh


def synthesize_sample(flat: np.ndarray, texture: np.ndarray, spec: WarpSpec, size: int = 256) -> DocumentSample:
    """Warp ``flat`` onto ``texture`` and return the sample with its ground truth.

    The densified mesh is the forward map (flat pixel -> position in the
    warped frame). Sampling the warped image through that same map recovers
    the flat page, so it is the ground-truth dewarp grid. The warped image
    itself is rendered through the inverse map.
    """
    if flat.size == 0 or texture.size == 0:
        raise ValueError("flat page and texture must be non-empty images")
    rng = np.random.default_rng(spec.rng_seed)
    flat_img = resize_rgb(flat, (size, size))
    flat_f = flat_img.astype(np.float64) / 255.0 if flat_img.dtype == np.uint8 else flat_img
    tex_img = resize_rgb(texture, (size, size))
    tex_f = tex_img.astype(np.float64) / 255.0 if tex_img.dtype == np.uint8 else tex_img

    mesh = build_mesh(spec, rng)
    forward = densify(mesh, size, size)
    inverse, footprint = wg.invert_grid(forward, return_coverage=True)
    doc_mask = footprint & np.all(np.abs(inverse) <= 1.0 + 1e-9, axis=-1)

    doc = wg.sample(flat_f, inverse, mode="clamp")
    warped = np.where(doc_mask[..., None], doc, tex_f)
    warped_u8 = to_uint8(warped)
    edges = edge_ground_truth(warped_u8, doc_mask, spec.edge_threshold)
    return DocumentSample(
        flat=to_uint8(flat_f),
        warped=warped_u8,
        gt_grid=forward.astype(np.float32),
        edge_mask=edges,
        doc_mask=doc_mask,
        mesh=mesh,
    )


def reconstruct(sample: DocumentSample, grid: np.ndarray | None = None) -> np.ndarray:
    """Dewarp ``sample.warped`` with ``grid`` (default: the ground truth)."""
    g = sample.gt_grid if grid is None else grid
    return wg.sample(sample.warped.astype(np.float64) / 255.0, g, fill=0.0)


def in_frame_mask(gt_grid: np.ndarray) -> np.ndarray:
    return np.all(np.abs(gt_grid) <= 1.0, axis=-1)


def reconstruction_ssim(sample: DocumentSample) -> float:
    """SSIM between the ground-truth dewarp and the flat page over the region
    whose source location lies inside the warped frame."""
    rec = reconstruct(sample)
    s_map, _ = ssim_maps(rec, sample.flat.astype(np.float64) / 255.0)
    k = sample.gt_grid.shape[0] - s_map.shape[0] + 1
    valid = ndimage.minimum_filter(in_frame_mask(sample.gt_grid).astype(np.uint8), size=k, mode="constant")
    half = k // 2
    windows = valid[half:half + s_map.shape[0], half:half + s_map.shape[1]].astype(bool)
    return float(s_map[windows].mean()) if windows.any() else float(s_map.mean())
