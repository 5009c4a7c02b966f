"""Dense warp grids: sampling, resizing, inversion, composition and file I/O.

A grid is an ``(H, W, 2)`` float array. Channel 0 holds the normalized x
(column) coordinate to read from, channel 1 the normalized y (row). The
mapping is align-corners-true: -1 and +1 land on the centers of the first
and last pixel, so the identity grid is exactly representable. Grids are
backward maps: ``sample(img, grid)[i, j] = img at grid[i, j]``.
"""

from __future__ import annotations

import os
import struct

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from docdewarp.errors import DataIntegrityError, DegenerateWarpError, DimensionError, UsageError

GRID_MAGIC = b"WGRD"
GRID_VERSION = 1

MAX_HOLE_FRACTION = 0.05
FILL_MAX_ITERS = 500
FILL_TOL = 1e-4
RELAX_BAND = 3


def identity_grid(h: int, w: int, dtype=np.float64) -> np.ndarray:
    xs = np.linspace(-1.0, 1.0, w) if w > 1 else np.zeros(1)
    ys = np.linspace(-1.0, 1.0, h) if h > 1 else np.zeros(1)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1).astype(dtype)


def to_pixels(grid: np.ndarray, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Normalized grid -> (x, y) pixel coordinates in an ``h x w`` source."""
    return (grid[..., 0] + 1.0) * (w - 1) / 2.0, (grid[..., 1] + 1.0) * (h - 1) / 2.0


def to_normalized(px: np.ndarray, py: np.ndarray, h: int, w: int) -> np.ndarray:
    return np.stack([px * 2.0 / (w - 1) - 1.0, py * 2.0 / (h - 1) - 1.0], axis=-1)


def _check_grid(grid: np.ndarray) -> None:
    if grid.ndim != 3 or grid.shape[-1] != 2:
        raise DimensionError(f"grid must be (H, W, 2), got {grid.shape}")
    if not np.all(np.isfinite(grid)):
        raise DimensionError("grid contains non-finite coordinates")


def _snap(p: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    r = np.round(p)
    return np.where(np.abs(p - r) < tol, r, p)


def sample(source: np.ndarray, grid: np.ndarray, fill=0.0, mode: str = "fill") -> np.ndarray:
    """Bilinearly read ``source`` at every grid location.

    ``source`` is ``(H, W)`` or ``(H, W, C)``. With ``mode="fill"`` reads
    outside the source (beyond the border pixel centers) return ``fill``;
    with ``mode="clamp"`` coordinates are clamped to the border.
    """
    src = np.asarray(source)
    if src.size == 0 or src.ndim not in (2, 3):
        raise UsageError(f"cannot sample from an image of shape {src.shape}")
    _check_grid(grid)
    squeeze = src.ndim == 2
    if squeeze:
        src = src[..., None]
    h, w, c = src.shape
    src = src.astype(np.float64, copy=False)
    px, py = to_pixels(grid.astype(np.float64, copy=False), h, w)
    # snap round-off so lattice-aligned reads copy pixels exactly
    px = _snap(px)
    py = _snap(py)
    tol = 1e-6
    outside = (px < -tol) | (px > w - 1 + tol) | (py < -tol) | (py > h - 1 + tol)
    px = np.clip(px, 0.0, w - 1)
    py = np.clip(py, 0.0, h - 1)
    x0 = np.minimum(np.floor(px).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(py).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (px - x0)[..., None]
    fy = (py - y0)[..., None]
    out = ((src[y0, x0] * (1 - fx) + src[y0, x1] * fx) * (1 - fy)
           + (src[y1, x0] * (1 - fx) + src[y1, x1] * fx) * fy)
    if mode == "fill":
        out[outside] = np.broadcast_to(np.asarray(fill, dtype=np.float64), (c,))
    elif mode != "clamp":
        raise ValueError(f"unknown sampling mode {mode!r}")
    return out[..., 0] if squeeze else out


def _corner_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) linear interpolation weights, align-corners-true."""
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    pos = np.linspace(0.0, n_in - 1, n_out) if n_out > 1 else np.zeros(1)
    i0 = np.minimum(np.floor(pos).astype(int), n_in - 2)
    lam = pos - i0
    rows = np.arange(n_out)
    m[rows, i0] += 1.0 - lam
    m[rows, i0 + 1] += lam
    return m


def upsample_grid(grid: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Resize a grid to ``target_h x target_w`` by bilinear interpolation.

    Coordinates stay normalized against the same source image, so the result
    can be sampled directly at the new resolution. Works for shrinking too.
    """
    _check_grid(grid)
    if target_h < 2 or target_w < 2:
        raise UsageError(f"target size must be at least 2x2, got {target_h}x{target_w}")
    ry = _corner_matrix(grid.shape[0], target_h)
    rx = _corner_matrix(grid.shape[1], target_w)
    g = grid.astype(np.float64, copy=False)
    out = np.einsum("oh,hwc,pw->opc", ry, g, rx, optimize=True)
    return out.astype(grid.dtype if grid.dtype.kind == "f" else np.float64)


def compose(outer: np.ndarray, inner: np.ndarray) -> np.ndarray:
    """``result[i, j] = inner evaluated at outer[i, j]`` (bilinear, border-clamped)."""
    _check_grid(outer)
    _check_grid(inner)
    return sample(inner, outer, mode="clamp")


def _local_jacobian(px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Per-point 2x2 Jacobian d(target px)/d(source px) of a lattice map."""
    dxdu = np.gradient(px, axis=1)
    dxdv = np.gradient(px, axis=0)
    dydu = np.gradient(py, axis=1)
    dydv = np.gradient(py, axis=0)
    return np.stack([np.stack([dxdu, dxdv], -1), np.stack([dydu, dydv], -1)], -2)


def _fill_holes(values: np.ndarray, known: np.ndarray, relax: np.ndarray) -> np.ndarray:
    """Give every unknown pixel a value, then smooth the ``relax`` subset.

    Unknown pixels first take the value of their nearest known pixel. The
    ``relax`` pixels (holes and a thin band outside the footprint) are then
    Jacobi-averaged over their 4-neighbors until the largest update drops
    below ``FILL_TOL`` or ``FILL_MAX_ITERS`` sweeps have run. Known pixels
    never change.
    """
    if not known.any():
        raise DegenerateWarpError("inverse warp has no covered pixels")
    vals = values.copy()
    if known.all():
        return vals
    _, (iy, ix) = ndimage.distance_transform_edt(~known, return_indices=True)
    vals = vals[iy, ix]

    h, w = known.shape
    targets = np.flatnonzero(relax & ~known)
    if targets.size == 0:
        return vals
    ty, tx = np.divmod(targets, w)
    nbrs = np.stack([np.maximum(ty - 1, 0) * w + tx, np.minimum(ty + 1, h - 1) * w + tx,
                     ty * w + np.maximum(tx - 1, 0), ty * w + np.minimum(tx + 1, w - 1)], axis=1)
    flat = vals.reshape(-1, vals.shape[-1])
    for _ in range(FILL_MAX_ITERS):
        new = flat[nbrs].mean(axis=1)
        delta = np.abs(new - flat[targets]).max()
        flat[targets] = new
        if delta < FILL_TOL:
            break
    return flat.reshape(vals.shape)


def _outline_mask(forward: np.ndarray, h: int, w: int) -> np.ndarray:
    """Rasterize the polygon traced by the border of the forward map."""
    qx, qy = to_pixels(forward.astype(np.float64, copy=False), h, w)
    ring = [(qx[0, :], qy[0, :]), (qx[:, -1], qy[:, -1]), (qx[-1, ::-1], qy[-1, ::-1]), (qx[::-1, 0], qy[::-1, 0])]
    xs = np.concatenate([r[0] for r in ring])
    ys = np.concatenate([r[1] for r in ring])
    canvas = Image.new("1", (w, h), 0)
    ImageDraw.Draw(canvas).polygon(list(zip(xs.tolist(), ys.tolist())), fill=1, outline=1)
    return np.asarray(canvas, dtype=bool)


def invert_grid(forward: np.ndarray, shape: tuple[int, int] | None = None,
                return_coverage: bool = False):
    """Invert a forward map given on a regular lattice.

    ``forward[i, j]`` is where lattice point ``(i, j)`` lands in the target
    frame. The result is a grid on the target lattice (default: same size)
    whose value at each target pixel is the lattice coordinate that maps
    there. Each forward sample is splatted with bilinear weights; the value
    splatted is first-order corrected through the local Jacobian, so affine
    maps (identity, translation) invert exactly. Uncovered pixels are filled
    by neighbor averaging.

    With ``return_coverage`` also returns the boolean footprint of the
    forward map in the target frame (the region inside the mapped border,
    plus any splat coverage).
    """
    _check_grid(forward)
    hs, ws = forward.shape[:2]
    ht, wt = shape if shape is not None else (hs, ws)
    fwd = forward.astype(np.float64, copy=False)

    # supersample the forward map so neighboring splats are < 1 target px apart
    qx, qy = to_pixels(fwd, ht, wt)
    jac = _local_jacobian(qx, qy)
    stretch = np.linalg.norm(jac, ord=2, axis=(-2, -1)).max() if hs > 1 and ws > 1 else 1.0
    factor = int(np.clip(np.ceil(stretch / 0.9), 1, 8))
    if factor > 1:
        fwd = upsample_grid(fwd, factor * (hs - 1) + 1, factor * (ws - 1) + 1)
    src_lattice = identity_grid(*fwd.shape[:2])
    qx, qy = to_pixels(fwd, ht, wt)
    ux, uy = to_pixels(src_lattice, hs, ws)
    jac = _local_jacobian(qx, qy) * factor
    det = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
    ok = np.abs(det) > 1e-6
    inv = np.zeros_like(jac)
    safe = np.where(ok, det, 1.0)
    inv[..., 0, 0] = jac[..., 1, 1] / safe
    inv[..., 0, 1] = -jac[..., 0, 1] / safe
    inv[..., 1, 0] = -jac[..., 1, 0] / safe
    inv[..., 1, 1] = jac[..., 0, 0] / safe
    inv[~ok] = 0.0

    qx, qy, ux, uy = qx.ravel(), qy.ravel(), ux.ravel(), uy.ravel()
    inv = inv.reshape(-1, 2, 2)
    inside = (qx > -1.0) & (qx < wt) & (qy > -1.0) & (qy < ht)
    qx, qy, ux, uy, inv = qx[inside], qy[inside], ux[inside], uy[inside], inv[inside]
    x0 = np.floor(qx).astype(np.intp)
    y0 = np.floor(qy).astype(np.intp)
    fx, fy = qx - x0, qy - y0

    acc = np.zeros((ht, wt, 2))
    wsum = np.zeros((ht, wt))
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        tx, ty = x0 + dx, y0 + dy
        wgt = (fx if dx else 1 - fx) * (fy if dy else 1 - fy)
        valid = (tx >= 0) & (tx < wt) & (ty >= 0) & (ty < ht) & (wgt > 0)
        ex, ey = tx[valid] - qx[valid], ty[valid] - qy[valid]
        m = inv[valid]
        vx = ux[valid] + m[:, 0, 0] * ex + m[:, 0, 1] * ey
        vy = uy[valid] + m[:, 1, 0] * ex + m[:, 1, 1] * ey
        wv = wgt[valid]
        flat = ty[valid] * wt + tx[valid]
        np.add.at(wsum.reshape(-1), flat, wv)
        np.add.at(acc[..., 0].reshape(-1), flat, wv * vx)
        np.add.at(acc[..., 1].reshape(-1), flat, wv * vy)

    covered = wsum > 1e-8
    footprint = ndimage.binary_fill_holes(covered | _outline_mask(forward, ht, wt))
    holes = footprint & ~covered
    if footprint.sum() == 0:
        raise DegenerateWarpError("forward map does not reach the target frame")
    hole_frac = holes.sum() / footprint.sum()
    if hole_frac > MAX_HOLE_FRACTION:
        raise DegenerateWarpError(f"{hole_frac:.1%} of the inverse footprint is unfilled")

    vals = np.zeros((ht, wt, 2))
    vals[covered] = acc[covered] / wsum[covered][:, None]
    band = ndimage.binary_dilation(footprint, iterations=RELAX_BAND) & ~ndimage.binary_erosion(
        footprint, iterations=RELAX_BAND)
    vals = _fill_holes(vals, covered, band | holes)
    out = to_normalized(vals[..., 0], vals[..., 1], hs, ws)
    return (out, footprint) if return_coverage else out


# ------------------------------------------------------------------ file I/O

def write_grid(path: str | os.PathLike, grid: np.ndarray) -> None:
    _check_grid(grid)
    h, w = grid.shape[:2]
    payload = np.require(grid, dtype="<f4", requirements="C").tobytes()
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC + struct.pack("<HII", GRID_VERSION, h, w) + payload)


def read_grid(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != GRID_MAGIC or len(buf) < 14:
        raise DataIntegrityError(f"{path}: not a WGRD grid file")
    version, h, w = struct.unpack_from("<HII", buf, 4)
    if version != GRID_VERSION:
        raise DataIntegrityError(f"{path}: unsupported grid version {version}")
    expected = 14 + h * w * 2 * 4
    if len(buf) != expected:
        raise DataIntegrityError(f"{path}: expected {expected} bytes, found {len(buf)}")
    return np.frombuffer(buf, dtype="<f4", offset=14).reshape(h, w, 2).astype(np.float32)
