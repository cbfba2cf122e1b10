"""Solar-disk image preprocessing.

Pipeline: intensity normalization, Hough-transform disk detection, disk
masking, radial background flattening, 3x3 Gaussian smoothing, CLAHE within
the disk, and off-disk zeroing. All stages are pure functions on float64
images in [0, 1]; safe to run across images in parallel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class DiskNotFoundError(ValueError):
    """Raised when no circle wins enough Hough votes."""


@dataclass
class GrayImage:
    """Single-channel image; pixels are float64, row-major (H, W)."""
    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2 or self.pixels.size == 0:
            raise ValueError(f"expected a non-empty 2-D image, got shape {self.pixels.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class DiskGeometry:
    """Detected solar disk: center (cx, cy) and radius, in pixels."""
    cx: float
    cy: float
    r: float

    def __post_init__(self):
        if self.r <= 0:
            raise ValueError(f"disk radius must be positive, got {self.r}")

    def fits_within(self, width: int, height: int, slack: float = 2.0) -> bool:
        return (self.cx - self.r >= -slack and self.cy - self.r >= -slack
                and self.cx + self.r <= width - 1 + slack
                and self.cy + self.r <= height - 1 + slack)


@dataclass
class RadialProfile:
    """Annular-bin intensity profile over normalized radius [0, 1]."""
    bin_edges: np.ndarray      # length n_bins + 1, strictly increasing
    mean_intensity: np.ndarray
    smoothed: np.ndarray

    @property
    def bin_centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])


@dataclass
class PipelineConfig:
    mask_shrink: float = 0.01
    flatten_bins: int = 64
    blur_sigma: float = 0.7
    clahe_clip_limit: float = 2.0
    clahe_tiles: tuple = (8, 8)
    clahe_bins: int = 256


def normalize(img: GrayImage) -> GrayImage:
    """Linear min-max rescale to [0, 1]; a constant image maps to all zeros."""
    px = img.pixels
    lo, hi = px.min(), px.max()
    if hi - lo <= 0.0:
        return GrayImage(np.zeros_like(px))
    return GrayImage((px - lo) / (hi - lo))


# ---------------------------------------------------------------------------
# disk detection


_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


def _conv3x3_reflect(px: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    padded = np.pad(px, 1, mode="reflect")
    out = np.zeros_like(px)
    for i in range(3):
        for j in range(3):
            k = kernel[i, j]
            if k != 0.0:
                out += k * padded[i:i + px.shape[0], j:j + px.shape[1]]
    return out


def sobel_gradients(px: np.ndarray):
    gx = _conv3x3_reflect(px, _SOBEL_X)
    gy = _conv3x3_reflect(px, _SOBEL_X.T)
    return gx, gy, np.hypot(gx, gy)


def detect_disk(img: GrayImage, edge_percentile: float = 90.0) -> DiskGeometry:
    """Locate one dominant bright disk with a gradient-voting Hough transform.

    Edge pixels (Sobel magnitude above the given percentile) vote along their
    gradient direction over a (cy, cx, r) accumulator, with the radius swept
    across [0.30, 0.55] * min(H, W). The best cell is refined by a local
    centroid. Raises DiskNotFoundError when no cell collects enough votes.
    """
    h, w = img.pixels.shape
    smooth = gaussian_blur(img).pixels
    gx, gy, mag = sobel_gradients(smooth)
    peak = mag.max()
    if peak <= 1e-9:
        raise DiskNotFoundError("disk not found: image has no gradients")
    # percentile rule alone degenerates on mostly-flat images; keep a floor
    thr = max(np.percentile(mag, edge_percentile), 0.05 * peak)
    ys, xs = np.nonzero(mag > thr)
    if ys.size == 0:
        raise DiskNotFoundError("disk not found: no edge pixels above threshold")
    ux = gx[ys, xs] / mag[ys, xs]
    uy = gy[ys, xs] / mag[ys, xs]

    m = min(h, w)
    r_lo, r_hi = int(round(0.30 * m)), int(round(0.55 * m))
    radii = np.arange(r_lo, r_hi + 1)
    acc = np.zeros((h, w, radii.size), dtype=np.int32)
    for ri, r in enumerate(radii):
        # gradient points from dark background toward the bright interior
        cx = np.rint(xs + ux * r).astype(np.intp)
        cy = np.rint(ys + uy * r).astype(np.intp)
        ok = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
        np.add.at(acc, (cy[ok], cx[ok], np.full(ok.sum(), ri, dtype=np.intp)), 1)

    # votes scatter over neighboring cells; a 3x3x3 box sum re-concentrates them
    padded = np.pad(acc, 1)
    smoothed_acc = np.zeros_like(acc)
    for i in range(3):
        for j in range(3):
            for k in range(3):
                smoothed_acc += padded[i:i + h, j:j + w, k:k + radii.size]
    flat_peak = int(smoothed_acc.argmax())
    py, px_, pr = np.unravel_index(flat_peak, smoothed_acc.shape)
    votes = smoothed_acc[py, px_, pr]
    # a real limb contributes close to one vote per circumference pixel;
    # random edges stay far below a quarter of that
    needed = max(30.0, 0.25 * 2.0 * math.pi * radii[pr])
    if votes < needed:
        raise DiskNotFoundError(
            f"disk not found: best cell has {votes} votes, needed {needed:.0f}")

    # centroid refinement over a small neighborhood of the winning cell
    y0, y1 = max(py - 2, 0), min(py + 3, h)
    x0, x1 = max(px_ - 2, 0), min(px_ + 3, w)
    r0, r1 = max(pr - 2, 0), min(pr + 3, radii.size)
    block = acc[y0:y1, x0:x1, r0:r1].astype(np.float64)
    total = block.sum()
    gy_, gx2, gr = np.meshgrid(np.arange(y0, y1), np.arange(x0, x1),
                               radii[r0:r1], indexing="ij")
    return DiskGeometry(cx=float((block * gx2).sum() / total),
                        cy=float((block * gy_).sum() / total),
                        r=float((block * gr).sum() / total))


def make_disk_mask(geom: DiskGeometry, shape: tuple, shrink: float = 0.01) -> np.ndarray:
    """Boolean mask of pixels within r*(1 - shrink) of the disk center."""
    if not 0.0 <= shrink < 1.0:
        raise ValueError(f"shrink must be in [0, 1), got {shrink}")
    h, w = shape
    yy, xx = np.ogrid[:h, :w]
    dist2 = (xx - geom.cx) ** 2 + (yy - geom.cy) ** 2
    return dist2 <= (geom.r * (1.0 - shrink)) ** 2


# ---------------------------------------------------------------------------
# radial flattening


def _moving_average(values: np.ndarray, window: int = 5) -> np.ndarray:
    n = values.size
    out = np.empty_like(values)
    half = window // 2
    csum = np.concatenate([[0.0], np.cumsum(values)])
    for i in range(n):
        a, b = max(0, i - half), min(n, i + half + 1)
        out[i] = (csum[b] - csum[a]) / (b - a)
    return out


def radial_profile(img: GrayImage, geom: DiskGeometry, n_bins: int = 64) -> RadialProfile:
    """Mean intensity in concentric annular bins of normalized radius."""
    if n_bins < 8:
        raise ValueError(f"need at least 8 annular bins, got {n_bins}")
    h, w = img.pixels.shape
    yy, xx = np.ogrid[:h, :w]
    d = np.sqrt((xx - geom.cx) ** 2 + (yy - geom.cy) ** 2) / geom.r
    inside = d <= 1.0
    idx = np.minimum((d[inside] * n_bins).astype(np.intp), n_bins - 1)
    vals = img.pixels[inside]
    sums = np.bincount(idx, weights=vals, minlength=n_bins)
    counts = np.bincount(idx, minlength=n_bins)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    mean = np.full(n_bins, np.nan)
    nonempty = counts > 0
    mean[nonempty] = sums[nonempty] / counts[nonempty]
    if not nonempty.all():
        # empty annuli are filled by linear interpolation from populated ones
        mean[~nonempty] = np.interp(centers[~nonempty], centers[nonempty], mean[nonempty])
    return RadialProfile(bin_edges=edges, mean_intensity=mean,
                         smoothed=_moving_average(mean, window=5))


def radial_flatten(img: GrayImage, geom: DiskGeometry, n_bins: int = 64) -> GrayImage:
    """Divide on-disk pixels by the smoothed radial background estimate.

    The flattened disk is rescaled by its maximum (anchored at zero) and
    clamped to [0, 1]; off-disk pixels pass through unchanged.
    """
    profile = radial_profile(img, geom, n_bins)
    h, w = img.pixels.shape
    yy, xx = np.ogrid[:h, :w]
    d = np.sqrt((xx - geom.cx) ** 2 + (yy - geom.cy) ** 2) / geom.r
    inside = d <= 1.0
    background = np.interp(d[inside], profile.bin_centers, profile.smoothed)
    background = np.maximum(background, 1e-6)
    out = img.pixels.copy()
    ratio = img.pixels[inside] / background
    top = ratio.max()
    if top > 0.0:
        ratio = ratio / top
    out[inside] = np.clip(ratio, 0.0, 1.0)
    return GrayImage(out)


# ---------------------------------------------------------------------------
# smoothing and contrast


def gaussian_kernel3(sigma: float = 0.7) -> np.ndarray:
    ax = np.array([-1.0, 0.0, 1.0])
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma * sigma))
    return g / g.sum()


def gaussian_blur(img: GrayImage, sigma: float = 0.7) -> GrayImage:
    """3x3 sampled-Gaussian smoothing with reflected edges."""
    return GrayImage(_conv3x3_reflect(img.pixels, gaussian_kernel3(sigma)))


def _tile_lut(values: np.ndarray, clip_limit: float, n_bins: int):
    """Clipped-histogram equalization mapping for one tile.

    Returns None (identity) for empty tiles and single-bin histograms:
    equalizing a degenerate histogram must leave the tile unchanged.
    """
    if values.size == 0:
        return None
    bins = np.minimum((values * n_bins).astype(np.intp), n_bins - 1)
    hist = np.bincount(bins, minlength=n_bins).astype(np.float64)
    if (hist > 0).sum() <= 1:
        return None
    limit = clip_limit * values.size / n_bins
    excess = np.maximum(hist - limit, 0.0).sum()
    hist = np.minimum(hist, limit)
    hist += excess / n_bins
    cdf = np.cumsum(hist)
    return cdf / cdf[-1]


def clahe(img: GrayImage, mask: np.ndarray, clip_limit: float = 2.0,
          tiles: tuple = (8, 8), n_bins: int = 256) -> GrayImage:
    """Contrast-limited adaptive histogram equalization inside a mask.

    Tile mappings are built from masked pixels only and blended bilinearly
    between neighboring tiles; pixels outside the mask are left untouched.
    """
    px = img.pixels
    h, w = px.shape
    ty, tx = tiles
    tile_h, tile_w = math.ceil(h / ty), math.ceil(w / tx)

    luts = np.empty((ty, tx), dtype=object)
    for i in range(ty):
        for j in range(tx):
            ys, ye = i * tile_h, min((i + 1) * tile_h, h)
            xs, xe = j * tile_w, min((j + 1) * tile_w, w)
            sub_mask = mask[ys:ye, xs:xe]
            luts[i, j] = _tile_lut(px[ys:ye, xs:xe][sub_mask], clip_limit, n_bins)

    bins = np.minimum((px * n_bins).astype(np.intp), n_bins - 1)
    fy = np.clip((np.arange(h) + 0.5) / tile_h - 0.5, 0.0, ty - 1.0)
    fx = np.clip((np.arange(w) + 0.5) / tile_w - 0.5, 0.0, tx - 1.0)
    y0 = np.floor(fy).astype(np.intp)
    x0 = np.floor(fx).astype(np.intp)
    y1 = np.minimum(y0 + 1, ty - 1)
    x1 = np.minimum(x0 + 1, tx - 1)
    wy = (fy - y0)[:, None]
    wx = (fx - x0)[None, :]

    def mapped(tile_rows, tile_cols):
        out = np.empty_like(px)
        # group pixels by their (tile_row, tile_col) pair and gather per tile
        for i in np.unique(tile_rows):
            row_sel = tile_rows == i
            for j in np.unique(tile_cols):
                lut = luts[i, j]
                region = np.ix_(row_sel, tile_cols == j)
                out[region] = px[region] if lut is None else lut[bins[region]]
        return out

    blend = ((1 - wy) * (1 - wx) * mapped(y0, x0)
             + (1 - wy) * wx * mapped(y0, x1)
             + wy * (1 - wx) * mapped(y1, x0)
             + wy * wx * mapped(y1, x1))
    # pixels whose four surrounding tiles are all identity pass through exactly
    ident = np.array([[lut is None for lut in row] for row in luts])
    all_ident = (ident[y0[:, None], x0[None, :]] & ident[y0[:, None], x1[None, :]]
                 & ident[y1[:, None], x0[None, :]] & ident[y1[:, None], x1[None, :]])
    blend[all_ident] = px[all_ident]
    out = px.copy()
    out[mask] = np.clip(blend[mask], 0.0, 1.0)
    return GrayImage(out)


# ---------------------------------------------------------------------------
# full pipeline


def run_pipeline(img: GrayImage, config: PipelineConfig | None = None):
    """Normalize, detect the disk, flatten, smooth, equalize, zero off-disk.

    Returns (processed image, detected disk geometry). Raises
    DiskNotFoundError when detection fails.
    """
    cfg = config or PipelineConfig()
    normed = normalize(img)
    geom = detect_disk(normed)
    mask = make_disk_mask(geom, normed.pixels.shape, shrink=cfg.mask_shrink)
    flat = radial_flatten(normed, geom, n_bins=cfg.flatten_bins)
    smooth = gaussian_blur(flat, sigma=cfg.blur_sigma)
    smooth = GrayImage(np.clip(smooth.pixels, 0.0, 1.0))
    equalized = clahe(smooth, mask, clip_limit=cfg.clahe_clip_limit,
                      tiles=cfg.clahe_tiles, n_bins=cfg.clahe_bins)
    out = equalized.pixels
    out[~mask] = 0.0
    return GrayImage(out), geom
