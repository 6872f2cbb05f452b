"""Non-differentiable image primitives: edge extraction, component labeling,
SSIM, resampling, and PNG IO.

Images are float arrays in [0, 1]: gray ``[H, W]`` or RGB ``[H, W, 3]``.
Binary maps are uint8 arrays of {0, 1}. All functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image


class ImageError(ValueError):
    pass


def to_gray(image: np.ndarray) -> np.ndarray:
    """Channel-average luminance; gray images pass through."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        return img.mean(axis=2)
    if img.ndim == 2:
        return img
    raise ImageError(f"expected [H,W] or [H,W,3] image, got shape {img.shape}")


# ---------------------------------------------------------------------------
# Canny edge extraction


def _gaussian_kernel1d(sigma: float, radius: int) -> np.ndarray:
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def _convolve2d_reflect(img: np.ndarray, kx: np.ndarray, ky: np.ndarray) -> np.ndarray:
    """Separable convolution with edge-reflected padding."""
    rx, ry = len(kx) // 2, len(ky) // 2
    pad = np.pad(img, ((ry, ry), (rx, rx)), mode="reflect")
    out = np.zeros_like(img, dtype=np.float64)
    for i, w in enumerate(ky):
        out += w * pad[i:i + img.shape[0], rx:rx + img.shape[1]]
    tmp, out = out, np.zeros_like(out)
    pad = np.pad(tmp, ((0, 0), (rx, rx)), mode="reflect")
    for j, w in enumerate(kx):
        out += w * pad[:, j:j + img.shape[1]]
    return out


_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
_SOBEL_Y = _SOBEL_X.T


def _filter3(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    pad = np.pad(img, 1, mode="reflect")
    out = np.zeros_like(img, dtype=np.float64)
    for di in range(3):
        for dj in range(3):
            if k[di, dj]:
                out += k[di, dj] * pad[di:di + img.shape[0], dj:dj + img.shape[1]]
    return out


def canny(gray: np.ndarray, gaussian_sigma: float = 1.4,
          low: float = 0.1, high: float = 0.3) -> np.ndarray:
    """Classical Canny: blur, Sobel, non-maximum suppression, hysteresis.

    ``low``/``high`` are fractions of the maximum gradient magnitude.
    Kernel radius is round(1.5 * sigma), giving the usual 5x5 at sigma 1.4.
    """
    if not low < high:
        raise ImageError(f"canny: low threshold {low} must be below high {high}")
    img = to_gray(gray)
    radius = max(1, int(round(1.5 * gaussian_sigma)))
    if img.shape[0] < 2 * radius + 1 or img.shape[1] < 2 * radius + 1:
        raise ImageError(f"canny: image {img.shape} smaller than "
                         f"{2 * radius + 1}x{2 * radius + 1} blur kernel")
    k = _gaussian_kernel1d(gaussian_sigma, radius)
    smooth = _convolve2d_reflect(img, k, k)
    gx = _filter3(smooth, _SOBEL_X)
    gy = _filter3(smooth, _SOBEL_Y)
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak == 0.0:
        return np.zeros(img.shape, dtype=np.uint8)

    # quantize gradient direction into 4 bins and keep local ridge maxima
    angle = np.mod(np.arctan2(gy, gx), np.pi)
    bins = ((angle + np.pi / 8) // (np.pi / 4)).astype(np.int64) % 4
    padm = np.pad(mag, 1, mode="constant")
    offsets = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}  # E, SE, S, SW
    nms = np.zeros_like(mag)
    h, w = mag.shape
    for b, (di, dj) in offsets.items():
        sel = bins == b
        fwd = padm[1 + di:1 + di + h, 1 + dj:1 + dj + w]
        bwd = padm[1 - di:1 - di + h, 1 - dj:1 - dj + w]
        keep = sel & (mag >= fwd) & (mag >= bwd)
        nms[keep] = mag[keep]

    strong = nms >= high * peak
    weak = nms >= low * peak
    return _hysteresis(strong, weak)


def _hysteresis(strong: np.ndarray, weak: np.ndarray) -> np.ndarray:
    """Grow strong pixels through 8-connected weak pixels."""
    h, w = strong.shape
    out = strong.copy()
    stack = list(zip(*np.nonzero(strong)))
    while stack:
        i, j = stack.pop()
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                ni, nj = i + di, j + dj
                if 0 <= ni < h and 0 <= nj < w and weak[ni, nj] and not out[ni, nj]:
                    out[ni, nj] = True
                    stack.append((ni, nj))
    return out.astype(np.uint8)


def dilate(mask: np.ndarray, px: int = 1) -> np.ndarray:
    """Binary dilation with a (2*px+1) square structuring element."""
    out = np.asarray(mask, dtype=bool)
    for _ in range(px):
        padded = np.pad(out, 1)
        grown = np.zeros_like(out)
        for di in (0, 1, 2):
            for dj in (0, 1, 2):
                grown |= padded[di:di + out.shape[0], dj:dj + out.shape[1]]
        out = grown
    return out.astype(np.uint8)


# ---------------------------------------------------------------------------
# connected components


@dataclass(frozen=True)
class ComponentSet:
    """Labeled foreground partition with per-component value sums and sizes.

    labels: int32 [H, W], 0 = background, components numbered 1..count.
    sums[k-1] and sizes[k-1] belong to component k.
    """

    labels: np.ndarray
    count: int
    sums: np.ndarray
    sizes: np.ndarray


def connected_components(mask: np.ndarray, values: np.ndarray,
                         connectivity: int = 4) -> ComponentSet:
    """Label foreground regions of ``mask``; sum ``values`` over each region.

    Two-pass union-find scan; labels are renumbered 1..K in order of first
    appearance (row-major), so the partition is scan-order independent.
    """
    mask = np.asarray(mask)
    values = np.asarray(values, dtype=np.float64)
    if mask.shape != values.shape:
        raise ImageError(f"connected_components: mask {mask.shape} and values "
                         f"{values.shape} differ")
    if connectivity not in (4, 8):
        raise ImageError(f"connected_components: connectivity must be 4 or 8, "
                         f"got {connectivity}")
    h, w = mask.shape
    fg = mask != 0
    labels = np.zeros((h, w), dtype=np.int32)
    parent: list[int] = [0]

    def find(a: int) -> int:
        root = a
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:
            parent[a], a = root, parent[a]
        return root

    def union(a: int, b: int) -> None:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    nxt = 1
    for i in range(h):
        for j in range(w):
            if not fg[i, j]:
                continue
            left = labels[i, j - 1] if j > 0 and fg[i, j - 1] else 0
            up = labels[i - 1, j] if i > 0 and fg[i - 1, j] else 0
            neighbors = [n for n in (left, up) if n]
            if connectivity == 8 and i > 0:
                if j > 0 and fg[i - 1, j - 1]:
                    neighbors.append(labels[i - 1, j - 1])
                if j < w - 1 and fg[i - 1, j + 1]:
                    neighbors.append(labels[i - 1, j + 1])
            if not neighbors:
                labels[i, j] = nxt
                parent.append(nxt)
                nxt += 1
            else:
                lead = min(neighbors)
                labels[i, j] = lead
                for n in neighbors:
                    union(lead, n)

    # second pass: resolve to roots, then compact to 1..K by first appearance
    remap: dict[int, int] = {}
    count = 0
    for i in range(h):
        for j in range(w):
            if labels[i, j]:
                root = find(labels[i, j])
                if root not in remap:
                    count += 1
                    remap[root] = count
                labels[i, j] = remap[root]

    sums = np.zeros(count, dtype=np.float64)
    sizes = np.zeros(count, dtype=np.int64)
    if count:
        flat = labels.ravel()
        sel = flat > 0
        np.add.at(sums, flat[sel] - 1, values.ravel()[sel])
        np.add.at(sizes, flat[sel] - 1, 1)
    return ComponentSet(labels=labels, count=count,
                        sums=sums.astype(np.float32), sizes=sizes)


# ---------------------------------------------------------------------------
# SSIM


_SSIM_SIGMA = 1.5
_SSIM_RADIUS = 5  # 11x11 window
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


def _gaussian_filter_nearest(img: np.ndarray) -> np.ndarray:
    """11x11 Gaussian, sigma 1.5, nearest-edge padding (reference convention)."""
    k = _gaussian_kernel1d(_SSIM_SIGMA, _SSIM_RADIUS)
    r = _SSIM_RADIUS
    pad = np.pad(img, r, mode="edge")
    tmp = np.zeros((img.shape[0], pad.shape[1]), dtype=np.float64)
    for i, wgt in enumerate(k):
        tmp += wgt * pad[i:i + img.shape[0], :]
    out = np.zeros(img.shape, dtype=np.float64)
    for j, wgt in enumerate(k):
        out += wgt * tmp[:, j:j + img.shape[1]]
    return out


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Structural similarity with Gaussian weights, mean over valid windows.

    Inputs in [0, 1]; RGB is averaged to luminance first. Follows the
    Gaussian-weighted population-covariance convention with the edge band
    (window radius) cropped before averaging.
    """
    ga, gb = to_gray(a), to_gray(b)
    if ga.shape != gb.shape:
        raise ImageError(f"ssim: shapes {ga.shape} and {gb.shape} differ")
    if min(ga.shape) < 2 * _SSIM_RADIUS + 1:
        raise ImageError(f"ssim: image {ga.shape} smaller than "
                         f"{2 * _SSIM_RADIUS + 1} pixel window")
    c1 = _SSIM_K1 ** 2
    c2 = _SSIM_K2 ** 2
    mu_a = _gaussian_filter_nearest(ga)
    mu_b = _gaussian_filter_nearest(gb)
    maa = _gaussian_filter_nearest(ga * ga)
    mbb = _gaussian_filter_nearest(gb * gb)
    mab = _gaussian_filter_nearest(ga * gb)
    var_a = maa - mu_a * mu_a
    var_b = mbb - mu_b * mu_b
    cov = mab - mu_a * mu_b
    smap = (((2 * mu_a * mu_b + c1) * (2 * cov + c2))
            / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))
    r = _SSIM_RADIUS
    return float(smap[r:-r, r:-r].mean())


# ---------------------------------------------------------------------------
# resampling


def bilinear_resize(image: np.ndarray, new_width: int, new_height: int) -> np.ndarray:
    """Corner-aligned bilinear resampling; works on gray or multi-channel."""
    if new_width <= 0 or new_height <= 0:
        raise ImageError(f"bilinear_resize: bad target size "
                         f"{new_width}x{new_height}")
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    if (new_height, new_width) == (h, w):
        return img.copy()
    ys = (np.linspace(0.0, h - 1.0, new_height) if new_height > 1
          else np.zeros(1))
    xs = (np.linspace(0.0, w - 1.0, new_width) if new_width > 1
          else np.zeros(1))
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    if img.ndim == 3:
        fy = fy[..., None]
        fx = fx[..., None]
    tl = img[np.ix_(y0, x0)]
    tr = img[np.ix_(y0, x1)]
    bl = img[np.ix_(y1, x0)]
    br = img[np.ix_(y1, x1)]
    top = tl * (1 - fx) + tr * fx
    bot = bl * (1 - fx) + br * fx
    return top * (1 - fy) + bot * fy


def bilinear_weights(h: int, w: int, new_h: int, new_w: int):
    """Corner-aligned source indices and weights for an upsample as a sparse
    4-tap gather: returns (flat_indices [new_h, new_w, 4], weights [...4])."""
    ys = np.linspace(0.0, h - 1.0, new_h) if new_h > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1.0, new_w) if new_w > 1 else np.zeros(1)
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy, fx = ys - y0, xs - x0
    wy = np.stack([1 - fy, fy], axis=1)  # [new_h, 2]
    wx = np.stack([1 - fx, fx], axis=1)  # [new_w, 2]
    iy = np.stack([y0, y1], axis=1)
    ix = np.stack([x0, x1], axis=1)
    idx = (iy[:, None, :, None] * w + ix[None, :, None, :]).reshape(new_h, new_w, 4)
    wgt = (wy[:, None, :, None] * wx[None, :, None, :]).reshape(new_h, new_w, 4)
    return idx.astype(np.int64), wgt.astype(np.float32)


# ---------------------------------------------------------------------------
# PNG IO


def read_png(path) -> np.ndarray:
    """8-bit PNG to float [0,1]; RGB [H,W,3] or grayscale [H,W]."""
    with Image.open(path) as im:
        if im.format != "PNG":
            raise ImageError(f"{path}: not a PNG file (got {im.format})")
        mode = "L" if im.mode in ("L", "I;16", "1") else "RGB"
        arr = np.asarray(im.convert(mode), dtype=np.float32)
    return arr / 255.0


def write_png(path, image: np.ndarray) -> None:
    """Float [0,1] image to 8-bit PNG (gray or RGB)."""
    arr = np.asarray(image)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    quant = np.clip(np.round(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255)
    Image.fromarray(quant.astype(np.uint8)).save(path, format="PNG")
