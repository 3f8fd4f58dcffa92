"""Image I/O and sampling helpers.

All in-memory images are float64 linear RGB in [0, 1] (or meters for depth).
PNG files are 8-bit sRGB-encoded; PFM files store 32-bit floats and are used
for depth and golden-image data.
"""

import numpy as np
from PIL import Image


# ---------------------------------------------------------------------------
# color transfer


def linear_to_srgb(x):
    x = np.clip(x, 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1.0 / 2.4) - 0.055)


def srgb_to_linear(x):
    x = np.clip(x, 0.0, 1.0)
    return np.where(x <= 0.04045, x / 12.92, np.power((x + 0.055) / 1.055, 2.4))


def save_png(path, image, srgb=True):
    """Save a float image in [0, 1] as 8-bit PNG (sRGB-encoded by default)."""
    img = np.asarray(image, dtype=np.float64)
    enc = linear_to_srgb(img) if srgb else np.clip(img, 0.0, 1.0)
    data = np.round(enc * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path)


def load_png(path, srgb=True):
    data = np.asarray(Image.open(path), dtype=np.float64) / 255.0
    return srgb_to_linear(data) if srgb else data


def save_gray_png(path, image):
    """Save an 8-bit grayscale image (used for eye crops)."""
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="L").save(path)


def load_gray_png(path):
    return np.asarray(Image.open(path).convert("L"), dtype=np.uint8)


# ---------------------------------------------------------------------------
# PFM (32-bit float, little-endian, bottom-up rows per the format spec)


def save_pfm(path, image):
    img = np.asarray(image, dtype=np.float32)
    color = img.ndim == 3
    if color and img.shape[2] != 3:
        raise ValueError("PFM color images must have 3 channels")
    with open(path, "wb") as f:
        f.write(b"PF\n" if color else b"Pf\n")
        f.write(f"{img.shape[1]} {img.shape[0]}\n".encode())
        f.write(b"-1.0\n")  # negative scale -> little endian
        f.write(np.flipud(img).astype("<f4").tobytes())


def load_pfm(path):
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header not in (b"PF", b"Pf"):
            raise ValueError("not a PFM file")
        dims = f.readline().split()
        width, height = int(dims[0]), int(dims[1])
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        count = width * height * (3 if header == b"PF" else 1)
        data = np.frombuffer(f.read(4 * count), dtype=dtype).astype(np.float64)
    shape = (height, width, 3) if header == b"PF" else (height, width)
    return np.flipud(data.reshape(shape)).copy()


# ---------------------------------------------------------------------------
# sampling


def sample_bilinear(image, pix, with_grad=False):
    """Bilinear sample at continuous pixel coords (N, 2), edge-clamped.

    Pixel centers sit at integer + 0.5.  Returns (N, C) values and, when
    with_grad is set, the analytic gradient (N, C, 2) of the interpolant.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    p = np.asarray(pix, dtype=np.float64)
    x = p[:, 0] - 0.5
    y = p[:, 1] - 0.5
    x0 = np.clip(np.floor(x).astype(int), 0, w - 2) if w > 1 else np.zeros(len(p), int)
    y0 = np.clip(np.floor(y).astype(int), 0, h - 2) if h > 1 else np.zeros(len(p), int)
    fx = np.clip(x - x0, 0.0, 1.0)
    fy = np.clip(y - y0, 0.0, 1.0)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    v00 = img[y0, x0]
    v10 = img[y0, x1]
    v01 = img[y1, x0]
    v11 = img[y1, x1]
    top = v00 + (v10 - v00) * fx[:, None]
    bot = v01 + (v11 - v01) * fx[:, None]
    val = top + (bot - top) * fy[:, None]
    if not with_grad:
        return val
    # clamp kills the gradient outside the valid interior
    inx = ((x >= 0) & (x <= w - 1)).astype(np.float64)
    iny = ((y >= 0) & (y <= h - 1)).astype(np.float64)
    gx = ((v10 - v00) + ((v11 - v01) - (v10 - v00)) * fy[:, None]) * (inx * iny)[:, None]
    gy = ((v01 - v00) + ((v11 - v10) - (v01 - v00)) * fx[:, None]) * (inx * iny)[:, None]
    return val, np.stack([gx, gy], axis=-1)


def sample_bicubic(image, pix, with_grad=False):
    """Catmull-Rom sample at continuous pixel coords (N, 2), edge-clamped.

    C1 interpolation through the pixel-center values: at a center the value
    equals the pixel and the derivative equals the central difference, with
    no slope jumps between cells (bilinear kinks break Gauss-Newton there).
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    p = np.asarray(pix, dtype=np.float64)

    def weights(f):
        f2, f3 = f * f, f * f * f
        wgt = np.stack([0.5 * (-f3 + 2 * f2 - f), 0.5 * (3 * f3 - 5 * f2 + 2),
                        0.5 * (-3 * f3 + 4 * f2 + f), 0.5 * (f3 - f2)], axis=-1)
        dw = np.stack([0.5 * (-3 * f2 + 4 * f - 1), 0.5 * (9 * f2 - 10 * f),
                       0.5 * (-9 * f2 + 8 * f + 1), 0.5 * (3 * f2 - 2 * f)], axis=-1)
        return wgt, dw

    tx = p[:, 0] - 0.5
    ty = p[:, 1] - 0.5
    ix = np.floor(tx).astype(int)
    iy = np.floor(ty).astype(int)
    wx, dwx = weights(tx - ix)
    wy, dwy = weights(ty - iy)
    X = np.clip(ix[:, None] + np.arange(-1, 3), 0, w - 1)  # (N, 4)
    Y = np.clip(iy[:, None] + np.arange(-1, 3), 0, h - 1)
    patch = img[Y[:, :, None], X[:, None, :]]  # (N, 4, 4, C)
    val = np.einsum("ni,nj,nijc->nc", wy, wx, patch)
    if not with_grad:
        return val
    gx = np.einsum("ni,nj,nijc->nc", wy, dwx, patch)
    gy = np.einsum("ni,nj,nijc->nc", dwy, wx, patch)
    return val, np.stack([gx, gy], axis=-1)


def shift_image(image, dx, dy):
    """Integer-pixel shift with edge clamping (used for training-set jitter)."""
    img = np.asarray(image)
    h, w = img.shape[:2]
    ys = np.clip(np.arange(h) - dy, 0, h - 1)
    xs = np.clip(np.arange(w) - dx, 0, w - 1)
    return img[np.ix_(ys, xs)]


# ---------------------------------------------------------------------------
# pyramids


def box_downsample(image):
    """2x box filter; trailing odd row/column is dropped."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    h2, w2 = h // 2, w // 2
    img = img[:2 * h2, :2 * w2]
    if img.ndim == 2:
        return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def box_downsample_depth(image):
    """2x depth downsample averaging only finite, positive samples."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    h2, w2 = h // 2, w // 2
    img = img[:2 * h2, :2 * w2]
    blocks = np.stack([img[0::2, 0::2], img[1::2, 0::2], img[0::2, 1::2], img[1::2, 1::2]])
    valid = np.isfinite(blocks) & (blocks > 0)
    count = valid.sum(axis=0)
    total = np.where(valid, blocks, 0.0).sum(axis=0)
    out = np.full((h2, w2), np.nan)
    np.divide(total, count, out=out, where=count > 0)
    return out


def depth_to_normals(depth, camera):
    """Camera-space normals from depth via central differences on 4-neighborhoods.

    Invalid or border pixels get a zero normal.
    """
    d = np.asarray(depth, dtype=np.float64)
    h, w = d.shape
    valid = np.isfinite(d) & (d > 0)
    xs, ys = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    pts = np.zeros((h, w, 3))
    pts[..., 0] = (xs - camera.cx) * d / camera.fx
    pts[..., 1] = (ys - camera.cy) * d / camera.fy
    pts[..., 2] = d
    normals = np.zeros((h, w, 3))
    ok = np.zeros((h, w), dtype=bool)
    ok[1:-1, 1:-1] = (valid[1:-1, 1:-1] & valid[1:-1, 2:] & valid[1:-1, :-2]
                      & valid[2:, 1:-1] & valid[:-2, 1:-1])
    dx = np.zeros((h, w, 3))
    dy = np.zeros((h, w, 3))
    dx[1:-1, 1:-1] = pts[1:-1, 2:] - pts[1:-1, :-2]
    dy[1:-1, 1:-1] = pts[2:, 1:-1] - pts[:-2, 1:-1]
    n = np.cross(dx, dy)
    # orient toward the camera (negative z half-space)
    flip = n[..., 2] > 0
    n[flip] *= -1.0
    norm = np.linalg.norm(n, axis=-1)
    good = ok & (norm > 1e-12)
    normals[good] = n[good] / norm[good][:, None]
    return normals
