"""Weak, intensity-strong, and model-adaptive strong augmentations.

Images are ``[C, H, W]`` floats in [0, 1]; labels are ``[H, W]`` integer
maps with an ignore value.  Every random decision is recorded in an
:class:`AugRecord`, and each transform is split into a *sample* step (which
consumes RNG state) and a pure *apply* step, so records can be drawn
serially and applied in worker threads, or replayed exactly.

The two adaptive strong augmentations consume per-instance hardness:
``adaptive_blend`` dilutes an intensity-distorted image toward its weak
view, and ``adaptive_cutmix`` pastes rectangles between hard-easy pairs of
a batch, remapping pseudo-label maps with the identical mask.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, ConfigError, DimensionError
from .hardness import sort_by_hardness

__all__ = [
    "AugRecord",
    "RegionMask",
    "INTENSITY_OPS",
    "sample_weak_record",
    "apply_weak_record",
    "weak_augment",
    "intensity_strong",
    "apply_intensity_ops",
    "adaptive_blend",
    "blend_coefficient",
    "make_region_mask",
    "adaptive_cutmix",
]


@dataclass(frozen=True)
class RegionMask:
    """Axis-aligned rectangle, materializable as a binary H×W mask."""

    top: int
    left: int
    height: int
    width: int

    def mask(self, h, w):
        if (self.top < 0 or self.left < 0
                or self.top + self.height > h or self.left + self.width > w):
            raise ArgumentError(
                f"rect {(self.top, self.left, self.height, self.width)} "
                f"does not fit a {h}x{w} image"
            )
        m = np.zeros((h, w), dtype=np.uint8)
        m[self.top:self.top + self.height, self.left:self.left + self.width] = 1
        return m


@dataclass
class AugRecord:
    """Everything needed to reproduce one instance's augmentation."""

    scale: float = 1.0
    flip: bool = False
    top: int = 0
    left: int = 0
    intensity_ops: list = field(default_factory=list)
    cutmix: tuple = None  # (partner index, RegionMask) when mixed

    def as_dict(self):
        cm = None
        if self.cutmix is not None:
            n, rect = self.cutmix
            cm = {"partner": n, "rect": [rect.top, rect.left, rect.height, rect.width]}
        return {
            "scale": self.scale,
            "flip": self.flip,
            "top": self.top,
            "left": self.left,
            "intensity_ops": [[n, m] for n, m in self.intensity_ops],
            "cutmix": cm,
        }


# -------------------------------------------------------------- weak aug --

def _scaled_size(dim, scale):
    return max(1, int(np.floor(dim * scale + 0.5)))


def sample_weak_record(rng, h, w, crop):
    """Draw scale/flip/crop parameters for one instance."""
    scale = float(rng.uniform(0.5, 2.0))
    flip = bool(rng.random() < 0.5)
    hs, ws = _scaled_size(h, scale), _scaled_size(w, scale)
    top = int(rng.integers(0, max(0, hs - crop) + 1))
    left = int(rng.integers(0, max(0, ws - crop) + 1))
    return AugRecord(scale=scale, flip=flip, top=top, left=left)


def _resize_bilinear(img, hs, ws):
    c, h, w = img.shape
    ys = (np.arange(hs, dtype=np.float64) + 0.5) * h / hs - 0.5
    xs = (np.arange(ws, dtype=np.float64) + 0.5) * w / ws - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    r0, r1 = img[:, y0, :], img[:, y1, :]
    top = r0[:, :, x0] * (1.0 - wx) + r0[:, :, x1] * wx
    bot = r1[:, :, x0] * (1.0 - wx) + r1[:, :, x1] * wx
    out = top * (1.0 - wy) + bot * wy
    return out.astype(img.dtype, copy=False)


def _resize_nearest(lab, hs, ws):
    h, w = lab.shape
    # floor((i + 0.5) * h / hs), evaluated left-to-right so replays and
    # oracles hit identical rounding
    ys = np.minimum(np.floor((np.arange(hs) + 0.5) * h / hs).astype(np.int64), h - 1)
    xs = np.minimum(np.floor((np.arange(ws) + 0.5) * w / ws).astype(np.int64), w - 1)
    return lab[ys][:, xs]


def apply_weak_record(image, label, record, *, crop, ignore=255):
    """Replay recorded weak geometry: scale, flip, crop (with padding).

    The label, when given, travels through the identical geometry; pixels
    the scaled image cannot cover are edge-replicated in the image and set
    to `ignore` in the label.
    """
    image = np.asarray(image)
    if image.ndim != 3:
        raise DimensionError(f"image must be [C, H, W], got shape {image.shape}")
    if crop < 1:
        raise ArgumentError(f"crop must be >= 1, got {crop}")
    c, h, w = image.shape
    if label is not None:
        label = np.asarray(label)
        if label.shape != (h, w):
            raise DimensionError(f"label shape {label.shape} != image plane {(h, w)}")

    hs, ws = _scaled_size(h, record.scale), _scaled_size(w, record.scale)
    if (hs, ws) != (h, w):
        image = _resize_bilinear(image, hs, ws)
        if label is not None:
            label = _resize_nearest(label, hs, ws)
    if record.flip:
        image = image[:, :, ::-1]
        if label is not None:
            label = label[:, ::-1]

    top, left = record.top, record.left
    img = image[:, top:top + crop, left:left + crop]
    ph, pw = crop - img.shape[1], crop - img.shape[2]
    if ph > 0 or pw > 0:
        img = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="edge")
    out_label = None
    if label is not None:
        lab = label[top:top + crop, left:left + crop]
        if ph > 0 or pw > 0:
            lab = np.pad(lab, ((0, ph), (0, pw)), constant_values=ignore)
        out_label = lab.copy()
    return img.copy(), out_label


def weak_augment(image, label, rng, *, crop, ignore=255):
    """Random scale in [0.5, 2], flip w.p. 0.5, random crop to `crop`."""
    image = np.asarray(image)
    rec = sample_weak_record(rng, image.shape[1], image.shape[2], crop)
    img, lab = apply_weak_record(image, label, rec, crop=crop, ignore=ignore)
    return img, lab, rec


# --------------------------------------------------------- intensity aug --

INTENSITY_OPS = (
    "identity", "invert", "autocontrast", "equalize", "blur", "contrast",
    "sharpness", "color", "brightness", "hue", "posterize", "solarize",
)


def _luminance(img):
    if img.shape[0] == 3:
        return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    return img.mean(axis=0)


def _rgb_to_hsv(img):
    r, g, b = (img[i].astype(np.float64) for i in range(3))
    mx = np.maximum(np.maximum(r, g), b)
    mn = np.minimum(np.minimum(r, g), b)
    d = mx - mn
    safe = np.where(d > 0, d, 1.0)
    hr = np.mod((g - b) / safe, 6.0)
    hg = (b - r) / safe + 2.0
    hb = (r - g) / safe + 4.0
    hue = np.where(mx == r, hr, np.where(mx == g, hg, hb)) / 6.0
    hue = np.where(d > 0, hue, 0.0)
    sat = np.where(mx > 0, d / np.where(mx > 0, mx, 1.0), 0.0)
    return hue, sat, mx


def _hsv_to_rgb(hue, sat, val):
    i = np.floor(hue * 6.0)
    f = hue * 6.0 - i
    p = val * (1.0 - sat)
    q = val * (1.0 - f * sat)
    t = val * (1.0 - (1.0 - f) * sat)
    i = i.astype(np.int64) % 6
    r = np.choose(i, [val, q, p, p, t, val])
    g = np.choose(i, [t, val, val, q, p, p])
    b = np.choose(i, [p, p, t, val, val, q])
    return np.stack([r, g, b])


def _op_identity(img, _):
    return img.copy()


def _op_invert(img, _):
    return 1.0 - img


def _op_autocontrast(img, _):
    out = img.copy()
    for c in range(img.shape[0]):
        lo, hi = float(img[c].min()), float(img[c].max())
        if hi > lo:
            out[c] = (img[c] - lo) / (hi - lo)
    return out


def _op_equalize(img, _):
    # classic 256-bin histogram equalization, per channel
    out = img.copy()
    for c in range(img.shape[0]):
        x = np.clip(np.rint(img[c] * 255.0), 0, 255).astype(np.int64)
        hist = np.bincount(x.ravel(), minlength=256)
        nz = hist[hist > 0]
        if len(nz) <= 1:
            continue
        step = (int(hist.sum()) - int(nz[-1])) // 255
        if step == 0:
            continue
        cum = np.concatenate(([0], np.cumsum(hist)[:-1]))
        lut = np.clip((step // 2 + cum) // step, 0, 255)
        out[c] = (lut[x] / 255.0).astype(img.dtype)
    return out


def _op_blur(img, sigma):
    e = float(np.exp(-0.5 / (sigma * sigma)))
    k = np.array([e, 1.0, e], dtype=np.float64)
    k /= k.sum()
    p = np.pad(img.astype(np.float64), ((0, 0), (1, 1), (0, 0)), mode="edge")
    out = k[0] * p[:, :-2, :] + k[1] * p[:, 1:-1, :] + k[2] * p[:, 2:, :]
    p = np.pad(out, ((0, 0), (0, 0), (1, 1)), mode="edge")
    out = k[0] * p[..., :-2] + k[1] * p[..., 1:-1] + k[2] * p[..., 2:]
    return out.astype(img.dtype)


def _smooth13(img):
    p = np.pad(img.astype(np.float64), ((0, 0), (1, 1), (1, 1)), mode="edge")
    acc = (p[:, :-2, :-2] + p[:, :-2, 1:-1] + p[:, :-2, 2:]
           + p[:, 1:-1, :-2] + 5.0 * p[:, 1:-1, 1:-1] + p[:, 1:-1, 2:]
           + p[:, 2:, :-2] + p[:, 2:, 1:-1] + p[:, 2:, 2:])
    return (acc / 13.0).astype(img.dtype)


def _enhance(img, degenerate, m):
    # m = 1 keeps the image, m = 0 collapses to the degenerate version
    return (m * img + (1.0 - m) * degenerate).astype(img.dtype)


def _op_contrast(img, m):
    gray = float(_luminance(img).mean())
    return _enhance(img, gray, m)


def _op_sharpness(img, m):
    return _enhance(img, _smooth13(img), m)


def _op_color(img, m):
    return _enhance(img, _luminance(img)[None], m)


def _op_brightness(img, m):
    return _enhance(img, 0.0, m)


def _op_hue(img, d):
    if img.shape[0] != 3:
        return img.copy()
    hue, sat, val = _rgb_to_hsv(img)
    hue = np.mod(hue + d, 1.0)
    return _hsv_to_rgb(hue, sat, val).astype(img.dtype)


def _op_posterize(img, bits):
    b = int(round(bits))
    if b < 1:
        raise ArgumentError(f"posterize bits must be >= 1, got {bits}")
    q = float(2 ** b - 1)
    return (np.floor(img * q) / q).astype(img.dtype)


def _op_solarize(img, t):
    return np.where(img >= t, 1.0 - img, img).astype(img.dtype)


_OP_FUNCS = {
    "identity": _op_identity,
    "invert": _op_invert,
    "autocontrast": _op_autocontrast,
    "equalize": _op_equalize,
    "blur": _op_blur,
    "contrast": _op_contrast,
    "sharpness": _op_sharpness,
    "color": _op_color,
    "brightness": _op_brightness,
    "hue": _op_hue,
    "posterize": _op_posterize,
    "solarize": _op_solarize,
}


def _sample_magnitude(name, rng):
    if name == "blur":
        return float(rng.uniform(0.1, 1.0))
    if name in ("contrast", "sharpness", "color", "brightness"):
        return float(rng.uniform(0.05, 0.95))
    if name == "hue":
        return float(rng.uniform(0.0, 0.5))
    if name == "posterize":
        return float(rng.integers(4, 9))
    if name == "solarize":
        return float(rng.integers(1, 256)) / 256.0
    return 0.0


def sample_intensity_ops(rng):
    """Pick 2 of the 12 intensity ops without replacement, with magnitudes."""
    idx = rng.choice(len(INTENSITY_OPS), size=2, replace=False)
    return [(INTENSITY_OPS[int(i)], _sample_magnitude(INTENSITY_OPS[int(i)], rng))
            for i in idx]


def apply_intensity_ops(image, ops):
    """Apply recorded (name, magnitude) ops in order; clamp to [0, 1]."""
    out = np.asarray(image)
    for name, mag in ops:
        fn = _OP_FUNCS.get(name)
        if fn is None:
            raise ArgumentError(f"unknown intensity op {name!r}")
        out = fn(out, mag)
    return np.clip(out, 0.0, 1.0)


def intensity_strong(image, rng):
    """Two random intensity distortions; geometry is never touched."""
    ops = sample_intensity_ops(rng)
    return apply_intensity_ops(image, ops), AugRecord(intensity_ops=ops)


# ------------------------------------------------------------- adaptive --

def blend_coefficient(gamma, direction):
    """Map hardness to the blend weight put on the strong image.

    "prose" weakens distortion on hard instances (weight 1 - gamma);
    "literal" scales distortion up with hardness (weight gamma).
    """
    if not (0.0 <= gamma <= 1.0):
        raise ArgumentError(f"gamma must be in [0, 1], got {gamma!r}")
    if direction == "prose":
        return 1.0 - gamma
    if direction == "literal":
        return float(gamma)
    raise ConfigError(f"blend_direction must be 'prose' or 'literal', got {direction!r}")


def adaptive_blend(strong, weak, gamma):
    """Convex combination gamma*strong + (1-gamma)*weak, endpoint-exact."""
    strong = np.asarray(strong)
    weak = np.asarray(weak)
    if strong.shape != weak.shape:
        raise DimensionError(f"shape mismatch: {strong.shape} vs {weak.shape}")
    if not (0.0 <= gamma <= 1.0):
        raise ArgumentError(f"gamma must be in [0, 1], got {gamma!r}")
    if gamma == 0.0:
        return weak.copy()
    if gamma == 1.0:
        return strong.copy()
    g = strong.dtype.type(gamma)
    return g * strong + (strong.dtype.type(1.0) - g) * weak


def make_region_mask(h, w, rng):
    """Rectangle with area ratio in [0.25, 0.5], aspect in [0.5, 2].

    Size targets are sampled continuously, then rounded and clamped into
    the integer-feasible band, which keeps the post-rounding area ratio
    inside [0.25, 0.5] whenever h, w >= 4.
    """
    if h < 4 or w < 4:
        raise ArgumentError(f"image must be at least 4x4, got {h}x{w}")
    hw = h * w
    area = rng.uniform(0.25, 0.5)
    aspect = rng.uniform(0.5, 2.0)  # height / width
    rh = int(np.clip(np.floor(np.sqrt(area * hw * aspect) + 0.5),
                     int(np.ceil(h / 4)), h))
    rw_lo = int(np.ceil(0.25 * hw / rh))
    rw_hi = min(w, int(np.floor(0.5 * hw / rh)))
    rw = int(np.clip(np.floor(np.sqrt(area * hw / aspect) + 0.5), rw_lo, rw_hi))
    top = int(rng.integers(0, h - rh + 1))
    left = int(rng.integers(0, w - rw + 1))
    return RegionMask(top=top, left=left, height=rh, width=rw)


def adaptive_cutmix(batch_images, batch_pseudo, reports, rng, *,
                    trigger="prose", mean_gamma_override=None,
                    partners=None, records_out=None):
    """Hardness-paired CutMix over a batch, gated on mean hardness.

    One uniform r is drawn per call regardless of outcome (the RNG stream
    advances identically either way).  Under the default "prose" trigger
    the mix fires iff r > mean gamma; "probability_mean" inverts the
    comparison.  When it fires, ascending- and descending-hardness orders
    are zipped so rank k mixes with rank B-1-k; a self-paired index passes
    through untouched.  Each mixed output m copies mask-covered pixels
    from its partner and the rest from itself — the identical mask remaps
    the pseudo-label map.  `partners` overrides the pairing (used by the
    plain consistency baseline), `mean_gamma_override` overrides the gate,
    and `records_out`, when given, receives one (partner, RegionMask) or
    None per batch element.
    """
    b = len(batch_images)
    if b == 0:
        raise ArgumentError("empty batch")
    if len(batch_pseudo) != b or len(reports) != b:
        raise DimensionError(
            f"batch length mismatch: {b} images, {len(batch_pseudo)} pseudo "
            f"maps, {len(reports)} reports"
        )
    if trigger not in ("prose", "probability_mean"):
        raise ConfigError(
            f"cutmix_trigger must be 'prose' or 'probability_mean', got {trigger!r}"
        )
    ishape = batch_images[0].shape
    pshape = batch_pseudo[0].shape
    if any(im.shape != ishape for im in batch_images) \
            or any(p.shape != pshape for p in batch_pseudo) \
            or ishape[1:] != pshape[1:]:
        raise DimensionError("images and pseudo maps must share one H, W")
    hh, ww = ishape[1], ishape[2]

    mg = float(np.mean([r.gamma for r in reports])) \
        if mean_gamma_override is None else float(mean_gamma_override)
    r = float(rng.random())
    fired = (r > mg) if trigger == "prose" else (r < mg)
    if records_out is not None:
        records_out.clear()
    if not fired:
        if records_out is not None:
            records_out.extend([None] * b)
        return list(batch_images), list(batch_pseudo), False

    if partners is not None:
        if len(partners) != b:
            raise DimensionError(f"partners has length {len(partners)}, batch {b}")
        if sorted(int(p) for p in partners) != list(range(b)) and \
                any(not (0 <= int(p) < b) for p in partners):
            raise ArgumentError("partners must be indices into the batch")
        partner = [int(p) for p in partners]
    else:
        asc, desc = sort_by_hardness(reports)
        partner = [0] * b
        for k in range(b):
            partner[asc[k]] = desc[k]

    out_images, out_pseudo, recs = [], [], []
    for m in range(b):
        n = partner[m]
        if n == m:
            out_images.append(batch_images[m].copy())
            out_pseudo.append(batch_pseudo[m].copy())
            recs.append(None)
            continue
        rect = make_region_mask(hh, ww, rng)
        grid = rect.mask(hh, ww).astype(bool)[None]
        out_images.append(np.where(grid, batch_images[n], batch_images[m]))
        out_pseudo.append(np.where(grid, batch_pseudo[n], batch_pseudo[m]))
        recs.append((n, rect))
    if records_out is not None:
        records_out.extend(recs)
    return out_images, out_pseudo, True
