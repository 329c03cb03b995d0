"""Synthetic shapes dataset, PPM/PGM I/O, and labeled/unlabeled partitions.

Scenes are 1-4 colored shapes on a noisy background.  Class ids map to
shape kinds cyclically (disk, rectangle, triangle, stripe), colors come
from a fixed palette with per-scene jitter, so both geometry and color
carry class signal without either being decisive.  The stripe kind is
sampled rarely to keep class frequencies imbalanced.

Everything on disk is binary PPM (P6) / PGM (P5) plus one manifest.json;
regeneration with the same seed is byte-identical because every scene
draws from its own counter-keyed substream.
"""

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ArgumentError, DataError
from .streams import substream

__all__ = [
    "ShapesScene",
    "LabeledSample",
    "UnlabeledSample",
    "PartitionManifest",
    "read_ppm", "write_ppm", "read_pgm", "write_pgm",
    "render_scene",
    "generate_dataset",
    "parse_fraction",
    "split",
    "load_sample",
    "load_batch",
]

NOISE_SIGMA = 0.03     # additive pixel noise
COLOR_JITTER = 0.18    # per-scene palette jitter
STRIPE_WEIGHT = 0.35   # relative class weight for stripe-kind classes

_KINDS = ("disk", "rect", "triangle", "stripe")

_PALETTE = (
    (0.50, 0.50, 0.50),  # background
    (0.85, 0.25, 0.25),
    (0.25, 0.60, 0.85),
    (0.30, 0.75, 0.35),
    (0.90, 0.80, 0.30),
    (0.70, 0.35, 0.80),
    (0.95, 0.55, 0.20),
    (0.35, 0.80, 0.75),
)


@dataclass(frozen=True)
class ShapesScene:
    image: np.ndarray       # [3, H, W] float32 in [0, 1]
    label: np.ndarray       # [H, W] uint8 class ids
    noise_sigma: float
    seed: int = None


@dataclass(frozen=True)
class LabeledSample:
    id: str
    image: np.ndarray
    label: np.ndarray


@dataclass(frozen=True)
class UnlabeledSample:
    # deliberately no label field: the unlabeled path cannot leak ground truth
    id: str
    image: np.ndarray


@dataclass
class PartitionManifest:
    root: str
    k: int
    crop: int
    seed: int
    labeled: list
    unlabeled: list
    val: list

    def image_path(self, sid):
        return Path(self.root) / "images" / f"{sid}.ppm"

    def label_path(self, sid):
        return Path(self.root) / "labels" / f"{sid}.pgm"

    def save(self, path=None):
        path = Path(path) if path else Path(self.root) / "manifest.json"
        blob = {
            "k": self.k, "crop": self.crop, "seed": self.seed,
            "labeled": list(self.labeled), "unlabeled": list(self.unlabeled),
            "val": list(self.val),
        }
        path.write_text(json.dumps(blob, indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            blob = json.loads(path.read_text())
            return cls(root=str(path.parent), k=int(blob["k"]),
                       crop=int(blob["crop"]), seed=int(blob["seed"]),
                       labeled=list(blob["labeled"]),
                       unlabeled=list(blob["unlabeled"]), val=list(blob["val"]))
        except (OSError, ValueError, KeyError, TypeError) as e:
            raise DataError(f"cannot read manifest {path}: {e}") from None


# --------------------------------------------------------------- PPM/PGM --

def _read_netpbm(path, magic):
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from None

    # tokenizer over the header: whitespace-separated, '#' starts a comment
    pos, tokens = 0, []
    while len(tokens) < 4 and pos < len(raw):
        ch = raw[pos:pos + 1]
        if ch == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(raw) and not raw[pos:pos + 1].isspace() \
                    and raw[pos:pos + 1] != b"#":
                pos += 1
            tokens.append(raw[start:pos])
    if len(tokens) < 4:
        raise DataError(f"truncated header in {path}")
    if tokens[0] != magic:
        raise DataError(
            f"{path}: expected {magic.decode()}, found {tokens[0][:8]!r}")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError:
        raise DataError(f"non-numeric header fields in {path}") from None
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval} (need 255)")
    pos += 1  # single whitespace byte after maxval
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    data = raw[pos:pos + need]
    if len(data) != need:
        raise DataError(f"{path}: expected {need} pixel bytes, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8), h, w


def read_ppm(path):
    """Read a binary P6 image as uint8 [3, H, W]."""
    flat, h, w = _read_netpbm(path, b"P6")
    return flat.reshape(h, w, 3).transpose(2, 0, 1).copy()


def read_pgm(path):
    """Read a binary P5 map as uint8 [H, W]."""
    flat, h, w = _read_netpbm(path, b"P5")
    return flat.reshape(h, w).copy()


def write_ppm(path, image):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3 or image.dtype != np.uint8:
        raise ArgumentError(f"write_ppm wants uint8 [3, H, W], got "
                            f"{image.dtype} {image.shape}")
    h, w = image.shape[1:]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(image.transpose(1, 2, 0).tobytes())


def write_pgm(path, label):
    label = np.asarray(label)
    if label.ndim != 2 or label.dtype != np.uint8:
        raise ArgumentError(f"write_pgm wants uint8 [H, W], got "
                            f"{label.dtype} {label.shape}")
    h, w = label.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(label.tobytes())


# -------------------------------------------------------------- rendering --

def _disk(h, w, rng):
    r = rng.uniform(0.12, 0.30) * min(h, w)
    cy = rng.uniform(r, h - r)
    cx = rng.uniform(r, w - r)
    yy, xx = np.ogrid[0:h, 0:w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _rect(h, w, rng):
    rh = max(2, int(round(rng.uniform(0.15, 0.45) * h)))
    rw = max(2, int(round(rng.uniform(0.15, 0.45) * w)))
    top = int(rng.integers(0, h - rh + 1))
    left = int(rng.integers(0, w - rw + 1))
    m = np.zeros((h, w), dtype=bool)
    m[top:top + rh, left:left + rw] = True
    return m


def _triangle(h, w, rng):
    yy, xx = np.mgrid[0:h, 0:w]
    m = np.zeros((h, w), dtype=bool)
    for _ in range(20):
        ys = rng.uniform(0, h - 1, 3)
        xs = rng.uniform(0, w - 1, 3)
        e0 = (xx - xs[0]) * (ys[1] - ys[0]) - (yy - ys[0]) * (xs[1] - xs[0])
        e1 = (xx - xs[1]) * (ys[2] - ys[1]) - (yy - ys[1]) * (xs[2] - xs[1])
        e2 = (xx - xs[2]) * (ys[0] - ys[2]) - (yy - ys[2]) * (xs[0] - xs[2])
        m = ((e0 >= 0) & (e1 >= 0) & (e2 >= 0)) \
            | ((e0 <= 0) & (e1 <= 0) & (e2 <= 0))
        if m.sum() >= 8:
            break
    return m


def _stripe(h, w, rng):
    theta = rng.uniform(0, np.pi)
    thick = rng.uniform(0.08, 0.14) * min(h, w)
    yy, xx = np.ogrid[0:h, 0:w]
    proj = xx * np.cos(theta) + yy * np.sin(theta)
    pmin, pmax = float(proj.min()), float(proj.max())
    d = pmin + rng.uniform(0.2, 0.8) * (pmax - pmin)
    return np.abs(proj - d) <= thick / 2


_DRAW = {"disk": _disk, "rect": _rect, "triangle": _triangle, "stripe": _stripe}


def render_scene(k, h, w, rng, seed=None):
    """Render one scene: jittered palette shapes over a noisy background."""
    bg = np.clip(np.asarray(_PALETTE[0]) + rng.normal(0, COLOR_JITTER, 3), 0, 1)
    img = np.empty((3, h, w), dtype=np.float64)
    img[:] = bg[:, None, None]
    lab = np.zeros((h, w), dtype=np.uint8)

    classes = np.arange(1, k)
    weights = np.where((classes - 1) % 4 == 3, STRIPE_WEIGHT, 1.0)
    weights = weights / weights.sum()
    n_shapes = int(rng.integers(1, 5))
    for _ in range(n_shapes):
        c = int(rng.choice(classes, p=weights))
        color = np.clip(np.asarray(_PALETTE[c]) + rng.normal(0, COLOR_JITTER, 3), 0, 1)
        mask = _DRAW[_KINDS[(c - 1) % 4]](h, w, rng)
        img[:, mask] = color[:, None]
        lab[mask] = c
    img += rng.normal(0, NOISE_SIGMA, img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return ShapesScene(image=img, label=lab, noise_sigma=NOISE_SIGMA, seed=seed)


def generate_dataset(root, n_train, n_val, h, w, k, seed, crop=None):
    """Write a full dataset under `root`; returns the manifest skeleton.

    Deterministic per seed: scene i draws from substream (seed, "data", i),
    with validation scenes offset by n_train.  The skeleton marks all
    training ids unlabeled; `split` carves out the labeled subset.
    """
    if not (2 <= k <= 8):
        raise ArgumentError(f"k must be in [2, 8], got {k}")
    if h < 16 or w < 16:
        raise ArgumentError(f"scenes must be at least 16x16, got {h}x{w}")
    if n_train < 1 or n_val < 0:
        raise ArgumentError(f"need n_train >= 1, n_val >= 0, "
                            f"got {n_train}/{n_val}")
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)

    train_ids = [f"train_{i:04d}" for i in range(n_train)]
    val_ids = [f"val_{j:04d}" for j in range(n_val)]
    for index, sid in enumerate(train_ids + val_ids):
        scene = render_scene(k, h, w, substream(seed, "data", index), seed=seed)
        quant = np.rint(scene.image * 255.0).astype(np.uint8)
        write_ppm(root / "images" / f"{sid}.ppm", quant)
        write_pgm(root / "labels" / f"{sid}.pgm", scene.label)

    manifest = PartitionManifest(
        root=str(root), k=k, crop=crop if crop else min(h, w), seed=seed,
        labeled=[], unlabeled=train_ids, val=val_ids,
    )
    manifest.save()
    return manifest


# ------------------------------------------------------------- partition --

def parse_fraction(value):
    """Parse '1/8', '0.25', or a float into a fraction in (0, 1]."""
    if isinstance(value, str):
        try:
            if "/" in value:
                num, den = value.split("/", 1)
                frac = int(num) / int(den)
            else:
                frac = float(value)
        except (ValueError, ZeroDivisionError) as e:
            raise ArgumentError(f"cannot parse fraction {value!r}: {e}") from None
    else:
        frac = float(value)
    if not (0.0 < frac <= 1.0):
        raise ArgumentError(f"fraction must be in (0, 1], got {value!r}")
    return frac


def split(manifest, fraction, seed):
    """Partition the training pool into labeled/unlabeled subsets.

    `fraction` is a fraction of the pool ('1/16', 0.25, ...) or an explicit
    integer count.  Selection is keyed by (seed) over the *sorted* pool, so
    it does not depend on current list order.  Returns a new manifest.
    """
    pool = sorted(list(manifest.labeled) + list(manifest.unlabeled))
    if isinstance(fraction, (int, np.integer)) and not isinstance(fraction, bool):
        n = int(fraction)
    else:
        n = int(np.floor(len(pool) * parse_fraction(fraction) + 0.5))
    if n < 1:
        raise ArgumentError(
            f"fraction {fraction!r} of {len(pool)} leaves no labeled instances")
    if n > len(pool):
        raise ArgumentError(f"cannot label {n} of {len(pool)} instances")
    perm = substream(seed, "split").permutation(len(pool))
    chosen = sorted(pool[int(i)] for i in perm[:n])
    rest = sorted(pool[int(i)] for i in perm[n:])
    return replace(manifest, labeled=chosen, unlabeled=rest)


# --------------------------------------------------------------- loading --

def load_sample(manifest, sid):
    """Load one sample; labels surface only for labeled/val ids."""
    img_path = manifest.image_path(sid)
    if not img_path.exists():
        raise DataError(f"unknown instance id {sid!r} (no file {img_path})")
    image = (read_ppm(img_path).astype(np.float32) / 255.0)
    if sid in set(manifest.labeled) | set(manifest.val):
        return LabeledSample(id=sid, image=image,
                             label=read_pgm(manifest.label_path(sid)))
    return UnlabeledSample(id=sid, image=image)


def load_batch(manifest, ids, rng, *, batch):
    """Sample `batch` ids from the pool and load them.

    Without replacement when the pool is large enough, with replacement
    otherwise (the labeled pool is usually smaller than the batch).
    """
    ids = list(ids)
    if not ids:
        raise ArgumentError("cannot sample from an empty id pool")
    if batch < 1:
        raise ArgumentError(f"batch must be >= 1, got {batch}")
    if batch <= len(ids):
        chosen = [ids[int(i)] for i in rng.permutation(len(ids))[:batch]]
    else:
        chosen = [ids[int(i)] for i in rng.integers(0, len(ids), size=batch)]
    return [load_sample(manifest, sid) for sid in chosen]
