"""Dataset ingestion, quality filtering, preprocessing, augmentation, SMOTE.

Raw images live on a 0..255 value scale (PNG bytes or float32 `.raw` tiles).
`preprocess` resizes to 64x64 with bilinear interpolation and divides by 255,
producing ImageSample pixels in [0,1]. Filtering runs on the raw image, before
any resampling.

Oversampling treats each image as a flat 12288-dim vector: neighbors come from
Euclidean distance, and each synthetic point is a per-dimension convex blend of
a base sample and one of its k nearest in-class neighbors.
"""

import csv
import io
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, DataError

TARGET_SIZE = 64
MIN_SIDE = 32
MIN_VARIANCE = 1e-4
MAX_SATURATED_FRACTION = 0.05


# ====== samples and datasets ======

@dataclass
class ImageSample:
    pixels: np.ndarray  # [64,64,3] float32 in [0,1]
    label: int
    source_id: str
    synthetic: bool = False


@dataclass
class Dataset:
    samples: list
    splits: dict  # source_id -> "train" | "val" | "test"

    def split(self, name):
        return [s for s in self.samples if self.splits.get(s.source_id) == name]

    def counts(self, num_classes):
        out = np.zeros(num_classes, dtype=int)
        for s in self.samples:
            out[s.label] += 1
        return out


def check_sample(sample: ImageSample, num_classes: int = 7):
    p = sample.pixels
    if p.shape != (TARGET_SIZE, TARGET_SIZE, 3):
        raise DataError(f"sample {sample.source_id}: pixels {p.shape}, "
                        f"want ({TARGET_SIZE},{TARGET_SIZE},3)")
    if p.min() < 0.0 or p.max() > 1.0:
        raise DataError(f"sample {sample.source_id}: pixel range "
                        f"[{p.min():.4g},{p.max():.4g}] outside [0,1]")
    if not (0 <= sample.label < num_classes):
        raise DataError(f"sample {sample.source_id}: label {sample.label} "
                        f"outside [0,{num_classes - 1}]")


# ====== quality filtering ======

@dataclass(frozen=True)
class FilterResult:
    keep: bool
    reason: str = ""


def quality_filter(raw) -> FilterResult:
    """Reject raw (0..255 scale) images that are too small, flat, or blown out."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 3 or raw.shape[2] != 3:
        raise DataError(f"quality_filter expects [H,W,3], got {raw.shape}")
    h, w, _ = raw.shape
    if min(h, w) < MIN_SIDE:
        return FilterResult(False, "low_resolution")
    if np.var(raw / 255.0) < MIN_VARIANCE:
        return FilterResult(False, "low_variance")
    if np.mean(raw >= 255.0) > MAX_SATURATED_FRACTION:
        return FilterResult(False, "saturated")
    return FilterResult(True)


# ====== resize and normalize ======

def bilinear_resize(img, out_h, out_w):
    """Bilinear resample [H,W,C] -> [out_h,out_w,C], half-pixel-center sampling.

    Source coordinate for output index d is (d + 0.5) * (in/out) - 0.5, with
    edge clamping, so a 2x2 -> 1x1 resize samples the exact center.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    y0 = np.clip(y0, 0, h - 1)
    x0 = np.clip(x0, 0, w - 1)
    top = img[np.ix_(y0, x0)] * (1 - fx) + img[np.ix_(y0, x1)] * fx
    bot = img[np.ix_(y1, x0)] * (1 - fx) + img[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def preprocess(raw, label: int, source_id: str) -> ImageSample:
    """Raw 0..255 image of any size -> 64x64 float32 sample in [0,1]."""
    resized = bilinear_resize(raw, TARGET_SIZE, TARGET_SIZE)
    pixels = np.clip(resized / 255.0, 0.0, 1.0).astype(np.float32)
    sample = ImageSample(pixels, int(label), source_id)
    check_sample(sample)
    return sample


# ====== augmentation ======

@dataclass(frozen=True)
class AugmentConfig:
    brightness: tuple = (0.7, 1.3)
    contrast: tuple = (0.8, 1.2)
    flip_prob: float = 0.5
    hue_shift: float = 0.08
    saturation: tuple = (0.85, 1.15)
    seed: int = 0

    def __post_init__(self):
        for name in ("brightness", "contrast", "saturation"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ConfigError(f"augment {name} range ({lo},{hi}) invalid")
        if not (0.0 <= self.flip_prob <= 1.0):
            raise ConfigError(f"flip_prob must be in [0,1], got {self.flip_prob}")
        if self.hue_shift < 0:
            raise ConfigError(f"hue_shift must be >= 0, got {self.hue_shift}")


def _clip01(x):
    return np.clip(x, 0.0, 1.0)


def augment(sample: ImageSample, cfg: AugmentConfig, rng) -> ImageSample:
    """Brightness, contrast, flips, hue, saturation, in that fixed order.

    All six random draws happen unconditionally so the rng stream does not
    depend on which stages turn out to be identity. Each stage clamps back to
    [0,1]; the label is untouched.
    """
    from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

    b = rng.uniform(*cfg.brightness)
    c = rng.uniform(*cfg.contrast)
    flip_h = rng.random() < cfg.flip_prob
    flip_v = rng.random() < cfg.flip_prob
    hue = rng.uniform(-cfg.hue_shift, cfg.hue_shift)
    sat = rng.uniform(*cfg.saturation)

    x = sample.pixels.astype(np.float64)
    if b != 1.0:
        x = _clip01(x * b)
    if c != 1.0:
        x = _clip01((x - x.mean()) * c + x.mean())
    if flip_h:
        x = x[:, ::-1, :]
    if flip_v:
        x = x[::-1, :, :]
    if hue != 0.0:
        hsv = rgb_to_hsv(x)
        hsv[:, :, 0] = (hsv[:, :, 0] + hue) % 1.0
        x = _clip01(hsv_to_rgb(hsv))
    if sat != 1.0:
        hsv = rgb_to_hsv(x)
        hsv[:, :, 1] = np.clip(hsv[:, :, 1] * sat, 0.0, 1.0)
        x = _clip01(hsv_to_rgb(hsv))
    return replace(sample, pixels=np.ascontiguousarray(x, dtype=np.float32))


# ====== neighbors and oversampling ======

def knn(points, query: int, k: int):
    """Indices of the k nearest points to points[query], excluding the query.

    Euclidean distance, ascending; exact ties resolved toward the lower index.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if not (0 <= query < n):
        raise DataError(f"knn query index {query} outside [0,{n - 1}]")
    if k < 1 or k > n - 1:
        raise DataError(f"knn k={k} needs 1 <= k <= {n - 1} for {n} points")
    d = np.sqrt(np.sum((points - points[query]) ** 2, axis=1))
    order = sorted(i for i in range(n) if i != query)
    order.sort(key=lambda i: d[i])  # stable: distance first, index breaks ties
    return order[:k]


@dataclass(frozen=True)
class SmoteConfig:
    k: int = 5
    target_count: int | None = None  # None: match the largest class
    seed: int = 0
    single_lambda: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"smote k must be >= 1, got {self.k}")


def smote_generate(x_i, x_j, rng, single_lambda: bool = False):
    """One synthetic vector between two parents: x_i + lambda * (x_j - x_i).

    lambda is drawn uniformly per dimension (or once, when single_lambda), so
    every coordinate stays inside the parents' coordinate-wise envelope.
    """
    x_i = np.asarray(x_i, dtype=np.float64)
    x_j = np.asarray(x_j, dtype=np.float64)
    lam = rng.random() if single_lambda else rng.random(x_i.shape)
    return x_i + lam * (x_j - x_i)


def smote_oversample(samples, cfg: SmoteConfig, num_classes: int = 7, rng=None):
    """Bring every class up to the target count with synthetic samples.

    Originals pass through untouched; synthetics are appended with flags set.
    Only call this on the training portion of a dataset.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    by_class = {c: [s for s in samples if s.label == c] for c in range(num_classes)}
    counts = {c: len(v) for c, v in by_class.items()}
    target = cfg.target_count if cfg.target_count is not None else max(counts.values())

    out = list(samples)
    for c in range(num_classes):
        group = by_class[c]
        need = target - counts[c]
        if need <= 0:
            continue
        if counts[c] < cfg.k + 1:
            raise DataError(
                f"class {c} has {counts[c]} samples; SMOTE with k={cfg.k} "
                f"needs at least {cfg.k + 1}"
            )
        flat = np.stack([s.pixels.reshape(-1) for s in group])
        neighbor_ids = [knn(flat, i, cfg.k) for i in range(len(group))]
        for m in range(need):
            base_idx = m % len(group)
            base = group[base_idx]
            pick = neighbor_ids[base_idx][int(rng.integers(cfg.k))]
            vec = smote_generate(flat[base_idx], flat[pick], rng, cfg.single_lambda)
            pixels = np.clip(vec, 0.0, 1.0).astype(np.float32)
            # parent pair is recoverable from the id: base+neighbor#sN
            out.append(ImageSample(
                pixels.reshape(TARGET_SIZE, TARGET_SIZE, 3), c,
                f"{base.source_id}+{group[pick].source_id}#s{m}", synthetic=True))
    return out


# ====== disk formats ======

RAW_SHAPE = (64, 64, 3)
RAW_BYTES = 64 * 64 * 3 * 4


def load_image(path) -> np.ndarray:
    """Read a PNG or `.raw` tile as float64 on the 0..255 scale."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"image file missing: {path}")
    if path.suffix == ".raw":
        buf = path.read_bytes()
        if len(buf) != RAW_BYTES:
            raise DataError(f"{path}: raw tile is {len(buf)} bytes, want {RAW_BYTES}")
        arr = np.frombuffer(buf, dtype="<f4").reshape(RAW_SHAPE)
        return arr.astype(np.float64)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DataError(f"{path}: cannot decode image: {exc}") from exc
    return arr


def save_png(path, raw):
    """Write a 0..255-scale array as an 8-bit PNG."""
    arr = np.clip(np.asarray(raw), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_labels(csv_path, num_classes: int = 7):
    """labels.csv rows (source_id, filename, label) with a header line."""
    csv_path = Path(csv_path)
    if not csv_path.exists():
        raise DataError(f"labels file missing: {csv_path}")
    rows = []
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["source_id", "filename", "label"]:
            raise DataError(f"{csv_path}: header {header} != "
                            "['source_id', 'filename', 'label']")
        for ln, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise DataError(f"{csv_path}:{ln}: expected 3 fields, got {len(row)}")
            sid, fname, label_s = row
            try:
                label = int(label_s)
            except ValueError:
                raise DataError(f"{csv_path}:{ln}: label {label_s!r} is not an integer")
            if not (0 <= label < num_classes):
                raise DataError(f"{csv_path}:{ln}: label {label} outside "
                                f"[0,{num_classes - 1}]")
            rows.append((sid, fname, label))
    if not rows:
        raise DataError(f"{csv_path}: no data rows")
    return rows


def load_splits(path):
    """splits.txt: one `source_id,split` line per sample."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"split manifest missing: {path}")
    splits = {}
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 2 or parts[1] not in ("train", "val", "test"):
            raise DataError(f"{path}:{ln}: want 'source_id,train|val|test', got {line!r}")
        splits[parts[0]] = parts[1]
    return splits


def save_splits(path, splits: dict):
    lines = [f"{sid},{name}" for sid, name in splits.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def ingest(dataset_dir, num_classes: int = 7):
    """Load a raw dataset directory: filter, resize, normalize.

    Returns (Dataset, rejects) where rejects is a list of (source_id, reason).
    Undecodable files raise DataError rather than count as rejections.
    """
    dataset_dir = Path(dataset_dir)
    rows = load_labels(dataset_dir / "labels.csv", num_classes)
    splits = load_splits(dataset_dir / "splits.txt")
    samples = []
    rejects = []
    for sid, fname, label in rows:
        raw = load_image(dataset_dir / "images" / fname)
        verdict = quality_filter(raw)
        if not verdict.keep:
            rejects.append((sid, verdict.reason))
            continue
        samples.append(preprocess(raw, label, sid))
    kept = {s.source_id for s in samples}
    return Dataset(samples, {k: v for k, v in splits.items() if k in kept}), rejects


def save_processed(path, dataset: Dataset):
    """Single-file .npz bundle for a filtered/normalized dataset."""
    samples = dataset.samples
    np.savez_compressed(
        path,
        pixels=np.stack([s.pixels for s in samples]) if samples else
        np.zeros((0, TARGET_SIZE, TARGET_SIZE, 3), np.float32),
        labels=np.array([s.label for s in samples], dtype=np.int64),
        source_ids=np.array([s.source_id for s in samples]),
        synthetic=np.array([s.synthetic for s in samples], dtype=bool),
        split_ids=np.array(list(dataset.splits.keys())),
        split_names=np.array(list(dataset.splits.values())),
    )


def load_processed(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise DataError(f"processed dataset missing: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            pixels = z["pixels"]
            labels = z["labels"]
            sids = z["source_ids"]
            synth = z["synthetic"]
            splits = dict(zip(z["split_ids"].tolist(), z["split_names"].tolist()))
    except (KeyError, ValueError, OSError, io.UnsupportedOperation) as exc:
        raise DataError(f"{path}: not a processed dataset bundle: {exc}") from exc
    samples = [
        ImageSample(pixels[i], int(labels[i]), str(sids[i]), bool(synth[i]))
        for i in range(len(labels))
    ]
    return Dataset(samples, splits)
