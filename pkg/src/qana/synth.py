"""Synthetic seven-class image generator.

Each class is a distinct geometric pattern stamped on a noisy warm-toned
background, so a small CNN can separate them while the raw files still
exercise the full ingest path (varied sizes, class imbalance, rejects).

Class counts follow a geometric imbalance profile: class c gets
round(n0 * ratio^(-c/6)) images, so class 0 is the majority and class 6
has n0/ratio.
"""

from pathlib import Path

import numpy as np

from .data import save_png, save_splits
from .errors import ConfigError
from .rng import sample_rng, stage_rng

PATTERN_NAMES = (
    "disc", "ring", "h_stripes", "v_stripes", "checker", "twin_blobs", "wedge",
)

_BG = np.array([205.0, 170.0, 150.0])
_FG = np.array([95.0, 60.0, 55.0])


def class_counts(n_majority: int, ratio: float, num_classes: int = 7):
    """round(n0 * ratio^(-c/(K-1))) per class, majority first."""
    if n_majority < 1 or ratio < 1.0:
        raise ConfigError(f"need n_majority >= 1 and ratio >= 1, got "
                          f"{n_majority}, {ratio}")
    return [
        int(round(n_majority * ratio ** (-c / (num_classes - 1))))
        for c in range(num_classes)
    ]


def _grids(size):
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    return (y / (size - 1)) * 2 - 1, (x / (size - 1)) * 2 - 1  # in [-1,1]


def _pattern_mask(class_id, size, rng):
    """Boolean foreground mask for one pattern instance, with jitter."""
    yy, xx = _grids(size)
    cy = rng.uniform(-0.15, 0.15)
    cx = rng.uniform(-0.15, 0.15)
    r = np.hypot(yy - cy, xx - cx)
    if class_id == 0:  # disc
        return r < rng.uniform(0.45, 0.6)
    if class_id == 1:  # ring
        mid = rng.uniform(0.45, 0.6)
        return np.abs(r - mid) < rng.uniform(0.1, 0.16)
    if class_id == 2:  # horizontal stripes
        period = rng.uniform(0.28, 0.42)
        return ((yy - cy) / period % 1.0) < 0.5
    if class_id == 3:  # vertical stripes
        period = rng.uniform(0.28, 0.42)
        return ((xx - cx) / period % 1.0) < 0.5
    if class_id == 4:  # checkerboard
        period = rng.uniform(0.4, 0.6)
        return (((yy - cy) / period % 1.0) < 0.5) ^ (((xx - cx) / period % 1.0) < 0.5)
    if class_id == 5:  # two blobs
        dx = rng.uniform(0.35, 0.5)
        r1 = np.hypot(yy - cy, xx - cx + dx)
        r2 = np.hypot(yy - cy, xx - cx - dx)
        rad = rng.uniform(0.22, 0.3)
        return (r1 < rad) | (r2 < rad)
    if class_id == 6:  # angular wedge
        ang = np.arctan2(yy - cy, xx - cx)
        start = rng.uniform(-np.pi, np.pi)
        width = rng.uniform(1.6, 2.2)
        return (((ang - start) % (2 * np.pi)) < width) & (r < 0.85)
    raise ConfigError(f"class_id {class_id} outside [0,6]")


def render_sample(class_id, size, rng):
    """One raw image on the 0..255 scale, [size,size,3] float64."""
    mask = _pattern_mask(class_id, size, rng)
    bg = _BG * rng.uniform(0.92, 1.08)
    fg = _FG * rng.uniform(0.9, 1.1)
    img = np.where(mask[:, :, None], fg, bg)
    img += rng.normal(0.0, 6.0, img.shape)
    return np.clip(img, 0.0, 250.0)  # keep below the saturation filter


def assign_splits(ids_by_class, rng, fractions=(0.7, 0.15, 0.15)):
    """Stratified shuffle into train/val/test, at least one test id per class."""
    splits = {}
    for ids in ids_by_class:
        ids = list(ids)
        rng.shuffle(ids)
        n = len(ids)
        n_tr = int(round(fractions[0] * n))
        n_va = int(round(fractions[1] * n))
        n_tr = min(n_tr, n - 2)
        n_va = min(n_va, n - n_tr - 1)
        for i, sid in enumerate(ids):
            if i < n_tr:
                splits[sid] = "train"
            elif i < n_tr + n_va:
                splits[sid] = "val"
            else:
                splits[sid] = "test"
    return splits


def generate_dataset(out_dir, n_majority: int = 120, imbalance: float = 5.0,
                     seed: int = 0, size_range=(72, 112), num_classes: int = 7):
    """Write images/, labels.csv, and splits.txt under out_dir.

    Returns a summary dict with per-class counts and the split sizes.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    counts = class_counts(n_majority, imbalance, num_classes)
    split_rng = stage_rng(seed, "synth")

    rows = []
    ids_by_class = []
    idx = 0
    for c, count in enumerate(counts):
        ids = []
        for _ in range(count):
            sid = f"synth-{idx:04d}"
            rng = sample_rng(seed, "synth", idx)
            size = int(rng.integers(size_range[0], size_range[1] + 1))
            img = render_sample(c, size, rng)
            fname = f"{sid}.png"
            save_png(out_dir / "images" / fname, img)
            rows.append(f"{sid},{fname},{c}")
            ids.append(sid)
            idx += 1
        ids_by_class.append(ids)

    (out_dir / "labels.csv").write_text(
        "source_id,filename,label\n" + "\n".join(rows) + "\n")
    splits = assign_splits(ids_by_class, split_rng)
    save_splits(out_dir / "splits.txt", splits)

    names = list(splits.values())
    return {
        "class_counts": counts,
        "total": sum(counts),
        "train": names.count("train"),
        "val": names.count("val"),
        "test": names.count("test"),
    }
