"""Synthetic joint-gap radiograph stand-in and the preprocessing pipeline.

Each generated image shows two textured "bone" bands separated by a darker
articular gap. The ordinal grade (0..4) is encoded monotonically and only
inside the region of interest: the gap narrows with grade, bright
osteophyte-like protrusions appear at the joint margins, and the band edges
brighten (sclerosis). Background and band placement carry no label signal,
so a classifier must look at the joint region, which is what the
localization benchmark measures.

Per-sample RNG streams are split from the manifest seed, so generation is
order-independent and bit-reproducible.
"""

import csv
import hashlib
import os
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

GRADES = 5
# grade -> fraction of image height occupied by the joint gap (before jitter)
GAP_FRAC_MAX = 0.22
GAP_FRAC_MIN = 0.02
GAP_JITTER = 0.015  # < half the per-grade step, so mean gap stays strictly ordered
OSTEOPHYTES_PER_GRADE = (0, 1, 2, 3, 5)


class Roi(NamedTuple):
    top: int
    left: int
    height: int
    width: int


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 1) float64 in [0, 1]
    label: int
    roi: Roi
    side: str  # "left" | "right"
    split: str = ""  # "train" | "val" | "test"
    sample_id: str = ""


@dataclass(frozen=True)
class DatasetManifest:
    seed: int = 0
    counts_per_grade: tuple = (40, 40, 40, 40, 40)
    image_hw: tuple = (64, 48)
    split_fractions: tuple = (0.63, 0.07, 0.30)  # 70/30 with 10% of train held out
    augment_flips: bool = True
    gen_scale: float = 1.25  # generation happens at this oversize, then bilinear resize

    def __post_init__(self):
        if len(self.counts_per_grade) != GRADES or any(c < 0 for c in self.counts_per_grade):
            raise ValueError(f"counts_per_grade must be {GRADES} non-negative ints, got {self.counts_per_grade}")
        if sum(self.counts_per_grade) == 0:
            raise ValueError("dataset must contain at least one sample")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {self.split_fractions}")
        if min(self.image_hw) < 16:
            raise ValueError(f"image size too small to draw a joint: {self.image_hw}")


def _sample_rng(seed, index):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _draw_joint(rng, h, w, grade):
    """One joint-gap image plus its ROI."""
    img = rng.normal(0.30, 0.05, (h, w))
    img += np.linspace(-0.02, 0.02, h)[:, None]  # mild vignetting, label-free

    cy = int(round(rng.uniform(0.42, 0.58) * h))
    gap_frac = GAP_FRAC_MAX - grade * (GAP_FRAC_MAX - GAP_FRAC_MIN) / (GRADES - 1)
    gap = max(int(round((gap_frac + rng.uniform(-GAP_JITTER, GAP_JITTER)) * h)), 0)
    y1 = cy - gap // 2
    y2 = y1 + gap
    t_up = int(round(rng.uniform(0.16, 0.24) * h))
    t_dn = int(round(rng.uniform(0.16, 0.24) * h))
    cx0 = int(round(rng.uniform(0.06, 0.16) * w))
    cx1 = w - int(round(rng.uniform(0.06, 0.16) * w))

    edge_up = y1 - rng.integers(0, 2, cx1 - cx0)  # ragged band edges
    edge_dn = y2 + rng.integers(0, 2, cx1 - cx0)
    for j, col in enumerate(range(cx0, cx1)):
        top = max(edge_up[j] - t_up, 0)
        img[top : edge_up[j], col] = 0.75 + rng.normal(0.0, 0.04, max(edge_up[j] - top, 0))
        bot = min(edge_dn[j] + t_dn, h)
        img[edge_dn[j] : bot, col] = 0.75 + rng.normal(0.0, 0.04, max(bot - edge_dn[j], 0))
        if y2 > y1:
            img[y1 : y2, col] = 0.22 + rng.normal(0.0, 0.04, y2 - y1)

    # sclerosis: the band edges facing the gap brighten with severity
    if grade >= 2:
        boost = 0.05 * (grade - 1)
        img[max(y1 - 2, 0) : y1, cx0:cx1] += boost
        img[y2 : min(y2 + 2, h), cx0:cx1] += boost

    # osteophyte-like protrusions at the joint margins, reaching into the gap
    for i in range(OSTEOPHYTES_PER_GRADE[grade]):
        margin = cx0 + 2 if i % 2 == 0 else cx1 - 3
        col = int(np.clip(margin + rng.integers(-1, 2), 0, w - 1))
        anchor = y1 if rng.random() < 0.5 else y2 - 1
        radius = int(rng.integers(2, 4))
        rr, cc = np.ogrid[:h, :w]
        bump = (rr - anchor) ** 2 + (cc - col) ** 2 <= radius**2
        img[bump] = 0.78 + rng.normal(0.0, 0.03)

    m = max(2, int(round(0.04 * h)))
    top = max(y1 - m, 0)
    bottom = min(y2 + m, h)
    roi = Roi(top=top, left=cx0, height=bottom - top, width=cx1 - cx0)
    return np.clip(img, 0.0, 1.0)[..., None], roi


def generate_synthetic(manifest, image_hw=None):
    """Generate the raw samples described by the manifest (splits untagged)."""
    h, w = image_hw or manifest.image_hw
    samples = []
    index = 0
    for grade, count in enumerate(manifest.counts_per_grade):
        for _ in range(count):
            rng = _sample_rng(manifest.seed, index)
            image, roi = _draw_joint(rng, h, w, grade)
            side = "left" if rng.random() < 0.5 else "right"
            samples.append(Sample(image=image, label=grade, roi=roi, side=side, sample_id=f"s{index:05d}"))
            index += 1
    return samples


# ---------------------------------------------------------------------------
# preprocessing


def split_bilateral(image, flip_right=True):
    """Split a two-joint frame into (left, right) halves.

    The left half is columns [0, floor(W/2)); the right half is columns
    [ceil(W/2), W), horizontally flipped to the canonical orientation unless
    ``flip_right`` is False. An odd center column is dropped.
    """
    w = image.shape[1]
    if w < 2:
        raise ValueError(f"cannot split an image of width {w}")
    left = image[:, : w // 2].copy()
    right = image[:, (w + 1) // 2 :].copy()
    if flip_right:
        right = right[:, ::-1].copy()
    return left, right


def resize_bilinear(image, target_hw):
    """Bilinear resample with half-pixel centers and edge clamping.

    The target size is chosen by the caller to encode the dataset's mean
    aspect ratio. Identity targets return bit-identical images.
    """
    src = np.asarray(image, dtype=np.float64)
    squeeze = False
    if src.ndim == 3 and src.shape[2] == 1:
        src, squeeze = src[:, :, 0], True
    sh, sw = src.shape
    th, tw = target_hw
    if th < 1 or tw < 1:
        raise ValueError(f"target size must be positive, got {target_hw}")
    if sh < 1 or sw < 1:
        raise ValueError(f"degenerate source image {src.shape}")

    sy = (np.arange(th) + 0.5) * (sh / th) - 0.5
    sx = (np.arange(tw) + 0.5) * (sw / tw) - 0.5
    y0 = np.clip(np.floor(sy).astype(int), 0, sh - 1)
    x0 = np.clip(np.floor(sx).astype(int), 0, sw - 1)
    y1 = np.minimum(y0 + 1, sh - 1)
    x1 = np.minimum(x0 + 1, sw - 1)
    wy = np.clip(sy - y0, 0.0, 1.0)[:, None]
    wx = np.clip(sx - x0, 0.0, 1.0)[None, :]

    a = src[np.ix_(y0, x0)]
    b = src[np.ix_(y0, x1)]
    c = src[np.ix_(y1, x0)]
    d = src[np.ix_(y1, x1)]
    top = a + wx * (b - a)  # lerp form: exact for constant rows
    bot = c + wx * (d - c)
    out = top + wy * (bot - top)
    return out if squeeze is False else out[..., None]


def scale_roi(roi, src_hw, dst_hw):
    sh, sw = src_hw
    dh, dw = dst_hw
    top = int(round(roi.top * dh / sh))
    bottom = int(round((roi.top + roi.height) * dh / sh))
    left = int(round(roi.left * dw / sw))
    right = int(round((roi.left + roi.width) * dw / sw))
    top, left = max(top, 0), max(left, 0)
    bottom, right = min(max(bottom, top + 1), dh), min(max(right, left + 1), dw)
    return Roi(top=top, left=left, height=bottom - top, width=right - left)


def hist_equalize(image):
    """Classical 256-bin histogram equalization on [0, 1] values.

    Constant images pass through unchanged (degenerate cdf).
    """
    img = np.asarray(image, dtype=np.float64)
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("hist_equalize expects values in [0, 1]")
    bins = np.minimum((img * 256).astype(int), 255)
    counts = np.bincount(bins.ravel(), minlength=256)
    cdf = counts.cumsum()
    cdf_min = cdf[(counts > 0).argmax()]  # cdf at the first occupied bin
    npix = img.size
    if npix == cdf_min:  # single occupied bin: constant image
        return img.copy()
    lut = (cdf - cdf_min) / (npix - cdf_min)
    return lut[bins]


def hflip_image(image):
    return image[:, ::-1].copy()


def hflip_roi(roi, width):
    return Roi(top=roi.top, left=width - roi.left - roi.width, height=roi.height, width=roi.width)


def hflip_augment(samples):
    """Double the training split with mirrored copies; val/test untouched."""
    out = list(samples)
    for s in samples:
        if s.split != "train":
            continue
        w = s.image.shape[1]
        out.append(
            replace(
                s,
                image=hflip_image(s.image),
                roi=hflip_roi(s.roi, w),
                side="right" if s.side == "left" else "left",
                sample_id=s.sample_id + "f",
            )
        )
    return out


def stratified_split(samples, fractions=(0.63, 0.07, 0.30), seed=0):
    """Tag samples train/val/test, preserving the grade distribution.

    Within each grade the split sizes follow the fractions by largest
    remainder, so every split's per-grade share is within one sample of the
    target. Deterministic under the seed.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    names = ("train", "val", "test")
    n_splits = sum(1 for f in fractions if f > 0)
    rng = np.random.default_rng(seed)
    by_grade = {}
    for i, s in enumerate(samples):
        by_grade.setdefault(s.label, []).append(i)

    tagged = list(samples)
    for grade in sorted(by_grade):
        idx = by_grade[grade]
        if len(idx) < n_splits:
            raise ValueError(f"grade {grade} has {len(idx)} samples, fewer than the {n_splits} splits")
        order = rng.permutation(len(idx))
        quotas = _largest_remainder(len(idx), fractions)
        start = 0
        for name, q in zip(names, quotas):
            for k in order[start : start + q]:
                tagged[idx[k]] = replace(tagged[idx[k]], split=name)
            start += q
    return tagged


def _largest_remainder(n, fractions):
    raw = [n * f for f in fractions]
    base = [int(x) for x in raw]
    short = n - sum(base)
    remainders = sorted(range(len(raw)), key=lambda i: raw[i] - base[i], reverse=True)
    for i in remainders[:short]:
        base[i] += 1
    # guarantee non-empty splits for nonzero fractions when possible
    for i, f in enumerate(fractions):
        if f > 0 and base[i] == 0:
            donor = max(range(len(base)), key=lambda j: base[j])
            base[donor] -= 1
            base[i] += 1
    return base


def build_dataset(manifest):
    """Generate, resize, equalize, split and (optionally) augment."""
    gh = int(round(manifest.image_hw[0] * manifest.gen_scale))
    gw = int(round(manifest.image_hw[1] * manifest.gen_scale))
    samples = generate_synthetic(manifest, image_hw=(gh, gw))
    out = []
    for s in samples:
        img = resize_bilinear(s.image, manifest.image_hw)
        img = hist_equalize(img)
        roi = scale_roi(s.roi, (gh, gw), manifest.image_hw)
        out.append(replace(s, image=img, roi=roi))
    out = stratified_split(out, manifest.split_fractions, manifest.seed)
    if manifest.augment_flips:
        out = hflip_augment(out)
    return out


# ---------------------------------------------------------------------------
# on-disk format: manifest.json + index.csv + images/<id>.npy


def save_dataset(samples, manifest, out_dir):
    import json

    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(
            {
                "seed": manifest.seed,
                "counts_per_grade": list(manifest.counts_per_grade),
                "image_hw": list(manifest.image_hw),
                "split_fractions": list(manifest.split_fractions),
                "augment_flips": manifest.augment_flips,
                "gen_scale": manifest.gen_scale,
            },
            fh,
            indent=2,
            sort_keys=True,
        )
    with open(os.path.join(out_dir, "index.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label", "side", "split", "roi_top", "roi_left", "roi_height", "roi_width"])
        for s in samples:
            writer.writerow([s.sample_id, s.label, s.side, s.split, *s.roi])
            np.save(os.path.join(out_dir, "images", f"{s.sample_id}.npy"), s.image)


def load_dataset(data_dir):
    import json

    with open(os.path.join(data_dir, "manifest.json")) as fh:
        m = json.load(fh)
    manifest = DatasetManifest(
        seed=m["seed"],
        counts_per_grade=tuple(m["counts_per_grade"]),
        image_hw=tuple(m["image_hw"]),
        split_fractions=tuple(m["split_fractions"]),
        augment_flips=m["augment_flips"],
        gen_scale=m["gen_scale"],
    )
    samples = []
    with open(os.path.join(data_dir, "index.csv"), newline="") as fh:
        for row in csv.DictReader(fh):
            image = np.load(os.path.join(data_dir, "images", f"{row['id']}.npy"))
            samples.append(
                Sample(
                    image=image,
                    label=int(row["label"]),
                    roi=Roi(int(row["roi_top"]), int(row["roi_left"]), int(row["roi_height"]), int(row["roi_width"])),
                    side=row["side"],
                    split=row["split"],
                    sample_id=row["id"],
                )
            )
    return manifest, samples


def dataset_checksum(data_dir):
    """SHA-256 over the index and all image bytes, for reproducibility checks."""
    digest = hashlib.sha256()
    with open(os.path.join(data_dir, "index.csv"), "rb") as fh:
        digest.update(fh.read())
    images_dir = os.path.join(data_dir, "images")
    for name in sorted(os.listdir(images_dir)):
        with open(os.path.join(images_dir, name), "rb") as fh:
            digest.update(fh.read())
    return digest.hexdigest()
