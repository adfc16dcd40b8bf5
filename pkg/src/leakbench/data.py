"""Synthetic multi-site radiograph-like images, augmentation, batching and PGM ingestion.

Each synthetic image is a soft body silhouette with two darker lung fields,
low-frequency texture and an "opacity" blob whose brightness depends on the
pathology label. A site applies its own acquisition nuisances on top
(intensity offset, gamma, sensor noise, a corner marker and a border crop),
all scaled by a single ``severity`` knob.
"""

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SiteSpec:
    """Acquisition profile of one synthetic site.

    ``severity`` scales every nuisance; at 0 all sites share one distribution.
    Per-site prevalence is ``prevalence * (1 + label_site_correlation * prevalence_direction)``.
    """

    site_id: int
    name: str = ""
    intensity_offset: float = 0.0
    gamma: float = 1.0
    noise_sigma: float = 0.0
    corner_tag: bool = False
    border_crop: float = 0.0
    severity: float = 1.0
    prevalence: float = 0.1
    label_site_correlation: float = 0.0
    prevalence_direction: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.severity <= 1.0:
            raise ValueError(f"site {self.site_id}: severity must lie in [0, 1], got {self.severity}")
        if not 0.0 <= self.label_site_correlation < 1.0:
            raise ValueError(
                f"site {self.site_id}: label_site_correlation must lie in [0, 1), "
                f"got {self.label_site_correlation}"
            )
        if not -1.0 <= self.prevalence_direction <= 1.0:
            raise ValueError(f"site {self.site_id}: prevalence_direction must lie in [-1, 1]")
        p = self.effective_prevalence
        if not 0.0 < p < 1.0:
            raise ValueError(f"site {self.site_id}: prevalence {p} outside (0, 1)")

    @property
    def label(self):
        return self.name or f"site{self.site_id}"

    @property
    def effective_prevalence(self):
        return self.prevalence * (1.0 + self.label_site_correlation * self.prevalence_direction)


@dataclass
class LabeledImage:
    pixels: np.ndarray
    y: int
    s: int
    split: str
    id: str = ""


@dataclass
class ImageSet:
    """Column-oriented collection of labelled images sharing one grid size."""

    images: np.ndarray
    y: np.ndarray
    s: np.ndarray
    split: np.ndarray
    ids: np.ndarray

    def __len__(self):
        return len(self.y)

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            return LabeledImage(self.images[idx], int(self.y[idx]), int(self.s[idx]), str(self.split[idx]), str(self.ids[idx]))
        return ImageSet(self.images[idx], self.y[idx], self.s[idx], self.split[idx], self.ids[idx])

    def records(self):
        for i in range(len(self)):
            yield self[i]

    def where(self, split=None, site=None):
        mask = np.ones(len(self), dtype=bool)
        if split is not None:
            mask &= self.split == split
        if site is not None:
            mask &= self.s == site
        return self[np.flatnonzero(mask)]

    @staticmethod
    def concat(sets):
        sets = list(sets)
        return ImageSet(
            np.concatenate([s.images for s in sets]),
            np.concatenate([s.y for s in sets]),
            np.concatenate([s.s for s in sets]),
            np.concatenate([s.split for s in sets]),
            np.concatenate([s.ids for s in sets]),
        )


@dataclass
class DatasetManifest:
    records: list
    counts: dict = field(default_factory=dict)
    positives: dict = field(default_factory=dict)

    @classmethod
    def from_imageset(cls, data, paths=None):
        records = []
        for i in range(len(data)):
            ref = paths[i] if paths is not None else str(data.ids[i])
            records.append((ref, int(data.y[i]), int(data.s[i]), str(data.split[i])))
        m = cls(records)
        m.summarize()
        return m

    def summarize(self):
        self.counts, self.positives = {}, {}
        for _, y, s, split in self.records:
            key = (s, split)
            self.counts[key] = self.counts.get(key, 0) + 1
            self.positives[key] = self.positives.get(key, 0) + int(y == 1)
        return self

    def check(self):
        refs = [r[0] for r in self.records]
        if len(set(refs)) != len(refs):
            raise ValueError("manifest: a record appears more than once (splits must be disjoint)")
        total = sum(self.counts.values())
        if total != len(self.records):
            raise ValueError("manifest: summary counts disagree with record count")
        return True

    def summary_rows(self):
        rows = []
        for (s, split) in sorted(self.counts):
            n = self.counts[(s, split)]
            pos = self.positives[(s, split)]
            rows.append({"site": s, "split": split, "n": n, "pos": pos, "neg": n - pos})
        return rows


# ------------------------------------------------------------------ generator


def _grid(size):
    c = np.linspace(-1.0, 1.0, size)
    return np.meshgrid(c, c, indexing="ij")


def _soft_ellipse(u, v, cu, cv, ru, rv, edge=0.08):
    r = np.sqrt(((u - cu) / ru) ** 2 + ((v - cv) / rv) ** 2)
    return 1.0 / (1.0 + np.exp((r - 1.0) / edge))


# shared (site-independent) appearance model
ANATOMY = {"exposure_sigma": 0.05, "texture_amp": 0.025, "lung_depth": 0.22}
OPACITY = {"pos_amp": (0.2, 0.35), "neg_amp": (0.0, 0.08), "sigma": (0.3, 0.45)}


def _render_anatomy(rng, n, size):
    """Label-free background: body, two lung fields, exposure and texture."""
    u, v = _grid(size)  # u vertical, v horizontal
    out = np.empty((n, size, size))
    for i in range(n):
        exposure = rng.normal(0.0, ANATOMY["exposure_sigma"])
        body = 0.25 + 0.35 * _soft_ellipse(u, v, 0.05, 0.0, 1.05, 0.85, edge=0.1)
        jit = rng.normal(0.0, 0.04, size=4)
        lungs = _soft_ellipse(u, v, -0.05 + jit[0], -0.38 + jit[1], 0.62, 0.26) + _soft_ellipse(
            u, v, -0.05 + jit[2], 0.38 + jit[3], 0.62, 0.26
        )
        img = body - ANATOMY["lung_depth"] * lungs + exposure
        for _ in range(3):
            fu, fv = rng.uniform(0.5, 2.5, size=2)
            ph = rng.uniform(0, 2 * np.pi)
            img += ANATOMY["texture_amp"] * np.cos(np.pi * (fu * u + fv * v) + ph)
        out[i] = img
    return out


def _render_opacity(rng, y, size):
    """Soft bright blob inside a lung field; amplitude depends on the label."""
    u, v = _grid(size)
    n = len(y)
    out = np.zeros((n, size, size))
    for i in range(n):
        side = rng.choice((-1.0, 1.0))
        cu = rng.uniform(-0.45, 0.3)
        cv = side * 0.38 + rng.uniform(-0.12, 0.12)
        sigma = rng.uniform(*OPACITY["sigma"])
        amp = rng.uniform(*OPACITY["pos_amp"]) if y[i] == 1 else rng.uniform(*OPACITY["neg_amp"])
        out[i] = amp * np.exp(-((u - cu) ** 2 + (v - cv) ** 2) / (2 * sigma**2))
    return out


def _center_zoom(img, frac):
    """Crop ``frac`` of the side from the borders and resize back (bilinear)."""
    if frac <= 0:
        return img
    size = img.shape[-1]
    side = size * (1.0 - frac)
    origin = (size - side) / 2.0
    q = np.arange(size, dtype=np.float64)
    coords = origin + q * (side - 1.0) / (size - 1.0)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    return bilinear_sample(img, np.broadcast_to(yy, img.shape), np.broadcast_to(xx, img.shape))


def apply_site(spec, images, rng):
    sev = spec.severity
    out = images
    if spec.border_crop and sev:
        out = _center_zoom(out, spec.border_crop * sev)
    out = np.clip(out, 0.0, 1.0)
    gamma = 1.0 + (spec.gamma - 1.0) * sev
    if gamma != 1.0:
        out = out**gamma
    out = out + spec.intensity_offset * sev
    sigma = BASE_NOISE + spec.noise_sigma * sev
    out = out + rng.normal(0.0, sigma, size=out.shape)
    if spec.corner_tag and sev:
        k = max(2, out.shape[-1] // 8)
        out[:, 1 : 1 + k, 1 : 1 + k] = (1.0 - sev) * out[:, 1 : 1 + k, 1 : 1 + k] + sev * 0.95
    return np.clip(out, 0.0, 1.0)


BASE_NOISE = 0.01


def generate_site_dataset(spec, n, rng_seed, size=32, split="train"):
    """``n`` labelled images from site ``spec``; a pure function of its arguments."""
    if n <= 0:
        raise ValueError(f"generate_site_dataset: n must be > 0, got {n}")
    if not 0.0 <= spec.severity <= 1.0:
        raise ValueError(f"severity must lie in [0, 1], got {spec.severity}")
    rng = np.random.default_rng(rng_seed)
    y = (rng.random(n) < spec.effective_prevalence).astype(np.int64)
    base = _render_anatomy(rng, n, size) + _render_opacity(rng, y, size)
    images = apply_site(spec, base, rng)
    ids = np.array([f"{spec.label}/{split}/{i:05d}" for i in range(n)])
    return ImageSet(images, y, np.full(n, spec.site_id, dtype=np.int64), np.full(n, split), ids)


def generate_site_splits(spec, sizes, seed, size=32):
    """Train/val/test pools for one site from independent child streams of ``seed``."""
    streams = np.random.SeedSequence([seed, spec.site_id]).spawn(len(SPLITS))
    parts = []
    for split, ss in zip(SPLITS, streams):
        n = sizes[split]
        if n > 0:
            parts.append(generate_site_dataset(spec, n, ss, size=size, split=split))
    return ImageSet.concat(parts)


# --------------------------------------------------------------- augmentation


def bilinear_sample(images, yy, xx):
    """Sample [N, H, W] images at real coordinates; points outside the grid read 0."""
    n, h, w = images.shape
    inside = (yy >= 0) & (yy <= h - 1) & (xx >= 0) & (xx <= w - 1)
    yc = np.clip(yy, 0, h - 1)
    xc = np.clip(xx, 0, w - 1)
    y0 = np.minimum(np.floor(yc).astype(np.intp), h - 2)
    x0 = np.minimum(np.floor(xc).astype(np.intp), w - 2)
    fy = yc - y0
    fx = xc - x0
    b = np.arange(n)[:, None, None]
    v00 = images[b, y0, x0]
    v01 = images[b, y0, x0 + 1]
    v10 = images[b, y0 + 1, x0]
    v11 = images[b, y0 + 1, x0 + 1]
    out = (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11)
    return np.where(inside, out, 0.0)


@dataclass(frozen=True)
class AugmentConfig:
    crop_scale: tuple = (0.7, 1.0)
    max_rotation_deg: float = 10.0


def augment_params(rng, n, cfg=AugmentConfig()):
    """Draw (area scale, crop centre offsets in [0,1], rotation in degrees) per image."""
    scale = rng.uniform(cfg.crop_scale[0], cfg.crop_scale[1], size=n)
    pos = rng.random((n, 2))
    angle = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg, size=n)
    return scale, pos, angle


def apply_augment(images, scale, pos, angle):
    """Random resized crop (square) followed by a zero-padded rotation; never flips."""
    images = np.asarray(images, dtype=np.float64)
    n, size, _ = images.shape
    c = (size - 1) / 2.0
    q = np.arange(size, dtype=np.float64)
    du, dv = np.meshgrid(q - c, q - c, indexing="ij")
    theta = np.deg2rad(angle)[:, None, None]
    cos, sin = np.cos(theta), np.sin(theta)
    # inverse rotation of the output grid back into the crop frame
    qy = cos * du[None] - sin * dv[None] + c
    qx = sin * du[None] + cos * dv[None] + c
    side = size * np.sqrt(scale)[:, None, None]
    oy = pos[:, 0, None, None] * (size - side)
    ox = pos[:, 1, None, None] * (size - side)
    k = (side - 1.0) / (size - 1.0)
    yy = oy + qy * k
    xx = ox + qx * k
    outside = (qy < 0) | (qy > size - 1) | (qx < 0) | (qx > size - 1)
    out = bilinear_sample(images, yy, xx)
    out = np.where(outside, 0.0, out)
    return np.clip(out, 0.0, 1.0)


def augment(image, rng, cfg=AugmentConfig()):
    """One augmented view of a single image (a :class:`LabeledImage` or a 2-D array)."""
    pixels = image.pixels if isinstance(image, LabeledImage) else np.asarray(image)
    view = apply_augment(pixels[None], *augment_params(rng, 1, cfg))[0]
    if isinstance(image, LabeledImage):
        return LabeledImage(view, image.y, image.s, image.split, image.id)
    return view


def augment_batch(images, rng, cfg=AugmentConfig()):
    return apply_augment(images, *augment_params(rng, len(images), cfg))


def balanced_two_view_batches(pools, batch_size, rng, cfg=AugmentConfig()):
    """One epoch of site-balanced batches ``(x1, x2, s, ids)``.

    ``pools`` maps site id -> :class:`ImageSet`. Each batch holds
    ``batch_size / K`` images per site; the epoch length covers the largest
    pool once and smaller pools recycle with a fresh shuffle.
    """
    sites = sorted(pools)
    k = len(sites)
    if k == 0:
        raise ValueError("balanced_two_view_batches: no site pools")
    if batch_size % 2 or batch_size % k:
        raise ValueError(
            f"balanced_two_view_batches: batch size {batch_size} must be even and divisible by {k} sites"
        )
    per = batch_size // k
    steps = max(math.ceil(len(pools[s]) / per) for s in sites)
    orders = {s: rng.permutation(len(pools[s])) for s in sites}
    cursors = {s: 0 for s in sites}
    for _ in range(steps):
        idx_parts = []
        for s in sites:
            take = []
            while len(take) < per:
                if cursors[s] >= len(orders[s]):
                    orders[s] = rng.permutation(len(pools[s]))
                    cursors[s] = 0
                m = min(per - len(take), len(orders[s]) - cursors[s])
                take.extend(orders[s][cursors[s] : cursors[s] + m])
                cursors[s] += m
            idx_parts.append((s, np.asarray(take)))
        imgs = np.concatenate([pools[s].images[ix] for s, ix in idx_parts])
        labels = np.concatenate([np.full(len(ix), s) for s, ix in idx_parts])
        ids = np.concatenate([pools[s].ids[ix] for s, ix in idx_parts])
        x1 = augment_batch(imgs, rng, cfg)
        x2 = augment_batch(imgs, rng, cfg)
        yield x1[:, None], x2[:, None], labels, ids


# ------------------------------------------------------------------ PGM / CSV


class IngestError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        lines = "\n".join(f"  row {row}: {msg}" for row, msg in self.problems)
        super().__init__(f"{len(self.problems)} malformed manifest row(s):\n{lines}")


def _pgm_tokens(raw, count):
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    tokens, i, n = [], 0, len(raw)
    while len(tokens) < count:
        while i < n and raw[i : i + 1].isspace():
            i += 1
        if i < n and raw[i : i + 1] == b"#":
            while i < n and raw[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not raw[i : i + 1].isspace() and raw[i : i + 1] != b"#":
            i += 1
        if start == i:
            raise ValueError("truncated PGM header")
        tokens.append(raw[start:i])
    return tokens, i


def read_pgm(path):
    """8-bit binary PGM (P5, maxval 255) as a float array in [0, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] != b"P5":
        raise ValueError(f"unsupported magic {raw[:2]!r} (expected b'P5')")
    (w, h, maxval), end = _pgm_tokens(raw[2:], 3)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval} (expected 255)")
    start = 2 + end + 1  # single whitespace byte after maxval
    pixels = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=start) if len(raw) >= start + w * h else None
    if pixels is None:
        raise ValueError(f"truncated pixel data (need {w * h} bytes)")
    return pixels.reshape(h, w).astype(np.float64) / 255.0


def write_pgm(path, image):
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.rint(img * 255.0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def resize_bilinear(img, size):
    h, w = img.shape
    if (h, w) == (size, size):
        return img.copy()
    yy = np.linspace(0.0, h - 1.0, size)
    xx = np.linspace(0.0, w - 1.0, size)
    gy, gx = np.meshgrid(yy, xx, indexing="ij")
    return bilinear_sample(img[None], gy[None], gx[None])[0]


MANIFEST_HEADER = ["path", "y", "site", "split"]


def write_manifest(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for row in rows:
            writer.writerow(row)


def ingest_pgm_corpus(manifest_path, size=32):
    """Load every manifest row; raise :class:`IngestError` listing all bad rows."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    problems, images, ys, ss, splits, ids = [], [], [], [], [], []
    with open(manifest_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise IngestError([(1, f"header must be {','.join(MANIFEST_HEADER)}, got {header}")])
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                problems.append((lineno, f"expected 4 fields, got {len(row)}"))
                continue
            path, y, site, split = row
            try:
                y, site = int(y), int(site)
            except ValueError:
                problems.append((lineno, "y and site must be integers"))
                continue
            if y not in (0, 1):
                problems.append((lineno, f"y must be 0 or 1, got {y}"))
                continue
            if site < 0:
                problems.append((lineno, f"site must be >= 0, got {site}"))
                continue
            if split not in SPLITS:
                problems.append((lineno, f"split must be one of {SPLITS}, got {split!r}"))
                continue
            full = path if os.path.isabs(path) else os.path.join(base, path)
            if not os.path.exists(full):
                problems.append((lineno, f"missing file {path}"))
                continue
            try:
                img = read_pgm(full)
            except ValueError as exc:
                problems.append((lineno, f"{path}: {exc}"))
                continue
            images.append(resize_bilinear(img, size))
            ys.append(y)
            ss.append(site)
            splits.append(split)
            ids.append(path)
    if problems:
        raise IngestError(problems)
    if len(set(ids)) != len(ids):
        raise IngestError([(0, "duplicate paths: splits must be disjoint")])
    return ImageSet(
        np.array(images).reshape(-1, size, size),
        np.array(ys, dtype=np.int64),
        np.array(ss, dtype=np.int64),
        np.array(splits),
        np.array(ids),
    )


def export_pgm_corpus(data, out_dir):
    """Write an :class:`ImageSet` as PGM files plus ``manifest.csv``; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for i in range(len(data)):
        rel = str(data.ids[i]).replace("/", "_") + ".pgm"
        write_pgm(os.path.join(out_dir, rel), data.images[i])
        rows.append((rel, int(data.y[i]), int(data.s[i]), str(data.split[i])))
    path = os.path.join(out_dir, "manifest.csv")
    write_manifest(path, rows)
    return path
