"""Synthetic person-image benchmark with a black-clothing cohort.

Identities are procedural figures: head (hair, skin, optional
glasses), torso, trousers on a cluttered background.  A configured
fraction of identities wears black: their torso and trousers are
near-black with only sub-threshold texture, so clothing color carries
no identity signal inside that cohort and the head-shoulder region has
to do the work.  Camera id sets an illumination scale, and body
geometry jitters a few percent per sample.

Images are written as binary PPM; the manifest is a TSV with one row
per sample.  Everything derives from a single integer seed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

BLACK_LUMA_MAX = 0.15
_LUMA = np.array([0.299, 0.587, 0.114])

CAMERA_BG = np.array([
    [0.52, 0.50, 0.47],
    [0.45, 0.49, 0.54],
    [0.55, 0.52, 0.44],
    [0.47, 0.53, 0.49],
    [0.50, 0.46, 0.52],
    [0.42, 0.45, 0.47],
])


@dataclass(frozen=True)
class GenConfig:
    num_identities: int = 120
    num_black: int = 48
    samples_per_id: int = 10
    num_cameras: int = 6
    train_frac: float = 0.6
    queries_per_id: int = 2
    image_hw: tuple = (96, 32)
    jitter: float = 0.05
    min_attr_sep: float = 0.25

    def validate(self):
        if self.num_black > self.num_identities:
            raise ValueError(
                f"dataset config: {self.num_black} black identities exceed the total {self.num_identities}"
            )
        if self.num_cameras < 2 or self.num_cameras > len(CAMERA_BG):
            raise ValueError(f"dataset config: camera count must be 2..{len(CAMERA_BG)}")
        if self.samples_per_id < self.num_cameras:
            raise ValueError(
                "dataset config: need samples_per_id >= num_cameras so every identity "
                "appears under every camera"
            )
        if self.queries_per_id < 1 or self.queries_per_id >= self.samples_per_id:
            raise ValueError(
                "dataset config: queries_per_id must leave at least one gallery sample per identity"
            )
        n_train = round(self.num_identities * self.train_frac)
        if n_train < 2 or self.num_identities - n_train < 2:
            raise ValueError(
                f"dataset config: split fraction {self.train_frac} leaves too few identities "
                "on one side"
            )


@dataclass(frozen=True)
class IdentitySpec:
    hair_color: tuple
    skin_tone: tuple
    glasses: bool
    shoulder_width: float
    torso_color: tuple
    trouser_color: tuple

    @property
    def black(self):
        return luma(self.torso_color) < BLACK_LUMA_MAX


@dataclass
class PersonSample:
    image: np.ndarray  # [3, H, W] float in [0, 1]
    identity: int
    camera: int
    black: bool
    box: np.ndarray    # normalized (left, top, right, bottom)
    split: str = ""


@dataclass(frozen=True)
class SampleRecord:
    path: str
    identity: int
    camera: int
    black: bool
    box: tuple
    split: str


def luma(rgb):
    return float(np.dot(_LUMA, np.asarray(rgb, dtype=np.float64)))


# -- identity sampling -------------------------------------------------------


def _sample_skin(rng):
    b = rng.uniform(0.45, 0.95)
    return (b, b * rng.uniform(0.70, 0.95), b * rng.uniform(0.50, 0.80))


def _head_attr_separation(a, b):
    """Largest single-attribute difference on the head-shoulder attributes."""
    sep = max(abs(x - y) for x, y in zip(a.hair_color, b.hair_color))
    sep = max(sep, max(abs(x - y) for x, y in zip(a.skin_tone, b.skin_tone)))
    sep = max(sep, float(a.glasses != b.glasses))
    sep = max(sep, abs(a.shoulder_width - b.shoulder_width) / 0.27)
    return sep


def _any_attr_separation(a, b):
    sep = _head_attr_separation(a, b)
    sep = max(sep, max(abs(x - y) for x, y in zip(a.torso_color, b.torso_color)))
    sep = max(sep, max(abs(x - y) for x, y in zip(a.trouser_color, b.trouser_color)))
    return sep


def sample_identity(rng, black, existing=(), min_sep=0.25, max_tries=500):
    """Draw an identity spec separated from every existing one.

    Black identities must differ from other black identities in a
    head-shoulder attribute by at least ``min_sep``; all pairs must
    differ somewhere by at least ``min_sep / 2``.
    """
    for _ in range(max_tries):
        if black:
            torso = tuple(rng.uniform(0.0, 0.08, 3))
            trousers = tuple(rng.uniform(0.0, 0.08, 3))
        else:
            while True:
                torso = tuple(rng.uniform(0.15, 1.0, 3))
                if luma(torso) >= 0.25:
                    break
            trousers = tuple(rng.uniform(0.10, 0.95, 3))
        spec = IdentitySpec(
            hair_color=tuple(rng.uniform(0.0, 1.0, 3)),
            skin_tone=_sample_skin(rng),
            glasses=bool(rng.random() < 0.5),
            shoulder_width=float(rng.uniform(0.55, 0.82)),
            torso_color=torso,
            trouser_color=trousers,
        )
        ok = True
        for other in existing:
            if _any_attr_separation(spec, other) < min_sep / 2:
                ok = False
                break
            if black and other.black and _head_attr_separation(spec, other) < min_sep:
                ok = False
                break
        if ok:
            return spec
    raise RuntimeError(f"identity sampling failed to separate after {max_tries} tries")


# -- rendering ---------------------------------------------------------------


def _paint(img, mask, color, rng, noise):
    n = int(mask.sum())
    if n == 0:
        return
    block = np.asarray(color, dtype=np.float64)[:, None] + rng.uniform(-noise, noise, (3, n))
    img[:, mask] = block


def render_sample(spec, identity, camera, seed, image_hw=(96, 32), jitter=0.05):
    """Render one person image deterministically from (spec, camera, seed)."""
    rng = np.random.default_rng(np.random.SeedSequence([23, int(seed)]))
    h, w = image_hw
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    Y, X = np.meshgrid(ys, xs, indexing="ij")
    img = np.empty((3, h, w), dtype=np.float64)

    # background: camera tint, clutter blocks, pixel noise
    img[:] = CAMERA_BG[camera - 1][:, None, None]
    for _ in range(int(rng.integers(2, 5))):
        x0, y0 = rng.uniform(0.0, 0.8), rng.uniform(0.0, 0.8)
        bw, bh = rng.uniform(0.15, 0.5), rng.uniform(0.1, 0.35)
        block = (X >= x0) & (X < x0 + bw) & (Y >= y0) & (Y < y0 + bh)
        color = 0.5 * rng.uniform(0.1, 0.9, 3) + 0.5 * CAMERA_BG[camera - 1]
        img[:, block] = color[:, None]
    img += rng.uniform(-0.05, 0.05, img.shape)

    j = lambda: rng.uniform(-jitter, jitter)
    sz = lambda: 1.0 + rng.uniform(-jitter, jitter)

    cx = 0.5 + j()
    head_cy = 0.155 + j() * 0.6
    head_rx = 0.16 * sz()
    head_ry = 0.085 * sz()
    shoulder_top = 0.30 + j() * 0.6
    hip = 0.62 + j() * 0.6
    torso_hw = 0.5 * spec.shoulder_width * sz()

    # trousers: two legs
    leg_w = 0.13 * sz()
    gap_w = 0.055 * sz()
    for sgn in (-1.0, 1.0):
        inner = cx + sgn * gap_w / 2
        outer = cx + sgn * (gap_w / 2 + leg_w)
        lo, hi = min(inner, outer), max(inner, outer)
        legs = (X >= lo) & (X < hi) & (Y >= hip) & (Y < 0.97)
        _paint(img, legs, spec.trouser_color, rng, 0.008 if spec.black else 0.03)

    # torso
    torso = (np.abs(X - cx) <= torso_hw) & (Y >= shoulder_top) & (Y < hip)
    _paint(img, torso, spec.torso_color, rng, 0.008 if spec.black else 0.03)

    # neck
    head_bottom = head_cy + head_ry
    neck = (np.abs(X - cx) <= 0.055) & (Y >= head_bottom - 0.01) & (Y < shoulder_top + 0.01)
    _paint(img, neck, spec.skin_tone, rng, 0.01)

    # head: skin ellipse with a hair cap, optional glasses band
    head = ((X - cx) / head_rx) ** 2 + ((Y - head_cy) / head_ry) ** 2 <= 1.0
    _paint(img, head, spec.skin_tone, rng, 0.01)
    hairline = head_cy - 0.10 * head_ry
    _paint(img, head & (Y <= hairline), spec.hair_color, rng, 0.02)
    if spec.glasses:
        eye_y = head_cy + 0.25 * head_ry
        band = head & (np.abs(Y - eye_y) <= 0.012) & (np.abs(X - cx) <= 0.8 * head_rx)
        _paint(img, band, (0.05, 0.05, 0.05), rng, 0.005)

    # per-camera illumination
    base = np.linspace(0.63, 1.07, len(CAMERA_BG))[camera - 1]
    illum = float(np.clip(base * (1.0 + rng.uniform(-0.04, 0.04)), 0.6, 1.1))
    img *= illum
    np.clip(img, 0.0, 1.0, out=img)

    box = np.array([
        cx - torso_hw - 0.02,
        (head_cy - head_ry) - 0.02,
        cx + torso_hw + 0.02,
        shoulder_top + 0.12,
    ])
    np.clip(box, 0.005, 0.995, out=box)

    return PersonSample(
        image=img.astype(np.float32),
        identity=identity,
        camera=camera,
        black=spec.black,
        box=box,
    )


# -- PPM files ---------------------------------------------------------------


def write_ppm(path, image):
    """Write a [3, H, W] float image in [0, 1] as binary PPM (P6)."""
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    c, h, w = arr.shape
    if c != 3:
        raise ValueError(f"write_ppm: expected 3 channels, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.transpose(1, 2, 0).tobytes())


def read_ppm(path):
    """Read a binary PPM into a [3, H, W] float array in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P6"):
        raise ValueError(f"read_ppm: {path} is not a binary PPM")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    raw = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return raw.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / float(maxval)


# -- dataset generation ------------------------------------------------------


@dataclass
class DatasetManifest:
    root: str
    config: GenConfig
    records: list

    def by_split(self, split):
        return [r for r in self.records if r.split == split]

    def train_records(self):
        return self.by_split("train")

    def validate(self):
        for r in self.records:
            full = os.path.join(self.root, r.path)
            if not os.path.isfile(full):
                raise ValueError(f"manifest: missing image file {r.path}")
            left, top, right, bottom = r.box
            if not (0 <= left <= right <= 1 and 0 <= top <= bottom <= 1):
                raise ValueError(f"manifest: malformed box {r.box} for {r.path}")
        query_ids = {r.identity for r in self.by_split("query")}
        gallery = self.by_split("gallery")
        gallery_ids = {r.identity for r in gallery}
        if not query_ids <= gallery_ids:
            raise ValueError("manifest: query identity missing from the gallery")
        for q in self.by_split("query"):
            if not any(g.identity == q.identity and g.camera != q.camera for g in gallery):
                raise ValueError(
                    f"manifest: query {q.path} has no cross-camera gallery match"
                )


MANIFEST_NAME = "manifest.tsv"
_MANIFEST_HEADER = "path\tidentity\tcamera\tblack\tleft\ttop\tright\tbottom\tsplit"


def generate_dataset(cfg: GenConfig, seed, out_dir):
    """Render the full benchmark under ``out_dir`` and return its manifest."""
    cfg.validate()
    ss = np.random.SeedSequence([51, int(seed)])
    rng_ids, rng_assign, rng_render = (np.random.default_rng(c) for c in ss.spawn(3))

    specs = []
    for i in range(cfg.num_identities):
        specs.append(sample_identity(rng_ids, black=i < cfg.num_black,
                                     existing=specs, min_sep=cfg.min_attr_sep))

    n_train_black = round(cfg.num_black * cfg.train_frac)
    n_nonblack = cfg.num_identities - cfg.num_black
    n_train_nonblack = round(n_nonblack * cfg.train_frac)
    train_ids = set(range(n_train_black)) | set(
        range(cfg.num_black, cfg.num_black + n_train_nonblack)
    )

    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    sample_seeds = rng_render.integers(0, 2 ** 63 - 1, size=cfg.num_identities * cfg.samples_per_id)

    records = []
    k = 0
    for ident, spec in enumerate(specs):
        cams = list(rng_assign.permutation(cfg.num_cameras) + 1)
        while len(cams) < cfg.samples_per_id:
            cams.append(int(rng_assign.integers(1, cfg.num_cameras + 1)))
        if ident in train_ids:
            splits = ["train"] * cfg.samples_per_id
        else:
            q = set(rng_assign.choice(cfg.samples_per_id, size=cfg.queries_per_id, replace=False))
            splits = ["query" if s in q else "gallery" for s in range(cfg.samples_per_id)]
        for s in range(cfg.samples_per_id):
            sample = render_sample(spec, ident, cams[s], sample_seeds[k],
                                   image_hw=cfg.image_hw, jitter=cfg.jitter)
            k += 1
            rel = f"images/{ident:04d}_c{cams[s]}_s{s:02d}.ppm"
            write_ppm(os.path.join(out_dir, rel), sample.image)
            records.append(SampleRecord(
                path=rel, identity=ident, camera=cams[s], black=sample.black,
                box=tuple(float(v) for v in sample.box), split=splits[s],
            ))

    records.sort(key=lambda r: r.path)
    manifest = DatasetManifest(root=out_dir, config=cfg, records=records)
    write_manifest(manifest)
    return manifest


def write_manifest(manifest):
    lines = [_MANIFEST_HEADER]
    for r in manifest.records:
        box = "\t".join(f"{v:.6f}" for v in r.box)
        lines.append(f"{r.path}\t{r.identity}\t{r.camera}\t{int(r.black)}\t{box}\t{r.split}")
    with open(os.path.join(manifest.root, MANIFEST_NAME), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_manifest(root, config=None):
    path = os.path.join(root, MANIFEST_NAME)
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or lines[0] != _MANIFEST_HEADER:
        raise ValueError(f"manifest: unexpected header in {path}")
    records = []
    for ln in lines[1:]:
        parts = ln.split("\t")
        if len(parts) != 9:
            raise ValueError(f"manifest: malformed row {ln!r}")
        box = tuple(float(v) for v in parts[4:8])
        left, top, right, bottom = box
        if left > right or top > bottom:
            raise ValueError(f"manifest: malformed box in row for {parts[0]}")
        records.append(SampleRecord(
            path=parts[0], identity=int(parts[1]), camera=int(parts[2]),
            black=bool(int(parts[3])), box=box, split=parts[8],
        ))
    return DatasetManifest(root=root, config=config or GenConfig(), records=records)


# -- batching and augmentation ----------------------------------------------


def pk_sample(records, p, k, rng):
    """One PK batch: p identities, k sample indices each.

    Returns indices into ``records``.  Identities are drawn without
    replacement among those with at least k samples; samples without
    replacement within an identity.
    """
    by_id = {}
    for i, r in enumerate(records):
        by_id.setdefault(r.identity, []).append(i)
    eligible = [ident for ident, idxs in by_id.items() if len(idxs) >= k]
    if len(eligible) < p:
        raise ValueError(
            f"pk_sample: only {len(eligible)} identities have >= {k} samples, need {p}"
        )
    eligible.sort()
    chosen = rng.choice(len(eligible), size=p, replace=False)
    out = []
    for ci in chosen:
        idxs = by_id[eligible[ci]]
        pick = rng.choice(len(idxs), size=k, replace=False)
        out.extend(idxs[i] for i in pick)
    return out


class PKEpochIterator:
    """Yields PK batches covering each identity's samples without
    replacement within an epoch where possible; identities with fewer
    than k remaining samples in a pass are topped up by resampling."""

    def __init__(self, records, p, k, rng):
        self.p = p
        self.k = k
        self.rng = rng
        self.by_id = {}
        for i, r in enumerate(records):
            self.by_id.setdefault(r.identity, []).append(i)

    def __iter__(self):
        rng = self.rng
        units = []
        for ident in sorted(self.by_id):
            idxs = self.by_id[ident]
            pool = [idxs[i] for i in rng.permutation(len(idxs))]
            while len(pool) >= self.k:
                units.append(pool[: self.k])
                pool = pool[self.k :]
            if pool:
                need = self.k - len(pool)
                extra = [idxs[i] for i in rng.choice(len(idxs), size=need, replace=len(idxs) < need)]
                units.append(pool + extra)
        order = rng.permutation(len(units))
        batch = []
        for ui in order:
            batch.append(units[ui])
            if len(batch) == self.p:
                yield [i for unit in batch for i in unit]
                batch = []


def flip_sample(sample):
    """Mirror the image horizontally and the box with it."""
    left, top, right, bottom = sample.box
    return replace_sample(sample,
                          image=np.ascontiguousarray(sample.image[:, :, ::-1]),
                          box=np.array([1.0 - right, top, 1.0 - left, bottom]))


def erase_sample(sample, rng, max_tries=100):
    """Random erasing: fill a random rectangle with uniform noise."""
    img = sample.image
    _, h, w = img.shape
    for _ in range(max_tries):
        area = rng.uniform(0.02, 0.2) * h * w
        aspect = rng.uniform(0.3, 3.3)
        eh = int(round(np.sqrt(area * aspect)))
        ew = int(round(np.sqrt(area / aspect)))
        if eh < 1 or ew < 1 or eh >= h or ew >= w:
            continue
        y0 = int(rng.integers(0, h - eh + 1))
        x0 = int(rng.integers(0, w - ew + 1))
        out = img.copy()
        out[:, y0 : y0 + eh, x0 : x0 + ew] = rng.uniform(0.0, 1.0, (3, eh, ew)).astype(img.dtype)
        return replace_sample(sample, image=out)
    return sample


def augment(sample, rng):
    """Training-time augmentation: 0.5 flip, then 0.5 random erasing."""
    if sample.split and sample.split != "train":
        raise ValueError(f"augment: refusing to augment a {sample.split!r} sample")
    if rng.random() < 0.5:
        sample = flip_sample(sample)
    if rng.random() < 0.5:
        sample = erase_sample(sample, rng)
    return sample


def replace_sample(sample, **kw):
    out = PersonSample(image=sample.image, identity=sample.identity, camera=sample.camera,
                       black=sample.black, box=sample.box, split=sample.split)
    for key, value in kw.items():
        setattr(out, key, value)
    return out


# -- geometry and premise checks --------------------------------------------


def box_iou(a, b):
    """Intersection over union of two (left, top, right, bottom) boxes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


TORSO_STAT_REGION = (0.34, 0.55, 0.32, 0.68)  # (top, bottom, left, right), normalized
HEAD_STAT_REGION = (0.06, 0.40, 0.18, 0.82)


def _region_slice(image, region):
    _, h, w = image.shape
    top, bottom, left, right = region
    return image[:, int(top * h) : int(bottom * h), int(left * w) : int(right * w)]


def black_torso_spread(images_by_id, region=TORSO_STAT_REGION):
    """Across-identity variance of mean torso color for the black cohort.

    images_by_id: {identity: [image, ...]}.  Returns the mean per-channel
    variance; small values mean torso appearance cannot separate ids.
    """
    means = []
    for ident in sorted(images_by_id):
        patches = [_region_slice(img, region).reshape(3, -1).mean(axis=1)
                   for img in images_by_id[ident]]
        means.append(np.mean(patches, axis=0))
    return float(np.var(np.stack(means), axis=0).mean())


def min_head_distance(images_by_id, region=HEAD_STAT_REGION, grid=(8, 8)):
    """Smallest pairwise head-region distance between identities.

    Head regions are pooled to a small grid and averaged per identity;
    the distance is per-cell RMS between those averages.
    """
    pooled = []
    for ident in sorted(images_by_id):
        per = []
        for img in images_by_id[ident]:
            patch = _region_slice(img, region)
            per.append(_pool_grid(patch, grid))
        pooled.append(np.mean(per, axis=0))
    worst = float("inf")
    for i in range(len(pooled)):
        for jj in range(i + 1, len(pooled)):
            d = float(np.sqrt(np.mean((pooled[i] - pooled[jj]) ** 2)))
            worst = min(worst, d)
    return worst


def _pool_grid(patch, grid):
    c, h, w = patch.shape
    gh, gw = grid
    ys = np.linspace(0, h, gh + 1).astype(int)
    xs = np.linspace(0, w, gw + 1).astype(int)
    out = np.zeros((c, gh, gw))
    for i in range(gh):
        for jj in range(gw):
            cell = patch[:, ys[i] : max(ys[i + 1], ys[i] + 1), xs[jj] : max(xs[jj + 1], xs[jj] + 1)]
            out[:, i, jj] = cell.reshape(c, -1).mean(axis=1)
    return out
