"""Synthetic layered stereo scenes and the on-disk formats.

A scene is a stack of fronto-parallel rectangles. Each plane has one
disparity, one semantic class and a texture defined in plane coordinates, so
the right view is an exact shift of the left: ``right(x - d, y) == left(x, y)``
wherever the plane is visible in both views.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

IGNORE_LABEL = 255
TEXTURES = ("checker", "noise", "gradient")


@dataclass
class Plane:
    """Axis-aligned rectangle ``[x0, x1) x [y0, y1)`` in left-image pixels."""

    x0: int
    y0: int
    x1: int
    y1: int
    disparity: float
    label: int
    texture: str = "noise"
    color: tuple = (128.0, 128.0, 128.0)
    amplitude: float = 20.0
    scale: float = 8.0
    seed: int = 0


@dataclass
class SceneConfig:
    height: int = 64
    width: int = 128
    num_planes: int = 3
    disparity_range: tuple = (1.0, 8.0)
    textures: tuple = ("noise",)
    texture_scale: tuple = (4.0, 12.0)
    amplitude: tuple = (10.0, 30.0)
    disparity_step: float = 1.0
    num_classes: int = 4
    max_disp: int = 24
    seed: int = 0
    class_bands: bool = True
    planes: list | None = None

    def validate(self):
        lo, hi = self.disparity_range
        if self.height < 1 or self.width < 1:
            raise ValueError("scene extents must be >= 1")
        if not 0 <= lo <= hi:
            raise ValueError(f"bad disparity range {self.disparity_range}")
        if hi >= self.max_disp:
            raise ValueError(f"disparity range upper bound {hi} must stay below max_disp {self.max_disp}")
        if self.planes is None and not 1 <= self.num_planes <= self.num_classes:
            raise ValueError(f"num_planes {self.num_planes} must be in [1, num_classes={self.num_classes}]")
        if self.num_classes > 255:
            raise ValueError("at most 255 classes fit an 8-bit label map")
        if self.disparity_step not in (0.5, 1.0):
            raise ValueError("disparity_step must be 1.0 or 0.5")
        for t in self.textures:
            if t not in TEXTURES:
                raise ValueError(f"unknown texture {t!r}")


@dataclass
class StereoSample:
    left: np.ndarray                      # [3, H, W] float64, 0-255
    right: np.ndarray                     # [3, H, W]
    gt_disparity: np.ndarray | None = None  # [H, W]
    valid: np.ndarray | None = None       # [H, W] bool, gt defined
    left_labels: np.ndarray | None = None  # [H, W] int, IGNORE_LABEL where unknown
    noc_mask: np.ndarray | None = None    # [H, W] bool
    name: str = ""

    @property
    def shape(self) -> tuple[int, int]:
        return self.left.shape[1:]


# ---------------------------------------------------------------------------
# texture evaluation in plane coordinates (u along x, v along y)

def _lattice(seed: int, v: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Deterministic per-integer-site hash in [0, 1)."""
    key = (u.astype(np.int64) * 73856093) ^ (v.astype(np.int64) * 19349663) ^ (seed * 83492791)
    key = (key ^ (key >> 13)) * 1274126177
    key = key ^ (key >> 16)
    return (key & 0xFFFFFF).astype(np.float64) / float(1 << 24)


def _value_noise(seed: int, v: np.ndarray, u: np.ndarray, scale: float) -> np.ndarray:
    # smooth value noise on a lattice of spacing `scale`, in [-1, 1]
    fu, fv = u / scale, v / scale
    iu, iv = np.floor(fu), np.floor(fv)
    tu, tv = fu - iu, fv - iv
    tu = tu * tu * (3 - 2 * tu)
    tv = tv * tv * (3 - 2 * tv)
    a = _lattice(seed, iv, iu)
    b = _lattice(seed, iv, iu + 1)
    c = _lattice(seed, iv + 1, iu)
    d = _lattice(seed, iv + 1, iu + 1)
    top = a + (b - a) * tu
    bot = c + (d - c) * tu
    return 2.0 * (top + (bot - top) * tv) - 1.0


def texture_values(plane: Plane, v: np.ndarray, u: np.ndarray) -> np.ndarray:
    """RGB values ``[3, ...]`` of ``plane`` at plane coordinates (u, v).

    ``gradient`` is affine in u, so bilinear resampling along x reproduces it
    exactly at half-integer positions. The other textures are only ever
    evaluated at integer u.
    """
    a = plane.amplitude
    if plane.texture == "gradient":
        # ramp spans +-a across the plane, so values never hit the 0/255 clip
        slope = 2.0 * a / max(plane.x1 - plane.x0, 1)
        rows = _value_noise(plane.seed, v, np.zeros_like(u), plane.scale)
        base = slope * (u - 0.5 * (plane.x0 + plane.x1)) + 0.5 * a * rows
        mod = [base, 0.5 * base, -0.5 * base]
    elif plane.texture == "checker":
        s = max(plane.scale, 1.0)
        cell = (np.floor(u / s) + np.floor(v / s)) % 2
        base = a * (2 * cell - 1)
        mod = [base, base, base]
    else:
        mod = [a * _value_noise(plane.seed + 101 * k, v, u, plane.scale) for k in range(3)]
    return np.stack([plane.color[k] + mod[k] for k in range(3)])


# ---------------------------------------------------------------------------
# scene generation

def class_color(label: int) -> np.ndarray:
    """Base RGB colour of a semantic class; planes jitter around it."""
    return np.random.default_rng([7, label]).uniform(80, 175, size=3)


def _random_planes(cfg: SceneConfig, rng: np.random.Generator) -> list[Plane]:
    h, w, k = cfg.height, cfg.width, cfg.num_classes
    lo, hi = cfg.disparity_range
    step = cfg.disparity_step
    classes = np.sort(rng.choice(k, size=cfg.num_planes, replace=False))
    planes = []
    for i, cls in enumerate(classes):
        if cfg.class_bands:
            # each class owns a slice of the disparity range, so semantics carry depth
            band_lo = lo + (hi - lo) * cls / k
            band_hi = lo + (hi - lo) * (cls + 1) / k
        else:
            band_lo, band_hi = lo, hi
        grid = np.arange(math.ceil(band_lo / step), math.floor(band_hi / step) + 1) * step
        if grid.size == 0:
            grid = np.array([round(band_lo / step) * step])
        d = float(rng.choice(grid))
        if i == 0:
            # background extends past both borders so the right view is covered too
            x0, y0, x1, y1 = -w, 0, 2 * w, h
        else:
            pw = int(rng.integers(max(w // 6, 2), max(w // 2, 3)))
            ph = int(rng.integers(max(h // 5, 2), max(h * 2 // 3, 3)))
            x0 = int(rng.integers(0, max(w - pw, 1)))
            y0 = int(rng.integers(0, max(h - ph, 1)))
            x1, y1 = x0 + pw, y0 + ph
        tex = str(rng.choice(cfg.textures))
        if d != int(d):
            tex = "gradient"
        planes.append(Plane(
            x0, y0, x1, y1, d, int(cls), tex,
            color=tuple(float(c) for c in class_color(int(cls)) + rng.uniform(-12, 12, size=3)),
            amplitude=float(rng.uniform(*cfg.amplitude)),
            scale=float(rng.uniform(*cfg.texture_scale)),
            seed=int(rng.integers(0, 2**31 - 1)),
        ))
    return planes


def _visible(planes: Sequence[Plane], h: int, w: int, shift_sign: int, xs: np.ndarray) -> np.ndarray:
    """Index of the nearest plane covering each pixel, -1 where none.

    For the left view ``shift_sign=0``; for the right view pixel x' looks up
    plane coordinate ``x' + d``.
    """
    owner = np.full((h, w), -1, dtype=np.int64)
    best = np.full((h, w), -np.inf)
    ys = np.arange(h)[:, None]
    for i, p in enumerate(planes):
        u = xs + shift_sign * p.disparity
        inside = (u >= p.x0) & (u < p.x1) & (ys >= p.y0) & (ys < p.y1)
        take = inside & (p.disparity > best)
        owner[take] = i
        best[take] = p.disparity
    return owner


def render_planes(planes: Sequence[Plane], height: int, width: int, name: str = "") -> StereoSample:
    """Render both views, ground truth, labels and the non-occlusion mask."""
    h, w = height, width
    xs = np.broadcast_to(np.arange(w, dtype=np.float64)[None, :], (h, w))
    ys = np.broadcast_to(np.arange(h, dtype=np.float64)[:, None], (h, w))
    own_l = _visible(planes, h, w, 0, xs)
    own_r = _visible(planes, h, w, 1, xs)
    if (own_l < 0).any() or (own_r < 0).any():
        raise ValueError("planes do not cover the whole image; add a background plane")

    left = np.zeros((3, h, w))
    right = np.zeros((3, h, w))
    gt = np.zeros((h, w))
    labels = np.zeros((h, w), dtype=np.int64)
    for i, p in enumerate(planes):
        m = own_l == i
        if m.any():
            left[:, m] = texture_values(p, ys[m], xs[m])
            gt[m] = p.disparity
            labels[m] = p.label
        m = own_r == i
        if m.any():
            right[:, m] = texture_values(p, ys[m], xs[m] + p.disparity)

    # Left-right consistency: the warp taps of (x - d) must both land in the
    # right view on the same plane.
    src = xs - gt
    in_view = (src >= 0) & (src <= w - 1)
    x0 = np.clip(np.floor(src), 0, w - 1).astype(np.int64)
    x1 = np.clip(np.ceil(src), 0, w - 1).astype(np.int64)
    rows = np.arange(h)[:, None]
    noc = in_view & (own_r[rows, x0] == own_l) & (own_r[rows, x1] == own_l)
    return StereoSample(np.clip(left, 0, 255), np.clip(right, 0, 255), gt,
                        np.ones((h, w), dtype=bool), labels, noc, name)


def gen_scene(config: SceneConfig) -> StereoSample:
    """Deterministic synthetic stereo pair for ``config.seed``."""
    config.validate()
    if config.planes is not None:
        planes = list(config.planes)
        if len(planes) > config.num_classes:
            raise ValueError("more planes than classes")
    else:
        planes = _random_planes(config, np.random.default_rng(config.seed))
    return render_planes(planes, config.height, config.width, name=f"scene_{config.seed:06d}")


def gen_dataset(count: int, base: SceneConfig, seed: int = 0) -> list[StereoSample]:
    out = []
    for i in range(count):
        cfg = SceneConfig(**{**base.__dict__, "seed": seed * 100003 + i, "planes": None})
        s = gen_scene(cfg)
        s.name = f"scene_{i:04d}"
        out.append(s)
    return out


# ---------------------------------------------------------------------------
# KITTI 16-bit disparity PNG: value = round(d * 256), 0 = invalid

def write_kitti_disparity(path, disparity: np.ndarray, valid: np.ndarray | None = None) -> None:
    d = np.asarray(disparity, dtype=np.float64)
    if d.ndim != 2:
        raise ValueError("disparity map must be 2-D")
    if (d < 0).any() or (d >= 256).any():
        raise ValueError("KITTI PNG holds disparities in [0, 256)")
    # values below 1/512 round to 0 and read back as invalid, as in KITTI
    stored = np.rint(d * 256.0).astype(np.uint16)
    if valid is not None:
        stored = np.where(np.asarray(valid, bool), stored, 0).astype(np.uint16)
    Image.fromarray(stored).save(path, format="PNG")


def read_kitti_disparity(path) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(disparity, valid)``; invalid pixels read as 0."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("I;16", "I;16B", "I"):
                raise ValueError(f"{path}: expected a 16-bit single-channel PNG, got mode {im.mode}")
            raw = np.array(im)
    except (OSError, SyntaxError) as exc:
        raise ValueError(f"{path}: unreadable PNG ({exc})") from exc
    if raw.ndim != 2:
        raise ValueError(f"{path}: expected a single channel")
    raw = raw.astype(np.int64)
    valid = raw > 0
    return raw.astype(np.float64) / 256.0, valid


# ---------------------------------------------------------------------------
# PFM: "PF" (rgb) / "Pf" (gray), "W H", scale (negative = little-endian), rows bottom-up

def write_pfm(path, data: np.ndarray, scale: float = 1.0, little_endian: bool = True) -> None:
    a = np.asarray(data, dtype=np.float32)
    if a.ndim == 3 and a.shape[2] == 3:
        tag = b"PF"
    elif a.ndim == 2 or (a.ndim == 3 and a.shape[2] == 1):
        tag = b"Pf"
        a = a.reshape(a.shape[:2])
    else:
        raise ValueError(f"PFM holds HxW or HxWx3 maps, got {a.shape}")
    h, w = a.shape[:2]
    dt = "<f4" if little_endian else ">f4"
    s = -abs(scale) if little_endian else abs(scale)
    with open(path, "wb") as f:
        f.write(tag + b"\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(f"{s:g}\n".encode("ascii"))
        f.write(np.flipud(a).astype(dt).tobytes())


def read_pfm(path) -> tuple[np.ndarray, float]:
    """Returns ``(map, scale)`` with rows top-down; gray maps are HxW."""
    with open(path, "rb") as f:
        tag = f.readline().rstrip()
        if tag == b"PF":
            channels = 3
        elif tag == b"Pf":
            channels = 1
        else:
            raise ValueError(f"{path}: not a PFM file (header {tag!r})")
        dims = f.readline().split()
        if len(dims) != 2:
            raise ValueError(f"{path}: malformed PFM dimension line")
        w, h = int(dims[0]), int(dims[1])
        try:
            scale = float(f.readline().strip())
        except ValueError as exc:
            raise ValueError(f"{path}: malformed PFM scale line") from exc
        dt = "<f4" if scale < 0 else ">f4"
        count = w * h * channels
        buf = f.read(4 * count)
        if len(buf) != 4 * count:
            raise ValueError(f"{path}: truncated PFM payload")
    a = np.frombuffer(buf, dtype=dt).reshape((h, w, channels) if channels == 3 else (h, w))
    return np.flipud(a).astype(np.float32), abs(scale)


# ---------------------------------------------------------------------------
# 8-bit images and label maps, sample directories, manifests

def write_image(path, image: np.ndarray) -> None:
    """``[3, H, W]`` 0-255 array to an RGB PNG."""
    arr = np.clip(np.rint(np.asarray(image).transpose(1, 2, 0)), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64).transpose(2, 0, 1).copy()


def write_labels(path, labels: np.ndarray) -> None:
    Image.fromarray(np.asarray(labels).astype(np.uint8), mode="L").save(path, format="PNG")


def read_labels(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P"):
            raise ValueError(f"{path}: label maps are 8-bit single-channel PNGs")
        return np.asarray(im, dtype=np.int64).copy()


def write_sample(directory, sample: StereoSample) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_image(d / "left.png", sample.left)
    write_image(d / "right.png", sample.right)
    if sample.gt_disparity is not None:
        write_kitti_disparity(d / "disp.png", sample.gt_disparity, sample.valid)
    if sample.left_labels is not None:
        write_labels(d / "labels.png", sample.left_labels)
    if sample.noc_mask is not None:
        write_labels(d / "noc.png", sample.noc_mask.astype(np.uint8))
    return d


def read_sample(directory) -> StereoSample:
    d = Path(directory)
    s = StereoSample(read_image(d / "left.png"), read_image(d / "right.png"), name=d.name)
    if (d / "disp.png").exists():
        s.gt_disparity, s.valid = read_kitti_disparity(d / "disp.png")
    if (d / "labels.png").exists():
        s.left_labels = read_labels(d / "labels.png")
    if (d / "noc.png").exists():
        s.noc_mask = read_labels(d / "noc.png") > 0
    return s


def write_manifest(path, directories: Sequence) -> None:
    base = Path(path).parent
    lines = []
    for d in directories:
        p = Path(d)
        try:
            lines.append(str(p.relative_to(base)))
        except ValueError:
            lines.append(str(p))
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> list[Path]:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.txt"
    base = p.parent
    out = []
    for line in p.read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            q = Path(line)
            out.append(q if q.is_absolute() else base / q)
    return out


def load_dataset(path) -> list[StereoSample]:
    return [read_sample(d) for d in read_manifest(path)]


# ---------------------------------------------------------------------------
# batching with random resize + crop

# Augmentation resizes use pixel-centre sampling, src = (i + 0.5) * n_in / n_out - 0.5,
# so lengths scale by exactly n_out / n_in.

def _center_matrix(n_out: int, n_in: int) -> np.ndarray:
    pos = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0, n_in - 1)
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    i0 = np.minimum(np.floor(pos).astype(np.int64), n_in - 2)
    f = pos - i0
    rows = np.arange(n_out)
    m[rows, i0] = 1.0 - f
    m[rows, i0 + 1] += f
    return m


def _center_nearest(n_out: int, n_in: int) -> np.ndarray:
    return np.minimum(((np.arange(n_out) + 0.5) * (n_in / n_out)).astype(np.int64), n_in - 1)


def _resize_image(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    ry = _center_matrix(out_h, img.shape[-2])
    rx = _center_matrix(out_w, img.shape[-1])
    return np.einsum("oh,...hw,pw->...op", ry, img, rx, optimize=True)


def _resize_nearest(m: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    return m[_center_nearest(out_h, m.shape[0])[:, None], _center_nearest(out_w, m.shape[1])[None, :]]


def scale_sample(s: StereoSample, factor: float) -> StereoSample:
    """Resize both views by ``factor``; disparities are multiplied by the width ratio."""
    h, w = s.shape
    nh, nw = max(int(round(h * factor)), 1), max(int(round(w * factor)), 1)
    if (nh, nw) == (h, w):
        return s
    sx = nw / w
    out = StereoSample(_resize_image(s.left, nh, nw), _resize_image(s.right, nh, nw), name=s.name)
    if s.gt_disparity is not None:
        # nearest keeps plane boundaries sharp; values scale with the x-axis
        out.gt_disparity = _resize_nearest(s.gt_disparity, nh, nw) * sx
        out.valid = _resize_nearest(s.valid, nh, nw) if s.valid is not None else None
    if s.left_labels is not None:
        out.left_labels = _resize_nearest(s.left_labels, nh, nw)
    if s.noc_mask is not None:
        out.noc_mask = _resize_nearest(s.noc_mask, nh, nw)
    return out


def crop_sample(s: StereoSample, y: int, x: int, ch: int, cw: int) -> StereoSample:
    def c2(a):
        return None if a is None else a[y : y + ch, x : x + cw]

    return StereoSample(s.left[:, y : y + ch, x : x + cw], s.right[:, y : y + ch, x : x + cw],
                        c2(s.gt_disparity), c2(s.valid), c2(s.left_labels), c2(s.noc_mask), s.name)


@dataclass
class Batch:
    left: np.ndarray
    right: np.ndarray
    gt: np.ndarray | None
    valid: np.ndarray | None
    labels: np.ndarray | None
    noc: np.ndarray | None
    names: list = field(default_factory=list)


def collate(samples: Sequence[StereoSample]) -> Batch:
    def stack(attr, dtype=None):
        vals = [getattr(s, attr) for s in samples]
        if any(v is None for v in vals):
            return None
        a = np.stack(vals)
        return a.astype(dtype) if dtype is not None else a

    gt = stack("gt_disparity", np.float64)
    valid = stack("valid", bool)
    noc = stack("noc_mask", bool)
    return Batch(stack("left", np.float64), stack("right", np.float64),
                 None if gt is None else gt[:, None],
                 None if valid is None else valid[:, None],
                 stack("left_labels", np.int64),
                 None if noc is None else noc[:, None],
                 [s.name for s in samples])


def batch_iterator(samples: Sequence[StereoSample], batch_size: int, crop: tuple[int, int],
                   resize_range: tuple[float, float] = (1.0, 1.0), seed: int = 0,
                   start_step: int = 0) -> Iterator[Batch]:
    """Endless stream of augmented batches.

    Batch ``k`` depends only on ``(seed, k)``, so a stream restarted at
    ``start_step`` continues exactly where an earlier one stopped.
    """
    if not samples:
        raise ValueError("batch_iterator needs at least one sample")
    ch, cw = crop
    lo, hi = resize_range
    step = start_step
    while True:
        rng = np.random.default_rng([seed, step])
        idx = rng.integers(0, len(samples), size=batch_size)
        batch = []
        for i in idx:
            s = samples[int(i)]
            factor = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
            s = scale_sample(s, factor)
            h, w = s.shape
            if ch > h or cw > w:
                raise ValueError(f"crop {crop} larger than resized sample {h}x{w} (factor {factor:.3f})")
            y = int(rng.integers(0, h - ch + 1))
            x = int(rng.integers(0, w - cw + 1))
            batch.append(crop_sample(s, y, x, ch, cw))
        yield collate(batch)
        step += 1

