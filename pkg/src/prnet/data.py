"""Dataset plumbing: polygon-annotation parsing, rasterization, resizing,
splitting, synthetic data generation, and on-disk dataset layout.

On-disk layout written by :func:`save_dataset` (and read back by
:func:`load_dataset`):

    <root>/images/<source-id>.png   8-bit RGB
    <root>/masks/<source-id>.png    8-bit single channel, raw class indices
    <root>/manifest.tsv             source_id, image, mask, split (tab-separated)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image


class DatasetError(Exception):
    """Raised for malformed annotation documents, bad labels, or broken
    dataset layouts. The CLI maps this to its data-error exit code."""


DEFAULT_CLASS_NAMES = (
    "background",
    "Tooth",
    "Bone",
    "Pulp",
    "Root Canal Filling",
    "Denture Crown",
    "Dental Fillings",
    "Implant",
    "Orthodontic Devices",
    "Apical Periodontitis",
)

SMALL_TARGET_CLASSES = (3, 8, 9)


class LabelMap:
    """Ordered class-name -> index table; index 0 is the background."""

    def __init__(self, names):
        names = list(names)
        if not names:
            raise ValueError("label map needs at least one class name")
        if len(set(names)) != len(names):
            raise ValueError("label map names must be unique")
        self.names = names
        self._index = {name: i for i, name in enumerate(names)}

    @classmethod
    def default(cls) -> "LabelMap":
        return cls(DEFAULT_CLASS_NAMES)

    @classmethod
    def from_file(cls, path) -> "LabelMap":
        """One class name per line, ordered by index; '#' starts a comment.
        The first line names the background class."""
        names = []
        for raw in Path(path).read_text(encoding="utf-8").splitlines():
            line = raw.split("#", 1)[0].strip()
            if line:
                names.append(line)
        if not names:
            raise DatasetError(f"label map file {path} contains no class names")
        return cls(names)

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def index_of(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise DatasetError(f"unknown label {name!r}; known: {self.names}") from None

    def name_of(self, index: int) -> str:
        return self.names[index]

    @property
    def foreground_names(self) -> list[str]:
        return self.names[1:]


@dataclass
class SegmentationSample:
    """image: float (3, H, W) in [0, 1]; mask: integer (H, W) class indices."""

    image: np.ndarray
    mask: np.ndarray
    source_id: str
    split: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"image must be (3, H, W), got {self.image.shape}")
        if self.mask.shape != self.image.shape[1:]:
            raise ValueError(
                f"mask extent {self.mask.shape} does not match image {self.image.shape[1:]}"
            )


# ---------------------------------------------------------------------------
# annotation parsing and rasterization
# ---------------------------------------------------------------------------


def parse_annotation_file(path) -> tuple[list[tuple[str, list[tuple[float, float]]]], tuple[int, int]]:
    """Read one per-image polygon annotation document (the common JSON schema
    with a top-level "shapes" array). Returns ([(label, [(x, y), ...]), ...],
    (height, width)). Non-polygon shape types are rejected."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DatasetError(f"cannot parse annotation file {path}: {e}") from e
    if not isinstance(doc, dict) or not isinstance(doc.get("shapes"), list):
        raise DatasetError(f"{path}: expected an object with a 'shapes' array")
    try:
        h, w = int(doc["imageHeight"]), int(doc["imageWidth"])
    except (KeyError, TypeError, ValueError):
        raise DatasetError(f"{path}: missing or invalid imageHeight/imageWidth") from None
    shapes = []
    for i, shape in enumerate(doc["shapes"]):
        if not isinstance(shape, dict):
            raise DatasetError(f"{path}: shape #{i} is not an object")
        stype = shape.get("shape_type", "polygon")
        if stype != "polygon":
            raise DatasetError(f"{path}: shape #{i} has unsupported shape_type {stype!r}")
        label = shape.get("label")
        points = shape.get("points")
        if not isinstance(label, str) or not isinstance(points, list):
            raise DatasetError(f"{path}: shape #{i} needs a 'label' string and 'points' list")
        poly = []
        for pt in points:
            try:
                x, y = float(pt[0]), float(pt[1])
            except (TypeError, ValueError, IndexError):
                raise DatasetError(f"{path}: shape #{i} has a malformed point {pt!r}") from None
            poly.append((x, y))
        shapes.append((label, poly))
    return shapes, (h, w)


def _fill_polygon(poly: np.ndarray, h: int, w: int) -> np.ndarray:
    """Even-odd membership of every pixel center (col + 0.5, row + 0.5)
    inside the polygon, via crossing counts along a +x ray."""
    xs = np.arange(w) + 0.5
    ys = np.arange(h) + 0.5
    inside = np.zeros((h, w), dtype=bool)
    v = poly.shape[0]
    for i in range(v):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % v]
        if y1 == y2:
            continue
        straddles = (y1 <= ys) != (y2 <= ys)
        xint = x1 + (ys - y1) * (x2 - x1) / (y2 - y1)
        inside ^= straddles[:, None] & (xs[None, :] < xint[:, None])
    return inside


def rasterize(
    shapes,
    label_map: LabelMap,
    height: int,
    width: int,
    strict_labels: bool = True,
) -> tuple[np.ndarray, list[str]]:
    """Burn polygons into an index mask. Later shapes overwrite earlier ones.
    Degenerate polygons (< 3 vertices) and, with ``strict_labels=False``,
    unknown labels are skipped; each skip is returned as a warning string."""
    mask = np.zeros((height, width), dtype=np.uint8)
    warnings: list[str] = []
    for i, (label, points) in enumerate(shapes):
        if label not in label_map:
            if strict_labels:
                raise DatasetError(f"shape #{i}: unknown label {label!r}; known: {label_map.names}")
            warnings.append(f"shape #{i}: skipped unknown label {label!r}")
            continue
        if len(points) < 3:
            warnings.append(f"shape #{i} ({label}): skipped degenerate polygon with {len(points)} vertices")
            continue
        poly = np.asarray(points, dtype=np.float64)
        poly[:, 0] = poly[:, 0].clip(0, width)
        poly[:, 1] = poly[:, 1].clip(0, height)
        mask[_fill_polygon(poly, height, width)] = label_map.index_of(label)
    return mask, warnings


# ---------------------------------------------------------------------------
# resizing
# ---------------------------------------------------------------------------


def _bilinear_chw(img: np.ndarray, th: int, tw: int) -> np.ndarray:
    c, h, w = img.shape
    if (h, w) == (th, tw):
        return img.copy()
    ys = np.clip((np.arange(th) + 0.5) * (h / th) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(tw) + 0.5) * (w / tw) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0).astype(img.dtype)[None, :, None]
    fx = (xs - x0).astype(img.dtype)[None, None, :]
    tl = img[:, y0[:, None], x0[None, :]]
    tr = img[:, y0[:, None], x1[None, :]]
    bl = img[:, y1[:, None], x0[None, :]]
    br = img[:, y1[:, None], x1[None, :]]
    top = tl + (tr - tl) * fx
    bot = bl + (br - bl) * fx
    return top + (bot - top) * fy


def _nearest_hw(mask: np.ndarray, th: int, tw: int) -> np.ndarray:
    h, w = mask.shape
    if (h, w) == (th, tw):
        return mask.copy()
    ys = np.minimum(((np.arange(th) + 0.5) * (h / th)).astype(np.int64), h - 1)
    xs = np.minimum(((np.arange(tw) + 0.5) * (w / tw)).astype(np.int64), w - 1)
    return mask[ys[:, None], xs[None, :]]


def resize_pair(image: np.ndarray, mask: np.ndarray, target_hw: tuple[int, int]):
    """Bilinear for the image, nearest-neighbor for the mask (labels are
    preserved exactly). Identity when already at the target size."""
    th, tw = target_hw
    if th < 1 or tw < 1:
        raise ValueError(f"target extents must be positive, got {target_hw}")
    return _bilinear_chw(image, th, tw), _nearest_hw(mask, th, tw)


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


def split_dataset(samples, fraction: float = 0.8, seed: int = 0):
    """Seeded shuffle, then prefix split. Returns (train, test) with split
    tags set; together they are a disjoint, exhaustive partition."""
    samples = list(samples)
    if not samples:
        raise ValueError("cannot split an empty dataset")
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    perm = np.random.default_rng(seed).permutation(len(samples))
    n_train = int(round(fraction * len(samples)))
    train = [replace(samples[i], split="train") for i in perm[:n_train]]
    test = [replace(samples[i], split="test") for i in perm[n_train:]]
    return train, test


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

# Fixed render colors: background plus nine saturated, mutually distant hues,
# so class identity is recoverable from color alone.
SYNTH_PALETTE = np.array(
    [
        [0.25, 0.25, 0.28],  # 0 background base
        [0.85, 0.30, 0.25],  # 1
        [0.25, 0.70, 0.30],  # 2
        [0.95, 0.90, 0.20],  # 3 (small)
        [0.25, 0.40, 0.85],  # 4
        [0.80, 0.35, 0.80],  # 5
        [0.30, 0.80, 0.80],  # 6
        [0.90, 0.60, 0.20],  # 7
        [0.95, 0.95, 0.95],  # 8 (small)
        [0.60, 0.20, 0.20],  # 9 (small)
    ],
    dtype=np.float32,
)


def _paint_ellipse(mask, img, cy, cx, ry, rx, cls, color):
    h, w = mask.shape
    yy = np.arange(h)[:, None] - cy
    xx = np.arange(w)[None, :] - cx
    region = (yy / ry) ** 2 + (xx / rx) ** 2 <= 1.0
    mask[region] = cls
    img[:, region] = color[:, None]


def _paint_rect(mask, img, top, left, hgt, wid, cls, color):
    h, w = mask.shape
    b, r = min(top + hgt, h), min(left + wid, w)
    mask[top:b, left:r] = cls
    img[:, top:b, left:r] = color[:, None, None]


def synth_generate(
    count: int, height: int, width: int, seed: int = 0, num_classes: int = 10
) -> list[SegmentationSample]:
    """Seeded synthetic scenes with targets at three scales: 1-2 large blobs
    (classes 1-2), two medium shapes (classes 4-7), and two small shapes
    (classes 3, 8, 9), each small shape under 1% of the pixel budget, over a
    textured background with additive noise. Masks are exact by construction
    and the whole dataset is a pure function of the seed."""
    if count <= 0:
        raise ValueError(f"count must be positive, got {count}")
    if num_classes != 10:
        raise ValueError("the synthetic generator draws the fixed 10-class inventory")
    if height < 16 or width < 16:
        raise ValueError(f"synthetic scenes need at least 16x16 pixels, got {height}x{width}")
    rng = np.random.default_rng(seed)
    m = min(height, width)
    samples = []
    for i in range(count):
        # Background: gentle diagonal gradient around the base color.
        gy = np.linspace(-0.06, 0.06, height, dtype=np.float32)[None, :, None]
        gx = np.linspace(-0.06, 0.06, width, dtype=np.float32)[None, None, :]
        img = SYNTH_PALETTE[0][:, None, None] + gy + gx
        img = np.broadcast_to(img, (3, height, width)).copy()
        mask = np.zeros((height, width), dtype=np.uint8)

        n_large = 1 + i % 2
        for j in range(n_large):
            cls = 1 + (i + j) % 2
            ry = rng.uniform(0.18, 0.28) * m
            rx = rng.uniform(0.18, 0.28) * m
            cy = rng.uniform(ry, height - ry)
            cx = rng.uniform(rx, width - rx)
            _paint_ellipse(mask, img, cy, cx, ry, rx, cls, SYNTH_PALETTE[cls])

        for j in range(2):
            cls = 4 + (i + j) % 4
            if (i + j) % 2:
                ry = rng.uniform(0.07, 0.11) * m
                rx = rng.uniform(0.07, 0.11) * m
                cy = rng.uniform(ry, height - ry)
                cx = rng.uniform(rx, width - rx)
                _paint_ellipse(mask, img, cy, cx, ry, rx, cls, SYNTH_PALETTE[cls])
            else:
                hgt = int(rng.uniform(0.12, 0.2) * m)
                wid = int(rng.uniform(0.12, 0.2) * m)
                top = rng.integers(0, height - hgt)
                left = rng.integers(0, width - wid)
                _paint_rect(mask, img, int(top), int(left), hgt, wid, cls, SYNTH_PALETTE[cls])

        # Small targets are drawn last so nothing overwrites them; each stays
        # below 1% of the image area.
        cap = max(1, int(np.sqrt(0.01 * height * width)))
        lo = min(max(3, round(0.05 * m)), cap)
        hi = max(lo, min(max(4, round(0.09 * m)), cap))
        for j in range(2):
            cls = SMALL_TARGET_CLASSES[(i + j) % 3]
            side = int(rng.integers(lo, hi + 1))
            top = int(rng.integers(0, height - side))
            left = int(rng.integers(0, width - side))
            _paint_rect(mask, img, top, left, side, side, cls, SYNTH_PALETTE[cls])

        img += rng.normal(0.0, 0.02, size=img.shape).astype(np.float32)
        img = np.clip(img, 0.0, 1.0).astype(np.float32)
        samples.append(SegmentationSample(img, mask, f"synth_{i:04d}"))
    return samples


# ---------------------------------------------------------------------------
# dataset IO
# ---------------------------------------------------------------------------


def load_image(path) -> np.ndarray:
    """8-bit grayscale or RGB image file -> float32 (3, H, W) in [0, 1];
    grayscale is replicated across the three channels."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = np.stack([arr] * 3)
    else:
        arr = np.ascontiguousarray(arr.transpose(2, 0, 1))
    return arr


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "L":
            raise DatasetError(f"mask {path} must be single-channel 8-bit, got mode {im.mode}")
        return np.asarray(im, dtype=np.uint8)


def save_dataset(samples, root) -> Path:
    """Write images/, masks/ and manifest.tsv under ``root``; returns the
    manifest path."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    lines = ["source_id\timage\tmask\tsplit"]
    for s in samples:
        img8 = np.clip(np.round(s.image * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
        img_rel = f"images/{s.source_id}.png"
        mask_rel = f"masks/{s.source_id}.png"
        Image.fromarray(img8, mode="RGB").save(root / img_rel)
        Image.fromarray(s.mask, mode="L").save(root / mask_rel)
        lines.append(f"{s.source_id}\t{img_rel}\t{mask_rel}\t{s.split}")
    manifest = root / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def load_dataset(manifest_path, split: str | None = None) -> list[SegmentationSample]:
    """Read a manifest.tsv (optionally filtered to one split tag)."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.tsv"
    if not manifest_path.is_file():
        raise DatasetError(f"no manifest at {manifest_path}")
    root = manifest_path.parent
    lines = manifest_path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].split("\t") != ["source_id", "image", "mask", "split"]:
        raise DatasetError(f"{manifest_path}: unrecognized manifest header")
    samples = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DatasetError(f"{manifest_path}:{ln}: expected 4 tab-separated fields")
        source_id, img_rel, mask_rel, tag = parts
        if split is not None and tag != split:
            continue
        samples.append(
            SegmentationSample(
                image=load_image(root / img_rel),
                mask=load_mask(root / mask_rel),
                source_id=source_id,
                split=tag,
            )
        )
    return samples


def convert_annotations(
    data_dir,
    label_map: LabelMap,
    target_hw: tuple[int, int] | None = None,
    strict_labels: bool = True,
    images_dir=None,
) -> tuple[list[SegmentationSample], list[str]]:
    """Rasterize every annotation document under ``data_dir`` (paired with
    the image file of the same stem, searched in ``images_dir`` when given,
    else next to the document) into samples, optionally resizing. Returns
    (samples, warnings); processing order is sorted by file name."""
    data_dir = Path(data_dir)
    json_paths = sorted(data_dir.rglob("*.json"))
    if not json_paths:
        raise DatasetError(f"no annotation documents (*.json) under {data_dir}")
    samples, warnings = [], []
    for jp in json_paths:
        shapes, (h, w) = parse_annotation_file(jp)
        image_base = Path(images_dir) / jp.stem if images_dir is not None else jp.parent / jp.stem
        image_path = None
        for ext in (".png", ".jpg", ".jpeg", ".PNG", ".JPG", ".JPEG"):
            cand = Path(str(image_base) + ext)
            if cand.is_file():
                image_path = cand
                break
        if image_path is None:
            raise DatasetError(f"no image file for {jp} at {image_base}.(png|jpg|jpeg)")
        image = load_image(image_path)
        if image.shape[1:] != (h, w):
            raise DatasetError(
                f"{jp}: declared extent {h}x{w} does not match image {image.shape[1]}x{image.shape[2]}"
            )
        try:
            mask, warns = rasterize(shapes, label_map, h, w, strict_labels=strict_labels)
        except DatasetError as e:
            raise DatasetError(f"{jp}: {e}") from e
        warnings.extend(f"{jp.name}: {msg}" for msg in warns)
        if target_hw is not None:
            image, mask = resize_pair(image, mask, target_hw)
        samples.append(SegmentationSample(image, mask, jp.stem))
    return samples, warnings
