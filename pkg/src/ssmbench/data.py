"""Dataset ingestion, image decoding, preprocessing, and splitting.

Directory layouts mirror the two ultrasound corpora this harness targets
(three class folders, or two), plus a line-oriented manifest format and a
synthetic blob generator for desk-scale runs. Images are grayscale
float64 in [0, 1]; RGB inputs are collapsed with fixed luma weights,
never replicated across channels.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

BUSI_CLASSES = ("benign", "malignant", "normal")
LUMA_WEIGHTS = (0.299, 0.587, 0.114)
PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"

_KNOWN_MAGICS = (
    (b"\xff\xd8", "JPEG"),
    (b"GIF8", "GIF"),
    (b"BM", "BMP"),
    (b"P2", "ASCII PGM (P2)"),
    (b"P3", "ASCII PPM (P3)"),
    (b"P6", "binary PPM (P6)"),
)


class DatasetError(ValueError):
    """Layout, decoding, or split precondition violation."""


@dataclass
class Sample:
    label: int
    path: Optional[str] = None
    image: Optional[np.ndarray] = None  # inline [H, W, 1] floats in [0, 1]


@dataclass
class DatasetManifest:
    name: str
    classes: list
    samples: list
    source: str  # directory | synthetic

    def __post_init__(self):
        if len(self.classes) < 2:
            raise DatasetError(f"{self.name}: need >= 2 classes")
        counts = [0] * len(self.classes)
        for s in self.samples:
            if not 0 <= s.label < len(self.classes):
                raise DatasetError(
                    f"{self.name}: label {s.label} outside "
                    f"{len(self.classes)} classes")
            counts[s.label] += 1
        empty = [c for c, n in zip(self.classes, counts) if n == 0]
        if empty:
            raise DatasetError(f"{self.name}: classes without samples: {empty}")

    def class_counts(self) -> list:
        counts = [0] * len(self.classes)
        for s in self.samples:
            counts[s.label] += 1
        return counts


@dataclass
class SplitAssignment:
    train: list
    val: list
    test: list
    fractions: tuple
    seed: int

    def __post_init__(self):
        parts = [set(self.train), set(self.val), set(self.test)]
        total = sum(len(p) for p in parts)
        union = set().union(*parts)
        if total != len(union):
            raise DatasetError("split parts overlap")


# ---------------------------------------------------------------------------
# decoding

def _sniff_format(data: bytes) -> str:
    for magic, name in _KNOWN_MAGICS:
        if data.startswith(magic):
            return name
    return f"unknown magic {data[:8]!r}"


def decode_image(data: bytes) -> np.ndarray:
    """Decode binary PGM (P5) or 8-bit gray/RGB PNG to [H, W, 1] in [0, 1]."""
    if data.startswith(b"P5"):
        return _decode_pgm(data)
    if data.startswith(PNG_SIGNATURE):
        return _decode_png(data)
    raise DatasetError(f"unsupported image format: {_sniff_format(data)}")


def _decode_pgm(data: bytes) -> np.ndarray:
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError("truncated PGM header")
        fields.append(data[start:pos])
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError:
        raise DatasetError("malformed PGM header")
    if maxval <= 0 or maxval > 255:
        raise DatasetError(f"PGM maxval {maxval} unsupported (8-bit only)")
    pos += 1  # single whitespace after maxval
    raster = data[pos : pos + width * height]
    if len(raster) < width * height:
        raise DatasetError("truncated PGM raster")
    img = np.frombuffer(raster, dtype=np.uint8).astype(np.float64)
    return (img / float(maxval)).reshape(height, width, 1)


def _unfilter_png(raw: bytes, height: int, width: int, channels: int) -> np.ndarray:
    stride = width * channels
    if len(raw) < height * (stride + 1):
        raise DatasetError("truncated PNG pixel data")
    out = np.zeros((height, stride), dtype=np.uint8)
    bpp = channels  # bytes per pixel at bit depth 8
    for r in range(height):
        row_start = r * (stride + 1)
        ftype = raw[row_start]
        row = np.frombuffer(raw, dtype=np.uint8,
                            count=stride, offset=row_start + 1).astype(np.int32)
        prev = out[r - 1].astype(np.int32) if r else np.zeros(stride, np.int32)
        if ftype == 0:
            cur = row
        elif ftype == 2:  # up
            cur = (row + prev) & 0xFF
        elif ftype in (1, 3, 4):  # sub / average / paeth need a scalar sweep
            cur = np.zeros(stride, np.int32)
            for i in range(stride):
                a = cur[i - bpp] if i >= bpp else 0
                b = prev[i]
                c = prev[i - bpp] if i >= bpp else 0
                if ftype == 1:
                    pred = a
                elif ftype == 3:
                    pred = (a + b) // 2
                else:
                    p = a + b - c
                    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
                    pred = a if pa <= pb and pa <= pc else (b if pb <= pc else c)
                cur[i] = (row[i] + pred) & 0xFF
        else:
            raise DatasetError(f"PNG filter type {ftype} unsupported")
        out[r] = cur.astype(np.uint8)
    return out.reshape(height, width, channels)


def _decode_png(data: bytes) -> np.ndarray:
    pos = len(PNG_SIGNATURE)
    header = None
    idat = bytearray()
    while pos + 8 <= len(data):
        (length,) = struct.unpack(">I", data[pos : pos + 4])
        ctype = data[pos + 4 : pos + 8]
        chunk = data[pos + 8 : pos + 8 + length]
        if len(chunk) < length:
            raise DatasetError("truncated PNG chunk")
        if ctype == b"IHDR":
            header = struct.unpack(">IIBBBBB", chunk)
        elif ctype == b"IDAT":
            idat.extend(chunk)
        elif ctype == b"IEND":
            break
        pos += 12 + length  # length + type + data + crc
    if header is None or not idat:
        raise DatasetError("truncated PNG: missing IHDR or IDAT")
    width, height, depth, color, _comp, _filt, interlace = header
    if depth != 8 or color not in (0, 2) or interlace != 0:
        raise DatasetError(
            f"unsupported PNG variant (bit depth {depth}, color type {color}, "
            f"interlace {interlace}); only 8-bit gray/RGB supported")
    try:
        raw = zlib.decompress(bytes(idat))
    except zlib.error as exc:
        raise DatasetError(f"corrupt PNG stream: {exc}")
    channels = 1 if color == 0 else 3
    pixels = _unfilter_png(raw, height, width, channels).astype(np.float64)
    if channels == 1:
        gray = pixels[..., 0]
    else:
        gray = (pixels[..., 0] * LUMA_WEIGHTS[0]
                + pixels[..., 1] * LUMA_WEIGHTS[1]
                + pixels[..., 2] * LUMA_WEIGHTS[2])
    return (gray / 255.0)[..., None]


# ---------------------------------------------------------------------------
# preprocessing

def bilinear_resize(img: np.ndarray, target: int) -> np.ndarray:
    """Resize [H, W, 1] to [target, target, 1] with half-pixel centers."""
    h, w = img.shape[:2]
    if h == 0 or w == 0:
        raise DatasetError("cannot resize a degenerate image")
    plane = img[..., 0]

    def axis_coords(src_n):
        coords = (np.arange(target) + 0.5) * (src_n / target) - 0.5
        coords = np.clip(coords, 0.0, src_n - 1.0)
        lo = np.floor(coords).astype(np.intp)
        hi = np.minimum(lo + 1, src_n - 1)
        frac = coords - lo
        return lo, hi, frac

    y0, y1, fy = axis_coords(h)
    x0, x1, fx = axis_coords(w)
    # lerp as a + (b - a) * f so constant regions resize exactly
    top = plane[y0][:, x0]
    top = top + (plane[y0][:, x1] - top) * fx
    bot = plane[y1][:, x0]
    bot = bot + (plane[y1][:, x1] - bot) * fx
    out = top + (bot - top) * fy[:, None]
    return out[..., None]


def preprocess(img: np.ndarray, target_size: int) -> np.ndarray:
    """Bilinear resize then per-image standardization (std floor 1e-6)."""
    if target_size < 8:
        raise DatasetError("target size must be >= 8")
    resized = bilinear_resize(np.asarray(img, dtype=np.float64), target_size)
    std = float(resized.std())
    if std <= 1e-6:  # numerically constant image: floor engaged, define as 0
        return np.zeros_like(resized)
    return (resized - resized.mean()) / std


# ---------------------------------------------------------------------------
# directory and manifest-file loading

def _list_image_files(class_dir: str) -> list:
    names = sorted(os.listdir(class_dir))
    files = [os.path.join(class_dir, n) for n in names
             if os.path.isfile(os.path.join(class_dir, n))]
    if not files:
        raise DatasetError(f"class directory {class_dir} is empty")
    return files


def _validate_readable(path: str) -> None:
    try:
        with open(path, "rb") as fh:
            head = fh.read(8)
    except OSError as exc:
        raise DatasetError(f"unreadable image {path}: {exc}")
    if not (head.startswith(b"P5") or head.startswith(PNG_SIGNATURE)):
        raise DatasetError(
            f"unreadable image {path}: {_sniff_format(head)}")


def load_dataset(root_path: str, layout: str) -> DatasetManifest:
    """Build a manifest from a class-directory tree or a manifest file.

    Sample order is lexicographic (per class directory, classes in order),
    so loading the same tree twice yields identical manifests.
    """
    if layout == "manifest_file":
        return _load_manifest_file(root_path)
    if not os.path.isdir(root_path):
        raise DatasetError(f"dataset root {root_path} does not exist")
    found = sorted(d for d in os.listdir(root_path)
                   if os.path.isdir(os.path.join(root_path, d)))
    if layout == "busi":
        missing = [c for c in BUSI_CLASSES if c not in found]
        if missing:
            raise DatasetError(
                f"busi layout needs {list(BUSI_CLASSES)}; missing {missing}, "
                f"found {found}")
        classes = list(BUSI_CLASSES)
    elif layout == "b":
        if len(found) != 2:
            raise DatasetError(
                f"b layout needs exactly 2 class directories, found {found}")
        classes = found
    else:
        raise DatasetError(f"unknown dataset layout {layout!r}")

    samples = []
    for label, cls in enumerate(classes):
        for path in _list_image_files(os.path.join(root_path, cls)):
            _validate_readable(path)
            samples.append(Sample(label=label, path=path))
    return DatasetManifest(name=os.path.basename(os.path.normpath(root_path)),
                           classes=classes, samples=samples, source="directory")


def _load_manifest_file(path: str) -> DatasetManifest:
    if not os.path.isfile(path):
        raise DatasetError(f"manifest file {path} does not exist")
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or not lines[0].startswith("classes:"):
        raise DatasetError(f"{path}: first line must be 'classes: a,b,...'")
    classes = [c.strip() for c in lines[0][len("classes:"):].split(",")]
    base = os.path.dirname(os.path.abspath(path))
    samples = []
    for ln in lines[1:]:
        if not ln.strip():
            continue
        try:
            rel, label = ln.split("\t")
        except ValueError:
            raise DatasetError(f"{path}: malformed row {ln!r}")
        samples.append(Sample(label=int(label), path=os.path.join(base, rel)))
    return DatasetManifest(name=os.path.basename(path), classes=classes,
                           samples=samples, source="directory")


def write_manifest(path: str, manifest: DatasetManifest) -> None:
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("classes: " + ",".join(manifest.classes) + "\n")
        for s in manifest.samples:
            rel = os.path.relpath(s.path, base)
            fh.write(f"{rel}\t{s.label}\n")


def union_manifests(a: DatasetManifest, b: DatasetManifest) -> DatasetManifest:
    """Merge two manifests, matching classes by name (new names appended)."""
    classes = list(a.classes)
    for cls in b.classes:
        if cls not in classes:
            classes.append(cls)
    remap = {i: classes.index(cls) for i, cls in enumerate(b.classes)}
    samples = [Sample(label=s.label, path=s.path, image=s.image)
               for s in a.samples]
    samples += [Sample(label=remap[s.label], path=s.path, image=s.image)
                for s in b.samples]
    return DatasetManifest(name=f"{a.name}+{b.name}", classes=classes,
                           samples=samples, source=a.source)


# ---------------------------------------------------------------------------
# splitting

def stratified_split(manifest: DatasetManifest,
                     fractions: Tuple[float, float, float] = (0.7, 0.15, 0.15),
                     seed: int = 0) -> SplitAssignment:
    """Per-class shuffle and proportional allocation; every part nonempty."""
    rng = np.random.default_rng(seed)
    by_class: dict = {c: [] for c in range(len(manifest.classes))}
    for i, s in enumerate(manifest.samples):
        by_class[s.label].append(i)
    train, val, test = [], [], []
    for c in range(len(manifest.classes)):
        idx = np.array(by_class[c], dtype=np.intp)
        n = len(idx)
        if n < 3:
            raise DatasetError(
                f"class {manifest.classes[c]} has {n} samples; need >= 3")
        shuffled = idx[rng.permutation(n)]
        n_train = min(max(round(fractions[0] * n), 1), n - 2)
        n_val = min(max(round(fractions[1] * n), 1), n - n_train - 1)
        train += shuffled[:n_train].tolist()
        val += shuffled[n_train : n_train + n_val].tolist()
        test += shuffled[n_train + n_val :].tolist()
    return SplitAssignment(train=sorted(train), val=sorted(val),
                           test=sorted(test), fractions=tuple(fractions),
                           seed=seed)


# ---------------------------------------------------------------------------
# synthetic data

def synth_generate(num_per_class: int, classes: int = 3, image_size: int = 32,
                   seed: int = 0) -> DatasetManifest:
    """Blob images whose count/size signature varies by class, plus noise.

    Class c draws 2^(c+1) - 1 Gaussian bumps with radius halving per class
    (many small blobs vs few large ones), a contrast that survives
    per-image standardization.
    """
    if image_size < 16:
        raise DatasetError("image_size must be >= 16")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:image_size, 0:image_size]
    samples = []
    for c in range(classes):
        n_blobs = 2 ** (c + 1) - 1
        sigma_base = image_size / (4.0 * 2 ** c)
        for _ in range(num_per_class):
            img = np.zeros((image_size, image_size))
            for _ in range(n_blobs):
                margin = max(2.0, 0.8 * sigma_base)
                cy = rng.uniform(margin, image_size - margin)
                cx = rng.uniform(margin, image_size - margin)
                sigma = sigma_base * rng.uniform(0.9, 1.1)
                img += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2)
                              / (2.0 * sigma ** 2))
            img = np.clip(img, 0.0, 1.0)
            img += rng.normal(0.0, 0.03, img.shape)
            img = np.clip(img, 0.0, 1.0)
            samples.append(Sample(label=c, image=img[..., None]))
    classes_names = [f"class{c}" for c in range(classes)]
    return DatasetManifest(name=f"synthetic-{classes}x{num_per_class}",
                           classes=classes_names, samples=samples,
                           source="synthetic")


def materialize(manifest: DatasetManifest,
                image_size: int) -> Tuple[np.ndarray, np.ndarray]:
    """Decode and preprocess every sample: (images [N, S, S, 1], labels [N])."""
    images = np.empty((len(manifest.samples), image_size, image_size, 1))
    labels = np.empty(len(manifest.samples), dtype=np.intp)
    for i, s in enumerate(manifest.samples):
        if s.image is not None:
            raw = s.image
        else:
            try:
                with open(s.path, "rb") as fh:
                    raw_bytes = fh.read()
            except OSError as exc:
                raise DatasetError(f"unreadable image {s.path}: {exc}")
            try:
                raw = decode_image(raw_bytes)
            except DatasetError as exc:
                raise DatasetError(f"{s.path}: {exc}")
        images[i] = preprocess(raw, image_size)
        labels[i] = s.label
    return images, labels
