"""
Datasets: class vocabularies, PPM image IO, manifests and the synthetic
driver/face generator that stands in for the real benchmarks.

Dataset directory layout::

    driver/<sample_id>.ppm      full in-cabin frame
    face/<sample_id>.ppm        ground-truth face crop (absent for face-less)
    manifest.csv                see MANIFEST_HEADER
    drivers.csv                 sample_id,driver_id
    annotations.csv             detector sidecar: sample_id,x,y,w,h | sample_id,none
    fer/face/<id>.ppm           face-only emotion set for the teacher
    fer/manifest.csv            sample_id,face_path,emotion
"""

from __future__ import annotations

import csv
import enum
import io
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError, LabelError
from .tensor import Tensor

log = logging.getLogger(__name__)

DISTRACTION_CLASSES = (
    "Safe Driving",
    "Phone Right",
    "Phone Left",
    "Text Right",
    "Text Left",
    "Adjusting Radio",
    "Drinking",
    "Hair or Makeup",
    "Reaching Behind",
    "Talking to Passenger",
)
EMOTION_CLASSES = ("happy", "sad", "surprise", "fear", "disgust", "anger", "neutral", "non-face")
NON_FACE = 7
NUM_FER_EMOTIONS = 7

MANIFEST_HEADER = ("sample_id", "driver_path", "face_path", "distraction", "emotion", "provenance", "confidence")


class Provenance(str, enum.Enum):
    GROUND_TRUTH = "GROUND_TRUTH"
    PSEUDO = "PSEUDO"


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def _ppm_token(buf, pos):
    """Next whitespace-delimited header token, skipping ``#`` comments."""
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("truncated PPM header", start)
    return buf[start:pos], pos


def decode_ppm(buf):
    """Parse binary P6 bytes into a (H, W, 3) uint8 array."""
    if buf[:2] != b"P6":
        raise FormatError("not a binary PPM (missing P6 magic)", 0)
    pos = 2
    values = []
    for what in ("width", "height", "maxval"):
        tok, pos = _ppm_token(buf, pos)
        if not tok.isdigit():
            raise FormatError(f"bad PPM {what} {tok!r}", pos - len(tok))
        values.append(int(tok))
    width, height, maxval = values
    if maxval != 255:
        raise FormatError(f"unsupported PPM maxval {maxval}", pos)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError("missing whitespace after PPM header", pos)
    pos += 1
    need = width * height * 3
    if len(buf) - pos < need:
        raise FormatError(f"truncated PPM raster: need {need} bytes, have {len(buf) - pos}", len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(height, width, 3).copy()


def encode_ppm(pixels):
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8 or pixels.ndim != 3 or pixels.shape[2] != 3:
        raise DataError(f"PPM needs (H, W, 3) uint8, got {pixels.dtype} {pixels.shape}")
    h, w, _ = pixels.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(pixels).tobytes()


def read_ppm(path):
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    try:
        return decode_ppm(buf)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_ppm(path, pixels):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode_ppm(pixels))


def normalize(pixels):
    """uint8 (H, W, 3) -> float (3, H, W) with per-channel mean 0.5, std 0.5."""
    x = np.asarray(pixels, dtype=np.float64)
    if x.ndim == 3 and x.shape[-1] == 3:
        x = x.transpose(2, 0, 1)
    return (x / 255.0 - 0.5) / 0.5


def denormalize(x):
    """Inverse of :func:`normalize`, rounded back to uint8 (H, W, 3)."""
    x = np.asarray(x, dtype=np.float64)
    raw = np.rint((x * 0.5 + 0.5) * 255.0)
    return np.clip(raw, 0, 255).astype(np.uint8).transpose(1, 2, 0)


def load_image(path):
    return Tensor(normalize(read_ppm(path)))


def save_image(image, path):
    data = image.data if isinstance(image, Tensor) else image
    write_ppm(path, denormalize(data))


def bilinear_resize(image, out_h, out_w):
    """Resize a (C, H, W) float array with half-pixel-centred bilinear sampling.

    Sample positions are clamped to the border; equal sizes reproduce the
    input exactly and exact 2x downscaling averages 2 x 2 blocks.
    """
    image = np.asarray(image, dtype=np.float64)
    _, h, w = image.shape

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, wy = axis(h, out_h)
    x0, x1, wx = axis(w, out_w)
    wy = wy[:, None]
    wx = wx[None, :]
    top = image[:, y0][:, :, x0] * (1 - wx) + image[:, y0][:, :, x1] * wx
    bot = image[:, y1][:, :, x0] * (1 - wx) + image[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def load_model_image(path, size):
    """Read a PPM, resize to ``size`` in pixel space if needed, normalize."""
    pixels = read_ppm(path)
    if pixels.shape[:2] != tuple(size):
        resized = bilinear_resize(pixels.transpose(2, 0, 1).astype(np.float64), *size)
        return (resized / 255.0 - 0.5) / 0.5
    return normalize(pixels)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestRecord:
    sample_id: str
    driver_path: str
    face_path: str | None
    distraction: int
    emotion: int
    provenance: Provenance = Provenance.GROUND_TRUTH
    confidence: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "provenance", Provenance(self.provenance))
        if not 0 <= self.distraction < len(DISTRACTION_CLASSES):
            raise LabelError(f"{self.sample_id}: distraction label {self.distraction} out of range")
        if not 0 <= self.emotion < len(EMOTION_CLASSES):
            raise LabelError(f"{self.sample_id}: emotion label {self.emotion} out of range")
        if (self.emotion == NON_FACE) != (self.face_path is None):
            raise LabelError(f"{self.sample_id}: Non-Face label must coincide with a missing face image")
        wants_conf = self.provenance is Provenance.PSEUDO and self.face_path is not None
        if wants_conf != (self.confidence is not None):
            raise LabelError(f"{self.sample_id}: confidence must be present exactly for pseudo-labelled faces")


def write_manifest(path, records):
    """Write records sorted by sample_id; returns the bytes written."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for r in sorted(records, key=lambda r: r.sample_id):
        writer.writerow([
            r.sample_id, r.driver_path, r.face_path or "", r.distraction, r.emotion,
            r.provenance.value, "" if r.confidence is None else repr(float(r.confidence)),
        ])
    blob = buf.getvalue().encode("utf-8")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(blob)
    return blob


def read_manifest(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != MANIFEST_HEADER:
        raise FormatError(f"{path}: manifest header must be {','.join(MANIFEST_HEADER)}", 0)
    records = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(MANIFEST_HEADER):
            raise FormatError(f"{path}:{lineno}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
        sid, drv, face, dist, emo, prov, conf = row
        records.append(ManifestRecord(sid, drv, face or None, int(dist), int(emo),
                                      Provenance(prov), float(conf) if conf else None))
    return records


def resolve(base_dir, rel):
    return os.path.join(base_dir, rel) if rel is not None else None


def read_driver_map(path):
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != ["sample_id", "driver_id"]:
        raise FormatError(f"{path}: expected header sample_id,driver_id", 0)
    return {sid: did for sid, did in rows[1:]}


def read_fer_manifest(path):
    """Face-only emotion set: list of (sample_id, face_path, emotion)."""
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != ["sample_id", "face_path", "emotion"]:
        raise FormatError(f"{path}: expected header sample_id,face_path,emotion", 0)
    out = []
    for sid, face, emo in rows[1:]:
        emo = int(emo)
        if not 0 <= emo < NUM_FER_EMOTIONS:
            raise LabelError(f"{path}: {sid} emotion {emo} outside the 7 FER classes")
        out.append((sid, face, emo))
    return out


def split_by_driver(records, driver_of, train_ids, test_ids):
    """Partition records so no driver appears on both sides."""
    train_ids, test_ids = set(train_ids), set(test_ids)
    overlap = train_ids & test_ids
    if overlap:
        raise ConfigError(f"driver ids in both train and test: {sorted(overlap)}")
    train, test = [], []
    for r in records:
        if r.sample_id not in driver_of:
            raise DataError(f"{r.sample_id} has no driver id")
        did = driver_of[r.sample_id]
        if did in train_ids:
            train.append(r)
        elif did in test_ids:
            test.append(r)
    log.info("split by driver: %d train / %d test samples (%d dropped)",
             len(train), len(test), len(records) - len(train) - len(test))
    return train, test


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 10
    samples_per_class: int = 8
    source_size: int = 32
    face_size: int = 8
    faceless_fraction: float = 0.2
    num_drivers: int = 8
    fer_per_class: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1 or self.samples_per_class < 1:
            raise ConfigError("synthetic spec needs at least one class and one sample per class")
        if self.num_classes > len(DISTRACTION_CLASSES):
            raise ConfigError(f"at most {len(DISTRACTION_CLASSES)} distraction classes")
        if self.source_size % 4 or self.source_size < 8:
            raise ConfigError("source_size must be a multiple of 4 and at least 8")
        if not 0.0 <= self.faceless_fraction <= 1.0:
            raise ConfigError("faceless_fraction must lie in [0, 1]")
        if self.num_drivers < 1 or self.fer_per_class < 0:
            raise ConfigError("num_drivers must be positive and fer_per_class nonnegative")


# Source frames are a 4x4 grid of cells; the face sits in the top-right 2x2
# cells and the ten distraction cues occupy the remaining cells.
_CLASS_CELLS = ((0, 0), (0, 1), (1, 0), (1, 1), (2, 0), (2, 1), (2, 2), (2, 3), (3, 0), (3, 1))
_CLASS_COLORS = np.array([
    (250, 40, 40), (40, 250, 40), (40, 40, 250), (250, 250, 40), (250, 40, 250),
    (40, 250, 250), (250, 140, 40), (140, 40, 250), (250, 250, 250), (40, 140, 250),
], dtype=np.float64)
_BACKGROUND = 64.0
_SKIN = 200.0
_NOISE = 12


def face_box(source_size):
    """Where synthetic frames put the face: the top-right quadrant."""
    half = source_size // 2
    return (half, 0, half, half)


def _face_pattern(emotion, size, rng):
    """Skin-toned square with an emotion-coded dark cell in a 4x4 layout."""
    face = np.full((size, size, 3), _SKIN)
    cell = size // 4
    slots = [(1, 0), (1, 1), (1, 2), (1, 3), (2, 0), (2, 3), (3, 1)]
    r, c = slots[emotion]
    face[r * cell:(r + 1) * cell, c * cell:(c + 1) * cell] = (30.0, 30.0, 120.0)
    face[0:cell, cell:2 * cell] = face[0:cell, 2 * cell:3 * cell] = 90.0
    return face + rng.integers(-_NOISE, _NOISE + 1, face.shape)


def _driver_frame(distraction, rng, size):
    frame = _BACKGROUND + rng.integers(-_NOISE, _NOISE + 1, (size, size, 3)).astype(np.float64)
    cell = size // 4
    r, c = _CLASS_CELLS[distraction]
    frame[r * cell:(r + 1) * cell, c * cell:(c + 1) * cell] = _CLASS_COLORS[distraction]
    return frame


def _u8(x):
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def class_templates(source_size):
    """Noise-free driver templates, one per distraction class (face region blank)."""
    out = []
    for k in range(len(DISTRACTION_CLASSES)):
        frame = np.full((source_size, source_size, 3), _BACKGROUND)
        cell = source_size // 4
        r, c = _CLASS_CELLS[k]
        frame[r * cell:(r + 1) * cell, c * cell:(c + 1) * cell] = _CLASS_COLORS[k]
        out.append(frame)
    return np.stack(out)


def decode_distraction(pixels, num_classes=len(DISTRACTION_CLASSES)):
    """Nearest-template classifier over the non-face cells of a source frame."""
    pixels = np.asarray(pixels, dtype=np.float64)
    templates = class_templates(pixels.shape[0])[:num_classes]
    x, y, w, h = face_box(pixels.shape[0])
    mask = np.ones(pixels.shape[:2], bool)
    mask[y:y + h, x:x + w] = False
    dists = [np.sum((pixels[mask] - t[mask]) ** 2) for t in templates]
    return int(np.argmin(dists))


def generate_synthetic(spec, out_dir):
    """Write a deterministic synthetic dataset; returns the manifest records.

    Driver frames carry a class-coloured block at a class-specific cell; face
    crops carry an emotion-coded cell. Exactly ``round(faceless_fraction * n)``
    samples (chosen by the seeded RNG) have no face.
    """
    out = Path(out_dir)
    rng = np.random.default_rng(spec.seed)
    n = spec.num_classes * spec.samples_per_class
    faceless = set(rng.permutation(n)[:int(round(spec.faceless_fraction * n))].tolist())
    width = max(4, len(str(n - 1)))
    bx, by, bw, bh = face_box(spec.source_size)

    records, drivers, annotations = [], [], []
    for i in range(n):
        sid = f"s{i:0{width}d}"
        distraction = i % spec.num_classes
        frame = _driver_frame(distraction, rng, spec.source_size)
        driver_rel = f"driver/{sid}.ppm"
        if i in faceless:
            face_rel, emotion = None, NON_FACE
            annotations.append(f"{sid},none")
        else:
            emotion = int(rng.integers(0, NUM_FER_EMOTIONS))
            frame[by:by + bh, bx:bx + bw] = _face_pattern(emotion, bw, rng)
            crop = bilinear_resize(_u8(frame[by:by + bh, bx:bx + bw]).transpose(2, 0, 1).astype(float),
                                   spec.face_size, spec.face_size)
            face_rel = f"face/{sid}.ppm"
            write_ppm(out / face_rel, _u8(crop.transpose(1, 2, 0)))
            annotations.append(f"{sid},{bx},{by},{bw},{bh}")
        write_ppm(out / driver_rel, _u8(frame))
        records.append(ManifestRecord(sid, driver_rel, face_rel, distraction, emotion))
        drivers.append((sid, f"d{i % spec.num_drivers:02d}"))

    write_manifest(out / "manifest.csv", records)
    _write_lines(out / "drivers.csv", ["sample_id,driver_id"] + [f"{s},{d}" for s, d in drivers])
    _write_lines(out / "annotations.csv", annotations)

    fer_rows = ["sample_id,face_path,emotion"]
    for j in range(NUM_FER_EMOTIONS * spec.fer_per_class):
        fid = f"f{j:04d}"
        emotion = j % NUM_FER_EMOTIONS
        face = _face_pattern(emotion, bw, rng)
        crop = bilinear_resize(_u8(face).transpose(2, 0, 1).astype(float), spec.face_size, spec.face_size)
        write_ppm(out / "fer" / "face" / f"{fid}.ppm", _u8(crop.transpose(1, 2, 0)))
        fer_rows.append(f"{fid},face/{fid}.ppm,{emotion}")
    _write_lines(out / "fer" / "manifest.csv", fer_rows)

    log.info("synthetic dataset: %d samples (%d face-less), %d FER faces -> %s",
             n, len(faceless), len(fer_rows) - 1, out)
    return records


def _write_lines(path, lines):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8"))
