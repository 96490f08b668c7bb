"""
Pseudo-labelled multi-task self-training: train an emotion teacher on
face-only data, detect and crop driver faces, label them with the teacher
and assemble the student manifest. Samples without a detectable face get
the Non-Face emotion label and an all-zero face input.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from . import checkpoint
from .data import (NON_FACE, ManifestRecord, Provenance, bilinear_resize, load_model_image,
                   normalize, read_ppm, resolve, write_manifest, write_ppm)
from .errors import DataError, DetectorContractError, FormatError, VitddError
from .model import EMO, FACE, forward_tokens, init_params
from .tensor import Tensor, log_softmax_np, no_grad
from .training import Batchable, fit

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FaceDetection:
    found: bool
    box: tuple | None = None  # (x, y, w, h)

    def check(self, height, width):
        if not self.found:
            return self
        if self.box is None:
            raise DetectorContractError("detection marked found without a box")
        x, y, w, h = self.box
        if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > width or y + h > height:
            raise DetectorContractError(f"box {self.box} outside {width}x{height} image")
        return self


NOT_FOUND = FaceDetection(False)


class Detector(Protocol):
    def detect(self, sample_id: str, image: np.ndarray) -> FaceDetection: ...


class StubDetector:
    """Reads boxes from a sidecar file of ``sample_id,x,y,w,h`` / ``sample_id,none`` lines.

    Samples missing from the file are reported as not found.
    """

    def __init__(self, annotations):
        self.boxes = {}
        text = Path(annotations).read_text(encoding="utf-8")
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) == 2 and parts[1].lower() == "none":
                self.boxes[parts[0]] = None
            elif len(parts) == 5:
                try:
                    self.boxes[parts[0]] = tuple(int(v) for v in parts[1:])
                except ValueError:
                    raise FormatError(f"{annotations}:{lineno}: non-integer box {line!r}") from None
            else:
                raise FormatError(f"{annotations}:{lineno}: expected sample_id,x,y,w,h or sample_id,none")

    def detect(self, sample_id, image):
        box = self.boxes.get(sample_id)
        return NOT_FOUND if box is None else FaceDetection(True, box)


class SyntheticDetector:
    """Fixed-box rule for synthetic frames: the top-right quadrant is the face
    whenever its mean intensity clears ``threshold`` (background is dark)."""

    def __init__(self, threshold=132.0):
        self.threshold = threshold

    def detect(self, sample_id, image):
        h, w = image.shape[:2]
        box = (w // 2, 0, w - w // 2, h // 2)
        x, y, bw, bh = box
        if image[y:y + bh, x:x + bw].mean() > self.threshold:
            return FaceDetection(True, box)
        return NOT_FOUND


class NullDetector:
    """Never finds a face."""

    def detect(self, sample_id, image):
        return NOT_FOUND


def blank_face(size=(32, 32), channels=3):
    """All-zero face input (the normalized-space neutral image)."""
    return Tensor(np.zeros((channels,) + tuple(size)))


def detect_and_crop(image, detector, sample_id="", size=(32, 32)):
    """Run ``detector`` on a (H, W, 3) uint8 frame and bilinear-resize the box.

    Returns ``(detection, crop)`` where crop is a (3, h, w) float array in
    pixel units, or None when no face was found.
    """
    image = np.asarray(image)
    det = detector.detect(sample_id, image).check(*image.shape[:2])
    if not det.found:
        return det, None
    x, y, w, h = det.box
    region = image[y:y + h, x:x + w].transpose(2, 0, 1).astype(np.float64)
    return det, bilinear_resize(region, *size)


def label_from_logits(logits):
    """Argmax (lowest index on ties) and its softmax probability."""
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    label = int(np.argmax(logits))
    return label, float(np.exp(log_softmax_np(logits)[label]))


def teacher_logits(faces, teacher_params, teacher_config):
    faces = np.asarray(faces, dtype=np.float64)
    with no_grad():
        logits, _ = forward_tokens({FACE: faces}, teacher_params, teacher_config)
    return logits[EMO].data


def pseudo_label(face, teacher_params, teacher_config):
    """Emotion pseudo label for one normalized face, or Non-Face for None."""
    if face is None:
        return NON_FACE, None
    data = face.data if isinstance(face, Tensor) else face
    return label_from_logits(teacher_logits(data, teacher_params, teacher_config))


# ---------------------------------------------------------------------------
# step 1: teacher
# ---------------------------------------------------------------------------

def train_teacher(fer_rows, base_dir, teacher_config, train_config, out_path=None, init_seed=None):
    """Fit a face-only emotion classifier; returns ``(params, TrainResult)``.

    ``fer_rows`` are ``(sample_id, face_path, emotion)`` tuples relative to
    ``base_dir``.
    """
    if not fer_rows:
        raise DataError("empty facial-expression dataset")
    faces = np.stack([load_model_image(resolve(base_dir, p), teacher_config.face_size) for _, p, _ in fer_rows])
    data = Batchable([sid for sid, _, _ in fer_rows], {FACE: faces},
                     {EMO: np.array([e for _, _, e in fer_rows])})
    seed = train_config.seed if init_seed is None else init_seed
    params = init_params(teacher_config, seed=seed)
    result = fit(data, params, teacher_config, train_config)
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_bytes(result.final_blob)
    return params, result


# ---------------------------------------------------------------------------
# steps 2-3: detect, crop, label
# ---------------------------------------------------------------------------

@dataclass
class ManifestBuild:
    records: list
    errors: list
    faces_found: int
    non_face: int
    manifest_bytes: bytes | None = None


def _crop_one(args):
    record, base_dir, detector, size = args
    try:
        pixels = read_ppm(resolve(base_dir, record.driver_path))
        det, crop = detect_and_crop(pixels, detector, record.sample_id, size)
    except (VitddError, OSError) as exc:
        return record, None, f"{record.sample_id}: {exc}"
    if crop is None:
        return record, None, None
    return record, np.clip(np.rint(crop), 0, 255).astype(np.uint8).transpose(1, 2, 0), None


def build_student_manifest(records, base_dir, detector, teacher_params, teacher_config, out_dir, threads=1):
    """Create the pseudo-labelled student manifest in ``out_dir``.

    Detection and cropping run on up to ``threads`` workers; teacher
    inference and the manifest merge are sequential and sorted by
    sample_id, so the output does not depend on scheduling. Per-record
    failures are collected in ``errors`` and the run continues.
    """
    out = Path(out_dir)
    size = teacher_config.face_size
    jobs = [(r, base_dir, detector, size) for r in sorted(records, key=lambda r: r.sample_id)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        results = list(pool.map(_crop_one, jobs))

    errors = [err for _, _, err in results if err]
    ok = [(rec, crop) for rec, crop, err in results if not err]
    with_face = [(rec, crop) for rec, crop in ok if crop is not None]
    labels = {}
    if with_face:
        faces = np.stack([normalize(c) for _, c in with_face])
        for (rec, _), row in zip(with_face, teacher_logits(faces, teacher_params, teacher_config)):
            labels[rec.sample_id] = label_from_logits(row)

    manifest = []
    for rec, crop in ok:
        driver_rel = os.path.relpath(resolve(base_dir, rec.driver_path), out)
        if crop is None:
            manifest.append(ManifestRecord(rec.sample_id, driver_rel, None, rec.distraction, NON_FACE,
                                           Provenance.PSEUDO, None))
            continue
        face_rel = f"face/{rec.sample_id}.ppm"
        write_ppm(out / face_rel, crop)
        label, conf = labels[rec.sample_id]
        manifest.append(ManifestRecord(rec.sample_id, driver_rel, face_rel, rec.distraction, label,
                                       Provenance.PSEUDO, conf))
    blob = write_manifest(out / "manifest.csv", manifest)
    build = ManifestBuild(manifest, errors, len(with_face), len(ok) - len(with_face), blob)
    log.info("pseudo-label: %d records, %d faces found, %d Non-Face, %d errors",
             len(manifest), build.faces_found, build.non_face, len(errors))
    for err in errors:
        log.error("%s", err)
    return build


def load_teacher(path):
    params, config = checkpoint.load_checkpoint(path, trainable=False)
    if not config.is_teacher:
        raise DataError(f"{path} is not a teacher checkpoint")
    return params, config
