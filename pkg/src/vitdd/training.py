"""
Optimization: AdamW with decoupled weight decay, linear warmup followed by
cosine decay, freeze policies, driver-image augmentation and the epoch loop.
"""

from __future__ import annotations

import csv
import enum
import io
import logging
import math
import warnings
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .data import load_model_image, resolve
from .errors import ConfigError, DataError, NumericError
from .metrics import evaluate_arrays
from .model import DIST, DRIVER, EMO, FACE, forward_tokens, task_loss
from .tensor import no_grad

log = logging.getLogger(__name__)

DATASET_BASE_LR = {"sfddd": 3e-4, "aucdd": 6e-4}
HISTORY_HEADER = ("epoch", "split", "distraction_acc", "emotion_acc", "nll", "mean_lr")


class FreezePolicy(str, enum.Enum):
    ALL_TRAINABLE = "all"
    MSA_ONLY = "msa-only"


@dataclass
class TrainConfig:
    base_lr: float = 3e-4
    warmup_epochs: int = 5
    warmup_start_lr: float = 1e-6
    final_lr: float = 0.0
    total_epochs: int = 20
    batch_size: int = 256
    weight_decay: float = 0.1
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    freeze_policy: FreezePolicy = FreezePolicy.ALL_TRAINABLE
    seed: int = 0
    random_crop: bool = True
    crop_pad: int = 4
    hflip: bool = True
    three_augment: bool = False
    threads: int = 1

    def __post_init__(self):
        self.freeze_policy = parse_policy(self.freeze_policy)
        self.betas = tuple(float(b) for b in self.betas)
        rates = (self.base_lr, self.warmup_start_lr, self.final_lr, self.weight_decay, self.eps)
        if any(r < 0 for r in rates):
            raise ConfigError("learning rates, weight decay and eps must be nonnegative")
        if self.total_epochs < 0 or self.warmup_epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be nonnegative and batch_size positive")
        if self.total_epochs > 0 and self.warmup_epochs >= self.total_epochs:
            raise ConfigError(f"warmup_epochs {self.warmup_epochs} must be < total_epochs {self.total_epochs}")
        if self.crop_pad < 0 or self.threads < 1:
            raise ConfigError("crop_pad must be >= 0 and threads >= 1")

    @classmethod
    def for_dataset(cls, name, **overrides):
        return cls(base_lr=DATASET_BASE_LR[name.lower()], **overrides)


def parse_policy(policy):
    if isinstance(policy, FreezePolicy):
        return policy
    aliases = {"all": FreezePolicy.ALL_TRAINABLE, "all_trainable": FreezePolicy.ALL_TRAINABLE,
               "msa-only": FreezePolicy.MSA_ONLY, "msa_only": FreezePolicy.MSA_ONLY}
    try:
        return aliases[str(policy).lower()]
    except KeyError:
        raise ConfigError(f"unknown freeze policy {policy!r}") from None


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adamw_step(params, grads, state, lr, config):
    """One AdamW update, in place on the arrays in ``params``.

    Only names present in ``grads`` are touched; everything else (frozen
    parameters) gets neither an update nor optimizer state. The decay is
    applied as a multiplicative shrink ``theta * (1 - lr * wd)`` so a zero
    gradient contracts the parameter by exactly that factor.
    """
    b1, b2 = config.betas
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
    state.t += 1
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        theta = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + config.eps)
        theta *= 1.0 - lr * config.weight_decay
        theta -= lr * update
    return params, state


def lr_at(step, steps_per_epoch, config):
    """Per-step learning rate: linear warmup, then half-cosine to ``final_lr``."""
    if step < 0:
        raise ValueError("step must be nonnegative")
    total = config.total_epochs * steps_per_epoch
    warm = config.warmup_epochs * steps_per_epoch
    if step > total or total == 0:
        return 0.0
    if step < warm:
        return config.warmup_start_lr + (config.base_lr - config.warmup_start_lr) * step / warm
    if total == warm:
        return config.final_lr
    progress = (step - warm) / (total - warm)
    return config.final_lr + (config.base_lr - config.final_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def trainable_names(names, policy):
    policy = parse_policy(policy)
    if policy is FreezePolicy.ALL_TRAINABLE:
        return set(names)
    return {n for n in names
            if (n.startswith("blocks.") and ".msa." in n)
            or n.startswith("heads.") or n.startswith("class_tokens.")}


def apply_freeze_policy(params, policy):
    """Mark parameters trainable/frozen; returns the trainable name set."""
    keep = trainable_names(list(params), policy)
    for name in params:
        params[name].requires_grad = name in keep
    return keep


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def augment(image, rng, config, size=None, *, offset=None, flip=None):
    """Zero-pad by ``crop_pad``, random-crop back to ``size``, maybe flip.

    ``image`` is a normalized (C, H, W) array, so zero padding is the
    normalized-space neutral value. ``offset``/``flip`` force the random
    choices (for tests).
    """
    image = np.asarray(image, dtype=np.float64)
    _, h, w = image.shape
    th, tw = size if size is not None else (h, w)
    if h < th or w < tw:
        raise DataError(f"image {h}x{w} smaller than crop target {th}x{tw}")
    out = image
    if config.random_crop:
        pad = config.crop_pad
        padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad)))
        if offset is None:
            offset = (int(rng.integers(0, h + 2 * pad - th + 1)), int(rng.integers(0, w + 2 * pad - tw + 1)))
        oy, ox = offset
        out = padded[:, oy:oy + th, ox:ox + tw]
    elif (h, w) != (th, tw):
        out = image[:, :th, :tw]
    if flip is None:
        flip = bool(config.hflip and rng.random() < 0.5)
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def sample_rng(seed, sample_id, epoch):
    """Augmentation stream keyed by (seed, sample, epoch), independent of scheduling."""
    return np.random.default_rng([int(seed), zlib.crc32(sample_id.encode("utf-8")), int(epoch)])


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

@dataclass
class Batchable:
    """In-memory training set: images per modality plus integer targets per task."""
    ids: list
    images: dict
    targets: dict
    pseudo_mask: np.ndarray | None = None

    def __len__(self):
        return len(self.ids)


def _read_one(args):
    sid, driver, face, config, base_dir = args
    out = {}
    for modality, size in config.modalities:
        path = driver if modality == DRIVER else face
        if path is None:
            out[modality] = np.zeros((config.channels,) + size)
        else:
            out[modality] = load_model_image(resolve(base_dir, path), size)
    return out


def load_manifest_arrays(records, base_dir, config, threads=1):
    """Decode every record once; face-less samples get the blank (zero) face."""
    if not records:
        raise DataError("empty manifest")
    jobs = [(r.sample_id, r.driver_path, r.face_path, config, base_dir) for r in records]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        decoded = list(pool.map(_read_one, jobs))
    images = {m: np.stack([d[m] for d in decoded]) for m, _ in config.modalities}
    targets = {DIST: np.array([r.distraction for r in records]), EMO: np.array([r.emotion for r in records])}
    pseudo = np.array([r.provenance.value == "PSEUDO" for r in records])
    return Batchable([r.sample_id for r in records], images, targets, pseudo)


@dataclass
class TrainResult:
    params: object
    history: list
    best_epoch: int
    best_blob: bytes | None
    final_blob: bytes | None


def _epoch_metrics(params, config, data, batch_size):
    logits = {name: [] for name, _ in config.tasks}
    with no_grad():
        for lo in range(0, len(data), batch_size):
            batch = {m: x[lo:lo + batch_size] for m, x in data.images.items()}
            out, _ = forward_tokens(batch, params, config)
            for name in logits:
                logits[name].append(out[name].data)
    logits = {k: np.concatenate(v) for k, v in logits.items()}
    return evaluate_arrays(logits, data.targets, config)


def fit(data, params, model_config, train_config, out_dir=None, eval_data=None, prefix=""):
    """Train ``params`` in place on an in-memory dataset.

    Writes ``<prefix>final.ckpt``, ``<prefix>best.ckpt`` and
    ``<prefix>history.csv`` into ``out_dir`` when given.
    """
    tc = train_config
    n = len(data)
    if n == 0:
        raise DataError("empty training set")
    apply_freeze_policy(params, tc.freeze_policy)
    trainable = [k for k in params if params[k].requires_grad]
    steps_per_epoch = math.ceil(n / tc.batch_size)
    state = OptimizerState()
    history, best_acc, best_epoch = [], -1.0, 0
    best_blob = checkpoint.dumps(params, model_config)
    aug_modalities = [DRIVER] if DRIVER in data.images else []
    if tc.three_augment:
        warnings.warn("three_augment is not implemented; ignoring", stacklevel=2)
    head = DIST if not model_config.is_teacher else EMO
    step = 0

    pool = ThreadPoolExecutor(max_workers=tc.threads)
    try:
        for epoch in range(tc.total_epochs):
            order = np.random.default_rng([tc.seed, epoch]).permutation(n)
            lrs = []
            for lo in range(0, n, tc.batch_size):
                idx = order[lo:lo + tc.batch_size]
                batch = {m: x[idx] for m, x in data.images.items()}
                for m in aug_modalities:
                    size = batch[m].shape[-2:]
                    jobs = [(batch[m][j], data.ids[i], epoch, size) for j, i in enumerate(idx)]
                    batch[m] = np.stack(list(pool.map(lambda a: augment(a[0], sample_rng(tc.seed, a[1], a[2]), tc, a[3]), jobs)))
                targets = {k: v[idx] for k, v in data.targets.items()}
                lr = lr_at(step, steps_per_epoch, tc)
                lrs.append(lr)
                params.zero_grad()
                logits, _ = forward_tokens(batch, params, model_config)
                loss = task_loss(logits, targets, model_config)
                if not np.isfinite(loss.item()):
                    raise NumericError(f"non-finite loss at step {step} (lr={lr:.3g})")
                loss.backward()
                grads = {k: (params[k].grad if params[k].grad is not None else np.zeros_like(params[k].data))
                         for k in trainable}
                adamw_step({k: params[k].data for k in trainable}, grads, state, lr, tc)
                step += 1

            rows = [("train", _epoch_metrics(params, model_config, data, tc.batch_size))]
            if eval_data is not None:
                rows.append(("eval", _epoch_metrics(params, model_config, eval_data, tc.batch_size)))
            mean_lr = float(np.mean(lrs))
            for split, rep in rows:
                history.append(_history_row(epoch + 1, split, rep, mean_lr))
            select = rows[-1][1]
            acc = select.accuracy if head == DIST else select.emotion_accuracy
            if acc > best_acc:
                best_acc, best_epoch = acc, epoch + 1
                best_blob = checkpoint.dumps(params, model_config)
            log.info("epoch %d/%d  %s", epoch + 1, tc.total_epochs,
                     "  ".join(f"{s}: dist={r.accuracy_text()} emo={r.emotion_text()} nll={_nll(r):.4f}"
                               for s, r in rows))
    finally:
        pool.shutdown()

    final_blob = checkpoint.dumps(params, model_config)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{prefix}final.ckpt").write_bytes(final_blob)
        (out / f"{prefix}best.ckpt").write_bytes(best_blob)
        write_history(out / f"{prefix}history.csv", history)
    return TrainResult(params, history, best_epoch, best_blob, final_blob)


def _nll(rep):
    return rep.nll if rep.nll is not None else rep.emotion_nll


def _history_row(epoch, split, rep, mean_lr):
    fmt = lambda x: "" if x is None else f"{x:.6f}"
    return {"epoch": epoch, "split": split, "distraction_acc": fmt(rep.accuracy),
            "emotion_acc": fmt(rep.emotion_accuracy), "nll": f"{_nll(rep):.6f}", "mean_lr": f"{mean_lr:.9g}"}


def write_history(path, history):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=HISTORY_HEADER, lineterminator="\n")
    w.writeheader()
    w.writerows(history)
    Path(path).write_bytes(buf.getvalue().encode("utf-8"))


def train_loop(records, base_dir, params, model_config, train_config, out_dir=None, eval_records=None):
    """Student training on a manifest: returns a :class:`TrainResult`."""
    data = load_manifest_arrays(records, base_dir, model_config, train_config.threads)
    eval_data = None
    if eval_records:
        eval_data = load_manifest_arrays(eval_records, base_dir, model_config, train_config.threads)
    return fit(data, params, model_config, train_config, out_dir, eval_data)
