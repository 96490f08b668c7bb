"""
ViT-DD: a Vision Transformer over two image modalities with two class tokens.

Token layout of the encoder input (a frozen contract, relied upon by
:mod:`vitdd.attention`)::

    index 0              distraction class token
    index 1              emotion class token
    2 .. 2+N0-1          driver patch tokens, row-major patch order
    2+N0 .. T-1          face patch tokens, row-major patch order

The same code also builds the single-modality emotion teacher: a config with
``driver_size=None`` and ``num_distraction_classes=0`` has one modality
(face) and one class token (emotion).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator, Mapping

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor

DIST, EMO = "dist", "emo"
DRIVER, FACE = "driver", "face"


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 768
    depth: int = 12
    num_heads: int = 12
    patch_size: int = 16
    channels: int = 3
    driver_size: tuple | None = (224, 224)
    face_size: tuple = (32, 32)
    mlp_ratio: float = 4.0
    num_distraction_classes: int = 10
    num_emotion_classes: int = 8
    loss_weights: tuple = (1.0, 1.0)
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.driver_size is not None:
            object.__setattr__(self, "driver_size", tuple(int(v) for v in self.driver_size))
        object.__setattr__(self, "face_size", tuple(int(v) for v in self.face_size))
        object.__setattr__(self, "loss_weights", tuple(float(v) for v in self.loss_weights))
        for name in ("embed_dim", "depth", "num_heads", "patch_size", "channels"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        for modality, size in self.modalities:
            h, w = size
            if h % self.patch_size or w % self.patch_size:
                raise ConfigError(f"{modality} resolution {h}x{w} not divisible by patch size {self.patch_size}")
        if not self.tasks:
            raise ConfigError("config has no classification task")
        if any(w < 0 for w in self.loss_weights):
            raise ConfigError(f"negative loss weight in {self.loss_weights}")

    @classmethod
    def paper(cls):
        return cls()

    @classmethod
    def desk(cls):
        return cls(embed_dim=32, depth=2, num_heads=2, patch_size=4,
                   driver_size=(16, 16), face_size=(8, 8))

    def teacher(self, num_emotions=7):
        """Face-only, emotion-only variant sharing this config's backbone sizes."""
        return replace(self, driver_size=None, num_distraction_classes=0,
                       num_emotion_classes=num_emotions, loss_weights=(0.0, 1.0))

    @property
    def is_teacher(self):
        return self.driver_size is None

    @property
    def head_dim(self):
        return self.embed_dim // self.num_heads

    @property
    def mlp_hidden(self):
        return int(round(self.embed_dim * self.mlp_ratio))

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * self.channels

    @property
    def modalities(self):
        mods = []
        if self.driver_size is not None:
            mods.append((DRIVER, tuple(self.driver_size)))
        mods.append((FACE, tuple(self.face_size)))
        return mods

    @property
    def tasks(self):
        tasks = []
        if self.num_distraction_classes > 0:
            tasks.append((DIST, self.num_distraction_classes))
        if self.num_emotion_classes > 0:
            tasks.append((EMO, self.num_emotion_classes))
        return tasks

    def grid(self, modality):
        h, w = dict(self.modalities)[modality]
        return h // self.patch_size, w // self.patch_size

    def num_patches(self, modality):
        gh, gw = self.grid(modality)
        return gh * gw

    @property
    def seq_len(self):
        return len(self.tasks) + sum(self.num_patches(m) for m, _ in self.modalities)

    def token_slices(self):
        """Map each class token / modality to its index range in the sequence."""
        out, pos = {}, 0
        for name, _ in self.tasks:
            out[name] = slice(pos, pos + 1)
            pos += 1
        for modality, _ in self.modalities:
            n = self.num_patches(modality)
            out[modality] = slice(pos, pos + n)
            pos += n
        return out

    def to_record(self):
        """``key=value`` lines, fixed field order, used inside checkpoints."""
        lines = []
        for key, value in asdict(self).items():
            if value is None:
                text = "none"
            elif key in ("driver_size", "face_size"):
                text = "x".join(str(int(v)) for v in value)
            elif isinstance(value, tuple):
                text = ",".join(repr(float(v)) for v in value)
            elif isinstance(value, float):
                text = repr(value)
            else:
                text = str(value)
            lines.append(f"{key}={text}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_record(cls, text):
        kwargs = {}
        known = {f for f in cls.__dataclass_fields__}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition("=")
            if key not in known:
                raise ConfigError(f"unknown model config key {key!r}")
            kwargs[key] = _parse_field(key, value.strip())
        return cls(**kwargs)


def _parse_field(key, value):
    if key in ("driver_size", "face_size"):
        if value == "none":
            return None
        h, w = value.split("x")
        return (int(h), int(w))
    if key == "loss_weights":
        return tuple(float(v) for v in value.split(","))
    if key in ("mlp_ratio", "ln_eps"):
        return float(value)
    return int(value)


class ViTDDParams(Mapping):
    """Named parameter registry. Iteration order is lexicographic by name."""

    def __init__(self, tensors=None):
        self._t = {}
        for name, t in (tensors or {}).items():
            self[name] = t

    def __setitem__(self, name, value):
        self._t[name] = value if isinstance(value, Tensor) else Tensor(value, requires_grad=True)
        self._t[name].name = name

    def __getitem__(self, name):
        return self._t[name]

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._t))

    def __len__(self):
        return len(self._t)

    def scope(self, prefix):
        """Sub-view with ``prefix.`` stripped from the names."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self._t.items() if k.startswith(p)}

    def zero_grad(self):
        for t in self._t.values():
            t.grad = None

    def arrays(self):
        return {k: self._t[k].data for k in self}

    def copy(self):
        out = ViTDDParams()
        for k in self:
            src = self._t[k]
            out[k] = Tensor(src.data, requires_grad=src.requires_grad)
        return out

    def num_scalars(self):
        return sum(t.size for t in self._t.values())

    def validate(self, config):
        expected = param_shapes(config)
        if set(expected) != set(self._t):
            missing = sorted(set(expected) - set(self._t))
            extra = sorted(set(self._t) - set(expected))
            raise ConfigError(f"parameter names do not match config: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if self._t[name].shape != shape:
                raise DimensionError(f"{name}: shape {self._t[name].shape}, config expects {shape}")
            self._t[name].validate()
        return self


def param_shapes(config):
    d, hid, pd = config.embed_dim, config.mlp_hidden, config.patch_dim
    shapes = {}
    for modality, _ in config.modalities:
        shapes[f"patch_embed.{modality}.weight"] = (pd, d)
        shapes[f"patch_embed.{modality}.bias"] = (d,)
        shapes[f"pos_embed.{modality}"] = (config.num_patches(modality), d)
    for task, k in config.tasks:
        shapes[f"class_tokens.{task}"] = (d,)
        shapes[f"heads.{task}.weight"] = (d, k)
        shapes[f"heads.{task}.bias"] = (k,)
    for layer in range(config.depth):
        b = f"blocks.{layer}"
        shapes.update({
            f"{b}.norm1.gamma": (d,), f"{b}.norm1.beta": (d,),
            f"{b}.msa.wqkv": (d, 3 * d), f"{b}.msa.bqkv": (3 * d,),
            f"{b}.msa.wproj": (d, d), f"{b}.msa.bproj": (d,),
            f"{b}.norm2.gamma": (d,), f"{b}.norm2.beta": (d,),
            f"{b}.mlp.fc1.weight": (d, hid), f"{b}.mlp.fc1.bias": (hid,),
            f"{b}.mlp.fc2.weight": (hid, d), f"{b}.mlp.fc2.bias": (d,),
        })
    shapes["final_norm.gamma"] = (d,)
    shapes["final_norm.beta"] = (d,)
    return dict(sorted(shapes.items()))


def trunc_normal(rng, shape, std=0.02, bound=2.0):
    """Normal(0, std) truncated to +-bound*std by resampling."""
    x = rng.standard_normal(shape)
    bad = np.abs(x) > bound
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > bound
    return x * std


def init_params(config, seed=0):
    rng = np.random.default_rng(seed)
    params = ViTDDParams()
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            value = np.ones(shape)
        elif leaf in ("beta", "bias", "bqkv", "bproj"):
            value = np.zeros(shape)
        else:
            value = trunc_normal(rng, shape)
        params[name] = Tensor(value, requires_grad=True)
    return params


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def _batched(image, config, modality):
    image = T.as_tensor(image)
    squeeze = image.ndim == 3
    if squeeze:
        image = T.reshape(image, (1,) + image.shape)
    if image.ndim != 4:
        raise DimensionError(f"{modality} image must be (C,H,W) or (B,C,H,W), got {image.shape}")
    expected = (config.channels,) + dict(config.modalities)[modality]
    if image.shape[1:] != expected:
        raise DimensionError(f"{modality} image shape {image.shape[1:]} does not match config {expected}")
    return image, squeeze


def patchify(image, config, modality):
    """Cut an image into P x P patches, one flattened (C, P, P) patch per row.

    Patches are ordered left-to-right, then top-to-bottom. Accepts (C, H, W)
    or a batch (B, C, H, W); returns (N, P*P*C) or (B, N, P*P*C).
    """
    if modality not in dict(config.modalities):
        raise ConfigError(f"modality {modality!r} not in this config")
    x, squeeze = _batched(image, config, modality)
    b, c, h, w = x.shape
    p = config.patch_size
    gh, gw = h // p, w // p
    x = T.reshape(x, (b, c, gh, p, gw, p))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    x = T.reshape(x, (b, gh * gw, c * p * p))
    return T.reshape(x, x.shape[1:]) if squeeze else x


def unpatchify(patches, config, modality):
    """Exact inverse of :func:`patchify` on plain arrays."""
    patches = np.asarray(patches)
    squeeze = patches.ndim == 2
    if squeeze:
        patches = patches[None]
    h, w = dict(config.modalities)[modality]
    p, c = config.patch_size, config.channels
    b = patches.shape[0]
    x = patches.reshape(b, h // p, w // p, c, p, p).transpose(0, 3, 1, 4, 2, 5).reshape(b, c, h, w)
    return x[0] if squeeze else x


def embed(image, params, config, modality):
    """Project patches to D-dim tokens and add the modality's position table."""
    tokens = T.linear(patchify(image, config, modality),
                      params[f"patch_embed.{modality}.weight"],
                      params[f"patch_embed.{modality}.bias"])
    return T.embedding_add(tokens, params[f"pos_embed.{modality}"])


def assemble_sequence(driver_emb, face_emb, params, tasks=(DIST, EMO)):
    """``[t_dist; t_emo; driver tokens; face tokens]`` along the token axis.

    ``driver_emb`` may be None (face-only teacher). Inputs are (N, D) or
    (B, N, D); class tokens are broadcast over the batch.
    """
    parts = [e for e in (driver_emb, face_emb) if e is not None]
    d = params[f"class_tokens.{tasks[0]}"].shape[0]
    for e in parts:
        if e.shape[-1] != d:
            raise DimensionError(f"embedding width {e.shape[-1]} != class token width {d}")
    lead = parts[0].shape[:-2]
    tokens = [T.broadcast_to(params[f"class_tokens.{t}"], lead + (1, d)) for t in tasks]
    return T.concat(tokens + parts, axis=-2)


def msa(z, block, config, capture=None):
    """Multi-head self-attention over a (T, D) or (B, T, D) sequence.

    ``block`` holds ``msa.wqkv`` (D x 3D, columns [Q | K | V], head h owning
    columns h*Dh:(h+1)*Dh inside each third), ``msa.bqkv``, ``msa.wproj`` and
    ``msa.bproj``. When ``capture`` is a list, the attention probabilities
    (B, H, T, T) are appended to it.
    """
    d, h = config.embed_dim, config.num_heads
    dh = config.head_dim
    if dh * h != d:
        raise ConfigError(f"head_dim {dh} x heads {h} != embed_dim {d}")
    squeeze = z.ndim == 2
    if squeeze:
        z = T.reshape(z, (1,) + z.shape)
    b, t, _ = z.shape
    if t < 1:
        raise DimensionError("msa needs at least one token")
    qkv = T.linear(z, block["msa.wqkv"], block["msa.bqkv"])
    qkv = T.transpose(T.reshape(qkv, (b, t, 3, h, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = T.scale(T.matmul(q, T.swap_last(k)), 1.0 / math.sqrt(dh))
    attn = T.softmax(scores, axis=-1)
    if capture is not None:
        capture.append(attn.data.copy())
    heads = T.matmul(attn, v)
    merged = T.reshape(T.transpose(heads, (0, 2, 1, 3)), (b, t, d))
    out = T.linear(merged, block["msa.wproj"], block["msa.bproj"])
    return T.reshape(out, (t, d)) if squeeze else out


def mlp(z, block):
    hidden = T.gelu(T.linear(z, block["mlp.fc1.weight"], block["mlp.fc1.bias"]))
    return T.linear(hidden, block["mlp.fc2.weight"], block["mlp.fc2.bias"])


def encoder_block(z, block, config, capture=None):
    """Pre-norm residual block: ``z' = MSA(LN z) + z``; ``out = MLP(LN z') + z'``."""
    eps = config.ln_eps
    z1 = T.add(msa(T.layer_norm(z, block["norm1.gamma"], block["norm1.beta"], eps), block, config, capture), z)
    return T.add(mlp(T.layer_norm(z1, block["norm2.gamma"], block["norm2.beta"], eps), block), z1)


def forward_tokens(images, params, config, capture=False):
    """Run the encoder on a dict ``modality -> image``.

    Returns ``(logits, attn)``: logits maps task name to (K,) or (B, K)
    tensors; attn is a list with one (B, H, T, T) array per layer, or None
    when capture is off.
    """
    tasks = [name for name, _ in config.tasks]
    embs = {}
    squeeze = None
    for modality, _ in config.modalities:
        if modality not in images:
            raise DimensionError(f"missing {modality} image")
        x, sq = _batched(images[modality], config, modality)
        squeeze = sq if squeeze is None else squeeze and sq
        embs[modality] = embed(x, params, config, modality)
    z = assemble_sequence(embs.get(DRIVER), embs[FACE], params, tuple(tasks))
    records = [] if capture else None
    for layer in range(config.depth):
        z = encoder_block(z, params.scope(f"blocks.{layer}"), config, records)
    cls = T.layer_norm(z[:, :len(tasks), :], params["final_norm.gamma"], params["final_norm.beta"], config.ln_eps)
    logits = {}
    for i, task in enumerate(tasks):
        out = T.linear(cls[:, i, :], params[f"heads.{task}.weight"], params[f"heads.{task}.bias"])
        logits[task] = T.reshape(out, out.shape[1:]) if squeeze else out
    if records is not None and squeeze:
        records = [a[0] for a in records]
    return logits, records


def forward(driver, face, params, config, capture=False):
    """ViT-DD forward pass: ``(dist_logits, emo_logits, attention)``."""
    logits, attn = forward_tokens({DRIVER: driver, FACE: face}, params, config, capture)
    return logits[DIST], logits[EMO], attn


def multitask_loss(dist_logits, emo_logits, dist_target, emo_target, loss_weights=(1.0, 1.0)):
    """Weighted sum ``w_dist * CE(dist) + w_emo * CE(emo)``."""
    w_dist, w_emo = (float(w) for w in loss_weights)
    if w_dist < 0 or w_emo < 0:
        raise ConfigError(f"loss weights must be nonnegative, got {loss_weights}")
    return T.add(T.scale(T.cross_entropy(dist_logits, dist_target), w_dist),
                 T.scale(T.cross_entropy(emo_logits, emo_target), w_emo))


def task_loss(logits, targets, config):
    """Loss for whichever tasks ``config`` has (both for ViT-DD, emotion for the teacher)."""
    if config.is_teacher:
        return T.cross_entropy(logits[EMO], targets[EMO])
    return multitask_loss(logits[DIST], logits[EMO], targets[DIST], targets[EMO], config.loss_weights)
