"""
Flat run configuration shared by every CLI subcommand.

Config files are UTF-8 ``key = value`` lines with ``#`` comments. Each key
has exactly one command-line flag: ``some_key`` <-> ``--some-key``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig


def _bool(text):
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class Key:
    name: str
    type: type
    help: str

    @property
    def flag(self):
        return "--" + self.name.replace("_", "-")


KEYS = [
    Key("profile", str, "built-in defaults: desk or paper"),
    Key("embed_dim", int, "token width D"),
    Key("depth", int, "encoder layers L"),
    Key("num_heads", int, "attention heads H"),
    Key("patch_size", int, "patch side P"),
    Key("channels", int, "image channels C"),
    Key("driver_height", int, "driver input height"),
    Key("driver_width", int, "driver input width"),
    Key("face_height", int, "face input height"),
    Key("face_width", int, "face input width"),
    Key("mlp_ratio", float, "MLP hidden width / D"),
    Key("ln_eps", float, "layer-norm epsilon"),
    Key("lambda_dist", float, "distraction loss weight"),
    Key("lambda_emo", float, "emotion loss weight"),
    Key("base_lr", float, "peak learning rate"),
    Key("warmup_epochs", int, "linear warmup length"),
    Key("warmup_start_lr", float, "learning rate at step 0"),
    Key("final_lr", float, "learning rate at the last step"),
    Key("total_epochs", int, "training epochs"),
    Key("batch_size", int, "mini-batch size"),
    Key("weight_decay", float, "decoupled weight decay"),
    Key("beta1", float, "AdamW first-moment decay"),
    Key("beta2", float, "AdamW second-moment decay"),
    Key("adam_eps", float, "AdamW denominator epsilon"),
    Key("freeze", str, "trainable set: all or msa-only"),
    Key("seed", int, "seed for init, shuffling and augmentation"),
    Key("random_crop", _bool, "pad-and-crop augmentation on/off"),
    Key("crop_pad", int, "padding before random crop"),
    Key("hflip", _bool, "random horizontal flip on/off"),
    Key("three_augment", _bool, "colour augmentation (not implemented; warns)"),
    Key("threads", int, "worker threads for IO/detection/augmentation"),
]
KEY_BY_NAME = {k.name: k for k in KEYS}

_DESK_TRAIN = dict(base_lr=1e-3, total_epochs=200, batch_size=16, crop_pad=1)

PROFILES = {
    "desk": dict(embed_dim=32, depth=2, num_heads=2, patch_size=4, driver_height=16, driver_width=16,
                 face_height=8, face_width=8, **_DESK_TRAIN),
    "paper": dict(embed_dim=768, depth=12, num_heads=12, patch_size=16, driver_height=224,
                  driver_width=224, face_height=32, face_width=32, base_lr=3e-4, total_epochs=20,
                  batch_size=256),
}

_COMMON = dict(profile="desk", channels=3, mlp_ratio=4.0, ln_eps=1e-6, lambda_dist=1.0, lambda_emo=1.0,
               warmup_epochs=5, warmup_start_lr=1e-6, final_lr=0.0, weight_decay=0.1, beta1=0.9,
               beta2=0.999, adam_eps=1e-8, freeze="all", seed=0, random_crop=True, crop_pad=4,
               hflip=True, three_augment=False, threads=1)


def parse_config_text(text, source="<config>"):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEY_BY_NAME:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = KEY_BY_NAME[key].type(value)
    return values


def resolve_run_config(file_values=None, overrides=None):
    """Merge defaults < profile < config file < flags into one flat dict."""
    file_values = dict(file_values or {})
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    for key in list(file_values) + list(overrides):
        if key not in KEY_BY_NAME:
            raise ConfigError(f"unknown config key {key!r}")
    profile = overrides.get("profile", file_values.get("profile", "desk"))
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    merged = dict(_COMMON)
    merged.update(PROFILES[profile])
    merged.update(file_values)
    merged.update(overrides)
    merged["profile"] = profile
    return merged


def load_config_file(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        from .errors import DataError
        raise DataError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, str(path))


def model_config(run):
    return ModelConfig(
        embed_dim=run["embed_dim"], depth=run["depth"], num_heads=run["num_heads"],
        patch_size=run["patch_size"], channels=run["channels"],
        driver_size=(run["driver_height"], run["driver_width"]),
        face_size=(run["face_height"], run["face_width"]), mlp_ratio=run["mlp_ratio"],
        loss_weights=(run["lambda_dist"], run["lambda_emo"]), ln_eps=run["ln_eps"],
    )


def train_config(run):
    return TrainConfig(
        base_lr=run["base_lr"], warmup_epochs=run["warmup_epochs"], warmup_start_lr=run["warmup_start_lr"],
        final_lr=run["final_lr"], total_epochs=run["total_epochs"], batch_size=run["batch_size"],
        weight_decay=run["weight_decay"], betas=(run["beta1"], run["beta2"]), eps=run["adam_eps"],
        freeze_policy=run["freeze"], seed=run["seed"], random_crop=run["random_crop"],
        crop_pad=run["crop_pad"], hflip=run["hflip"], three_augment=run["three_augment"],
        threads=run["threads"],
    )


def format_config(run):
    """Render a merged config back to file syntax (keys in declaration order)."""
    return "".join(f"{k.name} = {run[k.name]}\n" for k in KEYS)
