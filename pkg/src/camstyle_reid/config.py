"""Flat ``key = value`` run configuration.

Every key has a default and a one-line description; unknown keys are
rejected. Defaults follow the full-scale setting (256x128 images, 50k GAN
iterations); ``configs/desk.conf`` holds the small synthetic setting.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any

from .errors import ConfigError
from .gan import GanHyperParams
from .reid import TrainHyperParams
from .softlabel import SoftLabelParams

# key: (default, description)
DEFAULTS: dict[str, tuple[Any, str]] = {
    "seed": (0, "global random seed"),
    "out": ("run", "run directory"),
    "deterministic": (True, "enable torch deterministic algorithms"),
    "image_height": (256, "image height after loading"),
    "image_width": (128, "image width after loading"),
    # data
    "source_dir": ("", "Market-style source dataset root; empty = <out>/data/source"),
    "target_dir": ("", "Market-style target dataset root; empty = <out>/data/target"),
    "source_cameras": (0, "source camera count; 0 = infer from the data"),
    "target_cameras": (0, "target camera count; 0 = infer from the data"),
    "strict_filenames": (False, "fail on unparseable filenames instead of skipping"),
    "synth_source_identities": (16, "synthetic source identities"),
    "synth_source_samples": (12, "synthetic images per source identity"),
    "synth_target_train_identities": (64, "synthetic unlabeled target identities"),
    "synth_target_train_samples": (8, "synthetic images per target training identity"),
    "synth_target_test_identities": (48, "synthetic target test identities"),
    "synth_target_test_samples": (6, "synthetic images per target test identity"),
    # camera-style GAN
    "gan_lambda_c": (1.0, "camera classification loss weight"),
    "gan_lambda_rec": (10.0, "cycle reconstruction loss weight"),
    "gan_lambda_gp": (10.0, "gradient penalty weight"),
    "gan_lr": (1e-4, "Adam learning rate for G and D"),
    "gan_beta1": (0.5, "Adam beta1"),
    "gan_beta2": (0.999, "Adam beta2"),
    "gan_batch_size": (16, "GAN batch size (half source, half target)"),
    "gan_critic_steps": (5, "critic updates per generator update"),
    "gan_total_iters": (50000, "critic iterations"),
    "gan_decay_fraction": (0.5, "fraction of training with linear lr decay"),
    "gan_g_channels": (64, "generator base width"),
    "gan_g_downsamplings": (2, "generator down/up-sampling stages"),
    "gan_g_res_blocks": (6, "generator residual blocks"),
    "gan_d_channels": (64, "critic base width"),
    "gan_d_layers": (6, "critic stride-2 layers"),
    "gan_checkpoint_every": (0, "periodic checkpoint interval, 0 = off"),
    "gan_checkpoint": ("", "generator checkpoint for translate; empty = <out>/gan/generator.pt"),
    # re-ID
    "variant": ("translated", "train-reid input: na (raw source) or translated"),
    "model": ("translated", "model used by extract/eval: na, translated or finetuned"),
    "reid_epochs": (20, "baseline training epochs"),
    "reid_batch_size": (32, "re-ID batch size"),
    "reid_lr": (1e-3, "baseline Adam learning rate"),
    "reid_weight_decay": (5e-4, "Adam weight decay"),
    "reid_flip": (True, "random horizontal flip augmentation"),
    "reid_backbone": ("small", "backbone: small or resnet50"),
    "reid_channels": (32, "small backbone base width"),
    "reid_pooling": ("lmp", "descriptor pooling: avg or lmp"),
    "reid_parts": (4, "LMP horizontal bands"),
    "normalize": (True, "L2-normalize embeddings"),
    # soft labels / fine-tuning
    "knn_k": (16, "neighbors per target image"),
    "knn_lambda": (10.0, "distance temperature of neighbor selection"),
    "softlabel_model": ("translated", "model whose features build soft labels"),
    "finetune_epochs": (10, "fine-tuning epochs"),
    "finetune_lr": (2e-4, "fine-tuning Adam learning rate"),
    "finetune_alpha": (0.0, "weight of the joint supervised term on translated source"),
    "finetune_refresh_every": (0, "recompute soft labels every N epochs, 0 = never"),
    # evaluation
    "exclude_same_camera": (True, "drop same-id same-camera gallery items"),
}

RESOLVED_NAME = "config.{command}.conf"


def _coerce(key: str, raw: Any) -> Any:
    default = DEFAULTS[key][0]
    if not isinstance(raw, str):
        value = raw
    elif isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            value = True
        elif low in ("0", "false", "no", "off"):
            value = False
        else:
            raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    elif isinstance(default, int):
        try:
            value = int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    elif isinstance(default, float):
        try:
            value = float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    else:
        value = raw.strip()
    return value


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, Any]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key: {key}")
        out[key] = _coerce(key, value)
    return out


def load_config(path=None, overrides: dict[str, Any] | None = None) -> dict[str, Any]:
    cfg = {k: v for k, (v, _) in DEFAULTS.items()}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        cfg.update(parse_config_text(p.read_text(encoding="utf-8"), str(p)))
    for key, value in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key: {key}")
        cfg[key] = _coerce(key, value)
    return cfg


def format_config(cfg: dict[str, Any]) -> str:
    lines = []
    for key, (_, doc) in DEFAULTS.items():
        lines.append(f"# {doc}")
        lines.append(f"{key} = {str(cfg[key]).lower() if isinstance(cfg[key], bool) else cfg[key]}")
    return "\n".join(lines) + "\n"


def gan_params(cfg) -> GanHyperParams:
    return GanHyperParams(
        lambda_c=cfg["gan_lambda_c"], lambda_rec=cfg["gan_lambda_rec"], lambda_gp=cfg["gan_lambda_gp"],
        lr=cfg["gan_lr"], adam_beta1=cfg["gan_beta1"], adam_beta2=cfg["gan_beta2"],
        batch_size=cfg["gan_batch_size"], critic_steps_per_gen=cfg["gan_critic_steps"],
        total_iters=cfg["gan_total_iters"], decay_fraction=cfg["gan_decay_fraction"],
        g_channels=cfg["gan_g_channels"], g_downsamplings=cfg["gan_g_downsamplings"],
        g_res_blocks=cfg["gan_g_res_blocks"], d_channels=cfg["gan_d_channels"], d_layers=cfg["gan_d_layers"],
        checkpoint_every=cfg["gan_checkpoint_every"],
    )


def reid_params(cfg) -> TrainHyperParams:
    return TrainHyperParams(
        epochs=cfg["reid_epochs"], batch_size=cfg["reid_batch_size"], lr=cfg["reid_lr"],
        weight_decay=cfg["reid_weight_decay"], flip=cfg["reid_flip"], backbone=cfg["reid_backbone"],
        channels=cfg["reid_channels"], pooling=cfg["reid_pooling"], parts=cfg["reid_parts"],
        finetune_epochs=cfg["finetune_epochs"], finetune_lr=cfg["finetune_lr"],
        finetune_alpha=cfg["finetune_alpha"], refresh_every=cfg["finetune_refresh_every"],
    )


def soft_params(cfg) -> SoftLabelParams:
    return SoftLabelParams(K=cfg["knn_k"], lambda_temp=cfg["knn_lambda"])

