"""Run configuration: defaults, YAML files, dotted overrides, manifests.

Precedence is CLI override > config file > built-in default. Validation
reports every problem at once rather than stopping at the first.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import yaml

DEFAULTS: dict = {
    "seed": 0,
    "dataset": {
        "path": None,
        "resolution": 256,
        "crop_policy": "center_crop",
        "xflip": False,
    },
    "generator": {
        "latent_dim": 256,
        "output_resolution": 256,
        "base_channels": 128,
    },
    "feature_net": {
        "architecture_id": "efficientnet_lite1",
        "input_resolution": 256,
        "pretrained": False,
        "seed": 0,
        "weights_path": None,
        "weights_sha256": None,
    },
    "projector": {
        "mode": "ccm_csm",
        "init": "kaiming",
        "channel_ratio": 1.0,
        "trainable": False,
        "seed": 0,
        "level_widths": None,
    },
    # spatial_logits covers the alternative reading where discriminators emit
    # 4x4 logit maps; it is documented but unimplemented, and rejected here.
    # A single perceptual discriminator consuming all levels at once is out
    # of scope entirely.
    "discriminator": {"spatial_logits": False},
    "augment": {
        "ops": ["color", "translation", "cutout"],
        "probability": 1.0,
        "brightness": 0.5,
        "saturation": 1.0,
        "contrast": 0.5,
        "translation_ratio": 0.125,
        "cutout_ratio": 0.5,
    },
    "trainer": {
        "learning_rate": 2.0e-4,
        "batch_size": 64,
        "total_imgs": 10_000_000,
        "snapshot_imgs": 200_000,
        "ema_decay": 0.999,
        "mode": "projected",
        "active_levels": [1, 2, 3, 4],
    },
    "eval": {
        "feature_space": "backbone:tiny_debug:123:64",
        "n_generated": 50_000,
        "min_count": 10_000,
        "batch_size": 64,
        "kid_subset_size": 1000,
        "kid_subsets": 100,
        "pr_k": 3,
    },
}


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


def deep_update(base: dict, overlay: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_update(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_override(text: str) -> tuple[list[str], object]:
    """``a.b.c=value`` with the value parsed as YAML (so 1e-4, true, [1,2])."""
    if "=" not in text:
        raise ConfigError([f"override {text!r} is not of the form key.path=value"])
    key, _, value = text.partition("=")
    path = [p for p in key.strip().split(".") if p]
    if not path:
        raise ConfigError([f"override {text!r} has an empty key path"])
    return path, yaml.safe_load(value)


def apply_override(cfg: dict, path: list[str], value) -> None:
    node = cfg
    for part in path[:-1]:
        if part not in node or not isinstance(node[part], dict):
            node[part] = {}
        node = node[part]
    node[path[-1]] = value


def _unknown_keys(cfg: dict, reference: dict, prefix: str = "") -> list[str]:
    unknown = []
    for key, value in cfg.items():
        if key not in reference:
            unknown.append(f"unknown config key {prefix + key!r}")
        elif isinstance(value, dict) and isinstance(reference[key], dict):
            unknown.extend(_unknown_keys(value, reference[key], f"{prefix}{key}."))
    return unknown


@dataclass(frozen=True)
class ResolvedConfig:
    raw: dict

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()

    def generator_cfg(self):
        from .generator import GeneratorConfig

        return GeneratorConfig(**self.raw["generator"])

    def run_cfg(self):
        from .trainer import RunConfig

        section = dict(self.raw["trainer"])
        section["active_levels"] = tuple(section["active_levels"])
        return RunConfig(**section)

    def augment_policy(self):
        from .augment import AugmentPolicy

        section = dict(self.raw["augment"])
        section["ops"] = tuple(section["ops"])
        return AugmentPolicy(**section)

    def feature_spec(self):
        from .feature_net import FeatureNetworkSpec

        return FeatureNetworkSpec(**self.raw["feature_net"])

    def projection_cfg(self):
        from .projector import ProjectionConfig

        section = dict(self.raw["projector"])
        if section.get("level_widths") is not None:
            section["level_widths"] = tuple(section["level_widths"])
        return ProjectionConfig(**section)

    def dataset_source(self):
        from .data import DatasetSource

        section = dict(self.raw["dataset"])
        if section["path"] is None:
            raise ConfigError(["dataset.path is required for this command"])
        return DatasetSource(**section)


def resolve_config(
    config_path=None, overrides: list[str] | None = None
) -> ResolvedConfig:
    """Merge defaults, file, and overrides, then validate everything."""
    cfg = copy.deepcopy(DEFAULTS)
    if config_path is not None:
        text = Path(config_path).read_text()
        file_cfg = yaml.safe_load(text) or {}
        if not isinstance(file_cfg, dict):
            raise ConfigError([f"config file {config_path} must hold a mapping"])
        cfg = deep_update(cfg, file_cfg)
    for text in overrides or []:
        path, value = parse_override(text)
        apply_override(cfg, path, value)
    errors = validate_config(cfg)
    if errors:
        raise ConfigError(errors)
    return ResolvedConfig(raw=cfg)


def validate_config(cfg: dict) -> list[str]:
    """Collect every validation failure; empty list means valid."""
    errors = _unknown_keys(cfg, DEFAULTS)
    resolved = ResolvedConfig(raw=cfg)

    for name, build in (
        ("generator", resolved.generator_cfg),
        ("trainer", resolved.run_cfg),
        ("augment", resolved.augment_policy),
        ("projector", lambda: resolved.projection_cfg().validate()),
    ):
        try:
            obj = build()
            if hasattr(obj, "validate"):
                obj.validate()
        except Exception as e:
            errors.append(f"{name}: {e}")

    mode = cfg.get("trainer", {}).get("mode")
    if mode == "projected":
        try:
            resolved.feature_spec().validate()
        except Exception as e:
            errors.append(f"feature_net: {e}")
        f_res = cfg.get("feature_net", {}).get("input_resolution")
        g_res = cfg.get("generator", {}).get("output_resolution")
        if f_res != g_res:
            errors.append(
                "feature_net.input_resolution must equal "
                f"generator.output_resolution in projected mode ({f_res} != {g_res})"
            )
    if cfg.get("discriminator", {}).get("spatial_logits"):
        errors.append(
            "discriminator.spatial_logits: the 4x4-logit-map reading is "
            "documented but unimplemented; only scalar logits are supported"
        )
    if cfg.get("dataset", {}).get("path") is not None:
        d_res = cfg.get("dataset", {}).get("resolution")
        g_res = cfg.get("generator", {}).get("output_resolution")
        if d_res != g_res:
            errors.append(
                "dataset.resolution must equal generator.output_resolution "
                f"({d_res} != {g_res})"
            )
        try:
            from .data import DatasetSource

            DatasetSource(**cfg["dataset"]).validate()
        except Exception as e:
            errors.append(f"dataset: {e}")
    return errors


def make_trainer(resolved: ResolvedConfig, run_dir=None):
    """Assemble a Trainer from a resolved configuration."""
    from .trainer import Trainer

    run_cfg = resolved.run_cfg()
    projected = run_cfg.mode == "projected"
    return Trainer(
        generator_cfg=resolved.generator_cfg(),
        run_cfg=run_cfg,
        augment_policy=resolved.augment_policy(),
        feature_spec=resolved.feature_spec() if projected else None,
        projection_cfg=resolved.projection_cfg() if projected else None,
        seed=resolved["seed"],
        run_dir=run_dir,
    )


# -- run manifest --------------------------------------------------------------


def write_manifest(run_dir, resolved: ResolvedConfig, dataset_hash: str) -> Path:
    """Record everything needed to reconstruct the run; written before training."""
    from . import __version__

    fn = resolved.raw["feature_net"]
    backbone_checksum = (
        fn["weights_sha256"] if fn.get("pretrained") else f"seed:{fn.get('seed')}"
    )
    manifest = {
        "config": resolved.raw,
        "config_hash": resolved.config_hash,
        "seed": resolved.raw["seed"],
        "dataset_hash": dataset_hash,
        "backbone_checksum": backbone_checksum,
        "version": __version__,
    }
    path = Path(run_dir) / "manifest.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return path


def read_manifest(run_dir) -> dict:
    return json.loads((Path(run_dir) / "manifest.json").read_text())
