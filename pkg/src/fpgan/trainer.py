"""Adversarial training loop over the frozen projection stack.

One discriminator update (real + fake, both augmented then projected)
followed by one generator update on freshly drawn latents, hinge losses
summed over the discriminator bank, Adam(beta1=0, beta2=0.99), and an
exponential moving average of the generator. The projector and feature
network stay bitwise frozen throughout (verified via fingerprints).
"""

from __future__ import annotations

import copy
import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from . import augment as aug
from .discriminator import (
    DiscriminatorSet,
    LogitSet,
    aggregate_logits,
    build_discriminators,
    build_rgb_discriminator,
    forward_logits,
)
from .feature_net import (
    FeatureNetwork,
    FeatureNetworkSpec,
    extract_pyramid,
    fingerprint,
    load_feature_network,
)
from .generator import Generator, GeneratorConfig, build_generator
from .projector import ProjectionConfig, ProjectionSet, build_projector, project

CHECKPOINT_MAGIC = b"FPGANCK1"
CHECKPOINT_VERSION = 1

TRAIN_MODES = ("projected", "rgb_baseline")


class TrainerError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    """Non-finite loss; a diagnostic dump is written when a run dir exists."""


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class RunConfig:
    learning_rate: float = 2e-4
    batch_size: int = 64
    total_imgs: int = 10_000_000
    snapshot_imgs: int = 200_000
    ema_decay: float = 0.999
    mode: str = "projected"
    active_levels: tuple[int, ...] = (1, 2, 3, 4)

    def validate(self) -> None:
        errs = []
        if self.learning_rate <= 0:
            errs.append(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size <= 0:
            errs.append(f"batch_size must be > 0, got {self.batch_size}")
        if self.total_imgs <= 0:
            errs.append(f"total_imgs must be > 0, got {self.total_imgs}")
        if self.snapshot_imgs <= 0:
            errs.append(f"snapshot_imgs must be > 0, got {self.snapshot_imgs}")
        if not 0.0 <= self.ema_decay <= 1.0:
            errs.append(f"ema_decay must be in [0, 1], got {self.ema_decay}")
        if self.mode not in TRAIN_MODES:
            errs.append(f"mode must be one of {TRAIN_MODES}, got {self.mode!r}")
        if errs:
            raise TrainerError("; ".join(errs))


def d_hinge_loss(real_logits: LogitSet, fake_logits: LogitSet) -> torch.Tensor:
    """Sum over discriminators of mean(relu(1 - real)) + mean(relu(1 + fake))."""
    if set(real_logits) != set(fake_logits):
        raise TrainerError(
            f"mismatched active levels: {sorted(real_logits)} vs {sorted(fake_logits)}"
        )
    if not real_logits:
        raise TrainerError("empty LogitSet")
    total = 0.0
    for level in sorted(real_logits):
        r, f = real_logits[level], fake_logits[level]
        _check_finite(r, f"real logits, level {level}")
        _check_finite(f, f"fake logits, level {level}")
        total = total + F.relu(1.0 - r).mean() + F.relu(1.0 + f).mean()
    return total


def g_loss(fake_logits: LogitSet) -> torch.Tensor:
    """Sum over discriminators of -mean(fake logits)."""
    if not fake_logits:
        raise TrainerError("empty LogitSet")
    total = 0.0
    for level in sorted(fake_logits):
        _check_finite(fake_logits[level], f"fake logits, level {level}")
        total = total - fake_logits[level].mean()
    return total


def _check_finite(t: torch.Tensor, what: str) -> None:
    if t.numel() and not torch.isfinite(t).all():
        raise TrainerError(f"non-finite {what}")


def make_optimizer(params, learning_rate: float) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=learning_rate, betas=(0.0, 0.99), eps=1e-8)


def ema_update(ema: torch.Tensor, weights: torch.Tensor, decay: float) -> torch.Tensor:
    """decay * ema + (1 - decay) * weights, elementwise."""
    if ema.shape != weights.shape:
        raise TrainerError(f"shape mismatch: {tuple(ema.shape)} vs {tuple(weights.shape)}")
    return decay * ema + (1.0 - decay) * weights


def ema_update_module(ema_model: nn.Module, model: nn.Module, decay: float) -> None:
    """Update EMA parameters in place; buffers are copied from the live model."""
    with torch.no_grad():
        for e, w in zip(ema_model.parameters(), model.parameters()):
            e.copy_(ema_update(e, w, decay))
        for e, w in zip(ema_model.buffers(), model.buffers()):
            e.copy_(w)


def signed_logit_fraction(aggregated: torch.Tensor) -> float:
    """Fraction of per-image aggregated logits that are strictly positive."""
    if aggregated.numel() == 0:
        raise TrainerError("signed_logit_fraction needs a non-empty batch")
    return (aggregated > 0).float().mean().item()


def imgs_to_target(fid_history: list[tuple[int, float]]) -> int:
    """Smallest Imgs whose FID is within 5% of the best FID over training."""
    if not fid_history:
        raise TrainerError("empty FID history")
    threshold = 1.05 * min(fid for _, fid in fid_history)
    return min(imgs for imgs, fid in fid_history if fid <= threshold)


class Trainer:
    """Owns model state, optimizers and the deterministic RNG stream."""

    def __init__(
        self,
        generator_cfg: GeneratorConfig,
        run_cfg: RunConfig,
        augment_policy: aug.AugmentPolicy,
        feature_spec: FeatureNetworkSpec | None = None,
        projection_cfg: ProjectionConfig | None = None,
        seed: int = 0,
        run_dir=None,
    ):
        run_cfg.validate()
        generator_cfg.validate()
        augment_policy.validate()
        if run_cfg.mode == "projected" and (
            feature_spec is None or projection_cfg is None
        ):
            raise TrainerError(
                "projected mode requires a feature_spec and a projection_cfg"
            )
        self.generator_cfg = generator_cfg
        self.run_cfg = run_cfg
        self.augment_policy = augment_policy
        self.feature_spec = feature_spec
        self.projection_cfg = projection_cfg
        self.seed = seed
        self.run_dir = run_dir

        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.generator = build_generator(generator_cfg)
            if run_cfg.mode == "projected":
                self.feature_net = load_feature_network(feature_spec)
                self.projector = build_projector(
                    self.feature_net.pyramid_channels, projection_cfg
                )
                resolutions = tuple(
                    generator_cfg.output_resolution // s for s in (4, 8, 16, 32)
                )
                self.discriminators = build_discriminators(
                    self.projector.out_channels, resolutions, run_cfg.active_levels
                )
            else:
                self.feature_net = None
                self.projector = None
                self.discriminators = build_rgb_discriminator(
                    generator_cfg.output_resolution
                )
        self.ema_generator = copy.deepcopy(self.generator)
        self.ema_generator.requires_grad_(False)

        self.opt_g = make_optimizer(
            self.generator.parameters(), run_cfg.learning_rate
        )
        d_params = list(self.discriminators.parameters())
        if self.projector is not None and projection_cfg.trainable:
            # Ablation only: the projector joins the discriminator update.
            d_params += [p for p in self.projector.parameters() if p.requires_grad]
        self.opt_d = make_optimizer(d_params, run_cfg.learning_rate)

        self.rng = torch.Generator().manual_seed(seed)
        self.step = 0
        self.imgs = 0
        self.config_hash = self._config_hash()

    # -- configuration ----------------------------------------------------

    def _config_blob(self) -> dict:
        return {
            "generator": asdict(self.generator_cfg),
            "run": asdict(self.run_cfg),
            "augment": asdict(self.augment_policy),
            "feature": asdict(self.feature_spec) if self.feature_spec else None,
            "projection": asdict(self.projection_cfg) if self.projection_cfg else None,
            "seed": self.seed,
        }

    def _config_hash(self) -> str:
        blob = json.dumps(self._config_blob(), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()

    def frozen_fingerprints(self) -> dict[str, str]:
        out = {}
        if self.feature_net is not None:
            out["feature_net"] = fingerprint(self.feature_net)
        if self.projector is not None:
            out["projector"] = fingerprint(self.projector)
        return out

    # -- forward paths ----------------------------------------------------

    def _discriminate(self, images: torch.Tensor) -> LogitSet:
        x = aug.augment(images, self.augment_policy, self.rng)
        if self.run_cfg.mode == "projected":
            pyramid = extract_pyramid(self.feature_net, x)
            return forward_logits(self.discriminators, project(self.projector, pyramid))
        return forward_logits(self.discriminators, {1: x})

    def sample_images(self, n: int, seed: int, use_ema: bool = True) -> torch.Tensor:
        g = self.ema_generator if use_ema else self.generator
        mode = g.training
        g.eval()
        try:
            with torch.no_grad():
                z = torch.randn(
                    n,
                    self.generator_cfg.latent_dim,
                    generator=torch.Generator().manual_seed(seed),
                )
                return g(z)
        finally:
            g.train(mode)

    # -- the step ---------------------------------------------------------

    def training_step(self, real_batch: torch.Tensor) -> dict:
        r = self.generator_cfg.output_resolution
        if real_batch.shape[1:] != (3, r, r):
            raise TrainerError(
                f"real batch must be (B, 3, {r}, {r}), got {tuple(real_batch.shape)}"
            )
        if not torch.isfinite(real_batch).all():
            raise TrainerError("non-finite real batch")
        if real_batch.numel() and (
            real_batch.min() < -1.0 - 1e-4 or real_batch.max() > 1.0 + 1e-4
        ):
            raise TrainerError("real batch values must lie in [-1, 1]")

        batch = real_batch.shape[0]
        self.generator.train()
        self.discriminators.train()

        # Discriminator update on detached fakes from their own latents.
        with torch.no_grad():
            z = torch.randn(
                batch, self.generator_cfg.latent_dim, generator=self.rng
            )
            fake = self.generator(z)
        if not torch.isfinite(fake).all():
            raise self._diverged("non-finite generated images")
        real_logits = self._discriminate(real_batch)
        fake_logits = self._discriminate(fake)
        self._guard_finite(real_logits, fake_logits)
        d_total = d_hinge_loss(real_logits, fake_logits)
        self.opt_d.zero_grad(set_to_none=True)
        d_total.backward()
        self.opt_d.step()

        # Generator update on fresh latents.
        z = torch.randn(batch, self.generator_cfg.latent_dim, generator=self.rng)
        regenerated = self.generator(z)
        if not torch.isfinite(regenerated).all():
            raise self._diverged("non-finite generated images")
        gen_logits = self._discriminate(regenerated)
        self._guard_finite(gen_logits)
        g_total = g_loss(gen_logits)
        self.opt_g.zero_grad(set_to_none=True)
        g_total.backward()
        self.opt_g.step()
        ema_update_module(self.ema_generator, self.generator, self.run_cfg.ema_decay)

        self.step += 1
        self.imgs += batch
        with torch.no_grad():
            signed = signed_logit_fraction(
                aggregate_logits({k: v.detach() for k, v in real_logits.items()})
            )
        return {
            "step": self.step,
            "imgs": self.imgs,
            "d_loss": d_total.item(),
            "g_loss": g_total.item(),
            "signed_logit_fraction": signed,
        }

    def _guard_finite(self, *logit_sets: LogitSet) -> None:
        for ls in logit_sets:
            for level, t in ls.items():
                if t.numel() and not torch.isfinite(t.detach()).all():
                    raise self._diverged(
                        f"non-finite logits at level {level}", *logit_sets
                    )

    def _diverged(self, reason: str, *logit_sets) -> TrainingDiverged:
        dump = {
            "reason": reason,
            "step": self.step,
            "imgs": self.imgs,
            "logits": [
                {
                    str(k): {
                        "min": float(v.detach().min()) if v.numel() else None,
                        "max": float(v.detach().max()) if v.numel() else None,
                        "finite": bool(torch.isfinite(v.detach()).all()),
                    }
                    for k, v in ls.items()
                }
                for ls in logit_sets
                if ls is not None
            ],
        }
        if self.run_dir is not None:
            import pathlib

            path = pathlib.Path(self.run_dir) / f"divergence_step{self.step}.json"
            path.write_text(json.dumps(dump, indent=2))
            return TrainingDiverged(f"{reason} (diagnostics: {path})")
        return TrainingDiverged(f"{reason} ({json.dumps(dump)})")

    # -- checkpointing ------------------------------------------------------

    def state_payload(self) -> dict:
        return {
            "config": self._config_blob(),
            "config_hash": self.config_hash,
            "step": self.step,
            "imgs": self.imgs,
            "generator": self.generator.state_dict(),
            "ema_generator": self.ema_generator.state_dict(),
            "discriminators": self.discriminators.state_dict(),
            "projector": self.projector.state_dict() if self.projector else None,
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "rng": self.rng.get_state(),
            "fingerprints": self.frozen_fingerprints(),
        }

    def save(self, path) -> None:
        checkpoint_save(self, path)

    @classmethod
    def load(cls, path, run_dir=None) -> "Trainer":
        payload = _read_checkpoint_payload(path)
        cfg = payload["config"]
        trainer = cls(
            generator_cfg=GeneratorConfig(**cfg["generator"]),
            run_cfg=RunConfig(
                **{
                    **cfg["run"],
                    "active_levels": tuple(cfg["run"]["active_levels"]),
                }
            ),
            augment_policy=aug.AugmentPolicy(
                **{**cfg["augment"], "ops": tuple(cfg["augment"]["ops"])}
            ),
            feature_spec=_feature_spec_from(cfg["feature"]),
            projection_cfg=_projection_cfg_from(cfg["projection"]),
            seed=cfg["seed"],
            run_dir=run_dir,
        )
        trainer.generator.load_state_dict(payload["generator"])
        trainer.ema_generator.load_state_dict(payload["ema_generator"])
        trainer.discriminators.load_state_dict(payload["discriminators"])
        if payload["projector"] is not None:
            trainer.projector.load_state_dict(payload["projector"])
        trainer.opt_g.load_state_dict(payload["opt_g"])
        trainer.opt_d.load_state_dict(payload["opt_d"])
        trainer.rng.set_state(payload["rng"])
        trainer.step = payload["step"]
        trainer.imgs = payload["imgs"]
        stored = payload["fingerprints"]
        rebuilt = trainer.frozen_fingerprints()
        for key, digest in stored.items():
            if rebuilt.get(key) != digest:
                raise CheckpointError(
                    f"reconstructed {key} fingerprint differs from checkpoint"
                )
        return trainer


def _feature_spec_from(blob) -> FeatureNetworkSpec | None:
    if blob is None:
        return None
    blob = dict(blob)
    if blob.get("normalization") is not None:
        mean, std = blob["normalization"]
        blob["normalization"] = (tuple(mean), tuple(std))
    return FeatureNetworkSpec(**blob)


def _projection_cfg_from(blob) -> ProjectionConfig | None:
    if blob is None:
        return None
    blob = dict(blob)
    if blob.get("level_widths") is not None:
        blob["level_widths"] = tuple(blob["level_widths"])
    return ProjectionConfig(**blob)


def _canonical(obj):
    # Pickle memoizes by object identity; interning strings makes the byte
    # stream independent of whether equal keys were shared objects, so
    # save -> load -> save round-trips byte-identically.
    if isinstance(obj, str):
        return sys.intern(obj)
    if isinstance(obj, dict):
        return type(obj)((_canonical(k), _canonical(v)) for k, v in obj.items())
    if isinstance(obj, (list, tuple)):
        return type(obj)(_canonical(v) for v in obj)
    return obj


def checkpoint_save(state: Trainer, path) -> None:
    """Versioned, checksummed archive; round-trips bit-exactly."""
    buf = io.BytesIO()
    torch.save(_canonical(state.state_payload()), buf)
    payload = buf.getvalue()
    digest = hashlib.sha256(payload).digest()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(digest)
        f.write(payload)


def checkpoint_load(path, run_dir=None) -> Trainer:
    return Trainer.load(path, run_dir=run_dir)


def _read_checkpoint_payload(path) -> dict:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint archive")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint version {version} unsupported "
                f"(expected {CHECKPOINT_VERSION})"
            )
        digest = f.read(32)
        payload = f.read()
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"checkpoint {path} is corrupt (checksum mismatch)")
    return torch.load(io.BytesIO(payload), weights_only=True)


def append_metric_record(path, record: dict) -> None:
    """Append one structured record (JSON line) to the metric log."""
    with open(path, "a") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def read_metric_records(path) -> list[dict]:
    records = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records
