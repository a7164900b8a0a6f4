"""Optimization loop: TTUR with warmup, adversarial delay, dropout, EMA.

One trainer owns all mutable model state. Every random decision funnels
through a single numpy generator whose state rides along in checkpoints,
so a save/load round trip resumes bit-for-bit.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

from .backbone import (
    BackboneHandle,
    FeatureProcessor,
    extract_cls_grid,
    extract_subcrop_tokens,
    toy_backbone,
)
from .config import RunConfig
from .data import (
    PairedSample,
    TokenVocabulary,
    UnifiedBatchSampler,
    sample_conditioning_drops,
    sample_training_pair,
)
from .discriminator import (
    MultiScaleDiscriminator,
    feature_matching_loss,
    hinge_d_loss,
    hinge_g_loss,
    r1_penalty,
)
from .errors import CheckpointError, ConfigError, NumericError
from .generator import Generator, count_trainable
from .images import model_unit_tensor
from .losses import LossBundle, ToyPerceptualExtractor, edge_loss, l1_64, perceptual_loss
from .losses import dab_loss_signed, total_generator_loss

CHECKPOINT_VERSION = 1


def build_backbone(cfg: RunConfig) -> BackboneHandle:
    if cfg.backbone.kind == "toy":
        return toy_backbone(
            cfg.backbone.seed,
            token_dim=cfg.backbone.token_dim,
            native_side=cfg.backbone.native_side,
            patch=cfg.backbone.patch,
        )
    raise ConfigError(
        "backbone.kind 'pretrained' needs an external pathology ViT adapter; "
        "none is bundled. Use kind 'toy' or plug a BackboneHandle in directly."
    )


def build_perceptual(cfg: RunConfig) -> ToyPerceptualExtractor:
    return ToyPerceptualExtractor(seed=cfg.loss.percept_seed, widths=tuple(cfg.loss.percept_widths))


def warmup_factor(step: int, warmup_steps: int) -> float:
    if warmup_steps <= 0:
        return 1.0
    return min(step / warmup_steps, 1.0)


def _select_fm_layers(features: list[list[torch.Tensor]], layers: list[int] | None):
    """Restrict feature matching to the configured layer indices (None = all)."""
    if layers is None:
        return features
    return [[scale_feats[i] for i in layers] for scale_feats in features]


class EmaShadow:
    """Exponential moving average over named parameter tensors."""

    def __init__(self, modules: dict[str, torch.nn.Module], decay: float):
        self.decay = decay
        self.shadow: "OrderedDict[str, torch.Tensor]" = OrderedDict()
        for prefix, module in modules.items():
            for name, p in module.named_parameters():
                self.shadow[f"{prefix}.{name}"] = p.detach().clone()

    @torch.no_grad()
    def update(self, modules: dict[str, torch.nn.Module]) -> None:
        for prefix, module in modules.items():
            for name, p in module.named_parameters():
                key = f"{prefix}.{name}"
                self.shadow[key].mul_(self.decay).add_(p.detach(), alpha=1.0 - self.decay)

    @torch.no_grad()
    def copy_into(self, modules: dict[str, torch.nn.Module]) -> None:
        for prefix, module in modules.items():
            for name, p in module.named_parameters():
                p.copy_(self.shadow[f"{prefix}.{name}"])

    def state_dict(self):
        return OrderedDict((k, v.clone()) for k, v in self.shadow.items())

    def load_state_dict(self, state):
        if set(state) != set(self.shadow):
            raise CheckpointError("EMA shadow keys do not match the model")
        for k, v in state.items():
            self.shadow[k] = v.clone()


class _BoundedCache:
    def __init__(self, max_entries: int):
        self.max_entries = max_entries
        self._store: "OrderedDict" = OrderedDict()

    def get(self, key):
        return self._store.get(key)

    def put(self, key, value):
        if self.max_entries <= 0:
            return
        if key in self._store:
            self._store.move_to_end(key)
            return
        self._store[key] = value
        while len(self._store) > self.max_entries:
            self._store.popitem(last=False)

    # dict-style access used by sample_training_pair's image cache
    def __contains__(self, key):
        return key in self._store

    def __getitem__(self, key):
        return self._store[key]

    def __setitem__(self, key, value):
        self.put(key, value)


class Trainer:
    def __init__(
        self,
        config: RunConfig,
        samples: list[PairedSample],
        workdir: str | Path | None = None,
        backbone: BackboneHandle | None = None,
        perceptual=None,
    ):
        self.config = config
        self.workdir = Path(workdir) if workdir is not None else None
        if self.workdir is not None:
            self.workdir.mkdir(parents=True, exist_ok=True)

        self.vocab = TokenVocabulary(list(config.generator.classes))
        for s in samples:
            self.vocab.index_of_sample(s)  # fail fast on unknown tokens
        self.sampler = UnifiedBatchSampler.from_samples(samples, config.training.stain_balance)

        self.backbone = backbone if backbone is not None else build_backbone(config)
        self.perceptual = perceptual if perceptual is not None else build_perceptual(config)
        self.stain_matrix = config.stain_matrix()

        gen_cfg = config.generator_config()
        torch.manual_seed(config.seed)
        self.generator = Generator(gen_cfg)
        grid_side = 4 if config.backbone.spatial_mode == "cls_grid" else 32
        self.processor = FeatureProcessor(
            token_dim=self.backbone.token_dim,
            channels=config.processor.channels,
            scales=gen_cfg.cond_scales,
            resblocks=config.processor.resblocks,
            grid_side=grid_side,
        )
        self.discriminator = MultiScaleDiscriminator(
            channels=tuple(config.disc.channels), scales=config.disc.scales
        )

        tr = config.training
        self.opt_g = torch.optim.Adam(
            list(self.generator.parameters()) + list(self.processor.parameters()),
            lr=tr.g_lr,
            betas=(tr.beta1, tr.beta2),
        )
        self.opt_d = torch.optim.Adam(
            self.discriminator.parameters(), lr=tr.d_lr, betas=(tr.beta1, tr.beta2)
        )
        self.ema = EmaShadow(self._g_modules(), tr.ema_decay)
        self.rng = np.random.default_rng(config.seed)
        self.step = 0
        self.weights = config.loss_weights()
        self._token_cache = _BoundedCache(tr.token_cache_entries)
        self._image_cache = _BoundedCache(tr.image_cache_entries)
        self._loss_log_path = self.workdir / "loss_log.jsonl" if self.workdir else None

    # ---- plumbing ----------------------------------------------------------

    def _g_modules(self) -> dict[str, torch.nn.Module]:
        return {"generator": self.generator, "processor": self.processor}

    def parameter_counts(self) -> dict[str, int]:
        return {
            "generator": count_trainable(self.generator),
            "processor": count_trainable(self.processor),
            "generator_side": count_trainable(self.generator) + count_trainable(self.processor),
            "discriminator": count_trainable(self.discriminator),
        }

    def _set_lr(self, optimizer: torch.optim.Optimizer, nominal: float) -> float:
        lr = nominal * warmup_factor(self.step, self.config.training.warmup_steps)
        for group in optimizer.param_groups:
            group["lr"] = lr
        return lr

    def _tokens_for(self, sample: PairedSample, hne_signed: torch.Tensor, meta: dict) -> torch.Tensor:
        key = (sample.source_id, meta["y0"], meta["x0"], meta["flip_h"], meta["flip_v"])
        cached = self._token_cache.get(key)
        if cached is not None:
            return cached
        unit = model_unit_tensor(hne_signed)
        if self.config.backbone.spatial_mode == "cls_grid":
            grid = extract_cls_grid(unit, self.backbone)
        else:
            grid = extract_subcrop_tokens(unit, self.backbone)
        self._token_cache.put(key, grid)
        return grid

    def next_batch(self):
        tr = self.config.training
        picks = self.sampler.draw_batch(self.rng, tr.batch_size)
        hnes, ihcs, tokens, grids = [], [], [], []
        for sample in picks:
            hne, ihc, token, meta = sample_training_pair(
                sample, tr.crop, self.rng, self.vocab, cache=self._image_cache
            )
            hnes.append(hne)
            ihcs.append(ihc)
            tokens.append(token)
            grids.append(self._tokens_for(sample, hne, meta))
        return (
            torch.stack(hnes),
            torch.stack(ihcs),
            torch.tensor(tokens, dtype=torch.long),
            torch.stack(grids),
        )

    # ---- the step ----------------------------------------------------------

    def training_step(self, batch=None) -> LossBundle:
        """One discriminator update (once past the delay) then one generator
        update, followed by the EMA update and the step increment."""
        cfg = self.config
        tr = cfg.training
        if batch is None:
            batch = self.next_batch()
        hne, ihc, tokens, grids = batch

        drop_class, drop_spatial = sample_conditioning_drops(
            self.rng, tr.drop_class_rate, tr.drop_spatial_rate, tr.drop_both_rate
        )
        drop_class = drop_class or tr.ablate_class
        drop_spatial = drop_spatial or tr.ablate_spatial

        adversarial_on = self.step >= self.weights.adv_start
        extras: dict[str, float] = {}

        if adversarial_on:
            self._set_lr(self.opt_d, tr.d_lr)
            with torch.no_grad():
                cond = None if drop_spatial else self.processor(grids)
                fake = self.generator(hne, cond, tokens, drop_spatial, drop_class)
            real_out = self.discriminator(ihc)
            fake_out = self.discriminator(fake)
            d_hinge = hinge_d_loss(real_out.logits, fake_out.logits)
            d_r1 = r1_penalty(self.discriminator, ihc, cfg.disc.r1_gamma)
            d_total = d_hinge + d_r1
            if not torch.isfinite(d_total.detach()):
                raise NumericError("discriminator loss is non-finite")
            self.opt_d.zero_grad(set_to_none=True)
            d_total.backward()
            self.opt_d.step()
            extras["d_hinge"] = float(d_hinge.detach())
            extras["d_r1"] = float(d_r1.detach())

        self._set_lr(self.opt_g, tr.g_lr)
        cond = None if drop_spatial else self.processor(grids)
        fake = self.generator(hne, cond, tokens, drop_spatial, drop_class)

        components: dict[str, torch.Tensor | None] = {
            "percept": perceptual_loss(
                fake,
                ihc,
                self.perceptual,
                sizes=tuple(cfg.loss.percept_sizes),
                size_weights=tuple(cfg.loss.percept_size_weights),
            ),
            "l1": l1_64(fake, ihc, size=cfg.loss.l1_size),
            "edge": edge_loss(fake, hne, scales=tuple(cfg.loss.edge_scales)),
            "dab": dab_loss_signed(
                fake,
                ihc,
                self.stain_matrix,
                eps=cfg.stain.od_eps,
                top_fraction=cfg.stain.top_fraction,
            ),
            "adv": None,
            "fm": None,
        }
        if adversarial_on:
            for p in self.discriminator.parameters():
                p.requires_grad_(False)
            fake_out = self.discriminator(fake)
            with torch.no_grad():
                real_out = self.discriminator(ihc)
            components["adv"] = hinge_g_loss(fake_out.logits)
            components["fm"] = feature_matching_loss(
                _select_fm_layers(fake_out.features, cfg.disc.fm_layers),
                _select_fm_layers(real_out.features, cfg.disc.fm_layers),
            )
            for p in self.discriminator.parameters():
                p.requires_grad_(True)

        bundle = total_generator_loss(components, self.weights, self.step)
        bundle.extras = extras
        self.opt_g.zero_grad(set_to_none=True)
        bundle.total.backward()
        self.opt_g.step()
        self.ema.update(self._g_modules())
        self.step += 1

        if self._loss_log_path is not None and (self.step - 1) % tr.log_every == 0:
            with open(self._loss_log_path, "a") as fh:
                fh.write(json.dumps(bundle.to_record()) + "\n")
        return bundle

    def train(self, steps: int, checkpoint_path: str | Path | None = None) -> None:
        tr = self.config.training
        for _ in range(steps):
            self.training_step()
            if (
                checkpoint_path is not None
                and tr.checkpoint_every > 0
                and self.step % tr.checkpoint_every == 0
            ):
                self.save_checkpoint(checkpoint_path)
        if checkpoint_path is not None:
            self.save_checkpoint(checkpoint_path)

    # ---- inference weights ---------------------------------------------------

    def ema_modules(self) -> tuple[Generator, FeatureProcessor]:
        """Fresh generator/processor pair carrying the EMA weights."""
        gen = Generator(self.generator.cfg)
        gen.load_state_dict(self.generator.state_dict())
        proc = FeatureProcessor(
            token_dim=self.processor.token_dim,
            channels=self.processor.channels,
            scales=self.processor.scales,
            resblocks=len(self.processor.refine),
            grid_side=self.processor.grid_side,
        )
        proc.load_state_dict(self.processor.state_dict())
        self.ema.copy_into({"generator": gen, "processor": proc})
        gen.eval()
        proc.eval()
        return gen, proc

    # ---- persistence ---------------------------------------------------------

    def save_checkpoint(self, path: str | Path) -> None:
        payload = {
            "format_version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "step": self.step,
            "vocab": self.vocab.names,
            "generator": self.generator.state_dict(),
            "processor": self.processor.state_dict(),
            "discriminator": self.discriminator.state_dict(),
            "ema": self.ema.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "rng": self.rng.bit_generator.state,
        }
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(payload, tmp)
        tmp.replace(path)

    def load_checkpoint(self, path: str | Path) -> None:
        payload = read_checkpoint(path)
        self.step = int(payload["step"])
        self.generator.load_state_dict(payload["generator"])
        self.processor.load_state_dict(payload["processor"])
        self.discriminator.load_state_dict(payload["discriminator"])
        self.ema.load_state_dict(payload["ema"])
        self.opt_g.load_state_dict(payload["opt_g"])
        self.opt_d.load_state_dict(payload["opt_d"])
        self.rng = np.random.default_rng()
        self.rng.bit_generator.state = payload["rng"]


def load_inference_modules(payload: dict):
    """Build generator and processor from a checkpoint, carrying EMA weights.

    Inference always runs on the EMA shadow, never the live weights.
    """
    config = RunConfig.from_dict(payload["config"]).validate()
    gen_cfg = config.generator_config()
    generator = Generator(gen_cfg)
    grid_side = 4 if config.backbone.spatial_mode == "cls_grid" else 32
    processor = FeatureProcessor(
        token_dim=config.backbone.token_dim,
        channels=config.processor.channels,
        scales=gen_cfg.cond_scales,
        resblocks=config.processor.resblocks,
        grid_side=grid_side,
    )
    gen_state = dict(payload["generator"])
    proc_state = dict(payload["processor"])
    for key, value in payload["ema"].items():
        prefix, name = key.split(".", 1)
        if prefix == "generator":
            gen_state[name] = value
        elif prefix == "processor":
            proc_state[name] = value
    generator.load_state_dict(gen_state)
    processor.load_state_dict(proc_state)
    generator.eval()
    processor.eval()
    vocab = TokenVocabulary(list(payload["vocab"]))
    return generator, processor, vocab, config


def read_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path} is not a training checkpoint")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {payload['format_version']} unsupported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    return payload
