"""Alternating adversarial optimization with checkpointing and resumption.

Each step performs one discriminator update (non-saturating loss + R1 on the
real batch) followed by one generator update (adversarial term on the
perturbed composition plus mask and independence losses on the unperturbed
triplet). The batch stream is a pure function of (seed, epoch, position), so
resuming from a checkpoint replays exactly the batches an uninterrupted run
would have seen.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import torch
import torch.nn.functional as F

from .data import DatasetManifest, _write_manifest, _write_scene, load_split
from .layerops import (
    LayerTriplet,
    PerturbSpec,
    binarize_mask,
    compose,
    perturb_compose,
    sample_latents,
    split_regions,
)
from .losses import (
    GeneratorLossParts,
    IlsOptions,
    LossWeights,
    d_loss,
    g_loss,
    generator_objective,
    ils_loss,
    mask_area_loss,
    mask_binarization_loss,
    r1_penalty,
)
from .mi import draw_shuffle, vclub_term
from .models import (
    Discriminator,
    GeneratorPair,
    NetConfig,
    build_discriminator,
    build_generators,
    load_checkpoint,
    save_checkpoint,
    synthesize,
)

METRICS_NAME = "metrics.jsonl"
FINAL_CHECKPOINT = "final.pt"


class TrainingDiverged(RuntimeError):
    """Raised when a loss goes non-finite; carries a diagnostic snapshot."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass(frozen=True)
class TrainConfig:
    net: NetConfig = NetConfig()
    weights: LossWeights = LossWeights()
    ils: IlsOptions = IlsOptions()
    perturb: PerturbSpec = PerturbSpec()
    batch_size: int = 32
    total_images_shown: int = 200_000
    lr: float = 0.0025
    adam_betas: tuple[float, float] = (0.0, 0.99)
    seed: int = 0
    checkpoint_every: int = 20_000
    log_every: int = 100

    def __post_init__(self):
        # Adam rejects integer betas, so coerce early (config files may give 0)
        object.__setattr__(
            self, "adam_betas", (float(self.adam_betas[0]), float(self.adam_betas[1]))
        )
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.total_images_shown < self.batch_size:
            raise ValueError("total_images_shown must be >= batch_size")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        for b in self.adam_betas:
            if not 0.0 <= b < 1.0:
                raise ValueError(f"adam betas must be in [0, 1), got {self.adam_betas}")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ValueError("checkpoint_every and log_every must be >= 1")

    @property
    def ils_enabled(self) -> bool:
        return self.ils.loss_kind != "none" and self.weights.lambda_ils > 0


@dataclass
class TrainState:
    gens: GeneratorPair
    disc: Discriminator
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    generator: torch.Generator
    images_shown: int = 0
    history: list[dict] = field(default_factory=list)


def init_state(cfg: TrainConfig) -> TrainState:
    gens = build_generators(cfg.net, cfg.seed)
    disc = build_discriminator(cfg.net, cfg.seed + 1)
    params_g = list(gens.g_fm.parameters()) + list(gens.g_b.parameters())
    opt_g = torch.optim.Adam(params_g, lr=cfg.lr, betas=cfg.adam_betas)
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr, betas=cfg.adam_betas)
    rng = torch.Generator().manual_seed(cfg.seed + 2)
    return TrainState(gens=gens, disc=disc, opt_g=opt_g, opt_d=opt_d, generator=rng)


def _grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(p.grad.detach().pow(2).sum())
    return math.sqrt(total)


def _pool_flat(t: torch.Tensor, size: int = 8) -> torch.Tensor:
    side = min(size, t.shape[-1], t.shape[-2])
    return F.adaptive_avg_pool2d(t, side).flatten(1)


def monitor_vclub(layers: LayerTriplet, seed: int) -> float:
    """Training-time vCLUB reading on pooled visibility-split regions.

    Computed with a fixed Laplace family and its own seed stream so the
    reading never consumes training randomness; logged at every step for all
    configurations, including runs that do not optimize any ILS term.
    """
    with torch.no_grad():
        split = split_regions(
            LayerTriplet(f=layers.f.detach(), b=layers.b.detach(), m=layers.m.detach())
        )
        g = torch.Generator().manual_seed(seed)
        n = layers.f.shape[0]
        value = vclub_term(
            _pool_flat(split.b_inv), _pool_flat(split.f_vis), draw_shuffle(n, g)
        ) + vclub_term(
            _pool_flat(split.b_vis), _pool_flat(split.f_inv), draw_shuffle(n, g)
        )
    return float(value)


def _diverged(name: str, value: float, state: TrainState, partial: dict) -> TrainingDiverged:
    snapshot = {
        "offender": name,
        "value": value,
        "images_shown": state.images_shown,
        "losses": partial,
        "grad_norm_g": _grad_norm(
            list(state.gens.g_fm.parameters()) + list(state.gens.g_b.parameters())
        ),
        "grad_norm_d": _grad_norm(state.disc.parameters()),
        "recent": state.history[-5:],
    }
    return TrainingDiverged(
        f"{name} became non-finite ({value}) at images_shown={state.images_shown}",
        snapshot,
    )


def train_step(state: TrainState, real_batch: torch.Tensor, cfg: TrainConfig) -> TrainState:
    """One D update then one G update; appends a metrics record."""
    if real_batch.dim() != 4 or real_batch.shape[1] != 3:
        raise ValueError(f"real batch must be [N, 3, H, W], got {tuple(real_batch.shape)}")
    n = real_batch.shape[0]
    if n < 2:
        raise ValueError("batch size must be >= 2")
    partial: dict[str, float] = {}

    # --- discriminator
    z = sample_latents(n, cfg.net.z_dim, state.generator)
    with torch.no_grad():
        fake = synthesize(state.gens, z)
    x_fake, _ = perturb_compose(fake, cfg.perturb, state.generator)
    adv_d = d_loss(state.disc(real_batch), state.disc(x_fake))
    r1 = r1_penalty(real_batch, state.disc)
    loss_d = adv_d + cfg.weights.gamma * r1
    partial.update(
        d_adv=float(adv_d.detach()), r1=float(r1.detach()), d_loss=float(loss_d.detach())
    )
    if not math.isfinite(partial["d_loss"]):
        raise _diverged("d_loss", partial["d_loss"], state, partial)
    state.opt_d.zero_grad(set_to_none=True)
    loss_d.backward()
    grad_d = _grad_norm(state.disc.parameters())
    state.opt_d.step()

    # --- generator (D weights frozen; scores still differentiable in x)
    for p in state.disc.parameters():
        p.requires_grad_(False)
    z = sample_latents(n, cfg.net.z_dim, state.generator)
    layers = synthesize(state.gens, z)
    x_pert, _ = perturb_compose(layers, cfg.perturb, state.generator)
    adv_g = g_loss(state.disc(x_pert))
    area = mask_area_loss(layers.m, cfg.weights.eta)
    binar = mask_binarization_loss(layers.m)
    ils_term = ils_loss(layers, cfg.ils, generator=state.generator) if cfg.ils_enabled else None
    parts = GeneratorLossParts(adv=adv_g, mask_area=area, mask_binarization=binar, ils=ils_term)
    loss_g = generator_objective(parts, cfg.weights)
    partial.update(
        g_adv=float(adv_g.detach()), mask_area=float(area.detach()), mask_bin=float(binar.detach())
    )
    if ils_term is not None:
        partial["ils"] = float(ils_term.detach())
    partial["g_loss"] = float(loss_g.detach())
    if not math.isfinite(partial["g_loss"]):
        raise _diverged("g_loss", partial["g_loss"], state, partial)
    gen_params = list(state.gens.g_fm.parameters()) + list(state.gens.g_b.parameters())
    state.opt_g.zero_grad(set_to_none=True)
    loss_g.backward()
    grad_g = _grad_norm(gen_params)
    state.opt_g.step()
    for p in state.disc.parameters():
        p.requires_grad_(True)

    vclub = monitor_vclub(layers, seed=cfg.seed * 7919 + state.images_shown)
    state.images_shown += n
    record = {
        "step": len(state.history) + 1,
        "images_shown": state.images_shown,
        "vclub": vclub,
        "grad_norm_d": grad_d,
        "grad_norm_g": grad_g,
        **partial,
    }
    state.history.append(record)
    return state


# --- checkpoint layer ------------------------------------------------------


def _state_payload(state: TrainState, cfg: TrainConfig) -> dict:
    return {
        "cfg": cfg,
        "images_shown": state.images_shown,
        "g_fm": state.gens.g_fm.state_dict(),
        "g_b": state.gens.g_b.state_dict(),
        "disc": state.disc.state_dict(),
        "opt_g": state.opt_g.state_dict(),
        "opt_d": state.opt_d.state_dict(),
        "rng": state.generator.get_state(),
        "history": state.history,
    }


def restore_state(path: str | Path, cfg: TrainConfig) -> TrainState:
    """Rebuild an exactly-resumable TrainState from a checkpoint."""
    payload = load_checkpoint(path)
    stored = payload["cfg"]
    if stored != cfg:
        raise ValueError(
            f"checkpoint {path} was written with a different config; "
            "resume with the original one"
        )
    state = init_state(cfg)
    state.gens.g_fm.load_state_dict(payload["g_fm"])
    state.gens.g_b.load_state_dict(payload["g_b"])
    state.disc.load_state_dict(payload["disc"])
    state.opt_g.load_state_dict(payload["opt_g"])
    state.opt_d.load_state_dict(payload["opt_d"])
    state.generator.set_state(payload["rng"])
    state.images_shown = int(payload["images_shown"])
    state.history = list(payload["history"])
    return state


def load_generators(path: str | Path) -> tuple[GeneratorPair, TrainConfig]:
    """Load just the generator pair (eval usage) plus its training config."""
    payload = load_checkpoint(path)
    cfg: TrainConfig = payload["cfg"]
    gens = build_generators(cfg.net, cfg.seed)
    gens.g_fm.load_state_dict(payload["g_fm"])
    gens.g_b.load_state_dict(payload["g_b"])
    gens.g_fm.eval()
    gens.g_b.eval()
    return gens, cfg


def _epoch_perm(n_data: int, epoch: int, seed: int) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed * 1_000_003 + epoch)
    return torch.randperm(n_data, generator=g)


def fit(
    cfg: TrainConfig,
    manifest: DatasetManifest,
    out_dir: str | Path,
    resume_from: Optional[str | Path] = None,
) -> Path:
    """Train until cfg.total_images_shown; returns the final checkpoint path.

    Writes ckpt_<images>.pt at every crossed multiple of checkpoint_every (up
    to the configured total), metrics lines to metrics.jsonl at every crossed
    multiple of log_every, and final.pt at the end.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images, _ = load_split(manifest, "train")
    n_data = images.shape[0]
    if n_data < cfg.batch_size:
        raise ValueError(
            f"train split has {n_data} images, need at least batch_size={cfg.batch_size}"
        )
    state = restore_state(resume_from, cfg) if resume_from else init_state(cfg)
    batches_per_epoch = n_data // cfg.batch_size
    with open(out / METRICS_NAME, "a") as metrics_file:
        while state.images_shown < cfg.total_images_shown:
            step = state.images_shown // cfg.batch_size
            epoch, pos = divmod(step, batches_per_epoch)
            perm = _epoch_perm(n_data, epoch, cfg.seed)
            idx = perm[pos * cfg.batch_size : (pos + 1) * cfg.batch_size]
            before = state.images_shown
            train_step(state, images[idx], cfg)
            done = state.images_shown >= cfg.total_images_shown
            if done or state.images_shown // cfg.log_every > before // cfg.log_every:
                metrics_file.write(json.dumps(state.history[-1]) + "\n")
                metrics_file.flush()
            last_mult = min(state.images_shown, cfg.total_images_shown) // cfg.checkpoint_every
            for k in range(before // cfg.checkpoint_every + 1, last_mult + 1):
                save_checkpoint(
                    out / f"ckpt_{k * cfg.checkpoint_every:08d}.pt",
                    _state_payload(state, cfg),
                )
    return save_checkpoint(out / FINAL_CHECKPOINT, _state_payload(state, cfg))


# --- sampling from a checkpoint ---------------------------------------------


def sample_layers(
    gens: GeneratorPair, n: int, seed: int, chunk: int = 256
) -> LayerTriplet:
    """Draw n scenes (soft masks) deterministically from a generator pair."""
    if n < 1:
        raise ValueError("n must be >= 1")
    g = torch.Generator().manual_seed(seed)
    fs, bs, ms = [], [], []
    with torch.no_grad():
        remaining = n
        while remaining > 0:
            k = min(chunk, remaining)
            layers = synthesize(gens, sample_latents(k, gens.g_fm.backbone.cfg.z_dim, g))
            fs.append(layers.f)
            bs.append(layers.b)
            ms.append(layers.m)
            remaining -= k
    return LayerTriplet(f=torch.cat(fs), b=torch.cat(bs), m=torch.cat(ms))


def sample_labeled(gens: GeneratorPair, n: int, seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    """(composed images, binarized masks) for post-hoc segmenter training."""
    layers = sample_layers(gens, n, seed)
    return compose(layers), binarize_mask(layers.m)


def sample_synthetic(
    checkpoint: str | Path, n: int, seed: int, out_dir: str | Path
) -> DatasetManifest:
    """Write n generated (image, binary mask) pairs in the dataset layout."""
    gens, cfg = load_generators(checkpoint)
    x, m = sample_labeled(gens, n, seed)
    root = Path(out_dir)
    (root / "train" / "images").mkdir(parents=True, exist_ok=True)
    (root / "train" / "masks").mkdir(parents=True, exist_ok=True)
    stems = []
    for i in range(n):
        stem = f"synth_{i:05d}"
        _write_scene(
            x[i], m[i],
            root / "train" / "images" / f"{stem}.png",
            root / "train" / "masks" / f"{stem}.png",
        )
        stems.append(stem)
    digest = hashlib.sha256(f"synth:{n}:{seed}:{cfg.seed}".encode()).hexdigest()[:16]
    manifest = DatasetManifest(
        root=root,
        img_size=cfg.net.img_size,
        spec_hash=digest,
        train=tuple(stems),
        test=(),
    )
    _write_manifest(manifest)
    return manifest
