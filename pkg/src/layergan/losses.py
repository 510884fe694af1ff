"""Scalar training objectives.

Adversarial terms (non-saturating logistic), the R1 gradient penalty, the two
mask regularizers, and the two layer-independence losses (the vCLUB-based MI
loss and its direct negative-L1 alternative) with their ablation switches:
region separation, visible-region gradient flow, mask gradient flow, and the
variational family.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import torch
import torch.nn.functional as F

from .layerops import LayerTriplet, RegionSplit, split_regions
from .mi import draw_shuffle, vclub_term

ILS_KINDS = ("mi", "l1", "none")


@dataclass(frozen=True)
class LossWeights:
    """Weights of the generator objective plus the R1 weight."""

    lambda_m: float = 2.0  # minimal-mask-area hinge
    lambda_b: float = 2.0  # mask binarization
    lambda_ils: float = 1.0  # layer independence
    gamma: float = 1.0  # R1 on the discriminator
    eta: float = 0.25  # tolerable minimal mask area fraction

    def __post_init__(self):
        for name in ("lambda_m", "lambda_b", "lambda_ils", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must be in [0, 1], got {self.eta}")


@dataclass(frozen=True)
class IlsOptions:
    """Configuration of the independence loss.

    Defaults are the full setting: visibility-split regions, gradients through
    visible regions and the mask, Laplace variational family, MI loss.
    """

    separate_regions: bool = True
    optimize_visible: bool = True
    optimize_mask: bool = True
    family: str = "laplace"  # "laplace" | "gaussian"
    loss_kind: str = "mi"  # "mi" | "l1" | "none"
    normalize: bool = False  # divide distances by per-sample element count

    def __post_init__(self):
        if self.family not in ("laplace", "gaussian"):
            raise ValueError(f"unknown family {self.family!r}")
        if self.loss_kind not in ILS_KINDS:
            raise ValueError(f"loss_kind must be one of {ILS_KINDS}")


class GeneratorLossParts(NamedTuple):
    adv: torch.Tensor
    mask_area: torch.Tensor
    mask_binarization: torch.Tensor
    ils: Optional[torch.Tensor] = None


def d_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    """Discriminator loss -E[log sig(real)] - E[log(1 - sig(fake))] on logits."""
    if real_scores.numel() == 0 or fake_scores.numel() == 0:
        raise ValueError("empty score batch")
    return F.softplus(-real_scores).mean() + F.softplus(fake_scores).mean()


def g_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator loss -E[log sig(fake)] on logits."""
    if fake_scores.numel() == 0:
        raise ValueError("empty score batch")
    return F.softplus(-fake_scores).mean()


def r1_penalty(real_images: torch.Tensor, discriminator) -> torch.Tensor:
    """(1/2) E[ ||grad_x D(x)||^2 ] over the real batch.

    The discriminator must map [N, C, H, W] to [N] logits differentiably; a
    constant discriminator yields exactly 0.
    """
    x = real_images.detach().requires_grad_(True)
    logits = discriminator(x)
    if not logits.requires_grad:  # constant discriminator, no graph at all
        return logits.sum() * 0.0
    try:
        (grad,) = torch.autograd.grad(
            logits.sum(), x, create_graph=True, allow_unused=True
        )
    except RuntimeError as e:
        raise RuntimeError(
            "discriminator is not differentiable with respect to its input"
        ) from e
    if grad is None:  # logits carry a graph that never touches x
        return logits.sum() * 0.0
    return 0.5 * grad.flatten(1).pow(2).sum(dim=1).mean()


def mask_area_loss(m: torch.Tensor, eta: float = 0.25) -> torch.Tensor:
    """Hinge on the mean mask area: E[max(0, eta - area_fraction)]."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must be in [0, 1], got {eta}")
    area = m.flatten(1).mean(dim=1)  # (1/HW) * ||m||_1 per sample, m in [0,1]
    return F.relu(eta - area).mean()


def mask_binarization_loss(m: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel distance to the nearest binary value: E[min(m, 1-m)]."""
    if float(m.detach().min()) < 0.0 or float(m.detach().max()) > 1.0:
        raise ValueError("mask values must lie in [0, 1]")
    return torch.minimum(m, 1.0 - m).flatten(1).mean(dim=1).mean()


def _resolve_shuffles(
    n: int,
    count: int,
    generator: torch.Generator | None,
    shuffles: Sequence[torch.Tensor | Sequence[int]] | None,
) -> list[torch.Tensor]:
    if shuffles is not None:
        if len(shuffles) < count:
            raise ValueError(f"expected {count} shuffle vectors, got {len(shuffles)}")
        return [torch.as_tensor(s, dtype=torch.long) for s in shuffles[:count]]
    return [draw_shuffle(n, generator) for _ in range(count)]


def ils_mi_from_split(
    split: RegionSplit,
    opts: IlsOptions,
    generator: torch.Generator | None = None,
    shuffles: Sequence[torch.Tensor | Sequence[int]] | None = None,
) -> torch.Tensor:
    """MI independence loss from an already-formed region split.

    Sum of the vCLUB terms over (b_inv, f_vis) and (b_vis, f_inv), each with
    its own independently drawn shuffle vector. With
    ``opts.separate_regions=False`` the whole layers are reconstructed by the
    exact partition identity and a single whole-layer term is returned. Mask
    gradient flow cannot be switched off here; use :func:`ils_mi_loss` for
    that.
    """
    f_vis, f_inv, b_vis, b_inv = split
    n = f_vis.shape[0]
    if n < 2:
        raise ValueError("independence loss needs a batch of at least 2")
    if not opts.separate_regions:
        b = b_vis + b_inv
        f = f_vis + f_inv
        (k,) = _resolve_shuffles(n, 1, generator, shuffles)
        return vclub_term(b, f, k, family=opts.family, normalize=opts.normalize)
    if not opts.optimize_visible:
        f_vis = f_vis.detach()
        b_vis = b_vis.detach()
    k1, k2 = _resolve_shuffles(n, 2, generator, shuffles)
    return vclub_term(
        b_inv, f_vis, k1, family=opts.family, normalize=opts.normalize
    ) + vclub_term(b_vis, f_inv, k2, family=opts.family, normalize=opts.normalize)


def ils_mi_loss(
    layers: LayerTriplet,
    opts: IlsOptions,
    generator: torch.Generator | None = None,
    shuffles: Sequence[torch.Tensor | Sequence[int]] | None = None,
) -> torch.Tensor:
    """MI independence loss from a layer triplet, honoring all switches."""
    if layers.f.shape[0] < 2:
        raise ValueError("independence loss needs a batch of at least 2")
    if not opts.separate_regions:
        (k,) = _resolve_shuffles(layers.f.shape[0], 1, generator, shuffles)
        return vclub_term(
            layers.b, layers.f, k, family=opts.family, normalize=opts.normalize
        )
    split = split_regions(layers, detach_mask=not opts.optimize_mask)
    return ils_mi_from_split(split, opts, generator=generator, shuffles=shuffles)


def _l1_distance(a: torch.Tensor, b: torch.Tensor, normalize: bool) -> torch.Tensor:
    d = (a - b).abs().flatten(1).sum(dim=1)
    if normalize:
        d = d / a[0].numel()
    return d.mean()


def ils_l1_from_split(split: RegionSplit, opts: IlsOptions) -> torch.Tensor:
    """Direct dissimilarity loss -E||b_inv - f_vis||_1 - E||b_vis - f_inv||_1."""
    f_vis, f_inv, b_vis, b_inv = split
    if not opts.separate_regions:
        return -_l1_distance(b_vis + b_inv, f_vis + f_inv, opts.normalize)
    if not opts.optimize_visible:
        f_vis = f_vis.detach()
        b_vis = b_vis.detach()
    return -_l1_distance(b_inv, f_vis, opts.normalize) - _l1_distance(
        b_vis, f_inv, opts.normalize
    )


def ils_l1_loss(layers: LayerTriplet, opts: IlsOptions) -> torch.Tensor:
    """Direct dissimilarity loss from a layer triplet, honoring all switches."""
    if not opts.separate_regions:
        return -_l1_distance(layers.b, layers.f, opts.normalize)
    split = split_regions(layers, detach_mask=not opts.optimize_mask)
    return ils_l1_from_split(split, opts)


def ils_loss(
    layers: LayerTriplet,
    opts: IlsOptions,
    generator: torch.Generator | None = None,
) -> Optional[torch.Tensor]:
    """Dispatch on ``opts.loss_kind``; None when the loss is disabled."""
    if opts.loss_kind == "none":
        return None
    if opts.loss_kind == "mi":
        return ils_mi_loss(layers, opts, generator=generator)
    return ils_l1_loss(layers, opts)


def generator_objective(
    parts: GeneratorLossParts, weights: LossWeights
) -> torch.Tensor:
    """Weighted generator objective: adv + lm*area + lb*bin + lils*ils."""
    total = (
        parts.adv
        + weights.lambda_m * parts.mask_area
        + weights.lambda_b * parts.mask_binarization
    )
    if parts.ils is not None:
        total = total + weights.lambda_ils * parts.ils
    return total
