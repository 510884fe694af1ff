"""Deterministic tensor operations on generator layers.

Everything here is a pure function of its inputs (plus an explicit
``torch.Generator`` where randomness is involved): alpha composition of
foreground/background/mask triplets, the random shift used by perturbed
composition, and the visibility split that separates each layer into the
region shown in the composed image and the occluded remainder.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import torch


class LayerTriplet(NamedTuple):
    """One generated batch of layers.

    f: foreground, [N, 3, H, W] in [-1, 1]
    b: background, [N, 3, H, W] in [-1, 1]
    m: mask, [N, 1, H, W] in [0, 1]
    """

    f: torch.Tensor
    b: torch.Tensor
    m: torch.Tensor


class RegionSplit(NamedTuple):
    """Visibility-masked regions of a layer triplet.

    f_vis + f_inv reconstructs f exactly, likewise b_vis + b_inv for b.
    """

    f_vis: torch.Tensor
    f_inv: torch.Tensor
    b_vis: torch.Tensor
    b_inv: torch.Tensor


@dataclass(frozen=True)
class PerturbSpec:
    """Random-shift parameters for perturbed composition.

    max_shift_frac: fraction of the image side; per-sample integer shifts are
        drawn uniformly from [-floor(frac*side), +floor(frac*side)] per axis.
    fill_value: pad value for vacated foreground pixels. Vacated mask pixels
        always fill with 0 so the composed image stays in range.
    """

    max_shift_frac: float = 0.125
    fill_value: float = -1.0

    def __post_init__(self):
        if not 0.0 <= self.max_shift_frac < 0.5:
            raise ValueError(
                f"max_shift_frac must be in [0, 0.5), got {self.max_shift_frac}"
            )


def _check_triplet_shapes(layers: LayerTriplet) -> None:
    f, b, m = layers
    if f.dim() != 4 or b.dim() != 4 or m.dim() != 4:
        raise ValueError("layer tensors must be 4-D [N, C, H, W]")
    if f.shape != b.shape:
        raise ValueError(f"f/b shape mismatch: {tuple(f.shape)} vs {tuple(b.shape)}")
    if m.shape[1] != 1:
        raise ValueError(f"mask must have 1 channel, got {m.shape[1]}")
    if (m.shape[0], m.shape[2], m.shape[3]) != (f.shape[0], f.shape[2], f.shape[3]):
        raise ValueError(
            f"mask shape {tuple(m.shape)} incompatible with layers {tuple(f.shape)}"
        )


def sample_latents(
    n: int, dim: int, generator: torch.Generator | None = None
) -> torch.Tensor:
    """Draw an [n, dim] batch from the standard normal latent prior."""
    if n < 1 or dim < 1:
        raise ValueError("n and dim must be positive")
    return torch.randn(n, dim, generator=generator)


def compose(layers: LayerTriplet) -> torch.Tensor:
    """Blend layers into images: x = m * f + (1 - m) * b.

    The mask broadcasts over the color channels. Output is [N, 3, H, W].
    """
    _check_triplet_shapes(layers)
    f, b, m = layers
    return m * f + (1.0 - m) * b


def _as_shift_list(v, n: int, name: str) -> list[int]:
    if isinstance(v, torch.Tensor):
        v = v.tolist()
    if isinstance(v, (int, float)):
        v = [int(v)] * n
    v = [int(x) for x in v]
    if len(v) != n:
        raise ValueError(f"{name} must have one entry per sample ({n}), got {len(v)}")
    return v


def shift2d(
    t: torch.Tensor,
    dx: int | Sequence[int] | torch.Tensor,
    dy: int | Sequence[int] | torch.Tensor,
    fill: float = 0.0,
) -> torch.Tensor:
    """Translate each sample of an [N, C, H, W] tensor by integer pixels.

    Positive dx shifts content toward larger column indices (right), positive
    dy toward larger row indices (down). Vacated pixels are set to ``fill``;
    nothing wraps around.
    """
    if t.dim() != 4:
        raise ValueError("shift2d expects an [N, C, H, W] tensor")
    n, _, h, w = t.shape
    dxs = _as_shift_list(dx, n, "dx")
    dys = _as_shift_list(dy, n, "dy")
    for i, (sx, sy) in enumerate(zip(dxs, dys)):
        if abs(sx) > w or abs(sy) > h:
            raise ValueError(
                f"shift ({sx}, {sy}) of sample {i} exceeds spatial extent {w}x{h}"
            )
    out = torch.full_like(t, fill)
    for i, (sx, sy) in enumerate(zip(dxs, dys)):
        x0d, x1d = max(sx, 0), w + min(sx, 0)
        y0d, y1d = max(sy, 0), h + min(sy, 0)
        if x0d >= x1d or y0d >= y1d:
            continue  # fully vacated
        x0s, x1s = max(-sx, 0), w - max(sx, 0)
        y0s, y1s = max(-sy, 0), h - max(sy, 0)
        out[i, :, y0d:y1d, x0d:x1d] = t[i, :, y0s:y1s, x0s:x1s]
    return out


def perturb_compose(
    layers: LayerTriplet,
    spec: PerturbSpec,
    generator: torch.Generator | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Compose with a shared random shift of mask and foreground.

    x = T(m) * T(f) + (1 - T(m)) * b, where T applies one integer shift per
    sample to both m and f. The background is never shifted. Returns the
    composed batch and the applied per-sample shifts as an [N, 2] (dx, dy)
    tensor for reproducibility.
    """
    _check_triplet_shapes(layers)
    f, b, m = layers
    n, _, h, w = f.shape
    sx = int(spec.max_shift_frac * w)
    sy = int(spec.max_shift_frac * h)
    if sx == 0 and sy == 0:
        shifts = torch.zeros(n, 2, dtype=torch.long)
        return compose(layers), shifts
    dx = torch.randint(-sx, sx + 1, (n,), generator=generator)
    dy = torch.randint(-sy, sy + 1, (n,), generator=generator)
    tm = shift2d(m, dx, dy, fill=0.0)
    tf = shift2d(f, dx, dy, fill=spec.fill_value)
    x = tm * tf + (1.0 - tm) * b
    return x, torch.stack([dx, dy], dim=1)


def split_regions(layers: LayerTriplet, detach_mask: bool = False) -> RegionSplit:
    """Split layers into visible/invisible regions.

    f_vis = f*m, f_inv = f*(1-m), b_vis = b*(1-m), b_inv = b*m. With
    ``detach_mask`` the mask is treated as a constant, so no gradient flows
    to m through the split.
    """
    _check_triplet_shapes(layers)
    f, b, m = layers
    if detach_mask:
        m = m.detach()
    return RegionSplit(f_vis=f * m, f_inv=f * (1.0 - m), b_vis=b * (1.0 - m), b_inv=b * m)


def binarize_mask(m: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    """Threshold a soft mask to exact {0, 1} values (same dtype as input)."""
    return (m >= threshold).to(m.dtype)


def with_mask(layers: LayerTriplet, m: torch.Tensor) -> LayerTriplet:
    """Return a copy of the triplet with the mask replaced."""
    return LayerTriplet(f=layers.f, b=layers.b, m=m)
