"""Rendering helpers: layer grids and the sweep scatter plot."""

from __future__ import annotations

from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
import torch
from PIL import Image

from .data import image_to_u8
from .layerops import LayerTriplet, compose

if TYPE_CHECKING:
    from .evaluation import SweepRecord

_PAD = 2
_BG_GRAY = 24


def _mask_to_rgb_u8(m: torch.Tensor) -> np.ndarray:
    gray = (m[0].clamp(0, 1) * 255.0).round().byte().numpy()
    return np.stack([gray, gray, gray], axis=-1)


def layer_grid(layers: LayerTriplet, path: str | Path, k: int | None = None) -> Path:
    """Write a 4-row grid image: background / foreground / composed / mask.

    One column per sample (up to ``k``); the mask row renders grayscale.
    Assembled with plain pixel pastes, so a fixed input gives identical bytes.
    """
    n = layers.f.shape[0]
    k = n if k is None else min(k, n)
    if k < 1:
        raise ValueError("need at least one sample to render")
    x = compose(layers)
    rows = [
        [image_to_u8(layers.b[i]) for i in range(k)],
        [image_to_u8(layers.f[i]) for i in range(k)],
        [image_to_u8(x[i]) for i in range(k)],
        [_mask_to_rgb_u8(layers.m[i]) for i in range(k)],
    ]
    h, w = rows[0][0].shape[:2]
    canvas_w = _PAD + k * (w + _PAD)
    canvas_h = _PAD + 4 * (h + _PAD)
    canvas = Image.new("RGB", (canvas_w, canvas_h), (_BG_GRAY,) * 3)
    for r, row in enumerate(rows):
        for c, tile in enumerate(row):
            canvas.paste(
                Image.fromarray(tile, mode="RGB"),
                (_PAD + c * (w + _PAD), _PAD + r * (h + _PAD)),
            )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    canvas.save(tmp, format="PNG")
    tmp.replace(path)
    return path


def scatter_mi_iou(records: "list[SweepRecord]", path: str | Path) -> Path:
    """MI-vs-IoU scatter, one marker per run, colored by the ILS weight."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs = [r.mi.value for r in records]
    ys = [r.seg.iou for r in records]
    weights = [r.lambda_ils for r in records]
    fig, ax = plt.subplots(figsize=(5, 4))
    sc = ax.scatter(xs, ys, c=weights, cmap="viridis", s=48, edgecolors="k")
    fig.colorbar(sc, ax=ax, label="independence loss weight")
    ax.set_xlabel("layerwise MI (nats)")
    ax.set_ylabel("post-hoc IoU")
    ax.set_title("segmentation quality vs layer independence")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
