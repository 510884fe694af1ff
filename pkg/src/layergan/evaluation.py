"""Measurement protocol: post-hoc segmentation, FID-lite, and sweep reports.

Segmentation quality of a trained generator pair is measured by sampling a
labeled synthetic set (composed image, binarized mask), training a small UNet
on it, and scoring that UNet against the held-out real test split. Generation
quality uses the Fréchet distance over features of a frozen random-weight
convolutional extractor — comparable only within this repository, never
against published FID numbers.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import linalg

from .data import DatasetManifest, load_split
from .mi import MIEstimate, MineConfig, layerwise_mi_eval
from .models import UNetSegmenter, build_segmenter, seeded_init
from .training import load_generators, sample_labeled, sample_layers
from .layerops import compose

FID_EPS = 1e-6


@dataclass(frozen=True)
class SegMetrics:
    iou: float
    dice: float
    threshold: float
    n_images: int


@dataclass(frozen=True)
class SegEvalConfig:
    """Fixed post-hoc segmenter budget so sweep runs stay comparable."""

    n_synthetic: int = 2048
    train_steps: int = 3000
    batch_size: int = 32
    base_channels: int = 16
    lr: float = 2e-3
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_synthetic < self.batch_size:
            raise ValueError("n_synthetic must be >= batch_size")
        if self.train_steps < 1:
            raise ValueError("train_steps must be >= 1")


def _flat_masks(t: torch.Tensor, name: str) -> torch.Tensor:
    if t.dim() == 4 and t.shape[1] == 1:
        return t[:, 0]
    if t.dim() == 3:
        return t
    raise ValueError(f"{name} must be [N,1,H,W] or [N,H,W], got {tuple(t.shape)}")


def seg_metrics(
    pred_masks: torch.Tensor, gt_masks: torch.Tensor, threshold: float = 0.5
) -> SegMetrics:
    """Per-image IoU and DICE, averaged over the batch.

    Predictions are thresholded; ground truth must already be binary. A pair
    where both masks are empty counts as IoU = DICE = 1.
    """
    pred = _flat_masks(pred_masks, "pred_masks")
    gt = _flat_masks(gt_masks, "gt_masks")
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    if not torch.logical_or(gt == 0, gt == 1).all():
        raise ValueError("gt masks must be exactly binary")
    p = (pred >= threshold).flatten(1).float()
    g = gt.flatten(1).float()
    inter = (p * g).sum(dim=1)
    p_area = p.sum(dim=1)
    g_area = g.sum(dim=1)
    union = p_area + g_area - inter
    both_empty = union == 0
    iou = torch.where(both_empty, torch.ones_like(inter), inter / union.clamp(min=1))
    dice = torch.where(
        both_empty, torch.ones_like(inter), 2 * inter / (p_area + g_area).clamp(min=1)
    )
    return SegMetrics(
        iou=float(iou.mean()),
        dice=float(dice.mean()),
        threshold=threshold,
        n_images=pred.shape[0],
    )


def train_segmenter(
    images: torch.Tensor, masks: torch.Tensor, cfg: SegEvalConfig = SegEvalConfig()
) -> UNetSegmenter:
    """Fit the UNet on a labeled set with a fixed deterministic budget."""
    n = images.shape[0]
    if masks.shape[0] != n:
        raise ValueError("images and masks must have matching batch size")
    net = build_segmenter(base=cfg.base_channels, seed=cfg.seed)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr, betas=(0.9, 0.99))
    g = torch.Generator().manual_seed(cfg.seed + 1)
    for _ in range(cfg.train_steps):
        idx = torch.randint(0, n, (cfg.batch_size,), generator=g)
        logits = net(images[idx])
        loss = F.binary_cross_entropy_with_logits(logits, masks[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    net.eval()
    return net


def predict_masks(
    net: UNetSegmenter, images: torch.Tensor, out_hw: tuple[int, int] | None = None, chunk: int = 256
) -> torch.Tensor:
    """Mask probabilities, optionally upsampled to the ground-truth size."""
    outs = []
    with torch.no_grad():
        for start in range(0, images.shape[0], chunk):
            prob = net.predict(images[start : start + chunk])
            if out_hw is not None and tuple(prob.shape[-2:]) != tuple(out_hw):
                prob = F.interpolate(prob, size=out_hw, mode="bilinear", align_corners=False)
            outs.append(prob)
    return torch.cat(outs)


def eval_segmentation_pairs(
    train_images: torch.Tensor,
    train_masks: torch.Tensor,
    test_images: torch.Tensor,
    test_masks: torch.Tensor,
    cfg: SegEvalConfig = SegEvalConfig(),
) -> SegMetrics:
    """Protocol core on in-memory sets: fit on the labeled set, score on test."""
    net = train_segmenter(train_images, train_masks, cfg)
    pred = predict_masks(net, test_images, out_hw=tuple(test_masks.shape[-2:]))
    return seg_metrics(pred, test_masks, threshold=cfg.threshold)


def eval_segmentation(
    checkpoint: str | Path,
    test_manifest: DatasetManifest,
    cfg: SegEvalConfig = SegEvalConfig(),
) -> SegMetrics:
    """Sample a synthetic labeled set from the checkpoint, then run the protocol."""
    gens, _ = load_generators(checkpoint)
    syn_x, syn_m = sample_labeled(gens, cfg.n_synthetic, cfg.seed)
    test_x, test_m = load_split(test_manifest, "test")
    return eval_segmentation_pairs(syn_x, syn_m, test_x, test_m, cfg)


def eval_mi(
    checkpoint: str | Path, n: int = 4096, seed: int = 0, mine: MineConfig | None = None
) -> MIEstimate:
    """Layerwise MINE MI of generated scenes from a checkpoint."""
    gens, _ = load_generators(checkpoint)
    layers = sample_layers(gens, n, seed)
    return layerwise_mi_eval(layers, mine if mine is not None else MineConfig(seed=seed))


# --- generation-quality score ------------------------------------------------


class _RandomFeatureNet(nn.Module):
    """Frozen random-weight feature extractor for the Fréchet score."""

    def __init__(self):
        super().__init__()
        chans = [3, 32, 64, 128]
        layers: list[nn.Module] = []
        for c_in, c_out in zip(chans[:-1], chans[1:]):
            layers += [nn.Conv2d(c_in, c_out, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        self.features = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.adaptive_avg_pool2d(self.features(x), 1).flatten(1)


def fid_extractor(seed: int, cache_path: str | Path | None = None) -> _RandomFeatureNet:
    """Build (or reload) the frozen extractor so scores are comparable."""
    if cache_path is not None:
        cache_path = Path(cache_path)
        if cache_path.is_file():
            payload = torch.load(cache_path, map_location="cpu", weights_only=False)
            if payload.get("seed") != seed:
                raise ValueError(
                    f"cached extractor at {cache_path} was built with seed "
                    f"{payload.get('seed')}, requested {seed}"
                )
            net = _RandomFeatureNet()
            net.load_state_dict(payload["state"])
            net.eval()
            return net
    net = _RandomFeatureNet()
    seeded_init(net, torch.Generator().manual_seed(seed))
    net.eval()
    if cache_path is not None:
        tmp = cache_path.with_suffix(cache_path.suffix + ".tmp")
        torch.save({"seed": seed, "state": net.state_dict()}, tmp)
        tmp.replace(cache_path)
    return net


def _moments(net: _RandomFeatureNet, images: torch.Tensor, chunk: int = 256):
    feats = []
    with torch.no_grad():
        for start in range(0, images.shape[0], chunk):
            feats.append(net(images[start : start + chunk]))
    arr = torch.cat(feats).double().numpy()
    return arr.mean(axis=0), np.cov(arr, rowvar=False)


def frechet_distance(
    mu1: np.ndarray, sigma1: np.ndarray, mu2: np.ndarray, sigma2: np.ndarray,
    eps: float = FID_EPS,
) -> tuple[float, bool]:
    """||mu1-mu2||^2 + tr(S1 + S2 - 2 sqrt(S1 S2)); second value flags eps·I use."""
    diff = mu1 - mu2
    covmean, _ = linalg.sqrtm(sigma1 @ sigma2, disp=False)
    regularized = False
    if not np.isfinite(covmean).all():
        regularized = True
        offset = np.eye(sigma1.shape[0]) * eps
        covmean, _ = linalg.sqrtm((sigma1 + offset) @ (sigma2 + offset), disp=False)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    score = float(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2 * np.trace(covmean))
    return max(score, 0.0), regularized


@dataclass(frozen=True)
class FidResult:
    value: float
    extractor_seed: int
    n_gen: int
    n_real: int
    regularized: bool = False


def fid_lite(
    gen_set: torch.Tensor,
    real_set: torch.Tensor,
    extractor_seed: int = 0,
    cache_path: str | Path | None = None,
) -> FidResult:
    """Fréchet distance between the two image sets' extractor features."""
    for name, t in (("gen_set", gen_set), ("real_set", real_set)):
        if t.dim() != 4 or t.shape[1] != 3:
            raise ValueError(f"{name} must be [N, 3, H, W], got {tuple(t.shape)}")
        if t.shape[0] < 64:
            raise ValueError(f"{name} needs at least 64 images, got {t.shape[0]}")
    net = fid_extractor(extractor_seed, cache_path)
    mu1, s1 = _moments(net, gen_set)
    mu2, s2 = _moments(net, real_set)
    value, regularized = frechet_distance(mu1, s1, mu2, s2)
    return FidResult(
        value=value,
        extractor_seed=extractor_seed,
        n_gen=gen_set.shape[0],
        n_real=real_set.shape[0],
        regularized=regularized,
    )


def fid_from_checkpoint(
    checkpoint: str | Path,
    manifest: DatasetManifest,
    n: int = 2048,
    seed: int = 0,
    extractor_seed: int = 0,
    cache_path: str | Path | None = None,
) -> FidResult:
    """Generated compositions vs the whole training split."""
    gens, _ = load_generators(checkpoint)
    layers = sample_layers(gens, n, seed)
    real, _ = load_split(manifest, "train")
    return fid_lite(compose(layers), real, extractor_seed, cache_path)


# --- sweep records and the correlation report --------------------------------


@dataclass
class SweepRecord:
    lambda_ils: float
    loss_kind: str
    seed: int
    seg: Optional[SegMetrics] = None
    mi: Optional[MIEstimate] = None
    fid_lite: Optional[float] = None

    def complete_for_correlation(self) -> bool:
        return self.seg is not None and self.mi is not None


def record_to_dict(rec: SweepRecord) -> dict:
    out = {
        "lambda_ils": rec.lambda_ils,
        "loss_kind": rec.loss_kind,
        "seed": rec.seed,
        "fid_lite": rec.fid_lite,
    }
    out["seg"] = asdict(rec.seg) if rec.seg is not None else None
    out["mi"] = asdict(rec.mi) if rec.mi is not None else None
    return out


def record_from_dict(d: dict) -> SweepRecord:
    seg = SegMetrics(**d["seg"]) if d.get("seg") else None
    mi = MIEstimate(**d["mi"]) if d.get("mi") else None
    return SweepRecord(
        lambda_ils=float(d["lambda_ils"]),
        loss_kind=str(d["loss_kind"]),
        seed=int(d["seed"]),
        seg=seg,
        mi=mi,
        fid_lite=d.get("fid_lite"),
    )


def merge_record_fragment(path: str | Path, fragment: dict) -> SweepRecord:
    """Update (or create) a per-run record file with new measurement fields."""
    path = Path(path)
    base = json.loads(path.read_text()) if path.is_file() else {}
    for key in ("lambda_ils", "loss_kind", "seed"):
        if key in base and key in fragment and base[key] != fragment[key]:
            raise ValueError(
                f"{path}: fragment {key}={fragment[key]!r} conflicts with "
                f"existing {base[key]!r}"
            )
    base.update({k: v for k, v in fragment.items() if v is not None})
    rec = record_from_dict(base)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(record_to_dict(rec), indent=2, sort_keys=True) + "\n")
    tmp.replace(path)
    return rec


def load_records(paths: Iterable[str | Path]) -> list[SweepRecord]:
    return [record_from_dict(json.loads(Path(p).read_text())) for p in paths]


@dataclass
class CorrelationReport:
    r: Optional[float]
    undefined: bool
    n_used: int
    n_excluded: int
    table: str
    records_path: Optional[Path] = None
    plot_path: Optional[Path] = None


def pearson(xs: Sequence[float], ys: Sequence[float]) -> Optional[float]:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.std() == 0 or y.std() == 0:
        return None
    return float(np.corrcoef(x, y)[0, 1])


def correlation_report(
    records: list[SweepRecord],
    out_dir: str | Path | None = None,
    exclude_lambda_at_least: float = 2.0,
) -> CorrelationReport:
    """Pearson correlation between MI and IoU across sweep records.

    Degraded heavy-weight runs (lambda_ils >= the exclusion cutoff) are left
    out of the correlation but still listed in the table. Zero variance on
    either axis is reported as an undefined correlation rather than a number.
    """
    usable = [r for r in records if r.complete_for_correlation()]
    if len(usable) < 4:
        raise ValueError(f"need at least 4 complete records, got {len(usable)}")
    kept = [r for r in usable if r.lambda_ils < exclude_lambda_at_least]
    excluded = len(usable) - len(kept)
    ious = [r.seg.iou for r in kept]
    mis = [r.mi.value for r in kept]
    r_val = pearson(mis, ious) if len(kept) >= 2 else None
    undefined = r_val is None or not math.isfinite(r_val)

    lines = [
        f"{'lambda':>8} {'kind':>6} {'seed':>4} {'iou':>8} {'dice':>8} "
        f"{'mi':>8} {'fid':>8}  in_corr"
    ]
    for rec in sorted(usable, key=lambda r: (r.lambda_ils, r.seed)):
        fid_txt = f"{rec.fid_lite:8.3f}" if rec.fid_lite is not None else f"{'-':>8}"
        lines.append(
            f"{rec.lambda_ils:8.2f} {rec.loss_kind:>6} {rec.seed:4d} "
            f"{rec.seg.iou:8.4f} {rec.seg.dice:8.4f} {rec.mi.value:8.4f} "
            f"{fid_txt}  {'yes' if rec.lambda_ils < exclude_lambda_at_least else 'no'}"
        )
    corr_line = (
        "pearson(MI, IoU) = undefined (zero variance)"
        if undefined
        else f"pearson(MI, IoU) = {r_val:+.4f}"
    )
    lines.append(f"{corr_line}  [n={len(kept)}, excluded={excluded}]")
    table = "\n".join(lines)

    report = CorrelationReport(
        r=None if undefined else r_val,
        undefined=undefined,
        n_used=len(kept),
        n_excluded=excluded,
        table=table,
    )
    if out_dir is not None:
        from .viz import scatter_mi_iou  # deferred: pulls in matplotlib

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(table + "\n")
        records_path = out / "records.json"
        records_path.write_text(
            json.dumps([record_to_dict(r) for r in usable], indent=2, sort_keys=True) + "\n"
        )
        plot_path = scatter_mi_iou(kept, out / "scatter_mi_iou.png")
        report.records_path = records_path
        report.plot_path = plot_path
    return report
