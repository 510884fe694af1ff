"""Shared fixtures.

Two tiny datasets and a seconds-scale trained checkpoint back the fast suite;
the session-scoped ``sweep_results`` fixture backs the long-running
directional checks (it trains and evaluates a full lambda/seed grid, so only
tests marked ``longrun`` request it).
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import pytest
import torch

torch.set_num_threads(1)

import helpers
from layergan.data import SceneSpec, build_dataset
from layergan.evaluation import SegEvalConfig, eval_mi, eval_segmentation, fid_from_checkpoint
from layergan.losses import IlsOptions, LossWeights
from layergan.models import NetConfig, load_checkpoint
from layergan.training import TrainConfig, fit

SWEEP_LAMBDAS = (0.0, 0.2, 0.5, 1.0, 5.0)
SWEEP_SEEDS = (0, 1, 2)
SWEEP_TOTAL_IMAGES = 60_000


@pytest.fixture(scope="session")
def shapes_manifest(tmp_path_factory):
    """256/64 scenes at 32x32 with the default texture mix."""
    root = tmp_path_factory.mktemp("shapes32")
    spec = SceneSpec(
        img_size=32,
        shape_family="mixed",
        fg_texture="flat",
        bg_texture="patches",
        area_range=(0.1, 0.3),
        seed=11,
    )
    return build_dataset(spec, 256, 64, root)


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    """64/16 scenes at 16x16 for second-scale training tests."""
    root = tmp_path_factory.mktemp("shapes16")
    spec = SceneSpec(
        img_size=16,
        shape_family="mixed",
        fg_texture="flat",
        bg_texture="patches",
        area_range=(0.1, 0.3),
        seed=3,
    )
    return build_dataset(spec, 64, 16, root)


@pytest.fixture(scope="session")
def tiny_run(tiny_manifest, tmp_path_factory):
    """A 10-step training run; reused by checkpoint-consuming tests."""
    out = tmp_path_factory.mktemp("tiny_run")
    cfg = helpers.tiny_train_config()
    ckpt = fit(cfg, tiny_manifest, out)
    return {"ckpt": ckpt, "cfg": cfg, "dir": out, "manifest": tiny_manifest}


def _evaluate_sweep_run(ckpt, manifest, seed: int, extractor_cache: Path) -> dict:
    payload = load_checkpoint(ckpt)
    hist = payload["history"]
    decile = max(1, len(hist) // 10)
    head, tail = hist[:decile], hist[-decile:]
    seg = eval_segmentation(ckpt, manifest, SegEvalConfig(seed=seed))
    mi = eval_mi(ckpt, n=4096, seed=seed)
    fid = fid_from_checkpoint(
        ckpt, manifest, n=2048, seed=seed, cache_path=extractor_cache
    )
    return {
        "iou": seg.iou,
        "dice": seg.dice,
        "mi": mi.value,
        "mi_raw": mi.raw_value,
        "fid": fid.value,
        "mask_bin_end": sum(h["mask_bin"] for h in tail) / len(tail),
        "vclub_first_median": helpers.median([h["vclub"] for h in head]),
        "vclub_last_median": helpers.median([h["vclub"] for h in tail]),
    }


@pytest.fixture(scope="session")
def sweep_results(tmp_path_factory):
    """Train and evaluate the full lambda/seed grid (the long-running suite).

    Fifteen 32x32 runs on a 2048-scene dataset; each entry carries the
    post-hoc segmentation scores, the layerwise MI estimate, the generation
    quality score, and summary statistics of the training history.
    """
    base = tmp_path_factory.mktemp("sweep")
    spec = SceneSpec(
        img_size=32,
        shape_family="mixed",
        fg_texture="flat",
        bg_texture="patches",
        area_range=(0.1, 0.3),
        seed=7,
    )
    manifest = build_dataset(spec, 2048, 256, base / "data")
    extractor_cache = base / "fid_extractor.pt"
    entries = []
    for lam in SWEEP_LAMBDAS:
        for seed in SWEEP_SEEDS:
            run_dir = base / f"lam{lam:g}_seed{seed}"
            cfg = TrainConfig(
                net=NetConfig(img_size=32, base_channels=32),
                weights=LossWeights(lambda_ils=lam),
                ils=IlsOptions(),
                batch_size=32,
                total_images_shown=SWEEP_TOTAL_IMAGES,
                seed=seed,
                checkpoint_every=SWEEP_TOTAL_IMAGES,
                log_every=1000,
            )
            t0 = time.time()
            ckpt = fit(cfg, manifest, run_dir)
            entry = {"lambda_ils": lam, "seed": seed, "ckpt": str(ckpt)}
            entry.update(_evaluate_sweep_run(ckpt, manifest, seed, extractor_cache))
            entry["minutes"] = (time.time() - t0) / 60.0
            entries.append(entry)
            print(
                f"[sweep] lam={lam:g} seed={seed}: iou={entry['iou']:.4f} "
                f"mi={entry['mi']:.4f} fid={entry['fid']:.2f} "
                f"mask_bin_end={entry['mask_bin_end']:.4f} "
                f"({entry['minutes']:.1f} min)",
                flush=True,
            )
    (base / "sweep_entries.json").write_text(json.dumps(entries, indent=2))
    return {"entries": entries, "dir": base, "manifest": manifest}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if helpers.ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in helpers.ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
