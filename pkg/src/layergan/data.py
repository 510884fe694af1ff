"""Procedural single-object scenes with exact masks, plus external ingestion.

Foreground shapes use a warm palette and backgrounds a cool one; the palettes
are disjoint per channel, so the true layers carry almost no information about
each other and palette bleed in a trained model is easy to detect. Images are
[-1, 1] float tensors in memory and 8-bit PNGs on disk; masks are {0,1} in
memory and {0,255} on disk.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "layergan-data-1"

SHAPE_FAMILIES = ("ellipse", "rectangle", "triangle", "mixed")
FG_TEXTURES = ("flat", "gradient", "noise")
BG_TEXTURES = ("gradient", "perlin_like", "patches")

# Per-channel (lo, hi) boxes; warm and cool are disjoint in R and B.
_WARM_BOX = ((0.70, 1.00), (0.15, 0.65), (0.00, 0.25))
_COOL_BOX = ((0.00, 0.30), (0.25, 0.75), (0.55, 1.00))

_MAX_DRAW_TRIES = 500


@dataclass(frozen=True)
class SceneSpec:
    img_size: int = 32
    shape_family: str = "mixed"
    fg_texture: str = "flat"
    bg_texture: str = "patches"
    area_range: tuple[float, float] = (0.1, 0.3)
    seed: int = 0

    def __post_init__(self):
        if self.img_size < 8:
            raise ValueError(f"img_size must be >= 8, got {self.img_size}")
        if self.shape_family not in SHAPE_FAMILIES:
            raise ValueError(f"shape_family must be one of {SHAPE_FAMILIES}")
        if self.fg_texture not in FG_TEXTURES:
            raise ValueError(f"fg_texture must be one of {FG_TEXTURES}")
        if self.bg_texture not in BG_TEXTURES:
            raise ValueError(f"bg_texture must be one of {BG_TEXTURES}")
        lo, hi = self.area_range
        if not (0.1 <= lo < hi <= 0.6):
            raise ValueError(
                f"area_range must satisfy 0.1 <= lo < hi <= 0.6, got {self.area_range}"
            )
        families = SHAPE_FAMILIES[:3] if self.shape_family == "mixed" else (self.shape_family,)
        if any(_feasible_range(self, fam) is None for fam in families):
            raise ValueError(
                f"area_range {self.area_range} infeasible for "
                f"{self.shape_family} shapes at img_size={self.img_size}"
            )


@dataclass
class DatasetManifest:
    root: Path
    img_size: int
    spec_hash: str
    train: tuple[str, ...]
    test: tuple[str, ...]
    excluded: tuple[str, ...] = field(default_factory=tuple)

    def stems(self, split: str) -> tuple[str, ...]:
        if split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {split!r}")
        return self.train if split == "train" else self.test


def spec_hash(spec: SceneSpec) -> str:
    blob = json.dumps(
        {
            "img_size": spec.img_size,
            "shape_family": spec.shape_family,
            "fg_texture": spec.fg_texture,
            "bg_texture": spec.bg_texture,
            "area_range": list(spec.area_range),
            "seed": spec.seed,
        },
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# --- scene synthesis -------------------------------------------------------


def _max_area_frac(family: str, size: int) -> float:
    box = size - 2  # 1-pixel margin on every side
    if family == "ellipse":
        return (np.pi / 4.0) * box * box / (size * size)
    if family == "rectangle":
        return box * box / (size * size)
    return 0.5 * box * box / (size * size)  # triangle


def _feasible_range(spec: SceneSpec, family: str) -> tuple[float, float] | None:
    lo, hi = spec.area_range
    hi = min(hi, 0.92 * _max_area_frac(family, spec.img_size))
    if lo >= hi:
        return None
    return lo, hi


def _sample_color(box, rng: np.random.Generator) -> np.ndarray:
    return np.array([rng.uniform(lo, hi) for lo, hi in box], dtype=np.float32)


def _clip_to_box(img: np.ndarray, box) -> np.ndarray:
    for c, (lo, hi) in enumerate(box):
        img[c] = np.clip(img[c], lo, hi)
    return img


def _direction_field(size: int, rng: np.random.Generator) -> np.ndarray:
    """Normalized [0,1] projection of pixel centers onto a random direction."""
    theta = rng.uniform(0, 2 * np.pi)
    ys, xs = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="ij")
    t = xs * np.cos(theta) + ys * np.sin(theta)
    return ((t - t.min()) / max(t.max() - t.min(), 1e-9)).astype(np.float32)


def _lerp_colors(c0: np.ndarray, c1: np.ndarray, t: np.ndarray) -> np.ndarray:
    return c0[:, None, None] * (1.0 - t) + c1[:, None, None] * t


def _background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    size = spec.img_size
    if spec.bg_texture == "gradient":
        t = _direction_field(size, rng)
        bg = _lerp_colors(_sample_color(_COOL_BOX, rng), _sample_color(_COOL_BOX, rng), t)
    elif spec.bg_texture == "perlin_like":
        grid = np.stack([
            rng.uniform(lo, hi, size=(4, 4)) for lo, hi in _COOL_BOX
        ]).astype(np.float32)
        bg = ndimage.zoom(grid, (1, size / 4, size / 4), order=3)
    else:  # patches
        bg = np.tile(_sample_color(_COOL_BOX, rng)[:, None, None], (1, size, size))
        for _ in range(rng.integers(4, 9)):
            c = _sample_color(_COOL_BOX, rng)
            x0, y0 = rng.integers(0, size, size=2)
            w, h = rng.integers(3, max(4, size // 2), size=2)
            bg[:, y0 : y0 + h, x0 : x0 + w] = c[:, None, None]
    # distractor blobs: small cool ellipses that never match the warm palette
    ys, xs = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="ij")
    for _ in range(rng.integers(2, 6)):
        c = _sample_color(_COOL_BOX, rng)
        cx, cy = rng.uniform(2, size - 2, size=2)
        rx, ry = rng.uniform(1.0, 4.0, size=2)
        blob = ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0
        bg[:, blob] = c[:, None]
    return _clip_to_box(bg.astype(np.float32), _COOL_BOX)


def _draw_shape(family: str, target: float, size: int, rng: np.random.Generator) -> np.ndarray | None:
    """Rasterize one shape with ~target area fraction; None if it can't fit."""
    area = target * size * size
    ys, xs = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="ij")
    if family == "ellipse":
        q = rng.uniform(0.55, 1.8)
        a = np.sqrt(area * q / np.pi)
        b = a / q
        if 2 * a > size - 2 or 2 * b > size - 2:
            return None
        cx = rng.uniform(1 + a, size - 1 - a)
        cy = rng.uniform(1 + b, size - 1 - b)
        return (((xs - cx) / a) ** 2 + ((ys - cy) / b) ** 2 <= 1.0)
    if family == "rectangle":
        q = rng.uniform(0.55, 1.8)
        w = np.sqrt(area * q)
        h = w / q
        if w > size - 2 or h > size - 2:
            return None
        cx = rng.uniform(1 + w / 2, size - 1 - w / 2)
        cy = rng.uniform(1 + h / 2, size - 1 - h / 2)
        return (np.abs(xs - cx) <= w / 2) & (np.abs(ys - cy) <= h / 2)
    # isoceles triangle, apex up
    q = rng.uniform(0.7, 1.6)
    h = np.sqrt(2 * area / q)
    w = q * h
    if w > size - 2 or h > size - 2:
        return None
    cx = rng.uniform(1 + w / 2, size - 1 - w / 2)
    cy = rng.uniform(1 + h / 2, size - 1 - h / 2)
    v0 = (cx, cy - h / 2)
    v1 = (cx - w / 2, cy + h / 2)
    v2 = (cx + w / 2, cy + h / 2)

    def edge(p, q2):
        return (q2[0] - p[0]) * (ys - p[1]) - (q2[1] - p[1]) * (xs - p[0])

    # image coordinates put y downward, so this winding is clockwise and the
    # interior is where all edge functions are non-positive
    e0, e1, e2 = edge(v0, v1), edge(v1, v2), edge(v2, v0)
    return (e0 <= 0) & (e1 <= 0) & (e2 <= 0)


def _foreground(spec: SceneSpec, mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    size = spec.img_size
    if spec.fg_texture == "flat":
        fg = np.tile(_sample_color(_WARM_BOX, rng)[:, None, None], (1, size, size))
    elif spec.fg_texture == "gradient":
        t = _direction_field(size, rng)
        fg = _lerp_colors(_sample_color(_WARM_BOX, rng), _sample_color(_WARM_BOX, rng), t)
    else:  # noise
        base = _sample_color(_WARM_BOX, rng)[:, None, None]
        fg = base + rng.uniform(-0.08, 0.08, size=(3, size, size)).astype(np.float32)
    return _clip_to_box(fg.astype(np.float32), _WARM_BOX)


def generate_scene(spec: SceneSpec, rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """One object over a cluttered background.

    Returns (image [3,H,W] in [-1,1], mask [1,H,W] binary); the mask is
    exactly the object support and its area fraction lies in spec.area_range.
    """
    size = spec.img_size
    families = SHAPE_FAMILIES[:3] if spec.shape_family == "mixed" else (spec.shape_family,)
    lo, hi = spec.area_range
    mask = None
    for _ in range(_MAX_DRAW_TRIES):
        family = families[rng.integers(0, len(families))]
        rng_range = _feasible_range(spec, family)
        assert rng_range is not None  # checked at spec construction
        pad = 0.08 * (rng_range[1] - rng_range[0])
        target = rng.uniform(rng_range[0] + pad, rng_range[1] - pad)
        cand = _draw_shape(family, target, size, rng)
        if cand is None:
            continue
        frac = cand.mean()
        if lo <= frac <= hi:
            mask = cand
            break
    if mask is None:
        raise RuntimeError(
            f"could not place a shape within area_range {spec.area_range} "
            f"after {_MAX_DRAW_TRIES} tries (img_size={size})"
        )
    bg = _background(spec, rng)
    fg = _foreground(spec, mask, rng)
    img01 = np.where(mask[None], fg, bg)
    img = torch.from_numpy(img01 * 2.0 - 1.0).float()
    return img, torch.from_numpy(mask[None].astype(np.float32))


# --- disk round trip -------------------------------------------------------


def image_to_u8(img: torch.Tensor) -> np.ndarray:
    """[3,H,W] in [-1,1] -> HWC uint8."""
    arr = ((img.clamp(-1, 1) + 1.0) * 0.5 * 255.0).round().byte().numpy()
    return np.transpose(arr, (1, 2, 0))


def u8_to_image(arr: np.ndarray) -> torch.Tensor:
    t = torch.from_numpy(np.transpose(arr, (2, 0, 1)).astype(np.float32))
    return t / 255.0 * 2.0 - 1.0


def mask_to_u8(mask: torch.Tensor) -> np.ndarray:
    return (mask[0] > 0.5).byte().numpy() * 255


def u8_to_mask(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy((arr > 127).astype(np.float32))[None]


def _atomic_save(pil_img: Image.Image, path: Path) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        pil_img.save(tmp, format="PNG")
        tmp.replace(path)
    except OSError as exc:
        raise OSError(f"failed writing {path}: {exc}") from exc


def _write_scene(img: torch.Tensor, mask: torch.Tensor, img_path: Path, mask_path: Path) -> None:
    _atomic_save(Image.fromarray(image_to_u8(img), mode="RGB"), img_path)
    _atomic_save(Image.fromarray(mask_to_u8(mask), mode="L"), mask_path)


def _write_manifest(manifest: DatasetManifest) -> None:
    payload = {
        "format_version": MANIFEST_FORMAT,
        "img_size": manifest.img_size,
        "spec_hash": manifest.spec_hash,
        "splits": {"train": list(manifest.train), "test": list(manifest.test)},
        "counts": {"train": len(manifest.train), "test": len(manifest.test)},
        "excluded": list(manifest.excluded),
    }
    path = manifest.root / MANIFEST_NAME
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


def load_manifest(root: str | Path) -> DatasetManifest:
    """Read and validate manifest.json; every stem must have image and mask."""
    root = Path(root)
    path = root / MANIFEST_NAME
    if not path.is_file():
        raise FileNotFoundError(f"no {MANIFEST_NAME} under {root}")
    payload = json.loads(path.read_text())
    if payload.get("format_version") != MANIFEST_FORMAT:
        raise ValueError(f"unsupported manifest format in {path}")
    manifest = DatasetManifest(
        root=root,
        img_size=int(payload["img_size"]),
        spec_hash=str(payload["spec_hash"]),
        train=tuple(payload["splits"]["train"]),
        test=tuple(payload["splits"]["test"]),
        excluded=tuple(payload.get("excluded", ())),
    )
    for split in ("train", "test"):
        for stem in manifest.stems(split):
            for kind in ("images", "masks"):
                p = root / split / kind / f"{stem}.png"
                if not p.is_file():
                    raise FileNotFoundError(f"manifest lists {stem} but {p} is missing")
    return manifest


def load_pair(root: Path, split: str, stem: str) -> tuple[torch.Tensor, torch.Tensor]:
    img = u8_to_image(np.asarray(Image.open(root / split / "images" / f"{stem}.png").convert("RGB")))
    mask = u8_to_mask(np.asarray(Image.open(root / split / "masks" / f"{stem}.png").convert("L")))
    return img, mask


def load_split(manifest: DatasetManifest, split: str) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack a whole split into memory: ([N,3,H,W], [N,1,H,W])."""
    imgs, masks = [], []
    for stem in manifest.stems(split):
        img, mask = load_pair(manifest.root, split, stem)
        imgs.append(img)
        masks.append(mask)
    if not imgs:
        raise ValueError(f"split {split!r} is empty")
    return torch.stack(imgs), torch.stack(masks)


def dataset_up_to_date(
    spec: SceneSpec, n_train: int, n_test: int, out_dir: str | Path
) -> DatasetManifest | None:
    """An existing valid manifest matching (spec, counts), else None."""
    root = Path(out_dir)
    if not (root / MANIFEST_NAME).is_file():
        return None
    try:
        existing = load_manifest(root)
    except (ValueError, FileNotFoundError, KeyError):
        return None
    if (
        existing.spec_hash == spec_hash(spec)
        and len(existing.train) == n_train
        and len(existing.test) == n_test
    ):
        return existing
    return None


def build_dataset(
    spec: SceneSpec,
    n_train: int,
    n_test: int,
    out_dir: str | Path,
    force: bool = False,
) -> DatasetManifest:
    """Generate the dataset under out_dir and write manifest.json.

    Train and test scenes draw from disjoint per-scene seed streams derived
    from spec.seed, so rebuilding with the same spec is bit-identical. An
    existing matching dataset is returned as-is unless force is set.
    """
    if n_train < 1 or n_test < 1:
        raise ValueError("n_train and n_test must be >= 1")
    root = Path(out_dir)
    if not force:
        existing = dataset_up_to_date(spec, n_train, n_test, root)
        if existing is not None:
            return existing
    splits: dict[str, list[str]] = {"train": [], "test": []}
    for split, count, offset in (("train", n_train, 0), ("test", n_test, 1 << 24)):
        (root / split / "images").mkdir(parents=True, exist_ok=True)
        (root / split / "masks").mkdir(parents=True, exist_ok=True)
        for i in range(count):
            rng = np.random.default_rng((spec.seed, offset + i))
            img, mask = generate_scene(spec, rng)
            stem = f"{split}_{i:05d}"
            _write_scene(
                img, mask,
                root / split / "images" / f"{stem}.png",
                root / split / "masks" / f"{stem}.png",
            )
            splits[split].append(stem)
    manifest = DatasetManifest(
        root=root,
        img_size=spec.img_size,
        spec_hash=spec_hash(spec),
        train=tuple(splits["train"]),
        test=tuple(splits["test"]),
    )
    _write_manifest(manifest)
    return manifest


# --- external ingestion ----------------------------------------------------


_RASTER_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".webp")


def _read_bboxes(path: Path) -> dict[str, tuple[int, int, int, int]]:
    boxes = {}
    for line_no, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ValueError(f"{path}:{line_no}: expected 'stem x0 y0 x1 y1', got {line!r}")
        stem, *coords = parts
        x0, y0, x1, y1 = (int(c) for c in coords)
        if x1 <= x0 or y1 <= y0:
            raise ValueError(f"{path}:{line_no}: degenerate box for {stem}")
        boxes[stem] = (x0, y0, x1, y1)
    return boxes


def _square_box(x0: int, y0: int, x1: int, y1: int, w: int, h: int) -> tuple[int, int, int, int]:
    """Expand the short side around its center, clamped to the image."""
    side = min(max(x1 - x0, y1 - y0), w, h)
    cx, cy = (x0 + x1) // 2, (y0 + y1) // 2
    left = min(max(cx - side // 2, 0), w - side)
    top = min(max(cy - side // 2, 0), h - side)
    return left, top, left + side, top + side


def _center_box(w: int, h: int) -> tuple[int, int, int, int]:
    side = min(w, h)
    left = (w - side) // 2
    top = (h - side) // 2
    return left, top, left + side, top + side


def ingest_external(
    root: str | Path,
    crop: str,
    size: int,
    out_dir: str | Path,
) -> DatasetManifest:
    """Square-crop and resize an external image(/mask) tree into our layout.

    Source layout: root/{train,test}/images/*.<ext> with optional sibling
    masks/ dirs (matched by stem). bbox mode reads root/<split>/bboxes.txt or
    root/bboxes.txt with one 'stem x0 y0 x1 y1' record per image. Unreadable
    files are skipped with a warning and listed in the manifest's exclusions.
    """
    if crop not in ("center", "bbox"):
        raise ValueError(f"crop must be 'center' or 'bbox', got {crop!r}")
    if size < 8:
        raise ValueError(f"size must be >= 8, got {size}")
    src = Path(root)
    dst = Path(out_dir)
    splits_present = [s for s in ("train", "test") if (src / s / "images").is_dir()]
    if not splits_present:
        raise ValueError(f"no train/images or test/images directory under {src}")
    out_splits: dict[str, list[str]] = {"train": [], "test": []}
    excluded: list[str] = []
    for split in splits_present:
        img_dir = src / split / "images"
        mask_dir = src / split / "masks"
        boxes = None
        if crop == "bbox":
            bbox_path = next(
                (p for p in (src / split / "bboxes.txt", src / "bboxes.txt") if p.is_file()),
                None,
            )
            if bbox_path is None:
                raise ValueError(
                    f"bbox crop requires bboxes.txt under {src / split} or {src}"
                )
            boxes = _read_bboxes(bbox_path)
        (dst / split / "images").mkdir(parents=True, exist_ok=True)
        (dst / split / "masks").mkdir(parents=True, exist_ok=True)
        for path in sorted(img_dir.iterdir()):
            if path.suffix.lower() not in _RASTER_EXTS:
                continue
            stem = path.stem
            try:
                with Image.open(path) as im:
                    img = im.convert("RGB")
            except OSError as exc:
                warnings.warn(f"skipping unreadable image {path}: {exc}")
                excluded.append(f"{split}/{stem}")
                continue
            if boxes is not None:
                if stem not in boxes:
                    warnings.warn(f"skipping {path}: no bbox record for {stem}")
                    excluded.append(f"{split}/{stem}")
                    continue
                box = _square_box(*boxes[stem], img.width, img.height)
            else:
                box = _center_box(img.width, img.height)
            img = img.crop(box).resize((size, size), Image.BILINEAR)
            mask_path = next(
                (mask_dir / f"{stem}{ext}" for ext in _RASTER_EXTS
                 if (mask_dir / f"{stem}{ext}").is_file()),
                None,
            )
            if mask_path is not None:
                try:
                    with Image.open(mask_path) as mm:
                        mask_im = mm.convert("L")
                except OSError as exc:
                    warnings.warn(f"skipping {path}: unreadable mask {mask_path}: {exc}")
                    excluded.append(f"{split}/{stem}")
                    continue
                mask_im = mask_im.crop(box).resize((size, size), Image.NEAREST)
                mask_arr = (np.asarray(mask_im) > 127).astype(np.uint8) * 255
            else:
                # no annotation: record an all-background placeholder mask so
                # the manifest invariant (image+mask per stem) still holds
                mask_arr = np.zeros((size, size), dtype=np.uint8)
            _atomic_save(img, dst / split / "images" / f"{stem}.png")
            _atomic_save(
                Image.fromarray(mask_arr, mode="L"), dst / split / "masks" / f"{stem}.png"
            )
            out_splits[split].append(stem)
    digest = hashlib.sha256(f"external:{crop}:{size}".encode()).hexdigest()[:16]
    manifest = DatasetManifest(
        root=dst,
        img_size=size,
        spec_hash=digest,
        train=tuple(out_splits["train"]),
        test=tuple(out_splits["test"]),
        excluded=tuple(excluded),
    )
    _write_manifest(manifest)
    return manifest
