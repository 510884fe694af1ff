"""Layered image synthesis with independence losses.

Two generators share a latent: one emits a foreground plus mask, the other a
background. Scenes are composed as m*f + (1-m)*b, the discriminator sees a
randomly shifted composition, and a variational upper bound on the mutual
information between the layers' visible/invisible regions is minimized so the
emerging mask is a usable segmentation.
"""

__version__ = "0.1.0"

from .layerops import LayerTriplet, PerturbSpec, RegionSplit, compose, perturb_compose, split_regions
from .losses import IlsOptions, LossWeights, ils_loss
from .mi import MIEstimate, MineConfig, mine_estimate, vclub_estimate
from .models import NetConfig, build_discriminator, build_generators, build_segmenter, synthesize
from .data import DatasetManifest, SceneSpec, build_dataset, generate_scene, load_manifest
from .training import TrainConfig, TrainState, fit, sample_synthetic, train_step
from .evaluation import SegEvalConfig, SegMetrics, correlation_report, eval_segmentation, fid_lite, seg_metrics

__all__ = [
    "LayerTriplet", "PerturbSpec", "RegionSplit", "compose", "perturb_compose", "split_regions",
    "IlsOptions", "LossWeights", "ils_loss",
    "MIEstimate", "MineConfig", "mine_estimate", "vclub_estimate",
    "NetConfig", "build_discriminator", "build_generators", "build_segmenter", "synthesize",
    "DatasetManifest", "SceneSpec", "build_dataset", "generate_scene", "load_manifest",
    "TrainConfig", "TrainState", "fit", "sample_synthetic", "train_step",
    "SegEvalConfig", "SegMetrics", "correlation_report", "eval_segmentation", "fid_lite", "seg_metrics",
    "__version__",
]
