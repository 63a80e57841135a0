"""Learned image compression with JND-guided rate-distortion losses."""

from jndlc.codec import ArchDescriptor, Codec, QuantMode, estimate_rate_bpp, quantize
from jndlc.compression import compress, decompress
from jndlc.data import ManifestEntry, PatchSpec, SamplePair, Source, load_image, mix_sources, save_image, synth_jnd_proxy, toy_pairs
from jndlc.features import load_feature_extractor, seeded_random_extractor
from jndlc.losses import LossConfig, compute_distortion, loss_baseline, loss_fwl, loss_iwl, loss_pwl, objective
from jndlc.metrics import JNDQuality, RDCurve, RDPoint, RDResults, bd_rate, bs_jnd, msssim_metric, psnr
from jndlc.results import load_results, write_results
from jndlc.training import Checkpoint, TrainConfig, evaluate, evaluate_sweep, sweep, train

__version__ = "0.1.0"

__all__ = [
    "ArchDescriptor", "Codec", "QuantMode", "estimate_rate_bpp", "quantize",
    "compress", "decompress",
    "ManifestEntry", "PatchSpec", "SamplePair", "Source", "load_image", "mix_sources", "save_image",
    "synth_jnd_proxy", "toy_pairs",
    "load_feature_extractor", "seeded_random_extractor",
    "LossConfig", "compute_distortion", "loss_baseline", "loss_fwl", "loss_iwl", "loss_pwl", "objective",
    "JNDQuality", "RDCurve", "RDPoint", "RDResults", "bd_rate", "bs_jnd", "msssim_metric", "psnr",
    "load_results", "write_results",
    "Checkpoint", "TrainConfig", "evaluate", "evaluate_sweep", "sweep", "train",
]
