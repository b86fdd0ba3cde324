"""Pseudo-3D region-aware diffusion inpainting for longitudinal lesion volumes."""

from .estimator import RegionAwareInpainter
from .metrics import MetricReport, evaluate, pproxy, tfi
from .network import TINY, NetworkConfig, P3DUNet, load_checkpoint, save_checkpoint
from .phantom import PhantomConfig, make_dataset, make_subject
from .sampler import SamplerConfig, cddpm_inpaint, inpaint, inpaint_volume, rad_inpaint
from .schedule import NoiseSchedule, make_linear_schedule, rad_region_map
from .train import TrainConfig, Trainer, train
from .volumeio import LongitudinalSample, Volume3D, load_volume, read_manifest, save_volume

__version__ = "0.1.0"

__all__ = [
    "LongitudinalSample",
    "MetricReport",
    "NetworkConfig",
    "NoiseSchedule",
    "P3DUNet",
    "PhantomConfig",
    "RegionAwareInpainter",
    "SamplerConfig",
    "TINY",
    "TrainConfig",
    "Trainer",
    "Volume3D",
    "cddpm_inpaint",
    "evaluate",
    "inpaint",
    "inpaint_volume",
    "load_checkpoint",
    "load_volume",
    "make_dataset",
    "make_linear_schedule",
    "make_subject",
    "pproxy",
    "rad_inpaint",
    "rad_region_map",
    "read_manifest",
    "save_checkpoint",
    "save_volume",
    "tfi",
    "train",
]
