"""Reverse-diffusion inpainting.

``rad_inpaint`` starts halfway through the schedule with a clean background
and pure noise inside the lesion masks; only masked voxels are ever updated,
everything else is carried along by exact copy. ``cddpm_inpaint`` is the global
baseline: it denoises the whole volume from pure noise and pastes the result
into the original image at the end.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch

from .network import NonFiniteError, P3DUNet
from .schedule import NoiseSchedule, make_linear_schedule, predict_x0_eps, rad_region_map
from .volumeio import LongitudinalSample, Volume3D, condition_channels

log = logging.getLogger(__name__)

MODES = ("rad", "cddpm")


@dataclass(frozen=True)
class SamplerConfig:
    mode: str = "rad"
    steps: int = 100
    eta: float | None = None
    seed: int = 0
    record_nfe: bool = True
    clip_denoised: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.eta is not None and not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")

    @property
    def resolved_eta(self) -> float:
        if self.eta is not None:
            return float(self.eta)
        return 0.0 if self.mode == "rad" else 1.0

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "steps": self.steps,
            "eta": self.resolved_eta,
            "seed": self.seed,
            "record_nfe": self.record_nfe,
            "clip_denoised": self.clip_denoised,
        }


class InpaintResult(NamedTuple):
    inp_t1: Volume3D
    inp_t2: Volume3D
    stats: dict


def step_grid(start: int, steps: int) -> np.ndarray:
    """``steps + 1`` evenly spaced integer steps from ``start`` down to 0, strictly decreasing."""
    if steps > start:
        raise ValueError(f"{steps} steps do not fit below t={start}")
    return np.floor(np.linspace(start, 0, steps + 1) + 0.5).astype(np.int64)


def _schedule_for(model: P3DUNet, schedule: NoiseSchedule | None) -> NoiseSchedule:
    return schedule or make_linear_schedule(model.config.max_timestep)


class _Denoiser:
    """Shared per-voxel reverse update for both samplers."""

    def __init__(self, model, schedule, sample, cfg: SamplerConfig):
        self.model = model
        self.schedule = schedule
        self.cfg = cfg
        self.dtype = model.config.dtype
        self.static = torch.as_tensor(condition_channels(sample), dtype=self.dtype)[None]
        self.alpha_bar = torch.tensor(np.array(schedule.alpha_bar), dtype=self.dtype)
        self.rng = np.random.default_rng(cfg.seed)
        self.nfe = 0

    def noise(self, dims) -> torch.Tensor:
        return torch.as_tensor(self.rng.standard_normal(dims), dtype=self.dtype)

    @torch.no_grad()
    def step(self, xs, taus, taus_next):
        x = torch.cat([self.static, torch.stack(xs)[None]], dim=1)
        tau1, tau2 = (torch.as_tensor(t)[None] for t in taus)
        v_hat = self.model(x, tau1, tau2)[0]
        self.nfe += 1
        return [self._update(x_k, v_hat[k], taus[k], taus_next[k]) for k, x_k in enumerate(xs)]

    def _update(self, x, v, tau, tau_next):
        s = self.schedule
        tau = torch.as_tensor(tau)
        tau_next = torch.as_tensor(tau_next)
        x0, eps = predict_x0_eps(s, x, v, tau)
        alpha, sigma = s.coefficients(tau, x)
        if self.cfg.clip_denoised:
            x0 = x0.clamp(0.0, 1.0)
            eps = torch.where(sigma > 0, (x - alpha * x0) / torch.where(sigma > 0, sigma, 1.0), eps)
        ab, ab_next = self.alpha_bar[tau], self.alpha_bar[tau_next]
        eta = self.cfg.resolved_eta
        alpha_next = ab_next.sqrt()
        if eta > 0:
            active = tau > 0
            ratio = torch.where(active, (1 - ab_next) / torch.where(active, 1 - ab, 1.0), 0.0)
            sigma_eta = eta * (ratio * (1 - ab / ab_next)).clamp_min(0).sqrt()
            c = (1 - ab_next - sigma_eta**2).clamp_min(0).sqrt()
            x_next = alpha_next * x0 + c * eps + sigma_eta * self.noise(tuple(x.shape))
        else:
            x_next = alpha_next * x0 + (1 - ab_next).sqrt() * eps
        # Clean voxels are carried over untouched.
        return torch.where(tau > 0, x_next, x)


def _finite_or_raise(xs, index: int, t: int):
    for x in xs:
        if not torch.isfinite(x).all():
            raise NonFiniteError(f"non-finite sampler state at step {index} (t={t})")


def _to_volume(x: torch.Tensor, like: Volume3D) -> Volume3D:
    arr = x.detach().cpu().numpy().astype(np.float32)
    kind = "image" if arr.min() >= 0.0 and arr.max() <= 1.0 else "field"
    return Volume3D(arr, like.spacing, kind)


def _masks(sample: LongitudinalSample):
    return sample.lesion_mask_t1.data > 0, sample.lesion_mask_t2.data > 0


def rad_inpaint(model: P3DUNet, sample: LongitudinalSample, cfg: SamplerConfig | None = None,
                schedule: NoiseSchedule | None = None) -> InpaintResult:
    """Region-aware inpainting of both timepoints from ``t = T/2``."""
    cfg = cfg or SamplerConfig(mode="rad")
    schedule = _schedule_for(model, schedule)
    t0 = time.perf_counter()
    m1, m2 = _masks(sample)
    stats = {"mode": "rad", "steps": cfg.steps, "nfe": 0, "seconds": 0.0,
             "voxels_inpainted": int(m1.sum() + m2.sum())}
    if not (m1.any() or m2.any()):
        return InpaintResult(sample.img_t1, sample.img_t2, stats)
    if cfg.steps > schedule.T // 2:
        raise ValueError(f"rad sampling allows at most T/2={schedule.T // 2} steps")

    model.eval()
    den = _Denoiser(model, schedule, sample, cfg)
    imgs = (sample.img_t1, sample.img_t2)
    masks = (m1, m2)
    xs = []
    for img, m in zip(imgs, masks):
        noise = den.noise(img.dims)
        xs.append(torch.where(torch.as_tensor(m), noise, torch.tensor(img.data).to(den.dtype)))
    grid = step_grid(schedule.T // 2, cfg.steps)
    for i, (t, t_next) in enumerate(zip(grid[:-1], grid[1:])):
        taus = [rad_region_map(schedule, int(t), m).tau for m in masks]
        taus_next = [rad_region_map(schedule, int(t_next), m).tau for m in masks]
        xs = den.step(xs, taus, taus_next)
        _finite_or_raise(xs, i, int(t))
    stats["nfe"] = den.nfe
    stats["seconds"] = time.perf_counter() - t0
    return InpaintResult(_to_volume(xs[0], sample.img_t1), _to_volume(xs[1], sample.img_t2), stats)


def fuse(generated: np.ndarray, original: Volume3D, mask: np.ndarray) -> Volume3D:
    """Generated content inside the mask, the original image elsewhere."""
    out = np.where(mask, generated.astype(np.float32), original.data)
    kind = "image" if out.min() >= 0.0 and out.max() <= 1.0 else "field"
    return Volume3D(out, original.spacing, kind)


def cddpm_inpaint(model: P3DUNet, sample: LongitudinalSample, cfg: SamplerConfig | None = None,
                  schedule: NoiseSchedule | None = None) -> InpaintResult:
    """Global conditional denoising from ``t = T`` followed by mask fusion."""
    cfg = cfg or SamplerConfig(mode="cddpm")
    schedule = _schedule_for(model, schedule)
    t0 = time.perf_counter()
    m1, m2 = _masks(sample)
    stats = {"mode": "cddpm", "steps": cfg.steps, "nfe": 0, "seconds": 0.0,
             "voxels_inpainted": int(m1.sum() + m2.sum())}
    if not (m1.any() or m2.any()):
        return InpaintResult(sample.img_t1, sample.img_t2, stats)
    if cfg.steps > schedule.T:
        raise ValueError(f"cddpm sampling allows at most T={schedule.T} steps")

    model.eval()
    den = _Denoiser(model, schedule, sample, cfg)
    dims = sample.dims
    xs = [den.noise(dims), den.noise(dims)]
    grid = step_grid(schedule.T, cfg.steps)
    for i, (t, t_next) in enumerate(zip(grid[:-1], grid[1:])):
        taus = [np.full(dims, int(t), dtype=np.int64)] * 2
        taus_next = [np.full(dims, int(t_next), dtype=np.int64)] * 2
        xs = den.step(xs, taus, taus_next)
        _finite_or_raise(xs, i, int(t))
    stats["nfe"] = den.nfe
    stats["seconds"] = time.perf_counter() - t0
    gen = [x.cpu().numpy() for x in xs]
    return InpaintResult(fuse(gen[0], sample.img_t1, m1), fuse(gen[1], sample.img_t2, m2), stats)


def inpaint(model, sample, cfg: SamplerConfig | None = None, schedule=None) -> InpaintResult:
    cfg = cfg or SamplerConfig()
    fn = rad_inpaint if cfg.mode == "rad" else cddpm_inpaint
    return fn(model, sample, cfg, schedule)


def slab_starts(depth: int, window: int, overlap: int) -> list[int]:
    """Start slices of overlapping slabs that tile ``[0, depth)``."""
    if not 0 <= overlap < window:
        raise ValueError("overlap must lie in [0, window)")
    stride = window - overlap
    starts = list(range(0, depth - window + 1, stride))
    if starts[-1] + window < depth:
        starts.append(depth - window)
    return starts


def feather_weights(depth: int, starts, window: int, overlap: int) -> np.ndarray:
    """Per-slab, per-slice blending weights (n_slabs, depth), normalized where covered.

    Each slab ramps up linearly over ``overlap`` slices at interior edges;
    slices covered by a single slab get weight exactly 1.
    """
    raw = np.zeros((len(starts), depth))
    d = np.arange(depth)
    for i, s in enumerate(starts):
        inside = (d >= s) & (d < s + window)
        ramp = np.ones(depth)
        if overlap > 0:
            if s > 0:
                ramp = np.minimum(ramp, (d - s + 1) / (overlap + 1))
            if s + window < depth:
                ramp = np.minimum(ramp, (s + window - d) / (overlap + 1))
        raw[i] = np.where(inside, ramp, 0.0)
    total = raw.sum(axis=0)
    return np.divide(raw, total, out=np.zeros_like(raw), where=total > 0)


def inpaint_volume(model, sample: LongitudinalSample, cfg: SamplerConfig | None = None,
                   window: int = 32, overlap: int = 8, schedule=None) -> InpaintResult:
    """Inpaint volumes deeper than the training window by feathered axial slabs."""
    cfg = cfg or SamplerConfig()
    depth = sample.dims[0]
    if depth <= window:
        return inpaint(model, sample, cfg, schedule)
    t0 = time.perf_counter()
    m1, m2 = _masks(sample)
    lesion_slices = (m1 | m2).reshape(depth, -1).any(axis=1)
    starts = [s for s in slab_starts(depth, window, overlap) if lesion_slices[s : s + window].any()]
    stats = {"mode": cfg.mode, "steps": cfg.steps, "nfe": 0, "seconds": 0.0,
             "voxels_inpainted": int(m1.sum() + m2.sum()), "slabs": len(starts)}
    if not starts:
        return InpaintResult(sample.img_t1, sample.img_t2, stats)
    weights = feather_weights(depth, starts, window, overlap)
    acc = [np.zeros(sample.dims, dtype=np.float64), np.zeros(sample.dims, dtype=np.float64)]
    for i, s in enumerate(starts):
        slab_cfg = SamplerConfig(cfg.mode, cfg.steps, cfg.eta, cfg.seed + i, cfg.record_nfe, cfg.clip_denoised)
        res = inpaint(model, sample.crop_axial(s, s + window), slab_cfg, schedule)
        stats["nfe"] += res.stats["nfe"]
        w = weights[i, s : s + window, None, None]
        for k, vol in enumerate((res.inp_t1, res.inp_t2)):
            acc[k][s : s + window] += w * vol.data
    stats["seconds"] = time.perf_counter() - t0
    out = [fuse(acc[0], sample.img_t1, m1), fuse(acc[1], sample.img_t2, m2)]
    return InpaintResult(out[0], out[1], stats)
