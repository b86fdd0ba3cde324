"""Synthetic longitudinal head phantoms with transplanted lesion masks.

Anatomy is a set of concentric ellipsoidal shells (white-like core, gray-like
shell, CSF-like ring, background) whose boundaries wobble with a smooth random
field. The second timepoint thickens the CSF ring inwards (atrophy) and carries
a smooth multiplicative bias field. Lesion masks only mark inpainting targets;
the images always stay the healthy ground truth.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volumeio import LongitudinalSample, Volume3D, save_sample, write_manifest

log = logging.getLogger(__name__)

MAX_ATTEMPTS_PER_LESION = 100

# Radial boundaries in normalized ellipsoid units and tissue intensities.
WHITE_RADIUS = 0.42
GRAY_RADIUS = 0.64
CSF_RADIUS = 0.80
INTENSITY = {"csf": 0.15, "gray": 0.55, "white": 0.85}
BOUNDARY_WOBBLE = 0.04
TEXTURE = 0.03
LESION_PERSISTENCE = 0.7


class LesionPlacementWarning(UserWarning):
    """Fewer lesions than requested could be placed."""


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = (32, 64, 64)
    seed: int = 0
    atrophy_factor: float = 0.03
    bias_amplitude: float = 0.05
    lesion_count_range: tuple[int, int] = (8, 14)
    lesion_radius_range: tuple[int, int] = (2, 5)

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        object.__setattr__(self, "lesion_count_range", tuple(int(n) for n in self.lesion_count_range))
        object.__setattr__(self, "lesion_radius_range", tuple(int(n) for n in self.lesion_radius_range))
        if len(self.dims) != 3 or min(self.dims) < 16:
            raise ValueError(f"phantom dims must be >= (16, 16, 16), got {self.dims}")
        if not 0.0 <= self.atrophy_factor <= 0.05:
            raise ValueError("atrophy_factor must lie in [0, 0.05]")
        if not 0.0 <= self.bias_amplitude <= 0.1:
            raise ValueError("bias_amplitude must lie in [0, 0.1]")
        lo, hi = self.lesion_count_range
        if lo < 0 or lo > hi:
            raise ValueError(f"invalid lesion_count_range {self.lesion_count_range}")
        lo, hi = self.lesion_radius_range
        if lo < 1 or lo > hi:
            raise ValueError(f"invalid lesion_radius_range {self.lesion_radius_range}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}


def smooth_field(dims, rng: np.random.Generator) -> np.ndarray:
    """Unit-scale smooth noise: low-resolution Gaussian noise, trilinearly upsampled."""
    low = tuple(max(2, n // 8) for n in dims)
    coarse = rng.standard_normal(low)
    zoom = [n / m for n, m in zip(dims, low)]
    out = ndimage.zoom(coarse, zoom, order=1, mode="nearest", grid_mode=True)
    return out[: dims[0], : dims[1], : dims[2]]


def _radius_grid(dims) -> np.ndarray:
    axes = [(np.arange(n) + 0.5) / n * 2.0 - 1.0 for n in dims]
    d, h, w = np.meshgrid(*axes, indexing="ij")
    return np.sqrt(d**2 + h**2 + w**2)


def _render(r: np.ndarray, texture: np.ndarray, atrophy: float):
    """Tissue image and CSF mask for one timepoint.

    Atrophy pulls the gray and white boundaries inwards while the outer brain
    boundary stays fixed, so the CSF ring widens.
    """
    shrink = 1.0 - atrophy
    white = r < WHITE_RADIUS * shrink
    gray = ~white & (r < GRAY_RADIUS * shrink)
    brain = r < CSF_RADIUS
    csf = brain & ~white & ~gray
    img = np.zeros(r.shape)
    img[white] = INTENSITY["white"]
    img[gray] = INTENSITY["gray"]
    img[csf] = INTENSITY["csf"]
    img = np.where(brain, np.clip(img + TEXTURE * texture, 0.02, 1.0), 0.0)
    return img, csf, brain


def generate_phantom(cfg: PhantomConfig) -> LongitudinalSample:
    """Healthy two-timepoint phantom with empty lesion masks, a pure function of ``cfg``."""
    rng = np.random.default_rng(cfg.seed)
    wobble = smooth_field(cfg.dims, rng)
    texture = smooth_field(cfg.dims, rng)
    bias = smooth_field(cfg.dims, rng)
    r = _radius_grid(cfg.dims) * (1.0 + BOUNDARY_WOBBLE * wobble)

    img1, csf1, brain = _render(r, texture, 0.0)
    img2, csf2, _ = _render(r, texture, cfg.atrophy_factor)
    img2 = np.clip(img2 * (1.0 + cfg.bias_amplitude * bias), 0.0, 1.0)

    empty = np.zeros(cfg.dims, dtype=np.float32)
    mask = lambda a: Volume3D(a.astype(np.float32), kind="mask")  # noqa: E731
    return LongitudinalSample(
        img_t1=Volume3D(img1.astype(np.float32)),
        img_t2=Volume3D(img2.astype(np.float32)),
        lesion_mask_t1=mask(empty),
        lesion_mask_t2=mask(empty),
        csf_t1=mask(csf1),
        csf_t2=mask(csf2),
        brain_mask=mask(brain),
        subject_id=f"phantom-{cfg.seed:06d}",
        seed=cfg.seed,
    )


def _ellipsoid(dims, center, radii) -> tuple[tuple[slice, ...], np.ndarray]:
    """Bounding-box slices and the boolean ellipsoid inside them."""
    lo = [max(0, int(np.floor(c - r))) for c, r in zip(center, radii)]
    hi = [min(n, int(np.ceil(c + r)) + 1) for n, c, r in zip(dims, center, radii)]
    grids = np.meshgrid(
        *[(np.arange(a, b) - c) / r for a, b, c, r in zip(lo, hi, center, radii)], indexing="ij"
    )
    inside = sum(g**2 for g in grids) <= 1.0
    return tuple(slice(a, b) for a, b in zip(lo, hi)), inside


def _try_place(lesion, valid, center, radii) -> bool:
    box, inside = _ellipsoid(valid.shape, center, radii)
    if not inside.any() or not valid[box][inside].all():
        return False
    lesion[box] |= inside
    return True


def _place_new(lesion, valid, coords, cfg, rng) -> bool:
    rlo, rhi = cfg.lesion_radius_range
    for _ in range(MAX_ATTEMPTS_PER_LESION):
        center = coords[rng.integers(len(coords))] + rng.uniform(-0.5, 0.5, 3)
        radii = rng.uniform(rlo, rhi + 1e-9, 3)
        if _try_place(lesion, valid, center, radii):
            return True
    return False


def transplant_lesions(
    sample: LongitudinalSample, cfg: PhantomConfig, seed: int, strict: bool = False
) -> LongitudinalSample:
    """Add ellipsoidal lesion masks inside the brain, away from CSF.

    Each timepoint receives a count drawn from ``cfg.lesion_count_range``. A
    fraction of the t1 lesions persists at t2 with a changed size; the rest of
    the t2 lesions are new. Every lesion is rejection sampled up to 100 times
    and must lie entirely in valid tissue. Lesions that cannot be placed are
    reported with a ``LesionPlacementWarning`` (or ``RuntimeError`` if
    ``strict``).
    """
    if sample.lesion_mask_t1.data.any() or sample.lesion_mask_t2.data.any():
        raise ValueError("transplant_lesions expects empty lesion masks")
    if cfg.lesion_count_range == (0, 0):
        return sample
    rng = np.random.default_rng([seed, 0x1E51])
    valid = (
        (sample.brain_mask.data > 0) & (sample.csf_t1.data == 0) & (sample.csf_t2.data == 0)
    )
    coords = np.argwhere(valid).astype(float)
    if len(coords) == 0:
        raise RuntimeError("no valid tissue for lesion placement")

    n1, n2 = (int(rng.integers(cfg.lesion_count_range[0], cfg.lesion_count_range[1] + 1)) for _ in range(2))
    m1 = np.zeros(valid.shape, dtype=bool)
    m2 = np.zeros(valid.shape, dtype=bool)
    placed1 = []
    for _ in range(n1):
        before = m1.copy()
        if _place_new(m1, valid, coords, cfg, rng):
            placed1.append(m1 & ~before)

    placed2 = 0
    for blob in placed1:
        if placed2 >= n2:
            break
        if rng.random() < LESION_PERSISTENCE:
            # Persisting lesion: same blob grown or shrunk by one voxel.
            grow = rng.random() < 0.5
            changed = ndimage.binary_dilation(blob) if grow else ndimage.binary_erosion(blob)
            changed &= valid
            m2 |= changed if changed.any() else blob
            placed2 += 1
    while placed2 < n2 and _place_new(m2, valid, coords, cfg, rng):
        placed2 += 1

    short = (n1 - len(placed1), n2 - placed2)
    if any(short):
        msg = f"{sample.subject_id}: placed {len(placed1)}/{n1} (t1) and {placed2}/{n2} (t2) lesions"
        if strict:
            raise RuntimeError(msg)
        warnings.warn(msg, LesionPlacementWarning, stacklevel=2)

    return sample.replace(
        lesion_mask_t1=Volume3D(m1.astype(np.float32), sample.img_t1.spacing, "mask"),
        lesion_mask_t2=Volume3D(m2.astype(np.float32), sample.img_t1.spacing, "mask"),
    )


def make_subject(cfg: PhantomConfig) -> LongitudinalSample:
    return transplant_lesions(generate_phantom(cfg), cfg, cfg.seed)


def lesion_load(sample: LongitudinalSample) -> float:
    """Lesion voxels (both timepoints, mean) as a fraction of non-CSF brain tissue."""
    tissue = (sample.brain_mask.data > 0) & (sample.csf_t1.data == 0)
    lesions = sample.lesion_mask_t1.data.sum() + sample.lesion_mask_t2.data.sum()
    return float(lesions / 2.0 / tissue.sum())


def make_dataset(n_subjects: int, cfg: PhantomConfig, out_dir) -> Path:
    """Write ``n_subjects`` phantoms (seeds ``cfg.seed + i``) and a manifest."""
    if n_subjects < 1:
        raise ValueError("n_subjects must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n_subjects):
        sub_cfg = dataclasses.replace(cfg, seed=cfg.seed + i)
        sample = make_subject(sub_cfg)
        sample.validate()
        rel = Path(sample.subject_id)
        names = save_sample(sample, out_dir / rel)
        entries.append(
            {
                "subject_id": sample.subject_id,
                "seed": sub_cfg.seed,
                "volumes": {k: str(rel / v) for k, v in names.items()},
            }
        )
        log.debug("wrote %s (lesion load %.3f)", sample.subject_id, lesion_load(sample))
    meta = {"generator": "phantom", "config": cfg.to_dict(), "n_subjects": n_subjects}
    log.info("phantom config %s", json.dumps(meta, sort_keys=True))
    return write_manifest(out_dir / "manifest.json", entries, meta)
