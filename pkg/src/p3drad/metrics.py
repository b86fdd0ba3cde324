"""Inpainting quality metrics and the evaluation harness.

Voxel metrics (NRMSE, PSNR) and SSIM are restricted to the inpainting region.
The perceptual distance is pluggable; the default is ``1 - MS-SSIM`` over three
dyadic scales, computed slice by slice in a chosen anatomical view. Comparing
views exposes inter-slice discontinuities: a volume whose axial slices are
fine but inconsistent along D scores much worse in sagittal and coronal views.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import ndimage

from .volumeio import Volume3D, load_volume, read_manifest

log = logging.getLogger(__name__)

DATA_RANGE = 1.0
GAUSSIAN_SIGMA = 1.5
GAUSSIAN_TRUNCATE = 3.5  # radius 5 -> 11 x 11 window
K1, K2 = 0.01, 0.03
MS_SSIM_SCALES = 3
MIN_SCALE_SIDE = 4

# Slicing axis of each view for (D, H, W) volumes with D the axial direction.
VIEW_AXES = {"axial": 0, "coronal": 1, "sagittal": 2}
VIEWS = ("axial", "sagittal", "coronal")

METRIC_NAMES = (
    "nrmse", "psnr", "ssim",
    "pproxy_axial", "pproxy_sagittal", "pproxy_coronal", "pproxy_avg",
    "tfi", "nrmse_whole", "psnr_whole", "ssim_whole",
    "orig_pair_distance", "inpainted_pair_distance", "nfe", "seconds",
)


def _arr(v) -> np.ndarray:
    return np.asarray(v.data if isinstance(v, Volume3D) else v, dtype=np.float64)


def _region(region, shape) -> np.ndarray:
    if region is None:
        return np.ones(shape, dtype=bool)
    return _arr(region) > 0


def _check_pair(pred, truth):
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")


def nrmse(pred, truth, region, brain_mask=None) -> float:
    """RMSE over ``region`` divided by the intensity range of ``truth`` over the brain."""
    p, t = _arr(pred), _arr(truth)
    _check_pair(p, t)
    r = _region(region, t.shape)
    if not r.any():
        raise ValueError("empty region")
    ref = t[_region(brain_mask, t.shape)]
    span = float(ref.max() - ref.min()) if ref.size else 0.0
    if span == 0.0:
        raise ValueError("truth has zero intensity range")
    return float(np.sqrt(np.mean((p[r] - t[r]) ** 2)) / span)


def psnr(pred, truth, region) -> float:
    """``10 log10(1 / MSE)`` over ``region``; identical inputs give ``inf``."""
    p, t = _arr(pred), _arr(truth)
    _check_pair(p, t)
    r = _region(region, t.shape)
    if not r.any():
        raise ValueError("empty region")
    mse = float(np.mean((p[r] - t[r]) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(DATA_RANGE**2 / mse)


def _filter(x: np.ndarray) -> np.ndarray:
    return ndimage.gaussian_filter(x, GAUSSIAN_SIGMA, mode="reflect", truncate=GAUSSIAN_TRUNCATE)


def ssim_maps(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pixelwise SSIM and contrast-structure maps of two 2D images (Gaussian window)."""
    c1, c2 = (K1 * DATA_RANGE) ** 2, (K2 * DATA_RANGE) ** 2
    mu_a, mu_b = _filter(a), _filter(b)
    var_a = _filter(a * a) - mu_a * mu_a
    var_b = _filter(b * b) - mu_b * mu_b
    cov = _filter(a * b) - mu_a * mu_b
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    lum = (2 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1)
    return lum * cs, cs


def ssim_2d(a, b) -> float:
    return float(ssim_maps(np.asarray(a, float), np.asarray(b, float))[0].mean())


def ssim_volume(pred, truth, region=None) -> float:
    """Mean over axial slices touching ``region`` of slice SSIM within the region's box.

    With ``region=None`` every slice is used in full.
    """
    p, t = _arr(pred), _arr(truth)
    _check_pair(p, t)
    r = _region(region, t.shape)
    if not r.any():
        raise ValueError("empty region")
    scores = []
    for d in np.flatnonzero(r.reshape(r.shape[0], -1).any(axis=1)):
        hs, ws = np.nonzero(r[d])
        smap, _ = ssim_maps(p[d], t[d])
        scores.append(smap[hs.min() : hs.max() + 1, ws.min() : ws.max() + 1].mean())
    return float(np.mean(scores))


def available_scales(shape, wanted: int = MS_SSIM_SCALES) -> int:
    n = 1
    while n < wanted and min(shape) // 2**n >= MIN_SCALE_SIDE:
        n += 1
    return n


def _halve(x: np.ndarray) -> np.ndarray:
    h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def ms_ssim_2d(a, b, scales: int = MS_SSIM_SCALES) -> float:
    """Multi-scale SSIM over up to ``scales`` dyadic levels, equally weighted.

    Equal weights keep the finest scale, where inter-slice steps show up,
    as influential as the coarse ones. Negative contrast terms are clamped at
    zero so the result stays in [0, 1].
    """
    a, b = np.asarray(a, float), np.asarray(b, float)
    n = available_scales(a.shape, scales)
    weights = np.full(n, 1.0 / n)
    value = 1.0
    for j in range(n):
        smap, cs = ssim_maps(a, b)
        term = smap.mean() if j == n - 1 else cs.mean()
        value *= max(float(term), 0.0) ** weights[j]
        if j < n - 1:
            a, b = _halve(a), _halve(b)
    return value


def ms_ssim_distance(a, b) -> float:
    return 1.0 - ms_ssim_2d(a, b)


SliceDistance = Callable[[np.ndarray, np.ndarray], float]


def _view_slices(shape, view: str, mask):
    axis = VIEW_AXES[view]
    if mask is None:
        return axis, np.arange(shape[axis])
    m = _arr(mask) > 0
    other = tuple(i for i in range(3) if i != axis)
    idx = np.flatnonzero(m.any(axis=other))
    return axis, idx if idx.size else np.arange(shape[axis])


def pproxy(pred, truth, view: str = "axial", mask=None, distance: SliceDistance = ms_ssim_distance) -> float:
    """Mean perceptual distance between corresponding ``view`` slices.

    Only slices that intersect ``mask`` are scored (all slices if ``mask`` is
    None or empty). ``distance`` can be swapped for a learned metric.
    """
    if view not in VIEW_AXES:
        raise ValueError(f"view must be one of {sorted(VIEW_AXES)}")
    p, t = _arr(pred), _arr(truth)
    _check_pair(p, t)
    axis, idx = _view_slices(t.shape, view, mask)
    vals = [distance(np.take(p, i, axis=axis), np.take(t, i, axis=axis)) for i in idx]
    return float(np.mean(vals))


def pproxy_views(pred, truth, mask=None, distance: SliceDistance = ms_ssim_distance) -> dict[str, float]:
    out = {v: pproxy(pred, truth, v, mask, distance) for v in VIEWS}
    out["avg"] = float(np.mean([out[v] for v in VIEWS]))
    return out


def pproxy_avg(a, b, mask=None, distance: SliceDistance = ms_ssim_distance) -> float:
    return pproxy_views(a, b, mask, distance)["avg"]


def tfi(orig_t1, orig_t2, inp_t1, inp_t2, mask=None, distance: SliceDistance = ms_ssim_distance) -> float:
    """Perceptual distance between inpainted timepoints over that between originals.

    Returns ``nan`` when the original timepoints are indistinguishable.
    """
    denom = pproxy_avg(orig_t1, orig_t2, mask, distance)
    if denom == 0.0:
        return math.nan
    return pproxy_avg(inp_t1, inp_t2, mask, distance) / denom


def pearson_r(x, y) -> float:
    x, y = np.asarray(x, float), np.asarray(y, float)
    if x.size < 2 or x.std() == 0 or y.std() == 0:
        return math.nan
    return float(np.corrcoef(x, y)[0, 1])


def subject_metrics(sample, inp_t1, inp_t2, distance: SliceDistance = ms_ssim_distance) -> dict:
    """Metrics of one subject, averaged over the two timepoints."""
    per_tp = []
    brain = sample.brain_mask
    for img, mask, inp in (
        (sample.img_t1, sample.lesion_mask_t1, inp_t1),
        (sample.img_t2, sample.lesion_mask_t2, inp_t2),
    ):
        if not mask.data.any():
            continue
        views = pproxy_views(inp, img, mask, distance)
        per_tp.append(
            {
                "nrmse": nrmse(inp, img, mask, brain),
                "psnr": psnr(inp, img, mask),
                "ssim": ssim_volume(inp, img, mask),
                "pproxy_axial": views["axial"],
                "pproxy_sagittal": views["sagittal"],
                "pproxy_coronal": views["coronal"],
                "pproxy_avg": views["avg"],
                "nrmse_whole": nrmse(inp, img, None, brain),
                "psnr_whole": psnr(inp, img, None),
                "ssim_whole": ssim_volume(inp, img, None),
            }
        )
    row = {k: float(np.mean([m[k] for m in per_tp])) if per_tp else math.nan for k in
           ("nrmse", "psnr", "ssim", "pproxy_axial", "pproxy_sagittal", "pproxy_coronal",
            "pproxy_avg", "nrmse_whole", "psnr_whole", "ssim_whole")}
    union = np.maximum(sample.lesion_mask_t1.data, sample.lesion_mask_t2.data)
    orig_d = pproxy_avg(sample.img_t1, sample.img_t2, union, distance)
    inp_d = pproxy_avg(inp_t1, inp_t2, union, distance)
    row["orig_pair_distance"] = orig_d
    row["inpainted_pair_distance"] = inp_d
    row["tfi"] = inp_d / orig_d if orig_d > 0 else math.nan
    row["ms_ssim_scales"] = available_scales(sample.dims[1:])
    return row


@dataclass
class MetricReport:
    rows: list[dict] = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    pearson_r: float = math.nan

    def to_json(self) -> dict:
        return _jsonable({"aggregate": self.aggregate, "pearson_r": self.pearson_r, "n_subjects": len(self.rows)})


def _jsonable(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    return obj


def aggregate_rows(rows: list[dict]) -> dict:
    """Mean and population standard deviation of every numeric column."""
    agg = {}
    for key in METRIC_NAMES:
        vals = np.array([r[key] for r in rows if key in r and r[key] is not None], dtype=float)
        if vals.size == 0:
            continue
        with np.errstate(invalid="ignore"):
            agg[key] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))}
    return agg


def build_report(rows: list[dict]) -> MetricReport:
    r = pearson_r([row["orig_pair_distance"] for row in rows], [row["inpainted_pair_distance"] for row in rows])
    return MetricReport(rows, aggregate_rows(rows), r)


def evaluate(manifest, predictions_dir, distance: SliceDistance = ms_ssim_distance) -> MetricReport:
    """Score ``predictions_dir/<subject_id>/inp_t{1,2}.vol`` against the manifest's ground truth."""
    man = read_manifest(manifest)
    pred_root = Path(predictions_dir)
    missing = [
        str(pred_root / e["subject_id"] / f"inp_t{k}.vol")
        for e in man.subjects
        for k in (1, 2)
        if not (pred_root / e["subject_id"] / f"inp_t{k}.vol").exists()
    ]
    if missing:
        raise FileNotFoundError("missing predictions: " + ", ".join(missing))
    rows = []
    for i, entry in enumerate(man.subjects):
        sample = man.load_sample(i)
        sub = pred_root / entry["subject_id"]
        row = {"subject_id": entry["subject_id"]}
        row.update(subject_metrics(sample, load_volume(sub / "inp_t1.vol"), load_volume(sub / "inp_t2.vol"), distance))
        stats_path = sub / "stats.json"
        if stats_path.exists():
            stats = json.loads(stats_path.read_text())
            row["nfe"] = stats.get("nfe")
            row["seconds"] = stats.get("seconds")
        rows.append(row)
    return build_report(rows)


def write_report(report: MetricReport, out_dir, stem: str = "metrics") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.json"
    columns = ["subject_id"] + [k for k in METRIC_NAMES if any(k in r for r in report.rows)] + ["ms_ssim_scales"]
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in report.rows:
            writer.writerow({k: row.get(k, "") for k in columns})
    json_path.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    return csv_path, json_path
