"""Training loop for the region-aware velocity objective.

Each step draws one global step per sample, turns it into per-timepoint
region maps, noises both timepoints, and regresses the velocity on every voxel
whose effective step is non-zero, weighted by Min-SNR. Randomness is drawn
from numpy generators keyed by ``(seed, step)``, so a run resumed from any
checkpoint replays exactly the same batches.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from .network import NetworkConfig, NonFiniteError, P3DUNet, load_checkpoint, save_checkpoint
from .schedule import NoiseSchedule, make_linear_schedule, q_sample, rad_region_map, v_target
from .volumeio import LongitudinalSample, condition_channels, read_manifest

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "epoch", "loss", "active_voxels", "seconds")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 1
    batch_size: int = 2
    window: int = 32
    gamma: float = 5.0
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    phase_mode: str = "both"
    objective: str = "rad"
    weighting: str = "v"
    seed: int = 0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    max_steps: int | None = None
    checkpoint_every: int = 500
    reference_mode: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0 or self.batch_size < 1 or self.window < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and window >= 1 required")
        if self.phase_mode not in ("both", "phase1_only"):
            raise ValueError("phase_mode must be 'both' or 'phase1_only'")
        if self.objective not in ("rad", "global"):
            raise ValueError("objective must be 'rad' or 'global'")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))

    def schedule(self) -> NoiseSchedule:
        return make_linear_schedule(self.T, self.beta_start, self.beta_end)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}


class StepResult(NamedTuple):
    loss: float | None
    active_voxels: int


def sample_training_window(sample: LongitudinalSample, window: int, rng: np.random.Generator):
    """Crop a contiguous axial slab, preferring slabs that contain lesion voxels.

    Returns the cropped sample and the first slice index.
    """
    d = sample.dims[0]
    if window > d:
        raise ValueError(f"window {window} exceeds volume depth {d}")
    if window == d:
        return sample, 0
    lesion_slices = (sample.lesion_mask_t1.data + sample.lesion_mask_t2.data).reshape(d, -1).any(axis=1)
    start = 0
    for _ in range(d):
        start = int(rng.integers(0, d - window + 1))
        if lesion_slices[start : start + window].any():
            break
    return sample.crop_axial(start, start + window), start


def draw_global_steps(cfg: TrainConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    high = cfg.T // 2 if cfg.phase_mode == "phase1_only" else cfg.T
    return rng.integers(1, high + 1, size=n)


def make_batch(samples, schedule: NoiseSchedule, cfg: TrainConfig, rng: np.random.Generator, dtype=torch.float32):
    """Noised condition tensors, step maps, velocity targets and loss weights for a batch."""
    weights_table = torch.tensor(schedule.min_snr_table(cfg.gamma, cfg.weighting), dtype=dtype)
    ts = draw_global_steps(cfg, len(samples), rng)
    xs, taus, targets, actives = [], [], [], []
    for sample, t in zip(samples, ts):
        x_t, tau_pair, v_pair, active_pair = [], [], [], []
        for img, mask in ((sample.img_t1, sample.lesion_mask_t1), (sample.img_t2, sample.lesion_mask_t2)):
            if cfg.objective == "rad":
                tau = rad_region_map(schedule, int(t), mask).tau
            else:
                tau = np.full(img.dims, int(t), dtype=np.int64)
            eps = rng.standard_normal(img.dims).astype(np.float32)
            x0 = img.data
            x_t.append(q_sample(schedule, x0, eps, tau))
            v, active = v_target(schedule, x0, eps, tau)
            tau_pair.append(tau)
            v_pair.append(v)
            active_pair.append(active)
        xs.append(np.concatenate([condition_channels(sample), np.stack(x_t)]))
        taus.append(np.stack(tau_pair))
        targets.append(np.stack(v_pair))
        actives.append(np.stack(active_pair))
    x = torch.as_tensor(np.stack(xs), dtype=dtype)
    tau = torch.as_tensor(np.stack(taus))
    v = torch.as_tensor(np.stack(targets), dtype=dtype)
    active = torch.as_tensor(np.stack(actives))
    weight = torch.where(active, weights_table[tau], torch.zeros((), dtype=dtype))
    return x, tau, v, weight, active, ts


def masked_loss(pred, target, weight, active):
    """Min-SNR weighted squared error summed over active voxels, divided by their count."""
    n = int(active.sum())
    if n == 0:
        return None, 0
    err = torch.where(active, weight * (pred - target) ** 2, torch.zeros((), dtype=pred.dtype))
    return err.sum() / n, n


def make_optimizer(model: P3DUNet, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=cfg.adam_betas, eps=cfg.adam_eps)


def training_step(model, optimizer, samples, schedule, cfg: TrainConfig, rng) -> StepResult:
    """One optimizer update on ``samples`` (already windowed)."""
    x, tau, v, weight, active, ts = make_batch(samples, schedule, cfg, rng, model.config.dtype)
    pred = model(x, tau[:, 0], tau[:, 1])
    loss, n = masked_loss(pred, v, weight, active)
    if loss is None:
        return StepResult(None, 0)
    if not torch.isfinite(loss):
        raise NonFiniteError(f"non-finite loss at step {model.step} (global steps {ts.tolist()}, active {n})")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    model.step += 1
    return StepResult(float(loss.detach()), n)


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0x7A11, step])


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 0xE90C, epoch]).permutation(n)


def optimizer_tensors(model: P3DUNet, optimizer: torch.optim.Adam) -> dict[str, torch.Tensor]:
    out = {}
    for name, p in model.named_parameters():
        state = optimizer.state.get(p)
        if not state:
            continue
        out[f"adam/{name}/exp_avg"] = state["exp_avg"]
        out[f"adam/{name}/exp_avg_sq"] = state["exp_avg_sq"]
        out[f"adam/{name}/step"] = torch.as_tensor(state["step"], dtype=torch.float64).reshape(1)
    return out


def restore_optimizer(model: P3DUNet, optimizer: torch.optim.Adam, tensors: dict[str, torch.Tensor]) -> None:
    for name, p in model.named_parameters():
        key = f"adam/{name}"
        if f"{key}/exp_avg" not in tensors:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(tensors[f"{key}/step"][0]), dtype=torch.float32),
            "exp_avg": tensors[f"{key}/exp_avg"].to(p.dtype).clone(),
            "exp_avg_sq": tensors[f"{key}/exp_avg_sq"].to(p.dtype).clone(),
        }


def set_reference_mode(enabled: bool) -> None:
    if enabled:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


class Trainer:
    """Owns model, optimizer and data for a training run."""

    def __init__(self, samples, cfg: TrainConfig, network_config: NetworkConfig | None = None, model=None):
        if not samples:
            raise ValueError("no training samples")
        for s in samples:
            if cfg.window > s.dims[0]:
                raise ValueError(f"window {cfg.window} exceeds depth {s.dims[0]} of {s.subject_id}")
        self.samples = list(samples)
        self.cfg = cfg
        self.schedule = cfg.schedule()
        net_cfg = network_config or NetworkConfig(max_timestep=cfg.T)
        self.model = model if model is not None else P3DUNet(net_cfg, seed=cfg.seed)
        self.optimizer = make_optimizer(self.model, cfg)

    @property
    def steps_per_epoch(self) -> int:
        return -(-len(self.samples) // self.cfg.batch_size)

    @property
    def total_steps(self) -> int:
        total = self.cfg.epochs * self.steps_per_epoch
        return total if self.cfg.max_steps is None else min(total, self.cfg.max_steps)

    def batch_for_step(self, step: int, rng: np.random.Generator):
        epoch, pos = divmod(step, self.steps_per_epoch)
        order = epoch_order(self.cfg.seed, epoch, len(self.samples))
        idx = order[pos * self.cfg.batch_size : (pos + 1) * self.cfg.batch_size]
        return epoch, [sample_training_window(self.samples[i], self.cfg.window, rng)[0] for i in idx]

    def run_step(self, step: int) -> tuple[int, StepResult]:
        """Perform the update numbered ``step`` (0-based)."""
        self.model.train()
        rng = step_rng(self.cfg.seed, step)
        epoch, batch = self.batch_for_step(step, rng)
        result = training_step(self.model, self.optimizer, batch, self.schedule, self.cfg, rng)
        if result.loss is None:
            # Skipped updates still advance the step counter so replay stays aligned.
            self.model.step += 1
        return epoch, result

    def save(self, path) -> Path:
        return save_checkpoint(
            self.model,
            path,
            extra_tensors=optimizer_tensors(self.model, self.optimizer),
            extra={"train_config": self.cfg.to_dict()},
        )

    @classmethod
    def resume(cls, samples, cfg: TrainConfig, path) -> "Trainer":
        model, tensors, _ = load_checkpoint(path, with_extras=True)
        trainer = cls(samples, cfg, model.config, model=model)
        restore_optimizer(model, trainer.optimizer, tensors)
        return trainer

    def fit(self, checkpoint_dir=None, log_path=None, callback=None) -> list[StepResult]:
        checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        if checkpoint_dir:
            checkpoint_dir.mkdir(parents=True, exist_ok=True)
        results = []
        writer = fh = None
        if log_path:
            new = not Path(log_path).exists() or self.model.step == 0
            fh = open(log_path, "w" if new else "a", newline="")
            writer = csv.writer(fh)
            if new:
                writer.writerow(LOG_COLUMNS)
        t0 = time.perf_counter()
        try:
            if checkpoint_dir and self.model.step == 0:
                self.save(checkpoint_dir / "step_0000000.ckpt")
            for step in range(self.model.step, self.total_steps):
                epoch, result = self.run_step(step)
                results.append(result)
                if writer:
                    loss = "" if result.loss is None else repr(result.loss)
                    writer.writerow([step + 1, epoch, loss, result.active_voxels, f"{time.perf_counter() - t0:.3f}"])
                if callback:
                    callback(step, result)
                if checkpoint_dir and (step + 1) % self.cfg.checkpoint_every == 0:
                    self.save(checkpoint_dir / f"step_{step + 1:07d}.ckpt")
        finally:
            if fh:
                fh.close()
        return results


def train(manifest, cfg: TrainConfig, checkpoint_dir, network_config: NetworkConfig | None = None, resume=None) -> Path:
    """Train on every subject of ``manifest``; return the path of the final checkpoint."""
    set_reference_mode(cfg.reference_mode)
    samples = read_manifest(manifest).samples()
    checkpoint_dir = Path(checkpoint_dir)
    checkpoint_dir.mkdir(parents=True, exist_ok=True)
    if resume:
        trainer = Trainer.resume(samples, cfg, resume)
    else:
        trainer = Trainer(samples, cfg, network_config)
    log.info("train config %s", json.dumps(cfg.to_dict(), sort_keys=True))
    log.info("network config %s", json.dumps(trainer.model.config.to_dict(), sort_keys=True))

    def report(step, result):
        if (step + 1) % 100 == 0:
            log.info("step %d loss %s", step + 1, result.loss)

    trainer.fit(checkpoint_dir, checkpoint_dir / "train_log.csv", callback=report)
    return trainer.save(checkpoint_dir / "final.ckpt")
