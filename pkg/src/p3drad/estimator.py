"""scikit-learn style wrapper around training and inpainting."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import metrics
from .network import NetworkConfig, load_checkpoint, save_checkpoint
from .sampler import SamplerConfig, inpaint_volume
from .train import TrainConfig, Trainer, set_reference_mode
from .volumeio import LongitudinalSample, read_manifest


def check_samples(X, require_lesions: bool = False) -> list[LongitudinalSample]:
    """Coerce ``X`` (samples, a single sample or a manifest path) to validated samples."""
    if isinstance(X, (str, Path)):
        X = read_manifest(X).samples()
    elif isinstance(X, LongitudinalSample):
        X = [X]
    samples = list(X)
    if not samples:
        raise ValueError("expected at least one sample")
    for s in samples:
        if not isinstance(s, LongitudinalSample):
            raise TypeError(f"expected LongitudinalSample, got {type(s).__name__}")
        s.validate()
        if require_lesions and not (s.lesion_mask_t1.data.any() or s.lesion_mask_t2.data.any()):
            raise ValueError(f"{s.subject_id} has no lesion voxels to inpaint")
    return samples


def check_dims(samples, config: NetworkConfig) -> None:
    m = config.spatial_multiple
    for s in samples:
        _, h, w = s.dims
        if h % m or w % m:
            raise ValueError(f"{s.subject_id}: H, W = {h}, {w} must be divisible by {m}")


class RegionAwareInpainter(BaseEstimator):
    """Longitudinal lesion inpainter.

    ``fit`` trains the pseudo-3D network on healthy samples with lesion masks;
    ``predict`` returns inpainted ``(t1, t2)`` volume pairs; ``score`` is the
    mean masked PSNR over both timepoints.
    """

    def __init__(
        self,
        base_channels=32,
        levels=3,
        blocks_per_level=2,
        embed_dim=128,
        precision="single",
        norm="group",
        learning_rate=1e-4,
        epochs=1,
        max_steps=None,
        batch_size=2,
        window=32,
        gamma=5.0,
        T=1000,
        phase_mode="both",
        objective="rad",
        mode="rad",
        steps=100,
        eta=None,
        overlap=8,
        reference_mode=True,
        random_state=0,
    ):
        self.base_channels = base_channels
        self.levels = levels
        self.blocks_per_level = blocks_per_level
        self.embed_dim = embed_dim
        self.precision = precision
        self.norm = norm
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.max_steps = max_steps
        self.batch_size = batch_size
        self.window = window
        self.gamma = gamma
        self.T = T
        self.phase_mode = phase_mode
        self.objective = objective
        self.mode = mode
        self.steps = steps
        self.eta = eta
        self.overlap = overlap
        self.reference_mode = reference_mode
        self.random_state = random_state

    def _network_config(self) -> NetworkConfig:
        return NetworkConfig(
            base_channels=self.base_channels,
            levels=self.levels,
            blocks_per_level=self.blocks_per_level,
            embed_dim=self.embed_dim,
            precision=self.precision,
            norm=self.norm,
            max_timestep=self.T,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            max_steps=self.max_steps,
            batch_size=self.batch_size,
            window=self.window,
            gamma=self.gamma,
            T=self.T,
            phase_mode=self.phase_mode,
            objective=self.objective,
            seed=int(self.random_state or 0),
            reference_mode=self.reference_mode,
        )

    def _sampler_config(self) -> SamplerConfig:
        return SamplerConfig(mode=self.mode, steps=self.steps, eta=self.eta, seed=int(self.random_state or 0))

    def fit(self, X, y=None, checkpoint_dir=None):
        samples = check_samples(X)
        net_cfg = self._network_config()
        check_dims(samples, net_cfg)
        cfg = self._train_config()
        set_reference_mode(cfg.reference_mode)
        trainer = Trainer(samples, cfg, net_cfg)
        log_path = Path(checkpoint_dir) / "train_log.csv" if checkpoint_dir else None
        results = trainer.fit(checkpoint_dir, log_path)
        self.model_ = trainer.model
        self.loss_curve_ = np.array([np.nan if r.loss is None else r.loss for r in results])
        self.n_steps_ = trainer.model.step
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        samples = check_samples(X)
        check_dims(samples, self.model_.config)
        cfg = self._sampler_config()
        self.last_stats_ = []
        out = []
        for s in samples:
            res = inpaint_volume(self.model_, s, cfg, window=self.window, overlap=self.overlap)
            self.last_stats_.append(res.stats)
            out.append((res.inp_t1, res.inp_t2))
        return out

    def transform(self, X):
        """Samples with their images replaced by the inpainted volumes."""
        samples = check_samples(X)
        return [s.replace(img_t1=a, img_t2=b) for s, (a, b) in zip(samples, self.predict(samples))]

    def score(self, X, y=None):
        samples = check_samples(X, require_lesions=True)
        values = []
        for s, (a, b) in zip(samples, self.predict(samples)):
            for img, m, inp in ((s.img_t1, s.lesion_mask_t1, a), (s.img_t2, s.lesion_mask_t2, b)):
                if m.data.any():
                    values.append(metrics.psnr(inp, img, m))
        return float(np.mean(values))

    def save(self, path) -> Path:
        check_is_fitted(self, "model_")
        return save_checkpoint(self.model_, path)

    @classmethod
    def from_checkpoint(cls, path, **params) -> "RegionAwareInpainter":
        model = load_checkpoint(path)
        cfg = model.config
        est = cls(
            base_channels=cfg.base_channels,
            levels=cfg.levels,
            blocks_per_level=cfg.blocks_per_level,
            embed_dim=cfg.embed_dim,
            precision=cfg.precision,
            norm=cfg.norm,
            T=cfg.max_timestep,
            **params,
        )
        est.model_ = model
        est.n_steps_ = model.step
        return est

    def __sklearn_is_fitted__(self):
        return hasattr(self, "model_")
