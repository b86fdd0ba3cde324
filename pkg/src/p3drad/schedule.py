"""Diffusion schedule algebra.

Forward noising, the velocity parameterization, Min-SNR loss weights and the
region-aware two-phase timestep maps. Every voxel ``s`` carries its own
effective step ``tau(s)``; ``tau = 0`` means clean signal and is always handled
by an exact copy so that protected voxels never pick up rounding drift.

Functions accept numpy arrays or torch tensors (and ``Volume3D`` where a
volume is expected) and return the same array type.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch

from .volumeio import Volume3D


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-step constants indexed by ``t`` in ``[0, T]`` (``beta`` by ``t - 1``)."""

    beta: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 2:
            raise ValueError("beta must be a 1-D array with at least two steps")
        if not ((beta > 0) & (beta < 1)).all():
            raise ValueError("beta values must lie strictly inside (0, 1)")
        alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
        if not (np.diff(alpha_bar) < 0).all():
            raise ValueError("alpha_bar must be strictly decreasing")
        with np.errstate(divide="ignore"):
            snr = alpha_bar / (1.0 - alpha_bar)
        for name, value in [
            ("beta", beta),
            ("alpha_bar", alpha_bar),
            ("alpha", np.sqrt(alpha_bar)),
            ("sigma", np.sqrt(1.0 - alpha_bar)),
            ("snr", snr),
        ]:
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def T(self) -> int:
        return int(self.beta.size)

    def coefficients(self, tau, like):
        """Gather ``(alpha_tau, sigma_tau)`` shaped like ``tau``, typed like ``like``."""
        if isinstance(like, torch.Tensor):
            idx = torch.as_tensor(tau, device=like.device).long()
            alpha = torch.tensor(self.alpha, dtype=like.dtype, device=like.device)[idx]
            sigma = torch.tensor(self.sigma, dtype=like.dtype, device=like.device)[idx]
            return alpha, sigma
        idx = np.asarray(tau, dtype=np.int64)
        dtype = np.asarray(like).dtype
        return self.alpha.astype(dtype)[idx], self.sigma.astype(dtype)[idx]

    def min_snr_table(self, gamma: float = 5.0, objective: str = "v") -> np.ndarray:
        """Loss weights for every ``t``; entry 0 is 0 (clean voxels carry no loss)."""
        return np.concatenate([[0.0], min_snr(self.snr[1:], gamma, objective)])


def make_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 2:
        raise ValueError("T must be >= 2")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    return NoiseSchedule(np.linspace(beta_start, beta_end, T, dtype=np.float64))


def min_snr(snr, gamma: float = 5.0, objective: str = "v"):
    """Min-SNR weight from the SNR itself: ``min(snr, gamma) / (snr + 1)`` for v, ``/ snr`` for eps."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    snr = np.asarray(snr, dtype=np.float64)
    if objective == "v":
        denom = snr + 1.0
    elif objective == "eps":
        denom = snr
    else:
        raise ValueError(f"unknown objective {objective!r}")
    w = np.minimum(snr, gamma) / denom
    return float(w) if w.ndim == 0 else w


def min_snr_weight(s: NoiseSchedule, t: int, gamma: float = 5.0, objective: str = "v") -> float:
    """Min-SNR weight of step ``t`` under schedule ``s``."""
    if not 1 <= t <= s.T:
        raise ValueError(f"t={t} outside [1, {s.T}]")
    return min_snr(s.snr[t], gamma, objective)


@dataclass(frozen=True, eq=False)
class RegionTimestepMap:
    """Per-voxel effective timestep for one timepoint at global step ``global_t``."""

    tau: np.ndarray
    global_t: int

    @property
    def dims(self):
        return tuple(self.tau.shape)

    def values(self) -> np.ndarray:
        return np.unique(self.tau)


def _array(x):
    return x.data if isinstance(x, Volume3D) else x


def _where(cond, a, b):
    if isinstance(a, torch.Tensor):
        return torch.where(torch.as_tensor(cond, device=a.device), a, b)
    return np.where(cond, a, b)


def _check(s: NoiseSchedule, x0, eps, tau):
    if tuple(x0.shape) != tuple(eps.shape):
        raise ValueError(f"shape mismatch: x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
    if tuple(np.shape(tau)) != tuple(x0.shape)[-len(np.shape(tau)):]:
        raise ValueError(f"tau shape {np.shape(tau)} does not match {tuple(x0.shape)}")
    lo, hi = (int(tau.min()), int(tau.max())) if np.size(tau) else (0, 0)
    if lo < 0 or hi > s.T:
        raise ValueError(f"tau values outside [0, {s.T}]")


def _tau(tau):
    if isinstance(tau, RegionTimestepMap):
        return tau.tau
    return tau


def q_sample(s: NoiseSchedule, x0, eps, tau):
    """``alpha_tau * x0 + sigma_tau * eps`` with an exact copy of ``x0`` where ``tau == 0``."""
    wrap = isinstance(x0, Volume3D)
    x0_, eps_, tau_ = _array(x0), _array(eps), _tau(tau)
    _check(s, x0_, eps_, tau_)
    alpha, sigma = s.coefficients(tau_, x0_)
    out = _where(tau_ == 0, x0_, alpha * x0_ + sigma * eps_)
    return Volume3D(out, x0.spacing, "field") if wrap else out


class VTarget(NamedTuple):
    v: object
    active: object


def v_target(s: NoiseSchedule, x0, eps, tau) -> VTarget:
    """Velocity ``alpha_tau * eps - sigma_tau * x0`` and the mask of loss-active voxels."""
    x0_, eps_, tau_ = _array(x0), _array(eps), _tau(tau)
    _check(s, x0_, eps_, tau_)
    alpha, sigma = s.coefficients(tau_, x0_)
    v = alpha * eps_ - sigma * x0_
    active = tau_ > 0
    if isinstance(x0, Volume3D):
        v = Volume3D(v, x0.spacing, "field")
    return VTarget(v, active)


def predict_x0_eps(s: NoiseSchedule, x_t, v, tau):
    """Invert the velocity parameterization: ``x0 = a x_t - s v``, ``eps = s x_t + a v``."""
    alpha, sigma = s.coefficients(tau, x_t)
    return alpha * x_t - sigma * v, sigma * x_t + alpha * v


def rad_region_map(s: NoiseSchedule, global_t: int, mask) -> RegionTimestepMap:
    """Two-phase map: the mask is noised over the first half of the steps, the background over the second.

    ``tau = min(2t, T)`` on the mask and ``max(0, 2t - T)`` elsewhere, so at
    ``t = T/2`` the mask is fully noised and the background is clean.
    """
    if not 0 <= global_t <= s.T:
        raise ValueError(f"global_t={global_t} outside [0, {s.T}]")
    m = _array(mask)
    if isinstance(m, torch.Tensor):
        m = m.detach().cpu().numpy()
    m = np.asarray(m)
    if not np.isin(m, (0, 1)).all():
        raise ValueError("mask must be binary")
    tau_mask = min(2 * global_t, s.T)
    tau_bg = max(0, 2 * global_t - s.T)
    tau = np.where(m > 0, tau_mask, tau_bg).astype(np.int64)
    return RegionTimestepMap(tau, int(global_t))


def uniform_region_map(s: NoiseSchedule, t: int, dims) -> RegionTimestepMap:
    """Spatially constant map, as used by global (non region-aware) diffusion."""
    if not 0 <= t <= s.T:
        raise ValueError(f"t={t} outside [0, {s.T}]")
    return RegionTimestepMap(np.full(tuple(dims), t, dtype=np.int64), int(t))


def schedule_table(s: NoiseSchedule, gamma: float = 5.0, objective: str = "v") -> list[dict]:
    """One row per step ``t = 1..T`` with the constants and the region-map values."""
    w = s.min_snr_table(gamma, objective)
    rows = []
    for t in range(1, s.T + 1):
        rows.append(
            {
                "t": t,
                "beta": float(s.beta[t - 1]),
                "alpha_bar": float(s.alpha_bar[t]),
                "snr": float(s.snr[t]),
                "min_snr_weight": float(w[t]),
                "tau_mask": min(2 * t, s.T),
                "tau_background": max(0, 2 * t - s.T),
            }
        )
    return rows
