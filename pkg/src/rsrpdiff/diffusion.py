"""Noise schedules, forward/reverse processes and noise-prior guidance.

Two forward-noise conventions are available: ``PAPER`` uses ``b_k = 1 - alpha_k``
as the noise coefficient and ``STANDARD`` uses ``sqrt(1 - alpha_k)``.
Index 0 of every extended schedule array is the clean state (alpha = 1, b = 0).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch

DEFAULT_K = 400


class NoiseMode(str, enum.Enum):
    PAPER = "PAPER"
    STANDARD = "STANDARD"


class SamplerMode(str, enum.Enum):
    DETERMINISTIC = "deterministic"
    STOCHASTIC = "stochastic"


class ChainDivergedError(FloatingPointError):
    def __init__(self, k: int):
        super().__init__(f"non-finite values in reverse chain at step k={k}")
        self.k = k


def default_beta_range(K: int) -> tuple:
    # linear 1e-4..0.02 ramp stretched so the total noise matches a 1000-step ramp
    s = 1000.0 / K
    return 1e-4 * s, min(0.02 * s, 0.999)


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    mode: NoiseMode = NoiseMode.PAPER

    def __post_init__(self):
        b = np.asarray(self.beta, dtype=np.float64)
        if b.ndim != 1 or len(b) < 1:
            raise ValueError("beta must be a non-empty vector")
        if np.any(b <= 0) or np.any(b >= 1):
            raise ValueError("beta values must lie in (0, 1)")
        object.__setattr__(self, "beta", b)
        object.__setattr__(self, "mode", NoiseMode(self.mode))

    @property
    def K(self) -> int:
        return len(self.beta)

    @property
    def alpha_hat(self) -> np.ndarray:
        return 1.0 - self.beta

    @property
    def alpha(self) -> np.ndarray:
        """alpha_k for k = 1..K (position k-1)."""
        return np.cumprod(self.alpha_hat)

    @property
    def alpha_ext(self) -> np.ndarray:
        return np.concatenate([[1.0], self.alpha])

    @property
    def b_ext(self) -> np.ndarray:
        one_minus = 1.0 - self.alpha_ext
        return one_minus if self.mode is NoiseMode.PAPER else np.sqrt(one_minus)

    def alpha_at(self, k):
        return self.alpha_ext[self._check_k(k, allow_zero=True)]

    def b_at(self, k):
        return self.b_ext[self._check_k(k, allow_zero=True)]

    def _check_k(self, k, allow_zero: bool = False):
        k = np.asarray(k)
        lo = 0 if allow_zero else 1
        if np.any(k < lo) or np.any(k > self.K):
            raise IndexError(f"diffusion step out of range [{lo}, {self.K}]: {k}")
        return k

    def to_dict(self) -> dict:
        return {"K": self.K, "beta_start": float(self.beta[0]), "beta_end": float(self.beta[-1]),
                "mode": self.mode.value}


def make_schedule(K: int = DEFAULT_K, beta_start: Optional[float] = None, beta_end: Optional[float] = None,
                  mode=NoiseMode.PAPER) -> NoiseSchedule:
    if K < 1:
        raise ValueError("K must be >= 1")
    if beta_start is None or beta_end is None:
        ds, de = default_beta_range(K)
        beta_start = ds if beta_start is None else beta_start
        beta_end = de if beta_end is None else beta_end
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule(np.linspace(beta_start, beta_end, K), NoiseMode(mode))


def schedule_from_dict(d: dict) -> NoiseSchedule:
    return make_schedule(int(d["K"]), d.get("beta_start"), d.get("beta_end"), d.get("mode", "PAPER"))


def forward_noise(x0, k: int, eps, schedule: NoiseSchedule):
    a = schedule.alpha_at(schedule._check_k(k))
    return np.sqrt(a) * np.asarray(x0) + schedule.b_at(k) * np.asarray(eps)


def prior_noise(x0_calc, k: int, schedule: NoiseSchedule):
    """Physics prior on the noise, sqrt(alpha_k) * x0_calc / (1 - alpha_k)."""
    a = schedule.alpha_at(schedule._check_k(k))
    if a >= 1.0:
        raise ZeroDivisionError("alpha_k = 1 leaves the prior undefined")
    return np.sqrt(a) * np.asarray(x0_calc) / (1.0 - a)


def delta_target(eps, e_of, prior_eps_star):
    return np.asarray(eps) + (1.0 - np.asarray(e_of)) * np.asarray(prior_eps_star)


def recover_eps(delta_eps, e_of, prior_eps_star):
    return np.asarray(delta_eps) - (1.0 - np.asarray(e_of)) * np.asarray(prior_eps_star)


def estimate_x0(xk, eps_hat, k: int, schedule: NoiseSchedule):
    return (np.asarray(xk) - schedule.b_at(k) * np.asarray(eps_hat)) / np.sqrt(schedule.alpha_at(k))


@dataclass(frozen=True)
class DiffusionState:
    x0: np.ndarray
    xk: np.ndarray
    eps: np.ndarray
    k: int
    prior_eps_star: np.ndarray
    delta_eps: np.ndarray
    e: np.ndarray

    @classmethod
    def build(cls, x0, x0_calc, eps, k: int, e, schedule: NoiseSchedule) -> "DiffusionState":
        xk = forward_noise(x0, k, eps, schedule)
        prior = prior_noise(x0_calc, k, schedule)
        return cls(np.asarray(x0), xk, np.asarray(eps), k, prior, delta_target(eps, e, prior), np.asarray(e))


@dataclass(frozen=True)
class Normalizer:
    """Affine z-score map; constant channels keep unit scale."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray, axis) -> "Normalizer":
        x = np.asarray(x, dtype=np.float64)
        mean = x.mean(axis=axis)
        std = x.std(axis=axis)
        std = np.where(std > 1e-12 * np.maximum(1.0, np.abs(mean)), std, 1.0)
        return cls(np.asarray(mean), np.asarray(std))

    def normalize(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": np.asarray(self.mean).tolist(), "std": np.asarray(self.std).tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


# network-parameter columns compressed with log10 before z-scoring (f_c, L, D)
LOG_COLUMNS = (1, 4, 5)


def transform_params(values: np.ndarray) -> np.ndarray:
    v = np.array(values, dtype=np.float64)
    for c in LOG_COLUMNS:
        v[..., c] = np.log10(v[..., c] + 1.0)
    return v


class TorchSchedule:
    """Per-sample schedule lookups as tensors."""

    def __init__(self, schedule: NoiseSchedule, dtype=torch.float32):
        self.schedule = schedule
        self.sqrt_alpha = torch.as_tensor(np.sqrt(schedule.alpha_ext), dtype=dtype)
        self.alpha = torch.as_tensor(schedule.alpha_ext, dtype=dtype)
        self.b = torch.as_tensor(schedule.b_ext, dtype=dtype)
        # sqrt(alpha) / (1 - alpha) with the k = 0 entry unused
        with np.errstate(divide="ignore"):
            pc = np.sqrt(schedule.alpha_ext) / (1.0 - schedule.alpha_ext)
        pc[0] = 0.0
        self.prior_coeff = torch.as_tensor(pc, dtype=dtype)
        self.b_prior = torch.as_tensor(schedule.b_ext * pc, dtype=dtype)

    def col(self, arr: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
        return arr[k][:, None]


def x0_from_head(h, xk, k, e, x0_calc, ts: TorchSchedule):
    """x0 estimate from the head output h = b_k * delta_eps_hat.

    eps_hat = h / b_k - (1 - e) * prior, so b_k * eps_hat = h - (1 - e) * b_k * prior.
    """
    guide = (1.0 - e) * ts.col(ts.b_prior, k) * x0_calc
    return (xk - h + guide) / ts.col(ts.sqrt_alpha, k)


def snr_weight(k, ts: TorchSchedule) -> torch.Tensor:
    """min(1, alpha_k / b_k^2): caps the x0-space loss where x0 is barely visible."""
    a = ts.alpha[k]
    b = ts.b[k]
    return torch.clamp(a / (b * b), max=1.0)


def diffusion_loss(model_fn: Callable, x0, x0_calc, e, k, eps, ts: TorchSchedule, stage: str):
    """Per-batch loss for one stage.

    Student: SNR-truncated x0 reconstruction MSE. Teacher: the same plus the
    noise-space MSE ``b_k^2 * |eps_hat - eps|^2``.
    """
    sa = ts.col(ts.sqrt_alpha, k)
    b = ts.col(ts.b, k)
    xk = sa * x0 + b * eps
    h = model_fn(xk, k)
    x0_hat = x0_from_head(h, xk, k, e, x0_calc, ts)
    w = snr_weight(k, ts)
    rec = (w * ((x0_hat - x0) ** 2).mean(dim=1)).mean()
    if stage == "teacher":
        guide = (1.0 - e) * ts.col(ts.b_prior, k) * x0_calc
        target = b * eps + guide
        return ((h - target) ** 2).mean() + rec
    return rec


def step_sequence(K: int, steps: Optional[int] = None) -> list:
    """Descending step indices K, ..., 1 used by the sampler."""
    if steps is None or steps >= K:
        return list(range(K, 0, -1))
    if steps < 2:
        raise ValueError("steps must be at least 2")
    return sorted({int(round(v)) for v in np.linspace(K, 1, steps)}, reverse=True)


@torch.no_grad()
def sample(model_fn: Callable, x0_calc: torch.Tensor, e: torch.Tensor, ts: TorchSchedule, seed: int,
           mode=SamplerMode.DETERMINISTIC, check_finite: bool = True,
           steps: Optional[int] = None) -> torch.Tensor:
    """Reverse chain from x_K ~ N(0, I); returns the normalized x0 estimate.

    ``model_fn(x, k)`` returns the head output for step tensor ``k``. With
    ``steps`` the chain visits that many evenly spaced steps from K down to 1
    and jumps between them; None visits every step.
    """
    mode = SamplerMode(mode)
    g = torch.Generator().manual_seed(int(seed))
    B, T = x0_calc.shape
    ks = step_sequence(ts.schedule.K, steps)
    x = torch.randn((B, T), generator=g, dtype=x0_calc.dtype)
    x0_hat = x
    for kk, nk in zip(ks, ks[1:] + [0]):
        k = torch.full((B,), kk, dtype=torch.long)
        h = model_fn(x, k)
        x0_hat = x0_from_head(h, x, k, e, x0_calc, ts)
        if check_finite and not torch.isfinite(x0_hat).all():
            raise ChainDivergedError(kk)
        if nk == 0:
            break
        eps_hat = (x - ts.sqrt_alpha[kk] * x0_hat) / ts.b[kk]
        nxt = eps_hat if mode is SamplerMode.DETERMINISTIC else torch.randn((B, T), generator=g, dtype=x.dtype)
        x = ts.sqrt_alpha[nk] * x0_hat + ts.b[nk] * nxt
    return x0_hat
