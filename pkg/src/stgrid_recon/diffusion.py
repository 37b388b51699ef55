"""Conditional DDPM machinery: schedules, forward noising, reverse steps, sampling and loss.

Steps are 1-based (``tau`` in 1..T) everywhere in the public API; the schedule
arrays are stored 0-based, so ``beta[tau - 1]`` is beta at step ``tau``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    kind: str = "linear"

    @property
    def T(self) -> int:
        return len(self.beta)

    def check_step(self, tau) -> None:
        t = np.asarray(tau)
        if t.size == 0 or t.min() < 1 or t.max() > self.T:
            raise ValueError(f"diffusion step out of range [1, {self.T}]: {tau}")

    def alpha_bar_prev(self, tau: int) -> float:
        return 1.0 if tau == 1 else float(self.alpha_bar[tau - 2])

    def posterior_variance(self, tau: int) -> float:
        return float(self.beta[tau - 1] * (1.0 - self.alpha_bar_prev(tau)) / (1.0 - self.alpha_bar[tau - 1]))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "beta": self.beta.tolist()}

    @classmethod
    def from_betas(cls, beta, kind: str = "custom") -> "NoiseSchedule":
        beta = np.asarray(beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ValueError("beta must be a non-empty vector")
        if not np.all((beta > 0) & (beta < 1)):
            raise ValueError("every beta must lie in (0, 1)")
        alpha = 1.0 - beta
        alpha_bar = np.empty_like(alpha)
        acc = 1.0
        for i, a in enumerate(alpha):
            acc = acc * a
            alpha_bar[i] = acc
        return cls(beta, alpha, alpha_bar, kind)

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls.from_betas(d["beta"], d.get("kind", "custom"))


def build_schedule(
    T: int, beta_start: float = 1e-4, beta_end: float = 0.05, kind: str = "linear"
) -> NoiseSchedule:
    """Linear or cosine variance schedule.

    The cosine schedule's betas are clipped into ``[beta_start, beta_end]``.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if kind == "linear":
        beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        beta = np.clip(1.0 - f[1:] / f[:-1], beta_start, beta_end)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule.from_betas(beta, kind)


def _coef(values: np.ndarray, tau, like: torch.Tensor) -> torch.Tensor:
    """Gather schedule entries for 1-based ``tau`` and shape them to broadcast over ``like``."""
    if isinstance(tau, torch.Tensor) and tau.ndim > 0:
        idx = tau.detach().cpu().numpy().astype(np.int64) - 1
        c = torch.as_tensor(values[idx], dtype=like.dtype)
        return c.reshape(-1, *([1] * (like.ndim - 1)))
    return torch.tensor(float(values[int(tau) - 1]), dtype=like.dtype)


def q_sample(s0: torch.Tensor, tau, epsilon: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Closed-form forward noising: sqrt(abar)*s0 + sqrt(1-abar)*eps.

    ``tau`` is an int or a per-item tensor of 1-based steps.
    """
    if s0.shape != epsilon.shape:
        raise ValueError(f"shape mismatch: {tuple(s0.shape)} vs {tuple(epsilon.shape)}")
    sched.check_step(tau.detach().cpu().numpy() if isinstance(tau, torch.Tensor) else tau)
    ab = _coef(sched.alpha_bar, tau, s0)
    return torch.sqrt(ab) * s0 + torch.sqrt(1.0 - ab) * epsilon


def predict_x0(s_tau: torch.Tensor, tau, eps_hat: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Invert the forward closed form with a noise estimate."""
    ab = _coef(sched.alpha_bar, tau, s_tau)
    return (s_tau - torch.sqrt(1.0 - ab) * eps_hat) / torch.sqrt(ab)


@dataclass
class ReverseStepParams:
    mu: torch.Tensor
    sigma2: float


def reverse_step(
    s_tau: torch.Tensor,
    eps_hat: torch.Tensor,
    tau: int,
    sched: NoiseSchedule,
    deterministic: bool = False,
    generator: torch.Generator | None = None,
) -> tuple[ReverseStepParams, torch.Tensor]:
    sched.check_step(tau)
    if not torch.isfinite(eps_hat).all():
        raise FloatingPointError(f"non-finite noise estimate at step {tau}")
    a = float(sched.alpha[tau - 1])
    b = float(sched.beta[tau - 1])
    ab = float(sched.alpha_bar[tau - 1])
    mu = (s_tau - (b / math.sqrt(1.0 - ab)) * eps_hat) / math.sqrt(a)
    sigma2 = sched.posterior_variance(tau)
    if deterministic or sigma2 == 0.0:
        return ReverseStepParams(mu, sigma2), mu
    z = torch.randn(s_tau.shape, generator=generator, dtype=s_tau.dtype)
    return ReverseStepParams(mu, sigma2), mu + math.sqrt(sigma2) * z


Predictor = Callable[[torch.Tensor, torch.Tensor, Any], torch.Tensor]


@torch.no_grad()
def sample_loop(
    predictor: Predictor,
    condition: Any,
    sched: NoiseSchedule,
    shape,
    seed: int | None = None,
    deterministic: bool = False,
    generator: torch.Generator | None = None,
    dtype=torch.float32,
) -> torch.Tensor:
    """Ancestral sampling from s_T ~ N(0, I) down to s_0.

    Either ``seed`` or an explicit ``generator`` controls every random draw.
    """
    if generator is None:
        generator = torch.Generator().manual_seed(0 if seed is None else int(seed))
    s = torch.randn(tuple(shape), generator=generator, dtype=dtype)
    for tau in range(sched.T, 0, -1):
        taus = torch.full((s.shape[0],), tau, dtype=torch.long)
        eps_hat = predictor(s, taus, condition)
        if eps_hat.shape != s.shape:
            raise ValueError(
                f"predictor returned shape {tuple(eps_hat.shape)}, expected {tuple(s.shape)}"
            )
        _, s = reverse_step(s, eps_hat, tau, sched, deterministic, generator)
    return s


@dataclass
class LossParts:
    loss: torch.Tensor
    tau: torch.Tensor
    epsilon: torch.Tensor
    s_tau: torch.Tensor
    eps_hat: torch.Tensor


def epsilon_loss(
    predictor: Predictor,
    s0_batch: torch.Tensor,
    condition_batch: Any,
    sched: NoiseSchedule,
    generator: torch.Generator | None = None,
    return_parts: bool = False,
):
    """Noise-prediction MSE with tau ~ U{1..T} and eps ~ N(0, I) drawn per item."""
    if s0_batch.shape[0] == 0:
        raise ValueError("empty batch")
    b = s0_batch.shape[0]
    tau = torch.randint(1, sched.T + 1, (b,), generator=generator)
    eps = torch.randn(s0_batch.shape, generator=generator, dtype=s0_batch.dtype)
    s_tau = q_sample(s0_batch, tau, eps, sched)
    eps_hat = predictor(s_tau, tau, condition_batch)
    loss = torch.mean((eps_hat - eps) ** 2)
    if return_parts:
        return LossParts(loss, tau, eps, s_tau, eps_hat)
    return loss
