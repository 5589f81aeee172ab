"""Discrete diffusion ladder: signal/noise coefficients, timestep sampling, weights."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "NoiseSchedule",
    "TimestepSampler",
    "WeightRule",
    "build_schedule",
    "add_noise",
    "sample_timestep",
]

ALPHA_T_MAX = 1e-2


@dataclass(frozen=True)
class NoiseSchedule:
    """Signal coefficients ``alpha[t]`` and noise scales ``sigma[t]`` for t = 0..T.

    ``alpha`` here is the square root of the cumulative product of ``1 - beta``,
    so that ``x_t = alpha[t] * x0 + sigma[t] * eps``.
    """

    T: int
    alpha: np.ndarray
    sigma: np.ndarray
    family: str = "linear"

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if alpha.shape != (self.T + 1,) or sigma.shape != (self.T + 1,):
            raise ValueError(f"alpha/sigma must have length T+1={self.T + 1}")
        if alpha[0] != 1.0:
            raise ValueError("alpha[0] must be exactly 1")
        if not alpha[-1] <= ALPHA_T_MAX:
            raise ValueError(f"alpha[T]={alpha[-1]:.3g} exceeds {ALPHA_T_MAX}; schedule does not reach noise")
        if np.any(alpha <= 0) or np.any(np.diff(alpha) >= 0):
            raise ValueError("alpha must be positive and strictly decreasing")
        alpha.setflags(write=False)
        sigma.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "sigma", sigma)

    def coefficients(self, t: int) -> tuple[float, float]:
        self._check_t(t, allow_zero=True)
        return float(self.alpha[t]), float(self.sigma[t])

    def _check_t(self, t, allow_zero=False):
        lo = 0 if allow_zero else 1
        if not (lo <= t <= self.T) or int(t) != t:
            raise ValueError(f"timestep {t!r} outside [{lo}, {self.T}]")


def _from_alpha_bar(T: int, alpha_bar: np.ndarray, family: str) -> NoiseSchedule:
    alpha_bar = np.concatenate([[1.0], alpha_bar])
    alpha = np.sqrt(alpha_bar)
    # sigma from the complement directly keeps alpha^2 + sigma^2 == 1 to rounding
    sigma = np.sqrt(-np.expm1(np.log(alpha_bar)))
    return NoiseSchedule(T=T, alpha=alpha, sigma=sigma, family=family)


def build_schedule(T: int = 1000, kind: str = "linear", **params) -> NoiseSchedule:
    """Build a schedule of the given family.

    Families:
        ``linear``: betas linearly spaced from ``beta_start`` to ``beta_end``
            (defaults 1e-4, 2e-2).
        ``cosine``: squared-cosine cumulative signal with offset ``s``
            (default 0.008), betas clipped at ``max_beta`` (default 0.999).
    """
    if not isinstance(T, (int, np.integer)) or T < 2:
        raise ValueError(f"T must be an integer >= 2, got {T!r}")
    T = int(T)
    if kind == "linear":
        beta_start = float(params.pop("beta_start", 1e-4))
        beta_end = float(params.pop("beta_end", 2e-2))
        _no_extra(params, kind)
        if not (0.0 < beta_start < beta_end < 1.0):
            raise ValueError(
                f"linear schedule needs 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}"
            )
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "cosine":
        s = float(params.pop("s", 0.008))
        max_beta = float(params.pop("max_beta", 0.999))
        _no_extra(params, kind)
        if s <= 0 or not (0.0 < max_beta < 1.0):
            raise ValueError(f"cosine schedule needs s > 0 and 0 < max_beta < 1, got {s}, {max_beta}")

        def f(u):
            return math.cos((u + s) / (1 + s) * math.pi / 2) ** 2

        betas = np.array(
            [min(1.0 - f((i + 1) / T) / f(i / T), max_beta) for i in range(T)], dtype=np.float64
        )
    else:
        raise ValueError(f"unknown schedule family {kind!r} (expected 'linear' or 'cosine')")
    alpha_bar = np.exp(np.cumsum(np.log1p(-betas)))
    return _from_alpha_bar(T, alpha_bar, kind)


def _no_extra(params, kind):
    if params:
        raise ValueError(f"unexpected parameters for {kind} schedule: {sorted(params)}")


def add_noise(schedule: NoiseSchedule, x0, t: int, eps) -> np.ndarray:
    """Forward-noise ``x0`` to level ``t``: ``alpha_t * x0 + sigma_t * eps``."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 and eps shapes differ: {x0.shape} vs {eps.shape}")
    a, s = schedule.coefficients(t)
    return a * x0 + s * eps


@dataclass
class TimestepSampler:
    """Uniform integer timesteps on ``[t_min, t_max]`` from a seeded generator."""

    t_min: int
    t_max: int
    rng_seed: int = 0
    _rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.t_min < 1 or self.t_min > self.t_max:
            raise ValueError(f"need 1 <= t_min <= t_max, got [{self.t_min}, {self.t_max}]")
        self._rng = np.random.default_rng(self.rng_seed)

    @classmethod
    def for_schedule(cls, schedule: NoiseSchedule, rng_seed: int = 0, t_min=None, t_max=None):
        # interior window by default: the extremes give degenerate guidance
        t_min = max(1, round(0.02 * schedule.T)) if t_min is None else int(t_min)
        t_max = round(0.98 * schedule.T) if t_max is None else int(t_max)
        if t_max > schedule.T:
            raise ValueError(f"t_max={t_max} exceeds T={schedule.T}")
        return cls(t_min, t_max, rng_seed)

    def draw(self, n: int) -> np.ndarray:
        return self._rng.integers(self.t_min, self.t_max, endpoint=True, size=n)


def sample_timestep(sampler: TimestepSampler) -> int:
    return int(sampler.draw(1)[0])


@dataclass(frozen=True)
class WeightRule:
    """Per-timestep distillation weight: ``alpha_squared`` (alpha_t**2) or ``constant`` (1)."""

    kind: str = "alpha_squared"

    def __post_init__(self):
        if self.kind not in ("alpha_squared", "constant"):
            raise ValueError(f"unknown weight rule {self.kind!r}")

    def table(self, schedule: NoiseSchedule) -> np.ndarray:
        if self.kind == "constant":
            return np.ones(schedule.T + 1)
        return schedule.alpha**2

    def __call__(self, schedule: NoiseSchedule, t: int) -> float:
        return float(self.table(schedule)[t])
