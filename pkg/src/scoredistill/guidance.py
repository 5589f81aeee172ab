"""Split a distillation step into classifier and smoothing guidance, then recombine.

All vectors are loss gradients with respect to the noised sample: the
parameter update descends along ``omega(t) * d`` pulled back through the
generator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mgda import pair_alpha
from .oracle import NULL, GmmOracle, predict_eps
from .schedule import NoiseSchedule, add_noise

__all__ = [
    "GuidancePair",
    "Combiner",
    "StepDirection",
    "decompose",
    "combine",
    "step_statistics",
    "SDS",
    "CSD",
    "FIXED_RATIO",
    "BSD",
]

SDS, CSD, FIXED_RATIO, BSD = "sds", "csd", "fixed_ratio", "bsd"
_KINDS = (SDS, CSD, FIXED_RATIO, BSD)


@dataclass(frozen=True)
class GuidancePair:
    delta_cg: np.ndarray
    delta_sg: np.ndarray
    delta_sg_residual: np.ndarray
    t: int
    eps: np.ndarray

    @property
    def dot(self) -> float:
        return float(self.delta_cg @ self.delta_sg)


@dataclass(frozen=True)
class Combiner:
    """Rule turning a :class:`GuidancePair` into an update direction.

    ``subtract_eps`` selects the residual smoothing term ``delta_sg - eps/sigma``.
    It defaults to True for SDS (the classic ``eps_hat - eps`` form) and False
    elsewhere.
    """

    kind: str
    cfg_scale: float = 100.0
    u: float = 1.0
    v: float = 1.0
    lam: float = 25.0
    subtract_eps: bool | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown combiner {self.kind!r}; expected one of {_KINDS}")
        if self.subtract_eps is None:
            object.__setattr__(self, "subtract_eps", self.kind == SDS)
        if self.kind == SDS and not self.cfg_scale > 0:
            raise ValueError("cfg_scale must be positive")
        if self.kind == FIXED_RATIO and (self.u < 0 or self.v < 0 or self.u + self.v <= 0):
            raise ValueError("fixed-ratio weights need u, v >= 0 and u + v > 0")
        if self.kind == BSD and not self.lam > 0:
            raise ValueError("lambda must be positive")

    @classmethod
    def sds(cls, cfg_scale=100.0, subtract_eps=True):
        return cls(SDS, cfg_scale=cfg_scale, subtract_eps=subtract_eps)

    @classmethod
    def csd(cls):
        return cls(CSD)

    @classmethod
    def fixed_ratio(cls, u, v, subtract_eps=False):
        return cls(FIXED_RATIO, u=u, v=v, subtract_eps=subtract_eps)

    @classmethod
    def bsd(cls, lam=25.0, subtract_eps=False):
        return cls(BSD, lam=lam, subtract_eps=subtract_eps)

    def label(self) -> str:
        if self.kind == SDS:
            return f"sds(cfg={self.cfg_scale:g})"
        if self.kind == FIXED_RATIO:
            return f"fixed_ratio(u={self.u:g},v={self.v:g})"
        if self.kind == BSD:
            return f"bsd(lambda={self.lam:g}{',residual' if self.subtract_eps else ''})"
        return "csd"


@dataclass(frozen=True)
class StepDirection:
    direction: np.ndarray
    alpha_mgda: float | None
    dot_cg_sg: float
    norms: tuple[float, float]
    # the smoothing term this combiner actually used (delta_sg or its residual)
    smoothing: np.ndarray = field(repr=False, default=None)


def decompose(oracle: GmmOracle, schedule: NoiseSchedule, x0, t: int, label, eps) -> GuidancePair:
    """Noise ``x0`` with ``eps`` at level ``t`` and split the conditional score."""
    if label is NULL:
        raise ValueError("decompose needs a real class label, not the null condition")
    schedule._check_t(t)
    x_t = add_noise(schedule, x0, t, eps)
    sigma = schedule.sigma[t]
    eps_y = predict_eps(oracle, schedule, x_t, t, label).eps_hat
    eps_null = predict_eps(oracle, schedule, x_t, t, NULL).eps_hat
    delta_sg = eps_null / sigma
    return GuidancePair(
        delta_cg=(eps_y - eps_null) / sigma,
        delta_sg=delta_sg,
        delta_sg_residual=delta_sg - np.asarray(eps, dtype=np.float64) / sigma,
        t=int(t),
        eps=np.asarray(eps, dtype=np.float64),
    )


def combine(pair: GuidancePair, combiner: Combiner) -> StepDirection:
    cg = pair.delta_cg
    sg = pair.delta_sg_residual if combiner.subtract_eps else pair.delta_sg
    alpha = None
    if combiner.kind == SDS:
        d = combiner.cfg_scale * cg + sg
    elif combiner.kind == CSD:
        d = cg.copy()
    elif combiner.kind == FIXED_RATIO:
        d = combiner.u * cg + combiner.v * sg
    else:
        g1 = combiner.lam * cg
        if max(np.linalg.norm(g1), np.linalg.norm(sg)) < 1e-18:
            alpha, d = 0.5, np.zeros_like(cg)
        else:
            alpha = pair_alpha(g1, sg)[0]
            d = alpha * g1 + (1.0 - alpha) * sg
    return StepDirection(
        direction=d,
        alpha_mgda=alpha,
        dot_cg_sg=pair.dot,
        norms=(float(np.linalg.norm(cg)), float(np.linalg.norm(pair.delta_sg))),
        smoothing=sg,
    )


def step_statistics(pair: GuidancePair, direction: StepDirection) -> dict:
    d = direction.direction
    return {
        "t": pair.t,
        "angle_obtuse": pair.dot < 0,
        "dot_cg_sg": pair.dot,
        "proj_cg": float(d @ pair.delta_cg),
        "proj_sg": float(d @ direction.smoothing),
        "norm_cg": direction.norms[0],
        "norm_sg": float(np.linalg.norm(pair.delta_sg)),
        "norm_sg_residual": float(np.linalg.norm(pair.delta_sg_residual)),
    }
