"""Min-norm combination of objective gradients (MGDA).

For two objectives the minimum-norm point on the segment between the
gradients has a closed form; for more, Frank-Wolfe on the simplex.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = ["MgdaSolution", "solve_mgda_pair", "solve_mgda_n", "pareto_stationarity_gap"]

_DEGENERATE_DENOM = 1e-24
_ZERO_NORM = 1e-18


@dataclass(frozen=True)
class MgdaSolution:
    weights: np.ndarray
    direction: np.ndarray
    norm: float
    clamped: bool = False
    stationary: bool = False

    @property
    def alpha(self) -> float:
        """Weight on the first gradient."""
        return float(self.weights[0])


def pair_alpha(g1: np.ndarray, g2: np.ndarray) -> tuple[float, float, bool]:
    """Return ``(alpha, alpha_hat, clamped)`` minimizing ``|alpha g1 + (1-alpha) g2|``."""
    diff = g2 - g1
    denom = float(diff @ diff)
    if denom < _DEGENERATE_DENOM:
        return 0.5, 0.5, False
    alpha_hat = float(diff @ g2) / denom
    alpha = min(max(alpha_hat, 0.0), 1.0)
    return alpha, alpha_hat, alpha != alpha_hat


def solve_mgda_pair(g1, g2) -> MgdaSolution:
    g1 = np.asarray(g1, dtype=np.float64)
    g2 = np.asarray(g2, dtype=np.float64)
    if g1.shape != g2.shape:
        raise ValueError(f"gradient shapes differ: {g1.shape} vs {g2.shape}")
    if np.linalg.norm(g1) < _ZERO_NORM and np.linalg.norm(g2) < _ZERO_NORM:
        return MgdaSolution(np.array([0.5, 0.5]), np.zeros_like(g1), 0.0, stationary=True)
    alpha, _, clamped = pair_alpha(g1, g2)
    d = alpha * g1 + (1.0 - alpha) * g2
    return MgdaSolution(np.array([alpha, 1.0 - alpha]), d, float(np.linalg.norm(d)), clamped)


def solve_mgda_n(gradients: Sequence, max_iter: int = 10_000, tol: float = 1e-10) -> MgdaSolution:
    """Away-step Frank-Wolfe on the simplex for ``min_w |sum_i w_i g_i|^2``.

    Stops when the Frank-Wolfe duality gap drops below ``tol`` or after
    ``max_iter`` iterations. Away steps give linear convergence when the
    optimum sits on a face of the simplex.
    """
    if len(gradients) == 0:
        raise ValueError("need at least one gradient")
    G = np.array([np.asarray(g, dtype=np.float64).ravel() for g in gradients])
    dims = {np.asarray(g).size for g in gradients}
    if len(dims) != 1:
        raise ValueError("gradients must share one dimension")
    n = G.shape[0]
    gram = G @ G.T
    w = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        gw = gram @ w
        wgw = float(w @ gw)
        i = int(np.argmin(gw))
        fw_gap = wgw - gw[i]
        if 2.0 * fw_gap < tol:
            break
        support = np.flatnonzero(w > 0)
        j = int(support[np.argmax(gw[support])])
        if fw_gap >= gw[j] - wgw or w[j] >= 1.0:
            direction = -w.copy()
            direction[i] += 1.0
            gamma_max = 1.0
        else:
            direction = w.copy()
            direction[j] -= 1.0
            gamma_max = w[j] / (1.0 - w[j])
        dQd = float(direction @ gram @ direction)
        slope = float(direction @ gw)
        gamma = gamma_max if dQd <= 0 else min(max(-slope / dQd, 0.0), gamma_max)
        if gamma == 0.0:
            break
        w = w + gamma * direction
        w[w < 0] = 0.0
        w /= w.sum()
    d = w @ G
    return MgdaSolution(w, d, float(np.linalg.norm(d)))


def pareto_stationarity_gap(gradients: Sequence, weights) -> float:
    """Norm of the weighted gradient combination; zero at a Pareto-stationary point."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or len(w) != len(gradients):
        raise ValueError("need one weight per gradient")
    if np.any(w < -1e-12) or abs(w.sum() - 1.0) > 1e-10:
        raise ValueError("weights must lie on the probability simplex")
    G = np.array([np.asarray(g, dtype=np.float64).ravel() for g in gradients])
    return float(np.linalg.norm(w @ G))
