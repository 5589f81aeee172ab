"""Analytic stand-in for a pretrained diffusion model.

A labeled mixture of isotropic Gaussians. Noising a component N(mu, tau^2 I) to
level t gives N(alpha_t mu, (alpha_t^2 tau^2 + sigma_t^2) I), so noised
densities, scores and Bayes-optimal noise predictions are all closed form.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .schedule import NoiseSchedule

__all__ = ["NULL", "Component", "GmmOracle", "EpsPrediction", "log_density_t", "score_t", "predict_eps", "predict_eps_many"]

#: The null condition: the prior-weighted mixture over all classes.
NULL = None

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class Component:
    weight: float
    mean: tuple
    scale: float


class GmmOracle:
    """Class-conditional Gaussian mixture with isotropic components.

    Args:
        classes: one list of :class:`Component` (or ``(weight, mean, scale)``
            tuples) per class.
        class_prior: probability of each class; uniform when omitted.
    """

    def __init__(self, classes: Sequence[Sequence], class_prior=None):
        if len(classes) == 0:
            raise ValueError("oracle needs at least one class")
        means, scales, log_w, owner = [], [], [], []
        for k, comps in enumerate(classes):
            comps = [c if isinstance(c, Component) else Component(*c) for c in comps]
            if not comps:
                raise ValueError(f"class {k} has no components")
            w = np.array([c.weight for c in comps], dtype=np.float64)
            if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
                raise ValueError(f"class {k} component weights must be positive and sum to 1")
            for c in comps:
                if not c.scale > 0:
                    raise ValueError(f"class {k} has non-positive scale {c.scale}")
                means.append(np.asarray(c.mean, dtype=np.float64).ravel())
                scales.append(float(c.scale))
                owner.append(k)
            log_w.extend(np.log(w))
        dims = {m.size for m in means}
        if len(dims) != 1:
            raise ValueError(f"component means have inconsistent dimensions {sorted(dims)}")
        K = len(classes)
        prior = np.full(K, 1.0 / K) if class_prior is None else np.asarray(class_prior, dtype=np.float64)
        if prior.shape != (K,) or np.any(prior <= 0) or abs(prior.sum() - 1.0) > 1e-12:
            raise ValueError("class_prior must hold K positive probabilities summing to 1")

        self.dim = dims.pop()
        self.n_classes = K
        self.class_prior = prior
        self.means = np.array(means)
        self.scales = np.array(scales)
        self.owner = np.array(owner, dtype=np.intp)
        self._log_w = np.array(log_w)
        for arr in (self.class_prior, self.means, self.scales, self.owner, self._log_w):
            arr.setflags(write=False)

    @property
    def n_components(self) -> int:
        return self.scales.size

    def log_mix_weights(self, label) -> np.ndarray:
        """Log mixing weight of every component under ``label`` (-inf outside the class)."""
        if label is NULL:
            return self._log_w + np.log(self.class_prior[self.owner])
        y = self._check_label(label)
        out = np.full(self.n_components, -np.inf)
        mask = self.owner == y
        out[mask] = self._log_w[mask]
        return out

    def global_mean(self) -> np.ndarray:
        w = np.exp(self.log_mix_weights(NULL))
        return w @ self.means

    def sample(self, rng: np.random.Generator, n: int, label=NULL) -> np.ndarray:
        w = np.exp(self.log_mix_weights(label))
        idx = rng.choice(self.n_components, size=n, p=w / w.sum())
        return self.means[idx] + self.scales[idx, None] * rng.standard_normal((n, self.dim))

    def _check_label(self, label) -> int:
        if int(label) != label or not 0 <= label < self.n_classes:
            raise ValueError(f"label {label!r} is not a class index in [0, {self.n_classes})")
        return int(label)

    def __repr__(self):
        return f"GmmOracle(dim={self.dim}, classes={self.n_classes}, components={self.n_components})"


@dataclass(frozen=True)
class EpsPrediction:
    eps_hat: np.ndarray
    t: int
    label: object


def _component_terms(oracle: GmmOracle, alpha, sigma, x):
    # alpha/sigma are scalars or carry one value per leading index of x
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != oracle.dim:
        raise ValueError(f"expected trailing dimension {oracle.dim}, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input point")
    alpha = np.asarray(alpha, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    var = alpha[..., None] ** 2 * oracle.scales**2 + sigma[..., None] ** 2  # (..., M)
    diff = x[..., None, :] - alpha[..., None, None] * oracle.means  # (..., M, D)
    sq = np.einsum("...md,...md->...m", diff, diff)
    log_n = -0.5 * sq / var - 0.5 * oracle.dim * (_LOG_2PI + np.log(var))
    return diff, var, log_n


def log_density_t(oracle: GmmOracle, schedule: NoiseSchedule, x_t, t: int, label=NULL):
    """log p_t(x_t | label); ``label=NULL`` gives the unconditional mixture.

    Accepts a single point ``(D,)`` or a batch ``(..., D)``.
    """
    a, s = schedule.coefficients(t)
    _, _, log_n = _component_terms(oracle, a, s, x_t)
    out = logsumexp(log_n + oracle.log_mix_weights(label), axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def _score(oracle, alpha, sigma, x_t, label):
    diff, var, log_n = _component_terms(oracle, alpha, sigma, x_t)
    lw = log_n + oracle.log_mix_weights(label)
    with np.errstate(invalid="ignore"):  # all components underflowed: NaN flags it downstream
        resp = np.exp(lw - logsumexp(lw, axis=-1, keepdims=True))
    return -np.einsum("...m,...md->...d", resp / var, diff)


def score_t(oracle: GmmOracle, schedule: NoiseSchedule, x_t, t: int, label=NULL) -> np.ndarray:
    """Gradient of :func:`log_density_t` with respect to ``x_t``."""
    a, s = schedule.coefficients(t)
    return _score(oracle, a, s, x_t, label)


def predict_eps(oracle: GmmOracle, schedule: NoiseSchedule, x_t, t: int, label=NULL) -> EpsPrediction:
    """Posterior-mean noise E[eps | x_t], i.e. ``-sigma_t * score``."""
    schedule._check_t(t)
    sigma = schedule.sigma[t]
    return EpsPrediction(-sigma * score_t(oracle, schedule, x_t, t, label), int(t), label)


def predict_eps_many(oracle: GmmOracle, schedule: NoiseSchedule, x_t, ts, label=NULL) -> np.ndarray:
    """Batched :func:`predict_eps` with one timestep per row of ``x_t`` (shape ``(n, D)``)."""
    ts = np.asarray(ts, dtype=np.int64)
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.ndim != 2 or ts.shape != (x_t.shape[0],):
        raise ValueError("need x_t of shape (n, D) and one timestep per row")
    if ts.size and (ts.min() < 1 or ts.max() > schedule.T):
        raise ValueError(f"timesteps must lie in [1, {schedule.T}]")
    sigma = schedule.sigma[ts]
    return -sigma[:, None] * _score(oracle, schedule.alpha[ts], sigma, x_t, label)
