"""Pure-numpy versions of the compiled splat kernels."""

import numpy as np
from scipy.special import expit as _sigmoid


def _pixel_offsets(params, W, H):
    aspect = H / W
    px = (np.arange(W) + 0.5) / W
    py = (np.arange(H) + 0.5) / H
    dx = px[None, None, :] - params[:, 0, None, None]  # (K, 1, W)
    dy = (py[None, :, None] - params[:, 1, None, None]) * aspect  # (K, H, 1)
    return dx, dy, aspect


def splat_render(params, W, H, out):
    dx, dy, _ = _pixel_offsets(params, W, H)
    s2 = np.exp(2.0 * params[:, 2])[:, None, None]
    ker = np.exp(-(dx**2 + dy**2) / (2.0 * s2)) * _sigmoid(params[:, 6])[:, None, None]
    out[:] = np.einsum("khw,kc->hwc", ker, params[:, 3:6]).ravel()


def splat_vjp(params, W, H, cot, grad):
    dx, dy, aspect = _pixel_offsets(params, W, H)
    s2 = np.exp(2.0 * params[:, 2])
    r2 = dx**2 + dy**2
    ker = np.exp(-r2 / (2.0 * s2[:, None, None]))  # (K, H, W)
    op = _sigmoid(params[:, 6])
    c = np.asarray(cot).reshape(H, W, 3)
    per_channel = np.einsum("khw,hwc->kc", ker, c)
    q = ker * np.einsum("hwc,kc->khw", c, params[:, 3:6])
    grad[:, 0] = op * (q * dx).sum(axis=(1, 2)) / s2
    grad[:, 1] = op * (q * dy).sum(axis=(1, 2)) * aspect / s2
    grad[:, 2] = op * (q * r2).sum(axis=(1, 2)) / s2
    grad[:, 3:6] = op[:, None] * per_channel
    grad[:, 6] = op * (1.0 - op) * q.sum(axis=(1, 2))
