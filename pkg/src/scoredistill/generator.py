"""Differentiable parameterizations and the distillation loop that drives them.

Two generators map parameters to a sample ``x0``:

* :class:`DirectGenerator`: the parameters are the sample.
* :class:`SplatGenerator`: additive isotropic 2D Gaussian splats rendered to
  an ``H x W x 3`` image.

Each exposes ``render`` and an exact vector-Jacobian product, so guidance on
``x0`` can be pulled back to the parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _backend
from .guidance import BSD, CSD, FIXED_RATIO, SDS, Combiner, combine, decompose
from .oracle import NULL, GmmOracle, log_density_t
from .schedule import NoiseSchedule, TimestepSampler, WeightRule, sample_timestep

__all__ = [
    "DirectParams",
    "SplatParams",
    "RenderOutput",
    "DirectGenerator",
    "SplatGenerator",
    "Adam",
    "render",
    "vjp",
    "distill_step",
    "run_distillation",
    "DistillRun",
    "write_ppm",
    "RECORD_FIELDS",
]

# column order of the per-step record array; matches the compiled kernel
RECORD_FIELDS = (
    "t",
    "alpha_mgda",
    "dot_cg_sg",
    "norm_cg",
    "norm_sg",
    "norm_sg_residual",
    "proj_cg",
    "proj_sg",
    "dir_norm_sq",
    "logp_x_given_y",
    "logp_x",
)
_COL = {name: i for i, name in enumerate(RECORD_FIELDS)}
_KIND_CODE = {SDS: 0, CSD: 1, FIXED_RATIO: 2, BSD: 3}
_EPS_CHUNK = 4096


@dataclass
class DirectParams:
    x: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if not np.all(np.isfinite(self.x)):
            raise ValueError("direct parameters must be finite")


@dataclass
class SplatParams:
    """K splats on a ``canvas = (W, H)`` image.

    Centers are in [0, 1]^2 image coordinates; ``exp(log_scales)`` is the
    splat radius in image-width units.
    """

    centers: np.ndarray
    log_scales: np.ndarray
    colors: np.ndarray
    opacity_logits: np.ndarray
    canvas: tuple[int, int]

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 2)
        K = self.centers.shape[0]
        if K < 1:
            raise ValueError("need at least one splat")
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(K)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(K, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(K)
        self.canvas = (int(self.canvas[0]), int(self.canvas[1]))

    def to_array(self) -> np.ndarray:
        return np.ascontiguousarray(
            np.column_stack([self.centers, self.log_scales, self.colors, self.opacity_logits])
        )

    @classmethod
    def from_array(cls, arr, canvas) -> SplatParams:
        arr = np.asarray(arr, dtype=np.float64).reshape(-1, 7)
        return cls(arr[:, :2], arr[:, 2], arr[:, 3:6], arr[:, 6], canvas)


@dataclass
class RenderOutput:
    image: np.ndarray
    cache: dict = field(default_factory=dict, repr=False)


class DirectGenerator:
    kind = "direct"

    def __init__(self, dim: int, image_shape=None):
        self.dim = int(dim)
        self.n_params = self.dim
        self.image_shape = tuple(image_shape) if image_shape is not None else None

    def render(self, theta):
        return theta

    def vjp(self, theta, cotangent):
        return np.asarray(cotangent, dtype=np.float64)

    def initial(self, oracle: GmmOracle, rng: np.random.Generator) -> np.ndarray:
        return oracle.global_mean().copy()


class SplatGenerator:
    kind = "splat"

    def __init__(self, n_splats: int, width: int, height: int, init_scale: float = 0.05):
        if n_splats < 1:
            raise ValueError("need at least one splat")
        self.n_splats = int(n_splats)
        self.width, self.height = int(width), int(height)
        self.dim = self.width * self.height * 3
        self.n_params = 7 * self.n_splats
        self.image_shape = (self.height, self.width, 3)
        self.init_scale = init_scale

    def render(self, theta):
        out = np.empty(self.dim)
        _backend.splat_render(np.ascontiguousarray(theta).reshape(-1, 7), self.width, self.height, out)
        return out

    def vjp(self, theta, cotangent):
        grad = np.empty((self.n_splats, 7))
        _backend.splat_vjp(
            np.ascontiguousarray(theta).reshape(-1, 7),
            self.width,
            self.height,
            np.ascontiguousarray(cotangent, dtype=np.float64),
            grad,
        )
        return grad.ravel()

    def initial(self, oracle: GmmOracle, rng: np.random.Generator) -> np.ndarray:
        K = self.n_splats
        params = SplatParams(
            centers=rng.uniform(0.0, 1.0, size=(K, 2)),
            log_scales=np.full(K, np.log(self.init_scale)),
            colors=np.full((K, 3), 0.5),
            opacity_logits=np.zeros(K),
            canvas=(self.width, self.height),
        )
        return params.to_array().ravel()


def _generator_for(params):
    if isinstance(params, DirectParams):
        return DirectGenerator(params.x.size), params.x
    if isinstance(params, SplatParams):
        K = params.centers.shape[0]
        return SplatGenerator(K, *params.canvas), params.to_array().ravel()
    raise TypeError(f"unsupported parameter type {type(params).__name__}")


def _wrap_like(params, theta):
    if isinstance(params, DirectParams):
        return DirectParams(theta)
    return SplatParams.from_array(theta, params.canvas)


def render(params) -> RenderOutput:
    gen, theta = _generator_for(params)
    return RenderOutput(gen.render(theta), {"theta": theta})


def vjp(params, cotangent):
    """Gradient of ``<render(params), cotangent>``, in the same structure as ``params``."""
    gen, theta = _generator_for(params)
    cotangent = np.asarray(cotangent, dtype=np.float64)
    if cotangent.size != gen.dim:
        raise ValueError(f"cotangent has {cotangent.size} entries, image has {gen.dim}")
    return _wrap_like(params, gen.vjp(theta, cotangent.ravel()))


@dataclass
class Adam:
    """Adam with bias correction; ``kind='sgd'`` gives plain gradient descent."""

    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    kind: str = "adam"
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)
    steps: int = 0

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")

    def _ensure_state(self, n):
        if self.m is None:
            self.m = np.zeros(n)
            self.v = np.zeros(n)

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self._ensure_state(theta.size)
        self.steps += 1
        if self.kind == "sgd":
            return theta - self.lr * grad
        k = self.steps
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        mh = self.m / (1.0 - self.beta1**k)
        vh = self.v / (1.0 - self.beta2**k)
        return theta - self.lr * mh / (np.sqrt(vh) + self.eps)


class NonFiniteGradient(FloatingPointError):
    def __init__(self, step: int, record: dict):
        super().__init__(f"non-finite parameter gradient at step {step} (t={record.get('t')})")
        self.step = step
        self.record = record


def _step_record(oracle, schedule, x0, t, label, eps, combiner):
    pair = decompose(oracle, schedule, x0, t, label, eps)
    direction = combine(pair, combiner)
    d = direction.direction
    row = np.empty(len(RECORD_FIELDS))
    row[_COL["t"]] = t
    row[_COL["alpha_mgda"]] = np.nan if direction.alpha_mgda is None else direction.alpha_mgda
    row[_COL["dot_cg_sg"]] = pair.dot
    row[_COL["norm_cg"]] = direction.norms[0]
    row[_COL["norm_sg"]] = direction.norms[1]
    row[_COL["norm_sg_residual"]] = np.linalg.norm(pair.delta_sg_residual)
    row[_COL["proj_cg"]] = d @ pair.delta_cg
    row[_COL["proj_sg"]] = d @ direction.smoothing
    row[_COL["dir_norm_sq"]] = d @ d
    row[_COL["logp_x_given_y"]] = log_density_t(oracle, schedule, x0, 0, label)
    row[_COL["logp_x"]] = log_density_t(oracle, schedule, x0, 0, NULL)
    return row, d


def record_dict(row: np.ndarray, log_prior_y: float) -> dict:
    rec = {name: float(row[i]) for i, name in enumerate(RECORD_FIELDS)}
    rec["t"] = int(rec["t"])
    if np.isnan(rec["alpha_mgda"]):
        rec["alpha_mgda"] = None
    rec["logp_y_given_x"] = rec["logp_x_given_y"] + log_prior_y - rec["logp_x"]
    return rec


def _apply(generator, theta, x0_dir, weight, optimizer):
    grad = weight * generator.vjp(theta, x0_dir)
    if not np.all(np.isfinite(grad)):
        return None
    return optimizer.step(theta, grad)


def distill_step(
    params,
    oracle: GmmOracle,
    schedule: NoiseSchedule,
    combiner: Combiner,
    sampler: TimestepSampler,
    rng: np.random.Generator,
    *,
    label: int = 0,
    weight: WeightRule = WeightRule(),
    optimizer: Adam | None = None,
):
    """One distillation update: sample (t, eps), render, decompose, combine, back-propagate.

    Pass the same ``optimizer`` across calls to keep its moment state.
    Returns ``(updated params, record dict)``; raises :class:`NonFiniteGradient`
    if the parameter gradient is not finite.
    """
    gen, theta = _generator_for(params)
    if optimizer is None:
        optimizer = Adam(lr=0.01 if gen.kind == "direct" else 0.005)
    t = sample_timestep(sampler)
    eps = rng.standard_normal(oracle.dim)
    x0 = gen.render(theta)
    row, d = _step_record(oracle, schedule, x0, t, label, eps, combiner)
    record = record_dict(row, float(np.log(oracle.class_prior[label])))
    new_theta = _apply(gen, theta, d, weight(schedule, t), optimizer)
    if new_theta is None:
        raise NonFiniteGradient(0, record)
    return _wrap_like(params, new_theta), record


@dataclass
class DistillRun:
    records: np.ndarray  # (completed, len(RECORD_FIELDS))
    trajectory: np.ndarray  # (completed + 1, n_params); row 0 is the start
    completed: int
    requested: int
    tail_direction_mean: np.ndarray
    backend: str

    @property
    def aborted(self) -> bool:
        return self.completed < self.requested

    @property
    def final(self) -> np.ndarray:
        return self.trajectory[self.completed]


def _eps_chunks(rng, n, dim):
    for start in range(0, n, _EPS_CHUNK):
        yield start, rng.standard_normal((min(_EPS_CHUNK, n - start), dim))


def run_distillation(
    generator,
    theta0: np.ndarray,
    oracle: GmmOracle,
    schedule: NoiseSchedule,
    combiner: Combiner,
    label: int,
    ts: np.ndarray,
    eps_rng: np.random.Generator,
    weight: WeightRule,
    optimizer: Adam,
    tail_from: int | None = None,
    use_kernel: bool = True,
) -> DistillRun:
    """Run ``len(ts)`` steps, drawing noise from ``eps_rng`` in order.

    Direct generators go through the fused compiled loop when available;
    everything else uses the step-by-step path. ``tail_from`` marks where
    accumulation of the mean update direction starts (default: last 10%).
    """
    ts = np.ascontiguousarray(ts, dtype=np.int64)
    n = ts.size
    tail_from = n - max(1, n // 10) if tail_from is None else tail_from
    if generator.dim != oracle.dim:
        raise ValueError(f"generator renders {generator.dim} values, oracle expects {oracle.dim}")
    records = np.full((n, len(RECORD_FIELDS)), np.nan)
    traj = np.empty((n + 1, generator.n_params))
    theta = np.array(theta0, dtype=np.float64)
    traj[0] = theta
    dsum = np.zeros(oracle.dim)
    weights = weight.table(schedule)
    fused = use_kernel and _backend.HAVE_EXT and generator.kind == "direct"
    completed = 0
    optimizer._ensure_state(theta.size)

    if fused:
        logw_c = np.ascontiguousarray(oracle.log_mix_weights(label))
        logw_u = np.ascontiguousarray(oracle.log_mix_weights(NULL))
        means = np.ascontiguousarray(oracle.means)
        for start, eps in _eps_chunks(eps_rng, n, oracle.dim):
            m = eps.shape[0]
            done = _backend.direct_trajectory(
                theta, ts[start : start + m], eps,
                schedule.alpha, schedule.sigma, weights,
                means, oracle.scales, logw_c, logw_u,
                _KIND_CODE[combiner.kind], combiner.cfg_scale, combiner.u, combiner.v,
                combiner.lam, bool(combiner.subtract_eps),
                optimizer.kind == "adam", optimizer.lr, optimizer.beta1, optimizer.beta2,
                optimizer.eps, optimizer.m, optimizer.v, optimizer.steps,
                traj[start + 1 : start + 1 + m], records[start : start + m],
                tail_from - start, dsum,
            )  # fmt: skip
            optimizer.steps += done
            completed += done
            if done < m:
                break
    else:
        for start, eps in _eps_chunks(eps_rng, n, oracle.dim):
            aborted = False
            for j in range(eps.shape[0]):
                i = start + j
                t = int(ts[i])
                x0 = generator.render(theta)
                records[i], d = _step_record(oracle, schedule, x0, t, label, eps[j], combiner)
                new_theta = _apply(generator, theta, d, weights[t], optimizer)
                if new_theta is None:
                    aborted = True
                    break
                if i >= tail_from:
                    dsum += d
                theta = new_theta
                traj[i + 1] = theta
                completed += 1
            if aborted:
                break

    tail_n = max(1, completed - tail_from)
    return DistillRun(
        records=records[: max(completed, min(completed + 1, n))],
        trajectory=traj[: completed + 1],
        completed=completed,
        requested=n,
        tail_direction_mean=dsum / tail_n,
        backend="fused" if fused else f"stepwise-{_backend.NAME}",
    )


def write_ppm(path, image, shape) -> None:
    """Write an ``(H, W, 3)`` image as binary P6; values are scaled by 255 and clamped."""
    H, W, C = shape
    if C != 3:
        raise ValueError("PPM export needs 3 channels")
    img = np.asarray(image, dtype=np.float64).reshape(H, W, 3)
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (W, H))
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM")
    W, H, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError("only 8-bit PPM supported")
    return np.frombuffer(parts[4][: W * H * 3], dtype=np.uint8).reshape(H, W, 3)
