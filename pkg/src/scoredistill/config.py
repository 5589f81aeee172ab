"""Experiment configuration: TOML files, named preset fragments, validation and builders.

A config is one TOML document. ``preset = "<name>"`` merges a fragment from the
bundled ``presets`` directory underneath it (keys in the file win). Every field
is checked in :func:`parse_config` so that a bad value fails before any run starts.
"""

from __future__ import annotations

import copy
import sys
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .generator import Adam, DirectGenerator, SplatGenerator
from .guidance import BSD, Combiner
from .oracle import GmmOracle
from .schedule import NoiseSchedule, WeightRule, build_schedule

_SEED_MAX = 2**64


class ConfigError(ValueError):
    """Raised for any invalid or missing configuration value."""


def preset_names() -> list[str]:
    files = resources.files(__package__).joinpath("presets").iterdir()
    return sorted(p.name[:-5] for p in files if p.name.endswith(".toml"))


def load_preset(name: str) -> dict:
    path = resources.files(__package__).joinpath("presets", f"{name}.toml")
    if not path.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return tomllib.loads(path.read_text(encoding="utf-8"))


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass(frozen=True)
class RunConfig:
    """Validated experiment settings. ``raw`` keeps the merged TOML tree."""

    oracle: dict
    schedule: dict
    generator: dict
    combiner: dict
    optimizer: dict
    steps: int
    overtrain_factor: float
    seeds: tuple[int, ...]
    output_dir: Path
    record_every: int
    label: int = 0
    weight: str = "alpha_squared"
    t_min: int | None = None
    t_max: int | None = None
    window: int = 50
    slack: float = 1.0
    jobs: int = 1
    lambdas: tuple[float, ...] = (5.0, 15.0, 25.0, 35.0)
    compare: tuple[dict, ...] = ()
    census: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def total_steps(self) -> int:
        return int(round(self.steps * self.overtrain_factor))

    def with_overrides(self, seeds=None, output_dir=None, overtrain_factor=None, combiner=None, jobs=None) -> RunConfig:
        changes = {}
        if jobs is not None:
            changes["jobs"] = _int_field({"jobs": jobs}, "jobs", 1)
        if seeds is not None:
            changes["seeds"] = _check_seeds(seeds)
        if output_dir is not None:
            changes["output_dir"] = Path(output_dir)
        if overtrain_factor is not None:
            changes["overtrain_factor"] = _check_overtrain(overtrain_factor)
        if combiner is not None:
            changes["combiner"] = _check_combiner(combiner)
        return replace(self, **changes)

    def build_oracle(self) -> GmmOracle:
        return build_oracle(self.oracle)

    def build_schedule(self) -> NoiseSchedule:
        spec = dict(self.schedule)
        return build_schedule(spec.pop("T", 1000), spec.pop("kind", "linear"), **spec)

    def build_generator(self, oracle: GmmOracle):
        return build_generator(self.generator, oracle, self.oracle.get("image_shape"))

    def build_combiner(self) -> Combiner:
        return make_combiner(self.combiner)

    def build_optimizer(self, generator) -> Adam:
        spec = dict(self.optimizer)
        if "lr" not in spec:
            spec["lr"] = 0.01 if generator.kind == "direct" else 0.005
        return Adam(**spec)

    def build_weight(self) -> WeightRule:
        return WeightRule(self.weight)

    def compare_combiners(self) -> list[Combiner]:
        specs = self.compare or ({"kind": "bsd", "lam": 25.0}, {"kind": "sds", "cfg_scale": 100.0}, {"kind": "csd"})
        return [make_combiner(s) for s in specs]


def _check_seeds(seeds) -> tuple[int, ...]:
    if isinstance(seeds, int):
        seeds = [seeds]
    seeds = list(seeds)
    if not seeds:
        raise ConfigError("seeds must be a non-empty list")
    for s in seeds:
        if isinstance(s, bool) or not isinstance(s, (int, np.integer)) or not 0 <= s < _SEED_MAX:
            raise ConfigError(f"seed {s!r} is not an unsigned 64-bit integer")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds must be distinct")
    return tuple(int(s) for s in seeds)


def _check_overtrain(f) -> float:
    if isinstance(f, bool) or not isinstance(f, (int, float)) or not np.isfinite(f) or f < 1:
        raise ConfigError(f"overtrain_factor must be a number >= 1, got {f!r}")
    return float(f)


def _int_field(d: dict, key: str, default, lo: int = 1):
    v = d.get(key, default)
    if v is None:
        return None
    if isinstance(v, bool) or not isinstance(v, int) or v < lo:
        raise ConfigError(f"{key} must be an integer >= {lo}, got {v!r}")
    return v


_COMBINER_KEYS = {"kind", "cfg_scale", "u", "v", "lam", "subtract_eps"}


def make_combiner(spec: dict) -> Combiner:
    try:
        return Combiner(**spec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"combiner: {exc}") from None


def _check_combiner(spec) -> dict:
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError("combiner needs a table with a 'kind' key")
    extra = set(spec) - _COMBINER_KEYS
    if extra:
        raise ConfigError(f"combiner: unknown keys {sorted(extra)}")
    make_combiner(spec)
    return dict(spec)


def _disc_image(spec: dict, shape) -> np.ndarray:
    H, W, C = shape
    try:
        bg = np.asarray(spec["background"], dtype=np.float64)
        color = np.asarray(spec["color"], dtype=np.float64)
        cx, cy = (float(c) for c in spec["center"])
        radius = float(spec["radius"])
        exposure = float(spec.get("exposure", 1.0))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"image component needs background, color, center, radius ({exc})") from None
    if bg.shape != (C,) or color.shape != (C,):
        raise ConfigError(f"image colors must have {C} channels")
    ys = (np.arange(H) + 0.5) / H
    xs = (np.arange(W) + 0.5) / W
    inside = (xs[None, :] - cx) ** 2 + (ys[:, None] - cy) ** 2 <= radius**2
    img = np.where(inside[..., None], color, bg)
    return exposure * img.ravel()


def build_oracle(spec: dict) -> GmmOracle:
    classes = spec.get("classes")
    if not classes:
        raise ConfigError("oracle.classes must list at least one class")
    shape = spec.get("image_shape")
    if shape is not None:
        if len(shape) != 3 or any(int(s) < 1 for s in shape):
            raise ConfigError("oracle.image_shape must be [height, width, channels]")
        shape = tuple(int(s) for s in shape)
    built = []
    for k, cls in enumerate(classes):
        comps = cls.get("components") if isinstance(cls, dict) else None
        if not comps:
            raise ConfigError(f"oracle class {k} has no components")
        row = []
        for c in comps:
            if "image" in c:
                if shape is None:
                    raise ConfigError("image components need oracle.image_shape")
                mean = _disc_image(c["image"], shape)
            elif "mean" in c:
                mean = np.asarray(c["mean"], dtype=np.float64)
            else:
                raise ConfigError(f"oracle class {k}: component needs 'mean' or 'image'")
            try:
                row.append((float(c["weight"]), mean, float(c["scale"])))
            except KeyError as exc:
                raise ConfigError(f"oracle class {k}: component is missing {exc}") from None
        built.append(row)
    try:
        oracle = GmmOracle(built, spec.get("class_prior"))
    except ValueError as exc:
        raise ConfigError(f"oracle: {exc}") from None
    if shape is not None and int(np.prod(shape)) != oracle.dim:
        raise ConfigError(f"image_shape {shape} does not match oracle dimension {oracle.dim}")
    return oracle


def build_generator(spec: dict, oracle: GmmOracle, image_shape=None):
    kind = spec.get("kind", "direct")
    if kind == "direct":
        return DirectGenerator(oracle.dim, tuple(image_shape) if image_shape else None)
    if kind == "splat":
        W, H = int(spec.get("width", 8)), int(spec.get("height", 8))
        gen = SplatGenerator(int(spec.get("n_splats", 12)), W, H, float(spec.get("init_scale", 0.05)))
        if gen.dim != oracle.dim:
            raise ConfigError(f"splat canvas {W}x{H}x3 does not match oracle dimension {oracle.dim}")
        return gen
    raise ConfigError(f"unknown generator kind {kind!r}")


def parse_config(tree: dict) -> RunConfig:
    """Validate a merged TOML tree and return a :class:`RunConfig`."""
    if "preset" in tree:
        tree = _merge(load_preset(tree["preset"]), {k: v for k, v in tree.items() if k != "preset"})
    if "oracle" not in tree:
        raise ConfigError("config needs an [oracle] table or a preset")

    steps = _int_field(tree, "steps", 2000)
    record_every = _int_field(tree, "record_every", 1)
    label = _int_field(tree, "label", 0, lo=0)
    window = _int_field(tree, "window", 50)
    jobs = _int_field(tree, "jobs", 1)
    seeds = _check_seeds(tree.get("seeds", [0]))
    overtrain = _check_overtrain(tree.get("overtrain_factor", 1.0))
    slack = tree.get("slack", 1.0)
    if isinstance(slack, bool) or not isinstance(slack, (int, float)) or slack < 0:
        raise ConfigError(f"slack must be a non-negative number, got {slack!r}")

    out = Path(tree.get("output_dir", "runs"))

    ts = tree.get("timesteps", {})
    optimizer = dict(tree.get("optimizer", {}))
    weight = tree.get("weight", {})
    weight = weight.get("kind", "alpha_squared") if isinstance(weight, dict) else weight

    sweep = tree.get("sweep", {})
    lambdas = tuple(float(x) for x in sweep.get("lambdas", (5.0, 15.0, 25.0, 35.0)))
    if not lambdas or any(not lam > 0 for lam in lambdas):
        raise ConfigError("sweep.lambdas must be a non-empty list of positive numbers")
    compare = tuple(_check_combiner(c) for c in tree.get("compare", {}).get("combiners", ()))

    cfg = RunConfig(
        oracle=tree["oracle"],
        schedule=dict(tree.get("schedule", {})),
        generator=dict(tree.get("generator", {})),
        combiner=_check_combiner(tree.get("combiner", {"kind": BSD, "lam": 25.0})),
        optimizer=optimizer,
        steps=steps,
        overtrain_factor=overtrain,
        seeds=seeds,
        output_dir=out,
        record_every=record_every,
        label=label,
        weight=weight,
        t_min=_int_field(ts, "t_min", None),
        t_max=_int_field(ts, "t_max", None),
        window=window,
        slack=float(slack),
        jobs=jobs,
        lambdas=lambdas,
        compare=compare,
        census=dict(tree.get("census", {})),
        raw=tree,
    )
    _check_buildable(cfg)
    return cfg


def _check_buildable(cfg: RunConfig) -> None:
    oracle = cfg.build_oracle()
    if cfg.label >= oracle.n_classes:
        raise ConfigError(f"label {cfg.label} out of range for {oracle.n_classes} classes")
    try:
        schedule = cfg.build_schedule()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"schedule: {exc}") from None
    gen = cfg.build_generator(oracle)
    try:
        cfg.build_optimizer(gen)
        cfg.build_weight()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    t_min = cfg.t_min if cfg.t_min is not None else max(1, round(0.02 * schedule.T))
    t_max = cfg.t_max if cfg.t_max is not None else round(0.98 * schedule.T)
    if not 1 <= t_min <= t_max <= schedule.T:
        raise ConfigError(f"timestep window [{t_min}, {t_max}] must lie inside [1, {schedule.T}]")


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        tree = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(tree)
