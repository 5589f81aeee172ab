"""Seeded experiment runner and diagnostics.

Every output is a function of ``(config, seed)`` alone: each seed derives three
independent streams (timesteps, noise, initialization) from
``SeedSequence(seed)``, and floats are written with ``repr`` so reruns are
byte-identical.

Output files (``run``):

``steps_seed<S>.csv``
    One row every ``record_every`` steps, columns :data:`STEP_COLUMNS`.
    Density columns describe the parameters *before* that step's update.
``norms_seed<S>.csv``
    Mean ``norm_sg`` / ``norm_sg_residual`` per (t-decile, progress-decile) cell.
``snapshot_seed<S>_{nominal,final}.{ppm,csv}``
    Rendered output at the nominal-convergence step and at the last step.
    Image-shaped generators write binary PPM, the rest a one-row CSV.
``summary.csv``
    One row per seed, columns :data:`SUMMARY_COLUMNS`.
"""

from __future__ import annotations

import csv
import math
import re
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .generator import RECORD_FIELDS, record_dict, run_distillation, write_ppm
from .guidance import BSD, Combiner
from .oracle import NULL, log_density_t, predict_eps_many
from .schedule import TimestepSampler

STEP_COLUMNS = ("step",) + RECORD_FIELDS + ("logp_y_given_x", "pareto_gap")
SUMMARY_COLUMNS = (
    "seed", "combiner", "steps", "completed", "aborted", "nominal_step",
    "best_logp_x_given_y", "nominal_logp_x_given_y", "final_logp_x_given_y",
    "final_logp_x", "final_logp_y_given_x", "overtrain_stable",
    "obtuse_fraction", "final_pareto_gap", "backend",
)  # fmt: skip
NORM_TABLE_COLUMNS = ("t_decile", "progress_decile", "count", "mean_norm_sg", "mean_norm_sg_residual")
SWEEP_COLUMNS = ("lambda", "n_seeds", "n_aborted", "median_final_logp_y_given_x", "median_final_logp_x", "median_final_logp_x_given_y")
COMPARE_COLUMNS = (
    "combiner", "n_seeds", "n_aborted", "median_final_logp_x", "median_final_logp_y_given_x",
    "median_final_logp_x_given_y", "median_obtuse_fraction", "rank_logp_x",
)  # fmt: skip
CENSUS_HIST_COLUMNS = ("source", "step", "bin_lo", "bin_hi", "count_sg", "count_sg_residual")
CENSUS_DECILE_COLUMNS = (
    "source", "step", "t_decile", "n", "n_excluded", "obtuse_fraction_sg", "obtuse_fraction_sg_residual",
    "mean_norm_cg", "mean_norm_sg", "mean_norm_sg_residual",
)  # fmt: skip
CENSUS_SUMMARY_COLUMNS = (
    "source", "step", "n", "n_excluded", "obtuse_fraction_sg", "obtuse_fraction_sg_residual",
    "cv_norm_sg", "cv_norm_sg_residual",
)  # fmt: skip

N_DECILES = 10
_COL = {name: i for i, name in enumerate(RECORD_FIELDS)}
_EXCLUDE_NORM = 1e-12


class OutputError(RuntimeError):
    """The output directory cannot be created or written."""


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            values = [row[c] for c in columns] if isinstance(row, dict) else row
            w.writerow([_fmt(v) for v in values])


def prepare_output(path: Path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        with tempfile.TemporaryFile(dir=path):
            pass
    except OSError as exc:
        raise OutputError(f"output directory {str(path)!r} is not writable: {exc.strerror}") from None
    return path


def seed_streams(seed: int, n: int = 3) -> list[np.random.SeedSequence]:
    """Children 0..2 drive timesteps, noise and initialization; extra children are for diagnostics."""
    return np.random.SeedSequence(seed).spawn(n)


def trailing_mean(x: np.ndarray, window: int) -> np.ndarray:
    c = np.concatenate(([0.0], np.cumsum(x)))
    idx = np.arange(1, x.size + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


def pareto_gap(norm_cg, norm_sg, dot, lam: float) -> np.ndarray:
    """Norm of the min-norm point of ``{lam*delta_cg, delta_sg}`` from recorded norms and dot products."""
    a = (lam * np.asarray(norm_cg)) ** 2
    b = np.asarray(norm_sg) ** 2
    c = lam * np.asarray(dot)
    denom = a + b - 2.0 * c
    safe = np.where(denom > 1e-24, denom, 1.0)
    alpha = np.where(denom > 1e-24, np.clip((b - c) / safe, 0.0, 1.0), 0.5)
    sq = alpha**2 * a + (1 - alpha) ** 2 * b + 2 * alpha * (1 - alpha) * c
    return np.sqrt(np.maximum(sq, 0.0))


def t_decile(t, T: int):
    return np.minimum(N_DECILES - 1, (np.asarray(t) - 1) * N_DECILES // T)


def progress_decile(i, n: int):
    return np.minimum(N_DECILES - 1, np.asarray(i) * N_DECILES // max(n, 1))


def norm_table(records: np.ndarray, T: int) -> np.ndarray:
    """``(10, 10, 3)`` array of (count, mean norm_sg, mean norm_sg_residual) per (t-decile, progress-decile)."""
    n = records.shape[0]
    out = np.full((N_DECILES, N_DECILES, 3), np.nan)
    out[..., 0] = 0
    if n == 0:
        return out
    td = t_decile(records[:, _COL["t"]].astype(np.int64), T)
    pd = progress_decile(np.arange(n), n)
    for i in range(N_DECILES):
        for j in range(N_DECILES):
            m = (td == i) & (pd == j)
            k = int(m.sum())
            out[i, j, 0] = k
            if k:
                out[i, j, 1] = records[m, _COL["norm_sg"]].mean()
                out[i, j, 2] = records[m, _COL["norm_sg_residual"]].mean()
    return out


@dataclass
class RunMetrics:
    seed: int
    combiner: str
    requested: int
    completed: int
    nominal_step: int
    best_logp_x_given_y: float
    nominal_logp_x_given_y: float
    final_logp_x_given_y: float
    final_logp_x: float
    final_logp_y_given_x: float
    overtrain_stable: bool
    obtuse_fraction: float
    pareto_gap: np.ndarray  # one entry per completed step
    norm_table: np.ndarray
    final_params: np.ndarray
    backend: str

    @property
    def aborted(self) -> bool:
        return self.completed < self.requested

    def summary_row(self) -> dict:
        return {
            "seed": self.seed,
            "combiner": self.combiner,
            "steps": self.requested,
            "completed": self.completed,
            "aborted": self.aborted,
            "nominal_step": self.nominal_step,
            "best_logp_x_given_y": self.best_logp_x_given_y,
            "nominal_logp_x_given_y": self.nominal_logp_x_given_y,
            "final_logp_x_given_y": self.final_logp_x_given_y,
            "final_logp_x": self.final_logp_x,
            "final_logp_y_given_x": self.final_logp_y_given_x,
            "overtrain_stable": self.overtrain_stable,
            "obtuse_fraction": self.obtuse_fraction,
            "final_pareto_gap": float(self.pareto_gap[-1]) if self.pareto_gap.size else math.nan,
            "backend": self.backend,
        }


def _image_shape(gen):
    if getattr(gen, "kind", None) == "splat":
        return (gen.height, gen.width, 3)
    shape = getattr(gen, "image_shape", None)
    return tuple(shape) if shape is not None and len(shape) == 3 and shape[2] == 3 else None


def _write_snapshot(path_stem: Path, gen, theta, step: int, densities) -> None:
    x0 = gen.render(theta)
    shape = _image_shape(gen)
    if shape is not None:
        write_ppm(path_stem.with_suffix(".ppm"), x0, shape)
        return
    cols = ["step"] + [f"x{i}" for i in range(x0.size)] + ["logp_x_given_y", "logp_x", "logp_y_given_x"]
    write_csv(path_stem.with_suffix(".csv"), cols, [[step, *x0.tolist(), *densities]])


def _densities(oracle, schedule, x0, label):
    lxy = float(log_density_t(oracle, schedule, x0, 0, label))
    lx = float(log_density_t(oracle, schedule, x0, 0, NULL))
    return lxy, lx, lxy + float(np.log(oracle.class_prior[label])) - lx


def simulate(cfg: RunConfig, seed: int):
    """Run one seed without writing files. Returns ``(run, generator, oracle, schedule, combiner)``."""
    oracle = cfg.build_oracle()
    schedule = cfg.build_schedule()
    gen = cfg.build_generator(oracle)
    combiner = cfg.build_combiner()
    t_ss, eps_ss, init_ss = seed_streams(seed)
    sampler = TimestepSampler.for_schedule(schedule, t_ss, cfg.t_min, cfg.t_max)
    ts = sampler.draw(cfg.total_steps)
    theta0 = gen.initial(oracle, np.random.default_rng(init_ss))
    run = run_distillation(
        gen, theta0, oracle, schedule, combiner, cfg.label, ts,
        np.random.default_rng(eps_ss), cfg.build_weight(), cfg.build_optimizer(gen),
    )  # fmt: skip
    return run, gen, oracle, schedule, combiner


def run_seed(cfg: RunConfig, seed: int) -> RunMetrics:
    run, gen, oracle, schedule, combiner = simulate(cfg, seed)
    out = Path(cfg.output_dir)
    n = run.completed
    recs = run.records[:n]
    log_prior = float(np.log(oracle.class_prior[cfg.label]))

    final = _densities(oracle, schedule, gen.render(run.final), cfg.label)
    # log p(x|y) after each completed update: record k+1 holds the state produced by update k
    post = np.append(recs[1:, _COL["logp_x_given_y"]], final[0]) if n else np.array([final[0]])
    smooth = trailing_mean(post, cfg.window)
    k = int(np.argmax(smooth))
    nominal_step = k + 1 if n else 0
    nominal_theta = run.trajectory[nominal_step]
    nominal = _densities(oracle, schedule, gen.render(nominal_theta), cfg.label)

    gaps = pareto_gap(recs[:, _COL["norm_cg"]], recs[:, _COL["norm_sg"]], recs[:, _COL["dot_cg_sg"]], combiner.lam)
    rows = []
    for i in range(0, run.records.shape[0], cfg.record_every):
        rec = record_dict(run.records[i], log_prior)
        rec["step"] = i
        rec["alpha_mgda"] = math.nan if rec["alpha_mgda"] is None else rec["alpha_mgda"]
        rec["pareto_gap"] = float(gaps[i]) if i < n else math.nan
        rows.append(rec)
    write_csv(out / f"steps_seed{seed}.csv", STEP_COLUMNS, rows)

    table = norm_table(recs, schedule.T)
    write_csv(
        out / f"norms_seed{seed}.csv",
        NORM_TABLE_COLUMNS,
        [
            {"t_decile": i, "progress_decile": j, "count": int(table[i, j, 0]),
             "mean_norm_sg": table[i, j, 1], "mean_norm_sg_residual": table[i, j, 2]}
            for i in range(N_DECILES) for j in range(N_DECILES)
        ],
    )  # fmt: skip
    _write_snapshot(out / f"snapshot_seed{seed}_nominal", gen, nominal_theta, nominal_step, nominal)
    _write_snapshot(out / f"snapshot_seed{seed}_final", gen, run.final, n, final)

    return RunMetrics(
        seed=seed,
        combiner=combiner.label(),
        requested=run.requested,
        completed=n,
        nominal_step=nominal_step,
        best_logp_x_given_y=float(post.max()),
        nominal_logp_x_given_y=nominal[0],
        final_logp_x_given_y=final[0],
        final_logp_x=final[1],
        final_logp_y_given_x=final[2],
        overtrain_stable=bool(final[0] >= post.max() - cfg.slack),
        obtuse_fraction=float(np.mean(recs[:, _COL["dot_cg_sg"]] < 0)) if n else 0.0,
        pareto_gap=gaps,
        norm_table=table,
        final_params=np.array(run.final),
        backend=run.backend,
    )


def _map_seeds(cfg: RunConfig, fn):
    if cfg.jobs > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.jobs, len(cfg.seeds))) as pool:
            return list(pool.map(fn, [cfg] * len(cfg.seeds), cfg.seeds))
    return [fn(cfg, s) for s in cfg.seeds]


def run_experiment(cfg: RunConfig) -> list[RunMetrics]:
    """Run every seed of ``cfg``, writing per-seed files and ``summary.csv`` into ``cfg.output_dir``."""
    prepare_output(cfg.output_dir)
    metrics = _map_seeds(cfg, run_seed)
    write_csv(Path(cfg.output_dir) / "summary.csv", SUMMARY_COLUMNS, [m.summary_row() for m in metrics])
    return metrics


def _median(metrics, attr):
    return float(np.median([getattr(m, attr) for m in metrics]))


def _bsd_spec(cfg: RunConfig, lam: float) -> dict:
    spec = {"kind": BSD, "lam": float(lam)}
    if cfg.combiner.get("kind") == BSD and "subtract_eps" in cfg.combiner:
        spec["subtract_eps"] = cfg.combiner["subtract_eps"]
    return spec


def sweep_lambda(cfg: RunConfig, lambdas=None) -> list[dict]:
    """One BSD run set per lambda under ``<out>/lambda_<value>``; medians go to ``sweep_lambda.csv``."""
    lambdas = cfg.lambdas if lambdas is None else tuple(lambdas)
    if not lambdas:
        raise ValueError("lambdas must be non-empty")
    out = prepare_output(cfg.output_dir)
    rows = []
    for lam in lambdas:
        sub = cfg.with_overrides(combiner=_bsd_spec(cfg, lam), output_dir=out / f"lambda_{lam:g}")
        ms = run_experiment(sub)
        rows.append({
            "lambda": float(lam),
            "n_seeds": len(ms),
            "n_aborted": sum(m.aborted for m in ms),
            "median_final_logp_y_given_x": _median(ms, "final_logp_y_given_x"),
            "median_final_logp_x": _median(ms, "final_logp_x"),
            "median_final_logp_x_given_y": _median(ms, "final_logp_x_given_y"),
        })  # fmt: skip
    write_csv(out / "sweep_lambda.csv", SWEEP_COLUMNS, rows)
    return rows


def _slug(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9.]+", "_", label).strip("_")


def compare(cfg: RunConfig, combiners: list[Combiner] | None = None) -> list[dict]:
    """Run each combiner on the same seeds; medians and the log p(x) ranking go to ``compare.csv``."""
    combiners = cfg.compare_combiners() if combiners is None else combiners
    out = prepare_output(cfg.output_dir)
    rows = []
    for comb in combiners:
        spec = {"kind": comb.kind, "cfg_scale": comb.cfg_scale, "u": comb.u, "v": comb.v,
                "lam": comb.lam, "subtract_eps": comb.subtract_eps}  # fmt: skip
        ms = run_experiment(cfg.with_overrides(combiner=spec, output_dir=out / _slug(comb.label())))
        rows.append({
            "combiner": comb.label(),
            "n_seeds": len(ms),
            "n_aborted": sum(m.aborted for m in ms),
            "median_final_logp_x": _median(ms, "final_logp_x"),
            "median_final_logp_y_given_x": _median(ms, "final_logp_y_given_x"),
            "median_final_logp_x_given_y": _median(ms, "final_logp_x_given_y"),
            "median_obtuse_fraction": _median(ms, "obtuse_fraction"),
        })  # fmt: skip
    order = sorted(range(len(rows)), key=lambda i: -rows[i]["median_final_logp_x"])
    for rank, i in enumerate(order, 1):
        rows[i]["rank_logp_x"] = rank
    write_csv(out / "compare.csv", COMPARE_COLUMNS, rows)
    return rows


@dataclass
class CensusSource:
    """Matched-draw guidance statistics at one frozen parameter state."""

    name: str
    step: int
    t: np.ndarray
    cos_sg: np.ndarray  # nan where excluded
    cos_sg_residual: np.ndarray
    norm_cg: np.ndarray
    norm_sg: np.ndarray
    norm_sg_residual: np.ndarray

    @property
    def excluded(self) -> np.ndarray:
        return np.isnan(self.cos_sg)

    def decile_stats(self, T: int) -> list[dict]:
        td = t_decile(self.t, T)
        return [self._stats(td == i) | {"t_decile": i} for i in range(N_DECILES)]

    def _stats(self, mask) -> dict:
        keep = mask & ~self.excluded
        n_keep = int(keep.sum())

        def frac(c):
            return float(np.mean(c[keep] < 0)) if n_keep else 0.0

        def mean(a):
            return float(a[mask].mean()) if mask.any() else math.nan

        return {
            "source": self.name,
            "step": self.step,
            "n": int(mask.sum()),
            "n_excluded": int((mask & self.excluded).sum()),
            "obtuse_fraction_sg": frac(self.cos_sg),
            "obtuse_fraction_sg_residual": frac(self.cos_sg_residual),
            "mean_norm_cg": mean(self.norm_cg),
            "mean_norm_sg": mean(self.norm_sg),
            "mean_norm_sg_residual": mean(self.norm_sg_residual),
        }

    def summary(self, T: int) -> dict:
        row = self._stats(np.ones(self.t.size, dtype=bool))
        dec = self.decile_stats(T)
        for key in ("sg", "sg_residual"):
            means = np.array([d[f"mean_norm_{key}"] for d in dec])
            means = means[np.isfinite(means)]
            row[f"cv_norm_{key}"] = float(means.std() / means.mean()) if means.size and means.mean() > 0 else math.nan
        return row


@dataclass
class CensusResult:
    seed: int
    frozen: CensusSource
    trajectory: list[CensusSource]  # one per run-progress decile, in order
    T: int

    @property
    def pooled_trajectory(self) -> CensusSource:
        cat = lambda a: np.concatenate([getattr(s, a) for s in self.trajectory])  # noqa: E731
        return CensusSource("trajectory", -1, cat("t"), cat("cos_sg"), cat("cos_sg_residual"),
                            cat("norm_cg"), cat("norm_sg"), cat("norm_sg_residual"))  # fmt: skip

    @property
    def sources(self) -> list[CensusSource]:
        return [self.frozen, *self.trajectory, self.pooled_trajectory]


def _cos(a, b, na, nb):
    with np.errstate(invalid="ignore", divide="ignore"):
        c = np.clip(np.einsum("nd,nd->n", a, b) / (na * nb), -1.0, 1.0)
    return np.where((na > _EXCLUDE_NORM) & (nb > _EXCLUDE_NORM), c, np.nan)


def census_at(name, step, oracle, schedule, x0, label, ts, eps) -> CensusSource:
    """Decompose guidance for every matched draw ``(ts[i], eps[i])`` at the fixed point ``x0``."""
    ts = np.asarray(ts, dtype=np.int64)
    sigma = schedule.sigma[ts][:, None]
    x_t = schedule.alpha[ts][:, None] * np.asarray(x0)[None, :] + sigma * eps
    eps_y = predict_eps_many(oracle, schedule, x_t, ts, label)
    eps_null = predict_eps_many(oracle, schedule, x_t, ts, NULL)
    cg = (eps_y - eps_null) / sigma
    sg = eps_null / sigma
    res = sg - eps / sigma
    ncg, nsg, nres = (np.linalg.norm(v, axis=1) for v in (cg, sg, res))
    cs = _cos(cg, sg, ncg, nsg)
    cr = _cos(cg, res, ncg, nres)
    bad = np.isnan(cs) | np.isnan(cr)
    cs[bad] = cr[bad] = np.nan
    return CensusSource(name, step, ts, cs, cr, ncg, nsg, nres)


def census_seed(cfg: RunConfig, seed: int) -> CensusResult:
    """Angle and norm statistics on matched (t, eps) draws, at the initial state and along a BSD run.

    The reference trajectory is the ``run`` of BSD (lambda from a BSD combiner
    in ``cfg``, else 25) with the same seed. No parameters are updated by the
    census itself.
    """
    n_draws = int(cfg.census.get("n_draws", 2000))
    if n_draws < 1:
        raise ValueError("census.n_draws must be positive")
    lam = cfg.combiner.get("lam", 25.0) if cfg.combiner.get("kind") == BSD else 25.0
    ref = cfg.with_overrides(combiner=_bsd_spec(cfg, lam))
    run, gen, oracle, schedule, _ = simulate(ref, seed)

    draw_ss = seed_streams(seed, 4)[3]
    t_ss, e_ss = draw_ss.spawn(2)
    ts = TimestepSampler.for_schedule(schedule, t_ss, cfg.t_min, cfg.t_max).draw(n_draws)
    eps = np.random.default_rng(e_ss).standard_normal((n_draws, oracle.dim))

    frozen = census_at("initial", 0, oracle, schedule, gen.render(run.trajectory[0]), cfg.label, ts, eps)
    traj = []
    n = run.completed
    for j in range(N_DECILES):
        step = ((2 * j + 1) * n) // (2 * N_DECILES)
        x0 = gen.render(run.trajectory[step])
        traj.append(census_at(f"progress_{j}", step, oracle, schedule, x0, cfg.label, ts, eps))
    return CensusResult(seed, frozen, traj, schedule.T)


def angle_census(cfg: RunConfig, bins: int = 20) -> list[CensusResult]:
    """Write ``census_seed<S>_{hist,deciles,summary}.csv`` for each seed."""
    out = prepare_output(cfg.output_dir)
    results = _map_seeds(cfg, census_seed)
    edges = np.linspace(-1.0, 1.0, bins + 1)
    for res in results:
        hist, dec, summ = [], [], []
        for src in res.sources:
            keep = ~src.excluded
            cs = np.histogram(src.cos_sg[keep], edges)[0]
            cr = np.histogram(src.cos_sg_residual[keep], edges)[0]
            for b in range(bins):
                hist.append({"source": src.name, "step": src.step, "bin_lo": edges[b], "bin_hi": edges[b + 1],
                             "count_sg": int(cs[b]), "count_sg_residual": int(cr[b])})  # fmt: skip
            dec.extend(src.decile_stats(res.T))
            summ.append(src.summary(res.T))
        write_csv(out / f"census_seed{res.seed}_hist.csv", CENSUS_HIST_COLUMNS, hist)
        write_csv(out / f"census_seed{res.seed}_deciles.csv", CENSUS_DECILE_COLUMNS, dec)
        write_csv(out / f"census_seed{res.seed}_summary.csv", CENSUS_SUMMARY_COLUMNS, summ)
    return results
