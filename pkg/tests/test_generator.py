import numpy as np
import pytest

from scoredistill import _backend, _reference
from scoredistill.generator import (
    RECORD_FIELDS,
    Adam,
    DirectGenerator,
    DirectParams,
    NonFiniteGradient,
    SplatGenerator,
    SplatParams,
    distill_step,
    read_ppm,
    render,
    run_distillation,
    vjp,
    write_ppm,
)
from scoredistill.guidance import Combiner
from scoredistill.oracle import log_density_t
from scoredistill.schedule import TimestepSampler, WeightRule

COL = {n: i for i, n in enumerate(RECORD_FIELDS)}


def random_splats(rng, K=None, W=None, H=None):
    K = K or int(rng.integers(1, 6))
    W = W or int(rng.integers(2, 9))
    H = H or int(rng.integers(2, 9))
    p = SplatParams(
        centers=rng.uniform(-0.1, 1.1, (K, 2)),
        log_scales=rng.uniform(np.log(0.08), np.log(0.5), K),
        colors=rng.normal(0.5, 0.3, (K, 3)),
        opacity_logits=rng.normal(0, 1.5, K),
        canvas=(W, H),
    )
    return p, SplatGenerator(K, W, H)


def fd_vjp(gen, theta, cot, h=1e-6):
    out = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        out[i] = (gen.render(theta + e) @ cot - gen.render(theta - e) @ cot) / (2 * h)
    return out


def test_splat_vjp_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(30):
        p, gen = random_splats(rng)
        theta = p.to_array().ravel()
        cot = rng.normal(size=gen.dim)
        g = gen.vjp(theta, cot)
        assert np.linalg.norm(fd_vjp(gen, theta, cot) - g) <= 1e-6 * np.linalg.norm(g)


def test_compiled_matches_reference():
    if not _backend.HAVE_EXT:
        pytest.skip("extension not built")
    rng = np.random.default_rng(1)
    for _ in range(20):
        p, gen = random_splats(rng)
        arr = p.to_array()
        W, H = p.canvas
        a, b = np.empty(gen.dim), np.empty(gen.dim)
        _backend.splat_render(arr, W, H, a)
        _reference.splat_render(arr, W, H, b)
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)
        cot = rng.normal(size=gen.dim)
        ga, gb = np.empty((arr.shape[0], 7)), np.empty((arr.shape[0], 7))
        _backend.splat_vjp(arr, W, H, cot, ga)
        _reference.splat_vjp(arr, W, H, cot, gb)
        np.testing.assert_allclose(ga, gb, rtol=1e-11, atol=1e-13)


def test_single_splat_render_closed_form():
    p = SplatParams([[0.5, 0.5]], [np.log(0.2)], [[1.0, 0.5, 0.0]], [0.0], (4, 4))
    img = render(p).image.reshape(4, 4, 3)
    # pixel (row 1, col 2) center is (0.625, 0.375)
    r2 = 0.125**2 + 0.125**2
    assert img[1, 2, 0] == pytest.approx(0.5 * np.exp(-r2 / (2 * 0.04)))
    assert img[1, 2, 2] == 0.0


def test_aspect_ratio_keeps_splats_round():
    # on a 8x4 canvas a splat's falloff over one pixel step is the same along both axes
    p = SplatParams([[0.5, 0.5]], [np.log(0.3)], [[1.0, 1.0, 1.0]], [5.0], (8, 4))
    img = render(p).image.reshape(4, 8, 3)[..., 0]
    assert img[1, 4] / img[1, 3] == pytest.approx(img[1, 3] / img[1, 2], rel=0.5)
    assert img.shape == (4, 8)


def test_structured_vjp_and_roundtrip(rng):
    p, gen = random_splats(rng, K=3, W=5, H=4)
    q = SplatParams.from_array(p.to_array(), p.canvas)
    np.testing.assert_array_equal(q.to_array(), p.to_array())
    cot = rng.normal(size=gen.dim)
    g = vjp(p, cot)
    assert isinstance(g, SplatParams)
    np.testing.assert_allclose(g.to_array().ravel(), gen.vjp(p.to_array().ravel(), cot))
    d = DirectParams([1.0, 2.0])
    np.testing.assert_array_equal(vjp(d, [3.0, 4.0]).x, [3.0, 4.0])
    with pytest.raises(ValueError):
        vjp(p, np.zeros(gen.dim + 1))
    with pytest.raises(ValueError):
        DirectParams([np.inf])
    with pytest.raises(TypeError):
        render(np.zeros(2))


def test_splat_initialization(two_class):
    gen = SplatGenerator(5, 6, 6)
    theta = gen.initial(two_class, np.random.default_rng(0)).reshape(5, 7)
    assert np.all((theta[:, :2] >= 0) & (theta[:, :2] <= 1))
    np.testing.assert_allclose(theta[:, 2], np.log(0.05))
    np.testing.assert_allclose(theta[:, 3:6], 0.5)
    np.testing.assert_allclose(theta[:, 6], 0.0)


def test_adam_matches_manual():
    opt = Adam(lr=0.1, beta1=0.9, beta2=0.99, eps=1e-8)
    theta = np.array([1.0, -2.0])
    m = v = np.zeros(2)
    x = theta.copy()
    for k in range(1, 6):
        g = np.array([0.3, -1.0]) * k
        m = 0.9 * m + 0.1 * g
        v = 0.99 * v + 0.01 * g * g
        x = x - 0.1 * (m / (1 - 0.9**k)) / (np.sqrt(v / (1 - 0.99**k)) + 1e-8)
        theta = opt.step(theta, g)
    np.testing.assert_allclose(theta, x, rtol=1e-14)
    sgd = Adam(lr=0.5, kind="sgd")
    np.testing.assert_allclose(sgd.step(np.ones(2), np.array([1.0, 2.0])), [0.5, 0.0])
    with pytest.raises(ValueError):
        Adam(kind="rmsprop")
    with pytest.raises(ValueError):
        Adam(lr=0)


def _direct_run(oracle, schedule, combiner, n, use_kernel, optimizer=None, seed=0):
    gen = DirectGenerator(oracle.dim)
    ts = TimestepSampler.for_schedule(schedule, seed).draw(n)
    return run_distillation(
        gen, gen.initial(oracle, None), oracle, schedule, combiner, 0, ts,
        np.random.default_rng(seed + 100), WeightRule(), optimizer or Adam(0.01), use_kernel=use_kernel,
    )  # fmt: skip


@pytest.mark.parametrize("combiner", [Combiner.bsd(25), Combiner.sds(100), Combiner.csd(), Combiner.fixed_ratio(3, 1), Combiner.bsd(5, subtract_eps=True)])
@pytest.mark.parametrize("opt", ["adam", "sgd"])
def test_fused_loop_matches_stepwise(two_class, schedule, combiner, opt):
    if not _backend.HAVE_EXT:
        pytest.skip("extension not built")
    a = _direct_run(two_class, schedule, combiner, 300, True, Adam(0.01, kind=opt))
    b = _direct_run(two_class, schedule, combiner, 300, False, Adam(0.01, kind=opt))
    assert a.backend == "fused" and b.backend.startswith("stepwise")
    np.testing.assert_allclose(a.trajectory, b.trajectory, rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(a.records, b.records, rtol=1e-8, atol=1e-9, equal_nan=True)
    np.testing.assert_allclose(a.tail_direction_mean, b.tail_direction_mean, rtol=1e-7, atol=1e-9)


def test_records_describe_pre_update_state(two_class, schedule):
    run = _direct_run(two_class, schedule, Combiner.bsd(), 50, True)
    for i in (0, 17, 49):
        x = run.trajectory[i]
        assert run.records[i, COL["logp_x_given_y"]] == pytest.approx(log_density_t(two_class, schedule, x, 0, 0), abs=1e-12)
        assert run.records[i, COL["logp_x"]] == pytest.approx(log_density_t(two_class, schedule, x, 0), abs=1e-12)
    assert run.completed == 50 and not run.aborted
    np.testing.assert_array_equal(run.final, run.trajectory[50])


def test_chunked_noise_stream_is_unchanged(two_class, schedule):
    # longer than one noise chunk: a fresh run over the first n steps must agree
    long = _direct_run(two_class, schedule, Combiner.csd(), 5000, True)
    short = _direct_run(two_class, schedule, Combiner.csd(), 4200, True)
    np.testing.assert_array_equal(long.trajectory[:4201], short.trajectory)


def test_nonfinite_abort(two_class, schedule):
    done = []
    for use_kernel in (True, False):
        run = _direct_run(two_class, schedule, Combiner.csd(), 20, use_kernel, Adam(1e300, kind="sgd"))
        assert run.aborted and run.completed < 20
        assert np.all(np.isfinite(run.trajectory))
        done.append(run.completed)
    assert done[0] == done[1]


def test_distill_step_api(two_class, schedule):
    sampler = TimestepSampler.for_schedule(schedule, 0)
    rng = np.random.default_rng(0)
    opt = Adam(0.01)
    params = DirectParams(two_class.global_mean())
    for _ in range(3):
        params, rec = distill_step(params, two_class, schedule, Combiner.bsd(), sampler, rng, optimizer=opt)
    assert opt.steps == 3
    assert set(RECORD_FIELDS) <= set(rec) and "logp_y_given_x" in rec
    assert rec["logp_y_given_x"] == pytest.approx(rec["logp_x_given_y"] + np.log(0.5) - rec["logp_x"], abs=1e-12)
    assert rec["proj_sg"] >= rec["dir_norm_sq"] - 1e-9
    sp, gen = random_splats(np.random.default_rng(2), K=2, W=2, H=2)
    from scoredistill.oracle import GmmOracle

    img_oracle = GmmOracle([[(1.0, np.full(12, 0.5), 0.3)], [(1.0, np.zeros(12), 0.3)]])
    new, rec = distill_step(sp, img_oracle, schedule, Combiner.sds(), sampler, rng)
    assert isinstance(new, SplatParams) and rec["alpha_mgda"] is None
    with pytest.raises(NonFiniteGradient):
        distill_step(DirectParams([1e300, 0.0]), two_class, schedule, Combiner.csd(), sampler, rng)


def test_dimension_mismatch(two_class, schedule):
    gen = DirectGenerator(3)
    with pytest.raises(ValueError):
        run_distillation(gen, np.zeros(3), two_class, schedule, Combiner.csd(), 0, np.array([5]),
                         np.random.default_rng(0), WeightRule(), Adam())  # fmt: skip


def test_ppm_roundtrip(tmp_path, rng):
    img = rng.uniform(-0.2, 1.2, (3, 5, 3))
    path = tmp_path / "a.ppm"
    write_ppm(path, img, (3, 5, 3))
    raw = path.read_bytes()
    assert raw.startswith(b"P6\n5 3\n255\n") and len(raw) == len(b"P6\n5 3\n255\n") + 45
    back = read_ppm(path)
    np.testing.assert_array_equal(back, np.clip(np.rint(img * 255), 0, 255).astype(np.uint8))
    with pytest.raises(ValueError):
        write_ppm(path, np.zeros(8), (2, 2, 2))
