import numpy as np
import pytest

from scoredistill.config import ConfigError, load_config, load_preset, parse_config, preset_names


def test_bundled_presets():
    names = preset_names()
    assert {"two-class", "two-moons-gmm", "grid-9", "image-8x8"} <= set(names)
    for name in names:
        cfg = parse_config({"preset": name})
        oracle = cfg.build_oracle()
        assert oracle.n_classes >= 2
        cfg.build_generator(oracle)


def test_two_class_geometry():
    o = parse_config({"preset": "two-class"}).build_oracle()
    np.testing.assert_array_equal(o.means, [[0, 0], [-2.5, 0], [6, 0]])
    np.testing.assert_array_equal(o.scales, 1.0)


def test_image_preset_exposures():
    o = parse_config({"preset": "image-8x8"}).build_oracle()
    assert o.dim == 192
    np.testing.assert_allclose(o.means[1], 0.875 * o.means[0])
    np.testing.assert_allclose(o.means[2], 1.3 * o.means[0])


def test_defaults():
    cfg = parse_config({"preset": "two-class"})
    assert cfg.steps == 2000 and cfg.overtrain_factor == 1.0 and cfg.seeds == (0,)
    assert cfg.combiner == {"kind": "bsd", "lam": 25.0}
    assert cfg.window == 50 and cfg.record_every == 1 and cfg.total_steps == 2000
    assert cfg.build_schedule().T == 1000
    opt = cfg.build_optimizer(cfg.build_generator(cfg.build_oracle()))
    assert (opt.lr, opt.beta1, opt.beta2, opt.eps) == (0.01, 0.9, 0.99, 1e-8)
    img = parse_config({"preset": "image-8x8"})
    assert img.build_optimizer(img.build_generator(img.build_oracle())).lr == 0.005
    assert img.slack == 20.0


def test_file_overrides_preset(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('preset = "two-class"\nsteps = 7\nseeds = [3, 4]\n[oracle]\nclass_prior = [0.25, 0.75]\n[combiner]\nkind = "sds"\ncfg_scale = 7.5\n')
    cfg = load_config(p)
    assert cfg.steps == 7 and cfg.seeds == (3, 4)
    np.testing.assert_allclose(cfg.build_oracle().class_prior, [0.25, 0.75])
    assert cfg.build_oracle().n_components == 3
    assert cfg.build_combiner().label() == "sds(cfg=7.5)"


def test_with_overrides():
    cfg = parse_config({"preset": "two-class", "steps": 10})
    c2 = cfg.with_overrides(seeds=[5], output_dir="x", overtrain_factor=2.5, combiner={"kind": "csd"}, jobs=3)
    assert c2.seeds == (5,) and str(c2.output_dir) == "x" and c2.total_steps == 25 and c2.jobs == 3
    assert c2.combiner == {"kind": "csd"} and cfg.combiner["kind"] == "bsd"


@pytest.mark.parametrize(
    "tree",
    [
        {},
        {"preset": "nope"},
        {"preset": "two-class", "steps": 0},
        {"preset": "two-class", "steps": 1.5},
        {"preset": "two-class", "seeds": []},
        {"preset": "two-class", "seeds": [-1]},
        {"preset": "two-class", "seeds": [2**64]},
        {"preset": "two-class", "seeds": [1, 1]},
        {"preset": "two-class", "overtrain_factor": 0.5},
        {"preset": "two-class", "record_every": 0},
        {"preset": "two-class", "label": 2},
        {"preset": "two-class", "combiner": {"kind": "bsd", "lam": 0}},
        {"preset": "two-class", "combiner": {"kind": "bsd", "lamda": 3}},
        {"preset": "two-class", "combiner": {"lam": 3}},
        {"preset": "two-class", "schedule": {"kind": "cosine", "beta_end": 0.1}},
        {"preset": "two-class", "schedule": {"T": 10}},
        {"preset": "two-class", "timesteps": {"t_min": 0}},
        {"preset": "two-class", "timesteps": {"t_min": 500, "t_max": 100}},
        {"preset": "two-class", "timesteps": {"t_max": 1001}},
        {"preset": "two-class", "optimizer": {"kind": "rmsprop"}},
        {"preset": "two-class", "optimizer": {"momentum": 0.9}},
        {"preset": "two-class", "weight": "snr"},
        {"preset": "two-class", "generator": {"kind": "nerf"}},
        {"preset": "two-class", "generator": {"kind": "splat", "width": 4, "height": 4}},
        {"preset": "two-class", "slack": -1},
        {"preset": "two-class", "sweep": {"lambdas": []}},
        {"oracle": {"classes": [{"components": [{"weight": 0.5, "mean": [0.0], "scale": 1.0}]}]}},
        {"oracle": {"classes": [{"components": [{"weight": 1.0, "scale": 1.0}]}]}},
        {"oracle": {"classes": [{"components": [{"weight": 1.0, "scale": 1.0, "image": {}}]}]}},
    ],
)
def test_invalid_configs(tree):
    with pytest.raises(ConfigError):
        parse_config(tree)


def test_unreadable_and_malformed(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("steps = = 3")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_preset_fragments_parse_standalone():
    for name in preset_names():
        assert "oracle" in load_preset(name)
