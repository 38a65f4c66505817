import pytest

from metaseg.config import RunConfig, apply_overrides, dump_config, load_config, parse_config, write_config
from metaseg.errors import ConfigError
from metaseg.inference import InferenceConfig, JitterSpec
from metaseg.metaopt import TrainerConfig
from metaseg.taskset import AugConfig, SynthConfig


def test_published_hyperparameter_defaults():
    t, i = TrainerConfig(), InferenceConfig()
    assert (t.T, t.b) == (5, 4)
    assert (i.ona_interval, i.ona_iters) == (5, 10)


def test_chosen_defaults():
    t, i, j, a, s = TrainerConfig(), InferenceConfig(), JitterSpec(), AugConfig(), SynthConfig()
    assert (t.beta, t.lambda_init, t.k_test, t.reduce) == (1e-4, 1e-3, 3, "sum")
    assert (j.n_priors, j.shift, j.scale, i.merge_threshold) == (8, 0.05, 0.05, 0.5)
    assert (a.flip_p, a.scale, a.rotation, a.translation, a.brightness, a.saturation) == \
        (0.5, (0.8, 1.2), 15.0, 0.1, 0.2, 0.2)
    assert (s.height, s.width, s.n_frames, s.min_objects, s.max_objects) == (96, 96, 12, 1, 3)


def test_empty_config_is_defaults():
    assert parse_config("") == RunConfig().resolved()


def test_dump_parse_round_trip(tmp_path):
    cfg = parse_config("[run]\nseed = 7\n[trainer]\nsteps = 3\nbeta_lambda = 0.01\n"
                       "[arch]\nbackbone = 8, 8\ngroups = 4\nbox_levels = 1\nmask_levels = 0\n"
                       "mask_channels = 8\n[ablate]\nrows = lovasz, iters_10\n")
    assert parse_config(dump_config(cfg)) == cfg
    path = tmp_path / "c.ini"
    write_config(cfg, str(path))
    assert load_config(str(path)) == cfg


def test_shared_sections_propagate():
    cfg = parse_config("[run]\nseed = 3\nworkers = 2\n[arch]\ngroups = 4\n[jitter]\nn_priors = 2\n")
    assert cfg.trainer.seed == 3 and cfg.trainer.workers == 2 and cfg.inference.workers == 2
    assert cfg.trainer.arch.groups == 4 and cfg.inference.arch.groups == 4
    assert cfg.inference.jitter.n_priors == 2


def test_optional_and_bool_values():
    cfg = parse_config("[trainer]\nbeta_lambda = none\nfreeze_lambda = yes\n[inference]\nuse_ona = on\n")
    assert cfg.trainer.beta_lambda is None and cfg.trainer.freeze_lambda and cfg.inference.use_ona


@pytest.mark.parametrize("text,needle", [
    ("[run]\nseed = 1\n[bogus]\nx = 1\n", ":3: unknown section [bogus]"),
    ("[trainer]\nT = 5\nwat = 2\n", ":3: [trainer] wat: unknown key"),
    ("[trainer]\nT = five\n", ":2: [trainer] T: expected an integer"),
    ("[trainer]\nseed = 4\n", "[trainer] seed: unknown key"),
    ("[inference]\nuse_ona = maybe\n", "expected a boolean"),
    ("[trainer]\nT = 5\nT = 6\n", "<config>"),
])
def test_errors_carry_line_and_field(text, needle):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert needle in str(info.value)


@pytest.mark.parametrize("text", [
    "[trainer]\nb = 0\n",
    "[trainer]\nlr_mode = layer\n",
    "[inference]\nona_interval = 0\n",
    "[run]\nworkers = 0\n",
    "[arch]\ngroups = 5\n",
    "[synth]\nmin_objects = 4\n",
])
def test_invalid_values_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_missing_file():
    with pytest.raises(ConfigError, match="cannot read"):
        load_config("/nonexistent/config.ini")


def test_overrides():
    cfg = apply_overrides(RunConfig().resolved(), ["trainer.steps=2", "run.seed=9", "arch.groups=4",
                                                   "arch.backbone=8,8", "arch.box_levels=1",
                                                   "arch.mask_levels=0"])
    assert cfg.trainer.steps == 2 and cfg.trainer.seed == 9 and cfg.trainer.arch.backbone == (8, 8)
    for bad in ("trainer.steps", "steps=2", "nope.x=1", "trainer.nope=1", "trainer.b=0"):
        with pytest.raises(ConfigError):
            apply_overrides(RunConfig().resolved(), [bad])
