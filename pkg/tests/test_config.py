import pytest

from cdun import config
from cdun.errors import ConfigError


def test_parse_and_build(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# desk run\nsolver.N = 3\nsolver.gamma0=0.2\nsade.m = 4\ntrain.steps=50\ntrain.flip = false\n"
                 "flow.provider = coarse\ntrain.decay_at = 0.5,0.9\n")
    cfg = config.load(p, ["train.steps=60"], stage="cdun")
    assert cfg.stage == "cdun" and cfg.steps == 60 and cfg.flip is False
    assert cfg.solver.N == 3 and cfg.solver.gamma0 == 0.2 and cfg.solver.flow == "coarse" and cfg.flow == "coarse"
    assert cfg.sade.m == 4 and cfg.decay_at == (0.5, 0.9)
    assert cfg.l == 3


@pytest.mark.parametrize("line", ["solver.N", "N=3", "solver.bogus=1", "solver.N=three", "other.x=1", "train.solver=1"])
def test_errors(line):
    with pytest.raises(ConfigError):
        config.build(config.parse_lines([line]))


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        config.load(tmp_path / "nope.cfg")


def test_invalid_values_surface_as_config_errors():
    with pytest.raises(ConfigError):
        config.build({"solver.N": "0"})
