import pytest

from splatgen import config as run_config
from splatgen.errors import ConfigError


def test_defaults_roundtrip():
    cfg = run_config.RunConfig()
    assert cfg.validate() == []
    back = run_config.loads(cfg.dumps())
    assert back == cfg
    assert back.train.resolution == 256 and back.train.batch == 2
    assert back.train.num_gaussians == 10_000


def test_full_profile_defaults():
    cfg = run_config.loads('profile = "full"\n')
    assert (cfg.train.resolution, cfg.train.batch, cfg.train.num_gaussians) == (1024, 8, 100_000)
    assert cfg.train.iterations == 3600


def test_sections_override():
    cfg = run_config.loads("""
[train]
iterations = 50
lr_means = 1e-4
distance_range = [1, 3]
[guidance]
mode = "vanilla"
lambda_depth = 0
[densify]
enabled = false
[provider]
kind = "remote"
endpoint = "http://localhost:9000"
""")
    assert cfg.train.iterations == 50 and cfg.train.distance_range == (1.0, 3.0)
    assert cfg.train.guidance.mode == "vanilla" and cfg.train.guidance.lambda_depth == 0.0
    assert cfg.train.densify.enabled is False
    assert cfg.provider.endpoint == "http://localhost:9000"


def test_every_problem_is_reported():
    with pytest.raises(ConfigError) as info:
        run_config.loads("""
[train]
iterations = "many"
batch = 2.5
bogus = 1
distance_range = [1]
[densify]
enabled = 1
[extras]
x = 1
""")
    text = "\n".join(info.value.problems)
    for key in ("train.iterations", "train.batch", "train.bogus", "train.distance_range",
                "densify.enabled", "extras"):
        assert key in text
    assert len(info.value.problems) == 6


def test_semantic_validation():
    with pytest.raises(ConfigError) as info:
        run_config.loads("[train]\nfovy_range = [70, 40]\n[provider]\nkind = \"grpc\"\n")
    text = "\n".join(info.value.problems)
    assert "fovy_range" in text and "provider" in text


def test_syntax_error():
    with pytest.raises(ConfigError, match="syntax"):
        run_config.loads("[train\n")


def test_unknown_profile():
    with pytest.raises(ConfigError, match="profile"):
        run_config.loads('profile = "huge"\n')
