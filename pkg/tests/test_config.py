import pytest
import yaml

from g2ra.config import ConfigError, RunConfig, dump_config, load_config
from g2ra.fusion import G2raConfig


def write(tmp_path, text):
    p = tmp_path / "c.yaml"
    p.write_text(text)
    return p


def test_defaults():
    cfg = load_config()
    assert cfg.fusion == G2raConfig(96, 128, 64, 4)
    assert cfg.eval.episodes_per_split == 200 and cfg.eval.max_steps == 60
    assert cfg.ablate.seeds == [0, 1, 2] and len(cfg.ablate.variants) == 6
    assert cfg.sweep.eta == [0.0, 0.5, 1.0] and cfg.sweep.alpha == [0.2, 0.5, 0.8]


def test_nested_yaml_and_overrides(tmp_path):
    p = write(tmp_path, "variant: concat\nfusion: {d: 32, heads: 2}\ntrain: {epochs: 7, lr: 0.003}\n")
    cfg = load_config(p, seed=5, out="x", eta=0.25)
    assert cfg.variant == "concat" and cfg.seed == 5 and cfg.out == "x"
    assert cfg.fusion.d == 32 and cfg.fusion.d_clip == 96
    assert cfg.train.epochs == 7 and cfg.train.eta == 0.25
    job = cfg.train_config(seed=2)
    assert job.fusion == cfg.fusion and job.seed == 2 and job.variant == "concat"


@pytest.mark.parametrize("text,match", [
    ("colour: red\n", "unknown key"),
    ("train: {epoch: 3}\n", "train.: unknown key"),
    ("fusion: {d: 30, heads: 4}\n", "not divisible"),
    ("variant: late\n", "unknown variant"),
    ("sweep: {alpha: [0.0, 0.5]}\n", "outside"),
    ("sweep: {eta: []}\n", "nonempty"),
    ("train: {alpha: 1.0}\n", "alpha"),
    ("ablate: {variants: [full, nope]}\n", "nope"),
    ("eval: 3\n", "expected a mapping"),
    ("train: {fusion: {d: 8}}\n", "top-level"),
    ("dump: {difficulty: medium}\n", "difficulty"),
    ("a: [unclosed\n", "cannot parse"),
])
def test_invalid_configs_rejected(tmp_path, text, match):
    with pytest.raises(ConfigError, match=match):
        load_config(write(tmp_path, text))


def test_dump_round_trip(tmp_path):
    cfg = load_config(write(tmp_path, "seed: 3\ntrain: {eta: 0.5}\n"))
    text = dump_config(cfg)
    again = load_config(write(tmp_path, text))
    assert again == cfg
    assert dump_config(again) == text
    assert set(yaml.safe_load(text)) == set(RunConfig.__dataclass_fields__)


def test_empty_file_means_defaults(tmp_path):
    assert load_config(write(tmp_path, "")) == load_config()
