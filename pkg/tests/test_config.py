import json
from pathlib import Path

import pytest

from rainreview.config import OUT_ENV, desk_task_specs, load_config, parse_config
from rainreview.validation import ValidationError

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.yaml"


def minimal(**kw):
    raw = {"tasks": [{"task_id": "A", "angle_deg_range": [-5, 5]}]}
    raw.update(kw)
    return raw


def test_desk_config_loads_and_matches_builtin_specs():
    cfg = load_config(DESK)
    assert [t.spec for t in cfg.tasks] == desk_task_specs()
    stages = cfg.stage_configs()
    assert [s.stage_index for s in stages] == [1, 2] and [s.task_id for s in stages] == ["A", "B"]
    assert stages[0].epochs == 20 and stages[0].crop_size == 32


def test_presets_fill_training_defaults():
    assert parse_config(minimal(preset="paper")).stage_template().crop_size == 240
    assert parse_config(minimal(preset="paper")).stage_template().epochs == 160
    assert parse_config(minimal(train={"epochs": 3})).stage_template().epochs == 3


@pytest.mark.parametrize("raw", [
    {"tasks": []},
    minimal(colour=1),
    minimal(train={"epochz": 1}),
    minimal(data={"frames": 3}),
    minimal(preset="giant"),
    minimal(ablation="most"),
    {"tasks": [{"task_id": "A"}, {"task_id": "A"}]},
    {"tasks": [{"task_id": "A", "manifest": "x.json", "density": 3}]},
    minimal(train={"epochs": 0}),
])
def test_invalid_configs(raw):
    with pytest.raises(ValidationError):
        parse_config(raw)


def test_out_dir_env_default(monkeypatch, tmp_path):
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "env"))
    assert parse_config(minimal()).out_dir == str(tmp_path / "env")
    assert parse_config(minimal(out_dir="explicit")).out_dir == "explicit"


def test_overrides_and_fingerprint():
    cfg = parse_config(minimal())
    other = cfg.with_overrides(seed=4, ablation="base")
    assert other.seed == 4 and other.ablation == "base" and cfg.seed == 0
    assert other.fingerprint() != cfg.fingerprint()
    assert cfg.fingerprint() == parse_config(minimal()).fingerprint()


def test_manifest_paths_relative_to_config(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"tasks": [{"task_id": "X", "manifest": "d/manifest.json"}]}))
    cfg = load_config(p)
    assert cfg.manifest_path(cfg.tasks[0]) == tmp_path / "d" / "manifest.json"


def test_bad_files(tmp_path):
    with pytest.raises(ValidationError):
        load_config(tmp_path / "missing.yaml")
    (tmp_path / "bad.yaml").write_text("tasks: [\n")
    with pytest.raises(ValidationError):
        load_config(tmp_path / "bad.yaml")
