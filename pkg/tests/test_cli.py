import json
import os

import pytest

from senseplan.cli import main


def test_eval_without_student_names_distill(tmp_path, capsys):
    code = main(["eval", "--out", str(tmp_path / "run")])
    assert code == 3
    err = capsys.readouterr().err
    assert "distill" in err


def test_gen_data_without_worlds_names_gen_worlds(tmp_path, capsys):
    code = main(["gen-data", "--out", str(tmp_path / "run")])
    assert code == 3
    assert "gen-worlds" in capsys.readouterr().err


def test_bad_override_is_config_error(tmp_path, capsys):
    assert main(["gen-worlds", "--out", str(tmp_path / "run"),
                 "--set", "wobble=1"]) == 2
    assert main(["gen-worlds", "--out", str(tmp_path / "run"),
                 "--set", "seed"]) == 2
    assert main(["gen-worlds", "--out", str(tmp_path / "run"),
                 "--set", "horizon=7"]) == 2


def test_missing_config_file_is_config_error(tmp_path):
    assert main(["gen-worlds", "--config", str(tmp_path / "nope.cfg"),
                 "--out", str(tmp_path / "run")]) == 2


def test_gen_worlds_writes_artifacts_and_manifest(tmp_path):
    run = str(tmp_path / "run")
    code = main(["gen-worlds", "--out", run, "--set", "world.count=1",
                 "--set", "world.radius_m=25"])
    assert code == 0
    assert os.path.exists(os.path.join(run, "worlds", "world_000.jwld"))
    man = json.load(open(os.path.join(run, "gen-worlds.manifest.json")))
    assert man["stage"] == "gen-worlds"
    assert man["seed"] == 0
    assert "config_hash" in man


def test_identical_seed_identical_manifest(tmp_path):
    args = ["--set", "world.count=1", "--set", "world.radius_m=25"]
    outs = []
    for name in ("a", "b"):
        run = str(tmp_path / name)
        assert main(["gen-worlds", "--out", run] + args) == 0
        outs.append(open(os.path.join(run, "gen-worlds.manifest.json")).read())
        world = os.path.join(run, "worlds", "world_000.jwld")
        outs.append(open(world, "rb").read())
    assert outs[0] == outs[2]       # manifests hash-equal
    assert outs[1] == outs[3]       # world bytes identical


def test_run_dir_layout(tmp_path):
    run = str(tmp_path / "run")
    main(["gen-worlds", "--out", run, "--set", "world.count=1",
          "--set", "world.radius_m=25"])
    for sub in ("worlds", "corpus", "checkpoints", "logs", "reports"):
        assert os.path.isdir(os.path.join(run, sub))
