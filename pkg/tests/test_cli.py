"""End-to-end CLI behavior: exit codes, artifacts, locking, provenance."""

import json
import shutil
import subprocess
import sys

import pytest

from moedit import cli
from moedit.numerics import NumericalError

MICRO = {
    "seed": 0,
    "eval_points": [1, 3],
    "surrogate": {"width": 16, "layers": 2, "heads": 2, "vocab": 48,
                  "n_visual": 2, "visual_dim": 4, "max_seq": 12,
                  "edit_layer": 1},
    "editor": {"rank": 2, "module_dim": 16, "k": 2},
    "training": {"batch_size": 2, "lr": 1e-3, "max_steps": 2,
                 "checkpoint_every": 2},
    "benchmark": {"concepts": 4, "attributes": 2, "templates": 2,
                  "off_templates": 1, "topics": 2, "answer_pool": 8,
                  "draws_per_template": 1, "n_eval_edits": 3,
                  "n_train_edits": 2, "n_companions": 2},
    "pretrain": {"lr": 3e-3, "batch_size": 16, "max_steps": 4,
                 "target_accuracy": 0.1, "check_every": 2},
    "gradcheck": {"batch_size": 2, "max_coords": 1, "tolerance": 1e-3},
    "ablation": {"seeds": [0]},
    "sweep": {"seeds": [0], "ranks": [2], "module_dims": [16]},
}


@pytest.fixture(scope="module")
def cfg_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "micro.json"
    path.write_text(json.dumps(MICRO))
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory, cfg_path):
    """pretrain -> train-editor -> edit -> eval, all into one out dir."""
    out = tmp_path_factory.mktemp("pipeline")
    for command in ("pretrain", "train-editor", "edit", "eval"):
        rc = cli.main([command, "--config", str(cfg_path), "--out", str(out)])
        assert rc == 0, f"{command} failed"
    return out


def err_json(capsys):
    err = capsys.readouterr().err.strip().splitlines()[-1]
    return json.loads(err)["error"]


def test_pipeline_artifacts(pipeline):
    for sub in ("surrogate", "editor", "repository", "checkpoint"):
        assert (pipeline / sub).is_dir()
    for name in ("pretrain.json", "train.json", "edits.json", "loss.csv",
                 "metrics.json", "trajectory.json", "trajectory.csv"):
        assert (pipeline / name).is_file()
    for command in ("pretrain", "train-editor", "edit", "eval"):
        assert (pipeline / f"resolved-{command}.json").is_file()
    # the lock is released once a command finishes
    assert not (pipeline / cli.LOCK_NAME).exists()


def test_resolved_config_recorded(pipeline):
    resolved = json.loads((pipeline / "resolved-eval.json").read_text())
    assert resolved["command"] == "eval"
    assert resolved["seed"] == 0
    assert resolved["config"]["surrogate"]["width"] == 16


def test_seed_flag_overrides_config(tmp_path, cfg_path):
    rc = cli.main(["pretrain", "--config", str(cfg_path),
                   "--seed", "5", "--out", str(tmp_path)])
    assert rc == 0
    resolved = json.loads((tmp_path / "resolved-pretrain.json").read_text())
    assert resolved["seed"] == 5


def test_provenance_written_before_failure(tmp_path, cfg_path, capsys):
    # no surrogate in this out dir, so the pipeline itself fails ...
    rc = cli.main(["train-editor", "--config", str(cfg_path),
                   "--out", str(tmp_path)])
    assert rc == 2
    # ... but the resolved config is already on disk
    assert (tmp_path / "resolved-train-editor.json").is_file()
    assert "pretrain" in err_json(capsys)["message"]


def test_missing_config_exits_2(tmp_path, capsys):
    rc = cli.main(["pretrain", "--config", str(tmp_path / "nope.json"),
                   "--out", str(tmp_path)])
    assert rc == 2
    err = err_json(capsys)
    assert err["code"] == 2
    assert err["kind"] == "config"


def test_unknown_config_key_exits_2(tmp_path, capsys):
    bad = dict(MICRO, turbo=True)
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(bad))
    rc = cli.main(["pretrain", "--config", str(path), "--out", str(tmp_path)])
    assert rc == 2
    assert "turbo" in err_json(capsys)["message"]


def test_lock_blocks_concurrent_use(tmp_path, cfg_path, capsys):
    tmp_path.joinpath(cli.LOCK_NAME).write_text("123")
    rc = cli.main(["pretrain", "--config", str(cfg_path),
                   "--out", str(tmp_path)])
    assert rc == 2
    assert ".lock" in err_json(capsys)["message"]
    # removing the stale lock unblocks the directory
    tmp_path.joinpath(cli.LOCK_NAME).unlink()
    assert cli.main(["report", "--out", str(tmp_path)]) == 0


def test_eval_assert_fails_on_untrained_editor(pipeline, cfg_path, capsys):
    # two training steps cannot reach the acceptance floors
    rc = cli.main(["eval", "--config", str(cfg_path),
                   "--out", str(pipeline), "--assert"])
    assert rc == 5
    err = err_json(capsys)
    assert err["kind"] == "assertion"
    assert "reliability" in err["message"]


def test_gradcheck_within_loose_tolerance(tmp_path, cfg_path):
    rc = cli.main(["gradcheck", "--config", str(cfg_path),
                   "--out", str(tmp_path), "--assert"])
    assert rc == 0
    report = json.loads((tmp_path / "gradcheck.json").read_text())
    assert report["max_rel_err"] < 1e-3
    assert set(report["terms"]) == {"rel", "gen", "loc", "hr",
                                    "sr1", "sr2", "total"}


def test_checkpoint_shape_mismatch_exits_3(pipeline, tmp_path, capsys):
    out = tmp_path / "resume"
    out.mkdir()
    shutil.copytree(pipeline / "surrogate", out / "surrogate")
    other = dict(MICRO, editor={"rank": 3, "module_dim": 16, "k": 2})
    path = tmp_path / "rank3.json"
    path.write_text(json.dumps(other))
    rc = cli.main(["train-editor", "--config", str(path), "--out", str(out),
                   "--checkpoint", str(pipeline / "checkpoint")])
    assert rc == 3
    assert err_json(capsys)["kind"] == "fingerprint"


def test_numerical_error_exits_4(tmp_path, cfg_path, capsys, monkeypatch):
    def boom(*args, **kwargs):
        raise NumericalError("training diverged at step 1: total=nan")

    monkeypatch.setattr("moedit.cli.run_train_editor", boom)
    rc = cli.main(["train-editor", "--config", str(cfg_path),
                   "--out", str(tmp_path)])
    assert rc == 4
    assert err_json(capsys)["kind"] == "numerical"


def test_edit_limit_and_repo_flag(pipeline, tmp_path, cfg_path):
    out = tmp_path / "replay"
    out.mkdir()
    shutil.copytree(pipeline / "surrogate", out / "surrogate")
    shutil.copytree(pipeline / "editor", out / "editor")
    repo = tmp_path / "repo2"
    rc = cli.main(["edit", "--config", str(cfg_path), "--out", str(out),
                   "--limit", "2", "--repo", str(repo)])
    assert rc == 0
    assert repo.is_dir()
    edits = json.loads((out / "edits.json").read_text())
    assert edits["edits_applied"] == 2
    assert len(edits["entry_digests"]) == 2


def test_eval_scores_existing_repository(pipeline, tmp_path, cfg_path):
    out = tmp_path / "score"
    out.mkdir()
    shutil.copytree(pipeline / "surrogate", out / "surrogate")
    shutil.copytree(pipeline / "editor", out / "editor")
    rc = cli.main(["eval", "--config", str(cfg_path), "--out", str(out),
                   "--repo", str(pipeline / "repository")])
    assert rc == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["n_edits"] == MICRO["benchmark"]["n_eval_edits"]


def test_report_collects_artifacts(pipeline, capsys):
    rc = cli.main(["report", "--out", str(pipeline)])
    assert rc == 0
    text = (pipeline / "report.md").read_text()
    assert "Lifelong metrics" in text
    assert "## Base model" in text
    assert text in capsys.readouterr().out


def test_report_on_empty_dir(tmp_path):
    rc = cli.main(["report", "--out", str(tmp_path)])
    assert rc == 0
    assert "No artifacts found" in (tmp_path / "report.md").read_text()


def test_usage_error_exits_2():
    with pytest.raises(SystemExit) as exc:
        cli.main([])
    assert exc.value.code == 2


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "moedit.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "pretrain" in proc.stdout
