import pytest

import main
from conftest import TINY_OVERRIDES


def cli_overrides(*extra):
    args = []
    for pair in [*TINY_OVERRIDES, *extra]:
        args += ["--override", pair]
    return args


@pytest.fixture
def run_root(tmp_path, monkeypatch):
    monkeypatch.setenv("DESKWORLD_RUN_ROOT", str(tmp_path / "runs"))
    return tmp_path / "runs"


def test_unknown_flag_is_a_usage_error(capsys):
    assert main.main(["train", "--no-such-flag"]) == 2
    assert "usage" in capsys.readouterr().err


def test_missing_subcommand_is_a_usage_error():
    assert main.main([]) == 2


def test_config_error_exits_with_two(run_root):
    assert main.main(["train", "--override", "horizn=3"]) == 2
    assert main.main(["train", "--config", "no_such_preset"]) == 2


def test_eval_without_any_run_fails(run_root):
    assert main.main(["eval"]) == 1


def test_train_then_inspect_from_the_command_line(run_root, capsys):
    run_dir = run_root / "cli"
    assert main.main(["train", "--run-dir", str(run_dir), "--seed", "3", *cli_overrides("steps=30")]) == 0
    assert (run_dir / "checkpoints" / "latest.pt").exists()
    assert "seed = 3" in (run_dir / "config.cfg").read_text()

    assert main.main(["eval", "--episodes", "1"]) == 0
    assert "median" in capsys.readouterr().out

    assert main.main(["dream", "--run-dir", str(run_dir), "--context", "2", "--horizon", "3"]) == 0
    assert list((run_dir / "media").glob("dream_*.png"))

    assert main.main(["diagnose", "--checkpoint", str(run_dir / "checkpoints" / "latest.pt"), "--observations", "64"]) == 0
    assert "x_t channel std" in capsys.readouterr().out

    assert main.main(["plot", str(run_dir)]) == 0
    assert (run_dir / "media" / "curves.png").exists()


def test_plot_needs_sources(run_root):
    assert main.main(["plot"]) == 2
