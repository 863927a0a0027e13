import numpy as np
import pytest

from pong.cli import CONFIG_ECHO, main
from pong.dataset import read_dataset
from pong.gradcheck import GradCheckEntry, GradCheckReport
from pong.utils import parse_key_values

SMALL_MODEL = "\n".join(
    [
        "channels=8",
        "position_dim=320",
        "latent_dim=16",
        "group_conv_groups=4",
        "group_pair_groups=4",
        "",
    ]
)


def generate(out, *extra):
    return main(
        [
            "--quiet",
            "generate",
            "--geometry",
            "a2x2",
            "--n-train",
            "4",
            "--n-val",
            "2",
            "--n-test",
            "2",
            "--seed",
            "3",
            "--out",
            str(out),
            *extra,
        ]
    )


def test_params(capsys):
    assert main(["params", "--geometry", "rpm3x3", "--rule-dim", "40"]) == 0
    output = capsys.readouterr().out.strip()
    count = int(output.split()[0])
    assert abs(count - 3.1e6) <= 0.05 * 3.1e6
    assert output.endswith("parameters (≈3.1M)")


def test_params_writes_a_replayable_echo(tmp_path, capsys):
    assert main(["params", "--ablate", "tcn", "--out", str(tmp_path)]) == 0
    first = capsys.readouterr().out
    echo = dict(parse_key_values((tmp_path / CONFIG_ECHO).read_text()))
    assert echo["command"] == "params"
    assert echo["ablate"] == "tcn"
    assert main(["params", "--config", str(tmp_path / CONFIG_ECHO)]) == 0
    assert capsys.readouterr().out == first


@pytest.mark.parametrize(
    "argv",
    [
        ["params", "--ablate", "dropout"],
        ["params", "--rule-dim", "0"],
        ["generate", "--holdout", "spiral:shade", "--out", "{tmp}"],
        [
            "generate",
            "--holdout",
            "constant:type,progression:type,distribute_three:type",
            "--out",
            "{tmp}",
        ],
        ["generate"],
        ["train", "--out", "{tmp}"],
    ],
)
def test_configuration_errors_exit_with_two(tmp_path, capsys, argv):
    argv = [arg.replace("{tmp}", str(tmp_path)) for arg in argv]
    assert main(argv) == 2
    assert capsys.readouterr().err


def test_config_echo_needs_an_output_directory(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert main(["params", "--geometry", "a2x2"]) == 0
    assert capsys.readouterr().out
    assert not any(tmp_path.rglob(CONFIG_ECHO))


def test_unknown_config_key(tmp_path):
    (tmp_path / "bad").write_text("colour=red\n")
    assert main(["params", "--config", str(tmp_path / "bad")]) == 2


@pytest.mark.parametrize(
    "argv",
    [
        ["eval", "--checkpoint", "{tmp}/missing", "--data", "{tmp}"],
        ["preview", "--data", "{tmp}/missing"],
        ["params", "--config", "{tmp}/missing"],
    ],
)
def test_missing_artifacts_exit_with_one(tmp_path, capsys, argv):
    argv = [arg.replace("{tmp}", str(tmp_path)) for arg in argv]
    assert main(argv) == 1
    assert "Missing" in capsys.readouterr().err


def test_generate_is_deterministic(tmp_path):
    assert generate(tmp_path / "a") == 0
    assert generate(tmp_path / "b", "--workers", "2") == 0
    for split in ("train", "val", "test"):
        first = read_dataset(tmp_path / "a" / split)
        second = read_dataset(tmp_path / "b" / split)
        np.testing.assert_array_equal(first.panels, second.panels)
        np.testing.assert_array_equal(first.targets, second.targets)
    assert len(read_dataset(tmp_path / "a" / "train")) == 4


def test_preview(tmp_path, capsys):
    assert generate(tmp_path) == 0
    capsys.readouterr()
    assert main(["preview", "--data", str(tmp_path / "test"), "--index", "1"]) == 0
    output = capsys.readouterr().out
    assert "answers (correct: " in output
    assert main(["preview", "--data", str(tmp_path / "test"), "--index", "2"]) == 2


def test_train_then_evaluate(tmp_path, capsys):
    data, run, scored = tmp_path / "data", tmp_path / "run", tmp_path / "eval"
    (tmp_path / "model.cfg").write_text(SMALL_MODEL)
    assert generate(data) == 0
    argv = ["--quiet", "train", "--data", str(data), "--out", str(run)]
    argv += ["--config", str(tmp_path / "model.cfg"), "--epochs", "1"]
    argv += ["--batch-size", "4"]
    assert main(argv) == 0
    assert "trained 1 epochs" in capsys.readouterr().out
    assert (run / "checkpoint" / "manifest").exists()
    assert (run / "metrics.csv").read_text().count("\n") == 2
    echo = dict(parse_key_values((run / CONFIG_ECHO).read_text()))
    assert echo["channels"] == "8" and echo["epochs"] == "1"
    argv = ["eval", "--checkpoint", str(run / "checkpoint")]
    argv += ["--data", str(data / "test"), "--out", str(scored)]
    assert main(argv) == 0
    assert "accuracy" in capsys.readouterr().out
    predictions = (scored / "predictions.csv").read_text().splitlines()
    assert predictions[0] == "index,target,predicted,p_target,correct"
    assert len(predictions) == 3
    assert main(argv[:-2] + ["--data", str(data / "train")]) == 0


@pytest.mark.parametrize("error, code, verdict", [(1e-9, 0, "PASS"), (0.2, 3, "FAIL")])
def test_gradcheck_verdict(mocker, capsys, error, code, verdict):
    entry = GradCheckEntry("reasoner.project.weight", (0, 0), 1.0, 1.0 + error, error)
    check = mocker.patch(
        "pong.cli.check_model_gradients", return_value=GradCheckReport([entry])
    )
    assert main(["gradcheck", "--geometry", "a2x2", "--samples", "7"]) == code
    assert check.call_args.kwargs["samples"] == 7
    output = capsys.readouterr().out
    assert output.startswith(verdict)
    assert "over 1 coordinates" in output
