"""
Command-line entry point.

Every command resolves its options from built-in defaults, an optional ``--config`` file
of key=value lines and explicit flags (flags win), and echoes the result into
``<out>/config-echo`` so that ``pong <command> --config <out>/config-echo`` replays it.
"""

import argparse
import dataclasses
import logging
import pathlib
import sys
from typing import Dict, List, Optional, Sequence

from prompt_toolkit import print_formatted_text
from prompt_toolkit.formatted_text import HTML

from . import __version__
from .checkpoint import load_checkpoint
from .config import Ablation, Geometry, ModelConfig
from .dataset import generate_splits, read_dataset
from .exceptions import ArtifactError, ConfigurationError
from .generator import RegimeSpec, Split, parse_pairs, sample_matrix
from .gradcheck import WIDE_TOLERANCE, check_model_gradients
from .metrics import format_table
from .model import PoNG, param_count
from .renderer import render_strip
from .training import evaluate, predictions_csv, score, train
from .utils import format_key_values, parse_key_values

logger = logging.getLogger(__name__)

CONFIG_ECHO = "config-echo"

EXIT_OK = 0
EXIT_ARTIFACT = 1
EXIT_CONFIGURATION = 2
EXIT_CHECK_FAILED = 3

DEFAULTS: Dict[str, Dict[str, object]] = {
    "generate": {
        "geometry": "rpm3x3",
        "regime": "iid",
        "holdout": "",
        "rules": "constant,progression,distribute_three,arithmetic",
        "n_train": 10000,
        "n_val": 2000,
        "n_test": 2000,
        "seed": 0,
        "workers": 1,
        "out": "",
    },
    "train": {
        "data": "",
        "seed": 0,
        "batch_size": 128,
        "beta": 25.0,
        "gamma": 5.0,
        "ablate": "",
        "epochs": 100,
        "lr": 0.001,
        "workers": 1,
        "out": "",
    },
    "eval": {
        "checkpoint": "",
        "data": "",
        "batch_size": 128,
        "workers": 1,
        "out": "",
    },
    "gradcheck": {
        "geometry": "rpm3x3",
        "rule_dim": 16,
        "samples": 50,
        "batch": 2,
        "seed": 0,
        "out": "",
    },
    "params": {
        "geometry": "rpm3x3",
        "rule_dim": 40,
        "ablate": "",
        "out": "",
    },
    "preview": {
        "data": "",
        "index": 0,
        "geometry": "rpm3x3",
        "regime": "iid",
        "holdout": "",
        "split": "train",
        "seed": 0,
        "out": "",
    },
}

#: commands whose config files may also set model hyperparameters
MODEL_COMMANDS = ("train", "gradcheck", "params")

MODEL_FIELDS = frozenset(field.name for field in dataclasses.fields(ModelConfig))


@dataclasses.dataclass
class RunConfig:
    command: str
    values: Dict[str, object]

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def out(self) -> Optional[pathlib.Path]:
        return pathlib.Path(self.values["out"]) if self.values.get("out") else None

    @property
    def model_values(self) -> Dict[str, object]:
        return {
            key: value
            for key, value in self.values.items()
            if key in MODEL_FIELDS
        }

    def echo(self) -> str:
        pairs = [("command", self.command)] + list(self.values.items())
        return format_key_values(pairs)

    def write_echo(self):
        if self.out is None:
            return
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / CONFIG_ECHO).write_text(self.echo())

    @classmethod
    def resolve(cls, command: str, arguments: argparse.Namespace) -> "RunConfig":
        defaults = DEFAULTS[command]
        values: Dict[str, object] = dict(defaults)
        if getattr(arguments, "config", None):
            path = pathlib.Path(arguments.config)
            if not path.exists():
                raise ArtifactError(f"Missing config file {path}")
            try:
                pairs = parse_key_values(path.read_text())
            except ValueError as exception:
                raise ConfigurationError(f"{path}: {exception}")
            for key, value in pairs:
                if key == "command":
                    continue
                if key in defaults:
                    values[key] = coerce(defaults[key], value, key)
                elif command in MODEL_COMMANDS and key in MODEL_FIELDS:
                    values[key] = value
                else:
                    raise ConfigurationError(
                        f"{path}: unknown key {key!r} for {command}"
                    )
        for key in defaults:
            value = getattr(arguments, key, None)
            if value is not None:
                values[key] = coerce(defaults[key], value, key)
        return cls(command, values)


def coerce(default, value, key: str):
    try:
        if isinstance(default, bool):
            return str(value).lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError:
        raise ConfigurationError(f"Invalid value {value!r} for {key}")
    if isinstance(value, (list, tuple)):
        return ",".join(str(item) for item in value)
    return str(value)


def ablations(text: str) -> List[Ablation]:
    tokens = text.replace(" ", ",").split(",")
    return [Ablation.parse(token) for token in tokens if token]


def emit(text: str = ""):
    print_formatted_text(text, file=sys.stdout)


def emit_verdict(passed: bool, detail: str):
    color = "ansigreen" if passed else "ansired"
    verdict = "PASS" if passed else "FAIL"
    text = HTML(f"<b><{color}>{verdict}</{color}></b> {{}}").format(detail)
    print_formatted_text(text, file=sys.stdout)


def report_error(exception: Exception):
    text = HTML("<ansired>{}</ansired>").format(str(exception))
    print_formatted_text(text, file=sys.stderr)


def emit_header(text: str):
    print_formatted_text(HTML("<b>{}</b>").format(text), file=sys.stdout)


### COMMANDS ###


def cmd_generate(run: RunConfig, progress: bool = False) -> int:
    if run.out is None:
        raise ConfigurationError("generate needs --out")
    regime = RegimeSpec.preset(
        run["regime"],
        held_out=parse_pairs(run["holdout"]),
        geometry=run["geometry"],
        rules=run["rules"],
        n_train=run["n_train"],
        n_val=run["n_val"],
        n_test=run["n_test"],
    )
    run.write_echo()
    datasets = generate_splits(regime, run["seed"], run.out, run["workers"], progress)
    rows = [["split", "count", "panels"]]
    for split, dataset in datasets.items():
        rows.append([split.value, str(len(dataset)), str(dataset.panels.shape[1])])
    emit_header(f"regime {regime.name} ({regime.geometry.value})")
    emit(format_table(rows))
    return EXIT_OK


def model_config(run: RunConfig, **overrides) -> ModelConfig:
    values = dict(run.model_values)
    values.update(overrides)
    config = ModelConfig.from_mapping(values)
    return config.ablate(ablations(run.values.get("ablate", "")))


def cmd_train(run: RunConfig, progress: bool = False) -> int:
    if not run["data"]:
        raise ConfigurationError("train needs --data")
    if run.out is None:
        raise ConfigurationError("train needs --out")
    data = pathlib.Path(run["data"])
    train_data = read_dataset(data / Split.TRAIN.value)
    val_data = read_dataset(data / Split.VAL.value)
    config = model_config(
        run,
        geometry=train_data.geometry.value,
        rule_dim=train_data.rule_dim,
        image_size=train_data.image_size,
        beta=run["beta"],
        gamma=run["gamma"],
    )
    run.write_echo()
    report = train(
        config,
        train_data,
        val_data,
        seed=run["seed"],
        batch_size=run["batch_size"],
        epochs=run["epochs"],
        lr=run["lr"],
        out=run.out,
        workers=run["workers"],
        progress=progress,
    )
    emit_header(f"trained {report.epochs} epochs")
    rows = [["best epoch", "best val loss", "stopped early"]]
    rows.append(
        [
            str(report.best_epoch),
            f"{report.best_val_loss:.4f}",
            str(report.stopped_early),
        ]
    )
    emit(format_table(rows))
    return EXIT_OK


def cmd_eval(run: RunConfig, progress: bool = False) -> int:
    if not run["checkpoint"] or not run["data"]:
        raise ConfigurationError("eval needs --checkpoint and --data")
    model = load_checkpoint(pathlib.Path(run["checkpoint"]))
    dataset = read_dataset(pathlib.Path(run["data"]))
    run.write_echo()
    scores = score(model, dataset, run["batch_size"], run["workers"])
    report = evaluate(model, dataset, run["batch_size"], run["workers"])
    emit_header(f"{len(dataset)} instances")
    emit(report.table())
    if report.breakdown:
        emit()
        emit(report.breakdown_table())
    if run.out is not None:
        (run.out / "metrics.csv").write_text(report.to_csv())
        predictions = predictions_csv(dataset, scores.logits)
        (run.out / "predictions.csv").write_text(predictions)
    return EXIT_OK


def cmd_gradcheck(run: RunConfig, progress: bool = False) -> int:
    config = model_config(run, geometry=run["geometry"], rule_dim=run["rule_dim"])
    run.write_echo()
    model = PoNG(config, seed=run["seed"])
    report = check_model_gradients(
        model, samples=run["samples"], batch=run["batch"], seed=run["seed"]
    )
    emit_verdict(
        report.passed,
        f"max relative error {report.max_error:.3e} over {len(report.entries)} "
        f"coordinates (tolerance {WIDE_TOLERANCE:g})",
    )
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


def cmd_params(run: RunConfig, progress: bool = False) -> int:
    config = model_config(run, geometry=run["geometry"], rule_dim=run["rule_dim"])
    run.write_echo()
    count = param_count(config)
    emit(f"{count} parameters (≈{count / 1e6:.1f}M)")
    return EXIT_OK


def cmd_preview(run: RunConfig, progress: bool = False) -> int:
    run.write_echo()
    if run["data"]:
        dataset = read_dataset(pathlib.Path(run["data"]))
        index = run["index"]
        if not 0 <= index < len(dataset):
            raise ConfigurationError(f"Index {index} outside [0, {len(dataset)})")
        geometry = dataset.geometry
        images, target = dataset.panels[index], dataset.targets[index]
    else:
        regime = RegimeSpec.preset(
            run["regime"],
            held_out=parse_pairs(run["holdout"]),
            geometry=run["geometry"],
        )
        instance = sample_matrix(regime, run["split"], run["seed"], run["index"])
        geometry, images, target = instance.geometry, instance.images(), instance.target
        emit_header(", ".join(str(spec) for spec in instance.rule_specs))
    columns = geometry.columns
    for row in range(geometry.rows):
        emit(render_strip(list(images[row * columns : (row + 1) * columns])))
        emit()
    emit_header(f"answers (correct: {int(target)})")
    emit(render_strip(list(images[geometry.context_panels :])))
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "params": cmd_params,
    "preview": cmd_preview,
}


### PARSER ###


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pong", description=__doc__.strip().splitlines()[0]
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("-q", "--quiet", action="store_true", help="no progress bars")
    subparsers = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        subparser = subparsers.add_parser(name, help=help_text)
        subparser.add_argument("--config", help="key=value file; flags win")
        subparser.add_argument("--out")
        return subparser

    generate = add("generate", "write train/val/test datasets")
    generate.add_argument("--geometry", choices=[member.value for member in Geometry])
    generate.add_argument("--regime", help="iid or a/<attribute>")
    generate.add_argument("--holdout", help="rule:attribute[,...]")
    generate.add_argument("--rules", help="rule[,...] allowed in every split")
    for split in Split:
        generate.add_argument(f"--n-{split.value}", dest=f"n_{split.value}", type=int)
    generate.add_argument("--seed", type=int)
    generate.add_argument("--workers", type=int)

    train_parser = add("train", "train a model, checkpointing on validation loss")
    train_parser.add_argument("--data")
    train_parser.add_argument("--seed", type=int)
    train_parser.add_argument("--batch-size", dest="batch_size", type=int)
    train_parser.add_argument("--beta", type=float)
    train_parser.add_argument("--gamma", type=float)
    train_parser.add_argument(
        "--ablate", nargs="*", help=", ".join(member.value for member in Ablation)
    )
    train_parser.add_argument("--epochs", type=int)
    train_parser.add_argument("--lr", type=float)
    train_parser.add_argument("--workers", type=int)

    eval_parser = add("eval", "evaluate a checkpoint on a dataset")
    eval_parser.add_argument("--checkpoint")
    eval_parser.add_argument("--data")
    eval_parser.add_argument("--batch-size", dest="batch_size", type=int)
    eval_parser.add_argument("--workers", type=int)

    gradcheck = add("gradcheck", "finite-difference check of a fresh model")
    gradcheck.add_argument("--geometry", choices=[member.value for member in Geometry])
    gradcheck.add_argument("--rule-dim", dest="rule_dim", type=int)
    gradcheck.add_argument("--samples", type=int)
    gradcheck.add_argument("--batch", type=int)
    gradcheck.add_argument("--seed", type=int)

    params = add("params", "count model parameters")
    params.add_argument("--geometry", choices=[member.value for member in Geometry])
    params.add_argument("--rule-dim", dest="rule_dim", type=int)
    params.add_argument("--ablate", nargs="*")

    preview = add("preview", "print one instance as text")
    preview.add_argument("--data")
    preview.add_argument("--index", type=int)
    preview.add_argument("--geometry", choices=[member.value for member in Geometry])
    preview.add_argument("--regime")
    preview.add_argument("--holdout")
    preview.add_argument("--split", choices=[member.value for member in Split])
    preview.add_argument("--seed", type=int)
    return parser


def configure_logging(verbosity: int):
    level = {0: logging.WARNING, 1: logging.INFO}.get(verbosity, logging.DEBUG)
    logging.basicConfig(
        level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s"
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    arguments = build_parser().parse_args(argv)
    configure_logging(arguments.verbose)
    progress = not arguments.quiet and sys.stderr.isatty()
    try:
        run = RunConfig.resolve(arguments.command, arguments)
        logger.info("Running %s", arguments.command)
        return COMMANDS[arguments.command](run, progress)
    except (ArtifactError, FileNotFoundError) as exception:
        report_error(exception)
        return EXIT_ARTIFACT
    except ConfigurationError as exception:
        report_error(exception)
        return EXIT_CONFIGURATION
