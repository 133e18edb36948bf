"""Command-line entry point.

Commands: generate, pretrain, train, predict, report, repro. Every run
reads a plain-text key=value config (all keys optional, defaults listed
in --help with their provenance), applies --set overrides, validates,
and writes its artifacts plus the fully resolved config into one run
directory. Identical config and seed produce byte-identical artifacts.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure,
5 I/O failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass

import torch

from . import dbgp, evaluation, synthdata
from .encoder import EncoderConfig, EncoderModel, load_encoder_checkpoint, pretrain_mlm, save_encoder_checkpoint
from .errors import (
    ConfigurationError,
    DataError,
    DeepBgpError,
    DimensionError,
    NumericError,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_IO = 5

OUT_ROOT_ENV = "DEEPBGP_OUT"


@dataclass(frozen=True)
class ConfigKey:
    name: str
    default: object
    provenance: str  # "published" (model-parameter table) or "toolkit"
    description: str


CONFIG_KEYS = [
    ConfigKey("seed", 0, "toolkit", "global random seed"),
    ConfigKey("cohort.n_patients", 2000, "toolkit", "patients to generate"),
    ConfigKey("cohort.positive_rate", 0.083, "published", "target positive fraction"),
    ConfigKey("cohort.n_codes", 100, "toolkit", "code vocabulary size"),
    ConfigKey("cohort.n_risk_codes", 4, "toolkit", "codes causally tied to the label"),
    ConfigKey("cohort.visits_min", 2, "toolkit", "min visits per patient"),
    ConfigKey("cohort.visits_max", 6, "toolkit", "max visits per patient"),
    ConfigKey("cohort.codes_min", 1, "toolkit", "min codes per visit"),
    ConfigKey("cohort.codes_max", 4, "toolkit", "max codes per visit"),
    ConfigKey("cohort.noise_rate", 0.05, "toolkit", "risk-code rate among negatives"),
    ConfigKey("encoder.max_sequence_length", 256, "published", "token cap per patient"),
    ConfigKey("encoder.hidden_size", 150, "published", "encoder hidden width"),
    ConfigKey("encoder.n_layers", 4, "published", "attention layers"),
    ConfigKey("encoder.n_heads", 6, "published", "attention heads"),
    ConfigKey("encoder.intermediate_size", 108, "published", "feed-forward width"),
    ConfigKey("encoder.dropout", 0.29, "published", "hidden dropout"),
    ConfigKey("encoder.pool_size_dense", 150, "published", "pool width, dense heads"),
    ConfigKey("encoder.pool_size_gp", 24, "published", "pool width, GP heads"),
    ConfigKey("bayes.embedding_prior_std", 0.374, "published", "embedding prior std"),
    ConfigKey("bayes.output_prior_std", 1.0, "published", "output-layer prior std"),
    ConfigKey("head.gp_input_dim", 2, "toolkit", "GP input dimensions"),
    ConfigKey("head.grid_points_per_dim", 64, "toolkit", "inducing grid size per dim"),
    ConfigKey("head.whitened_points_per_dim", 5, "toolkit", "free inducing mesh per dim"),
    ConfigKey("head.lengthscale", 0.5, "toolkit", "initial RBF lengthscale"),
    ConfigKey("head.outputscale", 1.0, "toolkit", "initial RBF output scale"),
    ConfigKey("pretrain.epochs", 2, "toolkit", "masked-code pretraining epochs"),
    ConfigKey("pretrain.batch_size", 64, "toolkit", "pretraining batch size"),
    ConfigKey("pretrain.mask_fraction", 0.15, "toolkit", "fraction of codes masked"),
    ConfigKey("pretrain.learning_rate", 1e-3, "toolkit", "pretraining step size"),
    ConfigKey("train.variant", "DBGP", "toolkit", "one of " + "|".join(dbgp.VARIANT_NAMES)),
    ConfigKey("train.epochs", 10, "toolkit", "training epochs"),
    ConfigKey("train.batch_size", 256, "toolkit", "training batch size"),
    ConfigKey("train.learning_rate", 1e-3, "toolkit", "adaptive-moment step size"),
    ConfigKey("train.mc_train_samples", 1, "toolkit", "weight draws per step"),
    ConfigKey("train.kl_warmup_epochs", 0, "toolkit", "KL weight ramp (final weight 1)"),
    ConfigKey("train.patience", 5, "toolkit", "early-stopping patience"),
    ConfigKey("predict.n_samples", 30, "published", "Monte Carlo draws per patient"),
    ConfigKey("predict.split", "validation", "toolkit", "train|validation|all"),
    ConfigKey("report.n_bins", 10, "toolkit", "calibration bins"),
    ConfigKey("paths.data", "", "toolkit", "dataset directory"),
    ConfigKey("paths.encoder_checkpoint", "", "toolkit", "pretrained encoder (optional)"),
    ConfigKey("paths.model_checkpoint", "", "toolkit", "trained model checkpoint"),
    ConfigKey("paths.predictions", "", "toolkit", "predictions file"),
]

_KEY_INDEX = {k.name: k for k in CONFIG_KEYS}


class RunConfig(dict):
    """Resolved config: every known key present, types coerced."""

    @classmethod
    def resolve(cls, config_path: str | None, overrides: list[str], seed: int | None) -> "RunConfig":
        values = {k.name: k.default for k in CONFIG_KEYS}
        if config_path:
            for key, raw in _parse_config_file(config_path):
                values[key] = _coerce(key, raw)
        for item in overrides:
            if "=" not in item:
                raise ConfigurationError(f"--set expects key=value, got {item!r}")
            key, raw = item.split("=", 1)
            key = key.strip()
            values[key] = _coerce(key, raw.strip())
        if seed is not None:
            values["seed"] = int(seed)
        return cls(values)

    def hash(self) -> str:
        blob = json.dumps({k: self[k] for k in sorted(self)}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def lines(self) -> list[str]:
        return [f"{key} = {self[key]}" for key in sorted(self)]


def _parse_config_file(path: str) -> list[tuple[str, str]]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigurationError(f"{path}:{line_no}: expected 'key = value'")
            key, raw = stripped.split("=", 1)
            pairs.append((key.strip(), raw.strip()))
    return pairs


def _coerce(key: str, raw: str):
    if key not in _KEY_INDEX:
        raise ConfigurationError(f"unknown config key {key!r}")
    default = _KEY_INDEX[key].default
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return str(raw)
    except ValueError as exc:
        raise ConfigurationError(f"config key {key}: cannot parse {raw!r}") from exc


def _cohort_config(cfg: RunConfig) -> synthdata.CohortConfig:
    return synthdata.CohortConfig(
        n_patients=cfg["cohort.n_patients"],
        positive_rate=cfg["cohort.positive_rate"],
        n_codes=cfg["cohort.n_codes"],
        n_risk_codes=cfg["cohort.n_risk_codes"],
        visits_per_patient=(cfg["cohort.visits_min"], cfg["cohort.visits_max"]),
        codes_per_visit=(cfg["cohort.codes_min"], cfg["cohort.codes_max"]),
        noise_rate=cfg["cohort.noise_rate"],
        seed=cfg["seed"],
    )


def _encoder_config(cfg: RunConfig, gp_head: bool) -> EncoderConfig:
    return EncoderConfig(
        max_sequence_length=cfg["encoder.max_sequence_length"],
        hidden_size=cfg["encoder.hidden_size"],
        n_layers=cfg["encoder.n_layers"],
        n_heads=cfg["encoder.n_heads"],
        intermediate_size=cfg["encoder.intermediate_size"],
        dropout=cfg["encoder.dropout"],
        pool_size=cfg["encoder.pool_size_gp"] if gp_head else cfg["encoder.pool_size_dense"],
    )


def _head_config(cfg: RunConfig) -> dbgp.HeadConfig:
    return dbgp.HeadConfig(
        gp_input_dim=cfg["head.gp_input_dim"],
        grid_points_per_dim=cfg["head.grid_points_per_dim"],
        whitened_points_per_dim=cfg["head.whitened_points_per_dim"],
        lengthscale=cfg["head.lengthscale"],
        outputscale=cfg["head.outputscale"],
        embedding_prior_std=cfg["bayes.embedding_prior_std"],
        output_prior_std=cfg["bayes.output_prior_std"],
    )


def _require_path(cfg: RunConfig, key: str) -> str:
    value = cfg[key]
    if not value:
        raise ConfigurationError(f"config key {key} is required for this command")
    return value


def _write_config_echo(out_dir: str, cfg: RunConfig) -> None:
    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"# config-hash: {cfg.hash()}\n")
        for line in cfg.lines():
            fh.write(line + "\n")


def _config_header(cfg: RunConfig) -> list[str]:
    return [f"config-hash: {cfg.hash()}", f"seed: {cfg['seed']}"] + cfg.lines()


def _select_split(records, split: str):
    if split == "all":
        return records
    if split not in ("train", "validation"):
        raise ConfigurationError(f"predict.split must be train|validation|all, got {split!r}")
    return [r for r in records if r.split == split]


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_generate(cfg: RunConfig, out_dir: str) -> None:
    vocabulary, records = synthdata.generate_cohort(_cohort_config(cfg))
    synthdata.write_dataset(os.path.join(out_dir, "dataset"), vocabulary, records)
    _write_config_echo(out_dir, cfg)


def cmd_pretrain(cfg: RunConfig, out_dir: str) -> None:
    vocabulary, records = synthdata.read_dataset(_require_path(cfg, "paths.data"))
    config = _encoder_config(cfg, gp_head=False)
    model = EncoderModel(vocabulary, config, seed=cfg["seed"])
    train_records = [r for r in records if r.split == "train"]
    losses = pretrain_mlm(
        train_records,
        model,
        epochs=cfg["pretrain.epochs"],
        batch_size=cfg["pretrain.batch_size"],
        mask_fraction=cfg["pretrain.mask_fraction"],
        learning_rate=cfg["pretrain.learning_rate"],
        seed=cfg["seed"],
    )
    save_encoder_checkpoint(model, os.path.join(out_dir, "encoder.pt"))
    with open(os.path.join(out_dir, "pretrain_metrics.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"# config-hash: {cfg.hash()}\n")
        for epoch, loss in enumerate(losses):
            fh.write(f"epoch={epoch} mlm_loss={loss!r}\n")
    _write_config_echo(out_dir, cfg)


def cmd_train(cfg: RunConfig, out_dir: str) -> None:
    vocabulary, records = synthdata.read_dataset(_require_path(cfg, "paths.data"))
    variant = dbgp.ModelVariant.from_name(cfg["train.variant"])
    pretrained = None
    if cfg["paths.encoder_checkpoint"]:
        pretrained = load_encoder_checkpoint(cfg["paths.encoder_checkpoint"])
    model, metrics = dbgp.train(
        vocabulary,
        records,
        variant,
        dbgp.TrainConfig(
            epochs=cfg["train.epochs"],
            batch_size=cfg["train.batch_size"],
            learning_rate=cfg["train.learning_rate"],
            mc_train_samples=cfg["train.mc_train_samples"],
            seed=cfg["seed"],
            kl_warmup_epochs=cfg["train.kl_warmup_epochs"],
            patience=cfg["train.patience"],
        ),
        encoder_config=_encoder_config(cfg, gp_head=variant.gp_head),
        head_config=_head_config(cfg),
        pretrained=pretrained,
    )
    dbgp.save_model_checkpoint(model, os.path.join(out_dir, "model.pt"))
    with open(os.path.join(out_dir, "metrics.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"# config-hash: {cfg.hash()}\n")
        for entry in metrics:
            fields = " ".join(f"{k}={entry[k]!r}" for k in sorted(entry))
            fh.write(fields + "\n")
    _write_config_echo(out_dir, cfg)


def _predict_samples(cfg: RunConfig, n_samples: int) -> evaluation.PredictiveSamples:
    vocabulary, records = synthdata.read_dataset(_require_path(cfg, "paths.data"))
    model = dbgp.load_model_checkpoint(_require_path(cfg, "paths.model_checkpoint"))
    if tuple(model.vocabulary.code_tokens) != tuple(vocabulary.code_tokens):
        raise DataError("model vocabulary does not match the dataset vocabulary")
    selected = _select_split(records, cfg["predict.split"])
    if not selected:
        raise DataError(f"no records in split {cfg['predict.split']!r}")
    return dbgp.mc_predict(model, selected, n_samples=n_samples, seed=cfg["seed"])


def cmd_predict(cfg: RunConfig, out_dir: str) -> None:
    samples = _predict_samples(cfg, cfg["predict.n_samples"])
    evaluation.write_predictions(
        os.path.join(out_dir, "predictions.tsv"), samples, _config_header(cfg)
    )
    _write_config_echo(out_dir, cfg)


def _fmt(value) -> str:
    if value is None:
        return "undefined"
    return repr(float(value))


def cmd_report(cfg: RunConfig, out_dir: str) -> None:
    samples = evaluation.read_predictions(_require_path(cfg, "paths.predictions"))
    auroc, ap = evaluation.ranking_metrics(samples)
    acc_curve, auroc_curve = evaluation.confidence_curves(samples)
    bins = evaluation.calibration_curve(samples, n_bins=cfg["report.n_bins"])
    split = evaluation.uncertainty_split(samples)

    divs = {}
    for side in ("positive", "negative"):
        try:
            divs[side] = evaluation.div_metric(split, side)
        except DataError:
            divs[side] = None

    header = [f"# {line}" for line in _config_header(cfg)]

    def table(name: str, columns: list[str], rows: list[list]) -> None:
        with open(os.path.join(out_dir, name), "w", encoding="utf-8") as fh:
            for line in header:
                fh.write(line + "\n")
            fh.write("\t".join(columns) + "\n")
            for row in rows:
                fh.write("\t".join(str(v) for v in row) + "\n")

    for label, curve in (("accuracy", acc_curve), ("auroc", auroc_curve)):
        table(
            f"confidence_{label}.tsv",
            ["threshold", label, "retained"],
            [
                [repr(t), _fmt(v), c]
                for t, v, c in zip(curve.thresholds, curve.values, curve.retained)
            ],
        )
    table(
        "calibration.tsv",
        ["lower", "upper", "count", "mean_predicted", "positive_fraction"],
        [[repr(b.lower), repr(b.upper), b.count, _fmt(b.mean_predicted), _fmt(b.positive_fraction)] for b in bins],
    )
    table(
        "uncertainty_groups.tsv",
        ["group", "count", "min", "q1", "median", "q3", "max"],
        [
            [name, s.count, _fmt(s.minimum), _fmt(s.q1), _fmt(s.median), _fmt(s.q3), _fmt(s.maximum)]
            for name, s in split.summaries().items()
        ],
    )

    entropy_written = False
    if cfg["paths.model_checkpoint"]:
        model = dbgp.load_model_checkpoint(cfg["paths.model_checkpoint"])
        code_table = model.encoder_model.embedding.tables["code"]
        if hasattr(code_table, "mu"):
            ranking = evaluation.embedding_entropy(code_table, model.vocabulary)
            table(
                "entropy.tsv",
                ["rank", "token", "entropy"],
                [
                    [i, tok, repr(float(e))]
                    for i, (tok, e) in enumerate(zip(ranking.tokens, ranking.entropies))
                ],
            )
            entropy_written = True

    summary = {
        "config_hash": cfg.hash(),
        "seed": cfg["seed"],
        "n_patients": int(samples.labels.size),
        "n_samples": samples.n_samples,
        "auroc": auroc,
        "average_precision": ap,
        "div_positive": divs["positive"],
        "div_negative": divs["negative"],
        "entropy_table": entropy_written,
    }
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    _write_config_echo(out_dir, cfg)


def cmd_repro(cfg: RunConfig, out_dir: str) -> None:
    """Predict with S and 2S draws and compare the ranking metrics."""
    s_base = cfg["predict.n_samples"]
    rows = []
    for s in (s_base, 2 * s_base):
        samples = _predict_samples(cfg, s)
        evaluation.write_predictions(
            os.path.join(out_dir, f"predictions_s{s}.tsv"), samples, _config_header(cfg)
        )
        auroc, ap = evaluation.ranking_metrics(samples)
        rows.append((s, auroc, ap))
    with open(os.path.join(out_dir, "comparison.tsv"), "w", encoding="utf-8") as fh:
        for line in _config_header(cfg):
            fh.write(f"# {line}\n")
        fh.write("n_samples\tauroc\taverage_precision\n")
        for s, auroc, ap in rows:
            fh.write(f"{s}\t{auroc!r}\t{ap!r}\n")
        fh.write(f"# auroc_abs_diff = {abs(rows[0][1] - rows[1][1])!r}\n")
    _write_config_echo(out_dir, cfg)


COMMANDS = {
    "generate": cmd_generate,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "predict": cmd_predict,
    "report": cmd_report,
    "repro": cmd_repro,
}


def _help_epilog() -> str:
    lines = ["config keys (default, provenance):"]
    for key in CONFIG_KEYS:
        lines.append(f"  {key.name} = {key.default}  [{key.provenance}] {key.description}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deepbgp",
        description="Probabilistic sequence classifiers with uncertainty reports.",
        epilog=_help_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", default=None, help="key = value config file")
    parser.add_argument(
        "--set", action="append", default=[], metavar="K=V", help="override a config key"
    )
    parser.add_argument("--out", default=None, help="run directory (default: auto-named)")
    parser.add_argument("--seed", type=int, default=None, help="override the seed key")
    return parser


def _resolve_out_dir(explicit: str | None, command: str, cfg: RunConfig) -> str:
    if explicit:
        out = explicit
    else:
        root = os.environ.get(OUT_ROOT_ENV, os.path.join(os.getcwd(), "runs"))
        stamp = time.strftime("%Y%m%d-%H%M%S")
        out = os.path.join(root, f"{command}-{cfg.hash()}-{stamp}")
    os.makedirs(out, exist_ok=True)
    return out


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = RunConfig.resolve(args.config, args.set, args.seed)
        torch.manual_seed(cfg["seed"])
        out_dir = _resolve_out_dir(args.out, args.command, cfg)
        COMMANDS[args.command](cfg, out_dir)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, DimensionError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return EXIT_IO
    except DeepBgpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
