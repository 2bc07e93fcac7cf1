"""Command-line surface: generate, train, evaluate, ablate, export-embeddings.

A run is described by one JSON config file with sections generate,
sequence, model, loss, train, eval, and paths; every key defaults to the
engine's defaults, flags (--seed, --out) override file values, and each
command prints where its artifacts went. Commands are idempotent: the same
config and seed produce byte-identical outputs.

Exit codes: 0 success, 2 config or validation problem, 3 numeric failure
during training, 4 artifact mismatch (unreadable or incompatible
checkpoint). Log verbosity comes from the SKIPREC_LOG environment variable
(debug, info, warning, error).
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import click

from .data import (
    LogFormatError,
    SequenceConfig,
    build_examples,
    read_catalog,
    read_events,
    split_temporal,
    validate_examples,
    write_catalog,
    write_events,
    CatalogIndex,
)
from .encoders import CLICKED_VARIANTS, build_model
from .evaluation import (
    ablation_table_csv,
    ablation_table_text,
    evaluate,
    export_embeddings,
    metrics_table_csv,
    metrics_table_text,
    run_ablation,
)
from .losses import LossConfig
from .simulate import GenConfig, generate_corpus, write_latents
from .training import (
    CheckpointFormatError,
    CheckpointMismatchError,
    OptimizerState,
    TrainConfig,
    TrainingDivergedError,
    load_checkpoint,
    restore_model,
    save_checkpoint,
    train,
    write_loss_trace,
)

logger = logging.getLogger(__name__)

EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_ARTIFACT = 4


class ConfigError(ValueError):
    """The run config file or its values are unusable."""


@dataclass
class ModelConfig:
    embed_dim: int = 32
    clicked_encoder: str = "meanpool"
    share_label_ffn: bool = False

    def validate(self) -> None:
        if not isinstance(self.embed_dim, int) or self.embed_dim < 1:
            raise ValueError(f"embed_dim must be a positive integer, got {self.embed_dim!r}")
        if self.clicked_encoder not in CLICKED_VARIANTS:
            raise ValueError(
                f"clicked_encoder must be one of {CLICKED_VARIANTS}, "
                f"got {self.clicked_encoder!r}"
            )


@dataclass
class EvalConfig:
    cutoffs: list[int] = field(default_factory=lambda: [50, 80])
    test_fraction: float = 0.1

    def validate(self) -> None:
        if not self.cutoffs:
            raise ValueError("cutoffs must be non-empty")
        for k in self.cutoffs:
            if not isinstance(k, int) or isinstance(k, bool) or k < 1:
                raise ValueError(f"cutoffs must be positive integers, got {self.cutoffs!r}")
        if not (0.0 <= self.test_fraction < 1.0):
            raise ValueError(f"test_fraction must be in [0, 1), got {self.test_fraction!r}")


@dataclass
class PathsConfig:
    out_dir: str = "runs/default"
    catalog: str | None = None
    events: str | None = None
    latents: str | None = None
    checkpoint: str | None = None
    loss_trace: str | None = None
    metrics_csv: str | None = None
    metrics_txt: str | None = None
    ablation_csv: str | None = None
    ablation_txt: str | None = None
    embeddings: str | None = None


_PATH_DEFAULTS = {
    "catalog": "catalog.jsonl",
    "events": "events.jsonl",
    "latents": "latents.jsonl",
    "checkpoint": "checkpoint.bin",
    "loss_trace": "loss_trace.csv",
    "metrics_csv": "metrics.csv",
    "metrics_txt": "metrics.txt",
    "ablation_csv": "ablation.csv",
    "ablation_txt": "ablation.txt",
    "embeddings": "embeddings.csv",
}


@dataclass
class RunConfig:
    generate: GenConfig = field(default_factory=GenConfig)
    sequence: SequenceConfig = field(default_factory=SequenceConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> None:
        self.generate.validate()
        self.sequence.validate()
        self.model.validate()
        self.loss.validate()
        self.train.validate()
        self.eval.validate()

    def path(self, name: str) -> Path:
        explicit = getattr(self.paths, name)
        if explicit is not None:
            return Path(explicit)
        return Path(self.paths.out_dir) / _PATH_DEFAULTS[name]

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def _apply_section(target, payload: dict, section: str) -> None:
    valid = {f.name: f for f in dataclasses.fields(target)}
    for key, value in payload.items():
        if key not in valid:
            raise ConfigError(f"unknown key '{key}' in config section '{section}'")
        current = getattr(target, key)
        if isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        setattr(target, key, value)


def load_run_config(
    config_path: str | None = None,
    seed: int | None = None,
    out_dir: str | None = None,
) -> RunConfig:
    """Defaults, overlaid with the config file, overlaid with flag overrides."""
    rc = RunConfig()
    if config_path is not None:
        try:
            raw = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must contain a JSON object")
        for section, payload in raw.items():
            if not hasattr(rc, section):
                raise ConfigError(f"unknown config section '{section}'")
            if not isinstance(payload, dict):
                raise ConfigError(f"config section '{section}' must be an object")
            _apply_section(getattr(rc, section), payload, section)
    if seed is not None:
        rc.generate.seed = seed
        rc.train.seed = seed
    if out_dir is not None:
        rc.paths.out_dir = out_dir
    try:
        rc.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return rc


def _setup_logging() -> None:
    level_name = os.environ.get("SKIPREC_LOG", "warning").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(
        level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s"
    )


def _fail(code: int, message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_config_or_exit(config, seed, out_dir) -> RunConfig:
    try:
        return load_run_config(config, seed, out_dir)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))


def _ensure_out_dir(rc: RunConfig) -> None:
    try:
        Path(rc.paths.out_dir).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        _fail(EXIT_CONFIG, f"cannot create output directory: {exc}")


def _prepare_dataset(rc: RunConfig):
    """Parse the corpus and rebuild the deterministic train/test split."""
    try:
        catalog_items = read_catalog(rc.path("catalog"))
        events = read_events(rc.path("events"))
    except OSError as exc:
        raise ConfigError(f"cannot read corpus: {exc}") from exc
    except LogFormatError as exc:
        raise ConfigError(str(exc)) from exc
    if not catalog_items:
        raise ConfigError(f"catalog at {rc.path('catalog')} is empty")
    examples = build_examples(events, rc.sequence)
    if not examples:
        raise ConfigError("no training examples could be built from the event log")
    catalog = CatalogIndex(catalog_items)
    validate_examples(examples, rc.sequence, catalog_items)
    split = split_temporal(examples, rc.eval.test_fraction)
    users = sorted({e.user_id for e in events})
    return catalog, users, split


def _build_model(rc: RunConfig, catalog: CatalogIndex, users: list[str]):
    return build_model(
        catalog,
        users,
        embed_dim=rc.model.embed_dim,
        clicked_variant=rc.model.clicked_encoder,
        share_label_ffn=rc.model.share_label_ffn,
        seed=rc.train.seed,
    )


def _restore_from_checkpoint(rc: RunConfig, model) -> dict:
    try:
        params, accumulators, stored = load_checkpoint(rc.path("checkpoint"))
    except OSError as exc:
        _fail(EXIT_ARTIFACT, f"cannot read checkpoint: {exc}")
    except CheckpointFormatError as exc:
        _fail(EXIT_ARTIFACT, f"bad checkpoint: {exc}")
    try:
        restore_model(model, params)
    except CheckpointMismatchError as exc:
        _fail(EXIT_ARTIFACT, f"checkpoint does not fit the configured model: {exc}")
    return stored


@click.group()
def main() -> None:
    """Train and evaluate a skip-aware sequential recommender."""
    _setup_logging()


_config_opt = click.option(
    "--config", "config", type=click.Path(), default=None, help="JSON run config."
)
_seed_opt = click.option(
    "--seed", type=int, default=None, help="Override generator and training seeds."
)
_out_opt = click.option(
    "--out", "out_dir", type=click.Path(), default=None, help="Override output directory."
)


@main.command("generate")
@_config_opt
@_seed_opt
@_out_opt
def cmd_generate(config, seed, out_dir) -> None:
    """Write the synthetic catalog, event log, and ground-truth latents."""
    rc = _load_config_or_exit(config, seed, out_dir)
    _ensure_out_dir(rc)
    items, latents, events = generate_corpus(rc.generate)
    n_imp = sum(1 for e in events if e.event_type == "imp")
    n_clk = len(events) - n_imp
    try:
        write_catalog(items, rc.path("catalog"))
        write_events(events, rc.path("events"))
        write_latents(rc.generate, latents, rc.path("latents"))
    except OSError as exc:
        _fail(EXIT_CONFIG, f"cannot write corpus: {exc}")
    click.echo(
        f"generated {len(items)} items, {n_imp} impressions, {n_clk} clicks "
        f"-> {rc.paths.out_dir}"
    )


@main.command("train")
@_config_opt
@_seed_opt
@_out_opt
def cmd_train(config, seed, out_dir) -> None:
    """Train a model on the generated corpus and write a checkpoint."""
    rc = _load_config_or_exit(config, seed, out_dir)
    _ensure_out_dir(rc)
    try:
        catalog, users, split = _prepare_dataset(rc)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    model = _build_model(rc, catalog, users)
    optimizer = OptimizerState.fresh(model.params)
    try:
        result = train(model, split.train, rc.loss, rc.train, optimizer=optimizer)
    except TrainingDivergedError as exc:
        _fail(EXIT_NUMERIC, str(exc))
    except ValueError as exc:
        _fail(EXIT_CONFIG, str(exc))
    try:
        save_checkpoint(rc.path("checkpoint"), model.params, optimizer, rc.as_dict())
        write_loss_trace(rc.path("loss_trace"), result.loss_trace)
    except OSError as exc:
        _fail(EXIT_CONFIG, f"cannot write artifacts: {exc}")
    final = f"{result.loss_trace[-1]:.6f}" if result.loss_trace else "n/a"
    click.echo(
        f"trained on {len(split.train)} examples for {rc.train.epochs} epochs "
        f"(final loss {final}) -> {rc.path('checkpoint')}"
    )


@main.command("evaluate")
@_config_opt
@_seed_opt
@_out_opt
def cmd_evaluate(config, seed, out_dir) -> None:
    """Rank the catalog for held-out anchors and write the metrics report."""
    rc = _load_config_or_exit(config, seed, out_dir)
    _ensure_out_dir(rc)
    try:
        catalog, users, split = _prepare_dataset(rc)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    if not split.test:
        _fail(EXIT_CONFIG, "test split is empty; raise eval.test_fraction")
    model = _build_model(rc, catalog, users)
    _restore_from_checkpoint(rc, model)
    report = evaluate(model, split.test, rc.loss, tuple(rc.eval.cutoffs))
    try:
        rc.path("metrics_csv").write_text(metrics_table_csv(report), encoding="utf-8")
        rc.path("metrics_txt").write_text(metrics_table_text(report), encoding="utf-8")
    except OSError as exc:
        _fail(EXIT_CONFIG, f"cannot write metrics: {exc}")
    click.echo(metrics_table_text(report), nl=False)


@main.command("ablate")
@_config_opt
@_seed_opt
@_out_opt
def cmd_ablate(config, seed, out_dir) -> None:
    """Retrain every objective variant and write the comparison table."""
    rc = _load_config_or_exit(config, seed, out_dir)
    _ensure_out_dir(rc)
    try:
        catalog, users, split = _prepare_dataset(rc)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    if not split.test:
        _fail(EXIT_CONFIG, "test split is empty; raise eval.test_fraction")
    try:
        rows = run_ablation(
            catalog,
            users,
            split.train,
            split.test,
            rc.loss,
            rc.train,
            embed_dim=rc.model.embed_dim,
            clicked_variant=rc.model.clicked_encoder,
            share_label_ffn=rc.model.share_label_ffn,
            cutoffs=tuple(rc.eval.cutoffs),
        )
    except TrainingDivergedError as exc:
        _fail(EXIT_NUMERIC, str(exc))
    try:
        rc.path("ablation_csv").write_text(ablation_table_csv(rows), encoding="utf-8")
        rc.path("ablation_txt").write_text(ablation_table_text(rows), encoding="utf-8")
    except OSError as exc:
        _fail(EXIT_CONFIG, f"cannot write ablation tables: {exc}")
    click.echo(ablation_table_text(rows), nl=False)


@main.command("export-embeddings")
@_config_opt
@_seed_opt
@_out_opt
def cmd_export_embeddings(config, seed, out_dir) -> None:
    """Dump h, n, c, zhat per held-out anchor plus all item encodings."""
    rc = _load_config_or_exit(config, seed, out_dir)
    _ensure_out_dir(rc)
    try:
        catalog, users, split = _prepare_dataset(rc)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    model = _build_model(rc, catalog, users)
    _restore_from_checkpoint(rc, model)
    try:
        n_rows = export_embeddings(model, split.test, rc.loss, rc.path("embeddings"))
    except OSError as exc:
        _fail(EXIT_CONFIG, f"cannot write embeddings: {exc}")
    click.echo(f"wrote {n_rows} vectors -> {rc.path('embeddings')}")


if __name__ == "__main__":
    main()
