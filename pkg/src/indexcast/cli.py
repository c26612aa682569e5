"""Stage-by-stage command line driver.

Stages communicate only via files in the run's workdir, so any stage can be
re-run or swapped. Each stage writes a manifest (config hash, seed, input and
output hashes) that downstream stages check; running against artifacts from a
different configuration fails with a staleness error.

Exit codes: 0 success, 2 validation error, 3 numeric error, 4 protocol error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .backtest import (
    BacktestReport,
    MetricsRow,
    SplitPlan,
    fractional_split_plan,
    predictions_to_csv,
    run_backtest,
)
from .data import (
    generate_synthetic,
    load_drivers,
    load_prices,
    month_boundaries,
    write_drivers,
    write_prices,
)
from .errors import (
    ConfigError,
    MissingArtifactError,
    NumericError,
    ProtocolError,
    StalenessError,
    ValidationError,
)
from .features import FeatureStore, build_features
from .gbdt import (
    ExampleSet,
    FineTuneOverrides,
    GbdtConfig,
    fine_tune,
    load_model,
    save_model,
    train_global,
)
from .graph import load_graph, save_graph, synthetic_graph
from .pipeline import (
    EmbeddingStore,
    PipelineConfig,
    build_examples,
    embed_features,
    label_table,
)
from .regimes import label_regimes, segments_to_csv
from .vae import VaeConfig, load_checkpoint, save_checkpoint, train_vae

# artifact file name -> stage that produces it
_PRODUCERS = {
    "prices.csv": "synth",
    "drivers.csv": "synth",
    "graph.yaml": "synth",
    "truth.json": "synth",
    "segments.csv": "label",
    "features.npz": "features",
    "labels.csv": "features",
    "vae.npz": "train-vae",
    "vae_report.json": "train-vae",
    "embeddings.npz": "embed",
    "model_global.json": "train-global",
}


@dataclass
class RunConfig:
    seed: int
    workdir: Path
    paths: dict
    synthetic: dict
    pipeline: PipelineConfig
    split: dict
    targets: list[str]
    raw: dict = field(repr=False, default_factory=dict)

    def config_hash(self) -> str:
        canon = json.dumps(self.raw, sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()


def load_run_config(path, seed_override: int | None = None) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    if seed_override is not None:
        raw["seed"] = int(seed_override)
    if "seed" not in raw:
        raise ConfigError(
            "config must set an explicit seed (or pass --seed); there is no "
            "wall-clock default"
        )
    if "workdir" not in raw:
        raise ConfigError("config must set a workdir")
    workdir = Path(raw["workdir"])
    paths = {
        "prices": Path(raw.get("paths", {}).get("prices", workdir / "prices.csv")),
        "drivers": Path(raw.get("paths", {}).get("drivers", workdir / "drivers.csv")),
        "graph": Path(raw.get("paths", {}).get("graph", workdir / "graph.yaml")),
    }
    vae_raw = dict(raw.get("vae", {}))
    if "hidden" in vae_raw:
        vae_raw["hidden"] = tuple(int(h) for h in vae_raw["hidden"])
    vae_raw.setdefault("seed", int(raw["seed"]))
    pipeline = PipelineConfig(
        threshold=float(raw.get("regimes", {}).get("threshold", 0.20)),
        window=int(raw.get("features", {}).get("window", 21)),
        vae=VaeConfig(**vae_raw),
        gbdt=GbdtConfig(**raw.get("gbdt", {})),
        fine_tune=FineTuneOverrides(**raw.get("fine_tune", {})),
    )
    return RunConfig(
        seed=int(raw["seed"]),
        workdir=workdir,
        paths=paths,
        synthetic=dict(raw.get("synthetic", {})),
        pipeline=pipeline,
        split=dict(raw.get("split", {"mode": "fractions"})),
        targets=[str(t) for t in raw.get("targets", [])],
        raw=raw,
    )


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _manifest_path(cfg: RunConfig, stage: str) -> Path:
    return cfg.workdir / "manifests" / f"{stage}.json"


def _write_manifest(cfg: RunConfig, stage: str, inputs: list[Path],
                    outputs: list[Path]) -> None:
    path = _manifest_path(cfg, stage)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "stage": stage,
        "package_version": __version__,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in outputs},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)


def _require_artifact(cfg: RunConfig, path: Path) -> Path:
    """Fail with the producing stage's name if an input artifact is absent."""
    if path.exists():
        _check_staleness(cfg, path)
        return path
    producer = _PRODUCERS.get(path.name)
    if producer is None and path.name.startswith("model_"):
        producer = "fine-tune"
    hint = f"; run `{producer}` first" if producer else ""
    raise MissingArtifactError(f"missing artifact {path}{hint}")


def _check_staleness(cfg: RunConfig, path: Path) -> None:
    producer = _PRODUCERS.get(path.name)
    if producer is None:
        return
    manifest = _manifest_path(cfg, producer)
    if not manifest.exists():
        return  # user-supplied artifact, nothing to compare against
    with open(manifest, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("config_hash") != cfg.config_hash():
        raise StalenessError(
            f"artifact {path} was produced under a different configuration "
            f"(stage '{producer}'); re-run it or restore the old config"
        )


# ---------------------------------------------------------------------------
# Stage implementations
# ---------------------------------------------------------------------------

def _stage_synth(cfg: RunConfig) -> list[Path]:
    syn = cfg.synthetic
    if not syn:
        raise ConfigError("config has no `synthetic` section")
    n_nodes = int(syn.get("n_nodes", 20))
    n_dpn = int(syn.get("n_drivers_per_node", 3))
    prices, panel, truth = generate_synthetic(
        seed=cfg.seed,
        n_indices=int(syn.get("n_indices", 12)),
        n_drivers_per_node=n_dpn,
        n_months=int(syn.get("n_months", 120)),
        signal_strength=float(syn.get("signal_strength", 1.0)),
        n_nodes=n_nodes,
        flip_signal_for=tuple(syn.get("flip_signal_for", [])),
    )
    graph = synthetic_graph(
        n_nodes, n_dpn,
        window=cfg.pipeline.window,
        threshold=cfg.pipeline.threshold,
        embedding_dim=cfg.pipeline.vae.embedding_dim,
    )
    cfg.workdir.mkdir(parents=True, exist_ok=True)
    write_prices(cfg.paths["prices"], prices)
    write_drivers(cfg.paths["drivers"], panel)
    save_graph(graph, cfg.paths["graph"])
    truth_path = cfg.workdir / "truth.json"
    with open(truth_path, "w", encoding="utf-8") as fh:
        json.dump({k: v.tolist() for k, v in truth.items()}, fh, sort_keys=True)
    return [cfg.paths["prices"], cfg.paths["drivers"], cfg.paths["graph"],
            truth_path]


def _stage_label(cfg: RunConfig) -> list[Path]:
    prices = load_prices(_require_artifact(cfg, cfg.paths["prices"]))
    segments = []
    for series in prices:
        segments.extend(label_regimes(series, cfg.pipeline.threshold))
    out = cfg.workdir / "segments.csv"
    segments_to_csv(out, segments)
    return [out]


def _stage_features(cfg: RunConfig) -> list[Path]:
    prices = load_prices(_require_artifact(cfg, cfg.paths["prices"]))
    graph = load_graph(_require_artifact(cfg, cfg.paths["graph"]),
                       expected_nodes=None)
    panel = load_drivers(_require_artifact(cfg, cfg.paths["drivers"]), graph)
    store = build_features(prices, panel, graph, cfg.pipeline.threshold,
                           cfg.pipeline.window)
    out = cfg.workdir / "features.npz"
    store.save(out)
    labels_path = cfg.workdir / "labels.csv"
    with open(labels_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["month", "index_id", "y"])
        for (index_id, t), y in sorted(label_table(prices,
                                                   cfg.pipeline.window).items()):
            writer.writerow([t, index_id, y])
    return [out, labels_path]


def _load_labels(path: Path) -> dict[tuple[str, int], int]:
    out = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            out[(row["index_id"], int(row["month"]))] = int(row["y"])
    return out


def _split_plan(cfg: RunConfig, store: FeatureStore) -> SplitPlan:
    split = cfg.split
    mode = split.get("mode", "fractions")
    if mode == "fractions":
        return fractional_split_plan(
            np.unique(store.month),
            vae_frac=float(split.get("vae_frac", 0.40)),
            train_frac=float(split.get("train_frac", 0.35)),
            val_frac=float(split.get("val_frac", 0.08)),
        )
    if mode == "explicit":
        return SplitPlan(
            vae_train=tuple(split["vae_train"]),
            classifier_train=tuple(split["classifier_train"]),
            validation=tuple(split["validation"]),
            test=tuple(split["test"]),
            sub_periods={
                str(k): tuple(v)
                for k, v in split.get("sub_periods", {}).items()
            },
        )
    raise ConfigError(f"unknown split mode '{mode}'")


def _stage_train_vae(cfg: RunConfig) -> list[Path]:
    store = FeatureStore.load(_require_artifact(cfg, cfg.workdir / "features.npz"))
    plan = _split_plan(cfg, store)
    part = store.select(months=plan.vae_train)
    if len(part) == 0:
        raise ValidationError("no feature rows in the VAE training range")
    params, report = train_vae(
        part.X, store.n_continuous, cfg.pipeline.vae,
        train_months=(int(part.month.min()), int(part.month.max())),
    )
    out = cfg.workdir / "vae.npz"
    save_checkpoint(params, out)
    report_path = cfg.workdir / "vae_report.json"
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(
            {
                "train_loss": report.train_loss,
                "val_loss": report.val_loss,
                "reconstruction_continuous": report.reconstruction_continuous,
                "kl": report.kl,
                "reconstruction_discrete": report.reconstruction_discrete,
                "best_epoch": report.best_epoch,
                "epochs_run": report.epochs_run,
                "train_months": list(report.train_months),
            },
            fh, sort_keys=True,
        )
    return [out, report_path]


def _stage_embed(cfg: RunConfig) -> list[Path]:
    store = FeatureStore.load(_require_artifact(cfg, cfg.workdir / "features.npz"))
    params = load_checkpoint(_require_artifact(cfg, cfg.workdir / "vae.npz"))
    plan = _split_plan(cfg, store)
    post = store.select(months=(plan.classifier_train[0], plan.test[1]))
    embeddings = embed_features(params, post)
    out = cfg.workdir / "embeddings.npz"
    embeddings.save(out)
    return [out]


def _examples(cfg: RunConfig) -> tuple[ExampleSet, SplitPlan]:
    store = FeatureStore.load(_require_artifact(cfg, cfg.workdir / "features.npz"))
    plan = _split_plan(cfg, store)
    embeddings = EmbeddingStore.load(
        _require_artifact(cfg, cfg.workdir / "embeddings.npz")
    )
    labels = _load_labels(_require_artifact(cfg, cfg.workdir / "labels.csv"))
    return build_examples(embeddings, labels), plan


def _stage_train_global(cfg: RunConfig) -> list[Path]:
    examples, plan = _examples(cfg)
    train = examples.select_months(*plan.classifier_train)
    valid = examples.select_months(*plan.validation)
    model = train_global(train, cfg.pipeline.gbdt, valid)
    out = cfg.workdir / "model_global.json"
    save_model(model, out)
    return [out]


def _targets(cfg: RunConfig, target_flag: str | None) -> list[str]:
    targets = [target_flag] if target_flag else cfg.targets
    if not targets:
        raise ConfigError("no target index: set `targets` or pass --target")
    return targets


def _select_index(examples: ExampleSet, index_id: str) -> ExampleSet:
    mask = examples.index_id == index_id
    return ExampleSet(X=examples.X[mask], y=examples.y[mask],
                      month=examples.month[mask],
                      index_id=examples.index_id[mask])


def _stage_fine_tune(cfg: RunConfig, target_flag: str | None) -> list[Path]:
    examples, plan = _examples(cfg)
    global_model = load_model(
        _require_artifact(cfg, cfg.workdir / "model_global.json")
    )
    outputs = []
    for target in _targets(cfg, target_flag):
        train = _select_index(examples.select_months(*plan.classifier_train),
                              target)
        valid = _select_index(examples.select_months(*plan.validation), target)
        if len(train) == 0:
            raise ValidationError(f"no training examples for target '{target}'")
        model = fine_tune(global_model, train, cfg.pipeline.fine_tune, valid)
        out = cfg.workdir / f"model_{target}.json"
        save_model(model, out)
        outputs.append(out)
    return outputs


@dataclass
class _FileArtifacts:
    """Just enough of PipelineArtifacts for run_backtest, read from disk."""

    vae_report: object
    global_model: object
    target_models: dict
    examples: ExampleSet


def _stage_backtest(cfg: RunConfig, target_flag: str | None) -> list[Path]:
    examples, plan = _examples(cfg)
    global_model = load_model(
        _require_artifact(cfg, cfg.workdir / "model_global.json")
    )
    with open(_require_artifact(cfg, cfg.workdir / "vae_report.json"),
              encoding="utf-8") as fh:
        vae_doc = json.load(fh)

    class _Report:
        train_months = tuple(vae_doc["train_months"])

    outputs = []
    for target in _targets(cfg, target_flag):
        model_path = cfg.workdir / f"model_{target}.json"
        model = load_model(_require_artifact(cfg, model_path))
        artifacts = _FileArtifacts(
            vae_report=_Report(),
            global_model=global_model,
            target_models={target: model},
            examples=examples,
        )
        report = run_backtest(artifacts, plan, target)
        pred_path = cfg.workdir / f"predictions_{target}.csv"
        predictions_to_csv(report, pred_path)
        json_path = cfg.workdir / f"backtest_{target}.json"
        with open(json_path, "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
        outputs.extend([pred_path, json_path])
    return outputs


def _stage_report(cfg: RunConfig, target_flag: str | None,
                  period: str | None) -> list[Path]:
    outputs = []
    for target in _targets(cfg, target_flag):
        json_path = cfg.workdir / f"backtest_{target}.json"
        if not json_path.exists():
            raise MissingArtifactError(
                f"missing artifact {json_path}; run `backtest` first"
            )
        with open(json_path, encoding="utf-8") as fh:
            doc = json.load(fh)
        periods = {
            name: {
                who: MetricsRow(**{k: row[k] for k in
                                   ("acc", "f1_macro", "mcc", "tp", "fp",
                                    "tn", "fn")})
                for who, row in rows.items()
            }
            for name, rows in doc["periods"].items()
        }
        if period is not None:
            if period not in periods:
                raise ValidationError(
                    f"unknown period '{period}'; have {sorted(periods)}"
                )
            periods = {period: periods[period]}
        report = BacktestReport(
            target=doc["target"], periods=periods,
            months=np.array(doc["months"]),
            prob_up=np.array(doc["prob_up"]),
            pred=np.array(doc["pred"]), y_true=np.array(doc["y_true"]),
        )
        text = report.to_text()
        sys.stdout.write(text)
        out = cfg.workdir / f"report_{target}.txt"
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
        outputs.append(out)
    return outputs


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="indexcast",
        description="Monthly index-direction prediction pipeline",
    )
    sub = parser.add_subparsers(dest="stage", required=True)
    stages = [
        ("synth", "generate a seeded synthetic dataset"),
        ("label", "segment each price series into regimes"),
        ("features", "assemble month-end node features and labels"),
        ("train-vae", "fit the shared embedding model"),
        ("embed", "encode features into node embeddings"),
        ("train-global", "fit the pooled classifier"),
        ("fine-tune", "continue boosting on the target index"),
        ("backtest", "score the target over the test range"),
        ("report", "render backtest metrics as a table"),
    ]
    for name, help_text in stages:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="run-config YAML path")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        if name in ("fine-tune", "backtest", "report"):
            p.add_argument("--target", default=None,
                           help="target index id (default: config targets)")
        if name == "report":
            p.add_argument("--period", default=None,
                           help="restrict the report to one named period")
    return parser


def _dispatch(args) -> list[Path]:
    cfg = load_run_config(args.config, seed_override=args.seed)
    cfg.workdir.mkdir(parents=True, exist_ok=True)
    stage = args.stage
    if stage == "synth":
        inputs, outputs = [], _stage_synth(cfg)
    elif stage == "label":
        outputs = _stage_label(cfg)
        inputs = [cfg.paths["prices"]]
    elif stage == "features":
        outputs = _stage_features(cfg)
        inputs = [cfg.paths["prices"], cfg.paths["drivers"], cfg.paths["graph"]]
    elif stage == "train-vae":
        outputs = _stage_train_vae(cfg)
        inputs = [cfg.workdir / "features.npz"]
    elif stage == "embed":
        outputs = _stage_embed(cfg)
        inputs = [cfg.workdir / "features.npz", cfg.workdir / "vae.npz"]
    elif stage == "train-global":
        outputs = _stage_train_global(cfg)
        inputs = [cfg.workdir / "embeddings.npz", cfg.workdir / "labels.csv"]
    elif stage == "fine-tune":
        outputs = _stage_fine_tune(cfg, args.target)
        inputs = [cfg.workdir / "embeddings.npz",
                  cfg.workdir / "model_global.json"]
    elif stage == "backtest":
        outputs = _stage_backtest(cfg, args.target)
        inputs = [cfg.workdir / "embeddings.npz",
                  cfg.workdir / "model_global.json"]
    elif stage == "report":
        outputs = _stage_report(cfg, args.target, args.period)
        inputs = []
    else:  # pragma: no cover - argparse restricts choices
        raise ValidationError(f"unknown stage '{stage}'")
    _write_manifest(cfg, stage, [p for p in inputs if p.exists()], outputs)
    return outputs


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        outputs = _dispatch(args)
    except ProtocolError as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return 4
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    for path in outputs:
        print(f"wrote {path}")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
