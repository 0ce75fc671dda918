"""Pipeline entry point: gen-data -> train -> dissect -> serve / report.

Every subcommand is deterministic given its flags and seeds (serve excepted),
and each stage consumes the previous stage's outputs verbatim. Flags can also
come from a JSON --config file; explicit flags win. Exit codes: 0 success,
1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import json
import os
import sys

import click
import numpy as np

from . import data as data_mod
from . import dissect as dissect_mod
from . import train as train_mod
from .annotations import format_report_table, compute_report, load_annotation_log
from .errors import UnitscopeError, ValidationError
from .lexicon import default_lexicon_path, load_lexicon
from .model import load_model_files, save_model_files


def _merge_config(ctx: click.Context, config_path, values: dict) -> dict:
    """Fills in values the user did not pass explicitly from a JSON config."""
    if not config_path:
        return values
    try:
        with open(config_path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"config {config_path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ValidationError(f"config {config_path}: must be a JSON object")
    merged = dict(values)
    for key, value in doc.items():
        if key in merged and ctx.get_parameter_source(key) == click.core.ParameterSource.DEFAULT:
            merged[key] = value
    return merged


def _require(value, flag: str):
    if value is None:
        raise ValidationError(f"missing required option {flag} (flag or config)")
    return value


@click.group()
def cli():
    """Train a small patch classifier, dissect its units, and run the survey."""


@cli.command("gen-data")
@click.option("--config", type=str, default=None, help="JSON file with defaults for any flag.")
@click.option("--out", type=str, default=None, help="Output corpus directory.")
@click.option("--cases", type=int, default=None, help="Number of cases to generate.")
@click.option("--positive-frac", type=float, default=0.5, show_default=True)
@click.option("--seed", type=int, default=7, show_default=True)
@click.pass_context
def gen_data(ctx, config, **values):
    """Generate a deterministic synthetic case corpus with an index file."""
    v = _merge_config(ctx, config, values)
    out = _require(v["out"], "--out")
    cases = _require(v["cases"], "--cases")
    positive_frac = float(v["positive_frac"])
    seed = int(v["seed"])
    if cases < 1:
        raise ValidationError(f"--cases must be >= 1, got {cases}")
    if not 0.0 <= positive_frac <= 1.0:
        raise ValidationError(f"--positive-frac must be in [0,1], got {positive_frac}")
    try:
        os.makedirs(out, exist_ok=True)
    except OSError as exc:
        raise ValidationError(f"output directory {out!r} is not writable: {exc}") from exc

    n_pos = round(cases * positive_frac)
    rng = np.random.default_rng(seed)
    positive_idx = set(rng.permutation(cases)[:n_pos].tolist())
    records = []
    for i in range(cases):
        case = data_mod.generate_synthetic_case(
            [seed, i],
            positive=i in positive_idx,
            case_id=f"c{i:05d}",
            patient_id=f"p{i // 2:04d}",
        )
        records.append(data_mod.save_case(case, out))
    index_path = os.path.join(out, "index.jsonl")
    data_mod.write_case_index(records, index_path)
    with open(os.path.join(out, "run.json"), "w", encoding="utf-8") as fh:
        json.dump(
            {"command": "gen-data", "seed": seed, "cases": cases,
             "positive_frac": positive_frac, "positive_cases": n_pos},
            fh, indent=2,
        )
        fh.write("\n")
    click.echo(f"seed: {seed}")
    click.echo(f"wrote {cases} cases ({n_pos} positive) to {out}")
    click.echo(f"index: {index_path}")


def _load_split_patches(index, split_seed, window_frac, stride_frac, input_size,
                        splits=("train", "val", "test")):
    cases = data_mod.load_cases_from_index(index)
    split = data_mod.split_dataset(cases, split_seed)
    by_split = {}
    for name in splits:
        subset = split.cases_in(cases, name)
        patches = []
        for case in subset:
            patches.extend(
                data_mod.extract_patches(case, window_frac, stride_frac, input_size)
            )
        by_split[name] = patches
    return cases, split, by_split


@cli.command("train")
@click.option("--config", type=str, default=None)
@click.option("--index", type=str, default=None, help="Case index file from gen-data.")
@click.option("--out-model", type=str, default=None,
              help="Output model base path (writes <base>.netm and <base>.netw).")
@click.option("--seed", type=int, default=1, show_default=True,
              help="Seed for weight init and batch shuffling.")
@click.option("--split-seed", type=int, default=13, show_default=True)
@click.option("--lr", type=float, default=1e-4, show_default=True)
@click.option("--momentum", type=float, default=0.9, show_default=True)
@click.option("--weight-decay", type=float, default=1e-4, show_default=True)
@click.option("--epochs", type=int, default=10, show_default=True)
@click.option("--batch-size", type=int, default=32, show_default=True)
@click.option("--window-frac", type=float, default=data_mod.WINDOW_FRAC, show_default=True)
@click.option("--stride-frac", type=float, default=data_mod.STRIDE_FRAC, show_default=True)
@click.option("--input-size", type=int, default=data_mod.NETWORK_INPUT_SIZE, show_default=True)
@click.option("--metrics", type=str, default=None,
              help="Metrics file path (default: <out-model>.metrics.jsonl).")
@click.pass_context
def train_cmd(ctx, config, **values):
    """Train the small dissectable network on extracted patches."""
    v = _merge_config(ctx, config, values)
    index = _require(v["index"], "--index")
    out_model = _require(v["out_model"], "--out-model")
    cfg = train_mod.TrainConfig(
        learning_rate=float(v["lr"]),
        momentum=float(v["momentum"]),
        weight_decay=float(v["weight_decay"]),
        epochs=int(v["epochs"]),
        batch_size=int(v["batch_size"]),
        rng_seed=int(v["seed"]),
    )
    _, _, patches = _load_split_patches(
        index, int(v["split_seed"]), float(v["window_frac"]), float(v["stride_frac"]),
        int(v["input_size"]), splits=("train", "val"),
    )
    train_patches = patches["train"]
    val_patches = patches["val"]
    click.echo(f"seed: {cfg.rng_seed}  split-seed: {v['split_seed']}")
    click.echo(
        f"patches: train {len(train_patches)} "
        f"({sum(p.label for p in train_patches)} positive), val {len(val_patches)}"
    )
    model = train_mod.build_dissectnet_t(cfg.rng_seed)
    trained, curve = train_mod.train(model, train_patches, cfg, val_patches=val_patches)
    manifest_path, blob_path = save_model_files(trained, out_model)
    metrics_path = v["metrics"] or f"{out_model}.metrics.jsonl"
    train_mod.write_metrics(curve, metrics_path)
    for stats in curve:
        auc_txt = f"{stats.val_auc:.4f}" if stats.val_auc is not None else "n/a"
        click.echo(f"epoch {stats.epoch}: mean_loss {stats.mean_loss:.5f}  val_auc {auc_txt}")
    final_auc = None
    try:
        final_auc = train_mod.evaluate_model(trained, val_patches).auc if val_patches else None
    except ValidationError:
        pass
    if final_auc is not None:
        click.echo(f"final validation AUC: {final_auc:.4f}")
    else:
        click.echo("final validation AUC: unavailable (degenerate validation split)")
    click.echo(f"model: {manifest_path} + {blob_path}")
    click.echo(f"metrics: {metrics_path}")


@cli.command("dissect")
@click.option("--config", type=str, default=None)
@click.option("--model", "model_base", type=str, default=None,
              help="Model base path (reads <base>.netm and <base>.netw).")
@click.option("--index", type=str, default=None)
@click.option("--layer", type=str, default=train_mod.DISSECT_LAYER_DEFAULT, show_default=True)
@click.option("--k", type=int, default=dissect_mod.DEFAULT_K, show_default=True)
@click.option("--quantile", type=float, default=dissect_mod.DEFAULT_QUANTILE, show_default=True)
@click.option("--out", type=str, default=None, help="Catalog output directory.")
@click.option("--split", type=click.Choice(["train", "val", "test", "all"]), default="val",
              show_default=True)
@click.option("--split-seed", type=int, default=13, show_default=True)
@click.option("--survey-n", type=int, default=0, show_default=True,
              help="Units in the survey selection (0 = all units).")
@click.option("--survey-seed", type=int, default=5, show_default=True)
@click.option("--window-frac", type=float, default=data_mod.WINDOW_FRAC, show_default=True)
@click.option("--stride-frac", type=float, default=data_mod.STRIDE_FRAC, show_default=True)
@click.option("--input-size", type=int, default=data_mod.NETWORK_INPUT_SIZE, show_default=True)
@click.option("--spatial-stats", is_flag=True, default=False,
              help="Threshold on all spatial activations instead of per-patch maxima.")
@click.pass_context
def dissect_cmd(ctx, config, **values):
    """Probe a conv layer's units and write the catalog plus montages."""
    v = _merge_config(ctx, config, values)
    model_base = _require(v["model_base"], "--model")
    index = _require(v["index"], "--index")
    out = _require(v["out"], "--out")
    if model_base.endswith(".netm") or model_base.endswith(".netw"):
        model_base = model_base[:-5]
    model = load_model_files(model_base)
    wanted = ("train", "val", "test") if v["split"] == "all" else (v["split"],)
    cases, _, patches_by_split = _load_split_patches(
        index, int(v["split_seed"]), float(v["window_frac"]), float(v["stride_frac"]),
        int(v["input_size"]), splits=wanted,
    )
    patches = [p for name in wanted for p in patches_by_split[name]]
    if not patches:
        raise ValidationError(f"split {v['split']!r} contains no patches")

    catalog = dissect_mod.probe(
        model, v["layer"], patches, k=int(v["k"]), quantile=float(v["quantile"]),
        spatial_stats=bool(v["spatial_stats"]),
    )
    catalog.model_id = os.path.basename(model_base)
    labels = {p.patch_id: p.label for p in patches}
    ranked = dissect_mod.rank_units(catalog, labels)
    survey_n = int(v["survey_n"]) or len(ranked)
    catalog.survey_units = dissect_mod.select_survey_units(ranked, survey_n, int(v["survey_seed"]))

    os.makedirs(out, exist_ok=True)
    patches_by_id = {p.patch_id: p for p in patches}
    cases_by_id = {c.case_id: c for c in cases}
    dissect_mod.write_catalog_dir(
        catalog, patches_by_id, cases_by_id, out,
        extra={
            "split": v["split"],
            "split_seed": int(v["split_seed"]),
            "survey_seed": int(v["survey_seed"]),
            "survey_n": survey_n,
        },
    )
    click.echo(f"split: {v['split']}  split-seed: {v['split_seed']}  survey-seed: {v['survey_seed']}")
    click.echo(
        f"dissected layer {v['layer']} of {catalog.model_id}: {len(catalog.units)} units, "
        f"k={v['k']}, q={v['quantile']}, {len(patches)} patches"
    )
    click.echo(f"catalog: {os.path.join(out, dissect_mod.CATALOG_FILENAME)}")


@cli.command("serve")
@click.option("--config", type=str, default=None)
@click.option("--catalog", type=str, default=None, help="Catalog directory from dissect.")
@click.option("--log", "log_path", type=str, default=None, help="Annotation log file.")
@click.option("--lexicon", "lexicon_path", type=str, default=None,
              help=f"Lexicon file (default: packaged {os.path.basename(default_lexicon_path())}).")
@click.option("--port", type=int, default=8765, show_default=True)
@click.option("--host", type=str, default="127.0.0.1", show_default=True)
@click.option("--ui", "ui_dir", type=str, default=None,
              help="Directory with the built survey frontend to serve at /.")
@click.pass_context
def serve_cmd(ctx, config, **values):
    """Run the survey annotation service."""
    import uvicorn

    from .service import create_app

    v = _merge_config(ctx, config, values)
    catalog = _require(v["catalog"], "--catalog")
    log_path = _require(v["log_path"], "--log")
    lexicon_path = v["lexicon_path"] or default_lexicon_path()
    load_lexicon(lexicon_path)  # refuse to start on a missing/invalid lexicon
    app = create_app(catalog_dir=catalog, log_path=log_path, lexicon_path=lexicon_path,
                     ui_dir=v["ui_dir"])
    click.echo(f"serving catalog {catalog} on http://{v['host']}:{v['port']}")
    uvicorn.run(app, host=v["host"], port=int(v["port"]), log_level="warning")


@cli.command("report")
@click.option("--config", type=str, default=None)
@click.option("--log", "log_path", type=str, default=None)
@click.option("--lexicon", "lexicon_path", type=str, default=None)
@click.option("--out", type=str, default=None, help="Also write the report as JSON.")
@click.pass_context
def report_cmd(ctx, config, **values):
    """Offline lexicon overlap report from an annotation log."""
    v = _merge_config(ctx, config, values)
    log_path = _require(v["log_path"], "--log")
    lexicon = load_lexicon(v["lexicon_path"] or default_lexicon_path())
    annotations = load_annotation_log(log_path)
    report = compute_report(annotations, lexicon)
    click.echo(format_report_table(report), nl=False)
    if v["out"]:
        with open(v["out"], "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2)
            fh.write("\n")
        click.echo(f"report JSON: {v['out']}")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.UsageError as exc:
        click.echo(f"error: {exc.format_message()}", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except ValidationError as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except UnitscopeError as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    except KeyboardInterrupt:
        return 2
    except Exception as exc:  # runtime failure
        click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
