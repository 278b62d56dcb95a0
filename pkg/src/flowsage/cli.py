"""Pipeline orchestration: synth, train, explain, eval-xai, report.

Every command resolves a JSON config (defaults <- config file <- flags,
flags winning), stamps artifacts with (format version, config hash, seed),
and writes a run manifest sufficient to reproduce every numeric output
bit-exactly. Exit codes: 0 success, 1 usage, 2 data error, 3 numeric
failure.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__, detect, dgi, explain, synthgen, xaieval
from .egsage import edge_embedding_matrix, encode_nodes, save_embeddings
from .errors import DataError, NumericError, SchemaError
from .flowdata import FeatureScaler, FlowSchema, apply_scaler, fit_scaler, parse_csv, split
from .netgraph import build_graph, load_graph, save_graph

CONFIG_ENV_VAR = "FLOWSAGE_CONFIG"

DEFAULT_CONFIG: dict = {
    "data": {
        "csv": None,
        "ground_truth": None,
        "src_column": "src",
        "dst_column": "dst",
        "src_port_column": None,
        "dst_port_column": None,
        "label_column": "Label",
        "benign_label": "Benign",
        "numeric_columns": None,
        "categorical_columns": None,
        "train_fraction": 0.7,
        "split_seed": 7,
    },
    "synth": {
        "preset": "bot-infiltration",
        "n_flows": 20000,
        "n_hosts": 0,
        "seed": 0,
    },
    "encoder": {"hidden": 256, "depth": 1, "sample_size": 0},
    "dgi": {"epochs": 100, "learning_rate": 0.001, "seed": 0},
    "gbdt": {
        "n_trees": 200,
        "learning_rate": 0.1,
        "max_depth": 8,
        "min_samples_split": 4,
        "min_samples_leaf": 4,
        "n_bins": 255,
        "l2_reg": 1.0,
        "ordered": False,
        "seed": 0,
    },
    "surrogate": {"epochs": 400, "learning_rate": 0.05, "gate": 0.1},
    "explain": {
        "hidden": 64,
        "tau_start": 5.0,
        "tau_end": 1.0,
        "size_coeff": 0.01,
        "entropy_coeff": 0.1,
        "epochs": 30,
        "learning_rate": 0.001,
        "train_targets": 150,
        "seed": 0,
        "sparsity": 0.7,
        "gnne_steps": 300,
        "gnne_learning_rate": 0.05,
        "gnne_size_coeff": 0.05,
        "gnne_entropy_coeff": 0.1,
    },
    "xai": {
        "levels": [0.5, 0.6, 0.7, 0.8, 0.9],
        "eval_targets": 150,
        "targets_per_class": 25,
        "seed": 0,
        "include_random": False,
    },
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise SchemaError(f"unknown config key '{where}'")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path: str | None, overrides: dict | None = None) -> dict:
    """Resolve defaults <- file <- overrides; rejects unknown keys.

    ``path`` may be a config file or a run manifest (reruns reuse the
    manifest's embedded config verbatim).
    """
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR) or None
    if path is not None:
        doc = json.loads(Path(path).read_text())
        if "flowsage_manifest" in doc:
            doc = doc["config"]
        cfg = _merge(cfg, doc)
    if overrides:
        cfg = _merge(cfg, overrides)
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()[:16]


def write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def write_manifest(out_dir: Path, command: str, cfg: dict, extra: dict | None = None) -> None:
    doc = {
        "flowsage_manifest": 1,
        "command": command,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "versions": {
            "flowsage": __version__,
            "numpy": np.__version__,
            "python": ".".join(map(str, sys.version_info[:3])),
        },
    }
    if extra:
        doc.update(extra)
    write_json(out_dir / f"{command}_manifest.json", doc)


def schema_from_config(data_cfg: dict) -> FlowSchema:
    numeric = data_cfg["numeric_columns"]
    categorical = data_cfg["categorical_columns"]
    if numeric is None:
        base = synthgen.synth_schema()
        numeric = list(base.numeric)
        if categorical is None:
            categorical = dict(base.categorical)
    return FlowSchema(
        numeric=list(numeric),
        categorical=dict(categorical or {}),
        src=data_cfg["src_column"],
        dst=data_cfg["dst_column"],
        src_port=data_cfg["src_port_column"],
        dst_port=data_cfg["dst_port_column"],
        label=data_cfg["label_column"],
        benign_label=data_cfg["benign_label"],
    )


class _Stage:
    """Marks the output directory stale when a stage dies mid-write."""

    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.name = "start"

    def __call__(self, name: str) -> None:
        self.name = name

    def fail(self, exc: Exception) -> None:
        try:
            (self.out_dir / "STALE").write_text(
                f"stage '{self.name}' failed: {exc}\nartifacts may be incomplete\n"
            )
        except OSError:
            pass


@click.group()
def cli() -> None:
    """Flow-graph intrusion detection with explainable edge embeddings."""


@cli.command()
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--out-dir", type=click.Path(), required=True)
@click.option("--preset", default=None, help="Scenario preset name.")
@click.option("--n-flows", type=int, default=None)
@click.option("--seed", type=int, default=None)
def synth(config_path, out_dir, preset, n_flows, seed):
    """Generate a labeled synthetic dataset plus ground-truth sidecar."""
    overrides: dict = {"synth": {}}
    if preset is not None:
        overrides["synth"]["preset"] = preset
    if n_flows is not None:
        overrides["synth"]["n_flows"] = n_flows
    if seed is not None:
        overrides["synth"]["seed"] = seed
    cfg = load_config(config_path, overrides)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    scfg = synthgen.preset_scenario(
        cfg["synth"]["preset"],
        n_flows=cfg["synth"]["n_flows"],
        seed=cfg["synth"]["seed"],
        n_hosts=cfg["synth"]["n_hosts"] or None,
    )
    dataset, truth = synthgen.generate(scfg)
    synthgen.write_scenario(dataset, truth, out / "flows.csv", out / "ground_truth.json")
    write_manifest(out, "synth", cfg, {"n_flows": len(dataset)})
    click.echo(f"wrote {out / 'flows.csv'} ({len(dataset)} flows)")


def _load_and_split(cfg: dict, data_csv: str):
    schema = schema_from_config(cfg["data"])
    dataset = parse_csv(data_csv, schema)
    train, test = split(
        dataset, cfg["data"]["train_fraction"], cfg["data"]["split_seed"]
    )
    return dataset, train, test


@cli.command()
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--data", "data_csv", type=click.Path(), default=None)
@click.option("--out-dir", type=click.Path(), required=True)
@click.option("--dgi-epochs", type=int, default=None)
@click.option("--gbdt-trees", type=int, default=None)
@click.option("--hidden", type=int, default=None)
@click.option("--seed", type=int, default=None, help="DGI training seed.")
def train(config_path, data_csv, out_dir, dgi_epochs, gbdt_trees, hidden, seed):
    """Split, scale, build the flow graph, train DGI, embed, fit GBDT."""
    overrides: dict = {"dgi": {}, "gbdt": {}, "encoder": {}, "data": {}}
    if dgi_epochs is not None:
        overrides["dgi"]["epochs"] = dgi_epochs
    if gbdt_trees is not None:
        overrides["gbdt"]["n_trees"] = gbdt_trees
    if hidden is not None:
        overrides["encoder"]["hidden"] = hidden
    if seed is not None:
        overrides["dgi"]["seed"] = seed
    if data_csv is not None:
        overrides["data"]["csv"] = str(data_csv)
    cfg = load_config(config_path, overrides)
    if not cfg["data"]["csv"]:
        raise click.UsageError("no dataset: pass --data or set data.csv in the config")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stale = out / "STALE"
    if stale.exists():
        stale.unlink()
    stage = _Stage(out)
    chash = config_hash(cfg)
    stamp = {"config_hash": chash, "seed": cfg["dgi"]["seed"]}

    try:
        stage("parse+split")
        dataset, train_ds, test_ds = _load_and_split(cfg, cfg["data"]["csv"])

        stage("scale")
        scaler = fit_scaler(train_ds)
        scaler.save(out / "scaler.json", extra=stamp)
        full_scaled = apply_scaler(scaler, dataset)

        stage("build_graph")
        graph = build_graph(full_scaled)
        save_graph(graph, out / "graph.bin", meta=stamp)

        stage("dgi_train")
        dcfg = dgi.DgiConfig(
            epochs=cfg["dgi"]["epochs"],
            learning_rate=cfg["dgi"]["learning_rate"],
            seed=cfg["dgi"]["seed"],
            hidden=cfg["encoder"]["hidden"],
            depth=cfg["encoder"]["depth"],
            sample_size=cfg["encoder"]["sample_size"],
        )
        model = dgi.train(graph, dcfg)
        dgi.save_model(model, out / "dgi_model.bin", meta=stamp)
        with (out / "dgi_loss.csv").open("w", encoding="utf-8") as fh:
            fh.write("epoch,loss\n")
            for i, loss in enumerate(model.loss_history):
                fh.write(f"{i},{loss!r}\n")

        stage("encode")
        encode_epoch = dcfg.epochs
        z = encode_nodes(graph, model.encoder, dcfg.seed, encode_epoch)
        embeddings = edge_embedding_matrix(graph, z)
        row_of = graph.flow_index()
        train_rows = np.array([row_of[r.flow_id] for r in train_ds.records])
        test_rows = np.array([row_of[r.flow_id] for r in test_ds.records])
        emb_meta = dict(stamp, encode_epoch=encode_epoch)
        save_embeddings(
            out / "embeddings_train.bin",
            graph.flow_ids[train_rows],
            embeddings[train_rows],
            meta=emb_meta,
        )
        save_embeddings(
            out / "embeddings_test.bin",
            graph.flow_ids[test_rows],
            embeddings[test_rows],
            meta=emb_meta,
        )

        stage("gbdt_fit")
        labels = graph.binary_labels()
        gparams = detect.GbdtParams(
            n_trees=cfg["gbdt"]["n_trees"],
            learning_rate=cfg["gbdt"]["learning_rate"],
            max_depth=cfg["gbdt"]["max_depth"],
            min_samples_split=cfg["gbdt"]["min_samples_split"],
            min_samples_leaf=cfg["gbdt"]["min_samples_leaf"],
            n_bins=cfg["gbdt"]["n_bins"],
            l2_reg=cfg["gbdt"]["l2_reg"],
            ordered=cfg["gbdt"]["ordered"],
        )
        gbdt_model = detect.fit_gbdt(
            embeddings[train_rows], labels[train_rows], gparams, seed=cfg["gbdt"]["seed"]
        )
        detect.save_gbdt(gbdt_model, out / "gbdt_model.bin", meta=stamp)

        stage("evaluate")
        report = {"config_hash": chash, "seed": cfg["dgi"]["seed"],
                  "encode_epoch": encode_epoch, "format_version": 1}
        for name, rows in (("train", train_rows), ("test", test_rows)):
            preds = detect.predict(gbdt_model, embeddings[rows])
            report[name] = detect.evaluate(preds, labels[rows]).to_dict()
        write_json(out / "metrics.json", report)
        write_manifest(out, "train", cfg, {"encode_epoch": encode_epoch})
    except Exception as exc:
        stage.fail(exc)
        raise

    m = report["test"]
    click.echo(
        f"test f1_macro={m['f1_macro']:.4f} accuracy={m['accuracy']:.4f} "
        f"detection_rate={m['detection_rate']:.4f}"
    )


def _load_run(run_dir: Path):
    graph = load_graph(run_dir / "graph.bin")
    model = dgi.load_model(run_dir / "dgi_model.bin")
    gbdt_model = detect.load_gbdt(run_dir / "gbdt_model.bin")
    manifest = json.loads((run_dir / "train_manifest.json").read_text())
    return graph, model, gbdt_model, manifest


def _prepare_explainers(run_dir: Path, cfg: dict):
    """Rebuild the frozen pipeline, distill the surrogate, train the shared net."""
    graph, model, gbdt_model, manifest = _load_run(run_dir)
    encode_epoch = manifest["encode_epoch"]
    seed = manifest["config"]["dgi"]["seed"]

    from .egsage import load_embeddings

    _, train_ids, train_emb = load_embeddings(run_dir / "embeddings_train.bin")
    _, test_ids, test_emb = load_embeddings(run_dir / "embeddings_test.bin")

    gbdt_probs = detect.predict_proba(gbdt_model, train_emb)
    surrogate = explain.fit_surrogate(
        train_emb,
        gbdt_probs,
        epochs=cfg["surrogate"]["epochs"],
        learning_rate=cfg["surrogate"]["learning_rate"],
        gate=cfg["surrogate"]["gate"],
    )
    ctx = explain.make_context(graph, model.encoder, surrogate, seed, encode_epoch)
    econf = explain.ExplainerConfig(
        hidden=cfg["explain"]["hidden"],
        tau_start=cfg["explain"]["tau_start"],
        tau_end=cfg["explain"]["tau_end"],
        size_coeff=cfg["explain"]["size_coeff"],
        entropy_coeff=cfg["explain"]["entropy_coeff"],
        epochs=cfg["explain"]["epochs"],
        learning_rate=cfg["explain"]["learning_rate"],
        train_targets=cfg["explain"]["train_targets"],
        seed=cfg["explain"]["seed"],
    )
    # the shared net trains on train-split instances; explaining test
    # instances afterwards exercises its inductive reuse
    row_of = graph.flow_index()
    train_rows = np.array(sorted(row_of[int(f)] for f in train_ids))
    test_rows = np.array(sorted(row_of[int(f)] for f in test_ids))
    rng = np.random.default_rng([econf.seed, 661])
    pool = train_rows
    take = min(econf.train_targets, pool.size)
    targets = np.sort(rng.choice(pool, size=take, replace=False))
    net = explain.train_pgexplainer(ctx, econf, targets=targets)
    gconf = explain.GnnExplainerConfig(
        steps=cfg["explain"]["gnne_steps"],
        learning_rate=cfg["explain"]["gnne_learning_rate"],
        size_coeff=cfg["explain"]["gnne_size_coeff"],
        entropy_coeff=cfg["explain"]["gnne_entropy_coeff"],
    )
    return graph, model, gbdt_model, surrogate, ctx, net, gconf, test_rows, manifest


def _class_targets(graph, rows, target_class, count, seed):
    labeled = [r for r in rows if graph.edge_labels[int(r)] == target_class]
    if not labeled:
        raise DataError(f"no test edges with class '{target_class}'")
    rng = np.random.default_rng([seed, 881])
    take = min(count, len(labeled))
    return np.sort(rng.choice(np.array(labeled), size=take, replace=False))


@cli.command("explain")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--run-dir", type=click.Path(), required=True)
@click.option("--flow-id", "flow_ids", type=int, multiple=True)
@click.option("--target-class", default=None)
@click.option("--count", type=int, default=None, help="Targets per class.")
@click.option("--sparsity", type=float, default=None)
def explain_cmd(config_path, run_dir, flow_ids, target_class, count, sparsity):
    """Explain selected flows with both explainers; write mask documents."""
    overrides: dict = {"explain": {}}
    if sparsity is not None:
        overrides["explain"]["sparsity"] = sparsity
    cfg = load_config(config_path, overrides)
    run = Path(run_dir)
    (graph, model, gbdt_model, surrogate, ctx, net, gconf, test_rows, manifest) = (
        _prepare_explainers(run, cfg)
    )
    spars = cfg["explain"]["sparsity"]

    row_of = graph.flow_index()
    if flow_ids:
        targets = []
        for fid in flow_ids:
            if fid not in row_of:
                raise DataError(f"flow_id {fid} not present in the trained graph")
            targets.append(row_of[fid])
        targets = np.array(sorted(targets))
    elif target_class is not None:
        targets = _class_targets(
            graph, test_rows, target_class,
            count or cfg["xai"]["targets_per_class"], cfg["explain"]["seed"],
        )
    else:
        raise click.UsageError("pass --flow-id or --target-class")

    out = run / "explanations"
    for name in ("pgexplainer", "gnnexplainer"):
        (out / name).mkdir(parents=True, exist_ok=True)
    for row in targets:
        row = int(row)
        fid = int(graph.flow_ids[row])
        mask_p = explain.explain_edge(net, ctx, row, spars)
        write_json(out / "pgexplainer" / f"{fid}.json", mask_p.to_document(graph))
        mask_g = explain.explain_gnnexplainer(ctx, row, spars, gconf)
        write_json(out / "gnnexplainer" / f"{fid}.json", mask_g.to_document(graph))
    write_manifest(run, "explain", cfg, {"n_targets": int(len(targets))})
    click.echo(f"wrote {2 * len(targets)} explanation documents under {out}")


@cli.command("eval-xai")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--run-dir", type=click.Path(), required=True)
@click.option("--include-random/--no-include-random", default=None)
def eval_xai(config_path, run_dir, include_random):
    """Fidelity/sparsity sweep plus per-class explanation distributions."""
    overrides: dict = {"xai": {}}
    if include_random is not None:
        overrides["xai"]["include_random"] = include_random
    cfg = load_config(config_path, overrides)
    run = Path(run_dir)
    (graph, model, gbdt_model, surrogate, ctx, net, gconf, test_rows, manifest) = (
        _prepare_explainers(run, cfg)
    )
    pipeline = xaieval.EdgePipeline(
        encoder=model.encoder,
        gbdt=gbdt_model,
        sample_seed=manifest["config"]["dgi"]["seed"],
        sample_epoch=manifest["encode_epoch"],
    )
    xcfg = cfg["xai"]
    spars = cfg["explain"]["sparsity"]
    levels = list(xcfg["levels"])

    rng = np.random.default_rng([xcfg["seed"], 551])
    take = min(xcfg["eval_targets"], test_rows.size)
    eval_targets = np.sort(rng.choice(test_rows, size=take, replace=False))

    per_explainer: dict[str, list] = {"pgexplainer": [], "gnnexplainer": []}
    for row in eval_targets:
        row = int(row)
        per_explainer["pgexplainer"].append(explain.explain_edge(net, ctx, row, spars))
        per_explainer["gnnexplainer"].append(
            explain.explain_gnnexplainer(ctx, row, spars, gconf)
        )

    global_masks = {
        name: [xaieval.combine_masks(masks, graph, spars)]
        for name, masks in per_explainer.items()
    }
    if xcfg["include_random"]:
        global_masks["random"] = [xaieval.make_random_mask(graph, xcfg["seed"], spars)]

    rows = xaieval.sweep(pipeline, [graph], global_masks, levels)
    xaieval.write_sweep_csv(rows, run / "sweep.csv")

    distributions: dict = {}
    classes = sorted(
        {graph.edge_labels[int(r)] for r in test_rows if graph.edge_labels[int(r)]}
    )
    for name in ("pgexplainer", "gnnexplainer"):
        distributions[name] = {}
        for cls in classes:
            targets = _class_targets(
                graph, test_rows, cls, xcfg["targets_per_class"], xcfg["seed"]
            )
            masks = [
                explain.explain_edge(net, ctx, int(r), spars)
                if name == "pgexplainer"
                else explain.explain_gnnexplainer(ctx, int(r), spars, gconf)
                for r in targets
            ]
            distributions[name][cls] = xaieval.class_distribution(
                masks, graph.edge_labels, cls
            )
    write_json(run / "class_distribution.json", distributions)

    summary = {
        "config_hash": config_hash(cfg),
        "sparsity_levels": levels,
        "explain_sparsity": spars,
        "n_eval_targets": int(take),
        "explainers": sorted(global_masks),
        "sweep_rows": len(rows),
    }
    write_json(run / "xai_summary.json", summary)
    write_manifest(run, "eval-xai", cfg)
    click.echo(f"wrote sweep.csv ({len(rows)} rows) and class_distribution.json")


@cli.command()
@click.option("--run-dir", type=click.Path(), required=True)
def report(run_dir):
    """Print a text summary of a run directory's artifacts."""
    run = Path(run_dir)
    metrics = run / "metrics.json"
    if not metrics.exists():
        raise DataError(f"{run}: no metrics.json (run `flowsage train` first)")
    doc = json.loads(metrics.read_text())
    click.echo(f"run {run} (config {doc['config_hash']})")
    for split_name in ("train", "test"):
        m = doc[split_name]
        click.echo(
            f"  {split_name:>5}: f1_macro={m['f1_macro']:.4f} "
            f"accuracy={m['accuracy']:.4f} detection_rate={m['detection_rate']:.4f}"
        )
    sweep_path = run / "sweep.csv"
    if sweep_path.exists():
        lines = sweep_path.read_text().strip().splitlines()[1:]
        click.echo(f"  fidelity sweep: {len(lines)} rows")
        for line in lines:
            name, level, metric, value = line.split(",")
            if metric == "f1_macro":
                click.echo(f"    {name:>12} @ {level}: fidelity+ {float(value):.4f}")
    if (run / "STALE").exists():
        click.echo("  WARNING: run is marked STALE")


def main() -> None:
    try:
        cli.main(standalone_mode=False)
    except click.exceptions.Abort:
        sys.exit(1)
    except click.ClickException as exc:
        exc.show()
        sys.exit(1)
    except (DataError, SchemaError) as exc:
        click.echo(f"data error: {exc}", err=True)
        sys.exit(2)
    except NumericError as exc:
        click.echo(f"numeric failure: {exc}", err=True)
        sys.exit(3)


if __name__ == "__main__":
    main()
