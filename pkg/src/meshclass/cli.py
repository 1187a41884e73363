"""Command-line entry point.

Subcommands: ``generate-data``, ``decimate``, ``train``, ``eval``,
``export-importance`` and ``report``. Configs are JSON objects; trailing
``key=value`` arguments override file values (values are parsed as JSON
when possible, dotted keys such as ``data.seed=3`` reach nested objects).

Exit codes: 0 success, 2 config error, 3 data error, 4 training divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import autodiff as ad
from .bench import RunConfig, TrainingDivergence, collect_runs, evaluate, format_table, train
from .decimation import DecimationError, build_hierarchy, decimate, save_hierarchy
from .edgenet import EdgePoolError, export_importance
from .io import MeshParseError, load_mesh, save_mesh
from .mesh import MeshError
from .models import TEMPLATE_MODELS, TemplateMismatch, build_model
from .nn import count_parameters, load_checkpoint, save_checkpoint
from .spiral import build_spirals, save_spirals
from .synth import DatasetError, SynthSpec, generate_dataset, load_dataset, save_dataset

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
SEED_ENV = "MESHCLASS_SEED"


class ConfigError(ValueError):
    pass


class DataError(RuntimeError):
    pass


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(items):
    """``["a=1", "data.seed=2"]`` -> ``{"a": 1, "data": {"seed": 2}}``."""
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not key=value")
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} conflicts with an earlier one")
        node[parts[-1]] = _parse_value(value)
    return out


def _merge(base, extra):
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def read_config(path):
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return data


def _seed_from_env(cfg):
    if "seed" not in cfg and os.environ.get(SEED_ENV):
        try:
            cfg["seed"] = int(os.environ[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer") from exc
    return cfg


def synth_spec(cfg):
    try:
        return SynthSpec.from_dict(cfg)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"dataset config: {exc}") from exc


def run_config(cfg):
    try:
        cfg = dict(cfg)
        model = cfg.pop("model", None)
        if model is None:
            raise ConfigError("no model given (use --model or a 'model' key)")
        return RunConfig.for_model(model, **{k: v for k, v in cfg.items() if k != "provenance"})
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"run config: {exc}") from exc


def _dataset_for(config):
    if config.dataset:
        try:
            return load_dataset(config.dataset)
        except (DatasetError, OSError, MeshError, MeshParseError) as exc:
            raise DataError(str(exc)) from exc
    return generate_dataset(synth_spec(config.data))


def _model_for(config, dataset):
    template = dataset.template if config.model in TEMPLATE_MODELS else None
    try:
        return build_model(config, template)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, TemplateMismatch):
            raise DataError(str(exc)) from exc
        raise ConfigError(f"cannot build {config.model}: {exc}") from exc


def _untimed(metrics):
    return {k: v for k, v in metrics.items() if k != "epoch_time"}


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate_data(args):
    cfg = _seed_from_env(_merge(read_config(args.config), parse_overrides(args.overrides)))
    spec = synth_spec(cfg)
    ds = generate_dataset(spec)
    manifest = save_dataset(ds, args.out)
    print(f"wrote {len(ds.train)} train / {len(ds.test)} test samples to {manifest}")
    return EXIT_OK


def cmd_decimate(args):
    cfg = _merge(read_config(args.config), parse_overrides(args.overrides))
    unknown = set(cfg) - {"target", "factors", "spiral_length"}
    if unknown:
        raise ConfigError(f"unknown decimate keys {sorted(unknown)}")
    if ("target" in cfg) == ("factors" in cfg):
        raise ConfigError("give exactly one of target=<vertices> or factors=[...]")
    try:
        mesh = load_mesh(args.input)
    except (OSError, MeshParseError, MeshError) as exc:
        raise DataError(str(exc)) from exc
    out = Path(args.out)
    try:
        if "target" in cfg:
            coarse, down = decimate(mesh, int(cfg["target"]))
            out.parent.mkdir(parents=True, exist_ok=True)
            save_mesh(coarse, out)
            print(f"{mesh.n_vertices} -> {coarse.n_vertices} vertices, wrote {out}")
        else:
            hier = build_hierarchy(mesh, [float(f) for f in cfg["factors"]])
            save_hierarchy(hier, out)
            if "spiral_length" in cfg:
                for k, level in enumerate(hier.levels):
                    save_spirals(build_spirals(level, int(cfg["spiral_length"])), out / f"spiral_{k}.txt")
            sizes = " -> ".join(str(m.n_vertices) for m in hier.levels)
            print(f"hierarchy {sizes}, wrote {out}")
    except DecimationError as exc:
        raise DataError(str(exc)) from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return EXIT_OK


def cmd_train(args):
    cfg = read_config(args.config)
    if args.model:
        cfg["model"] = args.model
    if args.data:
        cfg["dataset"] = str(Path(args.data).resolve())
    cfg = _seed_from_env(_merge(cfg, parse_overrides(args.overrides)))
    config = run_config(cfg)
    dataset = _dataset_for(config)
    model = _model_for(config, dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", config.to_dict())
    try:
        model, history = train(model, dataset, config, log=None if args.quiet else print)
    except TemplateMismatch as exc:
        raise DataError(str(exc)) from exc
    save_checkpoint(model, out / "checkpoint.bin")
    # wall times go to their own file so metrics.json is reproducible
    timing = [h["train"]["epoch_time"] for h in history if h["epoch"] > 0]
    history = [
        {**h, "train": _untimed(h["train"]), "test": _untimed(h["test"])} for h in history
    ]
    _write_json(out / "timing.json", {"model": config.model, "epoch_times": timing})
    metrics = {
        "model": config.model,
        "n_params": count_parameters(model),
        "history": history,
        # full passes over both splits, which `eval` reproduces exactly
        "final": {
            "train": evaluate(model, dataset.train).to_dict(),
            "test": evaluate(model, dataset.test).to_dict(),
        },
    }
    _write_json(out / "metrics.json", metrics)
    test = metrics["final"]["test"]
    print(f"{config.model}: test acc {test['accuracy']:.3f} prec {test['precision']:.2f} "
          f"rec {test['recall']:.2f} ({metrics['n_params']} params) -> {out}")
    return EXIT_OK


def load_run(run_dir):
    """Rebuild the model of a run directory with its trained weights.

    Returns
    -------
    config : RunConfig
    model : Module
    dataset : Dataset
    """
    run = Path(run_dir)
    config = run_config(read_config(run / "config.json"))
    dataset = _dataset_for(config)
    model = _model_for(config, dataset)
    try:
        load_checkpoint(model, run / "checkpoint.bin")
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot load checkpoint from {run}: {exc}") from exc
    return config, model, dataset


def cmd_eval(args):
    config, model, dataset = load_run(args.run)
    result = {
        "model": config.model,
        "train": evaluate(model, dataset.train).to_dict(),
        "test": evaluate(model, dataset.test).to_dict(),
    }
    _write_json(Path(args.run) / "eval.json", result)
    print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_export_importance(args):
    config, model, dataset = load_run(args.run)
    if config.model != "meshcnn":
        raise ConfigError("export-importance needs a meshcnn run")
    samples = dataset.test if args.split == "test" else dataset.train
    if args.limit is not None:
        samples = samples[: args.limit]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with ad.no_grad():
        for s in samples:
            model.forward(model.collate([model.encode(s)]))
            path = out / f"{s.index}_{s.label}.edgeattr"
            export_importance(model.last_meshes[0], path)
    print(f"wrote {len(samples)} edge-importance files to {out}")
    return EXIT_OK


def cmd_report(args):
    rows = collect_runs(args.runs)
    if not rows:
        raise DataError(f"no */metrics.json under {args.runs}")
    print(format_table(rows))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="meshclass", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write a synthetic dataset directory")
    p.add_argument("--config", help="JSON dataset spec")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("overrides", nargs="*", metavar="key=value")
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("decimate", help="QEM-decimate a mesh or build a pooling hierarchy")
    p.add_argument("--input", required=True, help="OFF/OBJ/PLY mesh")
    p.add_argument("--config", help="JSON with 'target' or 'factors'")
    p.add_argument("--out", required=True, help="output mesh (target) or directory (factors)")
    p.add_argument("overrides", nargs="*", metavar="key=value")
    p.set_defaults(func=cmd_decimate)

    p = sub.add_parser("train", help="train one model and write a run directory")
    p.add_argument("--model", help="come, spiralnet, meshcnn, meshnet or pointnet")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--data", help="dataset directory (default: generate from the 'data' spec)")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--quiet", action="store_true", help="no per-epoch log")
    p.add_argument("overrides", nargs="*", metavar="key=value")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="re-evaluate a run directory")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-importance", help="write per-edge pooling magnitudes of a meshcnn run")
    p.add_argument("--run", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_export_importance)

    p = sub.add_parser("report", help="results table over run directories")
    p.add_argument("--runs", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, EdgePoolError) as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergence as exc:
        print(f"error: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
