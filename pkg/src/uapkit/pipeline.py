"""Declarative run configuration and the end-to-end train -> saliency -> refine -> eval driver."""

from __future__ import annotations

import copy
import logging
import traceback
from dataclasses import fields
from pathlib import Path

import yaml

from .core import read_uapf, write_uapf
from .data import DatasetManifest, ingest, load_dataset
from .evaluation import (evaluate, random_noise_baseline, selectivity, norm_sweep, transfer_matrix,
                         write_csv, write_json)
from .generator import GeneratorConfig, build_generator, save_checkpoint, sample_noise
from .models import Registry, check_compatible
from .refinement import RefineConfig, refine
from .saliency import attention_image, read_attention, write_attention
from .trainer import TrainConfig, train_uap

log = logging.getLogger(__name__)

SECTIONS = ("dataset", "models", "generator", "train", "saliency", "refine", "eval", "output")

DEFAULTS = {
    "dataset": {"root": None, "manifest": None, "split_seed": 0, "train_per_class": 50,
                "validation_cap": None},
    "models": {"registry": None, "target": None},
    "generator": {"depth": 3, "base_channels": 32, "noise_seed": 0, "init_seed": 0,
                  "activation": "relu", "pooling": "max", "head_gain": 0.01},
    "train": {"learning_rate": 1e-3, "weight_decay": 1e-3, "epochs": 50, "batch_size": 32,
              "shuffle_seed": 0, "epsilon": 10.0, "optimizer": "sgd", "momentum": 0.0},
    "saliency": {"fraction": 0.5, "layer": None, "batch_size": 64},
    "refine": {"alpha": 1.2, "beta": 0.8, "T": None, "reproject": True},
    "eval": {"batch_size": 256, "noise_seeds": [0, 1, 2, 3, 4], "sweep_norms": [],
             "transfer_models": []},
    "output": {"dir": "run", "resume": True},
}


class ConfigError(ValueError):
    pass


def load_config(path: str | Path) -> dict:
    """Read a YAML (or JSON) config and fill defaults. Unknown keys are errors."""
    raw = yaml.safe_load(Path(path).read_text()) or {}
    return normalize_config(raw)


def normalize_config(raw: dict) -> dict:
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    cfg = copy.deepcopy(DEFAULTS)
    for section, values in raw.items():
        values = values or {}
        bad = set(values) - set(DEFAULTS[section])
        if bad:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(bad)}")
        cfg[section].update(values)
    return cfg


def merge_cli(cfg: dict, section: str, key: str, value) -> None:
    """Fill ``cfg[section][key]`` from a CLI flag; a differing config value is an error."""
    if value is None:
        return
    current = cfg[section][key]
    if current is not None and current != value:
        raise ConfigError(f"--{key.replace('_', '-')}={value!r} conflicts with config "
                          f"{section}.{key}={current!r}")
    cfg[section][key] = value


def resolve_dataset(cfg: dict):
    d = cfg["dataset"]
    if d["manifest"]:
        manifest = DatasetManifest.load(d["manifest"])
    elif d["root"]:
        manifest = ingest(d["root"], d["split_seed"], d["train_per_class"], d["validation_cap"])
    else:
        raise ConfigError("dataset.root or dataset.manifest is required")
    return manifest, load_dataset(manifest)


def generator_config(cfg: dict, image_shape) -> GeneratorConfig:
    return GeneratorConfig(image_shape=tuple(image_shape), epsilon=float(cfg["train"]["epsilon"]),
                           **cfg["generator"])


def train_config(cfg: dict) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in cfg["train"].items() if k in names})


def refine_config(cfg: dict) -> RefineConfig:
    return RefineConfig(**cfg["refine"])


def validate(cfg: dict) -> Registry:
    """Fail fast on anything checkable before a stage runs."""
    registry = Registry(cfg["models"]["registry"] or "models")
    target = cfg["models"]["target"]
    if not target:
        raise ConfigError("models.target is required")
    known = registry.ids()
    for mid in [target, *cfg["eval"]["transfer_models"]]:
        if mid not in known:
            raise ConfigError(f"model {mid!r} not found in registry {registry.root} (known: {known})")
    d = cfg["dataset"]
    if d["manifest"] and not Path(d["manifest"]).is_file():
        raise ConfigError(f"dataset manifest {d['manifest']} not found")
    if d["root"] and not Path(d["root"]).is_dir():
        raise ConfigError(f"dataset root {d['root']} not found")
    train_config(cfg)
    refine_config(cfg)
    return registry


def run_pipeline(config: str | Path | dict) -> int:
    """Run every stage, reusing existing artifacts when ``output.resume`` is set.

    Returns 0 on success; on failure writes ``error.json`` in the output
    directory and returns 1 (startup validation errors return 2).
    """
    try:
        cfg = load_config(config) if not isinstance(config, dict) else normalize_config(config)
        registry = validate(cfg)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        log.error("config error: %s", exc)
        out = Path((config.get("output") or {}).get("dir", "run")) if isinstance(config, dict) else None
        if out is not None:
            write_json(out / "error.json", {"stage": "startup", "error": str(exc),
                                            "type": type(exc).__name__})
        return 2

    out = Path(cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    resume = cfg["output"]["resume"]
    stage = "dataset"
    try:
        manifest, data = resolve_dataset(cfg)
        target = registry.load(cfg["models"]["target"])
        check_compatible(target, data.image_shape)

        stage = "train"
        mid_path = out / "mid.uapf"
        if not (resume and mid_path.exists()):
            gcfg = generator_config(cfg, data.image_shape)
            gen = build_generator(gcfg)
            mid, history = train_uap(gen, target, data, train_config(cfg), sample_noise(gcfg))
            write_uapf(mid_path, mid)
            save_checkpoint(gen, out / "generator.pt", len(history))
            write_json(out / "train_log.json", history.to_list())
        mid, _ = read_uapf(mid_path)

        stage = "saliency"
        attn_path = out / "attn.uapf"
        if not (resume and attn_path.exists()):
            s = cfg["saliency"]
            attn = attention_image(target, data.train, s["fraction"], s["layer"], s["batch_size"])
            write_attention(attn_path, attn, target.model_id)
        attn = read_attention(attn_path)

        stage = "refine"
        fin_path = out / "fin.uapf"
        if not (resume and fin_path.exists()):
            write_uapf(fin_path, refine(mid, attn, refine_config(cfg)))
        fin, _ = read_uapf(fin_path)

        stage = "eval"
        e = cfg["eval"]
        bs = e["batch_size"]
        snapshot = {"config": cfg, "dataset_sizes": manifest.sizes()}
        rows = []
        for label, p in (("without", mid), ("with", fin)):
            rep = evaluate(target, data, p, f"{target.model_id}:{p.stage}", snapshot, bs)
            rows.append({"refinement": label, "model_id": rep.model_id, "stage": p.stage,
                         "asr": rep.asr, "pm": rep.pm, "clean_accuracy": rep.clean_accuracy})
        report = {
            "config_snapshot": snapshot,
            "rows": rows,
            "noise_baseline_asr": random_noise_baseline(target, data, mid.epsilon, e["noise_seeds"], bs)
            if e["noise_seeds"] else None,
            "selectivity": {"mid": selectivity(target, data, mid, bs).rows(),
                            "fin": selectivity(target, data, fin, bs).rows()},
        }
        if e["sweep_norms"]:
            sweep = norm_sweep(target, data, fin, e["sweep_norms"], bs)
            report["sweep"] = [{"norm": n, "asr": a} for n, a in sweep]
            write_csv(out / "sweep.csv", report["sweep"])
        if e["transfer_models"]:
            others = [registry.load(m) for m in e["transfer_models"] if m != target.model_id]
            tm = transfer_matrix({target.model_id: fin}, [target, *others], data, bs)
            report["transfer"] = tm.rows()
            write_csv(out / "transfer.csv", tm.rows())
        write_csv(out / "report.csv", rows)
        write_csv(out / "selectivity.csv", report["selectivity"]["fin"])
        write_json(out / "report.json", report)
    except Exception as exc:
        log.error("stage %s failed: %s", stage, exc)
        write_json(out / "error.json", {"stage": stage, "error": str(exc), "type": type(exc).__name__,
                                        "traceback": traceback.format_exc()})
        return 1
    return 0
