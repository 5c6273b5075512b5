"""``uap`` command line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .core import read_uapf, write_uapf
from .data import DatasetManifest, ingest, load_dataset, make_desk_images, resplit, write_image_folder
from .evaluation import (evaluate, norm_sweep, selectivity, sweep_rows, transfer_matrix, write_csv,
                         write_json)
from .generator import build_generator, sample_noise, save_checkpoint
from .models import ModelSpec, Registry, accuracy, check_compatible, load_external, train_classifier
from .refinement import RefineConfig, refine
from .saliency import attention_image, read_attention, save_attention_png, write_attention
from .trainer import train_uap


def _dataset(path, split_seed=0, train_per_class=50, validation_cap=None):
    path = Path(path)
    if path.suffix == ".json":
        manifest = DatasetManifest.load(path)
    else:
        manifest = ingest(path, split_seed, train_per_class, validation_cap)
    return load_dataset(manifest)


def _add_data(p):
    p.add_argument("--data", required=True, help="dataset root or manifest .json")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--train-per-class", type=int, default=50)
    p.add_argument("--validation-cap", type=int, default=None)
    p.add_argument("--registry", default="models")


def _data_from(args):
    return _dataset(args.data, args.split_seed, args.train_per_class, args.validation_cap)


def _target(args, data):
    adapter = Registry(args.registry).load(args.model)
    check_compatible(adapter, data.image_shape)
    return adapter


def _csv_beside(path) -> Path:
    return Path(path).with_suffix(".csv")


def cmd_dataset_ingest(args):
    m = ingest(args.root, args.split_seed, args.train_per_class, args.validation_cap)
    m.save(args.out)
    print(json.dumps(m.sizes()))


def cmd_dataset_split(args):
    m = resplit(DatasetManifest.load(args.manifest), args.split_seed, args.train_per_class,
                args.validation_cap)
    m.save(args.out)
    print(json.dumps(m.sizes()))


def cmd_dataset_synth(args):
    x, y = make_desk_images(args.per_class, seed=args.seed, size=args.size)
    write_image_folder(args.out, x, y)
    print(f"wrote {len(y)} images to {args.out}")


def cmd_model_train(args):
    data = _data_from(args)
    registry = Registry(args.registry)
    if args.arch == "external":
        spec = ModelSpec(args.id, "external", data.num_classes, data.image_shape,
                         args.saliency_layer or "", args.weights)
        adapter = load_external(spec)
    else:
        spec = ModelSpec(args.id, args.arch, data.num_classes, data.image_shape,
                         args.saliency_layer or "", width=args.width, epochs=args.epochs)
        adapter = train_classifier(spec, data, args.seed)
    acc = accuracy(adapter, data.validation)
    registry.register(adapter, spec, acc)
    print(f"{args.id}: validation accuracy {acc:.4f}")


def cmd_model_list(args):
    for mid, entry in sorted(Registry(args.registry).manifest().items()):
        print(f"{mid}\t{entry['spec']['architecture']}\t{entry['clean_accuracy']:.4f}\t"
              f"{entry['parameter_hash'][:12]}")


def cmd_train(args):
    cfg = pipeline.load_config(args.config)
    pipeline.merge_cli(cfg, "models", "target", args.model)
    pipeline.merge_cli(cfg, "dataset", "root", args.data)
    pipeline.merge_cli(cfg, "models", "registry", args.registry)
    registry = pipeline.validate(cfg)
    _, data = pipeline.resolve_dataset(cfg)
    target = registry.load(cfg["models"]["target"])
    check_compatible(target, data.image_shape)
    gcfg = pipeline.generator_config(cfg, data.image_shape)
    gen = build_generator(gcfg)
    mid, history = train_uap(gen, target, data, pipeline.train_config(cfg), sample_noise(gcfg))
    write_uapf(args.out, mid)
    save_checkpoint(gen, Path(args.out).with_suffix(".pt"), len(history))
    write_json(Path(args.out).with_suffix(".log.json"), history.to_list())
    print(f"final train ASR {history.records[-1].train_asr:.4f}")


def cmd_saliency(args):
    data = _data_from(args)
    target = _target(args, data)
    attn = attention_image(target, data.train, args.fraction, args.layer)
    write_attention(args.out, attn, target.model_id)
    if args.png:
        save_attention_png(args.png, attn)


def cmd_refine(args):
    mid, pixel_range = read_uapf(args.inp)
    attn = read_attention(args.attn)
    fin = refine(mid, attn, RefineConfig(args.alpha, args.beta, args.T, not args.no_reproject))
    write_uapf(args.out, fin, pixel_range)


def cmd_eval(args):
    data = _data_from(args)
    target = _target(args, data)
    p, _ = read_uapf(args.uapf)
    rep = evaluate(target, data, p, str(args.uapf), {"argv": sys.argv[1:]})
    write_json(args.out, rep)
    write_csv(_csv_beside(args.out), [{k: v for k, v in rep.to_dict().items() if k != "config_snapshot"}])
    print(f"ASR {rep.asr:.4f}  PM {rep.pm:.2f}  clean accuracy {rep.clean_accuracy:.4f}")


def cmd_transfer(args):
    data = _data_from(args)
    registry = Registry(args.registry)
    perts = {}
    for path in args.uapf:
        p, _ = read_uapf(path)
        perts[p.source_model_id or str(path)] = p
    tm = transfer_matrix(perts, [registry.load(m) for m in args.models], data)
    write_json(args.out, {"sources": tm.sources, "targets": tm.targets, "asr": tm.values,
                          "argv": sys.argv[1:]})
    write_csv(_csv_beside(args.out), tm.rows())


def cmd_selectivity(args):
    data = _data_from(args)
    target = _target(args, data)
    p, _ = read_uapf(args.uapf)
    dist = selectivity(target, data, p)
    write_json(args.out, {"model_id": target.model_id, "fractions": dist.rows(),
                          "top_3_mass": dist.top_k_mass(3), "argv": sys.argv[1:]})
    write_csv(_csv_beside(args.out), dist.rows())


def cmd_sweep(args):
    data = _data_from(args)
    target = _target(args, data)
    p, _ = read_uapf(args.uapf)
    rows = sweep_rows(norm_sweep(target, data, p, args.norms))
    write_json(args.out, {"model_id": target.model_id, "sweep": rows, "argv": sys.argv[1:]})
    write_csv(_csv_beside(args.out), rows)


def cmd_pipeline_run(args):
    return pipeline.run_pipeline(args.config)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uap", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset").add_subparsers(dest="action", required=True)
    p = ds.add_parser("ingest")
    p.add_argument("--root", required=True)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--train-per-class", type=int, default=50)
    p.add_argument("--validation-cap", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dataset_ingest)
    p = ds.add_parser("split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split-seed", type=int, required=True)
    p.add_argument("--train-per-class", type=int, default=None)
    p.add_argument("--validation-cap", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dataset_split)
    p = ds.add_parser("synth", help="write the synthetic desk dataset as a PNG folder tree")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, default=150)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=32)
    p.set_defaults(func=cmd_dataset_synth)

    md = sub.add_parser("model").add_subparsers(dest="action", required=True)
    p = md.add_parser("train")
    _add_data(p)
    p.add_argument("--id", required=True)
    p.add_argument("--arch", choices=["toy_linear", "small_cnn", "external"], default="small_cnn")
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--saliency-layer", default=None)
    p.add_argument("--weights", default=None, help="weights file for --arch external")
    p.set_defaults(func=cmd_model_train)
    p = md.add_parser("list")
    p.add_argument("--registry", default="models")
    p.set_defaults(func=cmd_model_list)

    p = sub.add_parser("train")
    p.add_argument("--config", required=True)
    p.add_argument("--model", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--registry", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("saliency")
    _add_data(p)
    p.add_argument("--model", required=True)
    p.add_argument("--layer", default=None)
    p.add_argument("--fraction", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.add_argument("--png", default=None)
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("refine")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--attn", required=True)
    p.add_argument("--alpha", type=float, default=1.2)
    p.add_argument("--beta", type=float, default=0.8)
    p.add_argument("--T", type=float, default=None)
    p.add_argument("--no-reproject", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_refine)

    for name, func in (("eval", cmd_eval), ("selectivity", cmd_selectivity), ("sweep", cmd_sweep)):
        p = sub.add_parser(name)
        _add_data(p)
        p.add_argument("--model", required=True)
        p.add_argument("--uapf", required=True)
        p.add_argument("--out", required=True)
        if name == "sweep":
            p.add_argument("--norms", type=float, nargs="+", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("transfer")
    _add_data(p)
    p.add_argument("--uapf", nargs="+", required=True)
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_transfer)

    pl = sub.add_parser("pipeline").add_subparsers(dest="action", required=True)
    p = pl.add_parser("run")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_pipeline_run)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        status = args.func(args)
    except (pipeline.ConfigError, KeyError, ValueError, FileNotFoundError) as exc:
        print(f"uap: error: {exc}", file=sys.stderr)
        return 2
    return int(status or 0)


if __name__ == "__main__":
    sys.exit(main())
