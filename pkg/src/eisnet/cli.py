"""Command-line surface: dataset/permutation generation, training, the
leave-one-domain-out protocol, ablation sweeps, embedding export, and a
self-test of the numeric oracles.

Config precedence is flag > config-file key > built-in default; config files
are flat key=value text with TrainConfig field names as keys. Every run
writes its reports into a manifest-hash-keyed subdirectory so sweeps never
clobber each other.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, fields, replace

import numpy as np

from . import datagen, jigsaw, model, trainer
from .trainer import TrainConfig, TrainingDiverged

TOOL_VERSION = "0.1.0"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING_INPUT = 3
EXIT_DIVERGED = 4
EXIT_SELFTEST = 5


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Config resolution
# ---------------------------------------------------------------------------

_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse value {raw!r}") from None


def read_config_file(path) -> dict:
    """Flat key=value text; blank lines and #-comments allowed."""
    values = {}
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected key=value, got {line!r}")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in _FIELD_TYPES:
                raise ConfigError(f"{path}:{ln}: unknown config key {key!r}")
            values[key] = _coerce(key, raw)
    return values


def parse_config(flag_values: dict, config_file=None) -> TrainConfig:
    """Resolves a TrainConfig: flag > file > default. Raises ConfigError with
    the offending key on any violation."""
    values = read_config_file(config_file) if config_file else {}
    for key, val in flag_values.items():
        if val is None:
            continue
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = val
    try:
        return TrainConfig(**values)
    except ValueError as e:
        raise ConfigError(str(e)) from None


# ---------------------------------------------------------------------------
# Manifests and run directories
# ---------------------------------------------------------------------------


def file_fingerprint(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def permutation_fingerprint(pset: jigsaw.PermutationSet) -> str:
    return hashlib.sha256(pset.perms.astype(np.int64).tobytes()).hexdigest()


def build_manifest(command: str, cfg: TrainConfig | None, dataset_fp: str,
                   extra: dict | None = None) -> dict:
    pset_fp = permutation_fingerprint(jigsaw.default_permutation_set())
    payload = {"command": command,
               "config": asdict(cfg) if cfg else None,
               "dataset_fingerprint": dataset_fp,
               "permutation_fingerprint": pset_fp,
               "tool_version": TOOL_VERSION}
    if extra:
        payload.update(extra)
    digest = hashlib.sha256(
        json.dumps(payload, sort_keys=True).encode()).hexdigest()
    return {"payload": payload, "hash": digest,
            "meta": {"timestamp": time.strftime("%Y-%m-%dT%H:%M:%S")}}


def output_root(args) -> str:
    return args.out or os.environ.get("EISNET_OUT", "runs")


def make_run_dir(args, manifest: dict) -> str:
    path = os.path.join(output_root(args), f"{manifest['payload']['command']}"
                        f"-{manifest['hash'][:12]}")
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _load_dataset(args) -> tuple[datagen.Dataset, str]:
    """Loads --data, or synthesizes the default benchmark inline."""
    if args.data:
        if not os.path.exists(args.data):
            raise FileNotFoundError(f"dataset file not found: {args.data}")
        return datagen.load_dataset(args.data), file_fingerprint(args.data)
    ds = datagen.synth_dataset(args.per_train, args.per_test, seed=args.data_seed,
                               image_side=args.side)
    fp = f"synthetic:per_train={args.per_train},per_test={args.per_test}," \
         f"seed={args.data_seed},side={args.side}"
    return ds, hashlib.sha256(fp.encode()).hexdigest()


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    ds = datagen.synth_dataset(args.per_train, args.per_test, seed=args.data_seed,
                               image_side=args.side)
    datagen.save_dataset(args.file, ds)
    print(f"wrote {args.file}: {ds.num_domains} domains x "
          f"({args.per_train} train + {args.per_test} test), side {ds.image_side}")
    return EXIT_OK


def cmd_gen_perms(args) -> int:
    pset = jigsaw.generate_permutation_set(args.seed if args.seed is not None else 0)
    jigsaw.save_permutation_set(args.file, pset)
    print(f"wrote {args.file}: 31 orderings, min pairwise Hamming {pset.min_hamming}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = parse_config(_flag_dict(args), args.config)
    ds, ds_fp = _load_dataset(args)
    manifest = build_manifest("train", cfg, ds_fp)
    run_dir = make_run_dir(args, manifest)
    params, log = trainer.train(cfg, ds)
    trainer.save_metrics(log, cfg, os.path.join(run_dir, "metrics.csv"),
                         os.path.join(run_dir, "summary.json"))
    model.save_params(os.path.join(run_dir, "params.ckpt"), params)
    print(f"{run_dir}: target acc {log.target_acc:.4f} "
          f"({log.wall_clock:.1f}s, held out {ds.domain_names[cfg.held_out]})")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = parse_config(_flag_dict(args), args.config)
    ds, ds_fp = _load_dataset(args)
    if not os.path.exists(args.params):
        raise FileNotFoundError(f"checkpoint not found: {args.params}")
    params = load_params_f32(args.params)
    mcfg = model.ModelConfig(image_side=ds.image_side, num_classes=ds.num_classes,
                             encoder_kind=cfg.encoder)
    split = ds.test[cfg.held_out]
    acc = trainer.evaluate(params, mcfg, split.images, split.labels)
    manifest = build_manifest("eval", cfg, ds_fp,
                              extra={"checkpoint": file_fingerprint(args.params)})
    run_dir = make_run_dir(args, manifest)
    with open(os.path.join(run_dir, "eval.json"), "w") as f:
        json.dump({"payload": {"accuracy": acc,
                               "domain": ds.domain_names[cfg.held_out]}}, f, indent=2)
        f.write("\n")
    print(f"accuracy on {ds.domain_names[cfg.held_out]}: {acc:.4f}")
    return EXIT_OK


def load_params_f32(path) -> dict:
    return {k: v.astype(np.float32) for k, v in model.load_params(path).items()}


def cmd_loo(args) -> int:
    cfg = parse_config(_flag_dict(args), args.config)
    ds, ds_fp = _load_dataset(args)
    seeds = list(range(cfg.seed, cfg.seed + args.seeds))
    manifest = build_manifest("loo", cfg, ds_fp, extra={"seeds": seeds})
    run_dir = make_run_dir(args, manifest)
    result = trainer.leave_one_domain_out(cfg, ds, seeds, workers=args.workers)
    with open(os.path.join(run_dir, "loo.csv"), "w") as f:
        f.write(result.to_csv())
    print(result.to_csv(), end="")
    print(f"reports in {run_dir}")
    return EXIT_OK


def _parse_axis_values(axis: str, raw: str | None) -> list:
    defaults = {"K": "1,8,64,128,256",
                "delta": "0,0.5,0.9,0.99,0.999",
                "selector": "random,semihard,khard",
                "bank_size": ",".join(f"{m}:{k}" for m, k in trainer.BANK_SIZE_PAIRS)}
    raw = raw or defaults[axis]
    items = [s.strip() for s in raw.split(",") if s.strip()]
    if axis == "K":
        return [int(s) for s in items]
    if axis == "delta":
        return [float(s) for s in items]
    if axis == "bank_size":
        return [tuple(int(p) for p in s.split(":")) for s in items]
    return items


def cmd_ablate(args) -> int:
    cfg = parse_config(_flag_dict(args), args.config)
    ds, ds_fp = _load_dataset(args)
    if args.axis not in trainer.SWEEP_AXES:
        raise ConfigError(f"--axis must be one of {trainer.SWEEP_AXES}")
    values = _parse_axis_values(args.axis, args.values)
    seeds = list(range(cfg.seed, cfg.seed + args.seeds))
    manifest = build_manifest("ablate", cfg, ds_fp,
                              extra={"axis": args.axis, "values": str(values),
                                     "seeds": seeds})
    run_dir = make_run_dir(args, manifest)
    result = trainer.ablation_sweep(args.axis, values, cfg, ds, seeds,
                                    workers=args.workers)
    with open(os.path.join(run_dir, "sweep.csv"), "w") as f:
        f.write(result.to_csv())
    print(result.to_csv(), end="")
    print(f"reports in {run_dir}")
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    cfg = parse_config(_flag_dict(args), args.config)
    ds, ds_fp = _load_dataset(args)
    if not os.path.exists(args.params):
        raise FileNotFoundError(f"checkpoint not found: {args.params}")
    params = load_params_f32(args.params)
    mcfg = model.ModelConfig(image_side=ds.image_side, num_classes=ds.num_classes,
                             encoder_kind=cfg.encoder)
    images = np.concatenate([s.images for s in ds.test])
    labels = np.concatenate([s.labels for s in ds.test])
    domains = np.concatenate([np.full(len(s), d) for d, s in enumerate(ds.test)])
    manifest = build_manifest("export-embeddings", cfg, ds_fp,
                              extra={"checkpoint": file_fingerprint(args.params)})
    run_dir = make_run_dir(args, manifest)
    emb_path = os.path.join(run_dir, "embeddings.csv")
    trainer.export_embeddings(params, mcfg, images, labels, domains, emb_path)
    emb = trainer.batch_embed(params, mcfg, images)
    coords = trainer.pca_project(emb, dims=2)
    with open(os.path.join(run_dir, "pca2d.csv"), "w") as f:
        f.write("pc0,pc1,label,domain\n")
        for (a, b), y, d in zip(coords, labels, domains):
            f.write(f"{a:.8g},{b:.8g},{int(y)},{int(d)}\n")
    print(f"wrote {emb_path} and pca2d.csv ({len(emb)} rows)")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from . import selftest
    results = selftest.run_all()
    width = max(len(name) for name, _ in results)
    ok = True
    for name, passed in results:
        print(f"{name:<{width}}  {'PASS' if passed else 'FAIL'}")
        ok &= passed
    return EXIT_OK if ok else EXIT_SELFTEST


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

_CONFIG_FLAGS = [
    ("--seed", int, "seed"), ("--epochs", int, "epochs"), ("--batch", int, "batch"),
    ("--lr", float, "lr"), ("--alpha", float, "alpha"), ("--beta", float, "beta"),
    ("--gamma", float, "gamma"), ("--margin", float, "margin"), ("--k", int, "k"),
    ("--bank", int, "bank"), ("--delta", float, "delta"),
    ("--p-shuffle", float, "p_shuffle"), ("--held-out", int, "held_out"),
]


def _flag_dict(args) -> dict:
    d = {dest: getattr(args, dest) for _, _, dest in _CONFIG_FLAGS}
    d["selector"] = args.selector
    d["encoder"] = args.encoder
    return d


def _add_common(p: argparse.ArgumentParser, with_data: bool = True):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--out", help="output root (default $EISNET_OUT or ./runs)")
    for flag, kind, dest in _CONFIG_FLAGS:
        p.add_argument(flag, type=kind, dest=dest, default=None)
    p.add_argument("--selector", choices=["random", "semihard", "khard"], default=None)
    p.add_argument("--encoder", choices=["conv", "mlp"], default=None)
    if with_data:
        p.add_argument("--data", help="dataset file (default: synthesize inline)")
        p.add_argument("--per-train", type=int, default=600)
        p.add_argument("--per-test", type=int, default=200)
        p.add_argument("--side", type=int, default=30)
        p.add_argument("--data-seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eisnet")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic multi-domain dataset")
    p.add_argument("file")
    p.add_argument("--per-train", type=int, default=600)
    p.add_argument("--per-test", type=int, default=200)
    p.add_argument("--side", type=int, default=30)
    p.add_argument("--data-seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("gen-perms", help="write a patch-ordering set")
    p.add_argument("file")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_perms)

    p = sub.add_parser("train", help="train one model")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the held-out domain")
    _add_common(p)
    p.add_argument("--params", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("loo", help="leave-one-domain-out over all method variants")
    _add_common(p)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_loo)

    p = sub.add_parser("ablate", help="sweep one hyperparameter axis")
    _add_common(p)
    p.add_argument("--axis", required=True, choices=list(trainer.SWEEP_AXES))
    p.add_argument("--values", help="comma-separated values (m:k pairs for bank_size)")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-embeddings", help="dump embeddings + 2-D PCA")
    _add_common(p)
    p.add_argument("--params", required=True)
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("selftest", help="run the oracle and gradient suites")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"missing input: {e}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        print(json.dumps(e.state, indent=2, default=str), file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
