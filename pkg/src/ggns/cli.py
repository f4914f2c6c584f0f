"""Command line entry point: ``ggns generate | train | evaluate``.

Settings are resolved in three layers: the named preset, then an optional
JSON ``--config`` file whose keys are the long flag names (dashes or
underscores), then flags given explicitly on the command line. Every run
writes ``run.json`` next to its outputs with the resolved settings and a
content hash of its inputs. Nothing time-dependent goes into that file, so
repeating a run reproduces its outputs byte for byte.

Exit codes: 0 success, 2 invalid configuration, 3 divergence or I/O failure.
The ``GGNS_WORKERS`` environment variable overrides the worker pool size used
for data generation and evaluation rollouts.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

from . import __version__
from .autodiff import CheckpointError
from .dataset import DatasetError, generate_dataset, load_dataset, worker_count
from .evaluation import RolloutConfig, evaluate, parse_k
from .graph import SETTINGS
from .model import ModelConfig, ModelParams, NonFiniteError, write_manifest
from .training import TrainConfig, TrainingDiverged, fit
from .truthsim import CameraConfig, ScenarioConfig

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

PRESETS = {
    "plate-small": {
        "trajectories": 8,
        "steps": 50,
        "latent_dim": 16,
        "num_blocks": 2,
        "max_epochs": 5,
        "patience": 20,
    },
    "desk": {
        "trajectories": 64,
        "steps": 50,
        "latent_dim": 32,
        "num_blocks": 3,
        "max_epochs": 30,
        "patience": 20,
    },
    "full": {
        "trajectories": 64,
        "steps": 50,
        "latent_dim": 128,
        "num_blocks": 5,
        "max_epochs": 1000,
        "patience": 50,
    },
}

# everything a preset does not set
DEFAULTS = {
    "camera": "single",
    "variant": "ggns",
    "connectivity": None,
    "edge_partitioning": False,
    "batch_size": 32,
    "learning_rate": 5e-4,
    "noise_std": 0.01,
    "imputation_prob": None,
    "k": "1,2,5,10,inf",
    "m": 5,
    "alpha": 0.3,
    "resolution": 256,
    "no_m_plus_10": False,
    "no_alpha": False,
}

VARIANTS = {
    # imputation probability, connectivity, material feature
    "ggns": (0.5, "full-graph", False),
    "mgn": (0.0, "mgn-world", False),
    "mgn-material": (0.0, "mgn-world", True),
}


class ConfigError(ValueError):
    pass


def _split_counts(n: int) -> tuple[int, int, int]:
    """Train count plus validation and test splits of a quarter each (at least one)."""
    if n < 1:
        raise ConfigError("--trajectories must be at least 1")
    return n, max(1, n // 4), max(1, n // 4)


def resolve(args: argparse.Namespace) -> dict:
    """Merge preset, config file and explicit flags into one settings dict."""
    if args.preset not in PRESETS:
        raise ConfigError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
    cfg = {**DEFAULTS, **PRESETS[args.preset]}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {args.config}: {exc}") from exc
        for key, value in doc.items():
            key = key.replace("-", "_")
            if key not in cfg and key not in vars(args):
                raise ConfigError(f"unknown config key {key!r}")
            cfg[key] = value
    for key, value in vars(args).items():
        if key in ("func", "config") or value is None:
            continue
        if isinstance(value, bool) and not value and key in cfg:
            continue  # store_true flags only override when given
        cfg[key] = value
    return cfg


def _input_hash(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(x) for x in paths):
        data = p.read_bytes()
        h.update(f"blob {p.name} {len(data)}\0".encode())
        h.update(data)
    return h.hexdigest()


def _write_run(out: Path, command: str, cfg: dict, inputs: list) -> None:
    doc = {"command": command, "version": __version__, "settings": cfg, "input_sha256": _input_hash(inputs) if inputs else None}
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


def _scenario(cfg: dict) -> tuple[ScenarioConfig, CameraConfig]:
    steps = int(cfg["steps"])
    if steps < 2:
        raise ConfigError("--steps must be at least 2")
    if cfg["camera"] == "single":
        cam = CameraConfig()
    elif cfg["camera"] == "surround":
        cam = CameraConfig.surround()
    else:
        raise ConfigError(f"unknown camera setup {cfg['camera']!r}")
    return ScenarioConfig(steps=steps), cam


def _generate(cfg: dict, out: Path) -> dict:
    scenario, cam = _scenario(cfg)
    counts = _split_counts(int(cfg["trajectories"]))
    return generate_dataset(out, scenario, counts, seed=int(cfg["seed"]), camera=cam, workers=worker_count())


def _dataset_files(path: Path) -> list[Path]:
    return [p for p in sorted(path.glob("*")) if p.suffix in (".bin", ".json") and p.name != "run.json"]


def cmd_generate(cfg: dict) -> int:
    out = Path(cfg["out"])
    doc = _generate(cfg, out)
    _write_run(out, "generate", cfg, [])
    for name, info in doc["summary"].items():
        mats = ", ".join(f"{k} {v}" for k, v in info["materials"].items())
        print(f"{name:5s} {info['count']:4d} trajectories  ({mats})")
    print(f"wrote {out}")
    return EXIT_OK


def train_config(cfg: dict) -> TrainConfig:
    if cfg["variant"] not in VARIANTS:
        raise ConfigError(f"unknown variant {cfg['variant']!r}; choose from {sorted(VARIANTS)}")
    prob, conn, material = VARIANTS[cfg["variant"]]
    conn = cfg["connectivity"] or conn
    if conn not in SETTINGS:
        raise ConfigError(f"unknown connectivity {conn!r}; choose from {sorted(SETTINGS)}")
    if cfg["imputation_prob"] is not None:
        prob = float(cfg["imputation_prob"])
    model = ModelConfig(
        latent_dim=int(cfg["latent_dim"]),
        num_blocks=int(cfg["num_blocks"]),
        connectivity=conn,
        material_feature=material,
        edge_partitioning=bool(cfg["edge_partitioning"]),
    )
    return TrainConfig(
        batch_size=int(cfg["batch_size"]),
        learning_rate=float(cfg["learning_rate"]),
        noise_std=float(cfg["noise_std"]),
        imputation_prob=prob,
        max_epochs=int(cfg["max_epochs"]),
        patience=int(cfg["patience"]),
        seed=int(cfg["seed"]),
        model=model,
    )


def cmd_train(cfg: dict) -> int:
    out = Path(cfg["out"])
    tcfg = train_config(cfg)
    data = Path(cfg["data"]) if cfg.get("data") else out / "data"
    if not cfg.get("data"):
        if not (data / "dataset.json").exists():
            print(f"generating {cfg['preset']} dataset in {data}")
            _generate(cfg, data)
    splits = load_dataset(data)
    if "train" not in splits or "val" not in splits:
        raise DatasetError(f"{data}: need train and val splits")
    params, report = fit(splits["train"], splits["val"], tcfg, log=print)
    out.mkdir(parents=True, exist_ok=True)
    params.save(out / "model.ckpt", {"train_config": tcfg.to_json()})
    write_manifest(out / "manifest.json", tcfg.model)
    report.write_csv(out / "train_log.csv")
    report.write_json(out / "train_report.json")
    _write_run(out, "train", {**cfg, "resolved_train_config": tcfg.to_json()}, _dataset_files(data))
    print(f"best epoch {report.best_epoch}  val {report.best_val_loss:.6f}  -> {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_evaluate(cfg: dict) -> int:
    out = Path(cfg["out"])
    ckpt = Path(cfg["checkpoint"])
    data = Path(cfg["data"])
    try:
        ks = tuple(parse_k(x) for x in str(cfg["k"]).split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(f"bad --k value: {exc}") from exc
    if not ks:
        raise ConfigError("--k needs at least one interval")
    rcfg = RolloutConfig(ks=ks, m=int(cfg["m"]), resolution=int(cfg["resolution"]), alpha=float(cfg["alpha"]))
    params = ModelParams.load(ckpt)
    splits = load_dataset(data)
    if "test" not in splits:
        raise DatasetError(f"{data}: no test split")
    trajs = splits["test"]
    if len(trajs[0]) < rcfg.m + 11:
        raise ConfigError(f"trajectories of {len(trajs[0])} steps are too short for m={rcfg.m}")
    report = evaluate(
        params,
        trajs,
        rcfg,
        with_m_plus_10=not cfg["no_m_plus_10"],
        with_alpha=not cfg["no_alpha"],
        workers=worker_count(),
        dump_dir=out / "rollouts" if cfg.get("dump") else None,
    )
    report.runtime = {"trajectories": len(trajs)}  # wall time stays out of the artifacts
    report.write(out)
    _write_run(out, "evaluate", cfg, [ckpt, data / "test.bin"])
    for k, row in report.aggregate().items():
        print(f"k={k:>4s}  rollout mse {row['rollout_mse_mean']:.4e}  iou {row['rollout_iou_mean']:.4f}  diverged {row['diverged']}")
    ben = report.benefit()
    if ben:
        print("normalized benefit: " + ", ".join(f"k={k} {v:.3f}" for k, v in ben.items()))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ggns", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--preset", default="desk", help=f"one of {', '.join(PRESETS)} (default desk)")
        sp.add_argument("--config", help="JSON file with settings; keys are long flag names")
        sp.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
        sp.add_argument("--out", required=True, help="output directory")

    g = sub.add_parser("generate", help="simulate a dataset of trajectories and point clouds")
    common(g)
    g.add_argument("--trajectories", type=int, help="training trajectories; val and test get a quarter each")
    g.add_argument("--steps", type=int, help="frames per trajectory")
    g.add_argument("--camera", choices=["single", "surround"], help="observation setup (default single)")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="fit a simulator with early stopping")
    common(t)
    t.add_argument("--data", help="dataset directory; generated under OUT/data from the preset if omitted")
    t.add_argument("--variant", choices=sorted(VARIANTS), help="ggns (default), mgn or mgn-material")
    t.add_argument("--connectivity", choices=sorted(SETTINGS), help="override the variant's graph setting")
    t.add_argument("--edge-partitioning", action="store_true", help="separate edge MLP per edge-kind group")
    t.add_argument("--imputation-prob", type=float, help="override the variant's point-cloud probability")
    t.add_argument("--max-epochs", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--learning-rate", type=float)
    t.add_argument("--noise-std", type=float)
    t.add_argument("--latent-dim", type=int)
    t.add_argument("--num-blocks", type=int)
    t.add_argument("--trajectories", type=int, help="only used when the dataset is generated")
    t.add_argument("--steps", type=int, help="only used when the dataset is generated")
    t.add_argument("--camera", choices=["single", "surround"])
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="rollouts and metrics on the test split")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--k", help="comma-separated grounding intervals, 'inf' for none (default 1,2,5,10,inf)")
    e.add_argument("--m", type=int, help="grounded steps before the 10 ungrounded ones (default 5)")
    e.add_argument("--alpha", type=float, help="alpha-shape baseline radius (default 0.3)")
    e.add_argument("--resolution", type=int, help="IoU raster resolution (default 256)")
    e.add_argument("--no-m-plus-10", action="store_true")
    e.add_argument("--no-alpha", action="store_true")
    e.add_argument("--dump", action="store_true", help="write per-step rollout meshes as JSON")
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    func = args.func
    try:
        cfg = resolve(args)
        if cfg.get("seed") is None:
            cfg["seed"] = 0
        return func(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, NonFiniteError) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, DatasetError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
