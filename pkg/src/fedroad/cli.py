"""Operator surface: config parsing, experiment orchestration, file emission.

Configs are JSON with nested sections (unknown keys rejected, defaults
applied, error messages name the offending key path). Every run writes an
atomically renamed ``metrics.csv`` with the fixed header

    run_id,strategy,round,lr,test_accuracy,test_loss,uplink_bytes,
    downlink_bytes,cumulative_bytes,wall_ms

plus a fully resolved config echo and a final-model checkpoint, so a run is
reproducible from its output directory alone. ``wall_ms`` is the simulated
transfer time of the round (bytes over a nominal 10 MB/s link); real wall
time would break byte-identical reruns. The log level comes from the
FEDROAD_LOG environment variable.

Subcommands: run | privatize | pretrain | eval | partition.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import struct
import sys
from pathlib import Path

import numpy as np

from . import compress, datasets, fedsim, models, privacy
from .errors import ConfigError, FormatError, InputError
from .numcore import ModelParams, RngStream, Tensor

log = logging.getLogger("fedroad")

CSV_HEADER = (
    "run_id,strategy,round,lr,test_accuracy,test_loss,"
    "uplink_bytes,downlink_bytes,cumulative_bytes,wall_ms"
)

_OPT_STR = ("", "optional_str")  # sentinel: default empty, may stay empty

_SCHEMA: dict[str, dict] = {
    "run_id": ("run", str),
    "seed": (0, int),
    "out_dir": ("out", str),
    "federation": {
        "strategy": ("mfed", str),
        "n_clients": (3, int),
        "rounds": (50, int),
        "local_epochs": (10, int),
        "local_batch": (16, int),
        "gamma0": (0.1, float),
        "delta": (0.5, float),
        "zeta": (1, int),
        "lr_schedule": ("adalr", str),
        "participation_fraction": (1.0, float),
        "new_data_threshold": (100, int),
        "qsgd_s": (127, int),
        "aggregation": ("delta_uniform", str),
        "uplink_int8_requant": (False, bool),
    },
    "dataset": {
        "kind": ("synthetic", str),  # synthetic | idx
        "classes": (5, int),
        "per_class": (120, int),
        "test_per_class": (40, int),
        "image_dim": (32, int),
        "vocab": (64, int),
        "text_len": (12, int),
        "noise_sigma": (0.1, float),
        "antipodal": (False, bool),
        "train_images": _OPT_STR,
        "train_labels": _OPT_STR,
        "test_images": _OPT_STR,
        "test_labels": _OPT_STR,
    },
    "partition": {
        "scheme": ("even", str),  # even | shard | class_restricted
        "num_shards": (60, int),
        "shards_per_client": ([], list),
        "classes_per_client": (4, int),
    },
    "model": {
        "type": ("mlp", str),  # mlp | multimodal
        "hidden": (64, int),
        "embed_dim": (16, int),
        "text_hidden": (32, int),
        "image_hidden": (32, int),
        "fusion_hidden": (32, int),
    },
    "privacy": {
        "enabled": (False, bool),
        "epsilon": (0.8, float),
        "c": (8, int),
        "e": (8, int),
        "text_skip_threshold": (64, int),
    },
    "pretrain": {
        "enabled": (False, bool),
        "alpha": (0.1, float),
        "margin": (0.2, float),
        "floor": (0.0, float),
        "epochs": (20, int),
        "lr": (0.5, float),
        "batch": (16, int),
    },
}


class ExperimentConfig:
    """Fully resolved configuration (defaults applied, every key validated)."""

    def __init__(self, data: dict):
        self.data = data

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and self.data == other.data

    def __getitem__(self, key):
        return self.data[key]

    def federation(self) -> fedsim.FederationConfig:
        f = self.data["federation"]
        return fedsim.FederationConfig(seed=self.data["seed"], **f)


def _coerce(path: str, value, default, kind):
    if kind == "optional_str":
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string path, got {type(value).__name__}")
        return value
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if kind is list:
        if not isinstance(value, list) or not all(
            isinstance(x, int) and not isinstance(x, bool) for x in value
        ):
            raise ConfigError(f"{path}: expected a list of integers, got {value!r}")
        return list(value)
    raise ConfigError(f"{path}: unsupported schema kind {kind}")


def resolve_config(raw: dict) -> ExperimentConfig:
    """Validate a raw mapping against the schema; reject unknown keys."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    out: dict = {}
    for key, spec in _SCHEMA.items():
        if isinstance(spec, dict):
            section = raw.get(key, {})
            if not isinstance(section, dict):
                raise ConfigError(f"{key}: expected an object")
            resolved = {}
            for sub, (default, kind) in spec.items():
                if sub in section:
                    resolved[sub] = _coerce(f"{key}.{sub}", section[sub], default, kind)
                else:
                    resolved[sub] = default
            unknown = set(section) - set(spec)
            if unknown:
                raise ConfigError(f"{key}.{sorted(unknown)[0]}: unknown key")
            out[key] = resolved
        else:
            default, kind = spec
            out[key] = _coerce(key, raw[key], default, kind) if key in raw else default
    unknown = set(raw) - set(_SCHEMA)
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown key")

    fed = out["federation"]
    if fed["strategy"] not in fedsim.STRATEGIES:
        raise ConfigError(f"federation.strategy: {fed['strategy']!r} not in {fedsim.STRATEGIES}")
    if out["dataset"]["kind"] not in ("synthetic", "idx"):
        raise ConfigError(f"dataset.kind: {out['dataset']['kind']!r} not in ('synthetic', 'idx')")
    if out["partition"]["scheme"] not in ("even", "shard", "class_restricted"):
        raise ConfigError(f"partition.scheme: {out['partition']['scheme']!r} is unknown")
    if out["model"]["type"] not in ("mlp", "multimodal"):
        raise ConfigError(f"model.type: {out['model']['type']!r} not in ('mlp', 'multimodal')")
    if out["privacy"]["epsilon"] <= 0:
        raise ConfigError("privacy.epsilon: must be positive")
    cfg = ExperimentConfig(out)
    cfg.federation()  # surfaces FederationConfig invariant violations now
    return cfg


def parse_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}")
    return resolve_config(raw)


def serialize_config(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.data, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


_TEST_SEED_OFFSET = 1_000_003


def build_dataset(cfg: ExperimentConfig):
    """(train records, test records) per the dataset section."""
    d = cfg["dataset"]
    seed = cfg["seed"]
    if d["kind"] == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if not d[key]:
                raise ConfigError(f"dataset.{key}: required for dataset.kind = 'idx'")
        train = datasets.load_idx(d["train_images"], d["train_labels"])
        test = datasets.load_idx(d["test_images"], d["test_labels"])
        return train, test
    # one generator call, sliced: train and test must share class prototypes
    combined = datasets.synth_multimodal(
        d["classes"],
        d["per_class"] + d["test_per_class"],
        image_dim=d["image_dim"],
        vocab=d["vocab"],
        text_len=d["text_len"],
        noise_sigma=d["noise_sigma"],
        antipodal=d["antipodal"],
        seed=seed,
    )
    split = d["classes"] * d["per_class"]
    return combined[:split], combined[split:]


def build_partition(cfg: ExperimentConfig, train) -> datasets.PartitionPlan:
    p = cfg["partition"]
    k = cfg["federation"]["n_clients"]
    rng = RngStream(cfg["seed"], 8100)
    if p["scheme"] == "shard":
        labels = [r.label for r in train]
        spc = p["shards_per_client"] or [p["num_shards"] // k] * k
        return datasets.shard_partition(labels, p["num_shards"], spc, rng)
    if p["scheme"] == "class_restricted":
        return datasets.class_restricted_partition(train, p["classes_per_client"], k, rng)
    assignments = {c: list(range(c, len(train) - len(train) % k, k)) for c in range(k)}
    return datasets.PartitionPlan(assignments, "even", {}, cfg["seed"])


def privatize_dataset(cfg: ExperimentConfig, records, *, stream_tag: int):
    """Privatize records in order; one spawned stream per record index."""
    p = cfg["privacy"]
    root = RngStream(cfg["seed"], 8200).spawn(stream_tag)
    out = []
    for i, rec in enumerate(records):
        priv = privacy.privatize_record(
            rec,
            p["epsilon"],
            p["c"],
            p["e"],
            root.spawn(i),
            vocab=cfg["dataset"]["vocab"],
            text_skip_threshold=p["text_skip_threshold"],
        )
        out.append(priv)
    return out


def privatized_to_records(privs) -> list[datasets.Record]:
    out = []
    for p in privs:
        out.append(
            datasets.Record(
                label=p.label,
                image=p.image_feature.nd if p.image_feature is not None else None,
                text_vec=p.text_feature.data if p.text_feature is not None else None,
            )
        )
    return out


def standardize_features(train, test) -> None:
    """Zero-mean/unit-variance per coordinate, statistics from the train split.

    Laplace-noised features carry the noise scale (possibly hundreds) as
    their magnitude; training on them raw diverges. Standardizing is plain
    post-processing of already-privatized values, so the epsilon guarantee
    is untouched. In place, deterministic.
    """
    for field in ("image", "text_vec"):
        vals = [getattr(r, field) for r in train if getattr(r, field) is not None]
        if not vals:
            continue
        arr = np.stack([np.asarray(v, np.float64).reshape(-1) for v in vals])
        mu = arr.mean(axis=0)
        sd = np.maximum(arr.std(axis=0), 1e-9)
        for r in list(train) + list(test):
            v = getattr(r, field)
            if v is not None:
                shape = np.asarray(v).shape
                setattr(r, field, ((np.asarray(v, np.float64).reshape(-1) - mu) / sd).reshape(shape))


def _dense_size(rec) -> int:
    if rec.image is not None:
        return int(np.asarray(rec.image).size)
    return int(np.asarray(rec.text_vec).size)


def build_model(cfg: ExperimentConfig, train, pretrained=None):
    m = cfg["model"]
    n_classes = max(r.label for r in train) + 1
    if m["type"] == "mlp":
        return models.MlpClassifier(
            input_dim=_dense_size(train[0]), hidden=m["hidden"], n_classes=n_classes
        )
    image_rec = next((r for r in train if r.image is not None), None)
    dense_rec = next((r for r in train if r.text_vec is not None), None)
    dims = models.ModelDims(
        vocab=cfg["dataset"]["vocab"],
        text_hidden=m["text_hidden"],
        embed_dim=m["embed_dim"],
        image_dim=int(np.asarray(image_rec.image).size) if image_rec else 1,
        image_hidden=m["image_hidden"],
        n_classes=n_classes,
        fusion_hidden=m["fusion_hidden"],
        text_dense_dim=int(np.asarray(dense_rec.text_vec).size) if dense_rec else None,
    )
    return models.MultimodalClassifier(dims, pretrained=pretrained)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _prepare_out_dir(out_dir: Path, force: bool) -> None:
    if out_dir.exists() and any(out_dir.iterdir()):
        if not force:
            raise InputError(f"output directory {out_dir} is not empty (use --force)")
    out_dir.mkdir(parents=True, exist_ok=True)


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    os.replace(tmp, path)


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, float) else str(x)


def metrics_to_csv(run_id: str, strategy: str, rows: list[fedsim.RoundMetrics]) -> str:
    lines = [CSV_HEADER]
    for m in rows:
        lines.append(
            ",".join(
                [
                    run_id,
                    strategy,
                    str(m.round),
                    _fmt(m.lr),
                    _fmt(m.test_accuracy),
                    _fmt(m.test_loss),
                    str(m.uplink_bytes),
                    str(m.downlink_bytes),
                    str(m.cumulative_bytes),
                    _fmt(m.wall_ms),
                ]
            )
        )
    return "\n".join(lines) + "\n"


def _maybe_pretrain(cfg: ExperimentConfig, train):
    pt = cfg["pretrain"]
    if not pt["enabled"]:
        return None, None
    m = cfg["model"]
    image_rec = next(r for r in train if r.image is not None)
    dims = models.ModelDims(
        vocab=cfg["dataset"]["vocab"],
        text_hidden=m["text_hidden"],
        embed_dim=m["embed_dim"],
        image_dim=int(np.asarray(image_rec.image).size),
        image_hidden=m["image_hidden"],
        n_classes=max(r.label for r in train) + 1,
        fusion_hidden=m["fusion_hidden"],
    )
    tcfg = models.TripletConfig(alpha=pt["alpha"], c=pt["margin"], m=pt["floor"])
    enc, trace = models.pretrain(
        train,
        dims,
        tcfg,
        epochs=pt["epochs"],
        lr=pt["lr"],
        rng=RngStream(cfg["seed"], 8300),
        batch_size=pt["batch"],
    )
    return enc, trace


def cmd_run(cfg: ExperimentConfig, force: bool = False) -> int:
    out_dir = Path(cfg["out_dir"])
    try:
        _prepare_out_dir(out_dir, force)
        train, test = build_dataset(cfg)
        if cfg["privacy"]["enabled"]:
            log.info("privatizing %d train / %d test records", len(train), len(test))
            train = privatized_to_records(privatize_dataset(cfg, train, stream_tag=1))
            test = privatized_to_records(privatize_dataset(cfg, test, stream_tag=2))
            standardize_features(train, test)
        plan = build_partition(cfg, train)
        pretrained, _ = _maybe_pretrain(cfg, train)
        model = build_model(cfg, train, pretrained=pretrained)
        fed = cfg.federation()
        log.info("running %s for %d rounds", fed.strategy, fed.rounds)
        metrics, cloud = fedsim.run_federation(fed, model, train, plan, test)
        _atomic_write(out_dir / "config.json", serialize_config(cfg))
        _atomic_write(
            out_dir / "metrics.csv", metrics_to_csv(cfg["run_id"], fed.strategy, metrics)
        )
        compress.save_checkpoint(cloud.params, out_dir / "checkpoint.bin")
        return 0
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def cmd_privatize(cfg: ExperimentConfig, out_path, force: bool = False) -> int:
    out_dir = Path(out_path)
    _prepare_out_dir(out_dir, force)
    train, _ = build_dataset(cfg)
    privs = privatize_dataset(cfg, train, stream_tag=1)
    blob = bytearray(struct.pack("<I", len(privs)))
    for p in privs:
        rec = privacy.serialize_privatized(p)
        blob += struct.pack("<I", len(rec)) + rec
    with open(out_dir / "privatized.bin", "wb") as f:
        f.write(blob)
    pconf = cfg["privacy"]
    sample = privs[0]
    report = {
        "epsilon": pconf["epsilon"],
        "records": len(privs),
        "image_dims": list(sample.image_feature.shape) if sample.image_feature else None,
        "text_dims": list(sample.text_feature.shape) if sample.text_feature else None,
        "image_noise_scale": sample.image_budget.noise_scale if sample.image_budget else None,
        "text_noise_scale": sample.text_budget.noise_scale if sample.text_budget else None,
        "per_dim_sensitivity": privacy.DEFAULT_SENSITIVITY,
    }
    _atomic_write(out_dir / "budget_report.json", json.dumps(report, indent=2) + "\n")
    _atomic_write(out_dir / "config.json", serialize_config(cfg))
    return 0


def cmd_pretrain(cfg: ExperimentConfig, force: bool = False) -> int:
    out_dir = Path(cfg["out_dir"])
    _prepare_out_dir(out_dir, force)
    train, _ = build_dataset(cfg)
    enc, trace = _maybe_pretrain(
        ExperimentConfig({**cfg.data, "pretrain": {**cfg["pretrain"], "enabled": True}}), train
    )
    named = models._params_to_model(enc)
    compress.save_checkpoint(named, out_dir / "encoders.bin")
    lines = ["epoch,loss"] + [f"{i},{_fmt(v)}" for i, v in enumerate(trace)]
    _atomic_write(out_dir / "loss_trace.csv", "\n".join(lines) + "\n")
    _atomic_write(out_dir / "config.json", serialize_config(cfg))
    return 0


def _macro_metrics(y_true, y_pred, n_classes: int):
    acc = float(np.mean(np.asarray(y_true) == np.asarray(y_pred)))
    precisions, recalls = [], []
    for c in range(n_classes):
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(y_true, y_pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(y_true, y_pred) if t == c and p != c)
        precisions.append(tp / (tp + fp) if tp + fp else 0.0)
        recalls.append(tp / (tp + fn) if tp + fn else 0.0)
    precision = float(np.mean(precisions))
    recall = float(np.mean(recalls))
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return acc, precision, recall, f1


def cmd_eval(cfg: ExperimentConfig, checkpoint_path) -> int:
    if not Path(checkpoint_path).exists():
        print(f"error: checkpoint not found: {checkpoint_path}", file=sys.stderr)
        return 1
    train, test = build_dataset(cfg)
    if cfg["privacy"]["enabled"]:
        train = privatized_to_records(privatize_dataset(cfg, train, stream_tag=1))
        test = privatized_to_records(privatize_dataset(cfg, test, stream_tag=2))
        standardize_features(train, test)
    model = build_model(cfg, train)
    params = ModelParams(compress.load_checkpoint(checkpoint_path))
    n_classes = max(r.label for r in test) + 1
    y_true = [r.label for r in test]
    y_pred = [model.predict(params, r) for r in test]
    acc, precision, recall, f1 = _macro_metrics(y_true, y_pred, n_classes)
    print(f"accuracy {acc:.6f}")
    print(f"precision {precision:.6f}")
    print(f"recall {recall:.6f}")
    print(f"f1 {f1:.6f}")
    return 0


def cmd_partition(cfg: ExperimentConfig, force: bool = False) -> int:
    out_dir = Path(cfg["out_dir"])
    _prepare_out_dir(out_dir, force)
    train, _ = build_dataset(cfg)
    plan = build_partition(cfg, train)
    doc = {
        "scheme": plan.scheme,
        "seed": plan.seed,
        "assignments": {str(k): v for k, v in plan.assignments.items()},
    }
    _atomic_write(out_dir / "partition.json", json.dumps(doc, indent=2) + "\n")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    data = json.loads(json.dumps(cfg.data))  # deep copy
    if args.out is not None:
        data["out_dir"] = args.out
    if args.seed is not None:
        data["seed"] = args.seed
    return resolve_config(data)


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("FEDROAD_LOG", "WARNING").upper())
    parser = argparse.ArgumentParser(prog="fedroad", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "privatize", "pretrain", "eval", "partition"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--force", action="store_true")
        if name == "eval":
            p.add_argument("--checkpoint", required=True)
    args = parser.parse_args(argv)
    try:
        cfg = _apply_overrides(parse_config(args.config), args)
        if args.command == "run":
            return cmd_run(cfg, force=args.force)
        if args.command == "privatize":
            return cmd_privatize(cfg, cfg["out_dir"], force=args.force)
        if args.command == "pretrain":
            return cmd_pretrain(cfg, force=args.force)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint)
        return cmd_partition(cfg, force=args.force)
    except (ConfigError, InputError, FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
