"""Command line entry point: ``crend {synth,train,predict,eval,report}``.

All commands share one JSON config with a section per command. ``--set
section.key=value`` overrides single entries; values are parsed as JSON
when possible and kept as strings otherwise.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import shutil
import sys
from dataclasses import fields
from pathlib import Path

from .phantom import PhantomSpec, generate_dataset, load_manifest
from .training import PROFILES, TrainConfig, set_deterministic, with_overrides

logger = logging.getLogger("crend")

COMMANDS = ("synth", "train", "predict", "eval", "report")
SECTION_KEYS = {
    "synth": {f.name for f in fields(PhantomSpec)} | {"n_volumes", "out_dir"},
    "train": {f.name for f in fields(TrainConfig)} | {"profile", "manifest", "resume"},
    "predict": {"checkpoint", "manifest", "out_dir", "refine", "n_points", "k", "overlap", "seed"},
    "eval": {"manifest", "pred_dir", "out_dir", "iou_threshold", "small_radius_mm"},
    "report": {"eval_dirs", "logs", "out_dir"},
}


class ConfigError(ValueError):
    pass


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path=None, overrides=()) -> dict:
    cfg: dict = {}
    if path is not None:
        try:
            cfg = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(cfg, dict):
            raise ConfigError("config root must be a JSON object")
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        section, name = key.split(".", 1)
        cfg.setdefault(section, {})[name] = _parse_value(value)
    for section, values in cfg.items():
        if section not in SECTION_KEYS:
            raise ConfigError(f"unknown config section {section!r}")
        unknown = set(values) - SECTION_KEYS[section]
        if unknown:
            raise ConfigError(f"unknown field(s) in section {section!r}: {', '.join(sorted(unknown))}")
    return cfg


def _section(cfg: dict, name: str, args, flag_map: dict) -> dict:
    sec = dict(cfg.get(name, {}))
    for attr, key in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            sec[key] = value
    return sec


def _require(sec: dict, key: str, command: str):
    if sec.get(key) is None:
        raise ConfigError(f"{command}: missing required field {key!r}")
    return sec[key]


# --------------------------------------------------------------------------
# commands


def cmd_synth(sec: dict) -> int:
    out_dir = Path(_require(sec, "out_dir", "synth"))
    n = int(sec.pop("n_volumes", 1))
    sec.pop("out_dir")
    spec = PhantomSpec(**sec)
    manifest = generate_dataset(spec, n, out_dir)
    print(f"wrote {len(manifest['volumes'])} volumes to {out_dir}")
    return 0


def _train_config(sec: dict) -> TrainConfig:
    profile = sec.pop("profile", "toy")
    if profile not in PROFILES:
        raise ConfigError(f"train: profile must be one of {sorted(PROFILES)}, got {profile!r}")
    return with_overrides(PROFILES[profile], **sec)


def cmd_train(sec: dict) -> int:
    from .training import train

    manifest = _require(sec, "manifest", "train")
    resume = sec.pop("resume", None)
    sec.pop("manifest")
    cfg = _train_config(sec)
    ckpt_dir = cfg.checkpoint_dir
    if ckpt_dir is None:
        ckpt_dir = str(Path(os.environ.get("CREND_CACHE_DIR", ".")) / "checkpoints")
        cfg = with_overrides(cfg, checkpoint_dir=ckpt_dir)
    set_deterministic(cfg.deterministic)
    ckpt, log = train(cfg, manifest, ckpt_dir, resume=resume)
    final = Path(ckpt_dir) / "final.pt"
    shutil.copyfile(ckpt, final)
    print(f"checkpoint {final}\nlog {log}")
    return 0


def cmd_predict(sec: dict) -> int:
    from .backbone import param_count
    from .inference import predict_volume
    from .training import load_checkpoint
    from .volume import load_volume, save_labels, save_volume, Volume

    checkpoint = _require(sec, "checkpoint", "predict")
    manifest_path = _require(sec, "manifest", "predict")
    out_dir = Path(_require(sec, "out_dir", "predict"))
    model, head, tcfg, _ = load_checkpoint(checkpoint)
    manifest, root = load_manifest(manifest_path)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for entry in manifest["volumes"]:
        stem = Path(entry["image"]).name.removesuffix(".cvol").removesuffix("_image")
        v = load_volume(root / entry["image"])
        pred = predict_volume(
            (model, head, tcfg), v, refine=bool(sec.get("refine", True)),
            n_points=sec.get("n_points"), k=sec.get("k", 2), seed=int(sec.get("seed", 0)),
            overlap=float(sec.get("overlap", 0.5)),
        )
        save_volume(out_dir / f"{stem}_prob_follicle.cvol", Volume(pred.probs[0], v.spacing))
        save_volume(out_dir / f"{stem}_prob_ovary.cvol", Volume(pred.probs[1], v.spacing))
        save_labels(out_dir / f"{stem}_label.cvol", pred.mask)
        entries.append({"volume": stem, "label": f"{stem}_label.cvol", "refined_points": int(len(pred.refined_voxels))})
    index = {
        "volumes": entries,
        "params": param_count(model.cfg, include_heads=True, hidden_width=tcfg.hidden_width),
    }
    (out_dir / "predictions.json").write_text(json.dumps(index, indent=2, sort_keys=True))
    print(f"wrote {len(entries)} predictions to {out_dir}")
    return 0


def _fmt(value) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    if isinstance(value, float):
        return repr(round(value, 6))
    return str(value)


def _json_safe(obj):
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    return obj


def cmd_eval(sec: dict) -> int:
    from .metrics import METRIC_COLUMNS, aggregate, evaluate
    from .volume import load_labels

    manifest, root = load_manifest(_require(sec, "manifest", "eval"))
    pred_dir = Path(_require(sec, "pred_dir", "eval"))
    out_dir = Path(sec.get("out_dir") or pred_dir)
    index_path = pred_dir / "predictions.json"
    if not index_path.exists():
        raise ConfigError(f"eval: {index_path} not found; run predict first")
    index = json.loads(index_path.read_text())
    preds = {e["volume"]: e["label"] for e in index["volumes"]}
    rows, reports = [], []
    for entry in manifest["volumes"]:
        stem = Path(entry["label"]).name.removesuffix(".cvol").removesuffix("_label")
        if stem not in preds:
            raise ConfigError(f"eval: no prediction for volume {stem!r} in {pred_dir}")
        gt = load_labels(root / entry["label"])
        pred = load_labels(pred_dir / preds[stem])
        rep = evaluate(
            pred, gt, iou_thresh=float(sec.get("iou_threshold", 0.30)),
            small_radius_mm=float(sec.get("small_radius_mm", 5.0)),
        )
        reports.append(rep)
        for structure in ("follicle", "ovary"):
            row = {"volume": stem, "structure": structure}
            for col in METRIC_COLUMNS:
                key = f"{structure}_{col}"
                if key in rep:
                    row[col] = rep[key]
                elif structure == "follicle":
                    row[col] = rep[col]
                else:
                    row[col] = None
            rows.append(row)
    out_dir.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("volume", "structure") + METRIC_COLUMNS)
    for row in rows:
        writer.writerow([row["volume"], row["structure"]] + [_fmt(row[c]) for c in METRIC_COLUMNS])
    (out_dir / "metrics.csv").write_text(buf.getvalue())
    summary = {"aggregate": aggregate(reports), "params": index.get("params"),
               "per_volume": [dict(volume=r["volume"], **_json_safe(rep)) for r, rep in zip(rows[::2], reports)]}
    (out_dir / "metrics.json").write_text(json.dumps(_json_safe(summary), indent=2, sort_keys=True))
    agg = summary["aggregate"]
    print(f"follicle DSC {agg['follicle_dsc']['mean']:.2f}  ovary DSC {agg['ovary_dsc']['mean']:.2f}")
    return 0


def cmd_report(sec: dict) -> int:
    from .report import write_report

    eval_dirs = _require(sec, "eval_dirs", "report")
    out_dir = Path(_require(sec, "out_dir", "report"))
    written = write_report(eval_dirs, sec.get("logs") or [], out_dir)
    print("\n".join(str(p) for p in written))
    return 0


# --------------------------------------------------------------------------
# argument parsing


def _named_paths(items):
    """``NAME=PATH`` or ``PATH`` (name taken from the directory)."""
    out = {}
    for item in items or []:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = Path(item).name, item
        out[name] = path
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config with one section per command")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config entry (repeatable)")
    common.add_argument("--seed", type=int, help="seed for the command")
    common.add_argument("--deterministic", action="store_true", default=None,
                        help="deterministic kernels and single-threaded execution")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="crend", description="Contrastive rendering segmentation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic phantom dataset")
    p.add_argument("--out", dest="out_dir")
    p.add_argument("--n", dest="n_volumes", type=int)

    p = sub.add_parser("train", parents=[common], help="train a model from a manifest")
    p.add_argument("--manifest")
    p.add_argument("--out", dest="checkpoint_dir")
    p.add_argument("--profile", choices=sorted(PROFILES))
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume")

    p = sub.add_parser("predict", parents=[common], help="predict every volume in a manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--out", dest="out_dir")
    p.add_argument("--no-refine", dest="refine", action="store_false", default=None)
    p.add_argument("--n-points", dest="n_points", type=int)

    p = sub.add_parser("eval", parents=[common], help="score predictions against ground truth")
    p.add_argument("--manifest")
    p.add_argument("--pred", dest="pred_dir")
    p.add_argument("--out", dest="out_dir")

    p = sub.add_parser("report", parents=[common], help="plots and a summary table")
    p.add_argument("--eval", dest="eval_dirs", action="append", metavar="[NAME=]DIR")
    p.add_argument("--log", dest="logs", action="append", metavar="[NAME=]PATH")
    p.add_argument("--out", dest="out_dir")
    return parser


FLAG_MAPS = {
    "synth": {"out_dir": "out_dir", "n_volumes": "n_volumes", "seed": "seed"},
    "train": {"manifest": "manifest", "checkpoint_dir": "checkpoint_dir", "profile": "profile",
              "epochs": "epochs", "resume": "resume", "seed": "seed", "deterministic": "deterministic"},
    "predict": {"checkpoint": "checkpoint", "manifest": "manifest", "out_dir": "out_dir",
                "refine": "refine", "n_points": "n_points", "seed": "seed"},
    "eval": {"manifest": "manifest", "pred_dir": "pred_dir", "out_dir": "out_dir"},
    "report": {"out_dir": "out_dir"},
}
HANDLERS = {"synth": cmd_synth, "train": cmd_train, "predict": cmd_predict, "eval": cmd_eval, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        sec = _section(cfg, args.command, args, FLAG_MAPS[args.command])
        if args.command == "report":
            if args.eval_dirs:
                sec["eval_dirs"] = _named_paths(args.eval_dirs)
            if args.logs:
                sec["logs"] = _named_paths(args.logs)
        if args.deterministic:
            set_deterministic(True)
        return HANDLERS[args.command](sec)
    except (ConfigError, ValueError, TypeError, FileNotFoundError) as exc:
        print(f"crend {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"crend {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
