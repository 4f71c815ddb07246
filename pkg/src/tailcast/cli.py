"""``tailcast`` command line: synth | graph | train | eval | exceed.

Every command reads an optional JSON config (``--config``), applies flag
overrides and writes the fully resolved config next to its outputs.

Exit codes: 0 success, 1 validation error, 2 I/O error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

from .distributions import mixture_cdf_array
from .errors import MissingDataError, NumericError, TailcastError, ValidationError
from .graph import build_graph, read_stations_csv, write_edges_csv, write_stations_csv
from .model import Checkpoint
from .pipeline import (
    ALL_VARIANTS,
    ENS,
    MODEL_VARIANTS,
    SplitSpec,
    SyntheticConfig,
    TrainConfig,
    evaluate,
    evaluate_ensemble,
    generate_synthetic,
    predict_arrays,
    read_forecast_csv,
    train_variant,
    write_forecast_csv,
)

log = logging.getLogger("tailcast")

DATA_ROOT_ENV = "TAILCAST_DATA_ROOT"
FORECAST_FILE = "forecasts.csv"
STATION_FILE = "stations.csv"

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "jobs": 1,
    "data_dir": None,          # falls back to $TAILCAST_DATA_ROOT, then ./data
    "out": "runs",
    "epsilon": 0.01,
    "d_max": 300.0,
    "variants": list(ALL_VARIANTS),
    "lead_hours": None,        # None = every lead time in the data
    "ens_feature": "tp6",
    "synthetic": asdict(SyntheticConfig()),
    "model": {"embed_dim": 32, "hidden_dim": 64, "gnn_layers": 2, "xi_mode": "fixed",
              "xi_fixed": 0.5, "sigma_floor": 1e-3, "aggregation": "sum",
              "learn_gine_epsilon": True},
    "train": {"epochs": 25, "lr": 1e-4, "batch_days": 1, "log_features": ["tp6"]},
    "split": {"test_fraction": 0.25, "val_fraction": 0.15, "train": None, "test": None,
              "validation": None},
    "exceed": {"threshold_mm": 25.0, "init_time": None, "lead_hours": None,
               "variant": "NormalPointMassGPD"},
}

REPORT_SCHEMA = {
    "type": "array",
    "items": {
        "type": "object",
        "required": ["variant", "lead_hours", "crps", "brier", "qs99", "n_records", "space",
                     "conventions"],
        "additionalProperties": False,
        "properties": {
            "variant": {"type": "string", "enum": list(ALL_VARIANTS)},
            "lead_hours": {"type": "integer", "minimum": 1},
            "crps": {"type": "number", "minimum": 0},
            "brier": {"type": "number", "minimum": 0, "maximum": 1},
            "qs99": {"type": "number", "minimum": 0},
            "n_records": {"type": "integer", "minimum": 1},
            "space": {"const": "log-transformed"},
            "conventions": {
                "type": "object",
                "required": ["percentile", "brier_threshold"],
                "additionalProperties": {"type": "string"},
            },
        },
    },
}


# ---------------------------------------------------------------- config

def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ValidationError(f"unknown config key '{path}{key}'")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, f"{path}{key}.")
        else:
            out[key] = value
    return out


def load_config(path: str | None) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    try:
        user = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(user, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    return _merge(DEFAULT_CONFIG, user)


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = load_config(args.config)
    for key in ("seed", "jobs", "out"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if cfg["data_dir"] is None:
        cfg["data_dir"] = os.environ.get(DATA_ROOT_ENV, "data")
    if getattr(args, "data_dir", None):
        cfg["data_dir"] = args.data_dir
    cmd_overrides = {
        "stations": ("synthetic", "n_stations"), "days": ("synthetic", "n_days"),
        "members": ("synthetic", "n_members"), "features": ("synthetic", "n_features"),
        "leads": ("synthetic", "lead_hours"), "dry_fraction": ("synthetic", "dry_fraction"),
        "epochs": ("train", "epochs"), "batch_days": ("train", "batch_days"),
        "threshold": ("exceed", "threshold_mm"), "init_time": ("exceed", "init_time"),
        "exceed_lead": ("exceed", "lead_hours"), "variant": ("exceed", "variant"),
    }
    for flag, (section, key) in cmd_overrides.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg[section][key] = value
    if getattr(args, "variants", None):
        cfg["variants"] = args.variants
    if getattr(args, "lead", None):
        cfg["lead_hours"] = args.lead
    if getattr(args, "d_max", None) is not None:
        cfg["d_max"] = args.d_max
    unknown = [v for v in cfg["variants"] if v not in ALL_VARIANTS]
    if unknown:
        raise ValidationError(f"unknown variant(s) {unknown}; choose from {list(ALL_VARIANTS)}")
    if int(cfg["jobs"]) < 1:
        raise ValidationError("--jobs must be >= 1")
    return cfg


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_resolved(out: Path, command: str, cfg: dict) -> None:
    _write_json(out / f"resolved_config_{command}.json", cfg)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------- data helpers

def _load_inputs(cfg: dict):
    data_dir = Path(cfg["data_dir"])
    stations = read_stations_csv(data_dir / STATION_FILE)
    graph = build_graph(stations, float(cfg["d_max"]))
    cubes = read_forecast_csv(data_dir / FORECAST_FILE, graph.station_ids)
    leads = cfg["lead_hours"] or sorted(cubes)
    if isinstance(leads, int):
        leads = [leads]
    missing = [lead for lead in leads if lead not in cubes]
    if missing:
        raise MissingDataError(f"lead time(s) {missing} not present; have {sorted(cubes)}")
    return stations, graph, {lead: cubes[lead] for lead in leads}


def _split(cfg: dict, init_times) -> SplitSpec:
    sp = cfg["split"]
    if sp["train"] and sp["test"]:
        return SplitSpec(tuple(sp["train"]), tuple(sp["test"]),
                         tuple(sp["validation"]) if sp["validation"] else None,
                         sp["val_fraction"])
    return SplitSpec.by_fraction(init_times, sp["test_fraction"], sp["val_fraction"])


def _ckpt_path(out: Path, variant: str, lead: int) -> Path:
    return out / "checkpoints" / f"{variant}_{lead}h.json"


# ---------------------------------------------------------------- commands

def cmd_synth(cfg: dict) -> int:
    out = Path(cfg["data_dir"])
    syn = SyntheticConfig(**cfg["synthetic"])
    data = generate_synthetic(syn, int(cfg["seed"]))
    out.mkdir(parents=True, exist_ok=True)
    write_stations_csv(out / STATION_FILE, data.stations)
    rows = write_forecast_csv(out / FORECAST_FILE, [data.cubes[k] for k in sorted(data.cubes)])
    _write_resolved(out, "synth", cfg)
    manifest = {
        "seed": int(cfg["seed"]),
        "rows": rows,
        "files": {name: _sha256(out / name) for name in (STATION_FILE, FORECAST_FILE)},
        "created_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    _write_json(out / "manifest.json", manifest)
    log.info("wrote %d forecast rows to %s", rows, out)
    return 0


def cmd_graph(cfg: dict) -> int:
    out = Path(cfg["out"])
    stations = read_stations_csv(Path(cfg["data_dir"]) / STATION_FILE)
    graph = build_graph(stations, float(cfg["d_max"]))
    out.mkdir(parents=True, exist_ok=True)
    write_edges_csv(out / "edges.csv", graph)
    isolated = [graph.station_ids[i] for i in range(graph.n_nodes) if not graph.neighbours(i)]
    _write_json(out / "graph_summary.json", {"n_nodes": graph.n_nodes,
                                             "n_edges": len(graph.edges),
                                             "d_max_km": graph.d_max, "isolated": isolated})
    _write_resolved(out, "graph", cfg)
    return 0


def cmd_train(cfg: dict) -> int:
    out = Path(cfg["out"])
    _, graph, cubes = _load_inputs(cfg)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "logs").mkdir(parents=True, exist_ok=True)
    tc = TrainConfig(**cfg["train"])
    for lead, cube in cubes.items():
        split = _split(cfg, cube.init_times)
        for variant in cfg["variants"]:
            if variant == ENS:
                continue
            log.info("training %s at lead %dh", variant, lead)
            ckpt, history = train_variant(variant, cube, graph, split, int(cfg["seed"]), tc,
                                          float(cfg["epsilon"]), **cfg["model"])
            ckpt.save(_ckpt_path(out, variant, lead))
            history.write_csv(out / "logs" / f"{variant}_{lead}h.csv")
    _write_resolved(out, "train", cfg)
    return 0


def cmd_eval(cfg: dict) -> int:
    out = Path(cfg["out"])
    _, graph, cubes = _load_inputs(cfg)
    tasks = []
    for lead, cube in cubes.items():
        _, _, test_idx = _split(cfg, cube.init_times).resolve(cube.init_times)
        test = cube.subset(test_idx)
        for variant in cfg["variants"]:
            tasks.append((variant, lead, test))

    def run(task):
        variant, lead, test = task
        if variant == ENS:
            return evaluate_ensemble(test, cfg["ens_feature"], float(cfg["epsilon"]))
        path = _ckpt_path(out, variant, lead)
        if not path.exists():
            raise FileNotFoundError(f"missing checkpoint {path}; run 'tailcast train' first")
        return evaluate(Checkpoint.load(path), test, graph, variant)

    with ThreadPoolExecutor(max_workers=int(cfg["jobs"])) as pool:
        results = list(pool.map(run, tasks))

    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "report.json", [r.report.to_dict() for r in results])
    with open(out / "station_scores.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["variant", "lead_hours", "station_id", "n_records", "crps", "brier", "qs99"])
        for r in results:
            for s in r.stations:
                writer.writerow([s.variant, s.lead_hours, s.station_id, s.n_records,
                                 repr(s.crps), repr(s.brier), repr(s.qs99)])
    _write_resolved(out, "eval", cfg)
    for r in results:
        rep = r.report
        print(f"{rep.variant:28s} {rep.lead_hours:4d}h  CRPS={rep.crps:.4f}  "
              f"Brier={rep.brier:.4f}  QS99={rep.qs99:.4f}")
    return 0


def cmd_exceed(cfg: dict) -> int:
    out = Path(cfg["out"])
    ex = cfg["exceed"]
    threshold = float(ex["threshold_mm"])
    if threshold < 0:
        raise ValidationError("threshold must be non-negative")
    stations, graph, cubes = _load_inputs(cfg)
    lead = ex["lead_hours"] or sorted(cubes)[0]
    if lead not in cubes:
        raise MissingDataError(f"lead {lead}h not in the data")
    cube = cubes[lead]
    init = ex["init_time"] or cube.init_times[-1]
    if init not in cube.init_times:
        raise MissingDataError(f"init_time {init!r} not found for lead {lead}h")
    day = cube.subset([cube.init_times.index(init)])
    ckpt = Checkpoint.load(_ckpt_path(out, ex["variant"], lead))
    prm = predict_arrays(ckpt, day, graph)
    eps = ckpt.config.epsilon
    cdf = mixture_cdf_array(prm["p"], prm["mu"], prm["sigma"], prm["u"], prm["sigma_u"],
                            prm["xi"], prm["c"], math.log(threshold + eps))[0]
    prob = 1.0 - cdf
    ens_prob = (day.feature(cfg["ens_feature"])[0] > threshold).mean(axis=-1)
    out.mkdir(parents=True, exist_ok=True)
    stamp = init.replace(":", "").replace("-", "")
    path = out / f"exceedance_{stamp}_{lead}h_{threshold:g}mm.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["station_id", "lat", "lon", "prob", "ens_prob"])
        for s, st in enumerate(stations):
            writer.writerow([st.id, st.latitude, st.longitude, repr(float(prob[s])),
                             repr(float(ens_prob[s]))])
    _write_resolved(out, "exceed", cfg)
    print(path)
    return 0


COMMANDS = {"synth": cmd_synth, "graph": cmd_graph, "train": cmd_train, "eval": cmd_eval,
            "exceed": cmd_exceed}


# ---------------------------------------------------------------- argument parsing

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--data-dir", dest="data_dir",
                        help=f"input data directory (default ${DATA_ROOT_ENV} or ./data)")
    common.add_argument("--d-max", dest="d_max", type=float, help="graph distance threshold (km)")
    common.add_argument("--lead", type=int, nargs="+", help="lead times (hours) to process")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tailcast", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic benchmark")
    p.add_argument("--stations", type=int)
    p.add_argument("--days", type=int)
    p.add_argument("--members", type=int)
    p.add_argument("--features", type=int)
    p.add_argument("--leads", type=int, nargs="+")
    p.add_argument("--dry-fraction", dest="dry_fraction", type=float)

    sub.add_parser("graph", parents=[common], help="build the station graph")

    p = sub.add_parser("train", parents=[common], help="train model variants")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-days", dest="batch_days", type=int)
    p.add_argument("--variants", nargs="+")

    p = sub.add_parser("eval", parents=[common], help="score variants on the test split")
    p.add_argument("--variants", nargs="+")

    p = sub.add_parser("exceed", parents=[common], help="per-station exceedance probabilities")
    p.add_argument("--threshold", type=float, help="threshold in mm (default 25)")
    p.add_argument("--init-time", dest="init_time")
    p.add_argument("--exceed-lead", dest="exceed_lead", type=int)
    p.add_argument("--variant", choices=list(MODEL_VARIANTS))
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "synth" and args.out is not None:
            cfg["data_dir"] = args.out  # synth writes the data directory itself
        return COMMANDS[args.command](cfg)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (ValidationError, TailcastError, ValueError, KeyError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
