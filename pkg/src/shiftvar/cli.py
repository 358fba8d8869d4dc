"""Command-line entry point: ``shiftvar {toy-train,toy-sweep,shift-eval,report}``.

Settings come from built-in defaults, then an optional ``--config`` file of
``key = value`` lines, then command-line flags. Each run writes into
``<out>/<config-hash>/``; files are replaced atomically.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import svg
from .downsample import STRATEGY_TOKENS
from .geometry import delta_hmean
from .harness import FileDetector, ShiftConfig, ToyDetector, load_manifest, resolve_threads, run_sweep
from .toy import (
    ToyModel,
    TrainConfig,
    make_training_set,
    oscillation_stats,
    shift_sweep,
    train,
)
from .tensor import seeded_rng

log = logging.getLogger("shiftvar")

ERROR_PREFIX = "shiftvar: error:"

# keys that never change results and so stay out of the config hash
UNHASHED = ("out", "threads", "config")

DEFAULTS = {
    "toy-train": {
        "seed": 0, "out": "runs", "threads": 0, "strategy": "strided_conv",
        "canvas": 64, "spacing": 4, "glyph_size": 15, "stroke": 2, "sigma": 3.75,
        "channels": 8, "iters": 1500, "batch": 8, "lr": 1e-3, "control": False,
        "loss_threshold": 0.01,
    },
    "toy-sweep": {
        "seed": 0, "out": "runs", "threads": 0, "strategy": "strided_conv",
        "checkpoint": [], "canvas": 64, "y": -1, "glyph_size": 15, "stroke": 2,
    },
    "shift-eval": {
        "seed": 0, "out": "runs", "threads": 0, "strategy": "strided_conv",
        "manifest": "", "detections": "", "checkpoint": [], "dataset": "",
        "gt_format": "ic15-quad", "r": 16, "target_h": 256, "target_w": 256,
        "iou": 0.5, "threshold": 0.5,
    },
    "report": {
        "seed": 0, "out": "", "threads": 0, "strategy": "strided_conv",
        "runs": [], "r": 16,
    },
}


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration


def _coerce(key: str, raw, default):
    if isinstance(raw, str) and not isinstance(default, str):
        raw = raw.strip()
    try:
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, list):
            if isinstance(raw, list):
                return [str(v) for v in raw]
            return [v.strip() for v in raw.split(",") if v.strip()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return str(raw).strip()
    except ValueError:
        raise CliError(f"invalid value {raw!r} for {key}") from None


def read_config_file(path) -> dict[str, str]:
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read config file {path}: {exc.strerror}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def resolve_config(command: str, flags: dict, config_path: str | None = None) -> dict:
    """defaults < config file < flags; unknown keys are rejected."""
    defaults = DEFAULTS[command]
    cfg = dict(defaults)
    layers = []
    if config_path:
        layers.append(read_config_file(config_path))
    layers.append(flags)
    for layer in layers:
        for key, raw in layer.items():
            if key not in defaults:
                raise CliError(f"unknown setting {key!r} for {command}")
            cfg[key] = _coerce(key, raw, defaults[key])
    if cfg["strategy"] not in STRATEGY_TOKENS:
        raise CliError(f"unknown strategy {cfg['strategy']!r} (choose from {', '.join(STRATEGY_TOKENS)})")
    if cfg["seed"] < 0 or cfg["seed"] >= 2**64:
        raise CliError(f"seed must be an unsigned 64-bit integer, got {cfg['seed']}")
    return cfg


def canonical_text(command: str, cfg: dict) -> str:
    lines = [f"command={command}"]
    for key in sorted(cfg):
        if key in UNHASHED:
            continue
        v = cfg[key]
        if isinstance(v, list):
            v = ",".join(v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{key}={v}")
    return "\n".join(lines) + "\n"


def config_hash(command: str, cfg: dict) -> str:
    return hashlib.sha256(canonical_text(command, cfg).encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# output helpers


def write_atomic(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(data, str):
        data = data.encode("utf-8")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def csv_text(header, rows) -> str:
    out = [",".join(header)]
    for row in rows:
        out.append(",".join(f"{v:.6f}" if isinstance(v, float) else str(v) for v in row))
    return "\n".join(out) + "\n"


def read_csv(path: Path) -> list[dict[str, str]]:
    lines = path.read_text(encoding="utf-8").splitlines()
    header = lines[0].split(",")
    return [dict(zip(header, line.split(","))) for line in lines[1:] if line]


def run_dir(command: str, cfg: dict) -> tuple[Path, str]:
    digest = config_hash(command, cfg)
    return Path(cfg["out"]) / digest, digest


def write_meta(directory: Path, command: str, cfg: dict, digest: str, extra=None) -> None:
    lines = [f"command={command}", f"config_hash={digest}"]
    lines += canonical_text(command, cfg).splitlines()[1:]
    for k, v in (extra or {}).items():
        lines.append(f"{k}={v}")
    write_atomic(directory / "meta.txt", "\n".join(lines) + "\n")


def read_meta(directory: Path) -> dict[str, str]:
    path = directory / "meta.txt"
    if not path.is_file():
        raise CliError(f"not a run directory (missing {path})")
    return dict(line.split("=", 1) for line in path.read_text(encoding="utf-8").splitlines() if "=" in line)


def _load_model(path) -> ToyModel:
    try:
        with open(path, "rb") as f:
            return ToyModel.load(f)
    except OSError as exc:
        raise CliError(f"cannot read checkpoint {path}: {exc.strerror}") from None


# ---------------------------------------------------------------------------
# commands


def cmd_toy_train(cfg: dict) -> Path:
    directory, digest = run_dir("toy-train", cfg)
    data = make_training_set(cfg["canvas"], cfg["spacing"], seeded_rng(cfg["seed"]),
                             cfg["glyph_size"], cfg["stroke"], cfg["sigma"])
    model = ToyModel(cfg["strategy"], cfg["channels"], cfg["seed"], downsample=not cfg["control"])
    result = train(model, data, TrainConfig(cfg["iters"], cfg["batch"], cfg["lr"], cfg["seed"],
                                            cfg["loss_threshold"]))
    converged = result.final_loss < cfg["loss_threshold"]
    if not converged:
        log.warning("final loss %.6f did not reach threshold %g", result.final_loss, cfg["loss_threshold"])
    write_atomic(directory / "checkpoint.bin", model.to_bytes())
    write_atomic(directory / "loss.csv",
                 csv_text(["iter", "loss"], [(i, float(v)) for i, v in enumerate(result.losses)]))
    write_meta(directory, "toy-train", cfg, digest, {
        "final_loss": f"{result.final_loss:.6f}",
        "converged": converged,
        "num_samples": len(data),
    })
    return directory


def cmd_toy_sweep(cfg: dict) -> Path:
    if not cfg["checkpoint"]:
        raise CliError("toy-sweep needs at least one --checkpoint")
    directory, digest = run_dir("toy-sweep", cfg)
    threads = resolve_threads(cfg["threads"] or None)
    y = cfg["y"] if cfg["y"] >= 0 else None
    stats_rows, series, used = [], [], {}
    for path in cfg["checkpoint"]:
        model = _load_model(path)
        label = model.strategy.value if model.downsample else "stride1_control"
        used[label] = used.get(label, 0) + 1
        if used[label] > 1:
            label = f"{label}_{used[label]}"
        sweep = shift_sweep(model, cfg["canvas"], y, cfg["glyph_size"], cfg["stroke"], threads)
        st = oscillation_stats(sweep)
        write_atomic(directory / f"sweep_{label}.csv",
                     csv_text(["x", "max_response"], sweep.rows()))
        stats_rows.append((label, model.seed, st.amplitude, st.mean, st.dominant_period))
        series.append(svg.Series(label, sweep.positions, sweep.responses))
    write_atomic(directory / "stats.csv",
                 csv_text(["strategy", "seed", "amplitude", "mean", "dominant_period"], stats_rows))
    panel = svg.Panel("Maximum response in output map", "glyph x position (px)",
                      "max response", series)
    write_atomic(directory / "sweep.svg", svg.render([panel]))
    write_meta(directory, "toy-sweep", cfg, digest)
    return directory


def cmd_shift_eval(cfg: dict) -> Path:
    if not cfg["manifest"]:
        raise CliError("shift-eval needs --manifest")
    if bool(cfg["detections"]) == bool(cfg["checkpoint"]):
        raise CliError("shift-eval needs exactly one of --detections or --checkpoint")
    manifest = Path(cfg["manifest"])
    if not manifest.is_file():
        raise CliError(f"manifest not found: {manifest}")
    directory, digest = run_dir("shift-eval", cfg)
    dataset = load_manifest(manifest, cfg["gt_format"])
    if cfg["detections"]:
        detector = FileDetector(cfg["detections"])
    else:
        detector = ToyDetector(_load_model(cfg["checkpoint"][0]), cfg["threshold"])
    config = ShiftConfig(cfg["r"], cfg["target_h"], cfg["target_w"], cfg["iou"])
    report = run_sweep(dataset, detector, config, resolve_threads(cfg["threads"] or None))
    curve = report.curve

    rows = [(s, sc.precision, sc.recall, sc.hmean, sc.true_positives, sc.num_detections,
             sc.num_ground_truth) for s, sc in curve.entries]
    write_atomic(directory / "shifts.csv",
                 csv_text(["shift", "precision", "recall", "hmean", "tp", "num_det", "num_gt"], rows))
    h = curve.hmeans()
    delta_rows, dev_rows = [], []
    for r in range(cfg["r"] + 1):
        window = [h[s] for s in range(-r, r + 1)]
        delta_rows.append((r, min(window), max(window), delta_hmean(curve, r)))
        lo, hi = curve.baseline_deviation(r)
        dev_rows.append((r, lo, hi))
    write_atomic(directory / "delta_hmean.csv",
                 csv_text(["r", "hmean_min", "hmean_max", "delta_hmean"], delta_rows))
    write_atomic(directory / "deviation.csv", csv_text(["r", "dev_min", "dev_max"], dev_rows))

    rs = [row[0] for row in dev_rows]
    label = cfg["strategy"]
    panels = [
        svg.Panel("HMean deviation from shift 0", "max absolute shift (px)", "HMean - HMean(0)", [
            svg.Series(f"{label} max", rs, [row[2] for row in dev_rows]),
            svg.Series(f"{label} min", rs, [row[1] for row in dev_rows], dashed=True),
        ]),
        svg.Panel("Delta HMean", "max absolute shift r (px)", "Delta HMean",
                  [svg.Series(label, rs, [row[3] for row in delta_rows])]),
    ]
    write_atomic(directory / "shift_eval.svg", svg.render(panels))
    write_meta(directory, "shift-eval", cfg, digest, {
        "dataset_name": cfg["dataset"] or manifest.stem,
        "num_samples": report.num_samples,
        "num_admissible": report.num_admissible,
        "excluded": ",".join(report.excluded),
    })
    return directory


def cmd_report(cfg: dict) -> str:
    """One row per (strategy, dataset): HMean at shift 0 and Delta HMean at ``r``."""
    if not cfg["runs"]:
        raise CliError("report needs at least one run directory")
    seen = {}
    rows = []
    for run in cfg["runs"]:
        directory = Path(run)
        if not directory.is_dir():
            raise CliError(f"missing run directory: {directory}")
        meta = read_meta(directory)
        if meta.get("command") != "shift-eval":
            raise CliError(f"{directory} is not a shift-eval run")
        digest = meta["config_hash"]
        if digest in seen:
            log.warning("run %s duplicates %s (config %s); skipped", directory, seen[digest], digest)
            continue
        seen[digest] = directory
        shifts = {int(row["shift"]): row for row in read_csv(directory / "shifts.csv")}
        deltas = {int(row["r"]): row for row in read_csv(directory / "delta_hmean.csv")}
        r = min(cfg["r"], max(deltas))
        rows.append((meta["strategy"], meta["dataset_name"], digest,
                     float(shifts[0]["hmean"]), r, float(deltas[r]["delta_hmean"])))
    rows.sort(key=lambda row: (row[1], STRATEGY_TOKENS.index(row[0]) if row[0] in STRATEGY_TOKENS else 99, row[2]))
    text = csv_text(["strategy", "dataset", "config_hash", "hmean_shift0", "r", "delta_hmean"], rows)
    if cfg["out"]:
        write_atomic(Path(cfg["out"]) / "report.csv", text)
    return text


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shiftvar", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    def common(p):
        p.add_argument("--config", default=None, help="key = value settings file")
        p.add_argument("--seed", default=S, help="unsigned 64-bit seed")
        p.add_argument("--out", default=S, help="output root directory")
        p.add_argument("--strategy", choices=STRATEGY_TOKENS, default=S)
        p.add_argument("--r", default=S, help="maximum shift")
        p.add_argument("--threads", default=S, help="worker threads (EQUIVAR_THREADS fallback)")

    p = sub.add_parser("toy-train", help="train the toy glyph detector")
    common(p)
    for flag in ("canvas", "spacing", "glyph-size", "stroke", "sigma", "channels", "iters",
                 "batch", "lr", "loss-threshold"):
        p.add_argument(f"--{flag}", default=S)
    p.add_argument("--control", action="store_const", const="true", default=S,
                   help="stride-1 encoder (no downsampling)")

    p = sub.add_parser("toy-sweep", help="sweep the glyph horizontally through trained models")
    common(p)
    p.add_argument("--checkpoint", action="append", default=S)
    for flag in ("canvas", "y", "glyph-size", "stroke"):
        p.add_argument(f"--{flag}", default=S)

    p = sub.add_parser("shift-eval", help="score a detector on shifted crops of a dataset")
    common(p)
    p.add_argument("--manifest", default=S)
    p.add_argument("--detections", default=S, help="root of <sample>/shift_<s>.txt files")
    p.add_argument("--checkpoint", action="append", default=S, help="toy model checkpoint")
    for flag in ("dataset", "gt-format", "target-h", "target-w", "iou", "threshold"):
        p.add_argument(f"--{flag}", default=S)

    p = sub.add_parser("report", help="summarise shift-eval runs")
    common(p)
    p.add_argument("runs", nargs="*", default=S)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    if "threads" not in flags and os.environ.get("EQUIVAR_THREADS"):
        flags["threads"] = os.environ["EQUIVAR_THREADS"]
    try:
        cfg = resolve_config(args.command, flags, args.config)
        if args.command == "toy-train":
            print(cmd_toy_train(cfg))
        elif args.command == "toy-sweep":
            print(cmd_toy_sweep(cfg))
        elif args.command == "shift-eval":
            print(cmd_shift_eval(cfg))
        else:
            sys.stdout.write(cmd_report(cfg))
    except (CliError, ValueError, OSError, RuntimeError) as exc:
        msg = " ".join(str(exc).split())
        print(f"{ERROR_PREFIX} {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
