"""Command-line entry points: simulate, preprocess, train, eval, infer.

Log verbosity comes from the ``SOILECHO_LOG_LEVEL`` environment variable
(default WARNING).
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .errors import ConfigError, DivergenceError, InsufficientDataError, NoSyncError, ScanQualityError
from .fmcw import ChirpConfig, TemplateProfile, capture_template
from .model import predict
from .pipeline import HeightTrack, preprocess_scan, scan_profiles, validate_scan
from .physics import PRESET_GRIDS, SensorGeometry, SoilParams, get_preset
from .simulate import ScanPlan, synthesize_recording, synthesize_template_recording
from .training import EvalReport, Sample, TrainConfig, holdout, loocv, train

log = logging.getLogger("soilecho")

MANIFEST = "manifest.json"
INDEX = "index.json"
TEMPLATE_WAV = "template.wav"
TEMPLATE_TENSOR = "template.sstn"
TEMPLATE_PROFILES = 50


# ---------------------------------------------------------------- config

@dataclass
class SoilSpec:
    preset: str
    levels: list[float]
    params: SoilParams


@dataclass
class ExperimentConfig:
    seed: int = 0
    chirp: ChirpConfig = field(default_factory=ChirpConfig)
    geometry: SensorGeometry = field(default_factory=SensorGeometry)
    scan: dict = field(default_factory=dict)
    soils: list[SoilSpec] = field(default_factory=list)
    scans_per_level: int = 15
    half_width: float = 1.0
    velocity_jitter: float = 0.005
    start_jitter: float = 0.005
    template_chirps: int = 60
    train: TrainConfig = field(default_factory=TrainConfig)
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict | None) -> "ExperimentConfig":
        d = dict(d or {})
        known = {"seed", "chirp", "geometry", "scan", "soils", "scans_per_level", "half_width",
                 "velocity_jitter", "start_jitter", "template_chirps", "train"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        soils = []
        for entry in d.get("soils") or [{"preset": "loamy"}]:
            soils.append(_soil_spec(entry))
        cfg = cls(
            seed=int(d.get("seed", 0)),
            chirp=ChirpConfig.from_dict(d.get("chirp")),
            geometry=SensorGeometry(**(d.get("geometry") or {})),
            scan=dict(d.get("scan") or {}),
            soils=soils,
            scans_per_level=int(d.get("scans_per_level", 15)),
            half_width=float(d.get("half_width", 1.0)),
            velocity_jitter=float(d.get("velocity_jitter", 0.005)),
            start_jitter=float(d.get("start_jitter", 0.005)),
            template_chirps=int(d.get("template_chirps", 60)),
            train=TrainConfig.from_dict(d.get("train")),
            raw=d,
        )
        if cfg.scans_per_level < 1:
            raise ConfigError("scans_per_level must be >= 1")
        if cfg.half_width < 0 or cfg.velocity_jitter < 0 or cfg.start_jitter < 0:
            raise ConfigError("half_width and jitters must be non-negative")
        # validate the scan plan once up front
        ScanPlan.from_dict(cfg.scan, cfg.chirp)
        return cfg


def _soil_spec(entry: dict) -> SoilSpec:
    entry = dict(entry)
    name = entry.get("preset", "loamy")
    params = SoilParams.from_dict(entry["params"]) if "params" in entry else get_preset(name)
    if "levels" in entry:
        levels = [float(v) for v in entry["levels"]]
    else:
        lo, hi = entry.get("range", PRESET_GRIDS.get(name, (params.theta_r, params.theta_s)))
        levels = [float(v) for v in np.round(np.linspace(lo, hi, int(entry.get("n_levels", 9))), 4)]
    if not levels:
        raise ConfigError(f"soil {name!r} has no moisture levels")
    for v in levels:
        if not params.theta_r <= v <= params.theta_s:
            raise ConfigError(f"level {v} outside [{params.theta_r}, {params.theta_s}] for {name!r}")
    return SoilSpec(name, levels, params)


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        return io.read_json(path)
    except FileNotFoundError:
        raise ConfigError(f"config not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def scan_rng(seed: int, counter: int) -> np.random.Generator:
    """Independent stream for one scan, derived from the experiment seed."""
    return np.random.default_rng([seed, counter])


# ---------------------------------------------------------------- dataset

@dataclass
class ScanEntry:
    scan_id: str
    wav: str
    track: str
    theta_min: float
    theta_max: float
    group: str
    soil: str = ""
    provenance: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"id": self.scan_id, "wav": self.wav, "track": self.track, "theta_min": self.theta_min,
                "theta_max": self.theta_max, "group": self.group, "soil": self.soil,
                "provenance": self.provenance}

    @classmethod
    def from_json(cls, d: dict) -> "ScanEntry":
        return cls(d["id"], d["wav"], d["track"], float(d["theta_min"]), float(d["theta_max"]),
                   d["group"], d.get("soil", ""), d.get("provenance", {}))


@dataclass
class Dataset:
    root: Path
    scans: list[ScanEntry]
    template: str | None = None
    chirp: ChirpConfig = field(default_factory=ChirpConfig)

    def to_json(self) -> dict:
        return {"version": 1, "chirp": self.chirp.to_dict(), "template": self.template,
                "scans": [s.to_json() for s in self.scans]}

    @classmethod
    def load(cls, root) -> "Dataset":
        root = Path(root)
        path = root / MANIFEST
        if not path.exists():
            raise FileNotFoundError(f"no manifest at {path}")
        doc = io.read_json(path)
        scans = [ScanEntry.from_json(s) for s in doc["scans"]]
        for s in scans:
            if not s.group:
                raise ConfigError(f"scan {s.scan_id} has an empty group id")
            for rel in (s.wav, s.track):
                if not (root / rel).is_file():
                    raise FileNotFoundError(f"scan {s.scan_id}: missing {root / rel}")
        return cls(root, scans, doc.get("template"), ChirpConfig.from_dict(doc.get("chirp")))


def simulate_dataset(cfg: ExperimentConfig, out: Path) -> Dataset:
    out.mkdir(parents=True, exist_ok=True)
    (out / "scans").mkdir(exist_ok=True)
    base = ScanPlan.from_dict(cfg.scan, cfg.chirp)
    template = synthesize_template_recording(
        cfg.chirp, n_chirps=cfg.template_chirps, noise_std=base.noise_std, seed=cfg.seed,
        geom=cfg.geometry, leakage_gain=base.leakage_gain, leakage_delay=base.leakage_delay)
    io.write_wav(out / TEMPLATE_WAV, template)
    scans = []
    counter = 0
    for soil in cfg.soils:
        for li, level in enumerate(soil.levels):
            group = f"{soil.preset}-{li + 1:02d}"
            for k in range(cfg.scans_per_level):
                counter += 1
                rng = scan_rng(cfg.seed, counter)
                velocity = base.velocity + rng.uniform(-cfg.velocity_jitter, cfg.velocity_jitter)
                start = max(base.start_height + rng.uniform(-cfg.start_jitter, cfg.start_jitter), 0.006)
                plan = ScanPlan.from_dict({**base.to_dict(), "velocity": velocity, "start_height": start,
                                           "seed": int(rng.integers(2 ** 31))}, cfg.chirp)
                rec, track = synthesize_recording(plan, level, soil.params, cfg.geometry)
                sid = f"{group}-{k + 1:02d}"
                io.write_wav(out / "scans" / f"{sid}.wav", rec)
                io.write_json(out / "scans" / f"{sid}.track.json", track.to_json())
                scans.append(ScanEntry(
                    sid, f"scans/{sid}.wav", f"scans/{sid}.track.json",
                    round(level - cfg.half_width, 6), round(level + cfg.half_width, 6), group, soil.preset,
                    {"synthetic": {"theta_v": level, "soil": soil.params.to_dict(), "plan": plan.to_dict()}}))
                log.info("simulated %s (theta %.2f)", sid, level)
    ds = Dataset(out, scans, TEMPLATE_WAV, cfg.chirp)
    io.write_json(out / MANIFEST, ds.to_json())
    return ds


# ---------------------------------------------------------------- tensors

def load_samples(tensor_dir) -> tuple[list[Sample], dict]:
    root = Path(tensor_dir)
    path = root / INDEX
    if not path.exists():
        raise FileNotFoundError(f"no tensor index at {path}")
    index = io.read_json(path)
    samples = []
    for e in index["scans"]:
        f = root / e["tensor"]
        if not f.is_file():
            raise FileNotFoundError(f"missing tensor {f}")
        img = io.load_tensor(f)
        if img.shape != (64, 64):
            raise io.FormatError(f"{f}: expected 64x64, got {img.shape}")
        samples.append(Sample(img, e["theta_min"], e["theta_max"], e["group"], e["id"]))
    return samples, index


def _soil_of(index: dict) -> dict[str, str]:
    return {e["group"]: e.get("soil", "") for e in index["scans"]}


# ---------------------------------------------------------------- commands

def cmd_simulate(args) -> int:
    cfg = ExperimentConfig.from_dict(_load_config(args.config))
    ds = simulate_dataset(cfg, Path(args.out))
    print(f"wrote {len(ds.scans)} scans to {args.out}")
    return 0


def cmd_preprocess(args) -> int:
    ds = Dataset.load(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = ds.chirp
    template = None
    if ds.template:
        _, profiles = scan_profiles(io.read_wav(ds.root / ds.template), cfg)
        template = capture_template(profiles[:TEMPLATE_PROFILES])
        io.save_tensor(out / TEMPLATE_TENSOR, template.magnitudes)
    accepted, rejects = [], []
    for s in ds.scans:
        track = HeightTrack.from_json(io.read_json(ds.root / s.track))
        try:
            image = preprocess_scan(io.read_wav(ds.root / s.wav), track, cfg, template)
        except ScanQualityError as exc:
            rejects.append({"id": s.scan_id, "reason": exc.quality.verdict.value, **exc.quality.to_json()})
            continue
        except NoSyncError as exc:
            rejects.append({"id": s.scan_id, "reason": "NoSync", "detail": str(exc)})
            continue
        except InsufficientDataError as exc:
            rejects.append({"id": s.scan_id, "reason": "Insufficient", "detail": str(exc)})
            continue
        name = f"{s.scan_id}.sstn"
        io.save_tensor(out / name, image.values)
        accepted.append({"id": s.scan_id, "tensor": name, "theta_min": s.theta_min, "theta_max": s.theta_max,
                         "group": s.group, "soil": s.soil})
        log.info("preprocessed %s", s.scan_id)
    io.write_json(out / "rejects.json", {"rejects": rejects})
    if not accepted:
        print("error: every scan was rejected", file=sys.stderr)
        return 1
    io.write_json(out / INDEX, {"version": 1, "chirp": cfg.to_dict(),
                                "template": TEMPLATE_TENSOR if template else None, "scans": accepted})
    print(f"accepted {len(accepted)} of {len(ds.scans)} scans; {len(rejects)} rejected")
    return 0


def _train_config(path) -> TrainConfig:
    doc = _load_config(path)
    return TrainConfig.from_dict(doc.get("train", doc) if isinstance(doc, dict) else doc)


def _index_template(root: Path, index: dict):
    if not index.get("template"):
        return None
    return TemplateProfile(io.load_tensor(root / index["template"]).astype(np.float64),
                           n_averaged=TEMPLATE_PROFILES)


def cmd_train(args) -> int:
    samples, index = load_samples(args.tensors)
    cfg = _train_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        result = train(samples, cfg)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss"])
    for i, v in enumerate(result.history, start=1):
        w.writerow([i, repr(float(v))])
    (out / "loss.csv").write_text(buf.getvalue())
    meta = {"train": cfg.to_dict(), "groups": sorted({s.group for s in samples}), "n_samples": len(samples)}
    io.save_model(out / "model.ssmd", result.model, meta, _index_template(Path(args.tensors), index),
                  ChirpConfig.from_dict(index.get("chirp")))
    final = result.history[-1] if result.history else float("nan")
    if result.history and not np.isfinite(final):
        print("error: final loss is not finite", file=sys.stderr)
        return 3
    print(f"trained on {len(samples)} scans; final loss {final:.4f}")
    return 0


def level_order(report: EvalReport) -> list[str]:
    return [f.group for f in sorted(report.folds, key=lambda f: (f.gt_min + f.gt_max, f.group))]


def fold_split(report: EvalReport, soil_of: dict[str, str] | None = None):
    """Mean MAE of interior (interpolation) and extreme (extrapolation) folds.

    Extremes are the driest and wettest group of each soil.
    """
    soil_of = soil_of or {}
    by_soil: dict[str, list] = {}
    for f in report.folds:
        by_soil.setdefault(soil_of.get(f.group, ""), []).append(f)
    inner, outer = [], []
    for folds in by_soil.values():
        folds = sorted(folds, key=lambda f: (f.gt_min + f.gt_max, f.group))
        if len(folds) <= 2:
            outer += folds
            continue
        outer += [folds[0], folds[-1]]
        inner += folds[1:-1]
    mean = lambda fs: float(np.mean([e for f in fs for e in f.errors])) if fs else float("nan")
    return mean(inner), mean(outer)


def write_report(out: Path, report: EvalReport, extra: dict) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["group", "n_scans", "gt_min", "gt_max", "mae"])
    for f in report.folds:
        w.writerow([f.group, f.n_scans, f.gt_min, f.gt_max, repr(f.mae)])
    (out / "report.csv").write_text(buf.getvalue())
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["group", "scan_id", "theta_hat", "error"])
    for f in report.folds:
        for sid, p, e in zip(f.scan_ids, f.predictions, f.errors):
            w.writerow([f.group, sid, repr(p), repr(e)])
    (out / "predictions.csv").write_text(buf.getvalue())
    doc = {**report.to_json(), **extra}
    io.write_json(out / "report.json", doc)
    return doc


def cmd_eval(args) -> int:
    samples, index = load_samples(args.tensors)
    cfg = _train_config(args.config)
    soil_of = _soil_of(index)
    out = Path(args.out)
    if args.mode == "loocv":
        report = loocv(samples, cfg)
        inner, outer = fold_split(report, soil_of)
        extra = {"mode": "loocv", "interpolation_mae": inner, "extrapolation_mae": outer}
    else:
        soils = sorted(set(soil_of.values()), key=list(soil_of.values()).index)
        train_soil = args.train_soil or (soils[0] if soils else "")
        test_soil = args.test_soil or next((s for s in soils if s != train_soil), "")
        tr = [s for s in samples if soil_of[s.group] == train_soil]
        te = [s for s in samples if soil_of[s.group] == test_soil]
        if args.model:
            m, _, _, _ = io.load_model(args.model)
            fit = lambda _tr, _c: m
            tr = tr or samples
        else:
            fit = None
        if not tr or not te:
            print(f"error: no groups for train soil {train_soil!r} or test soil {test_soil!r}", file=sys.stderr)
            return 2
        report = holdout(tr, te, cfg, fit=fit)
        extra = {"mode": "holdout", "train_soil": train_soil, "test_soil": test_soil}
    doc = write_report(out, report, extra)
    for f in report.folds:
        print(f"{f.group:>12s}  n={f.n_scans:3d}  gt=[{f.gt_min:.2f}, {f.gt_max:.2f}]  mae={f.mae:.3f}")
    print(f"overall MAE {doc['overall_mae']:.3f} %VWC")
    return 0


def cmd_infer(args) -> int:
    t0 = time.perf_counter()
    m, _, template, cfg = io.load_model(args.model)
    track = HeightTrack.from_json(io.read_json(args.track))
    quality = validate_scan(track)
    result = {"verdict": quality.verdict.value, "quality": quality.to_json(), "theta_hat": None}
    code = 0
    if not quality.ok:
        print(f"scan rejected: {quality.verdict}")
        code = 2
    else:
        try:
            image = preprocess_scan(io.read_wav(args.wav), track, cfg, template, check_quality=False)
            result["theta_hat"] = predict(m, image).theta_hat
        except (NoSyncError, InsufficientDataError) as exc:
            result["verdict"] = "NoSync" if isinstance(exc, NoSyncError) else "Insufficient"
            print(f"scan rejected: {result['verdict']} ({exc})")
            code = 2
    result["wall_time_s"] = time.perf_counter() - t0
    if code == 0:
        print(f"theta_hat {result['theta_hat']:.2f} %VWC  verdict {quality.verdict}")
    print(f"wall time {result['wall_time_s'] * 1e3:.0f} ms")
    if args.out:
        io.write_json(args.out, result)
    print(json.dumps(result, sort_keys=True))
    return code


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="soilecho", description="Acoustic soil moisture sensing harness")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="synthesize a dataset of vertical scans")
    s.add_argument("--config", help="experiment config JSON (defaults used if omitted)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("preprocess", help="turn a dataset into 64x64 image tensors")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="train the regressor on a tensor directory")
    s.add_argument("--tensors", required=True)
    s.add_argument("--config", help="JSON with train settings (top level or under 'train')")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="leave-one-group-out or cross-soil evaluation")
    s.add_argument("--tensors", required=True)
    s.add_argument("--mode", choices=("loocv", "holdout"), default="loocv")
    s.add_argument("--config")
    s.add_argument("--model", help="score this checkpoint instead of training (holdout)")
    s.add_argument("--train-soil")
    s.add_argument("--test-soil")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("infer", help="estimate moisture for one recording")
    s.add_argument("--model", required=True)
    s.add_argument("--wav", required=True)
    s.add_argument("--track", required=True)
    s.add_argument("--out", help="also write the JSON result here")
    s.set_defaults(func=cmd_infer)
    return p


def main(argv=None) -> int:
    level = os.environ.get("SOILECHO_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, io.FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
