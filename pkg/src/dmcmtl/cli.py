"""Command line entry point: generate, ingest, train, evaluate, report.

Every command reads a JSON config (or flags) and writes a self-describing
output directory containing ``run_manifest.json``.  Exit codes: 0 success,
2 config error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import training as tr
from .data import (CLIMATES, DataError, DatasetSplit, generate_synthetic, generate_weather,
                   load_dataset, make_split, read_weather_csv)
from .data.dataset import KINDS, fit_normalizer
from .data.weather import SYNTHETIC_FEATURES

log = logging.getLogger("dmcmtl")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int | None
    dataset: str | None
    variant: str | None
    outputs: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    started: str = ""
    finished: str = ""

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "run_manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def read_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return cfg


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if k not in cfg]
    if missing:
        raise ConfigError(f"config is missing {', '.join(missing)}")


def _resolve(base: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


# ---------------------------------------------------------------- generate

def cmd_generate(config_path) -> Path:
    """Synthetic dataset from weather CSVs (or generated weather).

    Keys: ``model``, ``n_cultivars``, ``out_dir`` and either ``weather``
    (region -> CSV path) or ``synthetic_weather`` (``regions``,
    ``first_year``, ``last_year``, ``seed``).  Optional: ``seasons_per_cultivar``,
    ``mask_rate``, ``seed``, ``train_region``.
    """
    started = _now()
    cfg = read_config(config_path)
    base = Path(config_path).parent
    _require(cfg, "model", "n_cultivars", "out_dir")
    if cfg["model"] not in KINDS.values():
        raise ConfigError(f"model must be one of {sorted(KINDS.values())}")
    out = _resolve(base, cfg["out_dir"])
    if "weather" in cfg:
        weather = {}
        for region, p in sorted(cfg["weather"].items()):
            path = _resolve(base, p)
            if not path.exists():
                raise DataError(f"weather file not found: {path}")
            weather[region] = read_weather_csv(path)
    elif "synthetic_weather" in cfg:
        sw = cfg["synthetic_weather"]
        _require(sw, "regions", "first_year", "last_year")
        unknown = set(sw["regions"]) - set(CLIMATES)
        if unknown:
            raise ConfigError(f"no climate for regions {sorted(unknown)}; known {sorted(CLIMATES)}")
        weather = {r: generate_weather(r, sw["first_year"], sw["last_year"], sw.get("seed", 0) + i)
                   for i, r in enumerate(sorted(sw["regions"]))}
    else:
        raise ConfigError("config needs 'weather' or 'synthetic_weather'")
    spc = cfg.get("seasons_per_cultivar", [6, 15])
    try:
        syn = generate_synthetic(cfg["model"], weather, int(cfg["n_cultivars"]),
                                 seasons_per_cultivar=spc if np.isscalar(spc) else tuple(spc),
                                 mask_rate=float(cfg.get("mask_rate", 0.0)),
                                 seed=int(cfg.get("seed", 0)), train_region=cfg.get("train_region"),
                                 features=tuple(cfg.get("features", SYNTHETIC_FEATURES)))
    except (ValueError, RuntimeError) as exc:
        raise ConfigError(str(exc)) from exc
    manifest = syn.write(out, weather)
    counts = {c: sorted({int(s) for s in syn.observations[syn.train_region][c]["season"]})
              for c in syn.cultivars}
    print(f"{len(syn.cultivars)} cultivars, "
          f"{sum(len(v) for v in counts.values())} seasons in {syn.train_region}, "
          f"regions {sorted(weather)}")
    for c, seasons in counts.items():
        print(f"  {c}: {len(seasons)} seasons")
    RunManifest("generate", config_hash(cfg), cfg.get("seed", 0), str(manifest), None,
                [str(manifest)], cfg, started, _now()).write(out)
    return manifest


# ---------------------------------------------------------------- ingest

def cmd_ingest(config_path) -> Path:
    """Copy real-format weather and observation CSVs into a dataset directory.

    Keys: ``kind``, ``train_region``, ``features``, ``cultivars`` (optional),
    ``weather`` (region -> CSV), ``observations`` (region -> cultivar -> CSV),
    ``out_dir``.  The result is loaded once to apply the cleaning rules; the
    discarded seasons are listed in ``ingest_report.json``.
    """
    started = _now()
    cfg = read_config(config_path)
    base = Path(config_path).parent
    _require(cfg, "kind", "train_region", "features", "weather", "observations", "out_dir")
    if cfg["kind"] not in KINDS:
        raise ConfigError(f"kind must be one of {sorted(KINDS)}")
    out = _resolve(base, cfg["out_dir"])
    (out / "weather").mkdir(parents=True, exist_ok=True)
    regions, cultivars = {}, set()
    for region, wpath in sorted(cfg["weather"].items()):
        src = _resolve(base, wpath)
        if not src.exists():
            raise DataError(f"weather file not found: {src}")
        read_weather_csv(src)  # header and date checks before copying
        shutil.copyfile(src, out / "weather" / f"{region}.csv")
        files = {}
        for cultivar, opath in sorted(cfg["observations"].get(region, {}).items()):
            osrc = _resolve(base, opath)
            if not osrc.exists():
                raise DataError(f"observation file not found: {osrc}")
            rel = Path("observations") / region / f"{cultivar}.csv"
            (out / rel).parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(osrc, out / rel)
            files[cultivar] = rel.as_posix()
            cultivars.add(cultivar)
        regions[region] = {"weather": f"weather/{region}.csv", "observations": files}
    if cfg["train_region"] not in regions:
        raise ConfigError(f"train_region {cfg['train_region']} has no weather")
    manifest = {"kind": cfg["kind"], "model": KINDS[cfg["kind"]], "features": list(cfg["features"]),
                "window": cfg.get("window"), "train_region": cfg["train_region"],
                "cultivars": cfg.get("cultivars") or sorted(cultivars), "regions": regions,
                "truth": None}
    mpath = out / "manifest.json"
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    ds = load_dataset(mpath)
    report = {"records": len(ds.records),
              "discarded": [{"region": r, "cultivar": c, "season": s, "reason": why}
                            for r, c, s, why in ds.discarded]}
    (out / "ingest_report.json").write_text(json.dumps(report, indent=2) + "\n")
    print(f"{len(ds.records)} seasons kept, {len(ds.discarded)} discarded")
    RunManifest("ingest", config_hash(cfg), None, str(mpath), None,
                [str(mpath), str(out / "ingest_report.json")], cfg, started, _now()).write(out)
    return mpath


# ---------------------------------------------------------------- train

_TRAIN_KEYS = {f.name for f in fields(tr.TrainConfig)}


def train_config_from(cfg: dict) -> tr.TrainConfig:
    _require(cfg, "variant", "dataset", "output_dir")
    known = _TRAIN_KEYS | {"dataset", "output_dir", "split_seed"}
    unknown = set(cfg) - known
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    try:
        return tr.TrainConfig(**{k: v for k, v in cfg.items() if k in _TRAIN_KEYS})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _history_rows(history: tr.TrainHistory) -> list[dict]:
    return [{"epoch": i, "loss": l, "lr": r, "wall_time": w}
            for i, (l, r, w) in enumerate(zip(history.loss, history.lr, history.wall_time))]


def _train_one_cultivar(args):
    manifest, split_dict, config, cultivar = args
    ds = load_dataset(manifest)
    split = DatasetSplit.from_dict(split_dict)
    return tr.train_stl_cultivar(ds, split, config, cultivar, fit_normalizer(ds, split))


def cmd_train(config_path, jobs: int = 1) -> Path:
    """Train one variant; writes checkpoint, split, history, test metrics and manifest."""
    started = _now()
    cfg = read_config(config_path)
    base = Path(config_path).parent
    config = train_config_from(cfg)
    manifest = _resolve(base, cfg["dataset"])
    if not manifest.exists():
        raise DataError(f"dataset manifest not found: {manifest}")
    out = _resolve(base, cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(manifest)
    split = make_split(ds, int(cfg.get("split_seed", config.seed)))
    if not split.train:
        raise DataError("no cultivar has enough seasons for a split")
    (out / "split.json").write_text(json.dumps(split.to_dict(), indent=2, sort_keys=True) + "\n")
    try:
        if config.variant == "dmc_stl" and jobs > 1:
            result = _train_stl_parallel(ds, split, config, manifest, jobs)
        else:
            result = tr.train(config.variant, ds, split, config)
    except tr.TrainingDiverged as exc:
        if exc.history is not None:
            ev.write_csv(out / "history.csv", _history_rows(exc.history),
                         ["epoch", "loss", "lr", "wall_time"])
        raise
    written = tr.save_result(result, out)
    ev.write_csv(out / "history.csv", _history_rows(result.history), ["epoch", "loss", "lr", "wall_time"])
    evals = ev.evaluate(result, split.test_records(ds))
    metrics = {"variant": config.variant, "seed": config.seed, "test_rmse": ev.mean_rmse(evals),
               "cultivar_rmse": ev.cultivar_rmse(evals),
               "violations": int(sum(e.violations for e in evals))}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    print(f"{config.variant} seed {config.seed}: test RMSE {metrics['test_rmse']:.3f}")
    outputs = [str(p) for p in written] + [str(out / n) for n in ("split.json", "history.csv", "metrics.json")]
    RunManifest("train", config_hash(cfg), config.seed, str(manifest), config.variant, outputs,
                cfg, started, _now()).write(out)
    return out


def _train_stl_parallel(ds, split, config, manifest, jobs) -> tr.TrainResult:
    tasks = [(str(manifest), split.to_dict(), config, c) for c in split.cultivars]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        parts = list(pool.map(_train_one_cultivar, tasks))
    return tr.TrainResult(config.variant, config, fit_normalizer(ds, split),
                          tr.merge_histories([h for _, h in parts]),
                          per_cultivar=dict(zip(split.cultivars, (w for w, _ in parts))))


# ---------------------------------------------------------------- evaluate

def _parse_grid(text: str) -> np.ndarray:
    try:
        if ":" in text:
            lo, hi = (float(x) for x in text.split(":"))
            return np.arange(lo, hi + 1.0)
        return np.array([float(x) for x in text.split(",")])
    except ValueError as exc:
        raise ConfigError(f"bad threshold grid {text!r}") from exc


def cmd_evaluate(checkpoint, dataset, out_dir=None, per_stage=False, threshold_curve=False,
                 regions=None, grid="1:20", split_path=None) -> Path:
    started = _now()
    ckpt = Path(checkpoint)
    if not (ckpt / "train_config.json").exists():
        raise DataError(f"not a checkpoint directory: {ckpt}")
    result = tr.load_result(ckpt)
    ds = load_dataset(dataset)
    if tuple(result.normalizer.names) != tuple(ds.features):
        raise DataError(f"feature mismatch: checkpoint {list(result.normalizer.names)} "
                        f"vs dataset {list(ds.features)}")
    nets = [result.weights] if result.weights is not None else list((result.per_cultivar or {}).values())
    for w in nets:
        if w.config.input_dim != result.normalizer.input_dim:
            raise DataError(f"input dimension mismatch: network {w.config.input_dim} "
                            f"vs features {result.normalizer.input_dim}")
        if w.config.multitask and w.config.n_cultivars != len(ds.cultivars):
            raise DataError(f"cultivar count mismatch: network {w.config.n_cultivars} "
                            f"vs dataset {len(ds.cultivars)}")
    split = DatasetSplit.from_dict(json.loads(Path(split_path or ckpt / "split.json").read_text()))
    out = Path(out_dir) if out_dir else ckpt / "eval"
    out.mkdir(parents=True, exist_ok=True)
    variant, seed = result.variant, result.config.seed

    evals = ev.evaluate(result, split.test_records(ds))
    outputs = [ev.write_csv(out / "seasons.csv", ev.season_rows(evals)),
               ev.write_csv(out / "report.csv", ev.report_rows(variant, seed, evals), ev.REPORT_COLUMNS)]
    audit = {"total_violations": int(sum(e.violations for e in evals)),
             "seasons": [{"cultivar": e.cultivar, "season": e.season, "days": e.violation_days}
                         for e in evals if e.violations]}
    (out / "audit.json").write_text(json.dumps(audit, indent=2) + "\n")
    outputs.append(out / "audit.json")
    _, text = ev.summary_table(ev.report_rows(variant, seed, evals))
    text += f"consistency violations: {audit['total_violations']}\n"

    if per_stage:
        if ds.kind != "phenology":
            raise ConfigError("--per-stage applies to phenology datasets only")
        ps = ev.per_stage_error(evals)
        rows = [{"variant": variant, "seed": seed, "cultivar": c, **v} for c, v in ps.items()]
        outputs.append(ev.write_csv(out / "per_stage.csv", rows))
    if threshold_curve:
        taus = _parse_grid(grid)
        frac = ev.threshold_curve(ev.cultivar_rmse(evals).values(), taus)
        outputs.append(ev.write_csv(out / "threshold_curve.csv",
                                    [{"threshold": float(t), "fraction": float(f)}
                                     for t, f in zip(taus, frac)]))
    region_list = None
    if regions:
        region_list = ds.regions if regions == "all" else regions.split(",")
    try:
        table = ev.cross_region_eval(result, ds, split, region_list or [ds.train_region])
    except KeyError as exc:
        raise ConfigError(str(exc.args[0])) from exc
    outputs.append(ev.write_csv(out / "regions.csv",
                                [{"variant": variant, "seed": seed, "region": r, "rmse": v}
                                 for r, v in table.items()]))
    (out / "summary.txt").write_text(text)
    outputs.append(out / "summary.txt")
    print(text, end="")
    RunManifest("evaluate", config_hash({"checkpoint": str(ckpt), "dataset": str(dataset)}), seed,
                str(dataset), variant, [str(p) for p in outputs],
                {"per_stage": per_stage, "threshold_curve": threshold_curve, "regions": regions,
                 "grid": grid}, started, _now()).write(out)
    return out


# ---------------------------------------------------------------- report

def cmd_report(inputs, out_dir) -> Path:
    """Combine ``report.csv`` files from several evaluations into one summary."""
    started = _now()
    rows = []
    for p in inputs:
        p = Path(p)
        path = p / "report.csv" if p.is_dir() else p
        if not path.exists():
            raise DataError(f"report not found: {path}")
        rows += ev.read_csv(path)
    if not rows:
        raise DataError("no report rows")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table, text = ev.summary_table(rows)
    outputs = [ev.write_csv(out / "summary.csv", table, ["variant", "cultivar", "mean", "std", "n"])]
    variants = sorted({r["variant"] for r in rows})
    tests = []
    for i, a in enumerate(variants):
        for b in variants[i + 1:]:
            ma = {r["cultivar"]: r["mean"] for r in table if r["variant"] == a and r["cultivar"] != "all"}
            mb = {r["cultivar"]: r["mean"] for r in table if r["variant"] == b and r["cultivar"] != "all"}
            common = sorted(set(ma) & set(mb))
            if len(common) < 2:
                continue
            t = ev.paired_t_test([ma[c] for c in common], [mb[c] for c in common])
            tests.append({"a": a, "b": b, "t": t.t, "p": t.p, "n": t.n, "degenerate": t.degenerate,
                          "significant": t.significant})
            text += (f"paired t-test {a} vs {b}: t={t.t:.3f} p={t.p:.4f}"
                     f"{' (degenerate)' if t.degenerate else ''}\n")
    if tests:
        outputs.append(ev.write_csv(out / "paired_tests.csv", tests))
    (out / "summary.txt").write_text(text)
    outputs.append(out / "summary.txt")
    print(text, end="")
    RunManifest("report", config_hash({"inputs": [str(p) for p in inputs]}), None, None, None,
                [str(p) for p in outputs], {"inputs": [str(p) for p in inputs]},
                started, _now()).write(out)
    return out


# ---------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dmcmtl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("config")
    i = sub.add_parser("ingest", help="clean real-format CSVs into a dataset directory")
    i.add_argument("config")
    t = sub.add_parser("train", help="train one variant")
    t.add_argument("config")
    t.add_argument("--jobs", type=int, default=1, help="parallel cultivars for dmc_stl")
    e = sub.add_parser("evaluate", help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("--out")
    e.add_argument("--split", help="split JSON (default: the checkpoint's)")
    e.add_argument("--per-stage", action="store_true")
    e.add_argument("--threshold-curve", action="store_true")
    e.add_argument("--grid", default="1:20", help="thresholds as lo:hi (step 1) or a,b,c")
    e.add_argument("--regions", help="comma list or 'all'")
    r = sub.add_parser("report", help="summarize evaluation reports over seeds and variants")
    r.add_argument("inputs", nargs="+")
    r.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "generate":
            cmd_generate(args.config)
        elif args.command == "ingest":
            cmd_ingest(args.config)
        elif args.command == "train":
            cmd_train(args.config, args.jobs)
        elif args.command == "evaluate":
            cmd_evaluate(args.checkpoint, args.dataset, args.out, args.per_stage,
                         args.threshold_curve, args.regions, args.grid, args.split)
        elif args.command == "report":
            cmd_report(args.inputs, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
