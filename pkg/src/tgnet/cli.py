"""Command-line entry point: ``tgnet {ingest,synth,train,eval,export-tge,repro}``."""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, TGNetError
from .grid import GridSpec, HolidayCalendar, load_tensor, rasterize, read_logs, save_tensor, temporal_keys, write_logs
from .model import TGNetConfig, TGNetModel, export_tge
from .pipeline import EvalOptions, aggregate, evaluate_run, fit
from .synthgen import SynthConfig, export_logs, generate, preset
from .training import TrainConfig, make_examples

logger = logging.getLogger("tgnet")

CONFIG_VERSION = 1


@dataclass
class RunConfig:
    """Everything a run needs, loaded from one JSON document.

    Relative paths are resolved against the directory of the config file.
    """

    grid: GridSpec | None = None
    model: TGNetConfig = field(default_factory=TGNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalOptions = field(default_factory=EvalOptions)
    data: dict = field(default_factory=dict)
    synth: dict | None = None
    base_dir: Path = Path(".")

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path = Path(".")) -> "RunConfig":
        version = d.get("config_version")
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config_version {version!r} (expected {CONFIG_VERSION})")
        known = {"config_version", "grid", "model", "train", "eval", "data", "synth"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        try:
            ev = EvalOptions(**d.get("eval", {}))
        except TypeError as exc:
            raise ConfigError(f"bad eval options: {exc}") from None
        return cls(
            grid=GridSpec.from_dict(d["grid"]) if d.get("grid") else None,
            model=TGNetConfig.from_dict(d.get("model", {})),
            train=TrainConfig.from_dict(d.get("train", {})),
            eval=ev,
            data=dict(d.get("data", {})),
            synth=d.get("synth"),
            base_dir=base_dir,
        )

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(d, path.parent)

    def path(self, key: str, required: bool = True) -> Path | None:
        value = self.data.get(key)
        if value is None:
            if required:
                raise ConfigError(f"config data section lacks {key!r}")
            return None
        p = Path(value)
        p = p if p.is_absolute() else self.base_dir / p
        if required and not p.exists():
            raise DataError(f"input file not found: {p}")
        return p

    def require_grid(self) -> GridSpec:
        if self.grid is None:
            raise ConfigError("config has no grid section")
        return self.grid

    def calendar(self) -> HolidayCalendar:
        path = self.path("holidays", required=False)
        if path is None:
            return HolidayCalendar()
        if not path.exists():
            raise DataError(f"input file not found: {path}")
        return HolidayCalendar.from_file(path)

    def to_dict(self) -> dict:
        return {
            "config_version": CONFIG_VERSION,
            "grid": self.grid.to_dict() if self.grid else None,
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "eval": {"k": self.eval.k, "quantiles": list(self.eval.quantiles),
                     "min_bucket": self.eval.min_bucket, "three_way": self.eval.three_way},
            "data": dict(self.data),
        }


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_inputs(cfg: RunConfig):
    grid = cfg.require_grid()
    pickup = load_tensor(cfg.path("pickup"), grid)
    dropoff_path = cfg.path("dropoff", required=cfg.model.use_dropoff)
    dropoff = load_tensor(dropoff_path, grid) if dropoff_path is not None else None
    keys = temporal_keys(grid, cfg.calendar())
    return grid, pickup, dropoff, keys


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(cfg: RunConfig, out_dir: Path, logs_path: str | None = None) -> dict:
    grid = cfg.require_grid()
    path = Path(logs_path) if logs_path else cfg.path("logs", required=False)
    if path is None:
        raise ConfigError("no log file given (--logs or data.logs)")
    if not path.exists():
        raise DataError(f"input file not found: {path}")
    logs = read_logs(path)
    out = {}
    for kind in ("pickup", "dropoff"):
        tensor = rasterize(logs, grid, kind)
        save_tensor(tensor, out_dir / f"{kind}.stgd")
        out[kind] = {"total": int(tensor.values.sum()), "dropped": tensor.n_dropped}
    _dump_json(out, out_dir / "ingest_summary.json")
    return out


def cmd_synth(synth: SynthConfig, out_dir: Path, base: RunConfig | None = None) -> dict:
    result = generate(synth)
    save_tensor(result.pickup, out_dir / "pickup.stgd")
    save_tensor(result.dropoff, out_dir / "dropoff.stgd")
    np.savez(out_dir / "labels.npz", event_mask=result.event_mask, dropoff_event_mask=result.dropoff_event_mask,
             contexts=result.contexts)
    write_logs(export_logs([result.pickup, result.dropoff], result.spec, seed=synth.seed), out_dir / "logs.csv")
    result.calendar.to_file(out_dir / "holidays.txt")
    run = copy.deepcopy(base) if base is not None else RunConfig()
    run.grid = result.spec
    run.data = {"pickup": "pickup.stgd", "dropoff": "dropoff.stgd", "holidays": "holidays.txt", "logs": "logs.csv"}
    _dump_json(run.to_dict(), out_dir / "run.json")
    _dump_json(synth.to_dict(), out_dir / "synth.json")
    return {"intervals": result.spec.n_intervals, "regions": result.spec.n_nodes,
            "events": len(result.events), "pickup_total": int(result.pickup.values.sum())}


def cmd_train(cfg: RunConfig, out_dir: Path) -> dict:
    grid, pickup, dropoff, keys = _load_inputs(cfg)
    run = fit(pickup, dropoff, keys, cfg.model, cfg.train, grid.shape)
    run.model.save(out_dir / "model.tgck", extra={"run_config": cfg.to_dict()})
    run.history.write_csv(out_dir / "history.csv")
    return {"epochs": len(run.history.records), "best_epoch": run.history.best_epoch,
            "param_count": run.model.param_count()}


def cmd_eval(cfg: RunConfig, checkpoint: Path, out_dir: Path) -> dict:
    if not checkpoint.exists():
        raise DataError(f"input file not found: {checkpoint}")
    model, _ = TGNetModel.load(checkpoint)
    grid, pickup, dropoff, keys = _load_inputs(cfg)
    splits = make_examples(pickup, dropoff, keys, model.config, cfg.train)
    report = evaluate_run(model, splits, pickup.values, keys, cfg.eval)
    _dump_json(report, out_dir / "report.json")
    return report


def cmd_export_tge(checkpoint: Path, out_dir: Path) -> int:
    if not checkpoint.exists():
        raise DataError(f"input file not found: {checkpoint}")
    model, _ = TGNetModel.load(checkpoint)
    return len(export_tge(model, out_dir / "tge_vectors.csv"))


def repro_seeds(master_seed: int, n_seeds: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(master_seed).generate_state(n_seeds)]


def cmd_repro(cfg: RunConfig, n_seeds: int, out_dir: Path) -> dict:
    grid, pickup, dropoff, keys = _load_inputs(cfg)
    reports = []
    for seed in repro_seeds(cfg.train.seed, n_seeds):
        train_cfg = TrainConfig.from_dict({**cfg.train.to_dict(), "seed": seed})
        run = fit(pickup, dropoff, keys, cfg.model, train_cfg, grid.shape)
        report = evaluate_run(run.model, run.splits, pickup.values, keys, cfg.eval)
        report["seed"] = seed
        reports.append(report)
    result = {"master_seed": cfg.train.seed, "n_seeds": n_seeds, "aggregate": aggregate(reports), "runs": reports}
    _dump_json(result, out_dir / "repro.json")
    return result


# ---------------------------------------------------------------------------
# argument handling


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--seed", type=int, help="overrides train.seed")
    common.add_argument("--out-dir", default=".", help="directory for outputs (default: .)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tgnet", description=__doc__, parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("ingest", parents=[common], help="rasterize a demand log CSV")
    p.add_argument("--logs", help="log CSV (overrides data.logs)")
    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("synth_config", nargs="?", help="SynthConfig JSON")
    p.add_argument("--preset", help="named synthetic preset, e.g. nyc-taxi-like")
    sub.add_parser("train", parents=[common], help="train a model")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--k", type=float, help="evaluation threshold on ground truth")
    p.add_argument("--quantiles", type=float, nargs="+", help="atypical-sample quantile levels")
    p = sub.add_parser("export-tge", parents=[common], help="write temporal embedding vectors")
    p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("repro", parents=[common], help="train and evaluate over several seeds")
    p.add_argument("--n-seeds", type=int, default=10)
    return parser


def _run_config(args, required: bool = True) -> RunConfig | None:
    if args.config:
        cfg = RunConfig.load(args.config)
    elif required:
        raise ConfigError("--config is required for this command")
    else:
        return None
    if args.seed is not None:
        cfg.train = TrainConfig.from_dict({**cfg.train.to_dict(), "seed": args.seed})
    if getattr(args, "k", None) is not None:
        cfg.eval.k = args.k
    if getattr(args, "quantiles", None):
        cfg.eval.quantiles = tuple(args.quantiles)
    return cfg


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.command == "ingest":
        summary = cmd_ingest(_run_config(args), out_dir, args.logs)
    elif args.command == "synth":
        if args.synth_config:
            path = Path(args.synth_config)
            if not path.is_file():
                raise ConfigError(f"synth config not found: {path}")
            synth = SynthConfig.from_json(path)
        elif args.preset:
            synth = preset(args.preset)
        else:
            raise ConfigError("synth needs a config file or --preset")
        if args.seed is not None:
            synth.seed = args.seed
        summary = cmd_synth(synth, out_dir, _run_config(args, required=False))
    elif args.command == "train":
        summary = cmd_train(_run_config(args), out_dir)
    elif args.command == "eval":
        report = cmd_eval(_run_config(args), Path(args.checkpoint), out_dir)
        summary = {"rmse": report["model"]["rmse"], "mape": report["model"]["mape"]}
    elif args.command == "export-tge":
        summary = {"rows": cmd_export_tge(Path(args.checkpoint), out_dir)}
    else:
        summary = cmd_repro(_run_config(args), args.n_seeds, out_dir)["aggregate"]
    logger.info("%s done: %s", args.command, json.dumps(summary, sort_keys=True))
    return 0


def main(argv: list[str] | None = None) -> int:
    try:
        return run(argv)
    except TGNetError as exc:
        logger.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
