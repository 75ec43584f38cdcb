"""Command-line runner: ``train``, ``unlearn``, ``sweep`` and ``nc``.

Exit codes: 0 success, 1 other simulator error, 2 configuration / input
error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml

from . import experiment as ex
from .config import ExperimentConfig, load_config, parse_config
from .errors import BadFUError, ConfigError, NumericError, UnlearnRequestRejected
from .evaluate import NCOptions, neural_cleanse, nc_probe
from .history_io import load_model, read_history, save_model, write_history
from .report import (NC_HEADER, ROUNDS_HEADER, SWEEP_HEADER, plot_nc, plot_rounds, plot_sweep, read_json,
                     versions, write_csv, write_json)
from .rng import derive_seed
from .unlearn import METHODS, run_unlearning

log = logging.getLogger("badfu")

DEFAULT_RATIOS = (0.5, 1.0, 1.5, 2.0)


class Options:
    def __init__(self, seed: int | None, threads: int, no_timestamp: bool):
        self.seed = seed
        self.threads = threads
        self.timestamps = not no_timestamp


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _resolve_config(path: str, opts: Options) -> ExperimentConfig:
    cfg = load_config(path)
    if opts.seed is not None:
        cfg = cfg.model_copy(update={"seed": opts.seed})
    return cfg


def _round_rows(exp: ex.Experiment) -> list[dict]:
    rows = []
    for rec in exp.history.records:
        if not rec.metrics:
            continue
        norms = {str(u.client_id): float(np.linalg.norm(u.payload - rec.global_before.values))
                 if u.kind == "weights" else float(np.linalg.norm(u.payload)) for u in rec.updates}
        rows.append({"round": rec.round, "acc": rec.metrics["acc"], "asr": rec.metrics.get("asr"),
                     "update_norms": norms})
    return rows


def _stage_entry(report, opts: Options, **extra) -> dict:
    entry = report.as_dict()
    entry.update(extra)
    if not opts.timestamps:
        entry.pop("duration_s", None)
    return entry


def _config_for_report(cfg: ExperimentConfig) -> dict:
    return cfg.model_dump(mode="json")


def cmd_train(config_path: str, out: str | None, opts: Options) -> Path:
    cfg = _resolve_config(config_path, opts)
    run_dir = Path(out or cfg.output_dir or Path("runs") / Path(config_path).stem)
    run_dir.mkdir(parents=True, exist_ok=True)
    exp = ex.build_experiment(cfg)
    if cfg.benign_baseline:
        ex.train_benign_baseline(exp, threads=opts.threads)
    ex.train(exp, threads=opts.threads)

    with open(run_dir / "config.yaml", "w", encoding="utf-8", newline="\n") as fh:
        yaml.safe_dump(_config_for_report(cfg), fh, sort_keys=True)
    write_history(exp.history, run_dir / "history.bin")
    final_stage = "pre_activate" if exp.artifacts is not None else "benign"
    save_model(exp.history.final, run_dir / f"model_{final_stage}.npy")
    rows = _round_rows(exp)
    write_csv(run_dir / "rounds.csv", ROUNDS_HEADER, [(r["round"], r["acc"], r["asr"]) for r in rows])
    plot_rounds(rows, run_dir / "rounds.png", title=final_stage.replace("_", "-"))

    report = {
        "schema": 1,
        "seed": cfg.seed,
        "versions": versions(),
        "config": _config_for_report(cfg),
        "rounds": rows,
        "stages": {name: _stage_entry(rep, opts) for name, rep in exp.stages.items()},
    }
    if exp.artifacts is not None:
        report["attack"] = {
            "malicious_client": exp.artifacts.client_id,
            "n_bd": int(exp.artifacts.bd_ids.size),
            "n_c": int(exp.artifacts.c_ids.size),
            "bd_ids": [int(i) for i in exp.artifacts.bd_ids],
            "c_ids": [int(i) for i in exp.artifacts.c_ids],
        }
    if opts.timestamps:
        report["created"] = _now()
    write_json(run_dir / "report.json", report)
    print(f"wrote {run_dir}")
    for name, rep in exp.stages.items():
        print(f"{name:>13}: acc={rep.acc:.4f} asr={rep.asr:.4f}")
    return run_dir


def _load_run(run_dir: Path, opts: Options) -> tuple[ex.Experiment, dict]:
    if not (run_dir / "report.json").exists() or not (run_dir / "config.yaml").exists():
        raise ConfigError(f"{run_dir} is not a run directory (missing report.json/config.yaml)")
    if not (run_dir / "history.bin").exists():
        raise ConfigError(f"{run_dir}: history.bin missing")
    with open(run_dir / "config.yaml", encoding="utf-8") as fh:
        cfg = parse_config(yaml.safe_load(fh))
    report = read_json(run_dir / "report.json")
    exp = ex.build_experiment(cfg)
    if exp.artifacts is not None and "attack" in report:
        if report["attack"]["c_ids"] != [int(i) for i in exp.artifacts.c_ids]:
            raise ConfigError(f"{run_dir}: rebuilt attack artifacts do not match the recorded run")
    exp.history = read_history(run_dir / "history.bin", exp.setup)
    return exp, report


def cmd_unlearn(run_dir: str, method: str, benign_fraction: float | None, params: dict,
                opts: Options) -> Path:
    run_dir = Path(run_dir)
    exp, report = _load_run(run_dir, opts)
    started = datetime.now(timezone.utc)
    if benign_fraction is not None:
        cfg = exp.config
        client = cfg.benign_unlearn.client if cfg.benign_unlearn else None
        request = exp.benign_request(client, benign_fraction)
        stage = "normal_ul"
    else:
        if exp.artifacts is None:
            raise ConfigError("run has no attack; pass --benign-fraction for a benign request")
        request = exp.camouflage_request()
        stage = method
    merged = exp.config.unlearn.params(method)
    merged.update(params)
    result = run_unlearning(method, exp.history, request, merged, threads=opts.threads)
    rep = exp.evaluator.report(result.model, stage)
    save_model(result.model, run_dir / f"model_{stage}.npy")
    entry = _stage_entry(rep, opts, method=method, rounds_executed=result.rounds_executed,
                         forget_client=request.requesting_client_id, n_forget=len(request.forget_ids),
                         params=merged)
    if opts.timestamps:
        entry["duration_s"] = result.duration
        entry["started"] = started.isoformat(timespec="seconds")
    report.setdefault("stages", {})[stage] = entry
    write_json(run_dir / "report.json", report)
    print(f"{stage:>13}: acc={rep.acc:.4f} asr={rep.asr:.4f}")
    return run_dir


def cmd_sweep(config_path: str, ratios: list[float], out: str | None, opts: Options) -> Path:
    cfg = _resolve_config(config_path, opts)
    if cfg.attack is None:
        raise ConfigError("sweep needs an attack section in the config")
    out_dir = Path(out or cfg.output_dir or Path("runs") / f"{Path(config_path).stem}_sweep")
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for ratio in sorted(set(ratios)):
        exp = ex.build_experiment(cfg.with_overrides(**{"attack.camouflage_ratio": ratio}))
        ex.train(exp, threads=opts.threads)
        retrain = ex.unlearn(exp, "retrain", threads=opts.threads)
        federaser = ex.unlearn(exp, "federaser", threads=opts.threads)
        pre = exp.stages["pre_activate"]
        rows.append({"ratio": ratio, "pre_asr": pre.asr, "retrain_asr": retrain.asr,
                     "federaser_asr": federaser.asr, "acc": pre.acc})
        print(f"ratio {ratio}: pre={pre.asr:.4f} retrain={retrain.asr:.4f} federaser={federaser.asr:.4f}")
        exp.history = None
    write_csv(out_dir / "sweep.csv", SWEEP_HEADER, [[r[k] for k in SWEEP_HEADER] for r in rows])
    plot_sweep(rows, out_dir / "sweep.png")
    summary = {"schema": 1, "seed": cfg.seed, "versions": versions(), "config": _config_for_report(cfg),
               "rows": rows}
    if opts.timestamps:
        summary["created"] = _now()
    write_json(out_dir / "sweep.json", summary)
    print(f"wrote {out_dir / 'sweep.csv'}")
    return out_dir


def cmd_nc(run_dir: str, stage: str | None, opts: Options) -> Path:
    run_dir = Path(run_dir)
    with open(run_dir / "config.yaml", encoding="utf-8") as fh:
        cfg = parse_config(yaml.safe_load(fh))
    exp = ex.build_experiment(cfg)
    if stage is None:
        stage = "pre_activate" if exp.artifacts is not None else "benign"
    model_path = run_dir / f"model_{stage}.npy"
    if not model_path.exists():
        raise ConfigError(f"{run_dir}: no model snapshot for stage {stage!r}")
    model = load_model(model_path, exp.setup)
    n = cfg.nc
    probe = nc_probe(exp.test, n.probe_size, derive_seed(cfg.seed, "nc"))
    result = neural_cleanse(model, probe, NCOptions(steps=n.steps, lr=n.lr, l1_weight=n.l1_weight,
                                                    seed=derive_seed(cfg.seed, "nc")))
    rows = result.rows()
    suffix = "" if stage in ("pre_activate", "benign") else f"_{stage}"
    write_csv(run_dir / f"nc{suffix}.csv", NC_HEADER, [[r[k] for k in NC_HEADER] for r in rows])
    plot_nc(rows, run_dir / f"nc{suffix}.png", exp.trigger.target_label if exp.trigger else None)
    flagged = result.flagged
    print(f"flagged classes: {flagged if flagged else 'none'}")
    return run_dir


def _parse_params(items: list[str]) -> dict:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--param expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(value)
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the master seed")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="parallel client updates per round (results do not depend on it)")
    common.add_argument("--no-timestamp", action="store_true", default=argparse.SUPPRESS,
                        help="omit wall-clock fields so outputs are byte-reproducible")
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="badfu", parents=[common],
                                     description="Federated unlearning backdoor simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="run federated training from a config file")
    p.add_argument("config")
    p.add_argument("--out", help="run directory (default: config output_dir or runs/<name>)")

    p = sub.add_parser("unlearn", parents=[common], help="unlearn from a finished run")
    p.add_argument("run_dir")
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--benign-fraction", type=float,
                   help="forget this fraction of a benign client's data instead of the camouflage set")
    p.add_argument("--param", action="append", default=[], metavar="KEY=VALUE",
                   help="method parameter override, e.g. cal_epochs=2")

    p = sub.add_parser("sweep", parents=[common], help="camouflage ratio sweep")
    p.add_argument("config")
    p.add_argument("--ratios", type=float, nargs="+", default=list(DEFAULT_RATIOS))
    p.add_argument("--out")

    p = sub.add_parser("nc", parents=[common], help="Neural Cleanse on a run's model")
    p.add_argument("run_dir")
    p.add_argument("--stage", help="which model snapshot to scan (default: final training model)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    verbose = getattr(args, "verbose", 0)
    logging.basicConfig(level=logging.DEBUG if verbose > 1 else logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    opts = Options(getattr(args, "seed", None), getattr(args, "threads", 1),
                   getattr(args, "no_timestamp", False))
    try:
        if args.command == "train":
            cmd_train(args.config, args.out, opts)
        elif args.command == "unlearn":
            cmd_unlearn(args.run_dir, args.method, args.benign_fraction, _parse_params(args.param), opts)
        elif args.command == "sweep":
            cmd_sweep(args.config, args.ratios, args.out, opts)
        elif args.command == "nc":
            cmd_nc(args.run_dir, args.stage, opts)
    except (ConfigError, UnlearnRequestRejected) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except BadFUError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, OSError) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
