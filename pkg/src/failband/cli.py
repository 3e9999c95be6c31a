"""failband command line: simulate -> train-score -> calibrate -> detect -> evaluate / sweep-alpha.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import warnings
from collections import Counter
from pathlib import Path

import numpy as np

from .conformal import CoverageWarning, load_band, save_band
from .core import DatasetError, Label, ScoreMethodId, load_dataset, save_rollouts
from .detector import DetectionResult, detect_rollout, run_stream
from .evaluation import DEFAULT_ALPHA_GRID, alpha_sweep, calibrate, emit_report, evaluate
from .flow import IntegrationError
from .scores import (
    TRAINABLE,
    SparcScorer,
    StacConfig,
    StacScorer,
    config_hash,
    load_scorer,
    save_scorer,
    train_scorer,
)
from .synth import ConfigError, config_from_mapping, generate_dataset, policy_from_header, read_config_values

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_CONFIG):
        super().__init__(message)
        self.code = code


def _seed(args) -> int | None:
    """--seed, else FAILBAND_SEED, else None (caller default)."""
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("FAILBAND_SEED")
    if env is None or env == "":
        return None
    try:
        return int(env)
    except ValueError:
        raise CliError(f"FAILBAND_SEED must be an integer, got {env!r}") from None


def _file_sha(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _load(path):
    if not Path(path).exists():
        raise CliError(f"dataset not found: {path}", EXIT_DATA)
    header, rollouts = load_dataset(path)
    return header, rollouts


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


# -- simulate -------------------------------------------------------------------


def cmd_simulate(args) -> int:
    values = {}
    if args.config:
        if not Path(args.config).exists():
            raise CliError(f"config file not found: {args.config}")
        values = read_config_values(args.config)
    flags = {
        "n_rollouts": args.n_rollouts,
        "T_max": args.T_max,
        "noise": args.noise,
        "failure_spec": args.failure_spec,
        "start_index": args.start_index,
        "id_prefix": args.id_prefix,
        "embedding_seed": args.embedding_seed,
        "seed": args.seed,
    }
    values.update({k: v for k, v in flags.items() if v is not None})
    if "seed" not in values:
        env_seed = _seed(args)
        if env_seed is not None:
            values["seed"] = env_seed
    config = config_from_mapping(values)
    header, rollouts = generate_dataset(config)
    save_rollouts(rollouts, args.out, header)
    labels = Counter(r.label.value for r in rollouts)
    modes = Counter(r.failure_mode.value if r.failure_mode else "none" for r in rollouts)
    print(f"wrote {len(rollouts)} rollouts to {args.out} (seed {config.seed})")
    print("labels: " + ", ".join(f"{k}={labels[k]}" for k in sorted(labels)))
    print("modes:  " + ", ".join(f"{k}={modes[k]}" for k in sorted(modes)))
    return 0


# -- train-score ------------------------------------------------------------------

_HYPER_KEYS = {
    ScoreMethodId.LOGPZO: ("epochs", "batch_size", "lr", "hidden", "seed", "steps"),
    ScoreMethodId.LOGPO: ("epochs", "batch_size", "lr", "hidden", "seed", "steps"),
    ScoreMethodId.RND: ("epochs", "batch_size", "lr", "hidden", "seed", "out_dim"),
    ScoreMethodId.CFM: ("epochs", "batch_size", "lr", "hidden", "seed", "consistency_weight"),
    ScoreMethodId.PCA_KMEANS: ("seed", "k", "m"),
}


def _method(name: str) -> ScoreMethodId:
    try:
        return ScoreMethodId(name)
    except ValueError:
        valid = "|".join(m.value for m in ScoreMethodId)
        raise CliError(f"unknown method {name!r} (expected {valid})") from None


def cmd_train_score(args) -> int:
    method = _method(args.method)
    if method not in TRAINABLE:
        raise CliError(f"{method.value}: method requires no training (parameter-free)")
    header, rollouts = _load(args.train)
    train = [r for r in rollouts if r.label is not Label.FAILURE]
    if len(train) < len(rollouts):
        _err(f"note: skipped {len(rollouts) - len(train)} Failure-labeled rollouts")
    if not train:
        raise CliError("no non-failure rollouts to train on", EXIT_DATA)
    seed = _seed(args)
    raw = {
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "hidden": tuple(int(x) for x in args.hidden.split(",")) if args.hidden else None,
        "seed": 0 if seed is None else seed,
        "steps": args.steps,
        "out_dim": args.out_dim,
        "consistency_weight": args.consistency_weight,
        "k": args.k,
        "m": args.m,
    }
    hyper = {k: raw[k] for k in _HYPER_KEYS[method] if raw[k] is not None}
    scorer = train_scorer(method, train, hyper)
    first = train[0].steps[0]
    manifest = {
        "dims": {"d_O": int(first.obs.shape[0]), "d_a": int(first.action_chunk.shape[1]), "H": int(first.action_chunk.shape[0])},
        "seed": hyper.get("seed", 0),
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in hyper.items()},
        "train_sha256": _file_sha(args.train),
    }
    manifest["config_hash"] = config_hash({"method": method.value, **manifest})
    save_scorer(scorer, args.out, manifest)
    print(f"trained {method.value} on {len(train)} rollouts; model -> {args.out} (hash {manifest['config_hash']})")
    return 0


# -- scorer resolution shared by calibrate / detect / sweep --------------------------


def _scorer(args, header):
    if args.model:
        if not Path(args.model).exists():
            raise CliError(f"model file not found: {args.model}", EXIT_DATA)
        scorer, man = load_scorer(args.model)
        if args.method and ScoreMethodId(args.method) is not scorer.method:
            raise CliError(f"--method {args.method} does not match model method {scorer.method.value}")
        return scorer
    if not args.method:
        raise CliError("give --model, or --method sparc|stac for parameter-free methods")
    method = _method(args.method)
    if method is ScoreMethodId.SPARC:
        return SparcScorer()
    if method is ScoreMethodId.STAC:
        try:
            policy = policy_from_header(header)
        except ValueError as exc:
            raise CliError(str(exc), EXIT_DATA) from None
        seed = _seed(args)
        cfg = StacConfig(
            batch_size=args.stac_batch,
            H=header.H,
            H_prime=header.H_prime,
            threshold_mode=args.stac_mode,
            seed=0 if seed is None else seed,
        )
        return StacScorer(policy, cfg)
    raise CliError(f"{method.value} needs a trained --model")


def _is_cumulative(scorer) -> bool:
    return isinstance(scorer, StacScorer) and scorer.cumulative


def _success_only(rollouts, allow_mixed: bool):
    bad = [r.id for r in rollouts if r.label is not Label.SUCCESS]
    if bad and not allow_mixed:
        raise CliError(
            f"calibration set has {len(bad)} non-Success rollouts (e.g. {bad[0]}); "
            "pass --allow-mixed to drop them",
            EXIT_DATA,
        )
    return [r for r in rollouts if r.label is Label.SUCCESS]


def cmd_calibrate(args) -> int:
    header, rollouts = _load(args.data)
    cal = _success_only(rollouts, args.allow_mixed)
    if len(cal) < 2:
        raise CliError(f"need at least 2 successful calibration rollouts, got {len(cal)}", EXIT_DATA)
    scorer = _scorer(args, header)
    series = [scorer.score_rollout(r) for r in cal]
    seed = _seed(args)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", CoverageWarning)
        band = calibrate(series, args.alpha, args.variant, args.split_ratio, 0 if seed is None else seed, _is_cumulative(scorer))
    for w in caught:
        _err(f"warning: {w.message}")
    save_band(band, args.out)
    print(f"calibrated {scorer.method.value} band on {len(cal)} rollouts (alpha={args.alpha}, {band.variant}); band -> {args.out}")
    return 0


# -- detect -----------------------------------------------------------------------


def cmd_detect(args) -> int:
    header, rollouts = _load(args.data)
    band = load_band(args.band)
    scorer = _scorer(args, header)
    rollouts = sorted(rollouts, key=lambda r: r.id)
    step_log = open(args.step_log, "w", encoding="utf-8") if args.step_log else None
    try:
        out = run_stream(scorer, band, rollouts, sink=step_log)
    finally:
        if step_log:
            step_log.close()
    results = out.results
    if args.check_batch:
        batch = [detect_rollout(band, s) for s in out.series]
        if batch != results:
            raise CliError("streaming and batch decisions differ", EXIT_NUMERIC)
    with open(args.out, "w", encoding="utf-8") as fh:
        meta = {"method": scorer.method.value, "alpha": band.alpha, "variant": band.variant}
        fh.write(json.dumps({"meta": meta}) + "\n")
        for r in results:
            fh.write(json.dumps(r.to_json()) + "\n")
    lat = out.latency_ms()
    flagged = sum(r.flagged for r in results)
    print(f"{len(results)} rollouts, {flagged} flagged; results -> {args.out}")
    if lat.size:
        _err(f"scoring latency per step: p50 {np.percentile(lat, 50):.3f} ms, p95 {np.percentile(lat, 95):.3f} ms")
    return 0


def _read_results(path):
    meta, results = {}, []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if "meta" in rec:
                    meta = rec["meta"]
                else:
                    results.append(DetectionResult.from_json(rec))
            except (ValueError, KeyError) as exc:
                raise CliError(f"{path}:{lineno}: bad result record ({exc})", EXIT_DATA) from None
    return meta, results


def cmd_evaluate(args) -> int:
    meta, results = _read_results(args.results)
    _, rollouts = _load(args.data)
    labels = {r.id: r.label for r in rollouts}
    missing = [r.rollout_id for r in results if r.rollout_id not in labels]
    if missing:
        raise CliError(f"no label for rollout {missing[0]!r}", EXIT_DATA)
    rep = evaluate(results, labels, meta.get("alpha"), args.name or meta.get("method", ""), args.setting)
    emit_report([rep], args.format, args.out)
    print(f"tpr={rep.tpr} tnr={rep.tnr} balanced={rep.balanced_acc} weighted={rep.weighted_acc} "
          f"mean_detection_time={rep.mean_detection_time}; report -> {args.out}")
    return 0


def cmd_sweep_alpha(args) -> int:
    cal_header, cal_rollouts = _load(args.cal)
    _, test = _load(args.data)
    cal = _success_only(cal_rollouts, args.allow_mixed)
    if len(cal) < 2:
        raise CliError(f"need at least 2 successful calibration rollouts, got {len(cal)}", EXIT_DATA)
    if args.grid is not None:
        try:
            grid = [float(x) for x in args.grid.split(",") if x.strip()]
        except ValueError:
            raise CliError(f"--grid: cannot parse {args.grid!r}") from None
        if not grid:
            raise CliError("--grid is empty")
    else:
        grid = list(DEFAULT_ALPHA_GRID)
    scorer = _scorer(args, cal_header)
    cal_series = [scorer.score_rollout(r) for r in cal]
    test_series = [scorer.score_rollout(r) for r in sorted(test, key=lambda r: r.id)]
    labels = {r.id: r.label for r in test}
    seed = _seed(args)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CoverageWarning)
        reports = alpha_sweep(
            cal_series, test_series, labels, grid, args.variant, args.split_ratio,
            0 if seed is None else seed, args.name or scorer.method.value, args.setting, _is_cumulative(scorer),
        )
    emit_report(reports, args.format, args.out)
    print(f"swept {len(grid)} alpha values for {scorer.method.value}; report -> {args.out}")
    return 0


# -- parser -----------------------------------------------------------------------


def _add_scorer_args(p) -> None:
    p.add_argument("--model", help="trained model container")
    p.add_argument("--method", help="score method (needed alone for sparc/stac)")
    p.add_argument("--stac-batch", type=int, default=256, help="STAC samples per step")
    p.add_argument("--stac-mode", choices=("cumulative", "band"), default="cumulative")
    p.add_argument("--seed", type=int)


def _add_band_args(p) -> None:
    p.add_argument("--variant", choices=("V1", "V2"), default="V2")
    p.add_argument("--split-ratio", type=float, default=0.3)
    p.add_argument("--allow-mixed", action="store_true", help="drop non-Success rollouts instead of refusing")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="failband", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic rollout dataset")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-rollouts", type=int)
    p.add_argument("--T-max", dest="T_max", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--failure-spec", help='e.g. "SensorShift:0.2,Slip:0.2"')
    p.add_argument("--start-index", type=int)
    p.add_argument("--id-prefix")
    p.add_argument("--embedding-seed", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train-score", help="fit a score model on (mostly successful) rollouts")
    p.add_argument("--method", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--hidden", help="comma-separated hidden widths")
    p.add_argument("--steps", type=int, help="ODE steps (logpzo latent / logpo integrator)")
    p.add_argument("--out-dim", type=int)
    p.add_argument("--consistency-weight", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--m", type=int)
    p.set_defaults(func=cmd_train_score)

    p = sub.add_parser("calibrate", help="fit a CP band on successful rollouts")
    _add_scorer_args(p)
    _add_band_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("detect", help="run the detector over a test dataset")
    _add_scorer_args(p)
    p.add_argument("--band", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--step-log", help="per-step score/latency log (JSON lines)")
    p.add_argument("--check-batch", action="store_true", help="verify streaming equals batch decisions")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("evaluate", help="metrics for a detection results file")
    p.add_argument("--results", required=True)
    p.add_argument("--data", required=True, help="labeled test dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--name", help="method column value (default: from results)")
    p.add_argument("--setting", default="")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep-alpha", help="recalibrate and evaluate over a grid of alpha values")
    _add_scorer_args(p)
    _add_band_args(p)
    p.add_argument("--cal", required=True)
    p.add_argument("--data", required=True, help="labeled test dataset")
    p.add_argument("--grid", help="comma-separated alphas (default: 10 values in [0.01, 0.1])")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--name")
    p.add_argument("--setting", default="")
    p.set_defaults(func=cmd_sweep_alpha)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        _err(f"error: {exc}")
        return exc.code
    except ConfigError as exc:
        _err(f"config error: {exc}")
        return EXIT_CONFIG
    except (IntegrationError, FloatingPointError, ArithmeticError) as exc:
        _err(f"numeric failure: {exc}")
        return EXIT_NUMERIC
    except (DatasetError, OSError) as exc:
        _err(f"data error: {exc}")
        return EXIT_DATA
    except (ValueError, KeyError) as exc:
        _err(f"data error: {exc}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
