"""Command-line entry point.

Subcommands: synth, train, eval, dp-sweep, crossval, seal, unseal, keygen.
Every run writes a ``manifest.json`` (resolved config, seed, input hashes)
and a ``resolved.cfg`` key=value file sufficient to reproduce it; commands
emit CSV/JSON for external plotting rather than anything interactive.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical fault,
1 unexpected failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, evaluate, pipeline, store, synth
from .dsp import SpectrogramConfig, default_spectrogram_config
from .errors import ConfigError, DataError, NumericalFault, OccusenseError
from .evaluate import aggregate_paired, format_report_table, pearson

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

DEFAULT_EPS_GRID = (5.0, 2.0, 1.0, 0.5, 0.25, 0.1)


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Flat ``section.key = value`` lines; '#' starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _get(args, config: dict, section: str, name: str, default, cast=str):
    """Resolution order: CLI flag > config-file key > default."""
    flag = getattr(args, name.replace(".", "_").replace("-", "_"), None)
    if flag is not None:
        return flag
    key = f"{section}.{name}"
    if key in config:
        raw = config[key]
        if cast is bool:
            return raw.lower() in ("1", "true", "yes", "on")
        try:
            return cast(raw)
        except ValueError as exc:
            raise ConfigError(f"config key {key}: cannot parse {raw!r}") from exc
    return default


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _hash_inputs(paths: list[Path]) -> dict[str, str]:
    hashes = {}
    for p in paths:
        if p.is_dir():
            for f in sorted(p.rglob("*")):
                if f.is_file():
                    hashes[str(f)] = _sha256(f)
        elif p.is_file():
            hashes[str(p)] = _sha256(p)
    return hashes


def _write_manifest(out_dir: Path, command: str, resolved: dict, seed: int,
                    inputs: list[Path]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "resolved_config": resolved,
        "inputs": _hash_inputs(inputs),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    lines = [f"{command}.{k} = {v}" for k, v in sorted(resolved.items()) if v is not None]
    (out_dir / "resolved.cfg").write_text("\n".join(lines) + "\n")


def _spectrogram_config(args, config, section: str, sample_rate: int) -> SpectrogramConfig:
    base = default_spectrogram_config(sample_rate)
    frame_ms = _get(args, config, section, "frame-ms", base.window_len / sample_rate * 1000.0, float)
    hop_ms = _get(args, config, section, "hop-ms", base.hop_len / sample_rate * 1000.0, float)
    return SpectrogramConfig(
        sample_rate=sample_rate,
        window_len=int(round(frame_ms / 1000.0 * sample_rate)),
        hop_len=int(round(hop_ms / 1000.0 * sample_rate)),
        n_mels=_get(args, config, section, "n-mels", base.n_mels, int),
        fmin=_get(args, config, section, "fmin", base.fmin, float),
        fmax=_get(args, config, section, "fmax", base.fmax, float),
    )


def _pipeline_config(args, config, section: str, scenario: synth.Scenario) -> pipeline.PipelineConfig:
    spec = _spectrogram_config(args, config, section, scenario.config.sample_rate)
    return pipeline.PipelineConfig(
        spectrogram=spec,
        scheme=_get(args, config, section, "scheme", 1, int),
        window=_get(args, config, section, "window", 60, int),
        encoder=_get(args, config, section, "encoder", "frozen", str),
        clip_bound=_get(args, config, section, "clip-bound", 1.0, float),
        epsilon=_get(args, config, section, "dp-epsilon", None, float),
        epochs=_get(args, config, section, "epochs", 30, int),
        lr=_get(args, config, section, "lr", 0.001, float),
        seed=args.seed,
        folds=_get(args, config, section, "folds", 10, int),
    )


def _resolved_pipeline_dict(cfg: pipeline.PipelineConfig) -> dict:
    d = {
        "scheme": cfg.scheme, "window": cfg.window, "encoder": cfg.encoder,
        "clip-bound": cfg.clip_bound, "dp-epsilon": cfg.epsilon, "epochs": cfg.epochs,
        "lr": cfg.lr, "folds": cfg.folds,
        "frame-ms": cfg.spectrogram.window_len / cfg.spectrogram.sample_rate * 1000.0,
        "hop-ms": cfg.spectrogram.hop_len / cfg.spectrogram.sample_rate * 1000.0,
        "n-mels": cfg.spectrogram.n_mels, "fmin": cfg.spectrogram.fmin,
        "fmax": cfg.spectrogram.fmax,
    }
    return d


def cmd_synth(args, config) -> int:
    rates_text = _get(args, config, "synth", "arrival-rate", "12", str)
    rates = _float_list(str(rates_text))
    scfg = synth.ScenarioConfig(
        duration=_get(args, config, "synth", "duration", 3600, int),
        arrival_rate=rates[0] if len(rates) == 1 else tuple(rates),
        mean_dwell=_get(args, config, "synth", "mean-dwell", 900.0, float),
        cough_rate=_get(args, config, "synth", "cough-rate", 1.5, float),
        footstep_rate=_get(args, config, "synth", "footstep-rate", 1.2, float),
        rustle_rate=_get(args, config, "synth", "rustle-rate", 3.0, float),
        speech_fraction=_get(args, config, "synth", "speech-fraction", 0.2, float),
        noise_floor=_get(args, config, "synth", "noise-floor", 0.02, float),
        sample_rate=_get(args, config, "synth", "sample-rate", 8000, int),
        mic_positions=_parse_mics(_get(args, config, "synth", "mics", "3.9:2.9,4.1:3.1", str)),
        seed=args.seed,
    )
    out = Path(args.out)
    scenario = synth.generate_scenario(scfg)
    synth.save_scenario(out, scenario)
    _write_manifest(out, "synth", scfg.to_json_dict(), args.seed, [])
    print(f"scenario written to {out} ({scfg.duration} s, {len(scenario.events)} events)")
    return EXIT_OK


def _parse_mics(text: str) -> tuple:
    mics = []
    for part in text.split(","):
        x, y = part.split(":")
        mics.append((float(x), float(y)))
    return tuple(mics)


def _load_windows(args, config, section: str):
    scenario = synth.load_scenario(args.scenario)
    cfg = _pipeline_config(args, config, section, scenario)
    windows = pipeline.build_windows(scenario, cfg)
    return scenario, cfg, windows


def cmd_train(args, config) -> int:
    scenario, cfg, windows = _load_windows(args, config, "train")
    holdout = _get(args, config, "train", "holdout-fold", None, int)
    train_windows = windows if holdout is None else [w for w in windows if w.fold != holdout]
    if not train_windows:
        raise DataError("no training windows left after hold-out")
    mdl = pipeline.train_pipeline(train_windows, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pipeline.save_model(out / "checkpoint.opr", mdl)
    with open(out / "loss_history.csv", "w") as fh:
        fh.write("epoch,mean_loss\n")
        for i, loss in enumerate(mdl.loss_history):
            fh.write(f"{i},{loss:.10g}\n")
    resolved = _resolved_pipeline_dict(cfg) | {"holdout-fold": holdout, "scenario": str(args.scenario)}
    _write_manifest(out, "train", resolved, args.seed, [Path(args.scenario)])
    print(f"trained {len(train_windows)} windows for {cfg.epochs} epochs; "
          f"final loss {mdl.loss_history[-1]:.4f}; checkpoint in {out}")
    return EXIT_OK


def cmd_eval(args, config) -> int:
    scenario = synth.load_scenario(args.scenario)
    mdl = pipeline.load_model(args.checkpoint)
    cfg = mdl.config
    windows = pipeline.build_windows(scenario, cfg)
    fold = _get(args, config, "eval", "fold", None, int)
    if fold is not None:
        windows = [w for w in windows if w.fold == fold]
        if not windows:
            raise DataError(f"fold {fold} contains no windows")
    draws = _get(args, config, "eval", "dp-draws", 1, int)
    dp_seed = _get(args, config, "eval", "dp-seed", None, int)
    result = pipeline.evaluate_model(mdl, windows, dp_draws=draws, noise_seed=dp_seed)

    test_truth = np.concatenate([w.truth for w in windows])
    train_truth = scenario.truth.counts[np.concatenate(
        [w.timestamps for w in pipeline.build_windows(scenario, cfg) if fold is None or w.fold != fold]
    )] if fold is not None else scenario.truth.counts
    base = evaluate.baseline_mean(train_truth, test_truth)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = [
        {"model": "transformer", "modality": f"non-speech audio (scheme {cfg.scheme})",
         **result.metrics.to_dict()},
        {"model": "baseline-mean", "modality": "constant predictor", **base.to_dict()},
    ]
    agg_windows = _get(args, config, "eval", "agg", "1800,3600,7200", str)
    agg_rows = []
    for w_s in [int(x) for x in _float_list(str(agg_windows))]:
        try:
            p_agg, t_agg = aggregate_paired(result.pred, result.truth, result.valid, w_s)
        except DataError:
            continue
        if p_agg.size >= 2:
            agg_rows.append({"window_seconds": w_s, "rho": pearson(p_agg, t_agg),
                             "n_windows": int(p_agg.size)})
    (out / "metrics.json").write_text(json.dumps(
        {"reports": rows, "aggregation": agg_rows}, indent=2, sort_keys=True) + "\n")
    (out / "table.txt").write_text(format_report_table(rows))
    evaluate.write_predictions_csv(out / "predictions.csv", result.seconds[result.valid],
                                   result.truth[result.valid], result.pred[result.valid])
    if result.ledger is not None:
        result.ledger.save(out / "ledger.json")
    resolved = {"checkpoint": str(args.checkpoint), "scenario": str(args.scenario),
                "fold": fold, "dp-draws": draws, "dp-seed": dp_seed, "agg": agg_windows}
    _write_manifest(out, "eval", resolved, args.seed, [Path(args.checkpoint), Path(args.scenario)])
    print(format_report_table(rows))
    return EXIT_OK


def cmd_dp_sweep(args, config) -> int:
    scenario, cfg, windows = _load_windows(args, config, "dp-sweep")
    holdout = _get(args, config, "dp-sweep", "holdout-fold", cfg.folds - 1, int)
    train_windows = [w for w in windows if w.fold != holdout]
    test_windows = [w for w in windows if w.fold == holdout]
    if not train_windows or not test_windows:
        raise DataError(f"hold-out fold {holdout} leaves an empty train or test split")
    eps_text = _get(args, config, "dp-sweep", "eps", ",".join(str(e) for e in DEFAULT_EPS_GRID), str)
    eps_list = _float_list(str(eps_text))
    draws = _get(args, config, "dp-sweep", "dp-draws", 3, int)
    rows = pipeline.dp_sweep(train_windows, test_windows, cfg, eps_list,
                             dp_draws=draws, noise_seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    with open(out / "sweep.csv", "w") as fh:
        fh.write("epsilon,mae,rmse,rho\n")
        for r in rows:
            eps = "inf" if r["epsilon"] is None else r["epsilon"]
            fh.write(f"{eps},{r['mae']:.6f},{r['rmse']:.6f},{r['rho']:.6f}\n")
    resolved = _resolved_pipeline_dict(cfg) | {"eps": eps_text, "holdout-fold": holdout,
                                               "dp-draws": draws, "scenario": str(args.scenario)}
    _write_manifest(out, "dp-sweep", resolved, args.seed, [Path(args.scenario)])
    for r in rows:
        eps = "noise-free" if r["epsilon"] is None else f"eps={r['epsilon']}"
        print(f"{eps:>12}  MAE {r['mae']:.3f}  RMSE {r['rmse']:.3f}  rho {r['rho']:.3f}")
    return EXIT_OK


def cmd_crossval(args, config) -> int:
    scenario, cfg, windows = _load_windows(args, config, "crossval")
    workers = args.workers or 1
    reports = evaluate.cross_validate(windows, cfg, folds=cfg.folds, workers=workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = [
        {"fold": r.fold, "model": r.model.to_dict(), "baseline": r.baseline.to_dict(),
         "n_train_windows": r.n_train_windows, "n_test_windows": r.n_test_windows}
        for r in reports
    ]
    mean = {
        "mae": float(np.mean([r.model.mae for r in reports])),
        "rmse": float(np.mean([r.model.rmse for r in reports])),
        "rho": float(np.mean([r.model.rho for r in reports])),
    }
    (out / "crossval.json").write_text(json.dumps(
        {"folds": rows, "mean": mean}, indent=2, sort_keys=True) + "\n")
    with open(out / "crossval.csv", "w") as fh:
        fh.write("fold,mae,rmse,rho,baseline_mae\n")
        for r in reports:
            fh.write(f"{r.fold},{r.model.mae:.6f},{r.model.rmse:.6f},{r.model.rho:.6f},{r.baseline.mae:.6f}\n")
    resolved = _resolved_pipeline_dict(cfg) | {"scenario": str(args.scenario), "workers": workers}
    _write_manifest(out, "crossval", resolved, args.seed, [Path(args.scenario)])
    for r in reports:
        print(f"fold {r.fold}: MAE {r.model.mae:.3f} RMSE {r.model.rmse:.3f} rho {r.model.rho:.3f}")
    print(f"mean: MAE {mean['mae']:.3f} RMSE {mean['rmse']:.3f} rho {mean['rho']:.3f}")
    return EXIT_OK


def cmd_keygen(args, config) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    private, public = store.generate_keypair()
    store.save_private_key(out / "private.pem", private)
    store.save_public_key(out / "public.pem", public)
    print(f"keypair written to {out}")
    return EXIT_OK


def cmd_seal(args, config) -> int:
    public = store.load_public_key(args.recipient)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for src in args.files:
        src = Path(src)
        dst = out / (src.name + store.SEALED_SUFFIX)
        store.seal_file(src, dst, public)
        print(f"sealed {src} -> {dst}")
    return EXIT_OK


def cmd_unseal(args, config) -> int:
    private = store.load_private_key(args.key)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for src in args.files:
        src = Path(src)
        name = src.name[: -len(store.SEALED_SUFFIX)] if src.name.endswith(store.SEALED_SUFFIX) else src.name + ".out"
        dst = out / name
        store.unseal_file(src, dst, private)
        print(f"unsealed {src} -> {dst}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="occusense",
        description="Privacy-preserving occupancy estimation from non-speech audio",
    )
    parser.add_argument("--version", action="version", version=f"occusense {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value config file; flags win")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--workers", type=int, default=None)

    def pipeline_flags(p, section):
        p.add_argument("--scheme", type=int, choices=(1, 2), default=None)
        p.add_argument("--encoder", choices=("frozen", "trainable"), default=None)
        p.add_argument("--window", type=int, default=None)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--clip-bound", type=float, default=None)
        p.add_argument("--folds", type=int, default=None)
        p.add_argument("--frame-ms", type=float, default=None)
        p.add_argument("--hop-ms", type=float, default=None)
        p.add_argument("--n-mels", type=int, default=None)
        p.add_argument("--fmin", type=float, default=None)
        p.add_argument("--fmax", type=float, default=None)

    p = sub.add_parser("synth", help="generate a synthetic scenario directory")
    common(p)
    p.add_argument("--duration", type=int, default=None)
    p.add_argument("--arrival-rate", default=None, help="persons/hour, single value or comma profile")
    p.add_argument("--mean-dwell", type=float, default=None)
    p.add_argument("--speech-fraction", type=float, default=None)
    p.add_argument("--cough-rate", type=float, default=None)
    p.add_argument("--footstep-rate", type=float, default=None)
    p.add_argument("--rustle-rate", type=float, default=None)
    p.add_argument("--noise-floor", type=float, default=None)
    p.add_argument("--sample-rate", type=int, default=None)
    p.add_argument("--mics", default=None, help="x:y,x:y ... microphone positions in meters")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a scenario")
    common(p)
    p.add_argument("--scenario", required=True)
    p.add_argument("--dp-epsilon", type=float, default=None)
    p.add_argument("--holdout-fold", type=int, default=None)
    pipeline_flags(p, "train")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a scenario")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--fold", type=int, default=None)
    p.add_argument("--agg", default=None, help="aggregation windows in seconds, comma list")
    p.add_argument("--dp-draws", type=int, default=None)
    p.add_argument("--dp-seed", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dp-sweep", help="noise-aware training/eval over an epsilon grid")
    common(p)
    p.add_argument("--scenario", required=True)
    p.add_argument("--eps", default=None, help="comma list of epsilon values")
    p.add_argument("--holdout-fold", type=int, default=None)
    p.add_argument("--dp-draws", type=int, default=None)
    pipeline_flags(p, "dp-sweep")
    p.set_defaults(func=cmd_dp_sweep)

    p = sub.add_parser("crossval", help="leave-one-segment-out cross-validation")
    common(p)
    p.add_argument("--scenario", required=True)
    pipeline_flags(p, "crossval")
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("keygen", help="generate a recipient keypair")
    common(p)
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("seal", help="envelope-encrypt files to a recipient")
    common(p)
    p.add_argument("--recipient", required=True, help="public key PEM")
    p.add_argument("files", nargs="+")
    p.set_defaults(func=cmd_seal)

    p = sub.add_parser("unseal", help="decrypt sealed records")
    common(p)
    p.add_argument("--key", required=True, help="private key PEM")
    p.add_argument("files", nargs="+")
    p.set_defaults(func=cmd_unseal)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        config = parse_config_file(args.config) if args.config else {}
        return args.func(args, config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalFault as exc:
        print(f"numerical fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OccusenseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
