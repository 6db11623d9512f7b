"""Command-line pipeline: synth, featurize, evaluate, baseline, trajectory.

Each subcommand reads/writes files so every stage can be checked against its
oracle independently. All randomness flows from --seed; outputs are
byte-identical for a fixed config regardless of --jobs.

Exit codes: 0 success, 1 partial grid failure, 2 validation error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, aggregate, classify, dmdc, evaluation, report, synth
from .corpus import SCORE_KEYS, align_pairs, extract_windows, load_corpus, normalize_turns, save_corpus
from .errors import NotFoundError, ValidationError
from .evaluation import GridConfig

PAPER_WINDOWS = (3, 5, 8)
PAPER_N_MODES = (1, 3, 5, 7)


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _strs(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _warn_override(name: str, values, allowed) -> None:
    off = [v for v in values if v not in allowed]
    if off:
        print(f"note: {name} {off} outside the default grid {list(allowed)}", file=sys.stderr)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1, help="max worker threads")
    p.add_argument("--config", help="JSON file of flag defaults; flags override")


def _add_grid(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input", required=True, help="session file (one JSON record per line)")
    p.add_argument("--scores", type=_strs, default=SCORE_KEYS, help="comma-separated score keys")
    p.add_argument("--windows", type=_ints, default=PAPER_WINDOWS)
    p.add_argument("--n-lambda", type=_ints, default=PAPER_N_MODES, dest="n_lambda")
    p.add_argument("--input-types", type=_strs, default=dmdc.INPUT_KINDS, dest="input_types")
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--tol", type=float, default=None, help="relative SVD cutoff (default machine)")
    p.add_argument("--threshold", type=float, default=0.5)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dyadmodes", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled corpus")
    _add_common(p)
    p.add_argument("--sessions", type=int, default=40)
    p.add_argument("--clients", type=int, default=20)
    p.add_argument("--dim", type=int, default=synth.DEFAULT_DIM)
    p.add_argument("--noise", type=float, default=synth.DEFAULT_NOISE)
    p.add_argument("--length-range", type=int, nargs=2, default=list(synth.DEFAULT_LENGTH_RANGE))
    p.add_argument("--null", action="store_true", help="identical dynamics for both labels")

    p = sub.add_parser("featurize", help="windows -> mode features and diagnostics")
    _add_common(p)
    _add_grid(p)

    p = sub.add_parser("evaluate", help="full grid: local + global tasks with baselines")
    _add_common(p)
    _add_grid(p)
    p.add_argument("--models", type=_strs, default=tuple(s.name for s in classify.default_model_grid()))
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--boot", type=int, default=1000)
    p.add_argument("--accumulators", type=_strs, default=aggregate.ACCUMULATORS)
    p.add_argument("--aggregators", type=_strs, default=aggregate.AGGREGATORS)
    p.add_argument("--soft-sum", action="store_true", dest="soft_sum",
                   help="accumulate raw probabilities instead of thresholded counts")
    p.add_argument("--no-dump-predictions", action="store_false", dest="dump_predictions")

    p = sub.add_parser("baseline", help="bootstrap significance thresholds only")
    _add_common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--scores", type=_strs, default=SCORE_KEYS)
    p.add_argument("--windows", type=_ints, default=PAPER_WINDOWS)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--boot", type=int, default=1000)

    p = sub.add_parser("trajectory", help="cumulative window scores for named sessions")
    _add_common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--models", required=True, help="model store directory from evaluate")
    p.add_argument("--session-id", nargs="+", required=True, dest="session_ids")
    p.add_argument("--score", default="ctrs")
    p.add_argument("--threshold", type=float, default=0.5)
    return parser


def _apply_config_file(parser, argv):
    # a --config file supplies defaults; explicit flags still win
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config")
    known, _ = probe.parse_known_args(argv)
    if known.config:
        with open(known.config, "r", encoding="utf-8") as fh:
            defaults = json.load(fh)
        if not isinstance(defaults, dict):
            raise ValidationError(f"{known.config}: config must be a JSON object")
        for action in parser._subparsers._group_actions[0].choices.values():
            usable = {a.dest for a in action._actions}
            action.set_defaults(**{k: v for k, v in defaults.items() if k in usable})


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    system0, system1 = synth.default_systems(
        null=args.null, dim=args.dim, noise_sigma=args.noise, seed=args.seed
    )
    sessions = synth.make_labeled_corpus(
        system0,
        system1,
        n_sessions=args.sessions,
        n_clients=args.clients,
        length_range=tuple(args.length_range),
        seed=args.seed,
        jobs=args.jobs,
    )
    save_corpus(sessions, out / "sessions.jsonl")
    report.write_labels_csv(sessions, out / "labels.csv")
    report.write_manifest(
        out / "manifest.json",
        {
            "command": "synth",
            "version": __version__,
            "seed": args.seed,
            "n_sessions": args.sessions,
            "n_clients": args.clients,
            "dim": args.dim,
            "noise_sigma": args.noise,
            "length_range": list(args.length_range),
            "null": args.null,
            "planted": {
                "label0_transition": [str(v) for v in system0.transition_eigs],
                "label1_transition": [str(v) for v in system1.transition_eigs],
                "control": [str(v) for v in system0.control_eigs],
            },
        },
    )
    print(f"wrote {len(sessions)} sessions to {out / 'sessions.jsonl'}")
    return 0


def _check_grid_values(args) -> None:
    _warn_override("--windows", args.windows, PAPER_WINDOWS)
    _warn_override("--n-lambda", args.n_lambda, PAPER_N_MODES)
    _warn_override("--input-types", args.input_types, dmdc.INPUT_KINDS)
    if hasattr(args, "models"):
        known = {s.name for s in classify.default_model_grid()}
        _warn_override("--models", args.models, known)


def cmd_featurize(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _check_grid_values(args)
    sessions = load_corpus(args.input)
    feats = evaluation.prepare_features(
        sessions, args.windows, stride=args.stride, svd_tol=args.tol, jobs=args.jobs
    )
    spectra_rows = []
    feature_rows = []
    for w in args.windows:
        for sid in feats.session_ids:
            for sp in feats.spectra[w].get(sid, []):
                spectra_rows.append(sp)
                for kind in args.input_types:
                    for n_modes in args.n_lambda:
                        feature_rows.append(dmdc.build_features(sp, kind, n_modes))
    report.write_features_csv(feature_rows, out / "features.csv")
    report.write_spectra_csv(spectra_rows, out / "spectra.csv")
    report.write_labels_csv(sessions, out / "labels.csv")
    report.render_mode_count_figure(spectra_rows, out / "fig_mode_counts.png")
    report.write_manifest(
        out / "manifest.json",
        {
            "command": "featurize",
            "version": __version__,
            "input": str(args.input),
            "seed": args.seed,
            "windows": list(args.windows),
            "n_lambda": list(args.n_lambda),
            "input_types": list(args.input_types),
            "stride": args.stride,
            "svd_tol": args.tol,
        },
    )
    print(f"wrote {len(feature_rows)} feature rows to {out / 'features.csv'}")
    return 0


def _save_model_store(result, out: Path, args) -> None:
    from .evaluation import best_cells, run_cell

    store = out / "models"
    for key, cell in best_cells(result).items():
        cell_dir = store / key
        cell_dir.mkdir(parents=True, exist_ok=True)
        spec = classify.parse_spec(cell.model_name, seed=args.seed)
        feats = result.features.feature_table(cell.window_size, cell.input_kind, cell.n_modes)
        labels = {sid: result.features.labels[sid][key] for sid in result.features.session_ids}
        rerun = run_cell(
            spec,
            result.features.session_ids,
            feats,
            labels,
            result.folds[key].fold_of,
            args.folds,
            args.threshold,
        )
        meta = {
            "score": key,
            "w": cell.window_size,
            "n_lambda": cell.n_modes,
            "input_type": cell.input_kind,
            "stride": args.stride,
            "svd_tol": args.tol,
            "threshold": args.threshold,
            "local_f1": cell.local_f1,
        }
        for f, model in enumerate(rerun.fold_models):
            classify.save_model(model, cell_dir / f"fold{f}.model", meta | {"fold": f})
        with open(cell_dir / "folds.json", "w", encoding="utf-8") as fh:
            json.dump(result.folds[key].fold_of, fh, indent=0, sort_keys=True)


def cmd_evaluate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _check_grid_values(args)
    sessions = load_corpus(args.input)
    config = GridConfig(
        score_keys=tuple(args.scores),
        model_names=tuple(args.models),
        window_sizes=tuple(args.windows),
        n_modes_list=tuple(args.n_lambda),
        input_kinds=tuple(args.input_types),
        accumulators=tuple(args.accumulators),
        aggregators=tuple(args.aggregators),
        n_folds=args.folds,
        n_boot=args.boot,
        svd_tol=args.tol,
        stride=args.stride,
        threshold=args.threshold,
        soft_accumulation=args.soft_sum,
        keep_predictions=args.dump_predictions,
    )
    result = evaluation.run_grid(sessions, config, seed=args.seed, jobs=args.jobs)
    report.write_local_results_csv(result, out / "local_results.csv")
    report.write_global_results_csv(result, out / "global_results.csv")
    report.write_local_baselines_csv(result, out / "local_baselines.csv")
    report.write_global_baselines_csv(result.global_baselines, out / "global_baselines.csv")
    if args.dump_predictions:
        report.write_predictions_csv(
            result, out / "predictions_local.csv", out / "predictions_global.csv"
        )
    report.render_results_figure(result, out / "fig_results.png")
    _save_model_store(result, out, args)
    n_cells = len(result.results)
    report.write_manifest(
        out / "manifest.json",
        {
            "command": "evaluate",
            "version": __version__,
            "input": str(args.input),
            "seed": args.seed,
            "grid": {
                "scores": list(args.scores),
                "models": list(args.models),
                "windows": list(args.windows),
                "n_lambda": list(args.n_lambda),
                "input_types": list(args.input_types),
                "accumulators": list(args.accumulators),
                "aggregators": list(args.aggregators),
            },
            "folds": args.folds,
            "n_boot": args.boot,
            "stride": args.stride,
            "svd_tol": args.tol,
            "threshold": args.threshold,
            "soft_sum": args.soft_sum,
            "dump_predictions": args.dump_predictions,
            "cells": n_cells,
            "cells_failed": result.n_failed,
        },
    )
    print(f"evaluated {n_cells} cells ({result.n_failed} failed) -> {out}")
    if result.n_failed == n_cells:
        raise ValidationError("every grid cell failed")
    return 1 if result.n_failed else 0


def cmd_baseline(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sessions = load_corpus(args.input)
    feats = evaluation.prepare_features(sessions, args.windows, stride=args.stride, jobs=args.jobs)
    local = {}
    for key in args.scores:
        for w in args.windows:
            labels = np.concatenate(
                [
                    np.full(len(specs), feats.labels[sid][key])
                    for sid, specs in feats.spectra[w].items()
                    if specs
                ]
            )
            local[(key, w)] = evaluation.bootstrap_local_baseline(
                labels, args.boot, seed=evaluation.derived_rng(args.seed, "local-baseline", key, w)
            )
    global_ = {
        key: evaluation.bootstrap_global_baseline(
            [feats.labels[sid][key] for sid in feats.session_ids],
            args.boot,
            seed=evaluation.derived_rng(args.seed, "global-baseline", key),
        )
        for key in args.scores
    }

    class _Shim:
        local_baselines = local

    report.write_local_baselines_csv(_Shim, out / "local_baselines.csv")
    report.write_global_baselines_csv(global_, out / "global_baselines.csv")
    report.write_manifest(
        out / "manifest.json",
        {
            "command": "baseline",
            "version": __version__,
            "input": str(args.input),
            "seed": args.seed,
            "windows": list(args.windows),
            "scores": list(args.scores),
            "n_boot": args.boot,
            "stride": args.stride,
        },
    )
    print(f"wrote baselines for {len(args.scores)} scores to {out}")
    return 0


def cmd_trajectory(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    store = Path(args.models) / args.score
    if not store.is_dir():
        raise NotFoundError(f"no model store for score {args.score!r} under {args.models}")
    with open(store / "folds.json", "r", encoding="utf-8") as fh:
        fold_of = json.load(fh)
    models = {}
    meta = None
    for path in sorted(store.glob("fold*.model")):
        model, m = classify.load_model(path)
        models[int(m["fold"])] = model
        meta = m
    if not models:
        raise NotFoundError(f"no models under {store}")

    sessions = {s.session_id: s for s in load_corpus(args.input)}
    points = {}
    for sid in args.session_ids:
        if sid not in sessions:
            raise NotFoundError(f"session {sid!r} not in {args.input}")
        pair = align_pairs(normalize_turns(sessions[sid]))
        windows = extract_windows(pair, meta["w"], meta["stride"])
        if not windows:
            raise ValidationError(
                f"session {sid!r} has {pair.n_exchanges} exchanges, too short for w={meta['w']}"
            )
        fits = [dmdc.fit_window(win, tol=meta["svd_tol"]) for win in windows]
        feats = np.array(
            [
                dmdc.build_features(dmdc.eigenvalues(f), meta["input_type"], meta["n_lambda"]).values
                for f in fits
            ]
        )
        model = models.get(fold_of.get(sid, 0), models[min(models)])
        probs = np.atleast_1d(classify.predict_proba(model, feats))
        points[sid] = aggregate.trajectory(probs, threshold=args.threshold)
    report.write_trajectory_csv(points, out / "trajectory.csv")
    report.render_trajectory_figure(points, out / "fig_trajectory.png")
    print(f"wrote trajectories for {len(points)} sessions to {out / 'trajectory.csv'}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "featurize": cmd_featurize,
    "evaluate": cmd_evaluate,
    "baseline": cmd_baseline,
    "trajectory": cmd_trajectory,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except (ValidationError, NotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
