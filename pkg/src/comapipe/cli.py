"""Command-line front end.

Exit codes: 0 success, 2 usage or configuration error, 3 data or validation
error, 4 internal error. Errors and log records go to stderr as one JSON
object per line.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import CONFIG_FILENAME, PipelineConfig, load_config
from .errors import ConfigError, DataError

log = logging.getLogger("comapipe")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 2, 3, 4
DATA_ENV = "COMAPIPE_DATA"
VARIANT_IDS = ("M1", "M2", "M3", "M4", "M5", "M6")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class _JsonLines(logging.Formatter):
    def format(self, record):
        return json.dumps({"level": record.levelname.lower(), "logger": record.name,
                           "message": record.getMessage()})


def _emit_error(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")
    return code


# ---------------------------------------------------------------- config plumbing


def _data_root(args, config: PipelineConfig | None = None) -> Path:
    root = getattr(args, "data", None) or os.environ.get(DATA_ENV)
    if not root and config is not None:
        root = config.run.data_root
    if not root:
        raise UsageError(f"no data root: pass --data or set {DATA_ENV}")
    return Path(root)


def _resolve_config(args) -> PipelineConfig:
    """File (explicit, else <data>/comapipe.toml, else defaults), then CLI flags."""
    if getattr(args, "config", None):
        config = load_config(args.config)
    else:
        root = getattr(args, "data", None) or os.environ.get(DATA_ENV)
        found = Path(root) / CONFIG_FILENAME if root else None
        config = load_config(found) if found and found.is_file() else PipelineConfig()
    run = {}
    for flag, key in (("variant", "variant"), ("seed", "seed"), ("output", "output_dir"),
                      ("jobs", "jobs")):
        value = getattr(args, flag, None)
        if value is not None:
            run[key] = value
    root = getattr(args, "data", None) or os.environ.get(DATA_ENV)
    if root:
        run["data_root"] = str(root)
    config = config.override("run", **run)
    if getattr(args, "folds", None) is not None:
        config = config.override("eval", folds=args.folds)
    if getattr(args, "n_kernels", None) is not None:
        config = config.override("rocket", n_kernels=args.n_kernels)
    if getattr(args, "n_trees", None) is not None:
        config = config.override("learners", n_trees=args.n_trees)
    if config.run.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    return config


def _write_manifest(out: Path, command: str, config: PipelineConfig, extra=None) -> None:
    from .io import write_json

    manifest = {"command": command, "version": __version__, "config": config.to_dict(),
                "seed": config.run.seed}
    manifest.update(extra or {})
    write_json(out / f"manifest_{command}.json", manifest)


def _output_dir(config: PipelineConfig) -> Path:
    out = Path(config.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cohort(args, config, signals=True):
    from .ingest import load_cohort

    return load_cohort(_data_root(args, config), signals=signals)


# ---------------------------------------------------------------- subcommands


def cmd_ingest_check(args) -> int:
    from .ingest import summarize_cohort

    config = _resolve_config(args)
    records = _cohort(args, config, signals=not args.no_signals)
    summary = summarize_cohort(records)
    if args.json:
        print(json.dumps(summary.to_dict(), indent=2, sort_keys=True))
    else:
        print(summary.format_table())
        n_seg = sum(len(r.segments) for r in records)
        print(f"\n{len(records)} patients, {n_seg} EEG recordings")
    return EXIT_OK


def cmd_featurize(args) -> int:
    from . import features, models
    from .io import write_csv

    config = _resolve_config(args)
    records = _cohort(args, config)
    out = _output_dir(config)
    cache = models.FeatureCache(config, jobs=config.run.jobs)
    if args.bundle:
        bundle = models.ModelBundle.load(args.bundle)
        rows = [models.build_features(r, bundle, cache) for r in records]
        names = list(bundle.feature_names)
        path = out / f"features_{bundle.variant.id}.csv"
    else:
        imputation = features.ImputationStats.fit(records)
        names = list(features.CLINICAL_NAMES) + list(features.FLAG_NAMES) \
            + list(features.SUMMARY_NAMES)
        rows = []
        for rec, pf in zip(records, cache.prepare(records)):
            values = np.concatenate([
                features.encode_clinical(rec.clinical, imputation).values,
                pf.flags.as_vector(), pf.summary])
            rows.append(models.PatientFeatureRow(rec.patient_id, values, tuple(names)))
        path = out / "features_base.csv"
    write_csv(path, ["patient_id"] + names,
              [[row.patient_id] + [float(v) for v in row.values] for row in rows])
    _write_manifest(out, "featurize", config, {"output": path.name})
    print(path)
    return EXIT_OK


def cmd_train(args) -> int:
    from . import models

    config = _resolve_config(args)
    records = _cohort(args, config)
    out = _output_dir(config)
    cache = models.FeatureCache(config, jobs=config.run.jobs)
    bundle = models.fit_variant(records, config.run.variant, config, seed=config.run.seed,
                                cache=cache)
    path = out / models.bundle_filename(bundle.variant, bundle.seed)
    bundle.save(path)
    _write_manifest(out, "train", config, {"bundle": path.name,
                                           "n_train": len(bundle.forest.oob_proba)
                                           if bundle.forest.oob_proba is not None else None,
                                           "threshold": bundle.threshold})
    print(path)
    return EXIT_OK


def cv_filename(variant: str, seed: int) -> str:
    return f"cv_{variant}_{seed}.json"


def cmd_cv(args) -> int:
    from . import models
    from .evaluate import cross_validate
    from .io import write_csv, write_json

    config = _resolve_config(args)
    records = _cohort(args, config)
    out = _output_dir(config)
    cache = models.FeatureCache(config, jobs=config.run.jobs)
    result = cross_validate(records, config.run.variant, config.eval.folds, config.run.seed,
                            config, cache)
    path = out / cv_filename(result.variant, result.seed)
    write_json(path, result.to_dict())
    write_csv(out / f"cv_{result.variant}_{result.seed}_predictions.csv",
              ["patient_id", "outcome", "probability_poor", "fold"], result.predictions)
    _write_manifest(out, "cv", config, {"result": path.name})
    print(f"{result.variant}: challenge score {result.cv_score_mean:.3f} "
          f"(SD {result.cv_score_sd:.3f}), AUC {result.cv_auc_mean:.3f} "
          f"(SD {result.cv_auc_sd:.3f})")
    print(path)
    return EXIT_OK


def cmd_predict(args) -> int:
    from . import models
    from .evaluate import predicts_poor
    from .io import write_csv, write_json

    config = _resolve_config(args)
    bundle = models.ModelBundle.load(args.bundle)
    records = _cohort(args, config)
    theta = bundle.threshold if args.threshold is None else args.threshold
    if theta is None:
        theta = 0.5
    cache = models.FeatureCache(bundle.pipeline_config(), jobs=config.run.jobs)
    cache.prepare(records)
    rows, diags = [], {}
    for rec in records:
        prob, diag = models.predict_with_diagnostics(bundle, rec, cache)
        label = "Poor" if predicts_poor(np.array([prob]), theta)[0] else "Good"
        rows.append((rec.patient_id, prob, label))
        diags[rec.patient_id] = diag
    out = _output_dir(config)
    path = out / "predictions.csv"
    write_csv(path, ["patient_id", "probability_poor", "predicted_label_at_threshold"], rows)
    write_json(out / "predictions_diagnostics.json", {"threshold": theta, "patients": diags})
    _write_manifest(out, "predict", config, {"bundle": str(args.bundle), "threshold": theta})
    print(path)
    return EXIT_OK


def cmd_report(args) -> int:
    from . import models, plotting
    from .evaluate import CvResult, challenge_score, pooled_predictions, roc_auc, threshold_sweep
    from .io import write_csv, write_json

    config = _resolve_config(args)
    out = _output_dir(config)
    written = []
    try:
        cv = CvResult.from_dict(json.loads(Path(args.cv).read_text(encoding="utf-8")))
    except OSError as exc:
        raise DataError(f"cannot read CV result {args.cv}: {exc}") from None
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed CV result {args.cv}: {exc!r}") from None
    labels, probs = pooled_predictions(cv)
    roc = roc_auc(labels, probs)
    score = challenge_score(labels, probs)
    write_csv(out / "roc.csv", ["threshold", "fpr", "tpr"],
              [("+inf" if np.isinf(t) else t, f, tp) for t, f, tp in roc.rows()])
    point = None if np.isinf(score.theta) else (score.fpr_at_theta, score.tpr_at_theta)
    written.append(plotting.plot_roc(roc.fpr, roc.tpr, roc.auc, out / "roc.svg", point))
    grid = np.round(np.linspace(0.0, 1.0, 101), 10)
    sweep = threshold_sweep(labels, probs, grid)
    write_csv(out / "sweep.csv", ["theta", "accuracy", "fpr", "fnr"],
              [(r.theta, r.accuracy, r.fpr, r.fnr) for r in sweep])
    written.append(plotting.plot_sweep([r.theta for r in sweep], [r.accuracy for r in sweep],
                                       [r.fpr for r in sweep], [r.fnr for r in sweep],
                                       out / "sweep.svg"))
    if args.bundle:
        bundle = models.ModelBundle.load(args.bundle)
        imp = bundle.forest.feature_importances
        write_csv(out / "importances.csv", ["feature", "importance"],
                  sorted(zip(bundle.feature_names, map(float, imp)), key=lambda r: -r[1]))
        written.append(plotting.plot_importances(bundle.feature_names, imp,
                                                 out / "importances.svg", top=args.top))
    root = getattr(args, "data", None) or os.environ.get(DATA_ENV)
    if root:
        spec = _example_spectrogram(_cohort(args, config), config, args.patient)
        if spec is not None:
            rows = [(float(t), float(f), float(spec.values[j, i]))
                    for i, t in enumerate(spec.frame_times)
                    for j, f in enumerate(spec.band_centers)]
            write_csv(out / "spectrogram.csv", ["time_s", "frequency_hz", "db"], rows)
            written.append(plotting.plot_spectrogram(
                spec.values, spec.band_centers, spec.frame_times, out / "spectrogram.svg",
                title=f"{spec.channel}, hour {spec.hour}"))
    write_json(out / "report.json", {"variant": cv.variant, "seed": cv.seed, "auc": roc.auc,
                                     "score": score.to_dict(),
                                     "cv_score_mean": cv.cv_score_mean,
                                     "cv_score_sd": cv.cv_score_sd,
                                     "cv_auc_mean": cv.cv_auc_mean, "cv_auc_sd": cv.cv_auc_sd})
    _write_manifest(out, "report", config, {"cv": str(args.cv)})
    for p in written:
        print(p)
    return EXIT_OK


def _example_spectrogram(records, config, patient=None):
    from . import models, spectro

    sc = config.spectro
    params = spectro.StftParams(sc.frame, sc.hop, sc.n_mels or None, sc.fmin, sc.fmax,
                                sc.floor_db)
    for rec in records:
        if patient and rec.patient_id != patient:
            continue
        for seg in rec.segments:
            hour = models.preprocess_hour(seg, config)
            if hour is None:
                continue
            c = int(np.flatnonzero(hour.present)[0])
            return spectro.spectrogram(hour.data[c], config.dsp.fs_target, params,
                                       config.run.channels[c], hour.hour)
    if patient:
        raise DataError(f"patient {patient} has no usable EEG")
    return None


def cmd_synth(args) -> int:
    from .synth import cmd_synth as synth

    if args.n < 20:
        raise UsageError(f"synth needs --n >= 20, got {args.n}")
    path = synth(args.out, n_patients=args.n, seed=args.seed, effect_size=args.effect_size,
                 eeg=not args.no_eeg)
    print(path)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _variant(value: str) -> str:
    v = value.upper()
    if v not in VARIANT_IDS:
        raise argparse.ArgumentTypeError(
            f"unknown variant {value!r}; choose from {', '.join(VARIANT_IDS)}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="comapipe",
                     description="Coma outcome prediction from clinical data and EEG.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, data=True, run=True):
        if data:
            p.add_argument("--data", help=f"data root (default: ${DATA_ENV})")
        p.add_argument("--config", help="TOML config file (default: <data>/comapipe.toml)")
        if run:
            p.add_argument("--output", "-o", help="output directory")
            p.add_argument("--jobs", "-j", type=int, help="worker threads")

    p = sub.add_parser("ingest-check", help="validate a data root and print a cohort summary")
    common(p, run=False)
    p.add_argument("--no-signals", action="store_true", help="skip reading EEG files")
    p.add_argument("--json", action="store_true", help="print the summary as JSON")
    p.set_defaults(func=cmd_ingest_check)

    p = sub.add_parser("featurize", help="write per-patient feature CSV")
    common(p)
    p.add_argument("--bundle", help="assemble the full feature row of a fitted bundle")
    p.set_defaults(func=cmd_featurize)

    for name, func, text in (("train", cmd_train, "fit a variant and write a bundle"),
                             ("cv", cmd_cv, "stratified k-fold cross-validation")):
        p = sub.add_parser(name, help=text)
        common(p)
        p.add_argument("--variant", type=_variant, help="M1..M6")
        p.add_argument("--seed", type=int)
        p.add_argument("--n-kernels", type=int, dest="n_kernels", help="ROCKET kernel count")
        p.add_argument("--n-trees", type=int, dest="n_trees", help="forest size")
        if name == "cv":
            p.add_argument("--folds", type=int)
        p.set_defaults(func=func)

    p = sub.add_parser("predict", help="score patients with a fitted bundle")
    common(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--threshold", type=float,
                   help="decision threshold (default: the bundle's out-of-bag threshold)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("report", help="render ROC, sweep, importance and spectrogram figures")
    common(p)
    p.add_argument("--cv", required=True, help="CV result JSON")
    p.add_argument("--bundle", help="bundle for feature importances")
    p.add_argument("--patient", help="patient for the example spectrogram")
    p.add_argument("--top", type=int, default=20, help="importances to show")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--effect-size", type=float, default=1.0, dest="effect_size")
    p.add_argument("--no-eeg", action="store_true", dest="no_eeg")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonLines())
    root = logging.getLogger("comapipe")
    root.handlers[:] = [handler]
    root.propagate = False
    try:
        args = build_parser().parse_args(argv)
        root.setLevel(logging.INFO if args.verbose else logging.WARNING)
        return args.func(args)
    except UsageError as exc:
        return _emit_error("usage", str(exc), EXIT_USAGE)
    except ConfigError as exc:
        return _emit_error("config", str(exc), EXIT_USAGE)
    except DataError as exc:
        return _emit_error(type(exc).__name__, str(exc), EXIT_DATA)
    except KeyboardInterrupt:
        return _emit_error("interrupted", "interrupted", EXIT_INTERNAL)
    except Exception as exc:  # noqa: BLE001
        return _emit_error("internal", f"{type(exc).__name__}: {exc}", EXIT_INTERNAL)


if __name__ == "__main__":
    sys.exit(main())
