"""Command-line entry point: ``fazekas-mil <command> [options]``.

Exit codes: 0 ok, 2 usage, 3 input/output or data, 4 configuration, 5 numerical failure.
Failures print one line ``error: <Class>: <message>`` on stderr.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, evaluation, gradcheck, imaging, persistence, transforms
from .config import Config, ConfigError, load_config, parse_overrides

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3, 4, 5

log = logging.getLogger("fazekas_mil")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- shared helpers --------------------------------------------------------------


def _config(args) -> Config:
    cfg = load_config(args.config) if getattr(args, "config", None) else Config()
    pairs = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v
    cfg = cfg.replace(**parse_overrides(pairs))
    flags = {
        "seed": getattr(args, "seed", None),
        "biomarker": getattr(args, "biomarker", None),
        "folds": getattr(args, "folds", None),
        "runs": getattr(args, "runs", None),
        "pretrain_steps": getattr(args, "steps", None),
    }
    changes = {k: v for k, v in flags.items() if v is not None}
    if getattr(args, "no_preprocess", False):
        changes["preprocess"] = False
    if getattr(args, "no_ssl", False):
        changes["ssl"] = False
    return cfg.replace(**changes)


def _echo_config(out_dir: Path, cfg: Config) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(cfg.to_text(), encoding="utf-8")


def _load_bags(manifest, cfg: Config) -> dict[str, data.Bag]:
    subjects = data.read_manifest(manifest)
    return {s.subject_id: data.assemble_bag(s, cfg.biomarker, cfg.preprocess) for s in subjects}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config value (repeatable)")
    p.add_argument("--seed", type=int)


# -- commands ---------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    subjects = data.synth_dataset(args.subjects, out, cfg.seed, args.side)
    _echo_config(out, cfg)
    print(f"wrote {len(subjects)} subjects to {out / 'manifest.csv'}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    dump = Path(args.dump_steps) if args.dump_steps else None
    if dump:
        dump.mkdir(parents=True, exist_ok=True)
    rows = []
    for subject in data.read_manifest(args.manifest):
        paths = []
        for src, img in zip(subject.slice_paths, data.load_slices(subject)):
            steps = imaging.preprocess_steps(img, 3, ignore_removed=not args.full_image)
            stem = Path(src).stem
            rel = f"images/{stem}.png"
            imaging.write_image(out / rel, steps[-1])
            paths.append(rel)
            if dump:
                for k, step in enumerate(steps, start=1):
                    imaging.write_image(dump / f"{stem}_step{k}.png", step)
        rows.append((subject.subject_id, paths, subject.pvwm_grade, subject.dwm_grade))
    data.write_manifest(out / "manifest.csv", rows)
    _echo_config(out, cfg)
    print(f"pre-processed {len(rows)} subjects into {out}")
    return EXIT_OK


def cmd_transform_demo(args) -> int:
    cfg = _config(args)
    img = imaging.read_image(args.image)
    out = Path(args.out)
    pre = cfg.pretext
    rng = np.random.default_rng(cfg.seed)
    variants = {
        "nonlinear": transforms.nonlinear_intensity(img, rng),
        "shuffle": transforms.local_shuffle(img, rng, pre.shuffle_window),
        "inpaint": transforms.in_paint(img, rng, count=pre.rect_count, side_fraction=pre.rect_side_fraction),
        "outpaint": transforms.out_paint(img, rng, count=pre.rect_count, side_fraction=pre.rect_side_fraction),
    }
    corrupted, target = transforms.compose(img, pre, rng)
    variants["composed_input"] = corrupted
    variants["composed_target"] = target
    _echo_config(out, cfg)
    for name, im in variants.items():
        imaging.write_image(out / f"{name}.png", im)
    print(f"wrote {len(variants)} images to {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    subjects = data.read_manifest(args.manifest)
    if args.split:
        test = evaluation.read_plan(args.split).holdout
        subjects = [s for s in subjects if s.subject_id not in test]
    slices = [img for s in subjects for img in data.load_slices(s)]
    res = evaluation.pretrain(slices, cfg, cfg.seed, [s.subject_id for s in subjects])
    out = Path(args.out)
    _echo_config(out, cfg)
    persistence.save_bundle(out / "pretrained.fzkm", res.bundle)
    (out / "losses.txt").write_text("".join(f"{v:.8f}\n" for v in res.losses), encoding="utf-8")
    print(f"probe reconstruction loss {res.eval_before:.6f} -> {res.eval_after:.6f} after {len(res.losses)} steps")
    return EXIT_OK


def _write_predictions(path: Path, plans, summary: dict[str, evaluation.RunSummary]) -> None:
    with path.open("w", newline="", encoding="utf-8") as handle:
        w = csv.writer(handle, lineterminator="\n")
        w.writerow(("variant", "run", "fold", "subject_id", "truth", "predicted"))
        for name, runs in summary.items():
            for r, cv in enumerate(runs.runs):
                plan = plans[r]
                for f in cv.folds:
                    for sid, t, p in zip(plan.validation(f.fold), f.truth, f.predicted):
                        w.writerow((name, r, f.fold, sid, t, p))


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    _echo_config(out, cfg)
    bags = _load_bags(args.manifest, cfg.replace(preprocess=True))
    pretrained = persistence.load_bundle(args.pretrained) if args.pretrained else None
    if args.ablations:
        variants = list(evaluation.ABLATIONS)
    else:
        variants = [evaluation.Variant("configured", cfg.preprocess, cfg.ssl)]
    if pretrained is not None:
        log.warning("using one external encoder for every fold; its training subjects cannot be audited")
        plans, summary = _train_with_external(bags, cfg, variants, pretrained)
    else:
        plans, summary = evaluation.repeated_cv(bags, cfg, cfg.seed, variants, args.parallel_folds)
    evaluation.write_plan(out / "split.txt", plans[0])
    _write_predictions(out / "predictions.csv", plans, summary)

    problems = []
    for r, plan in enumerate(plans):
        problems += evaluation.leakage({k: v.runs[r] for k, v in summary.items()}, plan)
    audit = [f"{name} run {r} fold {f.fold}: train={len(f.train_ids)} validation={len(f.validation_ids)}"
             for name, s in summary.items() for r, cv in enumerate(s.runs) for f in cv.folds]
    (out / "audit.txt").write_text("\n".join(audit + [f"LEAK {p}" for p in problems]) + "\n", encoding="utf-8")

    lines = []
    for name, s in summary.items():
        key = name.replace(" ", "_").replace("+", "_")
        lines += [f"{key}.macro_f1_mean={s.mean:.6f}", f"{key}.macro_f1_std={s.std:.6f}"]
        lines += [f"{key}.run{r}.macro_f1={v:.6f}" for r, v in enumerate(s.macro_f1)]
        print(f"== {name}: macro-F1 {s.mean:.4f} +- {s.std:.4f} over {len(s.runs)} run(s)")
        print(s.runs[0].pooled.table())
    first = next(iter(summary.values())).runs[0].pooled
    (out / "report.txt").write_text("\n".join(first.lines() + lines) + "\n", encoding="utf-8")

    if args.save_model:
        bundle, test_report = evaluation.fit_final(bags, plans[0], cfg, cfg.seed, pretrained)
        persistence.save_bundle(out / "model.fzkm", bundle)
        if test_report is not None:
            (out / "test_report.txt").write_text("\n".join(test_report.lines()) + "\n", encoding="utf-8")
            print("== held-out test subjects")
            print(test_report.table())
    if problems:
        for p in problems:
            print(f"leak: {p}", file=sys.stderr)
        raise data.DataError(f"{len(problems)} subject(s) crossed a split boundary")
    return EXIT_OK


def _train_with_external(bags, cfg, variants, pretrained):
    ids = list(bags)
    grades = [bags[s].grade for s in ids]
    plans, summary = [], {}
    for r in range(cfg.runs):
        plan = evaluation.split(ids, grades, cfg.seed, cfg.folds, cfg.holdout_fraction, fold_seed=cfg.seed + r)
        plans.append(plan)
        for v in variants:
            use = bags if v.preprocess else {k: evaluation._strip(b) for k, b in bags.items()}
            folds = [evaluation.train_fold(use, plan, f, cfg, cfg.seed + r + 1000 * f,
                                           pretrained if v.ssl else None) for f in range(plan.n_folds)]
            truth = [t for f in folds for t in f.truth]
            pred = [p for f in folds for p in f.predicted]
            cv = evaluation.CVResult(v.name, folds, evaluation.metrics(evaluation.confusion_matrix(truth, pred)))
            summary.setdefault(v.name, evaluation.RunSummary(v.name, [])).runs.append(cv)
    return plans, summary


def _selected(bags, split_file):
    if not split_file:
        return sorted(bags)
    test = evaluation.read_plan(split_file).holdout
    return sorted(s for s in bags if s in test)


def cmd_eval(args) -> int:
    if args.predictions:
        truth, pred = [], []
        with open(args.predictions, newline="", encoding="utf-8") as handle:
            for row in csv.DictReader(handle):
                if args.variant and row.get("variant") != args.variant:
                    continue
                truth.append(int(row["truth"]))
                pred.append(int(row["predicted"]))
        if not truth:
            raise data.DataError(f"{args.predictions}: no prediction rows")
        report = evaluation.metrics(evaluation.confusion_matrix(truth, pred))
    else:
        if not (args.model and args.manifest):
            raise UsageError("eval needs --predictions, or --model together with --manifest")
        cfg = _config(args)
        bundle = persistence.load_bundle(args.model)
        bags = _load_bags(args.manifest, cfg)
        ids = _selected(bags, args.split)
        if not ids:
            raise data.DataError("no subjects to evaluate")
        predicted, _ = evaluation.predict(bundle, [bags[s] for s in ids])
        report = evaluation.metrics(evaluation.confusion_matrix([bags[s].grade for s in ids], predicted))
    print(report.table())
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text("\n".join(report.lines()) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_attend(args) -> int:
    cfg = _config(args)
    bundle = persistence.load_bundle(args.model)
    bags = _load_bags(args.manifest, cfg)
    rows = ["subject_id\tinstance\tkind\tslice\tweights"]
    for sid in _selected(bags, args.split):
        rows += evaluation.attention_report(bundle, bags[sid]).lines()
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text("\n".join(rows) + "\n", encoding="utf-8")
    print(f"wrote attention weights for {len(rows) - 1} instances to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = gradcheck.run_suite(range(args.seeds), composite=not args.skip_composite)
    print("\n".join(report.lines()))
    if not report.passed:
        raise evaluation.NumericalError("finite-difference check failed")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fazekas-mil", description="Attention MIL grading of white-matter lesions.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic phantom cohort")
    p.add_argument("--subjects", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--side", type=int, default=64)
    _add_config_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="three-step threshold pre-processing of every slice")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-steps", metavar="DIR")
    p.add_argument("--full-image", action="store_true",
                   help="re-threshold over the whole image, zeros included, in steps 2 and 3")
    _add_config_flags(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("transform-demo", help="write each pretext corruption of one image")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_transform_demo)

    p = sub.add_parser("pretrain", help="reconstruction pretraining of the encoder")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--split", help="split file; its test subjects are left out")
    _add_config_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="cross-validated MIL fine-tuning")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--biomarker", choices=data.BIOMARKERS)
    p.add_argument("--pretrained", metavar="FILE")
    p.add_argument("--no-preprocess", action="store_true")
    p.add_argument("--no-ssl", action="store_true")
    p.add_argument("--folds", type=int)
    p.add_argument("--runs", type=int)
    p.add_argument("--parallel-folds", type=int, default=1, metavar="N")
    p.add_argument("--ablations", action="store_true", help="run all four pre-processing/pretraining variants")
    p.add_argument("--save-model", action="store_true", help="also fit on all non-test subjects and score the test set")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-grade report from a model or a predictions file")
    p.add_argument("--predictions")
    p.add_argument("--variant")
    p.add_argument("--model")
    p.add_argument("--manifest")
    p.add_argument("--split", help="split file; only its test subjects are scored")
    p.add_argument("--biomarker", choices=data.BIOMARKERS)
    p.add_argument("--no-preprocess", action="store_true")
    p.add_argument("--report", metavar="FILE")
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attend", help="per-instance attention weights")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split")
    p.add_argument("--biomarker", choices=data.BIOMARKERS)
    p.add_argument("--no-preprocess", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_attend)

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--skip-composite", action="store_true")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _fail(code: int, exc: BaseException) -> int:
    msg = str(exc).splitlines()[0] if str(exc) else ""
    print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
    return code


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except evaluation.NumericalError as exc:
        return _fail(EXIT_NUMERICAL, exc)
    except (OSError, data.DataError, imaging.ImageError, persistence.FormatError) as exc:
        return _fail(EXIT_IO, exc)
    except ValueError as exc:
        return _fail(EXIT_CONFIG, exc)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
