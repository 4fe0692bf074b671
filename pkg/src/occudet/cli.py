"""Command-line entry point.

Subcommands:
    prepare    build, qualify, split, and persist dataset cases from CSVs
    train      run one training per (case, seed) and keep best checkpoints
    eval       test-set metrics, aggregate tables, and report figures
    gradcheck  finite-difference verification of the model gradients
    synth      generate a synthetic meter CSV

Every command is deterministic in (manifest, seed, input files); re-running
writes byte-identical outputs. Failures print a JSON error summary to stderr
and exit non-zero.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import data as D
from . import metrics as M
from . import synth as S
from .gradcheck import check_model_gradients, format_report
from .nn import OccupancyNet
from .train import TrainConfig, TrainingDiverged, predict, train_case


class CommandError(Exception):
    """Operator-facing failure with a machine-readable payload."""

    def __init__(self, message: str, details=None):
        super().__init__(message)
        self.details = details or {}


@dataclass
class CaseSpec:
    case_id: str
    csv: Path
    family: str


@dataclass
class RunManifest:
    out_dir: Path
    seeds: list[int]
    train: TrainConfig
    norm_fit: str
    cases: list[CaseSpec]


def load_manifest(path, args) -> RunManifest:
    path = Path(path)
    if not path.is_file():
        raise CommandError(f"manifest not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CommandError(f"manifest {path} is not valid JSON: {exc}")

    seed_base = raw.get("seeds", {}).get("base", 0)
    seed_count = raw.get("seeds", {}).get("count", 10)
    if getattr(args, "seed", None) is not None:
        seed_base = args.seed
    if getattr(args, "seeds", None) is not None:
        seed_count = args.seeds
    # trial i uses seed base+i, so a run is reproducible from the base alone
    seeds = [seed_base + i for i in range(seed_count)]

    train_raw = dict(raw.get("train", {}))
    for flag, key in (("epochs", "max_epochs"), ("lr", "lr"),
                      ("weight_decay", "weight_decay"),
                      ("batch_size", "batch_size"), ("decay", "decay")):
        value = getattr(args, flag, None)
        if value is not None:
            train_raw[key] = value
    train_raw.pop("seed", None)
    try:
        train = TrainConfig(seed=seed_base, **train_raw)
    except (TypeError, ValueError) as exc:
        raise CommandError(f"bad training configuration: {exc}")

    norm_fit = raw.get("norm_fit", "train")
    if getattr(args, "norm_fit", None) is not None:
        norm_fit = args.norm_fit

    out_dir = raw.get("out_dir", "occudet-runs")
    if getattr(args, "out", None) is not None:
        out_dir = args.out

    cases = []
    for i, entry in enumerate(raw.get("cases", [])):
        try:
            case_id, csv = entry["id"], entry["csv"]
        except (TypeError, KeyError):
            raise CommandError(f"cases[{i}] needs 'id' and 'csv' fields")
        family = entry.get("family", "eco")
        if family not in ("eco", "niom"):
            raise CommandError(f"cases[{i}]: unknown family {family!r}")
        cases.append(CaseSpec(case_id, (path.parent / csv).resolve(), family))
    if not cases:
        raise CommandError("manifest lists no cases")
    ids = [c.case_id for c in cases]
    if len(set(ids)) != len(ids):
        raise CommandError("duplicate case ids in manifest")
    return RunManifest(Path(out_dir), seeds, train, norm_fit, cases)


def _prepared_path(manifest: RunManifest, case_id: str, seed: int) -> Path:
    return manifest.out_dir / "prepared" / case_id / f"seed{seed}.npz"


def _checkpoint_path(manifest: RunManifest, case_id: str, seed: int) -> Path:
    return manifest.out_dir / "checkpoints" / case_id / f"seed{seed}.npz"


def _log_path(manifest: RunManifest, case_id: str, seed: int) -> Path:
    return manifest.out_dir / "logs" / case_id / f"seed{seed}.csv"


def cmd_prepare(args) -> int:
    manifest = load_manifest(args.manifest, args)

    # parse every input up front so no archive is written on a broken manifest
    loaded = []
    for spec in manifest.cases:
        if not spec.csv.is_file():
            raise CommandError(f"case {spec.case_id}: CSV not found: {spec.csv}")
        series = D.aggregate_to_minutes(D.load_meter_csv(spec.csv, household=spec.case_id))
        features, labels = D.build_windows(series)
        loaded.append((spec, D.CaseWindows(spec.case_id, spec.family, features, labels)))

    report = {"cases": {}, "seeds": manifest.seeds, "norm_fit": manifest.norm_fit}
    qualified = 0
    for spec, case in loaded:
        occ, vac = case.class_counts
        ok, reason = D.qualification(case)
        entry = {"windows": int(len(case.labels)), "occupied": occ,
                 "vacant": vac, "qualified": ok, "reason": reason,
                 "family": spec.family}
        report["cases"][spec.case_id] = entry
        status = "qualified" if ok else f"REJECTED ({reason})"
        print(f"{spec.case_id}: {len(case.labels)} windows, "
              f"{occ} occupied / {vac} vacant -> {status}")
        if not ok:
            continue
        qualified += 1
        for seed in manifest.seeds:
            out = _prepared_path(manifest, spec.case_id, seed)
            out.parent.mkdir(parents=True, exist_ok=True)
            prepared = D.split_normalize_oversample(case, seed, manifest.norm_fit)
            D.save_dataset_case(out, prepared)

    report_path = manifest.out_dir / "prepared" / "report.json"
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if qualified == 0:
        raise CommandError("no case passed qualification",
                           details={"report": str(report_path)})
    return 0


def cmd_train(args) -> int:
    manifest = load_manifest(args.manifest, args)

    jobs = []
    for spec in manifest.cases:
        for seed in manifest.seeds:
            prepared = _prepared_path(manifest, spec.case_id, seed)
            if not prepared.is_file():
                raise CommandError(
                    f"prepared archive missing for case {spec.case_id} seed {seed}: "
                    f"{prepared} (run `occudet prepare` first)")
            jobs.append((spec, seed, prepared))

    failures = []
    for spec, seed, prepared in jobs:
        case = D.load_dataset_case(prepared)
        config = TrainConfig(lr=manifest.train.lr,
                             weight_decay=manifest.train.weight_decay,
                             max_epochs=manifest.train.max_epochs,
                             warmup_epochs=manifest.train.warmup_epochs,
                             batch_size=manifest.train.batch_size,
                             decay=manifest.train.decay,
                             seed=seed)
        net = OccupancyNet(seed=seed)
        try:
            result = train_case(case, config, net=net)
        except TrainingDiverged as exc:
            failures.append({"case": spec.case_id, "seed": seed,
                             "error": "diverged", "message": str(exc)})
            print(f"{spec.case_id} seed {seed}: DIVERGED ({exc})")
            continue
        net.store.restore(result.best_state)
        ckpt_path = _checkpoint_path(manifest, spec.case_id, seed)
        ckpt_path.parent.mkdir(parents=True, exist_ok=True)
        ckpt.save_checkpoint(
            ckpt_path, net.store,
            optimizer=result.best_opt_state,
            rng_state=np.random.default_rng(seed).bit_generator.state,
            extra={"model_id": net.MODEL_ID, "case_id": spec.case_id,
                   "seed": seed, "best_epoch": result.best_epoch,
                   "best_val_f1": result.best_val_f1})
        log_path = _log_path(manifest, spec.case_id, seed)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_path.write_text("\n".join(result.log_lines()) + "\n")
        print(f"{spec.case_id} seed {seed}: best epoch {result.best_epoch}, "
              f"val F1 {result.best_val_f1:.4f}")

    if failures:
        raise CommandError(f"{len(failures)} training run(s) diverged",
                           details={"failures": failures})
    return 0


def _read_log(path) -> list:
    from .train import EpochRecord
    rows = []
    lines = Path(path).read_text().strip().splitlines()
    for line in lines[1:]:
        e, loss, acc, f1, lr = line.split(",")
        rows.append(EpochRecord(int(e), float(loss), float(acc), float(f1), float(lr)))
    return rows


def cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest, args)
    records = []
    curves = {}
    for spec in manifest.cases:
        for seed in manifest.seeds:
            ckpt_path = _checkpoint_path(manifest, spec.case_id, seed)
            prepared = _prepared_path(manifest, spec.case_id, seed)
            if not ckpt_path.is_file():
                raise CommandError(
                    f"checkpoint missing for case {spec.case_id} seed {seed}: "
                    f"{ckpt_path} (run `occudet train` first)")
            if not prepared.is_file():
                raise CommandError(
                    f"prepared archive missing for case {spec.case_id} seed {seed}")
            case = D.load_dataset_case(prepared)
            net = OccupancyNet(seed=seed)
            stored = ckpt.load_checkpoint(ckpt_path)
            ckpt.load_into(net.store, stored)
            pred = predict(net, case.test_x)
            values = M.compute_metrics(M.confusion(pred, case.test_y))
            records.append(M.MetricsRecord(
                spec.case_id, stored["meta"].get("model_id", net.MODEL_ID), seed,
                values.accuracy, values.precision, values.recall, values.f1))
            log_path = _log_path(manifest, spec.case_id, seed)
            if log_path.is_file():
                curves.setdefault(spec.case_id, []).append((seed, _read_log(log_path)))

    aggregates = M.aggregate(records)
    results_dir = manifest.out_dir / "results"
    figures_dir = results_dir / "figures"
    figures_dir.mkdir(parents=True, exist_ok=True)
    M.write_results_csv(results_dir / "results.csv", records)
    table = M.summary_table(aggregates)
    (results_dir / "summary.txt").write_text(table)

    from . import report
    report.save_summary_figure(aggregates, figures_dir / "summary.png")
    for case_id, runs in sorted(curves.items()):
        report.save_training_curves_figure(
            case_id, sorted(runs), figures_dir / f"curves_{case_id}.png")

    print(table, end="")
    return 0


def cmd_gradcheck(args) -> int:
    reports = check_model_gradients(seed=args.seed if args.seed is not None else 0)
    print(format_report(reports))
    if all(r.passed for r in reports):
        return 0
    raise CommandError("gradient check failed",
                       details={"failed": [r.name for r in reports if not r.passed]})


def cmd_synth(args) -> int:
    profile = S.PROFILES.get(args.profile)
    if profile is None:
        raise CommandError(f"unknown profile {args.profile!r}; "
                           f"choose from {sorted(S.PROFILES)}")
    if args.minutes is not None:
        if args.minutes < D.WINDOW_MINUTES:
            raise CommandError("--minutes must cover at least one window")
        profile = S.with_minutes(profile, args.minutes)
    series = S.synth_case(profile, args.seed if args.seed is not None else 0)
    out = Path(args.out)
    if out.parent and not out.parent.is_dir():
        raise CommandError(f"output directory does not exist: {out.parent}")
    S.write_meter_csv(series, out)
    occ = int(series.occupied.sum())
    print(f"wrote {len(series)} minutes ({occ} occupied) to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="occudet",
        description="Occupancy detection from smart-meter load curves.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_manifest_flags(p):
        p.add_argument("--manifest", required=True, help="run manifest JSON")
        p.add_argument("--out", help="output directory (overrides manifest)")
        p.add_argument("--seed", type=int, help="base trial seed")
        p.add_argument("--seeds", type=int, metavar="N", help="number of trials")

    p = sub.add_parser("prepare", help="build and persist dataset cases")
    add_manifest_flags(p)
    p.add_argument("--norm-fit", choices=["train", "all"], dest="norm_fit",
                   help="population the min-max statistics are fitted on")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train one model per (case, seed)")
    add_manifest_flags(p)
    p.add_argument("--epochs", type=int, dest="epochs")
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--decay", choices=["coupled", "decoupled"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="test-set metrics, tables, and figures")
    add_manifest_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="generate a synthetic meter CSV")
    p.add_argument("--out", required=True, help="destination CSV path")
    p.add_argument("--profile", default="separable")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--minutes", type=int)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CommandError as exc:
        payload = {"error": "command_failed", "message": str(exc), **exc.details}
        print(json.dumps(payload, sort_keys=True), file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        payload = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(payload, sort_keys=True), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
