"""Command-line entry point: prepare, train, detect, evaluate, search, pareto, eacs."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import nas
from .config import SCHEMA, RunConfig, parse_value
from .dataset import add_rolling_features, load_csv, normalize, save_csv, synth_generate
from .dataset import windows as window_array
from .errors import SearchError, TsadError, ValidationError
from .genome import Genome
from .model import AnomalyModel
from .pipeline import detect
from .scoring import eacs_cohort, evaluate, read_scores_csv, write_json
from .training import fit

SCHEMA_VERSION = 1
EXIT_OK, EXIT_INPUT, EXIT_OVERWRITE, EXIT_EMPTY = 0, 2, 3, 4


class OverwriteRefused(TsadError):
    pass


# ----------------------------------------------------------------- helpers


def _effective_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    for item in getattr(args, "set", None) or []:
        key, sep, raw = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or section not in SCHEMA or name not in SCHEMA[section]:
            raise ValidationError(f"bad --set {item!r}: expected section.key=value for a known key")
        cfg.set(section, name, parse_value(SCHEMA[section][name][0], raw, key))
    for flag, key in (("seed", "seed"), ("out", "out"), ("jobs", "jobs")):
        v = getattr(args, flag, None)
        if v is not None:
            cfg.set("run", key, v)
    return cfg


def _out_dir(cfg: RunConfig, sub: str, targets: list[str], force: bool) -> Path:
    d = Path(cfg["run"]["out"]) / sub
    existing = [t for t in targets if (d / t).exists()]
    if existing and not force:
        raise OverwriteRefused(
            f"{d} already holds {', '.join(existing)}; pass --force to overwrite")
    d.mkdir(parents=True, exist_ok=True)
    cfg.write(d / "config.ini")
    return d


def _bundle_dir(args, cfg: RunConfig) -> Path:
    return Path(args.data) if getattr(args, "data", None) else Path(cfg["run"]["out"]) / "data"


def _load_bundle(path: Path):
    meta_path = path / "metadata.json"
    if not meta_path.exists():
        raise ValidationError(f"no prepared bundle at {path} (missing metadata.json)")
    return load_csv(path / "train.csv", path / "test.csv", path / "labels.csv")


def _dump(path, obj) -> None:
    write_json(path, {"schema_version": SCHEMA_VERSION, **obj})


# ---------------------------------------------------------------- commands


def cmd_prepare(args, cfg: RunConfig) -> int:
    d = cfg["data"]
    if d["train"] or d["test"] or d["labels"]:
        missing = [k for k in ("train", "test", "labels") if not d[k]]
        if missing:
            raise ValidationError(f"data section needs train, test and labels; missing {missing}")
        raw = load_csv(d["train"], d["test"], d["labels"])
        source = {"kind": "csv", "train": d["train"], "test": d["test"], "labels": d["labels"]}
        generator = None
    else:
        spec = cfg.synth_spec()
        raw = synth_generate(spec)
        source = {"kind": "synthetic"}
        generator = {"requested_rate": spec.rate, "labeled_fraction": raw.anomaly_fraction,
                     "anomaly_types": list(spec.anomaly_types), "seed": spec.seed}
    out = _out_dir(cfg, "data", ["metadata.json", "train.csv", "test.csv", "labels.csv"],
                   args.force)
    ds = normalize(raw, d["eps"])
    if d["rolling_window"]:
        ds = add_rolling_features(ds, d["rolling_window"])
    save_csv(ds, out)
    meta = {"source": source, **ds.statistics(),
            "scale_min": ds.scale_min.tolist(), "scale_max": ds.scale_max.tolist(),
            "eps": d["eps"], "rolling_window": d["rolling_window"]}
    if generator is not None:
        meta["generator"] = generator
    _dump(out / "metadata.json", meta)
    print(f"prepared {out}: T={ds.train.shape[0]} T'={ds.test.shape[0]} m={ds.n_features} "
          f"anomaly fraction {ds.anomaly_fraction:.4f}")
    return EXIT_OK


def _read_genome(path) -> Genome:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"genome file not found: {p}")
    return Genome.from_json(p.read_text(encoding="utf-8"))


def cmd_train(args, cfg: RunConfig) -> int:
    ds = _load_bundle(_bundle_dir(args, cfg))
    genome = _read_genome(args.genome)
    genome.validate(ds.n_features)
    if args.max_seconds is not None:
        cfg.set("training", "max_train_seconds", args.max_seconds)
    tcfg = cfg.train_config()
    out = _out_dir(cfg, "train", ["model.ckpt", "train_report.json", "loss_curve.csv"],
                   args.force)
    model = AnomalyModel(genome.bind(ds.n_features), ds.n_features, seed=cfg["run"]["seed"])
    report = fit(model, window_array(ds.train, genome.window_size), tcfg)
    model.save(out / "model.ckpt")
    _dump(out / "train_report.json", {**report.to_dict(), "parameter_count": model.parameter_count})
    with open(out / "loss_curve.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss"])
        for i, v in enumerate(report.loss_curve):
            val = report.val_curve[i] if i < len(report.val_curve) else ""
            w.writerow([i, repr(v), repr(val) if val != "" else ""])
    print(f"trained {model.parameter_count} parameters for {report.epochs_run} epochs, "
          f"final loss {report.final_train_loss:.6g}"
          + (f" (stopped early: {report.stop_reason})" if report.stopped_early else ""))
    return EXIT_OK


def cmd_detect(args, cfg: RunConfig) -> int:
    ds = _load_bundle(_bundle_dir(args, cfg))
    model = AnomalyModel.load(args.checkpoint)
    if model.m != ds.n_features:
        raise ValidationError(
            f"checkpoint expects {model.m} features but the bundle has {ds.n_features}")
    if args.mode:
        cfg.set("scoring", "mode", args.mode)
    if args.per_dimension:
        cfg.set("scoring", "per_dimension", True)
    scfg = cfg.scoring_config()
    out = _out_dir(cfg, "detect", ["scores.csv", "summary.json"], args.force)
    series_in = ds.test if args.split == "test" else ds.train
    labels = ds.test_labels if args.split == "test" else None
    series = detect(model, ds.train, series_in, scfg, cfg.train_config())
    series.write_csv(out / "scores.csv", labels)
    if series.per_dimension is not None:
        series.write_per_dimension_csv(out / "scores_per_dimension.csv")
    _dump(out / "summary.json", {**series.summary(), "split": args.split,
                                 "rate": float(series.decisions.mean())})
    print(f"{args.split}: {int(series.decisions.sum())} of {len(series.decisions)} "
          f"timestamps flagged ({scfg.mode})")
    return EXIT_OK


def _read_labels(path) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"labels file not found: {p}")
    rows = [r for r in csv.reader(p.open(encoding="utf-8")) if r]
    if rows and not rows[0][0].strip().lstrip("-").replace(".", "").isdigit():
        rows = rows[1:]
    try:
        return np.array([max(int(float(c)) for c in r) for r in rows], dtype=np.int64)
    except ValueError:
        raise ValidationError(f"{p}: labels must be integers") from None


def cmd_evaluate(args, cfg: RunConfig) -> int:
    cols = read_scores_csv(args.scores)
    if "decision" not in cols:
        raise ValidationError(f"{args.scores}: no decision column")
    decisions = cols["decision"].astype(np.int64)
    labels = _read_labels(args.labels)
    if len(labels) != len(decisions):
        raise ValidationError(
            f"{len(decisions)} decisions in {args.scores} but {len(labels)} labels in {args.labels}")
    out = _out_dir(cfg, "evaluate", ["eval.json"], args.force)
    plain = evaluate(decisions, labels, point_adjust_on=False)
    adjusted = evaluate(decisions, labels, point_adjust_on=True)
    _dump(out / "eval.json", {"plain": plain.to_dict(), "point_adjusted": adjusted.to_dict()})
    print(f"F1 {plain.f1:.4f} (point-adjusted {adjusted.f1:.4f})")
    return EXIT_OK


def _write_front_genomes(front, out: Path) -> dict:
    chosen = {}
    for policy in nas.POLICIES:
        rec = nas.select_from_front(front, policy)
        (out / f"{policy}.json").write_text(rec.genome.to_json() + "\n", encoding="utf-8")
        chosen[policy] = {"trial_id": rec.trial_id, "f1": rec.f1,
                          "parameter_count": rec.parameter_count}
    return chosen


def cmd_search(args, cfg: RunConfig) -> int:
    ds = _load_bundle(_bundle_dir(args, cfg))
    budget = cfg.search_budget()
    jobs = cfg["run"]["jobs"] or os.cpu_count() or 1
    out = _out_dir(cfg, "search", ["ledger.jsonl", "pareto.csv"], args.force)

    def progress(gen, batch):
        done = [r for r in batch if r.completed]
        best = max((r.f1 for r in done), default=float("nan"))
        print(f"generation {gen}: {len(done)}/{len(batch)} completed, best F1 {best:.4f}",
              flush=True)

    try:
        result = nas.run_search(ds, budget, seed=cfg["run"]["seed"], jobs=jobs,
                                tcfg=cfg.train_config(), scfg=cfg.scoring_config(),
                                eval_split=cfg["search"]["eval_split"], on_generation=progress)
    except SearchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    nas.write_ledger(result.records, out / "ledger.jsonl", out / "timings.jsonl")
    result.pareto.write_csv(out / "pareto.csv")
    chosen = _write_front_genomes(result.front, out)
    _dump(out / "selection.json", {"front_size": len(result.front), "selected": chosen})
    print(f"{len(result.records)} trials, front of {len(result.front)}; "
          f"best F1 {chosen['best_f1']['f1']:.4f}")
    return EXIT_OK


def cmd_pareto(args, cfg: RunConfig) -> int:
    ledger = Path(args.ledger)
    if not ledger.exists():
        raise ValidationError(f"ledger not found: {ledger}")
    timings = Path(args.timings) if args.timings else ledger.with_name("timings.jsonl")
    records = nas.read_ledger(ledger, timings)
    pf = nas.ParetoFront.from_records(records)
    if not pf.records:
        print("error: the ledger holds no completed trial", file=sys.stderr)
        return EXIT_EMPTY
    out = _out_dir(cfg, "pareto", ["pareto.csv", "front.json"], args.force)
    pf.write_csv(out / "pareto.csv")
    chosen = _write_front_genomes(pf.front, out)
    _dump(out / "front.json", {
        "front": [{"trial_id": r.trial_id, "f1": r.f1, "parameter_count": r.parameter_count}
                  for r in pf.front],
        "selected": chosen,
    })
    for r in sorted(pf.front, key=lambda r: -r.f1):
        print(f"trial {r.trial_id}: F1 {r.f1:.4f}, {r.parameter_count} parameters")
    return EXIT_OK


def _eacs_rows(path: Path) -> list[dict]:
    if not path.exists():
        raise ValidationError(f"input not found: {path}")
    if path.suffix == ".jsonl":
        recs = nas.read_ledger(path, path.with_name("timings.jsonl"))
        return [{"id": r.trial_id, "f1": r.f1, "training_time": r.training_time_seconds,
                 "parameter_count": r.parameter_count} for r in recs if r.completed]
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        need = {"f1", "training_time", "parameter_count"}
        if not reader.fieldnames or not need <= set(reader.fieldnames):
            raise ValidationError(f"{path}: needs columns {sorted(need)}")
        rows = []
        for i, row in enumerate(reader, start=2):
            try:
                rows.append({"id": row.get("id") or row.get("trial_id") or str(i - 2),
                             **{k: float(row[k]) for k in need}})
            except ValueError:
                raise ValidationError(f"{path}:{i}: non-numeric value") from None
        return rows


def cmd_eacs(args, cfg: RunConfig) -> int:
    rows = _eacs_rows(Path(args.input))
    if not rows:
        raise ValidationError(f"{args.input}: no rows to score")
    if any(not np.isfinite(r["training_time"]) for r in rows):
        raise ValidationError(f"{args.input}: missing training times (no timings.jsonl?)")
    scores = eacs_cohort([(r["f1"], r["training_time"], r["parameter_count"]) for r in rows])
    out = _out_dir(cfg, "eacs", ["eacs.csv"], args.force)
    order = sorted(range(len(rows)), key=lambda i: -scores[i])
    with open(out / "eacs.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["schema_version", "id", "f1", "training_time", "parameter_count", "eacs"])
        for i in order:
            r = rows[i]
            w.writerow([SCHEMA_VERSION, r["id"], repr(r["f1"]), repr(r["training_time"]),
                        int(r["parameter_count"]), repr(scores[i])])
    for i in order[:10]:
        print(f"{rows[i]['id']}: EACS {scores[i]:.4f}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def _globals(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="INI run configuration")
    p.add_argument("--seed", type=int, default=d, help="master seed (run.seed)")
    p.add_argument("--out", default=d, help="output directory (run.out)")
    p.add_argument("--jobs", type=int, default=d, help="parallel trials for search")
    p.add_argument("--force", action="store_true", default=argparse.SUPPRESS if suppress else False,
                   help="overwrite existing outputs")
    p.add_argument("--set", action="append", default=d, metavar="SECTION.KEY=VALUE",
                   help="override one config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsadnas", description=__doc__)
    _globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        _globals(p, suppress=True)
        p.set_defaults(func=fn)
        return p

    add("prepare", cmd_prepare, "normalize CSV input or generate a synthetic bundle")
    p = add("train", cmd_train, "train one genome on the prepared bundle")
    p.add_argument("--genome", required=True, help="genome JSON file")
    p.add_argument("--data", help="bundle directory (default OUT/data)")
    p.add_argument("--max-seconds", type=float, help="wall-clock training budget")
    p = add("detect", cmd_detect, "score and threshold a split with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--split", choices=("test", "train"), default="test")
    p.add_argument("--mode", choices=("pot", "mpot", "mat"))
    p.add_argument("--per-dimension", action="store_true")
    p = add("evaluate", cmd_evaluate, "precision/recall/F1 of a score file against labels")
    p.add_argument("--scores", required=True)
    p.add_argument("--labels", required=True)
    p = add("search", cmd_search, "NSGA-II architecture search")
    p.add_argument("--data")
    p = add("pareto", cmd_pareto, "recompute the front and selections from a ledger")
    p.add_argument("--ledger", required=True)
    p.add_argument("--timings")
    p = add("eacs", cmd_eacs, "EACS per row of a ledger or CSV table")
    p.add_argument("--input", required=True, help="ledger.jsonl or CSV with f1, training_time, "
                                                  "parameter_count")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = _effective_config(args)
        return args.func(args, cfg)
    except OverwriteRefused as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OVERWRITE
    except SearchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except ValidationError as exc:
        print("error: invalid input", file=sys.stderr)
        for p in exc.problems:
            print(f"  {p}", file=sys.stderr)
        return EXIT_INPUT
    except (ValueError, TsadError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
