"""Command-line entry point: ``neurospex {generate,train,evaluate,ablate,report}``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import shutil
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .model import ModelConfig
from .objectives import MetricsReport
from .synthdata import CorpusManifest, build_corpus, trial_plan
from .trainer import TrainConfig, evaluate, train

log = logging.getLogger("neurospex")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

EEG_VARIANTS = ("direct", "sa", "conv", "adc")
FUSION_VARIANTS = ("direct", "ca")
ADC_COUNTS = (1, 2, 4, 6, 8)

# (eeg_variant, fusion_variant, adc_blocks) in the published row order
TABLE1_GRID = [("direct", "direct", 1), ("adc", "direct", 1), ("sa", "ca", 1), ("conv", "ca", 1), ("adc", "ca", 1)]
TABLE2_GRID = [("adc", "ca", n) for n in ADC_COUNTS]
PRESETS = {"table1": (TABLE1_GRID, ["val"]), "table2": (TABLE2_GRID, ["test"])}

REPORT_COLUMNS = [("si_sdr", "SI-SDR"), ("si_sdri", "SI-SDRi"), ("stoi", "STOI")]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read_json(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{p} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"{p}: expected a JSON object")
    return doc


# -- generate ---------------------------------------------------------------------

def manifest_from_doc(doc: dict, toy: bool = False, seed: int | None = None) -> CorpusManifest:
    """A manifest document may carry ``"preset": "full"`` plus overrides."""
    doc = dict(doc)
    preset = doc.pop("preset", None)
    if seed is not None:
        doc["global_seed"] = seed
    try:
        if preset == "full":
            return CorpusManifest.full_scale(**doc)
        if preset not in (None, "toy"):
            raise UsageError(f"unknown manifest preset {preset!r}")
        return CorpusManifest.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid manifest: {exc}") from exc


def cmd_generate(args) -> int:
    doc = _read_json(args.config) if args.config else {}
    manifest = manifest_from_doc(doc, seed=args.seed)
    out = Path(args.out)
    if (out / "manifest.json").exists() and not args.force:
        raise UsageError(f"{out} already holds a corpus; pass --force to overwrite")
    if args.dry_run:
        out.mkdir(parents=True, exist_ok=True)
        plans = [trial_plan(manifest, s, t) for s, t in manifest.trials()]
        record = dict(asdict(manifest), trials=plans, total_hours=manifest.total_hours, dry_run=True)
        (out / "plan.json").write_text(json.dumps(record, indent=2, sort_keys=True))
        print(f"planned {manifest.n_trials} trials ({manifest.total_hours:.1f} h) in {out / 'plan.json'}")
        return EXIT_OK
    if args.force and out.exists():
        for child in out.glob("subject_*"):
            shutil.rmtree(child)
    build_corpus(manifest, out, workers=args.workers)
    print(f"wrote {manifest.n_trials} trials ({manifest.total_hours:.2f} h) to {out}")
    return EXIT_OK


# -- train / evaluate -----------------------------------------------------------

@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    corpus: str | None = None
    out: str | None = None

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": asdict(self.train), "corpus": self.corpus, "out": self.out}


def run_config_from_doc(doc: dict, toy: bool = False, seed: int | None = None) -> RunConfig:
    """``{"toy": bool, "model": {...}, "train": {...}, "corpus": path, "out": path}``."""
    unknown = set(doc) - {"toy", "model", "train", "corpus", "out"}
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    toy = toy or bool(doc.get("toy", False))
    model_doc = dict(doc.get("model", {}))
    train_doc = dict(doc.get("train", {}))
    if seed is not None:
        train_doc["seed"] = seed
    try:
        if toy:
            model = ModelConfig.toy(**model_doc)
            tcfg = TrainConfig.toy(**train_doc)
        else:
            model = ModelConfig.from_dict(model_doc)
            tcfg = TrainConfig.from_dict(train_doc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    return RunConfig(model, tcfg, doc.get("corpus"), doc.get("out"))


def run_training(cfg: RunConfig, out_dir, splits=("val",), with_stoi: bool = False, resume: bool = False) -> dict:
    """Train, then evaluate the best checkpoint on ``splits``; returns ``{split: MetricsReport}``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    result = train(cfg.model, cfg.train, cfg.corpus, out_dir, resume=resume)
    reports = {}
    for split in splits:
        reports[split] = evaluate(
            result.checkpoint, cfg.corpus, split, out_dir=out_dir, hop_s=cfg.train.hop_s,
            with_stoi=with_stoi, max_segments=cfg.train.max_val_segments if split == "val" else None,
        )
    return {"result": result, "reports": reports}


def cmd_train(args) -> int:
    doc = _read_json(args.config) if args.config else {}
    cfg = run_config_from_doc(doc, toy=args.toy, seed=args.seed)
    cfg.corpus = args.corpus or cfg.corpus
    out = args.out or cfg.out
    if cfg.corpus is None or out is None:
        raise UsageError("train needs a corpus and an output directory (--corpus/--out or config keys)")
    cfg.out = str(out)
    if (Path(out) / "log.csv").exists() and not (args.force or args.resume):
        raise UsageError(f"{out} already holds a training run; pass --force or --resume")
    done = run_training(cfg, out, splits=(), resume=args.resume)
    res = done["result"]
    print(f"trained {res.state.step} steps over {res.state.epoch} epochs ({res.stopped}); best val loss {res.state.best_val_loss:.4f}")
    return EXIT_OK if res.stopped != "diverged" else EXIT_RUNTIME


def cmd_evaluate(args) -> int:
    ckpt = Path(args.checkpoint)
    if ckpt.is_dir():
        ckpt = ckpt / "best"
    if not ckpt.with_suffix(".json").exists():
        raise UsageError(f"checkpoint not found: {ckpt}")
    if args.corpus is None:
        raise UsageError("evaluate needs --corpus")
    out = Path(args.out) if args.out else ckpt.parent
    report = evaluate(ckpt, args.corpus, args.split, out_dir=out, with_stoi=args.stoi, max_segments=args.max_segments)
    overall = report.summary()["overall"]
    parts = [f"{name} {overall[name]['mean']:.3f}" for name in report.metric_names]
    print(f"{args.split}: {len(report.rows)} segments, " + ", ".join(parts))
    return EXIT_OK


# -- ablation ---------------------------------------------------------------------

@dataclass
class AblationSpec:
    grid: list  # (eeg_variant, fusion_variant, adc_blocks)
    seeds: list = field(default_factory=lambda: [0])
    corpus: str | None = None
    splits: list = field(default_factory=lambda: ["val", "test"])
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    toy: bool = True
    workers: int = 1
    stoi: bool = False

    def __post_init__(self):
        self.grid = [tuple(cell) for cell in self.grid]
        for cell in self.grid:
            if len(cell) != 3:
                raise ValueError(f"grid cell {cell} is not (eeg_variant, fusion_variant, adc_blocks)")
            eeg, fus, n = cell
            if eeg not in EEG_VARIANTS or fus not in FUSION_VARIANTS or n not in ADC_COUNTS:
                raise ValueError(f"grid cell {cell} outside {EEG_VARIANTS} x {FUSION_VARIANTS} x {ADC_COUNTS}")
        if not self.seeds:
            raise ValueError("need at least one seed")
        for split in self.splits:
            if split not in ("val", "test"):
                raise ValueError(f"unknown split {split!r}")

    @classmethod
    def from_dict(cls, doc: dict) -> "AblationSpec":
        doc = dict(doc)
        grid = doc.get("grid")
        if isinstance(grid, str):
            if grid not in PRESETS:
                raise ValueError(f"unknown grid preset {grid!r}; choose from {sorted(PRESETS)}")
            doc["grid"], default_splits = PRESETS[grid]
            doc.setdefault("splits", default_splits)
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown ablation keys: {sorted(unknown)}")
        if "grid" not in doc:
            raise ValueError("ablation spec needs a grid")
        return cls(**doc)


def cell_name(cell, seed: int) -> str:
    eeg, fus, n = cell
    return f"{eeg}_{fus}_n{n}_seed{seed}"


def _run_cell(job) -> dict:
    spec_doc, cell, seed, out_root = job
    spec = AblationSpec(**spec_doc)
    eeg, fus, n = cell
    name = cell_name(cell, seed)
    record = {"eeg_variant": eeg, "fusion_variant": fus, "adc_blocks": n, "seed": seed, "cell": name}
    try:
        doc = {
            "toy": spec.toy,
            "model": dict(spec.model, eeg_variant=eeg, fusion_variant=fus, adc_blocks=n),
            "train": dict(spec.train, seed=seed),
            "corpus": spec.corpus,
        }
        cfg = run_config_from_doc(doc)
        cfg.out = str(Path(out_root) / name)
        run_training(cfg, cfg.out, splits=spec.splits, with_stoi=spec.stoi)
        record["status"] = "ok"
    except Exception as exc:  # a failed cell is recorded, the grid continues
        log.error("cell %s failed: %s", name, exc)
        record["status"] = "failed"
        record["error"] = f"{type(exc).__name__}: {exc}"
    return record


def consolidate(spec: AblationSpec, out_root) -> list[dict]:
    """One row per grid cell: medians over seeds of each per-seed mean read back from the cell CSVs."""
    out_root = Path(out_root)
    rows = []
    for cell in spec.grid:
        eeg, fus, n = cell
        row = {"eeg_variant": eeg, "fusion_variant": fus, "adc_blocks": n}
        ok_seeds = []
        for split in spec.splits:
            per_seed = {}
            for seed in spec.seeds:
                path = out_root / cell_name(cell, seed) / f"metrics_{split}.csv"
                if not path.exists():
                    continue
                report = MetricsReport.read_csv(path)
                for name in report.metric_names:
                    per_seed.setdefault(name, []).append(report.metric(name).value)
                if split == spec.splits[0]:
                    ok_seeds.append(seed)
            for name, _ in REPORT_COLUMNS:
                vals = per_seed.get(name)
                row[f"{split}_{name}"] = float(np.median(vals)) if vals else float("nan")
        row["n_seeds"] = len(ok_seeds)
        rows.append(row)
    return rows


def cmd_ablate(args) -> int:
    doc = _read_json(args.config)
    if args.corpus:
        doc["corpus"] = args.corpus
    if args.seed is not None:
        doc["seeds"] = [args.seed]
    try:
        spec = AblationSpec.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid ablation spec: {exc}") from exc
    if spec.corpus is None:
        raise UsageError("ablation needs a corpus (--corpus or spec key)")
    if args.out is None:
        raise UsageError("ablate needs --out")
    out_root = Path(args.out)
    out_root.mkdir(parents=True, exist_ok=True)
    records = run_ablation(spec, out_root)
    failed = [r for r in records if r["status"] != "ok"]
    print(f"ablation: {len(records) - len(failed)} of {len(records)} cells finished; table in {out_root / 'ablation.csv'}")
    return EXIT_OK if len(failed) < len(records) else EXIT_RUNTIME


def run_ablation(spec: AblationSpec, out_root) -> list[dict]:
    out_root = Path(out_root)
    spec_doc = asdict(spec)
    jobs = [(spec_doc, cell, seed, str(out_root)) for cell in spec.grid for seed in spec.seeds]
    if spec.workers > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            records = list(pool.map(_run_cell, jobs))
    else:
        records = [_run_cell(job) for job in jobs]
    _write_csv(out_root / "cells.csv", records, ["cell", "eeg_variant", "fusion_variant", "adc_blocks", "seed", "status", "error"])
    rows = consolidate(spec, out_root)
    fields = ["eeg_variant", "fusion_variant", "adc_blocks", "n_seeds"]
    fields += [f"{split}_{name}" for split in spec.splits for name, _ in REPORT_COLUMNS]
    _write_csv(out_root / "ablation.csv", rows, fields)
    (out_root / "ablation.txt").write_text(_format_ablation(rows, spec.splits))
    return records


def _format_ablation(rows: list[dict], splits) -> str:
    header = ["EEG encoder", "Fusion", "AdC blocks"]
    for split in splits:
        header += [f"{label} ({split})" for _, label in REPORT_COLUMNS]
    body = []
    for r in rows:
        line = [r["eeg_variant"], r["fusion_variant"], str(r["adc_blocks"])]
        line += [_fmt(r[f"{split}_{name}"]) for split in splits for name, _ in REPORT_COLUMNS]
        body.append(line)
    return _table(header, body)


# -- report -----------------------------------------------------------------------

def paired_t_test(a, b) -> tuple[float, float]:
    """Two-sided paired t-test of ``a - b``; returns ``(t, p)``.

    The p-value uses the Student-t survival function with ``n - 1`` degrees
    of freedom.
    """
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    n = d.size
    if n < 2:
        raise ValueError("paired t-test needs at least two pairs")
    sd = d.std(ddof=1)
    if sd == 0:
        return (math.copysign(math.inf, d.mean()) if d.mean() else math.nan), (0.0 if d.mean() else 1.0)
    t = d.mean() / (sd / math.sqrt(n))
    p = 2.0 * stats.t.sf(abs(t), df=n - 1)
    return float(t), float(p)


def find_runs(paths, split: str) -> list[tuple[str, Path]]:
    """``(name, csv)`` for every directory under ``paths`` holding ``metrics_{split}.csv``."""
    runs = []
    for p in map(Path, paths):
        if not p.exists():
            raise UsageError(f"results path not found: {p}")
        direct = p / f"metrics_{split}.csv"
        if direct.exists():
            runs.append((p.name, direct))
            continue
        for csv_path in sorted(p.rglob(f"metrics_{split}.csv")):
            runs.append((str(csv_path.parent.relative_to(p)), csv_path))
    return runs


def build_report(runs: list[tuple[str, Path]]) -> tuple[list[dict], list[dict]]:
    """Comparison rows (one per run) and long-format SI-SDRi rows for violin plots."""
    reports = [(name, MetricsReport.read_csv(path)) for name, path in runs]
    base_name, base = reports[0]
    base_by_key = {(r["subject"], r["trial"], r["segment"]): r["si_sdri"] for r in base.rows}
    table, violin = [], []
    for name, rep in reports:
        row = {"run": name, "segments": len(rep.rows)}
        for key, _ in REPORT_COLUMNS:
            row[key] = rep.metric(key).value if key in rep.metric_names else float("nan")
        row["p_vs_first"] = float("nan")
        if name != base_name:
            pairs = [(r["si_sdri"], base_by_key[k]) for r in rep.rows if (k := (r["subject"], r["trial"], r["segment"])) in base_by_key]
            if len(pairs) >= 2:
                a, b = zip(*pairs)
                row["p_vs_first"] = paired_t_test(a, b)[1]
        table.append(row)
        violin.extend({"run": name, "subject": r["subject"], "trial": r["trial"], "segment": r["segment"], "si_sdri": r["si_sdri"]} for r in rep.rows)
    return table, violin


def cmd_report(args) -> int:
    runs = find_runs(args.results, args.split)
    if not runs:
        raise UsageError(f"no metrics_{args.split}.csv found under {', '.join(args.results)}")
    table, violin = build_report(runs)
    out = Path(args.out) if args.out else Path(args.results[0])
    out.mkdir(parents=True, exist_ok=True)
    has_stoi = any(not math.isnan(r["stoi"]) for r in table)
    cols = [c for c in REPORT_COLUMNS if c[0] != "stoi" or has_stoi]
    fields = ["run", "segments"] + [k for k, _ in cols] + ["p_vs_first"]
    _write_csv(out / f"report_{args.split}.csv", table, fields)
    _write_csv(out / f"violin_{args.split}.csv", violin, ["run", "subject", "trial", "segment", "si_sdri"])
    text = _table(
        ["Run"] + [label for _, label in cols] + ["p (paired t vs first)"],
        [[r["run"]] + [_fmt(r[k]) for k, _ in cols] + [_fmt(r["p_vs_first"], ".2g")] for r in table],
    )
    (out / f"report_{args.split}.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


# -- helpers ----------------------------------------------------------------------

def _fmt(v, spec: str = ".3f") -> str:
    return "-" if v is None or (isinstance(v, float) and math.isnan(v)) else format(v, spec)


def _table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    line = lambda cells: "  ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()
    return "\n".join([line(header), line(["-" * w for w in widths])] + [line(r) for r in rows]) + "\n"


def _write_csv(path: Path, rows: list[dict], fields: list[str]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items() if k in fields})


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="neurospex", description="EEG-guided target speaker extraction toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required, help="JSON config file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        return p

    g = common(sub.add_parser("generate", help="synthesize a two-talker EEG corpus"))
    g.add_argument("--force", action="store_true", help="overwrite an existing corpus")
    g.add_argument("--dry-run", action="store_true", help="write the trial plan only")
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--toy", action="store_true", help="toy manifest (the default)")
    g.set_defaults(func=cmd_generate, out_required=True)

    t = common(sub.add_parser("train", help="train a model"))
    t.add_argument("--corpus")
    t.add_argument("--toy", action="store_true", help="toy model and optimizer defaults")
    t.add_argument("--force", action="store_true", help="overwrite an existing run")
    t.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint on a corpus split")
    e.add_argument("checkpoint", help="checkpoint stem or training directory")
    e.add_argument("--corpus")
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--out")
    e.add_argument("--stoi", action="store_true")
    e.add_argument("--max-segments", type=int)
    e.set_defaults(func=cmd_evaluate)

    a = common(sub.add_parser("ablate", help="train and score a grid of model variants"), config_required=True)
    a.add_argument("--corpus")
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report", help="compare evaluated runs")
    r.add_argument("results", nargs="+", help="run directories or a directory of runs")
    r.add_argument("--split", default="test", choices=("train", "val", "test"))
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s")
    if getattr(args, "out_required", False) and not args.out:
        print(f"neurospex {args.command}: error: --out is required", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"neurospex {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        if args.verbose:
            traceback.print_exc()
        print(f"neurospex {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
