"""SI-SDR metric and loss, SI-SDRi, permutation selection, metric reports."""

from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffkernels as dk
from .diffkernels import Tensor

EPS = 1e-8
CAP_DB = 60.0
_TINY = 1e-30


@dataclass
class MetricValue:
    name: str
    value: float
    per_example: list = field(default_factory=list)

    @classmethod
    def from_examples(cls, name: str, values) -> "MetricValue":
        values = [float(v) for v in values]
        return cls(name, float(np.mean(values)) if values else float("nan"), values)


def si_sdr(est, ref) -> float:
    """Scale-invariant SDR in dB, capped at +60 dB.

    ``est`` is projected onto ``ref``; the residual energy is floored at
    ``1e-8`` times the target energy.
    """
    est = np.asarray(est, dtype=np.float64).ravel()
    ref = np.asarray(ref, dtype=np.float64).ravel()
    if est.shape != ref.shape or est.size == 0:
        raise ValueError(f"si_sdr needs equal non-empty lengths, got {est.shape} and {ref.shape}")
    ref_energy = ref @ ref
    if ref_energy == 0:
        raise ValueError("undefined reference")
    alpha = (est @ ref) / ref_energy
    target = alpha * ref
    residual = est - target
    t2 = target @ target
    r2 = max(residual @ residual, EPS * t2)
    value = 10.0 * np.log10((t2 + _TINY) / (r2 + _TINY))
    return float(min(value, CAP_DB))


def si_sdri(est, mixture, ref) -> float:
    return si_sdr(est, ref) - si_sdr(mixture, ref)


def si_sdr_loss(est: Tensor, ref) -> Tensor:
    """Negative SI-SDR averaged over any leading batch axes; differentiable in ``est``.

    Uncapped; the residual energy is stabilized by adding ``1e-8`` times the
    target energy.
    """
    ref_data = ref.data if isinstance(ref, Tensor) else np.asarray(ref)
    ref_t = Tensor(ref_data.astype(est.dtype, copy=False))
    if est.shape != ref_t.shape:
        raise ValueError(f"si_sdr_loss: shapes differ {est.shape} vs {ref_t.shape}")
    ref_energy = np.sum(ref_data.astype(np.float64) ** 2, axis=-1, keepdims=True)
    if np.any(ref_energy == 0):
        raise ValueError("undefined reference")
    dot = dk.sum(est * ref_t, axis=-1, keepdims=True)
    alpha = dk.div(dot, Tensor(ref_energy.astype(est.dtype)))
    target = alpha * ref_t
    residual = est - target
    t2 = dk.sum(target * target, axis=-1)
    r2 = dk.sum(residual * residual, axis=-1)
    ratio = dk.div(t2, r2 + t2 * EPS)
    return dk.mean(dk.log10(ratio) * -10.0)


def pit_select(estimates, refs) -> tuple[tuple[int, ...], float]:
    """Best assignment of estimates to references by mean SI-SDR.

    Returns ``(perm, score)`` where ``estimates[perm[i]]`` is matched to ``refs[i]``.
    """
    if len(estimates) != len(refs):
        raise ValueError("need as many estimates as references")
    best_perm, best = None, -np.inf
    for perm in itertools.permutations(range(len(refs))):
        score = float(np.mean([si_sdr(estimates[p], r) for p, r in zip(perm, refs)]))
        if score > best:
            best_perm, best = perm, score
    return best_perm, best


def pit_loss(estimates: list[Tensor], refs) -> Tensor:
    """Negative mean SI-SDR under the best permutation; gradient flows through the chosen one."""
    best = None
    for perm in itertools.permutations(range(len(refs))):
        terms = [si_sdr_loss(estimates[p], r) for p, r in zip(perm, refs)]
        loss = terms[0]
        for t in terms[1:]:
            loss = loss + t
        loss = loss * (1.0 / len(terms))
        if best is None or loss.item() < best.item():
            best = loss
    return best


# -- reports -----------------------------------------------------------------------

REPORT_FIELDS = ["subject", "trial", "segment", "si_sdr", "si_sdri"]


def summarize(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return {"mean": float("nan"), "median": float("nan"), "std": float("nan"), "n": 0}
    return {"mean": float(v.mean()), "median": float(np.median(v)), "std": float(v.std()), "n": int(v.size)}


@dataclass
class MetricsReport:
    rows: list  # dicts with REPORT_FIELDS (+ "stoi" when computed)

    @property
    def metric_names(self) -> list[str]:
        names = ["si_sdr", "si_sdri"]
        if self.rows and "stoi" in self.rows[0]:
            names.append("stoi")
        return names

    def metric(self, name: str) -> MetricValue:
        return MetricValue.from_examples(name, [r[name] for r in self.rows])

    def summary(self) -> dict:
        out = {"overall": {}, "per_subject": {}, "trial_mean": {}}
        for name in self.metric_names:
            out["overall"][name] = summarize([r[name] for r in self.rows])
            by_trial = {}
            for r in self.rows:
                by_trial.setdefault((r["subject"], r["trial"]), []).append(r[name])
            out["trial_mean"][name] = summarize([np.mean(v) for v in by_trial.values()])
        for subject in sorted({r["subject"] for r in self.rows}):
            sub = [r for r in self.rows if r["subject"] == subject]
            out["per_subject"][str(subject)] = {name: summarize([r[name] for r in sub]) for name in self.metric_names}
        return out

    def write(self, out_dir: str | Path, stem: str = "metrics") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / f"{stem}.csv"
        fields = REPORT_FIELDS + (["stoi"] if "stoi" in self.metric_names else [])
        with csv_path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
            writer.writeheader()
            for r in self.rows:
                writer.writerow({k: (repr(float(r[k])) if k in ("si_sdr", "si_sdri", "stoi") else r[k]) for k in fields})
        json_path = out_dir / f"{stem}.json"
        json_path.write_text(json.dumps(self.summary(), indent=2, sort_keys=True))
        return csv_path, json_path

    @classmethod
    def read_csv(cls, path: str | Path) -> "MetricsReport":
        rows = []
        with Path(path).open() as fh:
            for r in csv.DictReader(fh):
                row = {"subject": int(r["subject"]), "trial": int(r["trial"]), "segment": int(r["segment"])}
                for k in ("si_sdr", "si_sdri", "stoi"):
                    if k in r and r[k] != "":
                        row[k] = float(r[k])
                rows.append(row)
        return cls(rows)
