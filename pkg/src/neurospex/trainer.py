"""Training loop: Adam, plateau learning-rate decay, early stopping, checkpoints, evaluation."""

from __future__ import annotations

import csv
import json
import logging
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import diffkernels as dk
from .model import ModelConfig, NeuroSpexNet, load_checkpoint, save_checkpoint
from .objectives import MetricsReport, si_sdr, si_sdr_loss
from .signals import AUDIO_RATE, EEG_RATE
from .synthdata import load_segments, make_rng

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
LOG_FIELDS = ["epoch", "step", "train_loss", "val_loss", "lr", "wall_s"]


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 16
    decay_factor: float = 0.5
    scheduler_patience: int = 5
    early_stop_patience: int = 25
    max_epochs: int = 100
    seed: int = 0
    precision: str = "single"
    grad_clip: float = 5.0
    hop_s: float | None = None  # default: a quarter of the segment length
    steps_per_epoch: int | None = None
    max_steps: int | None = None
    max_val_segments: int | None = None
    shuffle_eeg: bool = False
    threads: int | None = 1

    def __post_init__(self):
        if not 0 < self.decay_factor < 1:
            raise ValueError("decay_factor must be in (0, 1)")
        if self.scheduler_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be >= 1")
        if self.precision not in ("single", "double"):
            raise ValueError("precision must be 'single' or 'double'")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @classmethod
    def toy(cls, **overrides) -> "TrainConfig":
        base = dict(batch_size=4, lr=1e-3)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**doc)

    @property
    def dtype(self):
        return np.float64 if self.precision == "double" else np.float32


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@dataclass
class TrainState:
    epoch: int = 0  # completed epochs
    step: int = 0
    lr_current: float = 1e-4
    best_val_loss: float = float("inf")
    epochs_since_best: int = 0
    seed: int = 0
    adam: AdamState = field(default_factory=AdamState)

    def to_json(self) -> dict:
        doc = asdict(self)
        doc.pop("adam")
        doc["adam_t"] = self.adam.t
        return doc


# -- optimizer and schedule -------------------------------------------------------

def adam_step(params, grads, state: AdamState, lr: float, betas=ADAM_BETAS, eps: float = ADAM_EPS) -> None:
    """One bias-corrected Adam update applied in place.

    ``params`` are :class:`Parameter` objects (their ``name`` keys the moment
    buffers); ``grads`` are arrays in the same order.
    """
    for p, g in zip(params, grads):
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {p.name or '<unnamed>'}")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g in zip(params, grads):
        key = p.name
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        v = state.v[key]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)


def lr_schedule_update(history, state: TrainState, decay_factor: float = 0.5, patience: int = 5) -> float:
    """Fold the newest validation loss in ``history`` into ``state`` and return the learning rate.

    A strictly lower loss resets the no-improvement counter; otherwise the
    counter grows and the rate is multiplied by ``decay_factor`` each time it
    reaches a multiple of ``patience``.
    """
    if not len(history):
        raise ValueError("empty validation history")
    loss = float(history[-1])
    if loss < state.best_val_loss:
        state.best_val_loss = loss
        state.epochs_since_best = 0
    else:
        state.epochs_since_best += 1
        if state.epochs_since_best % patience == 0:
            state.lr_current *= decay_factor
    return state.lr_current


def early_stop_check(state: TrainState, patience: int = 25) -> bool:
    return state.epochs_since_best >= patience


def clip_global_norm(grads: list, max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g *= scale
    return total


# -- data -------------------------------------------------------------------------

@dataclass
class SegmentArrays:
    mixture: np.ndarray  # [N, T_s]
    attended: np.ndarray  # [N, T_s]
    eeg: np.ndarray  # [N, C, T_y]
    ids: list  # (subject, trial, segment)

    def __len__(self) -> int:
        return len(self.mixture)

    def subset(self, idx) -> "SegmentArrays":
        idx = np.asarray(idx)
        return SegmentArrays(self.mixture[idx], self.attended[idx], self.eeg[idx], [self.ids[i] for i in idx])


MIN_SEGMENT_RMS = 1e-3


def load_split(corpus_dir, split: str, model_cfg: ModelConfig, hop_s: float, dtype=np.float32, limit: int | None = None) -> SegmentArrays:
    """Stack a split's segments into arrays. Segments whose attended RMS is below 1e-3 are skipped."""
    segs = load_segments(corpus_dir, split, window_s=model_cfg.segment_s, hop_s=hop_s)
    segs = [s for s in segs if np.sqrt(s.attended.power) >= MIN_SEGMENT_RMS]
    if not segs:
        raise ValueError(f"split {split!r} of {corpus_dir} has no segments")
    first = segs[0]
    if first.mixture.sample_rate != AUDIO_RATE or first.eeg.sample_rate != EEG_RATE:
        raise ValueError(
            f"corpus rates {first.mixture.sample_rate} Hz / {first.eeg.sample_rate} Hz do not match the model's "
            f"{AUDIO_RATE} Hz / {EEG_RATE} Hz"
        )
    if first.eeg.channel_count != model_cfg.n_y:
        raise ValueError(f"corpus has {first.eeg.channel_count} EEG channels, model expects {model_cfg.n_y}")
    if limit is not None and len(segs) > limit:
        keep = np.linspace(0, len(segs) - 1, limit).round().astype(int)
        segs = [segs[i] for i in keep]
    return SegmentArrays(
        mixture=np.stack([s.mixture.samples for s in segs]).astype(dtype),
        attended=np.stack([s.attended.samples for s in segs]).astype(dtype),
        eeg=np.stack([s.eeg.data for s in segs]).astype(dtype),
        ids=[(s.subject_id, s.trial_id, s.segment_index) for s in segs],
    )


def _thread_limit(threads):
    if threads is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=threads)


def batch_loss(net: NeuroSpexNet, data: SegmentArrays, batch_size: int) -> float:
    losses = []
    with dk.no_grad():
        for i in range(0, len(data), batch_size):
            est = net(data.mixture[i : i + batch_size], data.eeg[i : i + batch_size])
            n = est.shape[0]
            losses.append(si_sdr_loss(est, data.attended[i : i + batch_size]).item() * n)
    return float(np.sum(losses) / len(data))


def predict(net: NeuroSpexNet, data: SegmentArrays, batch_size: int = 16) -> np.ndarray:
    out = []
    with dk.no_grad():
        for i in range(0, len(data), batch_size):
            out.append(net(data.mixture[i : i + batch_size], data.eeg[i : i + batch_size]).data)
    return np.concatenate(out).astype(np.float64)


# -- training ---------------------------------------------------------------------

@dataclass
class TrainResult:
    out_dir: Path
    checkpoint: Path  # stem of the best checkpoint
    log: list
    state: TrainState
    stopped: str  # "max_epochs" | "early_stop" | "max_steps" | "diverged"


def _save_state(out_dir: Path, net: NeuroSpexNet, state: TrainState, model_cfg: ModelConfig, train_cfg: TrainConfig) -> None:
    save_checkpoint(net, out_dir / "last", {"train_config": asdict(train_cfg), "epoch": state.epoch})
    names = [n for n, _ in net.named_parameters() if n in state.adam.m]  # canonical order, resumed or not
    moments = {f"m/{k}": state.adam.m[k] for k in names}
    moments.update({f"v/{k}": state.adam.v[k] for k in names})
    dk.save_arrays(out_dir / "last_adam", moments)
    (out_dir / "last_state.json").write_text(json.dumps(state.to_json(), indent=2, sort_keys=True))


def _load_state(out_dir: Path, dtype) -> tuple[NeuroSpexNet, TrainState]:
    net, _ = load_checkpoint(out_dir / "last", dtype=dtype)
    doc = json.loads((out_dir / "last_state.json").read_text())
    moments, _ = dk.load_arrays(out_dir / "last_adam")
    adam = AdamState(
        t=doc.pop("adam_t"),
        m={k[2:]: v.astype(dtype) for k, v in moments.items() if k.startswith("m/")},
        v={k[2:]: v.astype(dtype) for k, v in moments.items() if k.startswith("v/")},
    )
    return net, TrainState(adam=adam, **doc)


def _write_log(path: Path, rows: list) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in LOG_FIELDS})


def read_log(path: str | Path) -> list[dict]:
    with Path(path).open() as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["epoch"], r["step"] = int(r["epoch"]), int(r["step"])
        for k in ("train_loss", "val_loss", "lr", "wall_s"):
            r[k] = float(r[k])
    return rows


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    corpus_dir,
    out_dir,
    resume: bool = False,
    train_data: SegmentArrays | None = None,
    val_data: SegmentArrays | None = None,
) -> TrainResult:
    """Train on the corpus ``train`` split, validating on ``val`` after every epoch.

    Writes ``best.*`` (lowest validation loss), ``last.*`` + ``last_state.json``
    + ``last_adam.*`` (for resuming) and ``log.csv`` into ``out_dir``.
    ``train_data``/``val_data`` bypass corpus loading when given.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dtype = train_cfg.dtype
    hop_s = train_cfg.hop_s if train_cfg.hop_s is not None else model_cfg.segment_s / 4
    if train_data is None or val_data is None:
        if corpus_dir is None or not (Path(corpus_dir) / "manifest.json").exists():
            raise FileNotFoundError(f"corpus not found at {corpus_dir}")
    if train_data is None:
        train_data = load_split(corpus_dir, "train", model_cfg, hop_s, dtype)
    if val_data is None:
        val_data = load_split(corpus_dir, "val", model_cfg, hop_s, dtype, limit=train_cfg.max_val_segments)
    train_eeg = train_data.eeg
    if train_cfg.shuffle_eeg:
        perm = make_rng(train_cfg.seed, 7919).permutation(len(train_data))
        train_eeg = train_eeg[perm]

    if resume and (out_dir / "last_state.json").exists():
        net, state = _load_state(out_dir, dtype)
        rows = read_log(out_dir / "log.csv")[: state.epoch] if (out_dir / "log.csv").exists() else []
    else:
        net = NeuroSpexNet(model_cfg, seed=train_cfg.seed, dtype=dtype)
        state = TrainState(lr_current=train_cfg.lr, seed=train_cfg.seed)
        rows = []
    params = net.parameters()
    bs = train_cfg.batch_size
    n_batches = len(train_data) // bs
    if n_batches == 0:
        raise ValueError(f"{len(train_data)} training segments cannot fill a batch of {bs}")
    if train_cfg.steps_per_epoch:
        n_batches = min(n_batches, train_cfg.steps_per_epoch)

    stopped = "max_epochs"
    start = time.perf_counter()
    with _thread_limit(train_cfg.threads):
        while state.epoch < train_cfg.max_epochs:
            order = make_rng(train_cfg.seed, state.epoch).permutation(len(train_data))
            losses = []
            try:
                for b in range(n_batches):
                    idx = np.sort(order[b * bs : (b + 1) * bs])
                    est = net(train_data.mixture[idx], train_eeg[idx])
                    loss = si_sdr_loss(est, train_data.attended[idx])
                    if not np.isfinite(loss.item()):
                        raise FloatingPointError(f"non-finite loss at step {state.step}")
                    net.zero_grad()
                    loss.backward()
                    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
                    clip_global_norm(grads, train_cfg.grad_clip)
                    adam_step(params, grads, state.adam, state.lr_current)
                    state.step += 1
                    losses.append(loss.item())
                    if train_cfg.max_steps and state.step >= train_cfg.max_steps:
                        break
            except FloatingPointError as exc:
                log.error("training aborted: %s", exc)
                stopped = "diverged"
                break
            val_loss = batch_loss(net, val_data, max(bs, 16))
            lr_used = state.lr_current
            history = [r["val_loss"] for r in rows] + [val_loss]
            improved = val_loss < state.best_val_loss
            lr_schedule_update(history, state, train_cfg.decay_factor, train_cfg.scheduler_patience)
            state.epoch += 1
            rows.append(
                dict(epoch=state.epoch, step=state.step, train_loss=float(np.mean(losses)), val_loss=val_loss, lr=lr_used,
                     wall_s=round(time.perf_counter() - start, 3))
            )
            log.info("epoch %d step %d train %.3f val %.3f lr %.2e", state.epoch, state.step, rows[-1]["train_loss"], val_loss, lr_used)
            if improved:
                save_checkpoint(net, out_dir / "best", {"train_config": asdict(train_cfg), "epoch": state.epoch})
            _save_state(out_dir, net, state, model_cfg, train_cfg)
            _write_log(out_dir / "log.csv", rows)
            if early_stop_check(state, train_cfg.early_stop_patience):
                stopped = "early_stop"
                break
            if train_cfg.max_steps and state.step >= train_cfg.max_steps:
                stopped = "max_steps"
                break
    if not (out_dir / "best.json").exists():
        save_checkpoint(net, out_dir / "best", {"train_config": asdict(train_cfg), "epoch": state.epoch})
    return TrainResult(out_dir, out_dir / "best", rows, state, stopped)


# -- evaluation ---------------------------------------------------------------------

def evaluate(
    checkpoint,
    corpus_dir,
    split: str,
    out_dir=None,
    hop_s: float | None = None,
    with_stoi: bool = False,
    max_segments: int | None = None,
    data: SegmentArrays | None = None,
) -> MetricsReport:
    """Per-segment SI-SDR / SI-SDRi (and optionally STOI) of a checkpoint on a corpus split.

    Without ``hop_s`` the segmentation hop recorded with the checkpoint's
    training config is used, falling back to a quarter segment.
    """
    meta = {}
    if isinstance(checkpoint, NeuroSpexNet):
        net = checkpoint
    else:
        net, meta = load_checkpoint(checkpoint)
    cfg = net.config
    if data is None:
        hop = hop_s if hop_s is not None else meta.get("train_config", {}).get("hop_s")
        hop = hop if hop is not None else cfg.segment_s / 4
        data = load_split(corpus_dir, split, cfg, hop, net.dtype, limit=max_segments)
    est = predict(net, data)
    rows = []
    for i, (subject, trial, seg) in enumerate(data.ids):
        ref = data.attended[i].astype(np.float64)
        mix = data.mixture[i].astype(np.float64)
        s = si_sdr(est[i], ref)
        row = {"subject": subject, "trial": trial, "segment": seg, "si_sdr": s, "si_sdri": s - si_sdr(mix, ref)}
        if with_stoi:
            from .stoi import stoi

            row["stoi"] = stoi(est[i], ref, AUDIO_RATE)
        rows.append(row)
    report = MetricsReport(rows)
    if out_dir is not None:
        report.write(out_dir, stem=f"metrics_{split}")
    return report
