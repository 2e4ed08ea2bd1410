"""Force/energy fitting with an optional scheduled decorrelation term."""

from __future__ import annotations

import csv
import io as _io
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import autodiff as ad
from .correlation import CorrConfig, corr_loss_tensor, corr_losses, select_features
from .errors import DivergenceError, NumericError, ValidationError
from .graph import build_graph
from .io import atomic_write
from .model import (
    ModelParams,
    grad_params,
    init_params,
    load_checkpoint,
    make_batch,
    params_from_dict,
    params_to_dict,
    predict_batch,
    save_checkpoint,
)

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "loss_f", "loss_e", "loss_corr", "c_corr", "FMAE_val", "EMAE_val", "sec_per_epoch")


# ---------------------------------------------------------------- configuration

class SchedulerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["fixed", "linear", "cosine"] = "cosine"
    c_min: float = Field(0.0, ge=0)
    c_max: float = Field(0.1, ge=0)
    t_cycle: int = Field(100, ge=1)
    wrap: bool = True

    @model_validator(mode="after")
    def _ordered(self):
        if self.c_min > self.c_max:
            raise ValueError(f"c_min={self.c_min} exceeds c_max={self.c_max}")
        return self


class LossWeights(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    c_f: float = Field(1.0, ge=0)
    c_e: float = Field(1.0, ge=0)


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_layers: int = Field(3, ge=1)
    dim: int = Field(16, ge=1)
    n_basis: int = Field(8, ge=1)
    r_max: float = Field(4.5, gt=0)
    cutoff_p: int = Field(6, ge=1)


class TrainConfig(BaseModel):
    """Everything that determines a training run besides the data."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    model: ModelConfig = ModelConfig()
    scheduler: SchedulerConfig = SchedulerConfig()
    weights: LossWeights = LossWeights()
    corr: Optional[CorrConfig] = CorrConfig()
    epochs: int = Field(500, ge=0)
    batch_size: int = Field(4, ge=1)
    lr: float = Field(1e-3, gt=0)
    seed: int = 0
    val_every: int = Field(1, ge=1)
    normalize_loss: bool = True


# ---------------------------------------------------------------- scheduler

def coeff_at(cfg: SchedulerConfig, t: float) -> float:
    """Correlation-loss coefficient before epoch ``t`` (rising within a cycle)."""
    if t < 0:
        raise ValidationError(f"epoch must be >= 0, got {t}")
    if cfg.kind == "fixed":
        return cfg.c_max
    t_eff = math.fmod(t, cfg.t_cycle) if cfg.wrap else min(t, cfg.t_cycle)
    if t_eff == 0:
        return cfg.c_min
    if t_eff == cfg.t_cycle:
        return cfg.c_max
    span = cfg.c_max - cfg.c_min
    if cfg.kind == "linear":
        return cfg.c_min + span * t_eff / cfg.t_cycle
    return cfg.c_max - span / 2.0 * (1.0 + math.cos(t_eff / cfg.t_cycle * math.pi))


def check_coefficients(sched: SchedulerConfig, weights: LossWeights) -> bool:
    """Warn (and return False) when c_max exceeds both force and energy weights."""
    if sched.c_max > max(weights.c_f, weights.c_e):
        msg = (
            f"c_max={sched.c_max} exceeds max(c_f, c_e)={max(weights.c_f, weights.c_e)}; "
            "the correlation term may dominate the fit"
        )
        warnings.warn(msg, stacklevel=2)
        log.warning(msg)
        return False
    return True


# ---------------------------------------------------------------- losses

@dataclass(frozen=True)
class LossParts:
    total: float
    loss_f: float
    loss_e: float
    loss_corr: float


def total_loss(pred, target, loss_corr: float, w: LossWeights, c: float, scale: float = 1.0) -> LossParts:
    """Weighted sum of force MSE, per-atom energy MSE and the correlation loss.

    ``pred``/``target`` are ``(energies[B], forces[N, 3], n_atoms[B])``
    tuples (``n_atoms`` is read from ``target``). Errors are divided by
    ``scale`` before squaring.
    """
    e_p, f_p = np.asarray(pred[0], float), np.asarray(pred[1], float)
    e_t, f_t, n_at = np.asarray(target[0], float), np.asarray(target[1], float), np.asarray(target[2], float)
    if e_p.shape != e_t.shape or f_p.shape != f_t.shape or n_at.shape != e_t.shape:
        raise ValidationError(
            f"shape mismatch: energies {e_p.shape} vs {e_t.shape}, forces {f_p.shape} vs {f_t.shape}"
        )
    loss_f = float(np.mean(((f_p - f_t) / scale) ** 2)) if f_p.size else 0.0
    loss_e = float(np.mean(((e_p - e_t) / n_at / scale) ** 2)) if e_p.size else 0.0
    total = w.c_f * loss_f + w.c_e * loss_e + c * float(loss_corr)
    return LossParts(total, loss_f, loss_e, float(loss_corr))


def _loss_tensors(outputs, e_true, f_true, n_atoms, scale):
    df = (outputs.forces - f_true) * (1.0 / scale)
    loss_f = ad.sum_(df * df) * (1.0 / max(df.data.size, 1))
    de = (outputs.energy - e_true) * (1.0 / (n_atoms * scale))
    loss_e = ad.sum_(de * de) * (1.0 / max(de.data.size, 1))
    return loss_f, loss_e


# ---------------------------------------------------------------- optimizer

class Adam:
    """Adaptive moment estimation on a dict of numpy arrays (updated in place)."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, weights: dict, grads: dict):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, g in grads.items():
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            weights[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {
            "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "t": self.t,
            "m": {k: v.tolist() for k, v in self.m.items()},
            "v": {k: v.tolist() for k, v in self.v.items()},
        }

    @classmethod
    def from_state(cls, obj: dict) -> "Adam":
        opt = cls(obj["lr"], obj["beta1"], obj["beta2"], obj["eps"])
        opt.t = int(obj["t"])
        opt.m = {k: np.array(v, dtype=float) for k, v in obj["m"].items()}
        opt.v = {k: np.array(v, dtype=float) for k, v in obj["v"].items()}
        return opt


# ---------------------------------------------------------------- metrics

def mae_from_predictions(preds, frames) -> tuple:
    """(FMAE meV/A, EMAE meV/atom) for ``[(E, F), ...]`` against labelled frames."""
    frames = list(frames)
    if not frames:
        raise ValidationError("cannot evaluate an empty dataset")
    ferr, eerr = [], []
    for (e, f), fr in zip(preds, frames):
        if fr.energy is None or fr.forces is None:
            raise ValidationError("evaluation frames need energy and force labels")
        ferr.append(np.abs(np.asarray(f) - fr.forces).ravel())
        eerr.append(abs(e - fr.energy) / fr.n_atoms)
    return 1000.0 * float(np.mean(np.concatenate(ferr))), 1000.0 * float(np.mean(eerr))


def evaluate_mae(params: ModelParams, ds) -> tuple:
    frames = list(ds)
    if not frames:
        raise ValidationError("cannot evaluate an empty dataset")
    return mae_from_predictions(predict_batch(params, frames), frames)


def metrics_csv(history: Sequence[dict]) -> str:
    buf = _io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in history:
        writer.writerow({k: ("" if row.get(k) is None else row[k]) for k in METRIC_COLUMNS})
    return buf.getvalue()


def read_metrics_csv(path) -> list:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append({k: (None if v == "" else (int(v) if k == "epoch" else float(v))) for k, v in row.items()})
    return rows


# ---------------------------------------------------------------- state

@dataclass
class TrainState:
    epoch: int
    params: ModelParams
    optimizer: Adam
    seed: int
    history: list = field(default_factory=list)
    best_params: Optional[ModelParams] = None
    best_val: float = math.inf
    best_epoch: int = -1
    loss_scale: float = 1.0
    config: dict = field(default_factory=dict)

    def save(self, path):
        extra = {
            "epoch": self.epoch,
            "seed": self.seed,
            "optimizer": self.optimizer.state_dict(),
            "history": self.history,
            "best_params": params_to_dict(self.best_params) if self.best_params is not None else None,
            "best_val": self.best_val if math.isfinite(self.best_val) else None,
            "best_epoch": self.best_epoch,
            "loss_scale": self.loss_scale,
        }
        save_checkpoint(path, self.params, self.config, extra)

    @classmethod
    def load(cls, path) -> "TrainState":
        params, config, extra = load_checkpoint(path)
        best = extra.get("best_params")
        return cls(
            epoch=int(extra.get("epoch", 0)),
            params=params,
            optimizer=Adam.from_state(extra["optimizer"]) if "optimizer" in extra else Adam(),
            seed=int(extra.get("seed", 0)),
            history=list(extra.get("history", [])),
            best_params=params_from_dict(best) if best else None,
            best_val=math.inf if extra.get("best_val") is None else float(extra["best_val"]),
            best_epoch=int(extra.get("best_epoch", -1)),
            loss_scale=float(extra.get("loss_scale", 1.0)),
            config=config,
        )


def _data_statistics(frames) -> tuple:
    """(mean energy per atom, force RMS, mean directed edges per atom)."""
    e = [fr.energy / fr.n_atoms for fr in frames if fr.energy is not None and fr.n_atoms]
    f = np.concatenate([fr.forces.ravel() for fr in frames if fr.forces is not None] or [np.zeros(1)])
    rms = float(np.sqrt(np.mean(f * f)))
    return (float(np.mean(e)) if e else 0.0), (rms if rms > 0 else 1.0)


class Trainer:
    """Epoch-at-a-time training loop; :func:`train` drives it to completion."""

    def __init__(self, ds_train, ds_val, cfg: TrainConfig, n_species: Optional[int] = None):
        self.train_frames = list(ds_train)
        self.val_frames = list(ds_val)
        if not self.train_frames or not self.val_frames:
            raise ValidationError("training needs non-empty train and validation sets")
        for fr in self.train_frames:
            if fr.energy is None or fr.forces is None:
                raise ValidationError("training frames need energy and force labels")
        self.cfg = cfg
        if n_species is None:
            n_species = max(
                max(len(fr.masses) for fr in self.train_frames),
                max(int(fr.species.max()) for fr in self.train_frames if fr.n_atoms),
            )
        check_coefficients(cfg.scheduler, cfg.weights)
        seeds = np.random.SeedSequence(cfg.seed).spawn(3)
        init_seed = int(seeds[0].generate_state(1)[0])
        self.shuffle_rng = np.random.default_rng(seeds[1])
        self.corr_rng = np.random.default_rng(seeds[2])
        m = cfg.model
        params = init_params(n_species, m.n_layers, m.dim, m.n_basis, m.r_max, m.cutoff_p, seed=init_seed)
        e_shift, f_rms = _data_statistics(self.train_frames)
        self.graphs = [build_graph(fr, m.r_max) for fr in self.train_frames]
        params.energy_shift = e_shift
        params.energy_scale = f_rms
        params.avg_neighbors = max(
            float(np.mean([g.f / max(fr.n_atoms, 1) for g, fr in zip(self.graphs, self.train_frames)])), 1.0
        )
        self.state = TrainState(
            epoch=0,
            params=params,
            optimizer=Adam(lr=cfg.lr),
            seed=cfg.seed,
            loss_scale=f_rms if cfg.normalize_loss else 1.0,
            config=cfg.model_dump(),
        )

    # -- one optimisation step
    def _step(self, idx, c: float, epoch: int, batch_no: int) -> tuple:
        cfg = self.cfg
        frames = [self.train_frames[i] for i in idx]
        batch = make_batch(frames, [self.graphs[i] for i in idx], self.state.params.n_species)
        e_true = np.array([fr.energy for fr in frames])
        f_true = np.concatenate([fr.forces for fr in frames])
        n_atoms = batch.n_atoms.astype(float)
        scale = self.state.loss_scale
        corr = cfg.corr
        parts = {}

        def loss_fn(outputs):
            loss_f, loss_e = _loss_tensors(outputs, e_true, f_true, n_atoms, scale)
            loss = loss_f * cfg.weights.c_f + loss_e * cfg.weights.c_e
            parts["f"], parts["e"], parts["corr"] = float(loss_f.data), float(loss_e.data), float("nan")
            if corr is not None:
                blocks, _ = select_features(outputs.features, corr, rng=self.corr_rng)
                if c > 0:
                    loss_corr = corr_loss_tensor(blocks)
                    parts["corr"] = float(loss_corr.data)
                    loss = loss + loss_corr * c
                else:
                    # a zero-weighted term contributes nothing; keep it out of the graph
                    with ad.no_grad():
                        parts["corr"] = float(sum(corr_losses(blocks)))
            return loss

        capture = False if corr is None else ("edge" if corr.source == "edge" else "node")
        try:
            loss, grads, _ = grad_params(self.state.params, batch, loss_fn, capture=capture)
        except NumericError as exc:
            raise DivergenceError(f"{exc}", epoch=epoch, batch=batch_no) from exc
        if not math.isfinite(loss):
            raise DivergenceError("non-finite training loss", epoch=epoch, batch=batch_no)
        self.state.optimizer.step(self.state.params.weights, grads)
        return loss, parts

    def run_epoch(self) -> dict:
        """Train one epoch; returns the metrics row (validation per ``val_every``)."""
        st, cfg = self.state, self.cfg
        t = st.epoch
        c = coeff_at(cfg.scheduler, t)
        t0 = time.perf_counter()
        order = self.shuffle_rng.permutation(len(self.train_frames))
        sums = {"f": 0.0, "e": 0.0, "corr": 0.0}
        n_seen = 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            _, parts = self._step(idx, c, t, b)
            for k in sums:
                sums[k] += parts[k] * len(idx)
            n_seen += len(idx)
        elapsed = time.perf_counter() - t0
        row = {
            "epoch": t,
            "loss_f": sums["f"] / n_seen,
            "loss_e": sums["e"] / n_seen,
            "loss_corr": None if cfg.corr is None else sums["corr"] / n_seen,
            "c_corr": c,
            "FMAE_val": None,
            "EMAE_val": None,
            "sec_per_epoch": elapsed,
        }
        last = t + 1 == cfg.epochs
        if (t + 1) % cfg.val_every == 0 or last:
            fmae, emae = evaluate_mae(st.params, self.val_frames)
            row["FMAE_val"], row["EMAE_val"] = fmae, emae
            if fmae < st.best_val:
                st.best_val, st.best_epoch = fmae, t
                st.best_params = st.params.copy()
        st.history.append(row)
        st.epoch += 1
        return row


def train(ds_train, ds_val, cfg: TrainConfig, log_path=None, checkpoint_path=None, progress=None) -> TrainState:
    """Run ``cfg.epochs`` epochs; deterministic for a given ``cfg.seed``.

    The best-validation parameters (by force MAE) are kept in
    ``state.best_params``.
    """
    trainer = Trainer(ds_train, ds_val, cfg)
    for _ in range(cfg.epochs):
        row = trainer.run_epoch()
        if progress is not None:
            progress(row)
        if log_path is not None and row["FMAE_val"] is not None:
            atomic_write(log_path, metrics_csv(trainer.state.history))
    if log_path is not None:
        atomic_write(log_path, metrics_csv(trainer.state.history))
    if trainer.state.best_params is None:
        trainer.state.best_params = trainer.state.params.copy()
    if checkpoint_path is not None:
        trainer.state.save(checkpoint_path)
    return trainer.state


# ---------------------------------------------------------------- overhead

@dataclass(frozen=True)
class OverheadReport:
    sec_a: float
    sec_b: float
    ratio: float
    samples_a: tuple
    samples_b: tuple

    def to_dict(self) -> dict:
        return {
            "sec_per_epoch_a": self.sec_a,
            "sec_per_epoch_b": self.sec_b,
            "ratio": self.ratio,
            "samples_a": list(self.samples_a),
            "samples_b": list(self.samples_b),
        }


def measure_overhead(ds_train, ds_val, cfg_a: TrainConfig, cfg_b: TrainConfig, epochs: int = 5, warmup: int = 1) -> OverheadReport:
    """Median training seconds per epoch for two configurations.

    Epochs of the two runs are interleaved so machine-load drift affects
    both equally; validation time is excluded. ``ratio`` is b / a.
    """
    if epochs < 1:
        raise ValidationError("need at least one timed epoch")
    big = 10**9
    a = Trainer(ds_train, ds_val, cfg_a.model_copy(update={"epochs": big, "val_every": big}))
    b = Trainer(ds_train, ds_val, cfg_b.model_copy(update={"epochs": big, "val_every": big}))
    ta, tb = [], []
    for k in range(warmup + epochs):
        for trainer, sink in ((a, ta), (b, tb)) if k % 2 == 0 else ((b, tb), (a, ta)):
            row = trainer.run_epoch()
            if k >= warmup:
                sink.append(row["sec_per_epoch"])
    sa, sb = float(np.median(ta)), float(np.median(tb))
    return OverheadReport(sa, sb, sb / sa, tuple(ta), tuple(tb))
