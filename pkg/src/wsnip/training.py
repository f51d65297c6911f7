"""Training loops shared by every strategy.

All loops are single-threaded and deterministic for a given seed. Each keeps
the parameters of the epoch with the best validation score and restores
them before returning.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .loss import K_FLOOR, cross_entropy, la_loss, mp_loss, softmax
from .models import ClassifierNet, MultiHeadPotential, PotentialNet, predict
from .net import Module, TrainState, optimize_step
from .representation import AtomGraph, collate

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    scheduler: str = "linear_decay"
    weight_decay: float = 0.0
    clip_norm: float | None = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "batch_size": self.batch_size, "lr": self.lr, "scheduler": self.scheduler,
                "weight_decay": self.weight_decay, "clip_norm": self.clip_norm}


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_score: float
    lr: float
    rejected: int = 0
    n_eip: int = 0
    mean_sigma: float = float("nan")
    used: np.ndarray | None = None

    @property
    def rejection_fraction(self) -> float:
        return self.rejected / self.n_eip if self.n_eip else float("nan")


@dataclass
class TrainResult:
    model: Module
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_score: float = float("inf")


def _state(cfg: TrainConfig, steps_per_epoch: int, scheduler: str | None = None) -> TrainState:
    return TrainState(total_steps=max(cfg.epochs * steps_per_epoch, 1), scheduler=scheduler or cfg.scheduler,
                      base_lr=cfg.lr, batch_size=cfg.batch_size, weight_decay=cfg.weight_decay,
                      clip_norm=cfg.clip_norm)


def config_mae(pred, target) -> float:
    return float(np.mean(np.abs(np.asarray(pred) - np.asarray(target))))


def atom_mae(pred, target, n_atoms) -> float:
    return float(np.mean(np.abs(np.asarray(pred) - np.asarray(target)) / np.asarray(n_atoms)))


# --- stratified batching ---------------------------------------------------------

def stratified_batches(m: int, s: int, batch_size: int, rng_dft: np.random.Generator,
                       rng_eip: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    """One epoch of ``(dft_idx, eip_idx)`` batches.

    Each batch asks for ``ceil(batch_size * m / (m + s))`` DFT instances and
    fills the rest with EIP instances; once a stratum runs out the other one
    fills whole batches. Every instance appears exactly once per epoch.
    """
    dft = rng_dft.permutation(m) if m else np.zeros(0, dtype=np.int64)
    eip = rng_eip.permutation(s) if s else np.zeros(0, dtype=np.int64)
    want = math.ceil(batch_size * m / (m + s)) if m + s else 0
    out, a, b = [], 0, 0
    while a < m or b < s:
        take_d = min(want, m - a)
        take_e = min(batch_size - take_d, s - b)
        take_d = min(batch_size - take_e, m - a)
        out.append((dft[a:a + take_d], eip[b:b + take_e]))
        a += take_d
        b += take_e
    return out


def _n_batches(m: int, s: int, batch_size: int) -> int:
    rng = np.random.default_rng(0)
    return len(stratified_batches(m, s, batch_size, rng, rng))


# --- energy regression (baseline and label augmentation) ----------------------------

def fit_potential(model: PotentialNet, dft_graphs: Sequence[AtomGraph], dft_energies,
                  val_graphs: Sequence[AtomGraph], val_energies, cfg: TrainConfig, seed: int,
                  eip_graphs: Sequence[AtomGraph] = (), eip_energies=(), alpha: float = 0.5,
                  eip_loss: str = "tukey", k_floor: float = K_FLOOR) -> TrainResult:
    """Minimize DFT MSE plus ``alpha`` times the robust EIP term.

    With no EIP instances (or ``alpha == 0``, where the EIP stratum is
    dropped) this is plain MSE training and follows the same batch order.
    Checkpoint selection uses validation config-level MAE.
    """
    dft_E = np.asarray(dft_energies, dtype=np.float64)
    eip_E = np.asarray(eip_energies, dtype=np.float64)
    val_E = np.asarray(val_energies, dtype=np.float64)
    if len(dft_graphs) == 0:
        raise ValueError("training needs at least one DFT-labeled configuration")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if alpha == 0:
        eip_graphs, eip_E = (), np.zeros(0)
    m, s = len(dft_graphs), len(eip_graphs)
    rng_dft = np.random.default_rng([seed, 0])
    rng_eip = np.random.default_rng([seed, 1])
    state = _state(cfg, _n_batches(m, s, cfg.batch_size))
    result = TrainResult(model)
    best = model.copy_arrays()
    for epoch in range(1, cfg.epochs + 1):
        total, count, rejected, n_eip, sigmas = 0.0, 0, 0, 0, []
        used = np.zeros(s, dtype=bool) if s else None
        lr = 0.0
        for di, ei in stratified_batches(m, s, cfg.batch_size, rng_dft, rng_eip):
            graphs = [dft_graphs[k] for k in di] + [eip_graphs[k] for k in ei]
            model.zero_grad()
            pred = model.forward(collate(graphs))
            nd = len(di)
            report = la_loss(pred[:nd], dft_E[di], pred[nd:], eip_E[ei] if s else np.zeros(0), alpha,
                             eip_loss=eip_loss, k_floor=k_floor)
            model.backward(np.concatenate([report.grad_dft, report.grad_eip]))
            lr = optimize_step(model, state)
            total += report.total
            count += 1
            if len(ei):
                rejected += report.rejected
                n_eip += len(ei)
                sigmas.append(report.sigma)
                used[ei] = report.used_mask
        val = config_mae(predict(model, val_graphs), val_E) if len(val_graphs) else total / max(count, 1)
        result.history.append(EpochRecord(epoch, total / max(count, 1), val, lr, rejected, n_eip,
                                          float(np.mean(sigmas)) if sigmas else float("nan"), used))
        if val < result.best_score:
            result.best_score, result.best_epoch = val, epoch
            best = model.copy_arrays()
    model.load_arrays(best)
    return result


# --- classifier --------------------------------------------------------------

def fit_classifier(model: ClassifierNet, graphs: Sequence[AtomGraph], labels, val_graphs: Sequence[AtomGraph],
                   val_labels, cfg: TrainConfig, seed: int) -> TrainResult:
    """Cross-entropy training; keeps the epoch with the lowest validation cross-entropy."""
    labels = np.asarray(labels, dtype=np.int64)
    val_labels = np.asarray(val_labels, dtype=np.int64)
    rng = np.random.default_rng([seed, 2])
    n = len(graphs)
    steps = math.ceil(n / cfg.batch_size)
    state = _state(cfg, steps, "slanted_triangular")
    result = TrainResult(model)
    best = model.copy_arrays()
    for epoch in range(1, cfg.epochs + 1):
        total, lr = 0.0, 0.0
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            model.zero_grad()
            logits = model.forward(collate([graphs[k] for k in idx]))
            value, grad = cross_entropy(logits, labels[idx], return_grad=True)
            model.backward(grad)
            lr = optimize_step(model, state)
            total += value
        if len(val_graphs):
            val = cross_entropy(predict(model, val_graphs), val_labels)
        else:
            val = total / steps
        result.history.append(EpochRecord(epoch, total / steps, val, lr))
        if val < result.best_score:
            result.best_score, result.best_epoch = val, epoch
            best = model.copy_arrays()
    model.load_arrays(best)
    return result


def class_probabilities(model: ClassifierNet, graphs: Sequence[AtomGraph]) -> np.ndarray:
    if not len(graphs):
        return np.zeros((0, model.n_classes))
    return softmax(predict(model, graphs))


# --- multi-task pretraining ------------------------------------------------------------

def fit_multitask(model: MultiHeadPotential, graphs: Sequence[AtomGraph], table, val_graphs: Sequence[AtomGraph],
                  val_table, cfg: TrainConfig, seed: int, normalize: bool = True) -> TrainResult:
    """Joint regression of all EIP energies.

    With ``normalize`` each head's residual is divided by that head's energy
    spread (``energy_scale`` times the mean atom count), so heads of very
    different scale contribute comparably; otherwise the loss is the plain
    mean over the table.
    """
    table = np.asarray(table, dtype=np.float64)
    val_table = np.asarray(val_table, dtype=np.float64)
    n = len(graphs)
    scale = None
    if normalize:
        mean_atoms = float(np.mean([g.n_atoms for g in graphs]))
        scale = model.buffers["energy_scale"] * mean_atoms
    rng = np.random.default_rng([seed, 3])
    steps = math.ceil(n / cfg.batch_size)
    state = _state(cfg, steps, "slanted_triangular")
    result = TrainResult(model)
    best = model.copy_arrays()
    for epoch in range(1, cfg.epochs + 1):
        total, lr = 0.0, 0.0
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            model.zero_grad()
            pred = model.forward(collate([graphs[k] for k in idx]))
            value, grad = mp_loss(pred, table[idx], scale, return_grad=True)
            model.backward(grad)
            lr = optimize_step(model, state)
            total += value
        if len(val_graphs):
            val = mp_loss(predict(model, val_graphs), val_table, scale)
        else:
            val = total / steps
        result.history.append(EpochRecord(epoch, total / steps, val, lr))
        if val < result.best_score:
            result.best_score, result.best_epoch = val, epoch
            best = model.copy_arrays()
    model.load_arrays(best)
    return result
