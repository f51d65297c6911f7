"""Label augmentation: best-EIP classes, the auxiliary classifier, selection of
EIP-labeled configurations and confidence grouping."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .atoms import Configuration, read_xyz, write_xyz
from .loss import K_FLOOR
from .models import ClassifierNet, PotentialNet
from .representation import AtomGraph, RepresentationSpec
from .training import TrainConfig, TrainResult, class_probabilities, fit_classifier, fit_potential

log = logging.getLogger(__name__)

DEFAULT_C = 0.1
DEFAULT_ALPHA = 0.5
ALPHA_GRID = (0.01, 0.05, 0.1, 0.5, 1.0, 5.0, 10.0)


class DataIntegrityError(ValueError):
    pass


@dataclass(frozen=True)
class BestEipLabel:
    """Class index (``n_eips`` means no EIP is good enough) and per-atom errors."""

    label: int
    errors: np.ndarray

    @property
    def is_dummy(self) -> bool:
        return self.label == len(self.errors)


def energy_table(rows: Sequence[Mapping[str, float]], names: Sequence[str]) -> np.ndarray:
    """``(n, |P|)`` array from per-configuration ``{name: energy}`` maps."""
    table = np.full((len(rows), len(names)), np.nan)
    for i, row in enumerate(rows):
        for p, name in enumerate(names):
            if name in row:
                table[i, p] = row[name]
    return table


def per_atom_errors(table, reference, n_atoms) -> np.ndarray:
    table = np.asarray(table, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    n_atoms = np.asarray(n_atoms, dtype=np.float64)
    if table.ndim != 2 or len(table) != len(reference) or len(reference) != len(n_atoms):
        raise DataIntegrityError("energy table, reference energies and atom counts disagree in length")
    missing = np.argwhere(~np.isfinite(table))
    if len(missing):
        i, p = missing[0]
        raise DataIntegrityError(f"configuration {i} lacks a finite energy for EIP column {p}")
    return np.abs(table - reference[:, None]) / n_atoms[:, None]


def assign_classes(errors, c: float = DEFAULT_C) -> np.ndarray:
    """Argmin column (lowest index on ties), or ``n_eips`` when every error exceeds ``c``."""
    errors = np.asarray(errors, dtype=np.float64)
    best = np.argmin(errors, axis=1)
    dummy = errors.min(axis=1) > c
    return np.where(dummy, errors.shape[1], best).astype(np.int64)


def best_eip_labels(table, reference, n_atoms, c: float = DEFAULT_C) -> list[BestEipLabel]:
    errors = per_atom_errors(table, reference, n_atoms)
    return [BestEipLabel(int(k), e) for k, e in zip(assign_classes(errors, c), errors)]


# --- classifier -------------------------------------------------------------------

def train_classifier(spec: RepresentationSpec, graphs: Sequence[AtomGraph], labels, n_classes: int,
                     val_graphs: Sequence[AtomGraph], val_labels, cfg: TrainConfig,
                     seed: int) -> tuple[ClassifierNet, TrainResult | None]:
    """Fit the best-EIP classifier; a single-class training set gives a constant map."""
    labels = np.asarray(labels, dtype=np.int64)
    model = ClassifierNet(spec, n_classes, np.random.default_rng([seed, 10]))
    model.fit_normalization(list(graphs) + list(val_graphs))
    present = np.unique(labels)
    if len(present) < 2:
        log.warning("classifier training set has a single class %s; using a constant classifier", present)
        model.make_constant(int(present[0]) if len(present) else n_classes - 1)
        return model, None
    return model, fit_classifier(model, graphs, labels, val_graphs, val_labels, cfg, seed)


def accuracy(probs, labels) -> float:
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(labels)))


# --- selection ----------------------------------------------------------------------

@dataclass
class Selection:
    """Classifier decisions on a pool; ``index`` refers to positions in that pool."""

    index: np.ndarray
    label: np.ndarray
    energy: np.ndarray
    confidence: np.ndarray
    dropped: np.ndarray

    def __len__(self):
        return len(self.index)


def select_from_probabilities(probs, table) -> Selection:
    """Argmax class per row; dummy rows are dropped, the rest take that EIP's energy."""
    probs = np.asarray(probs, dtype=np.float64)
    table = np.asarray(table, dtype=np.float64)
    n_eips = table.shape[1]
    if probs.shape != (len(table), n_eips + 1):
        raise ValueError(f"probabilities {probs.shape} do not match table {table.shape} plus a dummy class")
    pred = np.argmax(probs, axis=1)
    keep = pred != n_eips
    idx = np.flatnonzero(keep)
    return Selection(idx, pred[idx], table[idx, pred[idx]], probs[idx, pred[idx]], np.flatnonzero(~keep))


def predict_and_select(classifier: ClassifierNet, graphs: Sequence[AtomGraph], table) -> Selection:
    return select_from_probabilities(class_probabilities(classifier, graphs), table)


def confidence_groups(confidence) -> dict[str, np.ndarray]:
    """Split indices at the 1/3 and 2/3 empirical quantiles of ``confidence``.

    ``low`` is ``c <= q1``, ``medium`` is ``q1 < c <= q2`` and ``high`` is
    ``c > q2``, so ties at a threshold go to the lower group.
    """
    conf = np.asarray(confidence, dtype=np.float64)
    if conf.size < 3:
        raise ValueError("confidence grouping needs at least 3 instances")
    q1, q2 = np.quantile(conf, [1.0 / 3.0, 2.0 / 3.0])
    return {
        "low": np.flatnonzero(conf <= q1),
        "medium": np.flatnonzero((conf > q1) & (conf <= q2)),
        "high": np.flatnonzero(conf > q2),
    }


# --- augmented set ------------------------------------------------------------------

@dataclass
class AugmentedSet:
    """DFT-labeled instances plus selected EIP-labeled ones.

    Indices refer to one shared configuration list. ``eip_source`` holds the
    EIP class of each EIP-labeled instance.
    """

    dft_index: np.ndarray
    dft_energy: np.ndarray
    eip_index: np.ndarray
    eip_source: np.ndarray
    eip_energy: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        self.dft_index = np.asarray(self.dft_index, dtype=np.int64)
        self.eip_index = np.asarray(self.eip_index, dtype=np.int64)
        self.dft_energy = np.asarray(self.dft_energy, dtype=np.float64)
        self.eip_energy = np.asarray(self.eip_energy, dtype=np.float64)
        self.eip_source = np.asarray(self.eip_source, dtype=np.int64)
        self.confidence = np.asarray(self.confidence, dtype=np.float64)
        if np.intersect1d(self.dft_index, self.eip_index).size:
            raise ValueError("an instance cannot carry both a DFT and an EIP label")
        if len(self.dft_index) != len(self.dft_energy):
            raise ValueError("DFT indices and energies differ in length")
        if not (len(self.eip_index) == len(self.eip_energy) == len(self.eip_source) == len(self.confidence)):
            raise ValueError("EIP fields differ in length")

    @property
    def m(self) -> int:
        return len(self.dft_index)

    @property
    def s(self) -> int:
        return len(self.eip_index)

    @classmethod
    def from_selection(cls, dft_index, dft_energy, pool_index, selection: Selection, n_eips: int) -> "AugmentedSet":
        if np.any(selection.label >= n_eips):
            raise ValueError("dummy-labeled instances cannot be augmented")
        pool_index = np.asarray(pool_index, dtype=np.int64)
        return cls(dft_index, dft_energy, pool_index[selection.index], selection.label, selection.energy,
                   selection.confidence)

    def subset_eip(self, keep) -> "AugmentedSet":
        keep = np.asarray(keep)
        return AugmentedSet(self.dft_index, self.dft_energy, self.eip_index[keep], self.eip_source[keep],
                            self.eip_energy[keep], self.confidence[keep])


def write_augmented_xyz(configs: Sequence[Configuration], aug: AugmentedSet, eip_names: Sequence[str]) -> str:
    frames, extra = [], []
    for idx, e in zip(aug.dft_index, aug.dft_energy):
        frames.append(configs[idx])
        extra.append({"index": str(idx), "energy": repr(float(e)), "label_kind": "dft"})
    for idx, src, e, conf in zip(aug.eip_index, aug.eip_source, aug.eip_energy, aug.confidence):
        frames.append(configs[idx])
        extra.append({"index": str(idx), "energy": repr(float(e)), "label_kind": "eip",
                      "label_source": eip_names[src], "confidence": repr(float(conf))})
    return write_xyz(frames, extra)


def read_augmented_xyz(text: str, eip_names: Sequence[str]) -> tuple[list[Configuration], AugmentedSet]:
    frames = read_xyz(text)
    lookup = {n: k for k, n in enumerate(eip_names)}
    dft, eip = ([], []), ([], [], [], [])
    for f in frames:
        info = f.info
        idx, energy = int(info["index"]), float(info["energy"])
        if info.get("label_kind") == "dft":
            dft[0].append(idx)
            dft[1].append(energy)
        elif info.get("label_kind") == "eip":
            eip[0].append(idx)
            eip[1].append(lookup[info["label_source"]])
            eip[2].append(energy)
            eip[3].append(float(info["confidence"]))
        else:
            raise DataIntegrityError(f"frame {idx}: label_kind must be dft or eip")
    return frames, AugmentedSet(dft[0], dft[1], eip[0], eip[1], eip[2], eip[3])


# --- label-augmented training ----------------------------------------------------------

def train_la(spec: RepresentationSpec, graphs: Sequence[AtomGraph], aug: AugmentedSet, val_index, val_energy,
             alpha: float, cfg: TrainConfig, seed: int, eip_loss: str = "tukey", k_floor: float = K_FLOOR,
             init: Mapping[str, np.ndarray] | None = None,
             norm_graphs: Sequence[AtomGraph] | None = None) -> tuple[PotentialNet, TrainResult]:
    """Train a potential on ``aug`` with the robust mixture loss.

    ``graphs`` is indexed by the set's configuration indices. ``init``
    optionally supplies representation arrays (prefixed ``rep.``) to start
    from instead of a random initialization. ``norm_graphs`` (label-free)
    replaces the DFT graphs when fitting descriptor standardization.
    """
    if aug.m == 0:
        raise ValueError("label augmentation needs at least one DFT-labeled instance")
    model = PotentialNet(spec, np.random.default_rng([seed, 20]))
    dft_graphs = [graphs[k] for k in aug.dft_index]
    model.fit_normalization(dft_graphs, aug.dft_energy)
    if norm_graphs is not None:
        model.rep.fit_standardization(norm_graphs)
    if init is not None:
        model.rep.load_arrays(init, prefix="rep.")
    result = fit_potential(model, dft_graphs, aug.dft_energy, [graphs[k] for k in val_index], val_energy, cfg,
                           seed, [graphs[k] for k in aug.eip_index], aug.eip_energy, alpha, eip_loss, k_floor)
    return model, result
