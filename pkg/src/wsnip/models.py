"""Networks built on a representation backend: energy potential, best-EIP
classifier and the multi-head potential used for pretraining."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .net import Mlp, Module, NetStateError
from .representation import AtomGraph, Batch, RepresentationSpec, collate, make_representation

HEAD_WIDTH = 128


def _head(in_dim: int, out_dim: int, rng: np.random.Generator) -> Mlp:
    return Mlp([in_dim, HEAD_WIDTH, out_dim], rng)


def energy_statistics(graphs: Sequence[AtomGraph], energies) -> tuple[float, float]:
    """Per-atom mean energy and the spread of ``(E - N mu) / N``, used to scale heads."""
    E = np.asarray(energies, dtype=np.float64)
    n = np.array([g.n_atoms for g in graphs], dtype=np.float64)
    mu = float(E.sum() / n.sum())
    spread = float(np.std((E - n * mu) / n))
    return mu, spread if spread > 1e-8 else 1.0


class PotentialNet(Module):
    """``E = sum_i (scale * head(h_i) + shift)`` with ``h = rep(C)``.

    ``shift`` and ``scale`` are fixed buffers so the net predicts raw eV while
    the head works on order-one numbers.
    """

    def __init__(self, spec: RepresentationSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        self.children["rep"] = make_representation(spec, rng)
        self.children["head"] = _head(spec.feature_dim, 1, rng)
        self.buffers["energy_shift"] = np.zeros(1)
        self.buffers["energy_scale"] = np.ones(1)
        self._batch = None

    @property
    def rep(self):
        return self.children["rep"]

    def fit_normalization(self, graphs: Sequence[AtomGraph], energies):
        self.rep.fit_standardization(graphs)
        mu, spread = energy_statistics(graphs, energies)
        self.buffers["energy_shift"][0] = mu
        self.buffers["energy_scale"][0] = spread

    def forward(self, batch: Batch) -> np.ndarray:
        H = self.rep.forward(batch)
        y = self.children["head"].forward(H)[:, 0]
        atom_e = self.buffers["energy_scale"][0] * y + self.buffers["energy_shift"][0]
        self._batch = batch
        return batch.pool @ atom_e

    def backward(self, dE: np.ndarray):
        if self._batch is None:
            raise NetStateError("backward called before forward")
        dy = (self._batch.pool.T @ np.asarray(dE, dtype=np.float64)) * self.buffers["energy_scale"][0]
        self._batch = None
        dH = self.children["head"].backward(dy[:, None])
        self.rep.backward(dH)


class ClassifierNet(Module):
    """Sum-pooled per-atom features followed by an MLP giving class logits."""

    def __init__(self, spec: RepresentationSpec, n_classes: int, rng: np.random.Generator):
        super().__init__()
        if n_classes < 2:
            raise ValueError("a classifier needs at least two classes")
        self.spec = spec
        self.n_classes = n_classes
        self.children["rep"] = make_representation(spec, rng)
        self.children["head"] = _head(spec.feature_dim, n_classes, rng)
        self._batch = None

    @property
    def rep(self):
        return self.children["rep"]

    def fit_normalization(self, graphs: Sequence[AtomGraph]):
        self.rep.fit_standardization(graphs)

    def make_constant(self, label: int):
        """Turn the net into the constant map onto ``label``."""
        head = self.children["head"]
        last = head.n_layers - 1
        head.params[f"W{last}"][...] = 0.0
        head.params[f"b{last}"][...] = 0.0
        head.params[f"b{last}"][label] = 1.0

    def forward(self, batch: Batch) -> np.ndarray:
        H = self.rep.forward(batch)
        self._batch = batch
        return self.children["head"].forward(batch.pool @ H)

    def backward(self, dlogits: np.ndarray):
        if self._batch is None:
            raise NetStateError("backward called before forward")
        dpooled = self.children["head"].backward(dlogits)
        dH = self._batch.pool.T @ dpooled
        self._batch = None
        self.rep.backward(dH)


class MultiHeadPotential(Module):
    """One shared representation and ``n_heads`` independent energy heads."""

    def __init__(self, spec: RepresentationSpec, n_heads: int, rng: np.random.Generator):
        super().__init__()
        if n_heads < 1:
            raise ValueError("need at least one head")
        self.spec = spec
        self.n_heads = n_heads
        self.children["rep"] = make_representation(spec, rng)
        for p in range(n_heads):
            self.children[f"head{p}"] = _head(spec.feature_dim, 1, rng)
        self.buffers["energy_shift"] = np.zeros(n_heads)
        self.buffers["energy_scale"] = np.ones(n_heads)
        self._batch = None

    @property
    def rep(self):
        return self.children["rep"]

    def fit_normalization(self, graphs: Sequence[AtomGraph], table):
        """``table`` is ``(n_configs, n_heads)`` of per-EIP energies."""
        self.rep.fit_standardization(graphs)
        table = np.asarray(table, dtype=np.float64)
        for p in range(self.n_heads):
            mu, spread = energy_statistics(graphs, table[:, p])
            self.buffers["energy_shift"][p] = mu
            self.buffers["energy_scale"][p] = spread

    def forward(self, batch: Batch) -> np.ndarray:
        H = self.rep.forward(batch)
        cols = []
        for p in range(self.n_heads):
            y = self.children[f"head{p}"].forward(H)[:, 0]
            cols.append(batch.pool @ (self.buffers["energy_scale"][p] * y + self.buffers["energy_shift"][p]))
        self._batch = batch
        return np.stack(cols, axis=1)

    def backward(self, dE: np.ndarray):
        if self._batch is None:
            raise NetStateError("backward called before forward")
        dE = np.asarray(dE, dtype=np.float64)
        dH = 0.0
        for p in range(self.n_heads):
            dy = (self._batch.pool.T @ dE[:, p]) * self.buffers["energy_scale"][p]
            dH = dH + self.children[f"head{p}"].backward(dy[:, None])
        self._batch = None
        self.rep.backward(dH)


def pooled_features(rep: Module, graphs: Sequence[AtomGraph], chunk: int = 256) -> np.ndarray:
    """Sum over atoms of the representation's per-atom features, one row per configuration."""
    rows = []
    for lo in range(0, len(graphs), chunk):
        batch = collate(graphs[lo:lo + chunk])
        rows.append(batch.pool @ rep.forward(batch))
    return np.concatenate(rows) if rows else np.zeros((0, 0))


def predict(model: Module, graphs: Sequence[AtomGraph], chunk: int = 256) -> np.ndarray:
    """Forward ``model`` over ``graphs`` in chunks, without keeping caches."""
    outs = []
    for lo in range(0, len(graphs), chunk):
        outs.append(model.forward(collate(graphs[lo:lo + chunk])))
        model._batch = None
    if not outs:
        return np.zeros(0)
    return np.concatenate(outs)
