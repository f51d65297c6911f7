"""Multi-task pretraining on EIP energies, fine-tuning and representation export."""

from __future__ import annotations

import io
import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .loss import K_FLOOR
from .models import MultiHeadPotential, PotentialNet, pooled_features
from .net import Module, load_checkpoint, save_checkpoint
from .representation import AtomGraph, RepresentationSpec
from .training import TrainConfig, TrainResult, fit_multitask
from .weaklabel import AugmentedSet, train_la

log = logging.getLogger(__name__)

REP_PREFIX = "rep."


@dataclass
class PretrainResult:
    model: MultiHeadPotential
    result: TrainResult
    eip_names: tuple[str, ...]

    @property
    def rep_arrays(self) -> dict[str, np.ndarray]:
        """Representation-only arrays (prefixed ``rep.``), copied."""
        return {k: v.copy() for k, v in self.model.state_arrays().items() if k.startswith(REP_PREFIX)}


def pretrain(eip_names: Sequence[str], graphs: Sequence[AtomGraph], table, spec: RepresentationSpec,
             cfg: TrainConfig, seed: int, normalize: bool = True, val_fraction: float = 0.1) -> PretrainResult:
    """Fit a shared representation with one energy head per EIP.

    A random ``val_fraction`` of the configurations is held out to pick the
    best epoch. ``normalize=False`` trains on the raw table.
    """
    table = np.asarray(table, dtype=np.float64)
    if len(eip_names) == 0 or table.ndim != 2 or table.shape[1] == 0:
        raise ValueError("pretraining needs at least one EIP")
    if table.shape != (len(graphs), len(eip_names)):
        raise ValueError(f"table shape {table.shape} does not match {len(graphs)} graphs x {len(eip_names)} EIPs")
    rng = np.random.default_rng([seed, 30])
    perm = rng.permutation(len(graphs))
    n_val = int(round(val_fraction * len(graphs)))
    val, train = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    model = MultiHeadPotential(spec, len(eip_names), np.random.default_rng([seed, 31]))
    model.fit_normalization([graphs[k] for k in train], table[train])
    result = fit_multitask(model, [graphs[k] for k in train], table[train], [graphs[k] for k in val], table[val],
                           cfg, seed, normalize)
    return PretrainResult(model, result, tuple(eip_names))


def save_pretrained(pre: PretrainResult, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"eip_names": list(pre.eip_names), "representation": pre.model.spec.to_dict()}
    full = out / "pretrained_multihead.json"
    rep = out / "pretrained_rep.json"
    save_checkpoint(full, pre.model.state_arrays(), meta=meta)
    save_checkpoint(rep, pre.rep_arrays, meta=meta)
    return rep, full


def load_rep_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    arrays, _, meta = load_checkpoint(path)
    return {k: v for k, v in arrays.items() if k.startswith(REP_PREFIX)}, meta


def finetune(rep_arrays: Mapping[str, np.ndarray], spec: RepresentationSpec, graphs: Sequence[AtomGraph],
             aug: AugmentedSet, val_index, val_energy, mode: str, cfg: TrainConfig, seed: int,
             alpha: float = 0.5, eip_loss: str = "tukey", k_floor: float = K_FLOOR):
    """Start from pretrained representation arrays with a fresh head.

    ``mode="mse"`` ignores any EIP-labeled instances in ``aug``;
    ``mode="la"`` uses the robust mixture loss. Every parameter is trained.
    """
    if mode not in ("mse", "la"):
        raise ValueError(f"unknown fine-tuning mode {mode!r}")
    if mode == "mse":
        aug = AugmentedSet(aug.dft_index, aug.dft_energy, [], [], [], [])
    return train_la(spec, graphs, aug, val_index, val_energy, alpha, cfg, seed, eip_loss, k_floor, init=rep_arrays)


# --- export -------------------------------------------------------------------------

def pca(X, n_components: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Projection onto the leading principal axes and the (orthonormal) axes themselves."""
    X = np.asarray(X, dtype=np.float64)
    centered = X - X.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:n_components]
    # deterministic sign: largest-magnitude loading positive
    signs = np.sign(comps[np.arange(len(comps)), np.argmax(np.abs(comps), axis=1)])
    comps = comps * np.where(signs == 0, 1.0, signs)[:, None]
    return centered @ comps.T, comps


def export_representations(rep: Module, graphs: Sequence[AtomGraph], ids: Sequence, energy_per_atom=None):
    """Pooled features, a 2D PCA projection and the CSV text combining them.

    Returns ``(features, projection, csv_text)``; ``projection`` is ``None``
    when fewer than two configurations are given.
    """
    feats = pooled_features(rep, graphs)
    proj = None
    if len(graphs) >= 2:
        proj, _ = pca(feats, min(2, feats.shape[1]))
    else:
        log.warning("PCA skipped: need at least two configurations, got %d", len(graphs))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["config_id"] + [f"f{k}" for k in range(feats.shape[1])] + ["pc1", "pc2", "energy_per_atom"]
    writer.writerow(header)
    for r, cid in enumerate(ids):
        pcs = [repr(float(v)) for v in proj[r]] if proj is not None else ["", ""]
        pcs += [""] * (2 - len(pcs))
        e = "" if energy_per_atom is None else repr(float(energy_per_atom[r]))
        writer.writerow([cid] + [repr(float(v)) for v in feats[r]] + pcs + [e])
    return feats, proj, buf.getvalue()


def group_separation(features, groups) -> float:
    """Mean distance between rows of different groups over the mean distance within groups."""
    X = np.asarray(features, dtype=np.float64)
    g = np.asarray(groups)
    D = np.sqrt(np.maximum(np.sum(X * X, 1)[:, None] + np.sum(X * X, 1)[None, :] - 2 * X @ X.T, 0.0))
    same = g[:, None] == g[None, :]
    off = ~np.eye(len(X), dtype=bool)
    return float(D[~same].mean() / D[same & off].mean())
