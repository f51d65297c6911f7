"""Closed-form empirical potentials (LJ, Morse, Stillinger-Weber) and the oracle.

Energies are in eV, lengths in Å and forces in eV/Å. Every model shares the
zero of isolated, non-interacting atoms.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .atoms import Configuration, NeighborList, build_neighbor_list, triplet_entries

KINDS = ("lennard_jones", "morse", "stillinger_weber")
ORACLE_NAME = "__oracle__"
COINCIDENT_TOL = 1e-8

_REQUIRED = {
    "lennard_jones": ("epsilon", "sigma"),
    "morse": ("D", "a", "r0"),
    "stillinger_weber": ("epsilon", "sigma", "a", "lambda", "gamma", "A", "B", "p", "q", "cos_theta0"),
}


class CoincidentAtomsError(ValueError):
    pass


class EipEvaluationError(RuntimeError):
    """An EIP failed on one configuration while labeling a dataset."""

    def __init__(self, index: int, name: str, cause: Exception):
        super().__init__(f"EIP {name!r} failed on configuration {index}: {cause}")
        self.index = index
        self.name = name


@dataclass(frozen=True)
class EipModel:
    """A named closed-form potential.

    Pair kinds (``lennard_jones``, ``morse``) are multiplied by the cosine
    taper ``0.5 * (cos(pi r / cutoff) + 1)`` unless ``taper`` is off, in which
    case they are simply truncated at ``cutoff``. Stillinger-Weber uses its own
    exponential cutoff at ``a * sigma``.
    """

    name: str
    kind: str
    params: Mapping[str, float]
    cutoff: float
    taper: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown EIP kind {self.kind!r}")
        params = {k: float(v) for k, v in dict(self.params).items()}
        missing = [k for k in _REQUIRED[self.kind] if k not in params]
        if missing:
            raise ValueError(f"{self.name}: missing parameters {missing}")
        if not all(math.isfinite(v) for v in params.values()):
            raise ValueError(f"{self.name}: parameters must be finite")
        if not (math.isfinite(self.cutoff) and self.cutoff > 0):
            raise ValueError(f"{self.name}: cutoff must be positive")
        if self.kind == "stillinger_weber":
            rc = params["a"] * params["sigma"]
            if self.cutoff < rc - 1e-12:
                raise ValueError(f"{self.name}: cutoff below a*sigma = {rc}")
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "cutoff", float(self.cutoff))

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind, "params": dict(self.params), "cutoff": self.cutoff}
        if not self.taper:
            d["taper"] = False
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "EipModel":
        return cls(d["name"], d["kind"], d["params"], d["cutoff"], d.get("taper", True))


# --- pair terms ---------------------------------------------------------------

def cosine_taper(r, rc):
    """``0.5 (cos(pi r/rc) + 1)`` inside the cutoff and its derivative."""
    x = np.pi * r / rc
    fc = 0.5 * (np.cos(x) + 1.0)
    dfc = -0.5 * np.pi / rc * np.sin(x)
    inside = r <= rc
    return np.where(inside, fc, 0.0), np.where(inside, dfc, 0.0)


def _pair_phi(model: EipModel, r: np.ndarray):
    p = model.params
    if model.kind == "lennard_jones":
        sr6 = (p["sigma"] / r) ** 6
        phi = 4 * p["epsilon"] * (sr6 * sr6 - sr6)
        dphi = 4 * p["epsilon"] * (-12 * sr6 * sr6 + 6 * sr6) / r
    elif model.kind == "morse":
        e1 = np.exp(-p["a"] * (r - p["r0"]))
        phi = p["D"] * (e1 * e1 - 2 * e1)
        dphi = p["D"] * (-2 * p["a"] * e1 * e1 + 2 * p["a"] * e1)
    else:
        raise ValueError(model.kind)
    if model.taper:
        fc, dfc = cosine_taper(r, model.cutoff)
        phi, dphi = phi * fc, dphi * fc + phi * dfc
    else:
        inside = r <= model.cutoff
        phi, dphi = np.where(inside, phi, 0.0), np.where(inside, dphi, 0.0)
    return phi, dphi


def _sw_pair(p: Mapping[str, float], r: np.ndarray):
    eps, sig, a = p["epsilon"], p["sigma"], p["a"]
    rc = a * sig
    inside = r < rc
    rr = np.where(inside, r, 0.5 * rc)
    u = sig / rr
    poly = p["A"] * eps * (p["B"] * u ** p["p"] - u ** p["q"])
    dpoly = p["A"] * eps * (-p["p"] * p["B"] * u ** p["p"] + p["q"] * u ** p["q"]) / rr
    g = np.exp(sig / (rr - rc))
    dg = -g * sig / (rr - rc) ** 2
    phi = np.where(inside, poly * g, 0.0)
    dphi = np.where(inside, dpoly * g + poly * dg, 0.0)
    return phi, dphi


def _sw_radial3(p: Mapping[str, float], r: np.ndarray):
    sig, rc = p["sigma"], p["a"] * p["sigma"]
    inside = r < rc
    rr = np.where(inside, r, 0.5 * rc)
    g = np.exp(p["gamma"] * sig / (rr - rc))
    dg = -g * p["gamma"] * sig / (rr - rc) ** 2
    return np.where(inside, g, 0.0), np.where(inside, dg, 0.0)


def _check_coincident(nl: NeighborList):
    if len(nl) and nl.dist.min() < COINCIDENT_TOL:
        e = int(np.argmin(nl.dist))
        raise CoincidentAtomsError(f"atoms {nl.i[e]} and {nl.j[e]} coincide")


def _energy_and_forces(model: EipModel, config: Configuration, want_forces: bool):
    nl = build_neighbor_list(config, model.cutoff)
    _check_coincident(nl)
    n = len(config)
    forces = np.zeros((n, 3)) if want_forces else None
    if len(nl) == 0:
        return 0.0, forces
    r = nl.dist
    if model.kind == "stillinger_weber":
        phi, dphi = _sw_pair(model.params, r)
    else:
        phi, dphi = _pair_phi(model, r)
    energy = 0.5 * phi.sum()
    if want_forces:
        # dE/d(disp) for each entry; disp = r_j - r_i
        g = (0.5 * dphi / r)[:, None] * nl.disp
        np.add.at(forces, nl.j, -g)
        np.add.at(forces, nl.i, g)
    if model.kind == "stillinger_weber":
        e3, f3 = _sw_three_body(model.params, nl, want_forces)
        energy += e3
        if want_forces:
            forces += f3
    return float(energy), forces


def _sw_three_body(p: Mapping[str, float], nl: NeighborList, want_forces: bool):
    e1, e2 = triplet_entries(nl)
    n = nl.n_atoms
    if len(e1) == 0:
        return 0.0, np.zeros((n, 3))
    u, v = nl.disp[e1], nl.disp[e2]
    ru, rv = nl.dist[e1], nl.dist[e2]
    cos = np.einsum("ij,ij->i", u, v) / (ru * rv)
    gu, dgu = _sw_radial3(p, ru)
    gv, dgv = _sw_radial3(p, rv)
    lam_eps = p["lambda"] * p["epsilon"]
    dc = cos - p["cos_theta0"]
    energy = float(np.sum(lam_eps * dc * dc * gu * gv))
    forces = np.zeros((n, 3))
    if want_forces:
        dE_dcos = 2 * lam_eps * dc * gu * gv
        dE_dru = lam_eps * dc * dc * dgu * gv
        dE_drv = lam_eps * dc * dc * gu * dgv
        dcos_du = v / (ru * rv)[:, None] - (cos / ru ** 2)[:, None] * u
        dcos_dv = u / (ru * rv)[:, None] - (cos / rv ** 2)[:, None] * v
        gU = dE_dcos[:, None] * dcos_du + (dE_dru / ru)[:, None] * u
        gV = dE_dcos[:, None] * dcos_dv + (dE_drv / rv)[:, None] * v
        np.add.at(forces, nl.j[e1], -gU)
        np.add.at(forces, nl.j[e2], -gV)
        np.add.at(forces, nl.i[e1], gU + gV)
    return energy, forces


def eip_energy(model: EipModel, config: Configuration) -> float:
    """Total potential energy (eV) of ``config`` under ``model``."""
    return _energy_and_forces(model, config, False)[0]


def eip_forces(model: EipModel, config: Configuration) -> np.ndarray:
    """Analytic forces ``-dE/dr`` (eV/Å), shape ``(N, 3)``."""
    return _energy_and_forces(model, config, True)[1]


# --- oracle ----------------------------------------------------------------------

@dataclass(frozen=True)
class Oracle:
    """Weighted sum of closed-form terms standing in for the high-fidelity method."""

    terms: tuple[EipModel, ...]
    weights: tuple[float, ...]

    def energy(self, config: Configuration) -> float:
        return float(sum(w * eip_energy(m, config) for m, w in zip(self.terms, self.weights)))

    def forces(self, config: Configuration) -> np.ndarray:
        return sum(w * eip_forces(m, config) for m, w in zip(self.terms, self.weights))

    def to_dict(self) -> dict:
        return {
            "name": ORACLE_NAME,
            "kind": "mixture",
            "terms": [dict(m.to_dict(), weight=w) for m, w in zip(self.terms, self.weights)],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Oracle":
        terms = tuple(EipModel.from_dict(t) for t in d["terms"])
        weights = tuple(float(t.get("weight", 1.0)) for t in d["terms"])
        return cls(terms, weights)


# --- EIP sets ------------------------------------------------------------------------

@dataclass(frozen=True)
class EipSet:
    """Ordered EIP collection; the order is the classifier's class order."""

    models: tuple[EipModel, ...]
    oracle: Oracle | None = None

    def __post_init__(self):
        models = tuple(self.models)
        names = [m.name for m in models]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate EIP names in {names}")
        if ORACLE_NAME in names:
            raise ValueError(f"{ORACLE_NAME} is reserved")
        object.__setattr__(self, "models", models)

    def __len__(self):
        return len(self.models)

    def __iter__(self):
        return iter(self.models)

    @property
    def names(self) -> list[str]:
        return [m.name for m in self.models]

    def subset(self, names: Sequence[str]) -> "EipSet":
        by_name = {m.name: m for m in self.models}
        return EipSet(tuple(by_name[n] for n in names), self.oracle)

    def to_json(self) -> str:
        entries = [m.to_dict() for m in self.models]
        if self.oracle is not None:
            entries.append(self.oracle.to_dict())
        return json.dumps(entries, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EipSet":
        entries = json.loads(text)
        if not isinstance(entries, list):
            raise ValueError("an EIP set file holds a JSON list")
        models, oracle = [], None
        for d in entries:
            if d.get("name") == ORACLE_NAME:
                oracle = Oracle.from_dict(d)
            else:
                models.append(EipModel.from_dict(d))
        return cls(tuple(models), oracle)

    def content_hash(self) -> str:
        return git_blob_hash(self.to_json().encode())


def git_blob_hash(data: bytes) -> str:
    """SHA-1 in the form git uses for blobs."""
    h = hashlib.sha1()
    h.update(b"blob %d\0" % len(data))
    h.update(data)
    return h.hexdigest()


DEFAULT_ZOO = "eip_zoo_v1.json"


def load_eip_set(path: str | Path | None = None) -> EipSet:
    """Read an EIP set file; ``None`` gives the packaged default zoo."""
    if path is None:
        text = resources.files("wsnip.data").joinpath(DEFAULT_ZOO).read_text()
    else:
        text = Path(path).read_text()
    return EipSet.from_json(text)


def default_eip_set() -> EipSet:
    return load_eip_set()


def default_oracle() -> Oracle:
    return load_eip_set().oracle


def oracle_energy(config: Configuration, oracle: Oracle | None = None) -> float:
    """High-fidelity stand-in energy (eV)."""
    return (oracle or default_oracle()).energy(config)


def label_with_eips(eips: EipSet, configs: Sequence[Configuration]) -> list[dict[str, float]]:
    """Energy table ``[{eip name: energy}]``, one row per configuration."""
    table = []
    for idx, conf in enumerate(configs):
        row = {}
        for model in eips:
            try:
                row[model.name] = eip_energy(model, conf)
            except Exception as exc:
                raise EipEvaluationError(idx, model.name, exc) from exc
        table.append(row)
    return table
