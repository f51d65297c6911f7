"""Per-atom representation backends.

Two backends map a configuration to one feature vector per atom:

* ``descriptor``: fixed radial/angular symmetry functions, column
  standardization and an MLP with ssp on every layer;
* ``message_passing``: a one-hot species embedding refined by ``L``
  residual message-passing layers over a Gaussian distance expansion.

Configurations are turned once into :class:`AtomGraph` records by
:func:`featurize` and concatenated into a :class:`Batch` by :func:`collate`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .atoms import Configuration, NeighborList, build_neighbor_list, triplet_entries
from .eip import cosine_taper
from .net import Mlp, Module, NetStateError, glorot, ssp_with_grad

# 1.25 x the Stillinger-Weber cutoff a*sigma = 1.8 * 2.0951 Å
DEFAULT_CUTOFF = 1.25 * 1.8 * 2.0951
BACKENDS = ("descriptor", "message_passing")


class SpeciesError(ValueError):
    pass


def _species_index(species: Sequence[int], known: Sequence[int]) -> np.ndarray:
    lookup = {int(z): n for n, z in enumerate(known)}
    try:
        return np.array([lookup[int(z)] for z in species], dtype=np.int64)
    except KeyError as exc:
        raise SpeciesError(f"species {exc.args[0]} not among {tuple(known)}") from None


# --- symmetry-function descriptors ---------------------------------------------

@dataclass(frozen=True)
class DescriptorSpec:
    """Symmetry-function parameters.

    ``radial`` holds ``(eta, r_s)`` pairs for
    ``G = sum_j exp(-eta (r_ij - r_s)^2) fc(r_ij)`` and ``angular`` holds
    ``(zeta, lambda, eta)`` triples for
    ``G = 2^(1-zeta) sum_{j<k} (1 + lambda cos t_ijk)^zeta exp(-eta (r_ij^2 + r_ik^2)) fc(r_ij) fc(r_ik)``.
    Radial terms are resolved by the neighbor's species and angular terms by
    the unordered species pair of the two neighbors.
    """

    radial: tuple[tuple[float, float], ...]
    angular: tuple[tuple[float, float, float], ...] = ()
    cutoff: float = DEFAULT_CUTOFF
    species: tuple[int, ...] = (14,)

    def __post_init__(self):
        object.__setattr__(self, "radial", tuple((float(e), float(r)) for e, r in self.radial))
        object.__setattr__(self, "angular", tuple((float(z), float(l), float(e)) for z, l, e in self.angular))
        object.__setattr__(self, "species", tuple(int(z) for z in self.species))
        if not self.radial:
            raise ValueError("at least one radial term is required")
        if not self.cutoff > 0:
            raise ValueError("cutoff must be positive")
        if not self.species or len(set(self.species)) != len(self.species):
            raise ValueError("species must be a non-empty list of distinct atomic numbers")
        for zeta, lam, _ in self.angular:
            if lam not in (-1.0, 1.0) or zeta < 1:
                raise ValueError("angular terms need lambda = +-1 and zeta >= 1")

    @classmethod
    def default(cls, cutoff: float = DEFAULT_CUTOFF, species=(14,)) -> "DescriptorSpec":
        centers = np.linspace(0.5, cutoff, 8)
        eta = 4.0 / (centers[1] - centers[0]) ** 2
        radial = tuple((eta, float(r)) for r in centers)
        angular = tuple((z, l, 0.5) for z in (1.0, 4.0) for l in (-1.0, 1.0))
        return cls(radial, angular, cutoff, tuple(species))

    @property
    def n_pairs(self) -> int:
        s = len(self.species)
        return s * (s + 1) // 2

    @property
    def dim(self) -> int:
        return len(self.radial) * len(self.species) + len(self.angular) * self.n_pairs

    def pair_channel(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Index of the unordered species-index pair ``{a, b}``."""
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        s = len(self.species)
        return lo * s - lo * (lo - 1) // 2 + (hi - lo)

    def to_dict(self) -> dict:
        return {"radial": [list(t) for t in self.radial], "angular": [list(t) for t in self.angular],
                "cutoff": self.cutoff, "species": list(self.species)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "DescriptorSpec":
        return cls(tuple(map(tuple, d["radial"])), tuple(map(tuple, d.get("angular", ()))),
                   d["cutoff"], tuple(d["species"]))


def _descriptor_terms(spec: DescriptorSpec, config: Configuration, nl: NeighborList, grad: bool):
    """Shared evaluation; returns G (N, d) and, if ``grad``, per-entry/per-triplet derivatives."""
    if abs(nl.cutoff - spec.cutoff) > 1e-12:
        raise ValueError(f"neighbor list cutoff {nl.cutoff} != descriptor cutoff {spec.cutoff}")
    n = len(config)
    sidx = _species_index(config.species, spec.species)
    R, A = len(spec.radial), len(spec.angular)
    n_rad = R * len(spec.species)
    G = np.zeros((n, spec.dim))
    out = {}
    if len(nl) == 0:
        return G, out
    r = nl.dist
    fc, dfc = cosine_taper(r, spec.cutoff)

    eta = np.array([t[0] for t in spec.radial])
    rs = np.array([t[1] for t in spec.radial])
    gauss = np.exp(-eta * (r[:, None] - rs) ** 2)
    rad = gauss * fc[:, None]
    cols = sidx[nl.j][:, None] * R + np.arange(R)
    np.add.at(G, (np.broadcast_to(nl.i[:, None], cols.shape), cols), rad)
    if grad:
        drad = gauss * (dfc[:, None] - 2 * eta * (r[:, None] - rs) * fc[:, None])
        out["radial"] = (cols, drad)

    e1, e2 = triplet_entries(nl)
    if A and len(e1):
        u, v = nl.disp[e1], nl.disp[e2]
        ru, rv = r[e1], r[e2]
        cos = np.einsum("ij,ij->i", u, v) / (ru * rv)
        zeta = np.array([t[0] for t in spec.angular])
        lam = np.array([t[1] for t in spec.angular])
        aeta = np.array([t[2] for t in spec.angular])
        base = 1.0 + lam * cos[:, None]
        powm1 = base ** (zeta - 1)
        radial_part = np.exp(-aeta * (ru ** 2 + rv ** 2)[:, None]) * (fc[e1] * fc[e2])[:, None]
        pref = 2.0 ** (1.0 - zeta)
        ang = pref * powm1 * base * radial_part
        pair = spec.pair_channel(sidx[nl.j[e1]], sidx[nl.j[e2]])
        acols = n_rad + pair[:, None] * A + np.arange(A)
        np.add.at(G, (np.broadcast_to(nl.i[e1][:, None], acols.shape), acols), ang)
        if grad:
            d_cos = pref * zeta * lam * powm1 * radial_part
            # d/dr of exp(-eta r^2) fc(r), per leg
            def leg(rr, e):
                return -2 * aeta * rr[:, None] + (dfc[e] / np.where(fc[e] > 0, fc[e], 1.0))[:, None]
            d_ru = ang * leg(ru, e1)
            d_rv = ang * leg(rv, e2)
            out["angular"] = (e1, e2, acols, cos, d_cos, d_ru, d_rv)
    return G, out


def compute_descriptors(spec: DescriptorSpec, config: Configuration, nl: NeighborList | None = None) -> np.ndarray:
    """``(N, spec.dim)`` symmetry-function matrix; an isolated atom gets a zero row."""
    nl = nl if nl is not None else build_neighbor_list(config, spec.cutoff)
    return _descriptor_terms(spec, config, nl, False)[0]


def descriptor_gradients(spec: DescriptorSpec, config: Configuration, nl: NeighborList | None = None) -> np.ndarray:
    """Dense Jacobian ``J[i, c, a, :] = dG[i, c] / d r_a`` of shape ``(N, d, N, 3)``."""
    nl = nl if nl is not None else build_neighbor_list(config, spec.cutoff)
    n = len(config)
    _, parts = _descriptor_terms(spec, config, nl, True)
    J = np.zeros((n, spec.dim, n, 3))
    if "radial" in parts:
        cols, drad = parts["radial"]
        unit = nl.disp / nl.dist[:, None]
        g = drad[:, :, None] * unit[:, None, :]  # d/d disp, (E, R, 3)
        ii = np.broadcast_to(nl.i[:, None], cols.shape)
        jj = np.broadcast_to(nl.j[:, None], cols.shape)
        np.add.at(J, (ii, cols, jj), g)
        np.add.at(J, (ii, cols, ii), -g)
    if "angular" in parts:
        e1, e2, acols, cos, d_cos, d_ru, d_rv = parts["angular"]
        u, v = nl.disp[e1], nl.disp[e2]
        ru, rv = nl.dist[e1], nl.dist[e2]
        dcos_du = v / (ru * rv)[:, None] - (cos / ru ** 2)[:, None] * u
        dcos_dv = u / (ru * rv)[:, None] - (cos / rv ** 2)[:, None] * v
        gU = d_cos[:, :, None] * dcos_du[:, None, :] + d_ru[:, :, None] * (u / ru[:, None])[:, None, :]
        gV = d_cos[:, :, None] * dcos_dv[:, None, :] + d_rv[:, :, None] * (v / rv[:, None])[:, None, :]
        ii = np.broadcast_to(nl.i[e1][:, None], acols.shape)
        np.add.at(J, (ii, acols, np.broadcast_to(nl.j[e1][:, None], acols.shape)), gU)
        np.add.at(J, (ii, acols, np.broadcast_to(nl.j[e2][:, None], acols.shape)), gV)
        np.add.at(J, (ii, acols, ii), -(gU + gV))
    return J


# --- message passing ---------------------------------------------------------

@dataclass(frozen=True)
class MessagePassingSpec:
    """Hyperparameters of the message-passing backend.

    Distances are expanded on ``n_rbf`` Gaussians with centres evenly spaced
    on ``[0, cutoff]`` and width equal to the spacing, times the cosine taper.
    """

    layers: int = 3
    hidden: int = 64
    n_rbf: int = 16
    cutoff: float = DEFAULT_CUTOFF
    species: tuple[int, ...] = (14,)

    def __post_init__(self):
        object.__setattr__(self, "species", tuple(int(z) for z in self.species))
        if self.layers < 1 or self.hidden < 1 or self.n_rbf < 1:
            raise ValueError("layers, hidden and n_rbf must be >= 1")
        if not self.cutoff > 0:
            raise ValueError("cutoff must be positive")

    @property
    def centers(self) -> np.ndarray:
        return np.linspace(0.0, self.cutoff, self.n_rbf)

    @property
    def gamma(self) -> float:
        if self.n_rbf == 1:
            return 1.0 / self.cutoff ** 2
        return 1.0 / (self.cutoff / (self.n_rbf - 1)) ** 2

    def expand(self, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Gaussian expansion times taper ``(E, n_rbf)`` and the taper itself ``(E,)``."""
        fc, _ = cosine_taper(r, self.cutoff)
        e = np.exp(-self.gamma * (r[:, None] - self.centers) ** 2) * fc[:, None]
        return e, fc

    def to_dict(self) -> dict:
        return {"layers": self.layers, "hidden": self.hidden, "n_rbf": self.n_rbf,
                "cutoff": self.cutoff, "species": list(self.species)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "MessagePassingSpec":
        return cls(d["layers"], d["hidden"], d["n_rbf"], d["cutoff"], tuple(d["species"]))


_LAYER_PARAMS = ("filter", "A", "B", "b1", "W2", "b2", "U1", "c1", "U2", "c2")


def init_message_passing(spec: MessagePassingSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d, K = spec.hidden, spec.n_rbf
    params = {"embed": glorot(rng, len(spec.species), d)}
    for l in range(spec.layers):
        params[f"filter{l}"] = glorot(rng, K, d)
        params[f"A{l}"] = glorot(rng, d, d)
        params[f"B{l}"] = glorot(rng, d, d)
        params[f"b1{l}"] = np.zeros(d)
        params[f"W2{l}"] = glorot(rng, d, d)
        params[f"b2{l}"] = np.zeros(d)
        params[f"U1{l}"] = glorot(rng, 2 * d, d)
        params[f"c1{l}"] = np.zeros(d)
        params[f"U2{l}"] = glorot(rng, d, d)
        params[f"c2{l}"] = np.zeros(d)
    return params


def _mp_forward(spec: MessagePassingSpec, params: Mapping[str, np.ndarray], species_idx, edge_i, edge_j,
                rbf, fc, scatter_i: sp.spmatrix, keep: bool):
    """Forward pass on flat arrays; ``scatter_i`` is the ``(A, E)`` incidence of ``edge_i``."""
    n_species = len(spec.species)
    if params["embed"].shape != (n_species, spec.hidden):
        raise ValueError(f"embed has shape {params['embed'].shape}, expected {(n_species, spec.hidden)}")
    h = params["embed"][species_idx]
    deg = np.asarray(scatter_i @ fc).ravel()
    fc_scatter = scatter_i @ sp.diags(fc)
    caches = []
    for l in range(spec.layers):
        p = {k: params[f"{k}{l}"] for k in _LAYER_PARAMS}
        w = rbf @ p["filter"]
        hj = h[edge_j]
        x = hj * w
        z = (h @ p["A"])[edge_i] + x @ p["B"] + p["b1"]
        a, sa = ssp_with_grad(z)
        s = fc_scatter @ a
        m = s @ p["W2"] + deg[:, None] * p["b2"]
        hm = np.concatenate([h, m], axis=1)
        u, su = ssp_with_grad(hm @ p["U1"] + p["c1"])
        h_new = h + u @ p["U2"] + p["c2"]
        if keep:
            caches.append((h, w, hj, x, sa, s, hm, u, su))
        h = h_new
    return h, caches, deg


def message_passing_forward(spec: MessagePassingSpec, params: Mapping[str, np.ndarray], config: Configuration,
                            nl: NeighborList | None = None) -> np.ndarray:
    """Per-atom features ``(N, hidden)`` of one configuration."""
    nl = nl if nl is not None else build_neighbor_list(config, spec.cutoff)
    graph = featurize(config, RepresentationSpec("message_passing", message_passing=spec), nl)
    batch = collate([graph])
    h, _, _ = _mp_forward(spec, params, batch.species_idx, batch.edge_i, batch.edge_j, batch.rbf, batch.fc,
                          batch.scatter_i, False)
    return h


# --- featurization and batching ------------------------------------------------

@dataclass(frozen=True)
class RepresentationSpec:
    """Backend choice plus its hyperparameters.

    ``depth``/``width`` size the descriptor backend's MLP; the
    message-passing backend's feature width is ``message_passing.hidden``.
    """

    backend: str = "descriptor"
    descriptor: DescriptorSpec = field(default_factory=DescriptorSpec.default)
    message_passing: MessagePassingSpec = field(default_factory=MessagePassingSpec)
    depth: int = 5
    width: int = 128

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown representation backend {self.backend!r}")
        if self.depth < 1 or self.width < 1:
            raise ValueError("depth and width must be >= 1")

    @property
    def cutoff(self) -> float:
        return self.descriptor.cutoff if self.backend == "descriptor" else self.message_passing.cutoff

    @property
    def species(self) -> tuple[int, ...]:
        return self.descriptor.species if self.backend == "descriptor" else self.message_passing.species

    @property
    def feature_dim(self) -> int:
        return self.width if self.backend == "descriptor" else self.message_passing.hidden

    def with_backend(self, backend: str) -> "RepresentationSpec":
        return replace(self, backend=backend)

    def to_dict(self) -> dict:
        return {"backend": self.backend, "descriptor": self.descriptor.to_dict(),
                "message_passing": self.message_passing.to_dict(), "depth": self.depth, "width": self.width}

    @classmethod
    def from_dict(cls, d: Mapping) -> "RepresentationSpec":
        kw = {}
        if "descriptor" in d:
            kw["descriptor"] = DescriptorSpec.from_dict(d["descriptor"])
        if "message_passing" in d:
            kw["message_passing"] = MessagePassingSpec.from_dict(d["message_passing"])
        return cls(d.get("backend", "descriptor"), depth=d.get("depth", 5), width=d.get("width", 128), **kw)


@dataclass(frozen=True, eq=False)
class AtomGraph:
    """Precomputed inputs of one configuration for either backend."""

    n_atoms: int
    species_idx: np.ndarray
    desc: np.ndarray | None = None
    edge_i: np.ndarray | None = None
    edge_j: np.ndarray | None = None
    rbf: np.ndarray | None = None
    fc: np.ndarray | None = None


def featurize(config: Configuration, spec: RepresentationSpec, nl: NeighborList | None = None) -> AtomGraph:
    nl = nl if nl is not None else build_neighbor_list(config, spec.cutoff)
    sidx = _species_index(config.species, spec.species)
    if spec.backend == "descriptor":
        return AtomGraph(len(config), sidx, desc=compute_descriptors(spec.descriptor, config, nl))
    rbf, fc = spec.message_passing.expand(nl.dist)
    return AtomGraph(len(config), sidx, edge_i=np.asarray(nl.i), edge_j=np.asarray(nl.j), rbf=rbf, fc=fc)


def featurize_all(configs: Sequence[Configuration], spec: RepresentationSpec) -> list[AtomGraph]:
    return [featurize(c, spec) for c in configs]


@dataclass(eq=False)
class Batch:
    """Several :class:`AtomGraph` records with atoms and edges concatenated."""

    n_configs: int
    n_atoms: np.ndarray
    atom_config: np.ndarray
    species_idx: np.ndarray
    desc: np.ndarray | None
    edge_i: np.ndarray | None
    edge_j: np.ndarray | None
    rbf: np.ndarray | None
    fc: np.ndarray | None
    pool: sp.csr_matrix = field(repr=False)
    scatter_i: sp.csr_matrix | None = field(default=None, repr=False)
    scatter_j: sp.csr_matrix | None = field(default=None, repr=False)

    @property
    def total_atoms(self) -> int:
        return int(self.n_atoms.sum())


def _incidence(rows: np.ndarray, n_rows: int) -> sp.csr_matrix:
    n = len(rows)
    return sp.csr_matrix((np.ones(n), (rows, np.arange(n))), shape=(n_rows, n))


def collate(graphs: Sequence[AtomGraph]) -> Batch:
    if not graphs:
        raise ValueError("cannot collate an empty batch")
    n_atoms = np.array([g.n_atoms for g in graphs], dtype=np.int64)
    total = int(n_atoms.sum())
    starts = np.concatenate([[0], np.cumsum(n_atoms)[:-1]])
    atom_config = np.repeat(np.arange(len(graphs)), n_atoms)
    species_idx = np.concatenate([g.species_idx for g in graphs])
    pool = _incidence(atom_config, len(graphs))
    desc = None
    if graphs[0].desc is not None:
        desc = np.concatenate([g.desc for g in graphs])
    edge_i = edge_j = rbf = fc = scatter_i = scatter_j = None
    if graphs[0].rbf is not None:
        edge_i = np.concatenate([g.edge_i + s for g, s in zip(graphs, starts)])
        edge_j = np.concatenate([g.edge_j + s for g, s in zip(graphs, starts)])
        rbf = np.concatenate([g.rbf for g in graphs])
        fc = np.concatenate([g.fc for g in graphs])
        scatter_i = _incidence(edge_i, total)
        scatter_j = _incidence(edge_j, total)
    return Batch(len(graphs), n_atoms, atom_config, species_idx, desc, edge_i, edge_j, rbf, fc,
                 pool, scatter_i, scatter_j)


# --- trainable representation modules -----------------------------------------

class DescriptorRepresentation(Module):
    """Standardized descriptors followed by an MLP with ssp on every layer.

    The standardization constants are buffers: they are saved with the
    model but not trained.
    """

    def __init__(self, spec: RepresentationSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        d = spec.descriptor.dim
        self.buffers["desc_mean"] = np.zeros(d)
        self.buffers["desc_std"] = np.ones(d)
        self.children["mlp"] = Mlp([d] + [spec.width] * spec.depth, rng, activate_output=True)

    def fit_standardization(self, graphs: Sequence[AtomGraph]):
        X = np.concatenate([g.desc for g in graphs])
        self.buffers["desc_mean"][...] = X.mean(axis=0)
        std = X.std(axis=0)
        self.buffers["desc_std"][...] = np.where(std > 1e-8, std, 1.0)

    def forward(self, batch: Batch) -> np.ndarray:
        X = (batch.desc - self.buffers["desc_mean"]) / self.buffers["desc_std"]
        return self.children["mlp"].forward(X)

    def backward(self, dH: np.ndarray):
        self.children["mlp"].backward(dH)


class MessagePassingRepresentation(Module):
    """Species embedding plus residual message-passing layers.

    Per layer, with ``w = e_ij @ filter`` and ``x = h_j * w``::

        a_ij = ssp(h_i A + x B + b1)
        m_i  = sum_j fc(r_ij) (a_ij W2 + b2)
        h_i <- h_i + ssp([h_i, m_i] U1 + c1) U2 + c2

    The taper weight on each message keeps the output continuous as
    neighbors cross the cutoff.
    """

    def __init__(self, spec: RepresentationSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        for name, value in init_message_passing(spec.message_passing, rng).items():
            self.add_param(name, value)
        self._cache = None

    def fit_standardization(self, graphs: Sequence[AtomGraph]):
        pass

    def forward(self, batch: Batch) -> np.ndarray:
        h, caches, deg = _mp_forward(self.spec.message_passing, self.params, batch.species_idx, batch.edge_i,
                                     batch.edge_j, batch.rbf, batch.fc, batch.scatter_i, True)
        self._cache = (batch, caches, deg)
        return h

    def backward(self, dH: np.ndarray):
        if self._cache is None:
            raise NetStateError("backward called before forward")
        batch, caches, deg = self._cache
        self._cache = None
        P, G = self.params, self.grads
        d = self.spec.message_passing.hidden
        dh = np.array(dH, dtype=np.float64)
        for l in reversed(range(len(caches))):
            h, w, hj, x, sa, s, hm, u, su = caches[l]
            G[f"U2{l}"] += u.T @ dh
            G[f"c2{l}"] += dh.sum(axis=0)
            dq = (dh @ P[f"U2{l}"].T) * su
            G[f"U1{l}"] += hm.T @ dq
            G[f"c1{l}"] += dq.sum(axis=0)
            dhm = dq @ P[f"U1{l}"].T
            dm = dhm[:, d:]
            G[f"W2{l}"] += s.T @ dm
            G[f"b2{l}"] += deg @ dm
            ds = dm @ P[f"W2{l}"].T
            dz = batch.fc[:, None] * ds[batch.edge_i] * sa
            G[f"b1{l}"] += dz.sum(axis=0)
            G[f"B{l}"] += x.T @ dz
            dx = dz @ P[f"B{l}"].T
            dhA = batch.scatter_i @ dz
            G[f"A{l}"] += h.T @ dhA
            G[f"filter{l}"] += batch.rbf.T @ (dx * hj)
            dh = dh + dhm[:, :d] + dhA @ P[f"A{l}"].T + batch.scatter_j @ (dx * w)
        np.add.at(G["embed"], batch.species_idx, dh)


def make_representation(spec: RepresentationSpec, rng: np.random.Generator) -> Module:
    if spec.backend == "descriptor":
        return DescriptorRepresentation(spec, rng)
    return MessagePassingRepresentation(spec, rng)
