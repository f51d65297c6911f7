"""Synthetic configuration samplers, dataset labeling and train/val/test splits."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .atoms import Configuration, read_xyz, write_xyz
from .eip import EipSet, Oracle, default_oracle, git_blob_hash, label_with_eips

log = logging.getLogger(__name__)

SAMPLER_KINDS = ("perturbed_lattice", "random_cluster", "dimer_scan")

_BASIS = {
    "diamond": np.array([
        [0, 0, 0], [0, 0.5, 0.5], [0.5, 0, 0.5], [0.5, 0.5, 0],
        [0.25, 0.25, 0.25], [0.25, 0.75, 0.75], [0.75, 0.25, 0.75], [0.75, 0.75, 0.25],
    ]),
    "fcc": np.array([[0, 0, 0], [0, 0.5, 0.5], [0.5, 0, 0.5], [0.5, 0.5, 0]]),
}


class SamplerError(RuntimeError):
    pass


@dataclass(frozen=True)
class SamplerSpec:
    """How to draw one family of configurations.

    ``strain`` draws an isotropic lattice scale factor from ``1 ± strain``.
    ``scan_range`` is the dimer separation interval as multiples of the
    equilibrium bond length.
    """

    kind: str
    count: int
    seed: int = 0
    species: int = 14
    lattice: str = "diamond"
    lattice_constant: float = 5.431
    repeats: tuple[int, int, int] = (1, 1, 1)
    sigma_disp: float = 0.0
    strain: float = 0.0
    cluster_sizes: tuple[int, int] = (2, 10)
    bond_range: tuple[float, float] = (0.9, 1.25)
    scan_range: tuple[float, float] = (0.85, 1.6)
    min_dist_factor: float = 0.5

    def __post_init__(self):
        if self.kind not in SAMPLER_KINDS:
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.count < 0:
            raise ValueError("count must be >= 0")
        if self.sigma_disp < 0:
            raise ValueError("sigma_disp must be >= 0")
        lo, hi = self.cluster_sizes
        if not 2 <= lo <= hi:
            raise ValueError("cluster sizes need 2 <= min <= max")
        if self.lattice not in _BASIS:
            raise ValueError(f"unknown lattice {self.lattice!r}")


_BOND_CACHE: dict[tuple[str, int], float] = {}


def dimer_equilibrium_distance(oracle: Oracle | None = None, species: int = 14) -> float:
    """Separation minimizing the oracle's dimer energy."""
    oracle = oracle or default_oracle()
    key = (json.dumps(oracle.to_dict(), sort_keys=True), species)
    if key not in _BOND_CACHE:
        def e(r):
            return oracle.energy(Configuration([species, species], [[0, 0, 0], [r, 0, 0]]))

        res = minimize_scalar(e, bounds=(1.0, 4.0), method="bounded", options={"xatol": 1e-8})
        _BOND_CACHE[key] = float(res.x)
    return _BOND_CACHE[key]


def lattice_config(lattice: str, a: float, repeats=(1, 1, 1), species: int = 14) -> Configuration:
    basis = _BASIS[lattice]
    reps = np.array(repeats)
    cells = np.stack(np.meshgrid(*[np.arange(n) for n in reps], indexing="ij"), -1).reshape(-1, 3)
    frac = (cells[:, None, :] + basis[None, :, :]).reshape(-1, 3)
    pos = frac * a
    cell = np.diag(reps * a).astype(float)
    return Configuration([species] * len(pos), pos, cell, (True, True, True), {"kind": "bulk"})


def _cluster(rng: np.random.Generator, size: int, bond: float, spec: SamplerSpec) -> np.ndarray:
    pos = [np.zeros(3)]
    lo, hi = spec.bond_range
    for _ in range(size - 1):
        for _attempt in range(100):
            anchor = pos[rng.integers(len(pos))]
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            cand = anchor + d * bond * rng.uniform(lo, hi)
            if min(np.linalg.norm(p - cand) for p in pos) >= lo * bond:
                break
        pos.append(cand)
    return np.array(pos)


def sample_configs(spec: SamplerSpec, oracle: Oracle | None = None) -> list[Configuration]:
    """Draw ``spec.count`` configurations deterministically from ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    out = []
    if spec.kind == "perturbed_lattice":
        base = lattice_config(spec.lattice, spec.lattice_constant, spec.repeats, spec.species)
        for _ in range(spec.count):
            scale = 1.0 + (rng.uniform(-spec.strain, spec.strain) if spec.strain > 0 else 0.0)
            pos = base.positions * scale
            if spec.sigma_disp > 0:
                pos = pos + rng.normal(scale=spec.sigma_disp, size=pos.shape)
            out.append(base.replace(positions=pos, cell=base.cell * scale,
                                    info={"kind": "bulk", "sigma_disp": repr(spec.sigma_disp)}))
        return out

    bond = dimer_equilibrium_distance(oracle, spec.species)
    if spec.kind == "dimer_scan":
        lo, hi = spec.scan_range
        for r in np.linspace(lo * bond, hi * bond, spec.count):
            out.append(Configuration([spec.species] * 2, [[0, 0, 0], [r, 0, 0]], info={"kind": "dimer"}))
        return out

    min_dist = spec.min_dist_factor * bond
    for _ in range(spec.count):
        size = int(rng.integers(spec.cluster_sizes[0], spec.cluster_sizes[1] + 1))
        for _retry in range(1000):
            pos = _cluster(rng, size, bond, spec)
            d = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
            d[np.diag_indices(size)] = np.inf
            if d.min() >= min_dist:
                break
        else:
            raise SamplerError(f"no valid {size}-atom cluster after 1000 retries")
        pos -= pos.mean(axis=0)
        out.append(Configuration([spec.species] * size, pos, info={"kind": "cluster"}))
    return out


# --- datasets ---------------------------------------------------------------------

DATA_FILE = "configs.xyz"
MANIFEST_FILE = "manifest.json"
SEALED_DIR = "sealed"
SEALED_FILE = "oracle_energies.json"
BULK_TIERS = (0.05, 0.15, 0.3)


@dataclass(frozen=True)
class DatasetSpec:
    """Sampler families, the number ``m`` of oracle-labeled configurations and a master seed."""

    samplers: tuple[SamplerSpec, ...]
    m: int = 100
    seed: int = 0
    c: float = 0.1
    min_class_fraction: float = 0.1
    max_regenerations: int = 10

    def to_dict(self) -> dict:
        return {
            "samplers": [{k: (list(v) if isinstance(v, tuple) else v) for k, v in s.__dict__.items()}
                         for s in self.samplers],
            "m": self.m, "seed": self.seed, "c": self.c,
            "min_class_fraction": self.min_class_fraction, "max_regenerations": self.max_regenerations,
        }

    @classmethod
    def from_dict(cls, d) -> "DatasetSpec":
        samplers = []
        for s in d["samplers"]:
            s = dict(s)
            for key in ("repeats", "cluster_sizes", "bond_range", "scan_range"):
                if key in s:
                    s[key] = tuple(s[key])
            samplers.append(SamplerSpec(**s))
        kw = {k: d[k] for k in ("m", "seed", "c", "min_class_fraction", "max_regenerations") if k in d}
        return cls(tuple(samplers), **kw)

    @property
    def count(self) -> int:
        return sum(s.count for s in self.samplers)


def default_dataset_spec(seed: int = 0, m: int = 100) -> DatasetSpec:
    """2000 configurations: 1400 perturbed diamond cells over three noise tiers, 500 clusters, 100 dimers."""
    per_tier = [467, 467, 466]
    samplers = [
        SamplerSpec("perturbed_lattice", n, sigma_disp=sig, strain=0.03)
        for n, sig in zip(per_tier, BULK_TIERS)
    ]
    samplers += [SamplerSpec("random_cluster", 500), SamplerSpec("dimer_scan", 100)]
    return DatasetSpec(tuple(samplers), m=m, seed=seed)


@dataclass(eq=False)
class Dataset:
    """All configurations with their EIP energy table and the oracle-labeled subset.

    ``dft_index`` lists the configurations carrying an oracle energy
    (``dft_energy``); the rest form the EIP-only pool. Split indices refer
    to positions within ``dft_index``.
    """

    configs: list[Configuration]
    eip_names: tuple[str, ...]
    eip_table: np.ndarray
    dft_index: np.ndarray
    dft_energy: np.ndarray
    splits: list["Split"] = field(default_factory=list)
    manifest: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.configs)

    @property
    def m(self) -> int:
        return len(self.dft_index)

    @property
    def pool_index(self) -> np.ndarray:
        """Configurations without an oracle label."""
        mask = np.ones(self.n, dtype=bool)
        mask[self.dft_index] = False
        return np.flatnonzero(mask)

    @property
    def n_atoms(self) -> np.ndarray:
        return np.array([len(c) for c in self.configs])

    @property
    def kinds(self) -> list[str]:
        return [c.info.get("kind", "") for c in self.configs]


def build_dataset(configs: Sequence[Configuration], eips: EipSet, m: int, seed: int,
                  oracle: Oracle | None = None) -> tuple[Dataset, np.ndarray]:
    """Label everything with every EIP and a random ``m``-subset with the oracle.

    Returns the dataset and the oracle energies of *all* configurations;
    the latter is meant for the sealed side file only.
    """
    if m <= 0:
        raise ValueError("m must be positive: some oracle labels are required")
    if m > len(configs):
        raise ValueError(f"m = {m} exceeds the {len(configs)} available configurations")
    oracle = oracle or eips.oracle or default_oracle()
    rows = label_with_eips(eips, configs)
    table = np.array([[row[name] for name in eips.names] for row in rows])
    sealed = np.array([oracle.energy(c) for c in configs])
    if not (np.all(np.isfinite(table)) and np.all(np.isfinite(sealed))):
        raise SamplerError("non-finite energy in generated data")
    rng = np.random.default_rng([seed, 7])
    dft_index = np.sort(rng.choice(len(configs), size=m, replace=False))
    ds = Dataset(list(configs), tuple(eips.names), table, dft_index, sealed[dft_index])
    return ds, sealed


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.2
    val_fraction: float = 0.2
    n_splits: int = 3
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.test_fraction < 1 and 0 < self.val_fraction < 1):
            raise ValueError("fractions must lie in (0, 1)")
        if self.n_splits < 1:
            raise ValueError("need at least one split")


@dataclass(frozen=True)
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def to_dict(self) -> dict:
        return {"train": self.train.tolist(), "val": self.val.tolist(), "test": self.test.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Split":
        return cls(*(np.array(d[k], dtype=np.int64) for k in ("train", "val", "test")))


def make_splits(m: int, spec: SplitSpec = SplitSpec()) -> list[Split]:
    """Random train/val/test partitions of ``range(m)``, one per split seed."""
    if m < 5:
        raise ValueError("splitting needs at least 5 labeled configurations")
    n_test = int(round(spec.test_fraction * m))
    n_val = int(round(spec.val_fraction * (m - n_test)))
    out = []
    for k in range(spec.n_splits):
        perm = np.random.default_rng([spec.seed, k]).permutation(m)
        test, val, train = perm[:n_test], perm[n_test:n_test + n_val], perm[n_test + n_val:]
        out.append(Split(np.sort(train), np.sort(val), np.sort(test)))
    return out


def class_counts(table, reference, n_atoms, c: float) -> np.ndarray:
    """Occurrences of each best-EIP class (last entry: no EIP within ``c``)."""
    from .weaklabel import assign_classes, per_atom_errors

    labels = assign_classes(per_atom_errors(table, reference, n_atoms), c)
    return np.bincount(labels, minlength=np.shape(table)[1] + 1)


def _diverse(counts: np.ndarray, n: int, fraction: float) -> bool:
    return int(np.sum(counts[:-1] >= fraction * n)) >= 2


def generate(spec: DatasetSpec, eips: EipSet, split_spec: SplitSpec | None = None) -> tuple[Dataset, np.ndarray]:
    """Sample, label and split; resample with a new seed until two EIPs are each best often enough."""
    oracle = eips.oracle or default_oracle()
    for attempt in range(spec.max_regenerations):
        seed = spec.seed + attempt
        configs = []
        for k, s in enumerate(spec.samplers):
            configs += sample_configs(replace(s, seed=seed * 1000 + k), oracle)
        ds, sealed = build_dataset(configs, eips, spec.m, seed, oracle)
        counts = class_counts(ds.eip_table, sealed, ds.n_atoms, spec.c)
        if _diverse(counts, ds.n, spec.min_class_fraction):
            break
        log.warning("seed %d: best-EIP classes %s are not diverse enough; regenerating", seed, counts.tolist())
    else:
        raise SamplerError(f"no diverse dataset after {spec.max_regenerations} attempts")
    split_spec = split_spec or SplitSpec(seed=seed)
    ds.splits = make_splits(ds.m, split_spec)
    ds.manifest = {
        "format": "wsnip-dataset/1",
        "spec": spec.to_dict(),
        "effective_seed": seed,
        "n": ds.n,
        "m": ds.m,
        "counts": {kind: ds.kinds.count(kind) for kind in sorted(set(ds.kinds))},
        "eip_names": list(ds.eip_names),
        "eip_set_hash": eips.content_hash(),
        "best_eip_class_counts": counts.tolist(),
        "dft_index": ds.dft_index.tolist(),
        "split_spec": {"test_fraction": split_spec.test_fraction, "val_fraction": split_spec.val_fraction,
                       "n_splits": split_spec.n_splits, "seed": split_spec.seed},
        "splits": [s.to_dict() for s in ds.splits],
    }
    return ds, sealed


def save_dataset(ds: Dataset, sealed: np.ndarray | None, out_dir) -> Path:
    """Write ``configs.xyz``, ``manifest.json`` and (if given) the sealed oracle energies."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dft_pos = {int(k): e for k, e in zip(ds.dft_index, ds.dft_energy)}
    extra = []
    for i in range(ds.n):
        row = {"index": str(i)}
        if i in dft_pos:
            row["energy"] = repr(float(dft_pos[i]))
        for name, e in zip(ds.eip_names, ds.eip_table[i]):
            row[f"eip_energy_{name}"] = repr(float(e))
        extra.append(row)
    text = write_xyz(ds.configs, extra)
    (out / DATA_FILE).write_text(text)
    manifest = dict(ds.manifest)
    manifest["data_hash"] = git_blob_hash(text.encode())
    (out / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    ds.manifest = manifest
    if sealed is not None:
        (out / SEALED_DIR).mkdir(exist_ok=True)
        (out / SEALED_DIR / SEALED_FILE).write_text(json.dumps({"oracle_energy": [float(e) for e in sealed]}))
    return out


def load_dataset(data_dir) -> Dataset:
    """Read a saved dataset. Never touches the sealed oracle file."""
    d = Path(data_dir)
    manifest = json.loads((d / MANIFEST_FILE).read_text())
    frames = read_xyz((d / DATA_FILE).read_text())
    names = tuple(manifest["eip_names"])
    table = np.array([[float(f.info[f"eip_energy_{n}"]) for n in names] for f in frames])
    dft_index = np.array(manifest["dft_index"], dtype=np.int64)
    dft_energy = np.array([float(frames[i].info["energy"]) for i in dft_index])
    configs = [f.replace(info={k: v for k, v in f.info.items()
                               if k not in ("index", "energy") and not k.startswith("eip_energy_")})
               for f in frames]
    splits = [Split.from_dict(s) for s in manifest["splits"]]
    return Dataset(configs, names, table, dft_index, dft_energy, splits, manifest)


def load_sealed(data_dir) -> np.ndarray:
    path = Path(data_dir) / SEALED_DIR / SEALED_FILE
    if not path.exists():
        raise FileNotFoundError(f"sealed oracle file {path} is missing")
    return np.array(json.loads(path.read_text())["oracle_energy"])
