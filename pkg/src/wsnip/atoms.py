"""Atomic configurations, periodic images, neighbor lists and extended-XYZ I/O."""

from __future__ import annotations

import math
import shlex
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np

SYMBOLS = (
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne",
    "Na", "Mg", "Al", "Si", "P", "S", "Cl", "Ar", "K", "Ca",
    "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn",
    "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr",
    "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In", "Sn",
    "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd",
    "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb",
    "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg",
    "Tl", "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th",
    "Pa", "U", "Np", "Pu", "Am", "Cm", "Bk", "Cf", "Es", "Fm",
    "Md", "No", "Lr", "Rf", "Db", "Sg", "Bh", "Hs", "Mt", "Ds",
    "Rg", "Cn", "Nh", "Fl", "Mc", "Lv", "Ts", "Og",
)
ATOMIC_NUMBERS = {sym: z for z, sym in enumerate(SYMBOLS, start=1)}

DET_TOL = 1e-12


class InvalidCellError(ValueError):
    """Raised for missing, degenerate or left-handed periodic cells."""


class XYZParseError(ValueError):
    def __init__(self, message: str, lineno: int):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Configuration:
    """Atoms (atomic numbers and Cartesian positions in Å) with an optional cell.

    Cell rows are lattice vectors. Positions are kept as given; see
    :func:`wrap_positions` for folding them into the cell.
    ``info`` carries string key/value properties (e.g. from an XYZ comment line).
    """

    species: np.ndarray
    positions: np.ndarray
    cell: np.ndarray | None = None
    pbc: tuple[bool, bool, bool] = (False, False, False)
    info: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        species = np.array(self.species, dtype=np.int64).reshape(-1)
        positions = np.array(self.positions, dtype=np.float64).reshape(-1, 3)
        if len(species) == 0:
            raise ValueError("a configuration needs at least one atom")
        if len(species) != len(positions):
            raise ValueError(
                f"{len(species)} species but {len(positions)} positions"
            )
        if np.any(species < 1) or np.any(species > len(SYMBOLS)):
            raise ValueError("atomic numbers must lie in 1..118")
        if not np.all(np.isfinite(positions)):
            raise ValueError("positions must be finite")
        pbc = tuple(bool(p) for p in self.pbc)
        if len(pbc) != 3:
            raise ValueError("pbc needs three flags")
        cell = None
        if self.cell is not None:
            cell = np.array(self.cell, dtype=np.float64).reshape(3, 3)
            if not np.all(np.isfinite(cell)):
                raise ValueError("cell must be finite")
        if any(pbc):
            if cell is None:
                raise InvalidCellError("periodic configuration without a cell")
            det = np.linalg.det(cell)
            if abs(det) < DET_TOL:
                raise InvalidCellError(f"degenerate cell (det={det:.3e})")
            if det <= 0:
                raise InvalidCellError("cell must be right-handed (det > 0)")
        object.__setattr__(self, "species", _frozen(species))
        object.__setattr__(self, "positions", _frozen(positions))
        object.__setattr__(self, "cell", None if cell is None else _frozen(cell))
        object.__setattr__(self, "pbc", pbc)
        object.__setattr__(self, "info", dict(self.info))

    def __len__(self):
        return len(self.species)

    @property
    def periodic(self) -> bool:
        return any(self.pbc)

    @property
    def symbols(self) -> list[str]:
        return [SYMBOLS[z - 1] for z in self.species]

    def replace(self, **changes) -> "Configuration":
        kw = dict(
            species=self.species,
            positions=self.positions,
            cell=self.cell,
            pbc=self.pbc,
            info=self.info,
        )
        kw.update(changes)
        return Configuration(**kw)


def cell_heights(cell: np.ndarray) -> np.ndarray:
    """Distances between opposite faces of the cell, one per lattice vector."""
    cell = np.asarray(cell, dtype=np.float64)
    vol = abs(np.linalg.det(cell))
    heights = np.empty(3)
    for d in range(3):
        a, b = cell[(d + 1) % 3], cell[(d + 2) % 3]
        heights[d] = vol / np.linalg.norm(np.cross(a, b))
    return heights


def wrap_positions(config: Configuration) -> Configuration:
    """Fold positions into the cell along periodic directions."""
    if not config.periodic:
        return config
    frac = np.linalg.solve(config.cell.T, config.positions.T).T
    for d in range(3):
        if config.pbc[d]:
            frac[:, d] -= np.floor(frac[:, d])
    return config.replace(positions=frac @ config.cell)


@dataclass(frozen=True, eq=False)
class NeighborList:
    """Flat neighbor entries ``i -> j`` sorted by ``i``.

    ``disp[e] = positions[j] + shift[e] @ cell - positions[i]`` and
    ``dist[e] = |disp[e]|``.
    """

    cutoff: float
    n_atoms: int
    i: np.ndarray
    j: np.ndarray
    shift: np.ndarray
    disp: np.ndarray
    dist: np.ndarray

    def __len__(self):
        return len(self.i)

    @property
    def offsets(self) -> np.ndarray:
        """Start index of each atom's block of entries (length ``n_atoms + 1``)."""
        counts = np.bincount(self.i, minlength=self.n_atoms)
        return np.concatenate([[0], np.cumsum(counts)])

    def entries(self, atom: int) -> list[tuple[int, tuple[int, int, int], np.ndarray, float]]:
        lo, hi = self.offsets[atom], self.offsets[atom + 1]
        return [
            (int(self.j[e]), tuple(int(s) for s in self.shift[e]), self.disp[e], float(self.dist[e]))
            for e in range(lo, hi)
        ]

    def __iter__(self) -> Iterator[tuple[int, int, np.ndarray, np.ndarray, float]]:
        for e in range(len(self)):
            yield int(self.i[e]), int(self.j[e]), self.shift[e], self.disp[e], float(self.dist[e])


def triplet_entries(nl: NeighborList) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs ``(e1, e2)``, ``e1 < e2``, of entries sharing a central atom."""
    offs = nl.offsets
    first, second = [], []
    for atom in range(nl.n_atoms):
        lo, hi = offs[atom], offs[atom + 1]
        if hi - lo < 2:
            continue
        a, b = np.triu_indices(hi - lo, 1)
        first.append(a + lo)
        second.append(b + lo)
    if not first:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    return np.concatenate(first), np.concatenate(second)


def _image_shifts(config: Configuration, cutoff: float) -> np.ndarray:
    ranges = []
    heights = cell_heights(config.cell) if config.periodic else None
    for d in range(3):
        if config.pbc[d]:
            # +1 covers wrapped fractional differences in (-1, 1)
            n = math.ceil(cutoff / heights[d]) + 1
            ranges.append(np.arange(-n, n + 1))
        else:
            ranges.append(np.zeros(1, dtype=np.int64))
    grid = np.stack(np.meshgrid(*ranges, indexing="ij"), axis=-1)
    return grid.reshape(-1, 3).astype(np.int64)


def build_neighbor_list(config: Configuration, cutoff: float) -> NeighborList:
    """All pairs (including periodic images) closer than ``cutoff``.

    Images are enumerated explicitly, so cutoffs longer than half the cell
    (and self-images) are handled. Non-periodic directions get no images.

    Raises
    ------
    ValueError
        If ``cutoff`` is not positive.
    InvalidCellError
        If a periodic cell is degenerate.
    """
    if not cutoff > 0:
        raise ValueError(f"cutoff must be positive, got {cutoff}")
    n = len(config)
    pos = config.positions
    if config.periodic:
        cell = config.cell
        if abs(np.linalg.det(cell)) < DET_TOL:
            raise InvalidCellError("degenerate cell")
        frac = np.linalg.solve(cell.T, pos.T).T
        offset = np.zeros_like(frac)
        for d in range(3):
            if config.pbc[d]:
                offset[:, d] = np.floor(frac[:, d])
        offset = offset.astype(np.int64)
        wrapped = (frac - offset) @ cell
    else:
        cell = np.zeros((3, 3))
        offset = np.zeros((n, 3), dtype=np.int64)
        wrapped = pos

    shifts = _image_shifts(config, cutoff)
    image_vec = shifts @ cell  # (S, 3)
    # disp[i, j, s] in wrapped coordinates
    base = wrapped[None, :, :] - wrapped[:, None, :]
    disp = base[:, :, None, :] + image_vec[None, None, :, :]
    dist = np.sqrt(np.einsum("ijsk,ijsk->ijs", disp, disp))
    zero_shift = np.all(shifts == 0, axis=1)
    mask = dist <= cutoff
    idx = np.arange(n)
    mask[idx, idx, :] &= ~zero_shift[None, :]
    ii, jj, ss = np.nonzero(mask)
    # translate wrapped-frame shifts back to the stored (unwrapped) positions
    true_shift = shifts[ss] - offset[jj] + offset[ii]
    true_disp = pos[jj] + true_shift @ cell - pos[ii]
    true_dist = np.linalg.norm(true_disp, axis=1)
    return NeighborList(
        cutoff=float(cutoff),
        n_atoms=n,
        i=_frozen(ii.astype(np.int64)),
        j=_frozen(jj.astype(np.int64)),
        shift=_frozen(true_shift.astype(np.int64)),
        disp=_frozen(true_disp),
        dist=_frozen(true_dist),
    )


# --- extended XYZ -----------------------------------------------------------

def _parse_bool(tok: str, lineno: int) -> bool:
    t = tok.strip().upper()
    if t in ("T", "TRUE", "1"):
        return True
    if t in ("F", "FALSE", "0"):
        return False
    raise XYZParseError(f"bad boolean {tok!r}", lineno)


def _parse_float(tok: str, lineno: int) -> float:
    try:
        val = float(tok)
    except ValueError:
        raise XYZParseError(f"malformed float {tok!r}", lineno) from None
    if not math.isfinite(val):
        raise XYZParseError(f"non-finite value {tok!r}", lineno)
    return val


def _parse_comment(line: str, lineno: int) -> dict[str, str]:
    try:
        tokens = shlex.split(line)
    except ValueError as exc:
        raise XYZParseError(f"bad comment line ({exc})", lineno) from None
    props = {}
    for tok in tokens:
        key, sep, value = tok.partition("=")
        props[key] = value if sep else "T"
    return props


def read_xyz(text: str) -> list[Configuration]:
    """Parse extended-XYZ frames.

    ``Lattice`` and ``pbc`` comment keys populate the cell; every other key is
    kept verbatim in ``Configuration.info``.
    """
    lines = text.splitlines()
    frames = []
    pos = 0
    while pos < len(lines):
        if not lines[pos].strip():
            pos += 1
            continue
        count_line = pos + 1
        try:
            n = int(lines[pos].strip())
        except ValueError:
            raise XYZParseError(f"expected atom count, got {lines[pos]!r}", count_line) from None
        if n < 1:
            raise XYZParseError("atom count must be positive", count_line)
        if pos + 1 >= len(lines):
            raise XYZParseError("missing comment line", count_line + 1)
        props = _parse_comment(lines[pos + 1], pos + 2)
        cell = None
        if "Lattice" in props:
            vals = props.pop("Lattice").split()
            if len(vals) != 9:
                raise XYZParseError("Lattice needs 9 numbers", pos + 2)
            cell = np.array([_parse_float(v, pos + 2) for v in vals]).reshape(3, 3)
        if "pbc" in props:
            flags = props.pop("pbc").split()
            if len(flags) != 3:
                raise XYZParseError("pbc needs 3 flags", pos + 2)
            pbc = tuple(_parse_bool(f, pos + 2) for f in flags)
        else:
            pbc = (True, True, True) if cell is not None else (False, False, False)
        species, coords = [], []
        for k in range(n):
            lineno = pos + 3 + k
            if pos + 2 + k >= len(lines):
                raise XYZParseError(f"expected {n} atoms, found {k}", lineno)
            parts = lines[pos + 2 + k].split()
            if len(parts) < 4:
                if not parts or parts[0].isdigit():
                    raise XYZParseError(f"expected {n} atoms, found {k}", lineno)
                raise XYZParseError("atom line needs symbol and 3 coordinates", lineno)
            sym = parts[0]
            if sym not in ATOMIC_NUMBERS:
                raise XYZParseError(f"unknown element {sym!r}", lineno)
            species.append(ATOMIC_NUMBERS[sym])
            coords.append([_parse_float(v, lineno) for v in parts[1:4]])
        try:
            frames.append(Configuration(species, coords, cell, pbc, props))
        except ValueError as exc:
            raise XYZParseError(str(exc), count_line) from None
        pos += 2 + n
    return frames


def _quote(value: str) -> str:
    if value == "" or any(c.isspace() for c in value) or '"' in value:
        return '"' + value.replace('"', '\\"') + '"'
    return value


def write_xyz(configs: Sequence[Configuration], extra: Sequence[Mapping[str, str]] | None = None) -> str:
    """Serialize configurations to extended XYZ (round-trips bit-exactly).

    ``extra`` optionally adds per-frame properties on top of each ``info``.
    """
    out = []
    for idx, conf in enumerate(configs):
        props = dict(conf.info)
        if extra is not None:
            props.update(extra[idx])
        head = []
        if conf.cell is not None:
            head.append('Lattice="' + " ".join(repr(float(v)) for v in conf.cell.ravel()) + '"')
        head.append('pbc="' + " ".join("T" if p else "F" for p in conf.pbc) + '"')
        for key, value in props.items():
            if key in ("Lattice", "pbc"):
                continue
            head.append(f"{key}={_quote(str(value))}")
        out.append(str(len(conf)))
        out.append(" ".join(head))
        for sym, xyz in zip(conf.symbols, conf.positions):
            out.append(f"{sym} " + " ".join(repr(float(v)) for v in xyz))
    return "\n".join(out) + ("\n" if out else "")
