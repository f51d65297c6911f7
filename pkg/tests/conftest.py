"""Shared helpers and fixtures for the test suite."""

from __future__ import annotations

import itertools

import numpy as np
import pytest

from wsnip.atoms import Configuration
from wsnip.datagen import default_dataset_spec, generate, save_dataset
from wsnip.eip import default_eip_set
from wsnip.representation import DescriptorSpec, MessagePassingSpec, RepresentationSpec, featurize


def random_cell(rng: np.random.Generator, lo: float = 3.0, hi: float = 6.0) -> np.ndarray:
    """Right-handed, moderately skewed cell."""
    while True:
        cell = np.diag(rng.uniform(lo, hi, 3)) + rng.uniform(-0.8, 0.8, (3, 3)) * (1 - np.eye(3))
        if np.linalg.det(cell) > 1.0:
            return cell


def random_periodic(rng: np.random.Generator, n: int | None = None, pbc=None, wrapped: bool = False) -> Configuration:
    n = n or int(rng.integers(1, 17))
    cell = random_cell(rng)
    frac = rng.uniform(0, 1, (n, 3)) if wrapped else rng.uniform(-0.5, 1.5, (n, 3))
    pbc = pbc if pbc is not None else tuple(bool(b) for b in rng.integers(0, 2, 3))
    if not any(pbc):
        pbc = (True, False, True)
    return Configuration(np.full(n, 14), frac @ cell, cell, pbc)


def random_cluster(rng: np.random.Generator, n: int, box: float = 3.5, min_dist: float = 1.6,
                   species=(14,)) -> Configuration:
    pos: list[np.ndarray] = []
    while len(pos) < n:
        p = rng.uniform(0, box, 3)
        if all(np.linalg.norm(p - q) >= min_dist for q in pos):
            pos.append(p)
    return Configuration(rng.choice(species, n), np.array(pos))


def brute_neighbors(config: Configuration, cutoff: float, reach: int = 3) -> list[tuple]:
    """Sorted ``(i, j, shift, rounded distance)`` over every image with ``|shift|_inf <= reach``."""
    cell = config.cell if config.cell is not None else np.zeros((3, 3))
    ranges = [range(-reach, reach + 1) if p else range(1) for p in config.pbc]
    shifts = np.array(list(itertools.product(*ranges)), dtype=float)
    vecs = shifts @ cell
    pos = config.positions
    out = []
    for i in range(len(config)):
        for j in range(len(config)):
            d = np.linalg.norm(pos[j] + vecs - pos[i], axis=1)
            for s in np.flatnonzero(d <= cutoff):
                shift = tuple(int(v) for v in shifts[s])
                if i == j and not any(shift):
                    continue
                out.append((i, j, shift, round(float(d[s]), 9)))
    return sorted(out)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def central_difference(f, x: np.ndarray, h: float) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` by central differences (``x`` is restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-30))


GRAD_H = 1e-4
GRAD_TOL = 1e-4


def small_spec(backend: str) -> RepresentationSpec:
    """Two-species representation small enough for finite differences."""
    desc = DescriptorSpec(((2.0, 1.0), (0.5, 2.5)), ((1.0, 1.0, 0.3), (2.0, -1.0, 0.1)), 3.5, (14, 8))
    mp = MessagePassingSpec(layers=2, hidden=6, n_rbf=5, cutoff=3.5, species=(14, 8))
    return RepresentationSpec(backend, descriptor=desc, message_passing=mp, depth=2, width=8)


def small_graphs(spec, seed=0, sizes=(3, 4, 5, 3)):
    rng = np.random.default_rng(seed)
    return [featurize(random_cluster(rng, n, box=3.0, min_dist=1.0, species=(14, 8)), spec) for n in sizes]


def check_param_grads(model, loss_and_grad):
    """``loss_and_grad(output) -> (value, d value / d output)``; compares backprop with central differences."""
    model.zero_grad()
    value, g = loss_and_grad(model.forward_batch())
    model.backward(g)
    grads = {k: v.copy() for k, v in model.named_grads()}
    worst = 0.0
    for name, p in model.named_parameters():
        fd = central_difference(lambda: loss_and_grad(model.forward_batch())[0], p, GRAD_H)
        err = rel_err(grads[name], fd)
        worst = max(worst, err)
        assert err <= GRAD_TOL, (name, err)
    return worst


def bind(model, batch):
    model.forward_batch = lambda: model.forward(batch)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def default_data(tmp_path_factory):
    """The default 2000-configuration dataset, generated once and saved to disk."""
    ds, sealed = generate(default_dataset_spec(), default_eip_set())
    out = save_dataset(ds, sealed, tmp_path_factory.mktemp("default_data"))
    return ds, sealed, out


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
