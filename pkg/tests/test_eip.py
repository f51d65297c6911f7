import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import central_difference, random_cluster, random_rotation, rel_err
from wsnip.atoms import Configuration
from wsnip.datagen import lattice_config
from wsnip.eip import (CoincidentAtomsError, EipEvaluationError, EipModel, EipSet, default_eip_set, default_oracle,
                       eip_energy, eip_forces, label_with_eips, load_eip_set, oracle_energy)

ZOO = default_eip_set()
ORACLE = default_oracle()


def direct_energy(model: EipModel, config: Configuration, reach: int = 2) -> float:
    """Scalar direct sum over all image pairs and triplets, no neighbor list."""
    p = model.params
    cell = config.cell if config.cell is not None else np.zeros((3, 3))
    ranges = [range(-reach, reach + 1) if f else range(1) for f in config.pbc]
    images = []  # (vector, atom) for every periodic image of every atom
    for shift in itertools.product(*ranges):
        for j, pos in enumerate(config.positions):
            images.append((pos + np.asarray(shift, dtype=float) @ cell, j, any(shift)))

    def neighbors(i):
        out = []
        for vec, j, shifted in images:
            if j == i and not shifted:
                continue
            d = vec - config.positions[i]
            r = math.sqrt(float(d @ d))
            if r <= model.cutoff:
                out.append((d, r))
        return out

    e = 0.0
    for i in range(len(config)):
        nb = neighbors(i)
        for d, r in nb:
            if model.kind == "lennard_jones":
                phi = 4 * p["epsilon"] * ((p["sigma"] / r) ** 12 - (p["sigma"] / r) ** 6)
                e += 0.5 * phi * 0.5 * (math.cos(math.pi * r / model.cutoff) + 1)
            elif model.kind == "morse":
                x = math.exp(-p["a"] * (r - p["r0"]))
                e += 0.5 * p["D"] * (x * x - 2 * x) * 0.5 * (math.cos(math.pi * r / model.cutoff) + 1)
            else:
                rc = p["a"] * p["sigma"]
                if r < rc:
                    s = p["sigma"] / r
                    e += 0.5 * p["A"] * p["epsilon"] * (p["B"] * s ** p["p"] - s ** p["q"]) * math.exp(
                        p["sigma"] / (r - rc))
        if model.kind != "stillinger_weber":
            continue
        rc = p["a"] * p["sigma"]
        close = [(d, r) for d, r in nb if r < rc]
        for (d1, r1), (d2, r2) in itertools.combinations(close, 2):
            cos = float(d1 @ d2) / (r1 * r2)
            e += p["lambda"] * p["epsilon"] * (cos - p["cos_theta0"]) ** 2 * math.exp(
                p["gamma"] * p["sigma"] / (r1 - rc)) * math.exp(p["gamma"] * p["sigma"] / (r2 - rc))
    return e


def dimer(r: float) -> Configuration:
    return Configuration([14, 14], [[0, 0, 0], [r, 0, 0]])


class TestZooFile:
    def test_constants(self):
        names = [m.name for m in ZOO]
        assert names == ["lj", "morse_short", "morse_long", "sw_perturbed"]
        assert ORACLE.weights == (1.0, 0.15)
        sw = ORACLE.terms[0].params
        # published SW silicon constants
        assert sw["A"] == 7.049556277 and sw["B"] == 0.6022245584 and sw["lambda"] == 21.0
        assert sw["gamma"] == 1.2 and sw["sigma"] == 2.0951 and sw["epsilon"] == 2.1683

    def test_json_round_trip(self):
        again = EipSet.from_json(ZOO.to_json())
        assert again.to_json() == ZOO.to_json() and again.content_hash() == ZOO.content_hash()

    def test_reserved_and_duplicates(self):
        lj = ZOO.models[0]
        with pytest.raises(ValueError):
            EipSet((lj, lj))
        with pytest.raises(ValueError):
            EipModel("x", "morse", {"D": 1, "a": 1}, 3.0)
        with pytest.raises(ValueError):
            EipModel("x", "morse", {"D": 1, "a": 1, "r0": 2}, 0.0)
        with pytest.raises(ValueError):
            EipModel("x", "morse", {"D": float("nan"), "a": 1, "r0": 2}, 3.0)

    def test_load_path(self, tmp_path):
        path = tmp_path / "zoo.json"
        path.write_text(json.dumps(json.loads(ZOO.to_json())[:2]))
        assert load_eip_set(path).names == ["lj", "morse_short"]


class TestEnergyExamples:
    def test_lj_dimer_minimum(self):
        m = EipModel("lj", "lennard_jones", {"epsilon": 1.0, "sigma": 1.0}, 10.0, taper=False)
        assert eip_energy(m, dimer(2 ** (1 / 6))) == pytest.approx(-1.0, abs=1e-12)

    def test_morse_dimer_minimum(self):
        m = EipModel("m", "morse", {"D": 1.0, "a": 1.0, "r0": 2.0}, 10.0, taper=False)
        assert eip_energy(m, dimer(2.0)) == pytest.approx(-1.0, abs=1e-12)

    def test_lj_trimer(self):
        m = EipModel("lj", "lennard_jones", {"epsilon": 1.0, "sigma": 1.0}, 10.0, taper=False)
        r = 2 ** (1 / 6)
        c = Configuration([14] * 3, [[0, 0, 0], [r, 0, 0], [r / 2, r * math.sqrt(3) / 2, 0]])
        assert eip_energy(m, c) == pytest.approx(-3.0, abs=1e-12)

    def test_pair_sum_with_taper(self):
        m = EipModel("lj", "lennard_jones", {"epsilon": 1.0, "sigma": 1.0}, 2.0)
        r = 1.5
        phi = 4 * ((1 / r) ** 12 - (1 / r) ** 6) * 0.5 * (math.cos(math.pi * r / 2.0) + 1)
        assert eip_energy(m, dimer(r)) == pytest.approx(phi, abs=1e-14)

    def test_sw_diamond_direct_sum(self):
        sw = ORACLE.terms[0]
        c = lattice_config("diamond", 5.431, (1, 1, 1))
        ref = direct_energy(sw, c)
        assert eip_energy(sw, c) == pytest.approx(ref, abs=1e-10)
        # ideal tetrahedral angles: the three-body term vanishes and each atom sits at -2 epsilon
        assert ref / 8 == pytest.approx(-4.3366, abs=1e-3)

    def test_sw_perturbed_direct_sum(self):
        c = lattice_config("diamond", 5.431, (1, 1, 1))
        c = c.replace(positions=c.positions + np.random.default_rng(0).normal(0, 0.1, (8, 3)))
        for model in list(ZOO) + list(ORACLE.terms):
            assert eip_energy(model, c) == pytest.approx(direct_energy(model, c), abs=1e-9)

    def test_oracle_perturbed_cell(self):
        c = lattice_config("diamond", 5.431, (1, 1, 1))
        c = c.replace(positions=c.positions + np.random.default_rng(1).normal(0, 0.1, (8, 3)))
        ref = sum(w * direct_energy(t, c) for t, w in zip(ORACLE.terms, ORACLE.weights))
        assert oracle_energy(c) == pytest.approx(ref, abs=1e-9)

    def test_coincident_atoms(self):
        with pytest.raises(CoincidentAtomsError):
            eip_energy(ZOO.models[0], Configuration([14, 14], [[0, 0, 0], [0, 0, 1e-10]]))

    def test_isolated_atom_zero(self):
        for m in ZOO:
            assert eip_energy(m, Configuration([14], [[0, 0, 0]])) == 0.0


class TestForces:
    def _fd_check(self, model, c, tol=1e-6):
        pos = c.positions.copy()
        f = lambda: eip_energy(model, c.replace(positions=pos))
        fd = -central_difference(f, pos, 1e-5)
        an = eip_forces(model, c)
        assert rel_err(an, fd) <= tol, (model.name, rel_err(an, fd))
        return an

    def test_finite_differences_50(self):
        rng = np.random.default_rng(2024)
        models = list(ZOO) + list(ORACLE.terms)
        for k in range(50):
            if k % 2:
                c = random_cluster(rng, int(rng.integers(3, 8)), box=4.0, min_dist=1.9)
            else:
                c = lattice_config("diamond", 5.431, (1, 1, 1))
                c = c.replace(positions=c.positions + rng.normal(0, 0.15, (8, 3)))
            for m in models:
                an = self._fd_check(m, c)
                assert np.allclose(an.sum(axis=0), 0.0, atol=1e-9)

    def test_sw_six_atom_cluster(self):
        c = random_cluster(np.random.default_rng(6), 6, box=3.5, min_dist=2.0)
        self._fd_check(ZOO.models[3], c)

    def test_oracle_forces(self):
        c = random_cluster(np.random.default_rng(8), 5, box=4.0, min_dist=2.0)
        pos = c.positions.copy()
        fd = -central_difference(lambda: oracle_energy(c.replace(positions=pos)), pos, 1e-5)
        assert rel_err(ORACLE.forces(c), fd) <= 1e-6

    def test_dimer_minimum_zero_force(self):
        m = EipModel("m", "morse", {"D": 1.0, "a": 1.0, "r0": 2.0}, 10.0, taper=False)
        assert np.allclose(eip_forces(m, dimer(2.0)), 0.0, atol=1e-8)

    def test_stretched_dimer_attracts(self):
        m = EipModel("m", "morse", {"D": 1.0, "a": 1.0, "r0": 2.0}, 10.0, taper=False)
        f = eip_forces(m, dimer(2.5))
        assert f[0, 0] > 0 and f[1, 0] < 0
        assert f[0, 0] == pytest.approx(-f[1, 0], abs=1e-14)


class TestInvariances:
    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**31))
    def test_rotation_permutation_translation(self, seed):
        rng = np.random.default_rng(seed)
        c = random_cluster(rng, 6, box=4.0, min_dist=1.9)
        q = random_rotation(rng)
        perm = rng.permutation(len(c))
        rot = c.replace(positions=c.positions @ q.T + rng.normal(0, 3, 3))
        shuf = c.replace(positions=c.positions[perm])
        for m in ZOO:
            e = eip_energy(m, c)
            assert abs(eip_energy(m, rot) - e) <= 1e-9
            assert abs(eip_energy(m, shuf) - e) <= 1e-10
        assert abs(oracle_energy(rot) - oracle_energy(c)) <= 1e-9

    def test_supercell_extensive(self):
        rng = np.random.default_rng(5)
        c = lattice_config("diamond", 5.431, (1, 1, 1))
        c = c.replace(positions=c.positions + rng.normal(0, 0.1, (8, 3)))
        a1 = c.cell[0]
        sup = Configuration(np.concatenate([c.species] * 2), np.vstack([c.positions, c.positions + a1]),
                            np.vstack([2 * a1, c.cell[1:]]), (True,) * 3)
        for m in ZOO:
            assert eip_energy(m, sup) == pytest.approx(2 * eip_energy(m, c), abs=1e-8)

    @pytest.mark.parametrize("idx", range(4))
    def test_taper_continuity(self, idx):
        m = ZOO.models[idx]
        rc = m.cutoff if m.kind != "stillinger_weber" else m.params["a"] * m.params["sigma"]
        rs = rc + 1e-4 * (np.arange(-50, 50) + 0.5)
        e = np.array([eip_energy(m, dimer(r)) for r in rs])
        assert np.all(e[rs > rc] == 0.0)
        cross = int(np.searchsorted(rs, rc))
        assert abs(e[cross] - e[cross - 1]) <= 1e-8


class TestOracle:
    def test_dimer_scan_region_dependence(self):
        rs = np.linspace(2.0, 4.6, 50)
        oracle = np.array([oracle_energy(dimer(r)) for r in rs]) / 2
        bonding = oracle < 0
        assert bonding.any()
        agree = []
        for m in ZOO:
            curve = np.array([eip_energy(m, dimer(r)) for r in rs]) / 2
            diff = np.abs(curve - oracle)
            assert diff.max() > 0.01, m.name
            agree.append(diff[bonding].max() <= 0.1)
        assert any(agree)

    def test_deterministic(self):
        c = random_cluster(np.random.default_rng(9), 7)
        assert oracle_energy(c) == oracle_energy(c)


class TestLabelWithEips:
    def test_small(self):
        c = random_cluster(np.random.default_rng(0), 4)
        table = label_with_eips(ZOO.subset(["lj", "morse_long"]), [c])
        assert len(table) == 1 and set(table[0]) == {"lj", "morse_long"}

    def test_empty(self):
        assert label_with_eips(ZOO, []) == []

    def test_100_clusters(self):
        rng = np.random.default_rng(100)
        configs = [random_cluster(rng, int(rng.integers(2, 8))) for _ in range(100)]
        table = label_with_eips(ZOO, configs)
        for row, c in zip(table, configs):
            for m in ZOO:
                assert row[m.name] == eip_energy(m, c)

    def test_error_tagged(self):
        bad = Configuration([14, 14], [[0, 0, 0], [0, 0, 0]])
        with pytest.raises(EipEvaluationError) as exc:
            label_with_eips(ZOO, [random_cluster(np.random.default_rng(0), 3), bad])
        assert exc.value.index == 1 and exc.value.name == "lj"
