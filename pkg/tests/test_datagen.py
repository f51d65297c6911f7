import json

import numpy as np
import pytest
from scipy.spatial.distance import pdist

from wsnip.atoms import Configuration
from wsnip.datagen import (BULK_TIERS, DatasetSpec, SamplerSpec, SplitSpec, build_dataset, class_counts,
                           dimer_equilibrium_distance, lattice_config, load_dataset, load_sealed, make_splits,
                           sample_configs)
from wsnip.eip import default_eip_set, default_oracle


class TestSamplers:
    def test_ideal_diamond(self):
        (c,) = sample_configs(SamplerSpec("perturbed_lattice", 1, sigma_disp=0.0))
        ideal = 5.431 * np.array([[0, 0, 0], [0, 0.5, 0.5], [0.5, 0, 0.5], [0.5, 0.5, 0],
                                  [0.25, 0.25, 0.25], [0.25, 0.75, 0.75], [0.75, 0.25, 0.75], [0.75, 0.75, 0.25]])
        assert len(c) == 8 and c.pbc == (True, True, True)
        assert np.array_equal(c.cell, np.eye(3) * 5.431)
        key = lambda p: sorted(map(tuple, np.round(p, 12)))
        assert key(c.positions) == key(ideal)

    def test_dimers_only(self):
        cs = sample_configs(SamplerSpec("random_cluster", 20, cluster_sizes=(2, 2)))
        assert all(len(c) == 2 and c.pbc == (False, False, False) for c in cs)

    def test_cluster_min_distance(self):
        bond = dimer_equilibrium_distance()
        for c in sample_configs(SamplerSpec("random_cluster", 100, seed=3)):
            assert 2 <= len(c) <= 10
            assert pdist(c.positions).min() >= 0.5 * bond

    def test_deterministic(self):
        for kind in ("perturbed_lattice", "random_cluster"):
            spec = SamplerSpec(kind, 500 if kind == "perturbed_lattice" else 100, seed=11, sigma_disp=0.1)
            a, b = sample_configs(spec), sample_configs(spec)
            assert all(np.array_equal(x.positions, y.positions) for x, y in zip(a, b))

    def test_dimer_scan(self):
        bond = dimer_equilibrium_distance()
        cs = sample_configs(SamplerSpec("dimer_scan", 5))
        r = [c.positions[1, 0] for c in cs]
        assert r[0] == pytest.approx(0.85 * bond) and r[-1] == pytest.approx(1.6 * bond)

    def test_equilibrium_distance_is_minimum(self):
        oracle = default_oracle()
        r0 = dimer_equilibrium_distance(oracle)
        e = lambda r: oracle.energy(Configuration([14, 14], [[0, 0, 0], [r, 0, 0]]))
        assert e(r0) < e(r0 - 1e-3) and e(r0) < e(r0 + 1e-3)

    def test_bad_specs(self):
        with pytest.raises(ValueError):
            SamplerSpec("perturbed_lattice", 1, sigma_disp=-0.1)
        with pytest.raises(ValueError):
            SamplerSpec("random_cluster", -1)
        with pytest.raises(ValueError):
            SamplerSpec("random_cluster", 1, cluster_sizes=(1, 4))
        with pytest.raises(ValueError):
            SamplerSpec("amorphous", 1)

    def test_lattice_fcc(self):
        assert len(lattice_config("fcc", 4.0, (2, 1, 1))) == 8


class TestBuildDataset:
    configs = sample_configs(SamplerSpec("random_cluster", 12, seed=1))

    def test_m_bounds(self):
        eips = default_eip_set()
        with pytest.raises(ValueError):
            build_dataset(self.configs, eips, 0, 0)
        with pytest.raises(ValueError):
            build_dataset(self.configs, eips, 13, 0)

    def test_all_labeled(self):
        ds, sealed = build_dataset(self.configs, default_eip_set(), 12, 0)
        assert ds.m == 12 and len(ds.pool_index) == 0
        assert np.array_equal(ds.dft_energy, sealed)

    def test_subset(self):
        ds, sealed = build_dataset(self.configs, default_eip_set(), 5, 3)
        assert ds.m == 5 and len(ds.pool_index) == 7
        assert np.array_equal(ds.dft_energy, sealed[ds.dft_index])
        assert ds.eip_table.shape == (12, 4) and np.all(np.isfinite(ds.eip_table))


class TestSplits:
    def test_sizes(self):
        for s in make_splits(100):
            assert (len(s.train), len(s.val), len(s.test)) == (64, 16, 20)

    def test_partition(self):
        for s in make_splits(37):
            allidx = np.concatenate([s.train, s.val, s.test])
            assert np.array_equal(np.sort(allidx), np.arange(37))

    def test_seeds_differ(self):
        tests = [tuple(s.test) for s in make_splits(100)]
        assert len(set(tests)) == 3
        other = make_splits(100, SplitSpec(seed=1))
        assert tuple(other[0].test) != tests[0]

    def test_too_few(self):
        with pytest.raises(ValueError):
            make_splits(4)

    def test_bad_fraction(self):
        with pytest.raises(ValueError):
            SplitSpec(test_fraction=1.0)


class TestDefaultDataset:
    def test_counts(self, default_data):
        ds, sealed, _ = default_data
        assert ds.n == 2000 and ds.m == 100 and len(ds.pool_index) == 1900
        assert ds.manifest["counts"] == {"bulk": 1400, "cluster": 500, "dimer": 100}
        assert np.all(np.isfinite(ds.eip_table)) and np.all(np.isfinite(sealed))

    def test_bulk_tiers(self, default_data):
        ds, _, _ = default_data
        tiers = [c.info["sigma_disp"] for c in ds.configs if c.info.get("kind") == "bulk"]
        assert sorted(set(tiers)) == sorted(repr(t) for t in BULK_TIERS)

    def test_best_eip_diversity(self, default_data):
        ds, sealed, _ = default_data
        counts = class_counts(ds.eip_table, sealed, ds.n_atoms, 0.1)
        assert counts.tolist() == ds.manifest["best_eip_class_counts"]
        assert np.sum(counts[:-1] >= 0.1 * ds.n) >= 2

    def test_round_trip(self, default_data):
        ds, sealed, out = default_data
        back = load_dataset(out)
        assert np.array_equal(back.eip_table, ds.eip_table) and np.array_equal(back.dft_energy, ds.dft_energy)
        assert all(np.array_equal(a.positions, b.positions) for a, b in zip(ds.configs, back.configs))
        assert [s.to_dict() for s in back.splits] == [s.to_dict() for s in ds.splits]
        assert np.array_equal(load_sealed(out), sealed)
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["eip_set_hash"] == default_eip_set().content_hash()

    def test_spec_round_trip(self, default_data):
        ds, _, _ = default_data
        spec = DatasetSpec.from_dict(ds.manifest["spec"])
        assert spec.to_dict() == ds.manifest["spec"] and spec.count == 2000

    def test_missing_sealed(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_sealed(tmp_path)
