import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import central_difference, random_cluster, random_periodic, random_rotation, rel_err
from wsnip.atoms import Configuration
from wsnip.net import ssp
from wsnip.representation import (DEFAULT_CUTOFF, DescriptorSpec, MessagePassingSpec, RepresentationSpec, SpeciesError,
                                  collate, compute_descriptors, descriptor_gradients, featurize,
                                  init_message_passing, make_representation, message_passing_forward)


def taper(r, rc):
    return 0.5 * (math.cos(math.pi * r / rc) + 1) if r <= rc else 0.0


def brute_descriptors(spec: DescriptorSpec, config: Configuration, reach: int = 2) -> np.ndarray:
    """Triple loop over atoms and explicit images, one scalar at a time."""
    cell = config.cell if config.cell is not None else np.zeros((3, 3))
    ranges = [range(-reach, reach + 1) if f else range(1) for f in config.pbc]
    S = len(spec.species)
    pairs = [(a, b) for a in range(S) for b in range(a, S)]
    R = len(spec.radial)
    G = np.zeros((len(config), spec.dim))
    for i in range(len(config)):
        nb = []
        for shift in itertools.product(*ranges):
            for j in range(len(config)):
                if j == i and not any(shift):
                    continue
                d = config.positions[j] + np.asarray(shift, dtype=float) @ cell - config.positions[i]
                r = float(np.linalg.norm(d))
                if r <= spec.cutoff:
                    nb.append((d, r, spec.species.index(int(config.species[j]))))
        for d, r, sj in nb:
            for t, (eta, rs) in enumerate(spec.radial):
                G[i, sj * R + t] += math.exp(-eta * (r - rs) ** 2) * taper(r, spec.cutoff)
        for (d1, r1, s1), (d2, r2, s2) in itertools.combinations(nb, 2):
            cos = float(d1 @ d2) / (r1 * r2)
            col0 = R * S + pairs.index((min(s1, s2), max(s1, s2))) * len(spec.angular)
            for t, (zeta, lam, eta) in enumerate(spec.angular):
                G[i, col0 + t] += (2 ** (1 - zeta) * (1 + lam * cos) ** zeta * math.exp(-eta * (r1 ** 2 + r2 ** 2))
                                   * taper(r1, spec.cutoff) * taper(r2, spec.cutoff))
    return G


def mp_reference(spec: MessagePassingSpec, P, config: Configuration) -> np.ndarray:
    """Per-atom, per-neighbor loops of the message-passing update (clusters only)."""
    sidx = [spec.species.index(int(z)) for z in config.species]
    h = np.array([P["embed"][s] for s in sidx])
    n = len(config)
    for l in range(spec.layers):
        new = np.zeros_like(h)
        for i in range(n):
            m = np.zeros(spec.hidden)
            for j in range(n):
                r = float(np.linalg.norm(config.positions[j] - config.positions[i]))
                if j == i or r > spec.cutoff:
                    continue
                fc = taper(r, spec.cutoff)
                e = np.array([math.exp(-spec.gamma * (r - c) ** 2) * fc for c in spec.centers])
                w = e @ P[f"filter{l}"]
                a = ssp(h[i] @ P[f"A{l}"] + (h[j] * w) @ P[f"B{l}"] + P[f"b1{l}"])
                m += fc * (a @ P[f"W2{l}"] + P[f"b2{l}"])
            u = ssp(np.concatenate([h[i], m]) @ P[f"U1{l}"] + P[f"c1{l}"])
            new[i] = h[i] + u @ P[f"U2{l}"] + P[f"c2{l}"]
        h = new
    return h


def two_species_spec():
    return DescriptorSpec(((2.0, 1.0), (0.5, 2.5)), ((1.0, 1.0, 0.3), (2.0, -1.0, 0.1)), 3.5, (14, 8))


class TestDescriptorExamples:
    def test_dim(self):
        spec = DescriptorSpec.default()
        assert spec.dim == 8 + 4
        assert two_species_spec().dim == 2 * 2 + 2 * 3
        assert spec.cutoff == pytest.approx(DEFAULT_CUTOFF)
        with pytest.raises(ValueError):
            DescriptorSpec((), (), 3.0)

    def test_isolated_atom(self):
        G = compute_descriptors(DescriptorSpec.default(), Configuration([14], [[0, 0, 0]]))
        assert G.shape == (1, 12) and np.all(G == 0)

    def test_dimer_closed_form(self):
        eta, rs, rc, r = 1.3, 1.7, 3.0, 2.2
        spec = DescriptorSpec(((eta, rs),), (), rc)
        G = compute_descriptors(spec, Configuration([14, 14], [[0, 0, 0], [r, 0, 0]]))
        expect = math.exp(-eta * (r - rs) ** 2) * 0.5 * (math.cos(math.pi * r / rc) + 1)
        assert np.allclose(G, expect, atol=1e-15)

    def test_brute_force_five_atom(self):
        c = random_cluster(np.random.default_rng(0), 5, box=3.0, min_dist=1.2)
        spec = DescriptorSpec.default()
        assert np.allclose(compute_descriptors(spec, c), brute_descriptors(spec, c), rtol=0, atol=1e-10)

    def test_unknown_species(self):
        with pytest.raises(SpeciesError):
            compute_descriptors(DescriptorSpec.default(), Configuration([6], [[0, 0, 0]]))

    def test_spec_round_trip(self):
        spec = RepresentationSpec("message_passing", descriptor=two_species_spec(),
                                  message_passing=MessagePassingSpec(2, 8, 5, 3.0, (14, 8)))
        assert RepresentationSpec.from_dict(spec.to_dict()) == spec


class TestDescriptorProperties:
    def test_brute_force_all_small(self):
        rng = np.random.default_rng(1)
        spec, spec2 = DescriptorSpec.default(), two_species_spec()
        for k in range(40):
            n = int(rng.integers(1, 9))
            if k % 2:
                c = random_periodic(rng, n, (True, True, bool(k % 3)), wrapped=True)
            else:
                c = random_cluster(rng, n, box=3.0, min_dist=0.9)
            assert np.allclose(compute_descriptors(spec, c), brute_descriptors(spec, c, reach=3), atol=1e-10)
            mixed = c.replace(species=rng.choice([14, 8], n))
            assert np.allclose(compute_descriptors(spec2, mixed), brute_descriptors(spec2, mixed, reach=3),
                               atol=1e-10)

    def test_smooth_at_cutoff(self):
        spec = DescriptorSpec.default()
        rc = spec.cutoff
        for eps in (1e-3, 1e-4, 1e-5):
            a = compute_descriptors(spec, Configuration([14, 14], [[0, 0, 0], [rc - eps, 0, 0]]))
            b = compute_descriptors(spec, Configuration([14, 14], [[0, 0, 0], [rc + eps, 0, 0]]))
            assert np.abs(a - b).max() <= 10 * eps


class TestDescriptorGradients:
    def _fd(self, spec, c):
        pos = c.positions.copy()
        J = descriptor_gradients(spec, c)
        n = len(c)
        fd = np.zeros_like(J)
        for a in range(n):
            for x in range(3):
                old = pos[a, x]
                pos[a, x] = old + 1e-5
                gp = compute_descriptors(spec, c.replace(positions=pos))
                pos[a, x] = old - 1e-5
                gm = compute_descriptors(spec, c.replace(positions=pos))
                pos[a, x] = old
                fd[:, :, a, x] = (gp - gm) / 2e-5
        return J, fd

    def test_single_atom_empty(self):
        J = descriptor_gradients(DescriptorSpec.default(), Configuration([14], [[0, 0, 0]]))
        assert J.shape == (1, 12, 1, 3) and not J.any()

    def test_dimer_radial(self):
        eta, rs, rc, r = 1.3, 1.7, 3.0, 2.2
        spec = DescriptorSpec(((eta, rs),), (), rc)
        J = descriptor_gradients(spec, Configuration([14, 14], [[0, 0, 0], [r, 0, 0]]))
        g = math.exp(-eta * (r - rs) ** 2)
        fc = 0.5 * (math.cos(math.pi * r / rc) + 1)
        dfc = -0.5 * math.pi / rc * math.sin(math.pi * r / rc)
        dG = g * dfc - 2 * eta * (r - rs) * g * fc
        assert J[0, 0, 1, 0] == pytest.approx(dG, abs=1e-14)
        assert J[0, 0, 0, 0] == pytest.approx(-dG, abs=1e-14)
        assert J[1, 0, 0, 0] == pytest.approx(-dG, abs=1e-14)

    def test_angular_cluster(self):
        c = random_cluster(np.random.default_rng(2), 4, box=2.5, min_dist=1.2)
        J, fd = self._fd(DescriptorSpec.default(), c)
        assert rel_err(J, fd) <= 1e-6

    def test_periodic_two_species(self):
        c = random_periodic(np.random.default_rng(3), 3, (True,) * 3)
        c = c.replace(species=[14, 8, 8], cell=c.cell * 1.3, positions=c.positions * 1.3)
        J, fd = self._fd(two_species_spec(), c)
        assert rel_err(J, fd) <= 1e-6


def mp_spec(**kw):
    base = dict(layers=2, hidden=6, n_rbf=5, cutoff=3.5, species=(14, 8))
    base.update(kw)
    return MessagePassingSpec(**base)


class TestMessagePassing:
    def test_zero_weights_give_embedding(self):
        spec = mp_spec(layers=1)
        P = {k: np.zeros_like(v) for k, v in init_message_passing(spec, np.random.default_rng(0)).items()}
        P["embed"] = np.random.default_rng(1).normal(size=P["embed"].shape)
        c = Configuration([14, 8, 14], [[0, 0, 0], [1.5, 0, 0], [0, 1.5, 0]])
        h = message_passing_forward(spec, P, c)
        assert np.array_equal(h, P["embed"][[0, 1, 0]])

    def test_path_graph_by_hand(self):
        # 0 -- 1 -- 2 with 0/2 beyond the cutoff; 2-dim features, one Gaussian
        spec = MessagePassingSpec(layers=1, hidden=2, n_rbf=1, cutoff=3.0, species=(14,))
        P = {
            "embed": np.array([[0.5, -0.25]]),
            "filter0": np.array([[1.0, 2.0]]),
            "A0": np.array([[1.0, 0.0], [0.0, 1.0]]),
            "B0": np.array([[0.5, -0.5], [0.25, 1.0]]),
            "b10": np.array([0.1, 0.0]),
            "W20": np.array([[1.0, 1.0], [0.0, -1.0]]),
            "b20": np.array([0.0, 0.2]),
            "U10": np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.0], [0.0, 0.5]]),
            "c10": np.array([0.0, 0.0]),
            "U20": np.array([[1.0, 0.0], [0.0, 1.0]]),
            "c20": np.array([0.0, 0.1]),
        }
        r = 2.0
        c = Configuration([14] * 3, [[0, 0, 0], [r, 0, 0], [2 * r, 0, 0]])
        h0 = np.array([0.5, -0.25])
        fc = 0.5 * (math.cos(math.pi * r / 3.0) + 1)  # = 0.25
        e = math.exp(-(1 / 9.0) * r * r) * fc  # one center at 0, gamma = 1 / cutoff^2
        w = e * np.array([1.0, 2.0])
        x = h0 * w
        z = np.array([h0[0] + 0.5 * x[0] + 0.25 * x[1] + 0.1, h0[1] - 0.5 * x[0] + x[1]])
        a = np.log(0.5 * np.exp(z) + 0.5)
        msg = fc * np.array([a[0], a[0] - a[1] + 0.2])
        out = []
        for k in (1, 2, 1):  # ends have one neighbor, the middle two
            m = k * msg
            u = np.log(0.5 * np.exp(h0 + 0.5 * m) + 0.5)
            out.append(h0 + u + np.array([0.0, 0.1]))
        assert fc == pytest.approx(0.25)
        assert np.allclose(message_passing_forward(spec, P, c), np.array(out), atol=1e-14)

    def test_loop_reference(self):
        rng = np.random.default_rng(4)
        spec = mp_spec(layers=3)
        P = init_message_passing(spec, rng)
        P = {k: v + 0.1 * rng.normal(size=v.shape) for k, v in P.items()}
        for n in (2, 5, 8):
            c = random_cluster(rng, n, box=3.0, min_dist=1.0, species=(14, 8))
            assert np.allclose(message_passing_forward(spec, P, c), mp_reference(spec, P, c), atol=1e-12)


def rep_forward(spec, rep, config):
    return rep.forward(collate([featurize(config, spec)]))


def make_backend(name):
    spec = RepresentationSpec(name, descriptor=two_species_spec(), message_passing=mp_spec(), depth=2, width=8)
    return spec, make_representation(spec, np.random.default_rng(5))


both = pytest.mark.parametrize("name", ["descriptor", "message_passing"])


class TestInvariance:
    @both
    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**31))
    def test_rigid_motion_and_permutation(self, name, seed):
        spec, rep = make_backend(name)
        rng = np.random.default_rng(seed)
        c = random_cluster(rng, 6, box=3.0, min_dist=1.0, species=(14, 8))
        h = rep_forward(spec, rep, c)
        q = random_rotation(rng)
        moved = c.replace(positions=c.positions @ q.T + rng.normal(0, 5, 3))
        assert np.abs(rep_forward(spec, rep, moved) - h).max() <= 1e-9
        perm = rng.permutation(6)
        shuffled = c.replace(species=c.species[perm], positions=c.positions[perm])
        assert np.abs(rep_forward(spec, rep, shuffled) - h[perm]).max() <= 1e-9

    @both
    def test_periodic_translation(self, name):
        spec, rep = make_backend(name)
        c = random_periodic(np.random.default_rng(6), 4, (True,) * 3)
        c = c.replace(cell=c.cell * 1.2, positions=c.positions * 1.2)
        moved = c.replace(positions=c.positions + np.array([0.3, -7.1, 2.2]))
        assert np.abs(rep_forward(spec, rep, moved) - rep_forward(spec, rep, c)).max() <= 1e-9

    @both
    def test_smooth_across_cutoff(self, name):
        spec, rep = make_backend(name)
        rc = spec.cutoff
        base = [[0, 0, 0], [1.4, 0, 0]]
        deltas = []
        for eps in (1e-2, 1e-3, 1e-4):
            inside = Configuration([14, 8, 14], base + [[0, 0, rc - eps]])
            outside = Configuration([14, 8, 14], base + [[0, 0, rc + eps]])
            deltas.append(np.abs(rep_forward(spec, rep, inside) - rep_forward(spec, rep, outside)).max())
            assert deltas[-1] <= 10 * eps
        assert deltas[2] < deltas[0]


class TestParameterGradients:
    @both
    def test_finite_differences(self, name):
        spec, rep = make_backend(name)
        rng = np.random.default_rng(7)
        graphs = [featurize(random_cluster(rng, n, box=3.0, min_dist=1.0, species=(14, 8)), spec) for n in (3, 5)]
        batch = collate(graphs)
        if spec.backend == "descriptor":
            rep.fit_standardization(graphs)
        weights = rng.normal(size=(batch.total_atoms, spec.feature_dim))
        rep.zero_grad()
        rep.forward(batch)
        rep.backward(weights)
        grads = {k: g.copy() for k, g in rep.named_grads()}
        for name, p in rep.named_parameters():
            fd = central_difference(lambda: float(np.sum(rep.forward(batch) * weights)), p, 1e-6)
            assert rel_err(grads[name], fd) <= 1e-4, name
