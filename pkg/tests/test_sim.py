import numpy as np
import pytest

from lagcause import sim
from lagcause.graphs import GraphError, LaggedGraph
from lagcause.sim import (DensityError, MechanismSpec, NoiseSpec, PreconditionError,
                          RegimeSchedule, Segment, UnstableSystemError)


def chain_dataset(w=0.5, T=50_000, seed=1):
    g = LaggedGraph(2, 1, {(1, 0, 1)})
    mech = MechanismSpec("linear", [{"coefs": []}, {"coefs": [w]}])
    sched = sim.single_regime(g, mech, T)
    return sim.simulate(sched, NoiseSpec(), T, rng=np.random.default_rng(seed))


class TestSampleGraph:
    def test_zero_density_empty(self, rng):
        assert sim.sample_graph(10, 5, 0.0, rng).n_edges == 0

    def test_forced_self_loop(self, rng):
        g = sim.sample_graph(1, 1, 1.0, rng)
        assert g.edges == {(0, 0, 1)}

    def test_invalid_density(self, rng):
        with pytest.raises(DensityError):
            sim.sample_graph(10, 5, 51.0, rng)

    def test_monte_carlo_mean_edge_count(self, rng):
        # Binomial(500, 0.06): expectation 30 edges per draw.
        counts = [sim.sample_graph(10, 5, 3.0, rng).n_edges for _ in range(1000)]
        assert 28 <= np.mean(counts) <= 32

    def test_density_invariant_three_standard_errors(self, rng):
        p, L, e_in, n = 6, 3, 2.0, 1000
        degs = []
        for _ in range(n):
            g = sim.sample_graph(p, L, e_in, rng)
            degs.append(g.n_edges / p)
        prob = e_in / (p * L)
        se = np.sqrt(p * L * prob * (1 - prob) / (p * n))
        assert abs(np.mean(degs) - e_in) <= 3 * se

    def test_exact_sampler_fixed_degree(self, rng):
        for _ in range(50):
            g = sim.sample_graph_exact(6, 3, 3, rng)
            per_node = np.bincount([e[0] for e in g.edges], minlength=6)
            assert np.all(per_node == 3)

    def test_exact_sampler_fractional_expectation(self, rng):
        counts = [sim.sample_graph_exact(5, 2, 1.5, rng).n_edges for _ in range(800)]
        assert abs(np.mean(counts) - 7.5) < 0.5


class TestMechanisms:
    def test_zero_parent_linear_is_identity_on_noise(self, rng):
        g = LaggedGraph(1, 1, set())
        mech = sim.build_mechanisms(g, "linear", rng)
        sched = sim.single_regime(g, mech, 5000)
        ds = sim.simulate(sched, NoiseSpec(sigma2=1.0), 5000, rng=rng)
        # standardized iid gaussian: no autocorrelation
        r = np.corrcoef(ds.data[:-1, 0], ds.data[1:, 0])[0, 1]
        assert abs(r) < 0.05

    def test_chain_variance_closed_form(self):
        w = 0.5
        ds = chain_dataset(w=w)
        s0, s1 = ds.norm_stats[0][1], ds.norm_stats[1][1]
        assert s1**2 == pytest.approx(w**2 * s0**2 + 1.0, rel=0.05)

    def test_mlp_cat_input_width(self, rng):
        g = LaggedGraph(3, 2, {(0, 1, 1), (0, 2, 2)})
        mech = sim.build_mechanisms(g, "mlp_cat", rng)
        assert len(mech.nodes[0]["w1"]) == 3  # in-degree 2 + noise slot
        assert len(mech.nodes[1]["w1"]) == 1
        mech.validate_against(g)

    def test_linear_coefficient_count_invariant(self, rng):
        g = sim.sample_graph(5, 3, 2.0, rng)
        mech = sim.build_mechanisms(g, "linear", rng)
        for i in range(5):
            assert len(mech.nodes[i]["coefs"]) == len(g.parents(i))

    def test_linear_spectral_radius_capped(self, rng):
        # Dense self-reinforcing graphs would explode without the rescale.
        g = sim.sample_graph_exact(4, 2, 6, rng)
        mech = sim.build_mechanisms(g, "linear", rng)
        w = sim.linear_weight_graph(g, mech).to_weight_tensor()
        radius = sim._companion_radius(np.abs(w))
        assert radius <= sim.SPECTRAL_RADIUS_CAP + 1e-9

    def test_coefficient_range_before_rescale(self, rng):
        g = LaggedGraph(4, 2, {(0, 1, 1), (1, 2, 2), (2, 3, 1)})
        mech = sim.build_mechanisms(g, "linear", rng)
        for node in mech.nodes:
            for c in node["coefs"]:
                assert 0.3 <= abs(c) <= 0.9

    def test_unknown_form_rejected(self, rng):
        with pytest.raises(PreconditionError):
            sim.build_mechanisms(LaggedGraph(2, 1, set()), "cubic", rng)


class TestSimulate:
    def test_empty_graph_iid_columns(self):
        g = LaggedGraph(3, 2, set())
        mech = MechanismSpec("linear", [{"coefs": []}] * 3)
        sched = sim.single_regime(g, mech, 50_000)
        ds = sim.simulate(sched, NoiseSpec(), 50_000, rng=np.random.default_rng(3))
        for v in range(3):
            rho = np.corrcoef(ds.data[:-1, v], ds.data[1:, v])[0, 1]
            assert abs(rho) < 0.02

    def test_chain_lagged_correlation_closed_form(self):
        w = 0.5
        ds = chain_dataset(w=w)
        rho = np.corrcoef(ds.data[:-1, 0], ds.data[1:, 1])[0, 1]
        assert rho == pytest.approx(w / np.sqrt(w**2 + 1.0), abs=0.02)

    def test_short_series_precondition(self, rng):
        g = LaggedGraph(2, 3, set())
        mech = MechanismSpec("linear", [{"coefs": []}] * 2)
        with pytest.raises(PreconditionError):
            sim.simulate(sim.single_regime(g, mech, 3), NoiseSpec(), 3, rng=rng)

    def test_standardization_invariant(self, rng):
        g = sim.sample_graph(4, 2, 1.5, rng)
        mech = sim.build_mechanisms(g, "linear", rng)
        ds = sim.simulate(sim.single_regime(g, mech, 4000), NoiseSpec(), 4000, rng=rng)
        assert np.abs(ds.data.mean(axis=0)).max() < 1e-6
        assert np.abs(ds.data.std(axis=0) - 1).max() < 1e-6
        assert np.all(np.isfinite(ds.data))

    def test_unstable_system_names_segment(self, rng):
        g = LaggedGraph(1, 1, {(0, 0, 1)})
        mech = MechanismSpec("linear", [{"coefs": [1.6]}])  # hand-built, bypasses rescale
        with pytest.raises(UnstableSystemError, match="segment 0"):
            sim.simulate(sim.single_regime(g, mech, 2000), NoiseSpec(), 2000, rng=rng)

    def test_determinism_bit_identical(self):
        rng1 = np.random.default_rng(11)
        g = sim.sample_graph(3, 2, 1.5, rng1)
        mech = sim.build_mechanisms(g, "monotonic", rng1)
        sched = sim.single_regime(g, mech, 2000)
        a = sim.simulate(sched, NoiseSpec(), 2000, rng=np.random.default_rng(5))
        b = sim.simulate(sched, NoiseSpec(), 2000, rng=np.random.default_rng(5))
        assert np.array_equal(a.data, b.data)
        assert a.norm_stats == b.norm_stats

    def test_temporal_precedence_access_log(self, rng):
        g = sim.sample_graph(3, 2, 2.0, rng)
        mech = sim.build_mechanisms(g, "pl_mix", rng)
        sched = sim.sample_schedule(3, 2, 2.0, "monotonic", [100, 100],
                                    np.random.default_rng(1))
        sched = sim.add_latents(sched, 2, np.random.default_rng(2))
        _, log = sim.simulate(sched, NoiseSpec(), 200, burn_in=20,
                              rng=np.random.default_rng(3), instrument=True)
        assert log, "expected recorded reads"
        assert all(max_read < t for t, max_read in log)

    @pytest.mark.parametrize("form", ["linear", "monotonic", "pl_mix", "mlp_add", "mlp_cat"])
    def test_all_forms_simulate_finite(self, form, rng):
        g = sim.sample_graph_exact(4, 2, 2, rng)
        mech = sim.build_mechanisms(g, form, rng)
        ds = sim.simulate(sim.single_regime(g, mech, 3000), NoiseSpec(), 3000, rng=rng)
        assert np.all(np.isfinite(ds.data))

    @pytest.mark.parametrize("family", ["gaussian", "uniform", "laplace", "student_t", "mixed"])
    def test_noise_families_unit_variance(self, family, rng):
        spec = NoiseSpec(family=family)
        draws = sim._draw_noise(spec, 200_000, 4, rng)
        assert np.abs(draws.var(axis=0) - 1.0).max() < 0.1

    def test_hetero_variance_floor_and_range(self, rng):
        spec = NoiseSpec(variance_mode="hetero", var_range=(0.0, 10.0))
        draws = sim._draw_noise(spec, 100_000, 20, rng)
        v = draws.var(axis=0)
        assert v.min() >= 0.04
        assert v.max() <= 11.0

    def test_noise_spec_validation(self):
        with pytest.raises(PreconditionError):
            NoiseSpec(family="cauchy")
        with pytest.raises(PreconditionError):
            NoiseSpec(variance_mode="hetero", var_range=(5.0, 1.0))
        with pytest.raises(PreconditionError):
            NoiseSpec(student_dof=2.0)


class TestSchedulesAndLatents:
    def test_segment_lengths_must_cover_horizon(self, rng):
        g = sim.sample_graph(2, 1, 1.0, rng)
        mech = sim.build_mechanisms(g, "linear", rng)
        sched = RegimeSchedule([Segment(100, g, mech)])
        with pytest.raises(PreconditionError):
            sim.simulate(sched, NoiseSpec(), 200, rng=rng)

    def test_minimal_change_rewires_fraction(self):
        rng = np.random.default_rng(4)
        sched = sim.sample_schedule(6, 3, 3.0, "linear", [500, 500], rng,
                                    drift_mode="minimal_change", rewire_fraction=0.2)
        e0, e1 = sched.segments[0].graph.edges, sched.segments[1].graph.edges
        changed = len(e0 ^ e1)
        assert 0 < changed <= 2 * int(np.ceil(0.2 * len(e0))) + 1
        assert len(e1) == len(e0)

    def test_resample_keeps_unchanged_nodes(self):
        rng = np.random.default_rng(9)
        sched = sim.sample_schedule(8, 2, 2.0, "linear", [300, 300], rng,
                                    drift_mode="resample", transition_prob=0.3)
        e0, e1 = sched.segments[0].graph.edges, sched.segments[1].graph.edges
        changed_targets = {e[0] for e in e0 ^ e1}
        assert len(changed_targets) < 8  # most nodes carry over at prob 0.3

    def test_variable_lag_respects_cap(self):
        rng = np.random.default_rng(2)
        sched = sim.sample_schedule(5, 4, 2.0, "monotonic", [200] * 3, rng,
                                    variable_lag=True)
        assert all(seg.graph.L == 4 for seg in sched.segments)
        assert sched.L <= 4

    def test_add_latents_zero_is_identity(self, rng):
        sched = sim.sample_schedule(4, 2, 2.0, "linear", [400], rng)
        assert sim.add_latents(sched, 0, rng) is sched

    def test_latents_excluded_from_data_and_truth(self):
        rng = np.random.default_rng(21)
        g = sim.sample_graph_exact(6, 2, 2, rng)
        mech = sim.build_mechanisms(g, "linear", rng)
        sched = sim.add_latents(sim.single_regime(g, mech, 3000), 3, rng)
        assert sched.n_latent == 3
        per_latent = {}
        for tgt, latent_idx, lag, w in sched.latent.edges:
            per_latent.setdefault(latent_idx, set()).add(tgt)
            assert 1 <= lag <= 2
        assert all(len(v) >= 2 for v in per_latent.values())
        ds = sim.simulate(sched, NoiseSpec(), 3000, rng=rng, seed=21)
        assert ds.data.shape == (3000, 6)
        assert ds.latent_count == 3
        assert ds.schedule.union_graph().edges == g.edges

    def test_latents_change_the_data(self):
        rng = np.random.default_rng(5)
        g = sim.sample_graph_exact(4, 2, 1, rng)
        mech = sim.build_mechanisms(g, "linear", rng)
        base = sim.single_regime(g, mech, 2000)
        with_lat = sim.add_latents(base, 2, np.random.default_rng(6))
        a = sim.simulate(base, NoiseSpec(), 2000, rng=np.random.default_rng(7))
        b = sim.simulate(with_lat, NoiseSpec(), 2000, rng=np.random.default_rng(7))
        assert not np.allclose(a.data, b.data)


class TestDatasetIO:
    def test_roundtrip_and_layout(self, tmp_path, rng):
        g = sim.sample_graph(3, 2, 1.0, rng)
        mech = sim.build_mechanisms(g, "linear", rng)
        ds = sim.simulate(sim.single_regime(g, mech, 500), NoiseSpec(), 500,
                          rng=rng, seed=77)
        bin_path, meta_path = sim.save_dataset(ds, tmp_path / "series.bin")
        assert bin_path.stat().st_size == 500 * 3 * 8
        raw = np.frombuffer(bin_path.read_bytes(), dtype="<f8")
        # column-major: first T values are variable 0
        assert np.array_equal(raw[:500], ds.data[:, 0])
        back = sim.load_dataset(bin_path)
        assert np.array_equal(back.data, ds.data)
        assert back.seed == 77
        assert back.schedule.union_graph().edges == g.edges
        assert back.noise.family == "gaussian"

    def test_missing_sidecar(self, tmp_path):
        path = tmp_path / "orphan.bin"
        path.write_bytes(b"\x00" * 16)
        with pytest.raises(FileNotFoundError):
            sim.load_dataset(path)

    def test_size_mismatch_detected(self, tmp_path, rng):
        g = sim.sample_graph(2, 1, 1.0, rng)
        mech = sim.build_mechanisms(g, "linear", rng)
        ds = sim.simulate(sim.single_regime(g, mech, 100), NoiseSpec(), 100, rng=rng)
        bin_path, _ = sim.save_dataset(ds, tmp_path / "series.bin")
        bin_path.write_bytes(bin_path.read_bytes()[:-8])
        with pytest.raises(GraphError):
            sim.load_dataset(bin_path)


class TestGraphJson:
    def test_roundtrip_with_weights(self, tmp_path):
        g = LaggedGraph(3, 2, {(0, 1, 1), (2, 0, 2)}, {(0, 1, 1): 0.5, (2, 0, 2): -0.4})
        g.save(tmp_path / "g.json")
        back = LaggedGraph.load(tmp_path / "g.json")
        assert back.edges == g.edges
        assert back.weights == g.weights

    def test_validation(self):
        with pytest.raises(GraphError):
            LaggedGraph(2, 2, {(0, 1, 0)})  # lag-0 edge
        with pytest.raises(GraphError):
            LaggedGraph(2, 2, {(0, 5, 1)})
        with pytest.raises(GraphError):
            LaggedGraph.from_dict({"p": 2, "L": 1,
                                   "edges": [{"target": 0, "source": 1, "lag": 1},
                                             {"target": 0, "source": 1, "lag": 1}]})
