import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from episurv.data import (Adjacency, SurveillanceData, structure_matrix_crw1,
                          structure_matrix_rw2, structure_matrix_spatial)
from episurv.model import (DEFAULT_HYPERPRIORS, ModelSpec, Parameters,
                           log_prior, log_risk, outbreak_covariate,
                           stationary_distribution, transition_matrix)

probability = st.floats(min_value=1e-3, max_value=1.0 - 1e-3)


def toy_data(counts, edges=None, missing=None):
    counts = np.asarray(counts, dtype=np.int64)
    n_loc, n_time = counts.shape
    adjacency = Adjacency.from_edges(n_loc, edges or [])
    return SurveillanceData(
        counts=counts,
        missing=np.zeros_like(counts, dtype=bool) if missing is None else missing,
        populations=np.full(counts.shape, 1e5),
        adjacency=adjacency,
        location_labels=tuple(f"loc{i}" for i in range(n_loc)),
        time_labels=tuple(f"t{t}" for t in range(n_time)),
    )


def make_params(n_times=4, cycle=3, n_loc=2, p=1, **kw):
    defaults = dict(
        trend=np.full(n_times, -10.0),
        seasonal=np.zeros(cycle),
        spatial=np.zeros(n_loc),
        kappa_trend=1e4, kappa_seasonal=1e3, kappa_spatial=100.0,
        beta=np.ones(p), gamma01=0.1, gamma10=0.2)
    defaults.update(kw)
    return Parameters(**defaults)


class TestModelSpec:
    @pytest.mark.parametrize("variant,p", [
        ("0", 0), ("I", 1), ("II", 1), ("III", 2),
        ("IV", 1), ("V", 1), ("VI", 2), ("VII", 1)])
    def test_covariate_dim(self, variant, p):
        assert ModelSpec(variant).covariate_dim == p

    def test_rejects_unknown_variant(self):
        with pytest.raises(ValueError):
            ModelSpec("VIII")

    def test_config_round_trip(self):
        spec = ModelSpec.from_config({"variant": "VII", "cycle_length": "12"})
        assert spec.variant == "VII" and spec.cycle_length == 12
        assert ModelSpec.from_config(spec.to_config()) == spec


class TestOutbreakCovariate:
    # neighbourhood: 0 - 1 - 2 path; previous counts at t=0 are (2, 3, 0)
    data = toy_data([[2, 5], [3, 1], [0, 4]], edges=[(0, 1), (1, 2)])

    def test_variant_vii_always_one(self):
        spec = ModelSpec("VII")
        for i in range(3):
            for t in range(2):
                np.testing.assert_array_equal(
                    outbreak_covariate(spec, self.data, i, t), [1.0])

    def test_first_time_point_zero(self):
        for variant in ("I", "II", "III", "IV", "V", "VI"):
            z = outbreak_covariate(ModelSpec(variant), self.data, 0, 0)
            np.testing.assert_array_equal(z, np.zeros(len(z)))

    def test_variant_iv_log_of_one(self):
        data = toy_data([[0, 1]])
        z = outbreak_covariate(ModelSpec("IV"), data, 0, 1)
        np.testing.assert_array_equal(z, [0.0])

    def test_variant_v_own_plus_neighbors(self):
        # own previous 2, neighbour counts {3, 0} -> log 6
        data = toy_data([[2, 0], [3, 0], [0, 0]], edges=[(0, 1), (0, 2)])
        z = outbreak_covariate(ModelSpec("V"), data, 0, 1)
        assert z[0] == pytest.approx(np.log(6.0))

    def test_variant_specific_values(self):
        d = self.data
        np.testing.assert_array_equal(outbreak_covariate(ModelSpec("I"), d, 2, 1), [0.0])
        np.testing.assert_array_equal(outbreak_covariate(ModelSpec("II"), d, 2, 1), [1.0])
        np.testing.assert_array_equal(outbreak_covariate(ModelSpec("III"), d, 2, 1), [0.0, 1.0])
        # location 1 at t=1: own previous 3, neighbour sum 2+0=2
        np.testing.assert_allclose(outbreak_covariate(ModelSpec("VI"), d, 1, 1),
                                   [np.log(4.0), 3.0])

    def test_missing_previous_treated_as_zero(self):
        missing = np.zeros((1, 2), dtype=bool)
        missing[0, 0] = True
        data = toy_data([[7, 1]], missing=missing)
        np.testing.assert_array_equal(
            outbreak_covariate(ModelSpec("I"), data, 0, 1), [0.0])

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            outbreak_covariate(ModelSpec("I"), self.data, 5, 0)

    @pytest.mark.parametrize("variant", ["I", "II", "III"])
    def test_indicator_variants_binary(self, variant):
        rng = np.random.default_rng(0)
        data = toy_data(rng.poisson(2.0, size=(4, 6)),
                        edges=[(0, 1), (1, 2), (2, 3)])
        spec = ModelSpec(variant)
        for i in range(4):
            for t in range(6):
                z = outbreak_covariate(spec, data, i, t)
                assert set(np.unique(z)) <= {0.0, 1.0}

    @pytest.mark.parametrize("variant", ["IV", "V", "VI"])
    def test_count_variants_nonnegative(self, variant):
        rng = np.random.default_rng(1)
        data = toy_data(rng.poisson(3.0, size=(4, 6)),
                        edges=[(0, 1), (1, 2), (2, 3)])
        spec = ModelSpec(variant)
        for i in range(4):
            for t in range(6):
                assert np.all(outbreak_covariate(spec, data, i, t) >= 0.0)


class TestLogRisk:
    def test_endemic_independent_of_beta(self):
        spec = ModelSpec("VII")
        p1 = make_params(beta=np.array([1.0]))
        p2 = make_params(beta=np.array([9.0]))
        z = np.ones(1)
        assert log_risk(p1, spec, z, 0, 0, 1) == log_risk(p2, spec, z, 0, 0, 1)

    def test_poisson_mean_anchor(self):
        # intercept -14 with population 1e6 gives mean ~0.832
        spec = ModelSpec("0", cycle_length=3)
        params = make_params(trend=np.full(4, -14.0), p=0, beta=np.empty(0))
        lr = log_risk(params, spec, np.empty(0), 0, 0, 0)
        assert 1e6 * np.exp(lr) == pytest.approx(1e6 * np.exp(-14.0))
        assert 1e6 * np.exp(lr) == pytest.approx(0.8315287, rel=1e-6)

    def test_variant_vii_risk_ratio(self):
        spec = ModelSpec("VII", cycle_length=3)
        params = make_params(beta=np.array([1.65]))
        z = np.ones(1)
        ratio = np.exp(log_risk(params, spec, z, 1, 0, 1)
                       - log_risk(params, spec, z, 0, 0, 1))
        assert ratio == pytest.approx(np.exp(1.65))
        assert ratio == pytest.approx(5.2070, rel=1e-4)

    def test_variant_0_states_identical(self):
        spec = ModelSpec("0", cycle_length=3)
        params = make_params(p=0, beta=np.empty(0))
        z = np.empty(0)
        for t in range(4):
            assert log_risk(params, spec, z, 0, 1, t) == log_risk(params, spec, z, 1, 1, t)

    def test_seasonal_wraparound(self):
        spec = ModelSpec("VII", cycle_length=3)
        params = make_params(seasonal=np.array([0.5, -0.2, -0.3]))
        z = np.ones(1)
        # time index 3 wraps to seasonal component 1 (0-based index 0)
        assert log_risk(params, spec, z, 0, 0, 3) == log_risk(params, spec, z, 0, 0, 0)


class TestTransitionMatrix:
    def test_paper_values(self):
        np.testing.assert_allclose(transition_matrix(0.1, 0.2),
                                   [[0.9, 0.1], [0.2, 0.8]])

    def test_symmetric_doubly_stochastic(self):
        g = transition_matrix(0.5, 0.5)
        np.testing.assert_allclose(g.sum(axis=0), 1.0)
        np.testing.assert_allclose(g.sum(axis=1), 1.0)

    @given(probability, probability)
    @settings(max_examples=100, deadline=None)
    def test_rows_sum_to_one(self, g01, g10):
        np.testing.assert_allclose(transition_matrix(g01, g10).sum(axis=1), 1.0)

    def test_rejects_boundary(self):
        with pytest.raises(ValueError):
            transition_matrix(0.0, 0.5)
        with pytest.raises(ValueError):
            transition_matrix(0.5, 1.0)


class TestStationaryDistribution:
    def test_paper_values(self):
        np.testing.assert_allclose(stationary_distribution(0.1, 0.2),
                                   [2.0 / 3.0, 1.0 / 3.0])

    @given(probability)
    @settings(max_examples=50, deadline=None)
    def test_symmetric_case(self, c):
        np.testing.assert_allclose(stationary_distribution(c, c), [0.5, 0.5])

    @given(probability, probability)
    @settings(max_examples=100, deadline=None)
    def test_fixed_point(self, g01, g10):
        delta = stationary_distribution(g01, g10)
        np.testing.assert_allclose(delta @ transition_matrix(g01, g10), delta,
                                   atol=1e-14)
        assert delta.sum() == pytest.approx(1.0)
        assert np.all(delta > 0) and np.all(delta < 1)


class TestLogPrior:
    structures = (structure_matrix_rw2(4), structure_matrix_crw1(3),
                  structure_matrix_spatial(Adjacency.from_edges(2, [(0, 1)])))

    def prior(self, params, spec):
        return log_prior(params, spec, *self.structures, DEFAULT_HYPERPRIORS)

    def test_beta22_contribution_at_half(self):
        spec = ModelSpec("VII", cycle_length=3)
        base = make_params(gamma01=0.5)
        # direct Beta(2,2) density at 0.5 is 6 * 0.25 = 1.5
        other = make_params(gamma01=0.5)
        from episurv.model import beta_logpdf
        assert beta_logpdf(0.5, DEFAULT_HYPERPRIORS.gamma_prior) == pytest.approx(np.log(1.5))

    def test_constant_trend_reduces_to_kappa_power(self):
        spec = ModelSpec("0", cycle_length=3)
        pa = make_params(p=0, beta=np.empty(0), trend=np.full(4, -3.0), kappa_trend=2.0)
        pb = make_params(p=0, beta=np.empty(0), trend=np.full(4, -3.0), kappa_trend=8.0)
        # with a flat trend the quadratic vanishes; difference is the power
        # term plus the hyperprior term
        from episurv.model import gamma_logpdf
        expected = ((4 - 2) / 2) * (np.log(8.0) - np.log(2.0))
        expected += (gamma_logpdf(8.0, DEFAULT_HYPERPRIORS.kappa_trend_prior)
                     - gamma_logpdf(2.0, DEFAULT_HYPERPRIORS.kappa_trend_prior))
        assert self.prior(pb, spec) - self.prior(pa, spec) == pytest.approx(expected)

    def test_beta_outside_support(self):
        spec = ModelSpec("VII", cycle_length=3)
        params = make_params(beta=np.array([0.0]))
        assert self.prior(params, spec) == -np.inf

    def test_kappa_outside_support(self):
        spec = ModelSpec("0", cycle_length=3)
        params = make_params(p=0, beta=np.empty(0), kappa_trend=-1.0)
        assert self.prior(params, spec) == -np.inf

    @given(st.floats(min_value=-3.0, max_value=3.0))
    @settings(max_examples=30, deadline=None)
    def test_quadratic_invariance_flat_directions(self, c):
        rw2 = structure_matrix_rw2(6)
        rng = np.random.default_rng(11)
        r = rng.normal(size=6)
        base = rw2.quadratic_form(r)
        assert rw2.quadratic_form(r + c * np.ones(6)) == pytest.approx(base, abs=1e-8)
        assert rw2.quadratic_form(r + c * np.arange(1.0, 7.0)) == pytest.approx(base, abs=1e-7)


class TestParameters:
    def test_constraint_validation(self):
        params = make_params(seasonal=np.array([0.5, 0.2, 0.0]))
        with pytest.raises(ValueError, match="sum to zero"):
            params.validate()

    def test_valid_state_passes(self):
        make_params().validate(ModelSpec("VII", cycle_length=3))
