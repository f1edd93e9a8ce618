import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats
from sympy.functions.combinatorial.numbers import stirling

from twinbeam.errors import DegenerateInputError, DomainError
from twinbeam.moments import (
    SINGLE_MODE,
    WHOLE_BEAM,
    IntensityMomentSet,
    add_thermal_noise_to_moments,
    central_moments,
    estimate_modes,
    expand_to_whole_beam,
    intensity_moments,
    intensity_moments_of,
    raw_moments,
    reduce_to_single_mode,
    s_ordered_moments,
    stirling_first_kind,
)
from twinbeam.quantifiers import NiId, evaluate_ni
from twinbeam.states import (
    PHOTOCOUNT,
    JointHistogram,
    JointPhotonDistribution,
    ThermalFieldSpec,
    TwinBeamSpec,
    convolve_noise,
    ideal_twb,
    thermal_marginal,
)


def point_mass(a, b):
    table = np.zeros((a + 1, b + 1))
    table[a, b] = 1.0
    return JointPhotonDistribution(table)


def random_moments(rng, order=3, **tags):
    values = {(k, l): rng.uniform(0.1, 5.0)
              for k in range(order + 1) for l in range(order + 1 - k)}
    values[0, 0] = 1.0
    return IntensityMomentSet.from_dict(values, order, **tags)


def factorial_moment(n, k):
    out = np.ones_like(n, dtype=float)
    for j in range(k):
        out = out * (n - j)
    return out


class TestRawMoments:
    def test_point_mass(self):
        raw = raw_moments(point_mass(2, 3))
        assert raw[1, 0] == 2.0 and raw[1, 1] == 6.0 and raw[0, 0] == 1.0

    def test_ideal_twin_beam_cross_moment(self):
        raw = raw_moments(ideal_twb(TwinBeamSpec(1.0, 1), tail_budget=1e-15))
        assert raw[1, 1] == pytest.approx(3.0, rel=1e-12)

    def test_single_mode_thermal_second_moment(self):
        p, _ = thermal_marginal(ThermalFieldSpec(1.0, 1), tail_budget=1e-15)
        raw = raw_moments(JointPhotonDistribution(p[:, None]))
        assert raw[2, 0] == pytest.approx(3.0, rel=1e-12)

    def test_histogram_is_normalised_by_frames(self):
        h = JointHistogram(np.array([[2, 0], [0, 2]]), 4)
        raw = raw_moments(h)
        assert raw[1, 1] == 0.5 and raw[1, 0] == 0.5

    def test_branch_follows_axis_labels(self):
        d = JointPhotonDistribution(np.array([[1.0]]), axis_labels=PHOTOCOUNT)
        assert raw_moments(d).branch == PHOTOCOUNT

    def test_order_limit(self):
        with pytest.raises(DomainError):
            raw_moments(point_mass(1, 1), 7)

    def test_rejects_raw_arrays(self):
        with pytest.raises(DomainError):
            raw_moments(np.ones((2, 2)))

    @given(arrays(float, (6, 5), elements=st.floats(0.0, 1.0)))
    @settings(max_examples=50, deadline=None)
    def test_cauchy_schwarz_and_even_moments(self, table):
        if table.sum() <= 1e-6:
            return
        raw = raw_moments(JointPhotonDistribution(table / table.sum()), 4)
        assert raw[2, 0] >= 0 and raw[0, 2] >= 0 and raw[4, 0] >= 0
        assert raw[1, 1] ** 2 <= raw[2, 0] * raw[0, 2] * (1 + 1e-12) + 1e-300


class TestStirling:
    @pytest.mark.parametrize("k,m,value", [
        (1, 1, 1), (2, 1, -1), (2, 2, 1), (3, 1, 2), (3, 2, -3), (3, 3, 1), (0, 0, 1),
    ])
    def test_examples(self, k, m, value):
        assert stirling_first_kind(k, m) == value

    def test_against_sympy(self):
        for k in range(9):
            for m in range(k + 1):
                assert stirling_first_kind(k, m) == stirling(k, m, kind=1, signed=True)

    @pytest.mark.parametrize("k,m", [(9, 1), (2, 3), (-1, 0), (3, -1)])
    def test_range(self, k, m):
        with pytest.raises(DomainError):
            stirling_first_kind(k, m)


class TestIntensityMoments:
    def test_first_moment_is_mean(self):
        d = ideal_twb(TwinBeamSpec(2.5, 3))
        raw = raw_moments(d)
        assert intensity_moments(raw)[1, 0] == raw[1, 0]

    def test_poisson_second_factorial_moment(self):
        lam = 2.7
        p = stats.poisson.pmf(np.arange(80), lam)
        m = intensity_moments_of(JointPhotonDistribution(p[:, None] / p.sum()))
        assert m[2, 0] == pytest.approx(lam**2, rel=1e-12)

    def test_random_tables_match_factorial_moments(self):
        rng = np.random.default_rng(2024)
        for _ in range(100):
            table = rng.random((12, 9))
            table /= table.sum()
            m = intensity_moments_of(JointPhotonDistribution(table), 3)
            a = np.arange(12)[:, None]
            b = np.arange(9)[None, :]
            for k in range(4):
                for l in range(4 - k):
                    direct = np.sum(factorial_moment(a, k) * factorial_moment(b, l) * table)
                    assert m[k, l] == pytest.approx(direct, rel=1e-12)

    def test_tags(self):
        m = intensity_moments_of(ideal_twb(TwinBeamSpec(1.0, 1)))
        assert m.ordering == 1.0 and m.scale == WHOLE_BEAM and m[0, 0] == 1.0
        assert np.isnan(m.values[3, 1])


class TestSOrdering:
    def test_s_one_is_identity(self):
        m = random_moments(np.random.default_rng(0))
        assert s_ordered_moments(m, 1.0) is m

    @pytest.mark.parametrize("s", [0.5, 0.0, -1.0, -2.5])
    def test_vacuum_mean(self, s):
        vac = IntensityMomentSet.from_dict({(k, l): 0.0 for k in range(4) for l in range(4 - k)
                                            if (k, l) != (0, 0)}, 3)
        out = s_ordered_moments(vac, s)
        assert out[1, 0] == pytest.approx((1 - s) / 2, abs=1e-15)
        assert out.ordering == s

    @given(st.floats(-3.0, 1.0), st.floats(0.0, 10.0), st.floats(0.0, 100.0))
    def test_second_moment_closed_form(self, s, w1, w2):
        m = IntensityMomentSet.from_dict({(1, 0): w1, (0, 1): w1, (2, 0): w2, (1, 1): 0.0,
                                          (0, 2): w2}, 2)
        out = s_ordered_moments(m, s)
        expected = w2 + 2 * (1 - s) * w1 + (1 - s) ** 2 / 2
        assert out[2, 0] == pytest.approx(expected, rel=1e-12, abs=1e-12)

    def test_shifts_are_additive(self):
        m = random_moments(np.random.default_rng(7))
        s1, s2 = 0.3, -0.9
        two_step = s_ordered_moments(s_ordered_moments(m, s1), s1 + s2 - 1)
        one_step = s_ordered_moments(m, s1 + s2 - 1)
        assert np.allclose(two_step.values[~np.isnan(two_step.values)],
                           one_step.values[~np.isnan(one_step.values)], rtol=1e-12, atol=0)

    def test_rejects_s_above_one(self):
        with pytest.raises(DomainError):
            s_ordered_moments(random_moments(np.random.default_rng(1)), 1.5)


def independent_thermal(mean, modes):
    p, _ = thermal_marginal(ThermalFieldSpec(mean, modes), tail_budget=1e-16)
    return JointPhotonDistribution(np.outer(p, p) / np.outer(p, p).sum())


class TestModeEstimate:
    def test_single_mode_thermal(self):
        m = IntensityMomentSet.from_dict({(1, 0): 3.0, (0, 1): 2.0, (2, 0): 18.0, (1, 1): 6.0,
                                          (0, 2): 8.0}, 2)
        est = estimate_modes(m)
        assert est.signal == pytest.approx(1.0) and est.idler == pytest.approx(1.0)

    @pytest.mark.parametrize("modes", [10, 50, 110])
    def test_multimode_thermal(self, modes):
        est = estimate_modes(intensity_moments_of(independent_thermal(5.0, modes), 2))
        assert abs(est.signal - modes) < 1e-8 * modes
        assert abs(est.average - modes) < 1e-8 * modes

    def test_poisson_is_degenerate(self):
        p = stats.poisson.pmf(np.arange(60), 3.0)
        p /= p.sum()
        with pytest.raises(DegenerateInputError):
            estimate_modes(intensity_moments_of(JointPhotonDistribution(np.outer(p, p)), 2))


class TestSingleModeReduction:
    def test_one_mode_is_identity(self):
        m = random_moments(np.random.default_rng(3))
        out = reduce_to_single_mode(m, 1.0)
        assert np.allclose(out.values[~np.isnan(out.values)], m.values[~np.isnan(m.values)],
                           rtol=1e-12)
        assert out.scale == SINGLE_MODE

    def test_recovers_single_mode_moments(self):
        B, K = 0.488, 50
        whole = intensity_moments_of(ideal_twb(TwinBeamSpec(B * K, K), tail_budget=1e-15))
        single = intensity_moments_of(ideal_twb(TwinBeamSpec(B, 1), tail_budget=1e-15))
        out = reduce_to_single_mode(whole, K)
        for kl in [(1, 0), (0, 1)]:
            assert abs(out[kl] - single[kl]) < 1e-8
        c_out, c_ref = central_moments(out), central_moments(single)
        for kl in [(2, 0), (1, 1), (0, 2)]:
            assert abs(c_out[kl] - c_ref[kl]) < 1e-8

    @pytest.mark.parametrize("B", [0.3, 1.0, 2.0])
    def test_covariance_of_reduced_ideal_beam(self, B):
        K = 10
        whole = intensity_moments_of(ideal_twb(TwinBeamSpec(B * K, K), tail_budget=1e-15))
        c = central_moments(reduce_to_single_mode(whole, K))
        assert abs(c[1, 1] - B * (B + 1)) < 1e-8

    @given(st.floats(1.0, 200.0), st.integers(0, 2**32 - 1))
    def test_expansion_inverts_reduction(self, K, seed):
        m = random_moments(np.random.default_rng(seed))
        back = expand_to_whole_beam(reduce_to_single_mode(m, K), K)
        mask = ~np.isnan(m.values)
        assert np.allclose(back.values[mask], m.values[mask], rtol=1e-9, atol=1e-9)

    def test_rejects_fewer_than_one_mode(self):
        with pytest.raises(DomainError):
            reduce_to_single_mode(random_moments(np.random.default_rng(0)), 0.5)


class TestNoiseOnMoments:
    base = ideal_twb(TwinBeamSpec(3.0, 2), tail_budget=1e-15)

    def test_zero_noise_is_identity(self):
        m = intensity_moments_of(self.base)
        assert add_thermal_noise_to_moments(m, 0.0, 0.0, 5) is m

    def test_second_order_closed_forms(self):
        m = intensity_moments_of(self.base)
        nu_s, nu_i, K = 1.3, 0.4, 7.0
        out = add_thermal_noise_to_moments(m, nu_s, nu_i, K)
        assert out[2, 0] == pytest.approx(m[2, 0] + 2 * nu_s * m[1, 0] + (1 + 1 / K) * nu_s**2,
                                          rel=1e-13)
        assert out[1, 1] == pytest.approx(
            m[1, 1] + nu_i * m[1, 0] + nu_s * m[0, 1] + nu_s * nu_i, rel=1e-13)

    @pytest.mark.parametrize("nu", [0.25, 1.0, 3.0])
    def test_single_mode_noise_shifts_e2(self, nu):
        m = intensity_moments_of(self.base)
        out = add_thermal_noise_to_moments(m, nu, nu, 1.0)
        assert evaluate_ni(NiId.E2, out) == pytest.approx(evaluate_ni(NiId.E2, m) + 2 * nu**2,
                                                          rel=1e-12)

    def test_agrees_with_distribution_convolution(self):
        nu_s, nu_i, K = 1.2, 0.8, 3.0
        moment_path = add_thermal_noise_to_moments(intensity_moments_of(self.base), nu_s, nu_i, K)
        dist = convolve_noise(self.base, ThermalFieldSpec(nu_s, K), ThermalFieldSpec(nu_i, K),
                              tail_budget=1e-15)
        dist_path = intensity_moments_of(dist)
        mask = ~np.isnan(moment_path.values)
        assert np.allclose(dist_path.values[mask], moment_path.values[mask], rtol=1e-9, atol=0)

    def test_validation(self):
        m = intensity_moments_of(self.base)
        with pytest.raises(DomainError):
            add_thermal_noise_to_moments(m, -1.0)
        with pytest.raises(DomainError):
            add_thermal_noise_to_moments(m, 1.0, 1.0, 0.5)
        with pytest.raises(DomainError):
            add_thermal_noise_to_moments(s_ordered_moments(m, 0.0), 1.0)


def test_json_round_trip():
    m = random_moments(np.random.default_rng(9), scale=SINGLE_MODE, branch=PHOTOCOUNT)
    back = IntensityMomentSet.from_json_dict(m.to_dict())
    mask = ~np.isnan(m.values)
    assert np.array_equal(back.values[mask], m.values[mask])
    assert (back.scale, back.branch, back.ordering) == (m.scale, m.branch, m.ordering)
