import math

import numpy as np
import pytest

from twinbeam.detector import DetectorModel, PovmMatrix, forward_detect, povm_matrix
from twinbeam.errors import DomainError
from twinbeam.reconstruction import (
    STOP_BUDGET,
    STOP_CONVERGED,
    EmOptions,
    default_n_max,
    em_reconstruct,
    em_step,
    log_likelihood,
    reconstruct,
)
from twinbeam.states import JointHistogram, JointPhotonDistribution, TwinBeamSpec, ideal_twb, sample_histogram

SIGNAL = DetectorModel.calibrated("signal")
IDLER = DetectorModel.calibrated("idler")


def detected(dist, c_max=30):
    n = dist.shape[0] - 1
    Ts, Ti = povm_matrix(SIGNAL, c_max, n), povm_matrix(IDLER, c_max, n)
    return forward_detect(dist, Ts, Ti), Ts, Ti


@pytest.fixture(scope="module")
def sampled():
    f, Ts, Ti = detected(ideal_twb(TwinBeamSpec(5.0, 10)))
    return sample_histogram(f, 10_000, 99), Ts, Ti


class TestOptions:
    def test_validation(self):
        with pytest.raises(DomainError):
            EmOptions(max_iterations=0)
        with pytest.raises(DomainError):
            EmOptions(cell_tol=0.0)

    def test_echo(self):
        assert EmOptions(init=np.ones((2, 2))).to_dict()["init"] == "custom"


class TestLogLikelihood:
    def test_self_consistency(self):
        p = ideal_twb(TwinBeamSpec(2.0, 3))
        f, Ts, Ti = detected(p)
        q = f.table / f.table.sum()
        expected = float(np.sum(q[q > 0] * np.log(f.table[q > 0])))
        assert log_likelihood(f, p, Ts, Ti) == pytest.approx(expected, rel=1e-12)

    def test_unreachable_cell_is_minus_infinity(self):
        clean = DetectorModel(0.5, 4096, 0.0)
        T = povm_matrix(clean, 3, 3)
        vacuum = JointPhotonDistribution(np.array([[1.0]]))
        h = JointHistogram(np.array([[5, 0], [1, 0]]), 6)
        assert log_likelihood(h, vacuum, T, T) == -math.inf

    def test_shape_check(self):
        T = povm_matrix(SIGNAL, 3, 2)
        with pytest.raises(DomainError):
            log_likelihood(np.ones((2, 2)), ideal_twb(TwinBeamSpec(3.0, 1)), T, T)


class TestEm:
    def test_identity_povm_returns_the_data(self):
        rng = np.random.default_rng(1)
        counts = rng.integers(0, 50, (8, 8))
        h = JointHistogram(counts, int(counts.sum()))
        eye = PovmMatrix.identity(8)
        p, diag = em_reconstruct(h, eye, eye)
        assert 0.5 * np.abs(p.table - counts / counts.sum()).sum() < 1e-6

    def test_likelihood_is_monotone_on_sampled_data(self, sampled):
        h, Ts, Ti = sampled
        for accelerate in (True, False):
            _, diag = em_reconstruct(h, Ts, Ti, EmOptions(max_iterations=300, accelerate=accelerate))
            assert np.all(np.diff(diag.trace) >= -1e-10)
            assert diag.worst_loglik_step >= -1e-10

    def test_normalisation_and_positivity(self, sampled):
        h, Ts, Ti = sampled
        p, diag = em_reconstruct(h, Ts, Ti, EmOptions(max_iterations=200))
        assert diag.max_normalization_error < 1e-12
        assert abs(p.table.sum() - 1.0) < 1e-12
        assert p.table.min() >= 0.0

    def test_fixed_point(self):
        f, Ts, Ti = detected(ideal_twb(TwinBeamSpec(1.0, 2)), c_max=20)
        opts = EmOptions(max_iterations=100_000)
        p, diag = em_reconstruct(f, Ts, Ti, opts)
        assert diag.stop_reason == STOP_CONVERGED
        freq = f.table / f.table.sum()
        rows = slice(0, Ts.c_max + 1)
        new, _ = em_step(p.table, freq[rows, rows], Ts.entries, Ti.entries)
        assert np.max(np.abs(new - p.table)) < opts.cell_tol

    def test_budget_is_a_stop_reason(self, sampled):
        h, Ts, Ti = sampled
        _, diag = em_reconstruct(h, Ts, Ti, EmOptions(max_iterations=3))
        assert diag.stop_reason == STOP_BUDGET and diag.iterations == 3
        assert len(diag.trace) == 4

    def test_trace_can_be_skipped(self, sampled):
        h, Ts, Ti = sampled
        _, diag = em_reconstruct(h, Ts, Ti, EmOptions(max_iterations=3, record_trace=False))
        assert len(diag.trace) == 1

    def test_custom_start(self, sampled):
        h, Ts, Ti = sampled
        warm, _ = em_reconstruct(h, Ts, Ti, EmOptions(max_iterations=50))
        cold = em_reconstruct(h, Ts, Ti, EmOptions(max_iterations=1))[1].log_likelihood
        again = em_reconstruct(h, Ts, Ti, EmOptions(max_iterations=1, init=warm))[1]
        assert again.log_likelihood > cold

    def test_bad_inputs(self, sampled):
        _, Ts, Ti = sampled
        with pytest.raises(DomainError):
            em_reconstruct(np.zeros((3, 3)), Ts, Ti)
        with pytest.raises(DomainError):
            em_reconstruct(JointHistogram(np.zeros((2, 2), dtype=int), 0), Ts, Ti)
        with pytest.raises(DomainError):
            em_reconstruct(np.ones((3, 3)), Ts, Ti, EmOptions(init="random"))
        with pytest.raises(DomainError):
            em_reconstruct(np.ones((40, 40)), Ts, Ti)

    def test_droplet_concentrates_on_the_diagonal(self):
        truth = ideal_twb(TwinBeamSpec(24.4, 50))
        f, _, _ = detected(truth, c_max=40)
        h = sample_histogram(f, 10_000, 7)
        p, _, _ = reconstruct(h, SIGNAL, IDLER, EmOptions(max_iterations=300))
        assert np.trace(p.table) > np.trace(h.counts / h.frames)


class TestReconstruct:
    def test_default_grid(self):
        assert default_n_max(5.0, 0.25) == math.ceil((5 + 6 * math.sqrt(5)) / 0.25)
        assert default_n_max(0.0, 0.5, c_top=4) == 4
        with pytest.raises(DomainError):
            default_n_max(1.0, 0.0)

    def test_grid_override(self, sampled):
        h, _, _ = sampled
        p, _, (Ts, Ti) = reconstruct(h, SIGNAL, IDLER, EmOptions(max_iterations=2), n_max=(20, 25))
        assert p.shape == (21, 26) and Ts.n_max == 20 and Ti.n_max == 25

    def test_recovers_moments_of_exact_data(self):
        truth = ideal_twb(TwinBeamSpec(2.0, 4))
        f, _, _ = detected(truth)
        p, diag, _ = reconstruct(f, SIGNAL, IDLER, EmOptions(max_iterations=20_000))
        assert p.mean(0) == pytest.approx(2.0, rel=1e-3)
        assert p.mean(1) == pytest.approx(2.0, rel=1e-3)
