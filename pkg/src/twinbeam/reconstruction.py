"""Maximum-likelihood reconstruction of photon-number distributions.

The joint photocount histogram ``f`` is inverted through the two camera
responses by the expectation-maximisation fixed-point iteration

    p'(n_s, n_i) = p(n_s, n_i) * sum_c f(c) T_s(c_s, n_s) T_i(c_i, n_i) / F(c),
    F(c) = sum_n T_s(c_s, n_s) T_i(c_i, n_i) p(n_s, n_i),

which keeps ``p`` normalised and never decreases the log-likelihood.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .detector import DetectorModel, PovmMatrix, povm_matrix
from .errors import DomainError
from .states import PHOTON, JointHistogram, JointPhotonDistribution

STOP_CONVERGED = "converged"
STOP_BUDGET = "iteration budget"


@dataclass(frozen=True)
class EmOptions:
    """Iteration budget, stopping rule, starting point and engine.

    The run stops once the largest per-cell change is below ``cell_tol`` and
    the relative log-likelihood gain is below ``loglik_tol``.  ``init`` is
    ``"uniform"`` or an explicit start table.  With ``accelerate`` each
    iteration is a squared extrapolation (SQUAREM) of two plain updates
    followed by a stabilising update; an extrapolation that would lower the
    likelihood is discarded in favour of the plain updates.
    """

    max_iterations: int = 10_000
    cell_tol: float = 1e-9
    loglik_tol: float = 1e-12
    init: object = "uniform"
    accelerate: bool = True
    record_trace: bool = True

    def __post_init__(self):
        if self.max_iterations < 1:
            raise DomainError("max_iterations must be >= 1")
        if not (self.cell_tol > 0 and self.loglik_tol > 0):
            raise DomainError("tolerances must be positive")

    def to_dict(self) -> dict:
        init = self.init if isinstance(self.init, str) else "custom"
        return {"max_iterations": self.max_iterations, "cell_tol": self.cell_tol,
                "loglik_tol": self.loglik_tol, "init": init,
                "accelerate": self.accelerate, "record_trace": self.record_trace}


@dataclass
class EmDiagnostics:
    iterations: int
    log_likelihood: float
    stop_reason: str
    trace: np.ndarray = field(default_factory=lambda: np.empty(0))
    map_evaluations: int = 0
    max_normalization_error: float = 0.0
    worst_loglik_step: float = 0.0
    rejected_extrapolations: int = 0

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "map_evaluations": self.map_evaluations,
            "log_likelihood": self.log_likelihood,
            "stop_reason": self.stop_reason,
            "max_normalization_error": self.max_normalization_error,
            "worst_loglik_step": self.worst_loglik_step,
            "rejected_extrapolations": self.rejected_extrapolations,
            "trace": [float(v) for v in self.trace],
        }


def _as_frequencies(f) -> np.ndarray:
    if isinstance(f, JointHistogram):
        if f.frames == 0:
            raise DomainError("histogram holds zero frames")
        return f.counts / f.frames
    if isinstance(f, JointPhotonDistribution):
        table = f.table
    else:
        table = np.asarray(f, dtype=float)
    total = table.sum()
    if not total > 0:
        raise DomainError("photocount data carry no mass")
    return table / total


def _restricted(freq: np.ndarray, povm_s: PovmMatrix, povm_i: PovmMatrix):
    """Drop all-zero rows/columns of the data together with the matching POVM rows."""
    rows = np.flatnonzero(freq.sum(axis=1) > 0)
    cols = np.flatnonzero(freq.sum(axis=0) > 0)
    if rows.size == 0:
        raise DomainError("photocount data carry no mass")
    if rows[-1] > povm_s.c_max or cols[-1] > povm_i.c_max:
        raise DomainError(
            f"data reach photocounts ({rows[-1]}, {cols[-1]}) beyond the POVM "
            f"range ({povm_s.c_max}, {povm_i.c_max})"
        )
    return (freq[np.ix_(rows, cols)],
            np.ascontiguousarray(povm_s.entries[rows]),
            np.ascontiguousarray(povm_i.entries[cols]))


def _loglik(freq, model):
    mask = freq > 0
    if np.any(model[mask] <= 0):
        return -math.inf
    return float(np.sum(freq[mask] * np.log(model[mask])))


def log_likelihood(f, p: JointPhotonDistribution, povm_s: PovmMatrix,
                   povm_i: PovmMatrix) -> float:
    """``sum_c f(c) log F(c)`` for the data normalised to unit mass.

    Returns ``-inf`` when a populated cell has zero model probability.
    """
    freq, Ts, Ti = _restricted(_as_frequencies(f), povm_s, povm_i)
    rows, cols = p.shape
    if rows > Ts.shape[1] or cols > Ti.shape[1]:
        raise DomainError("distribution exceeds the POVM photon-number range")
    model = Ts[:, :rows] @ p.table @ Ti[:, :cols].T
    return _loglik(freq, model)


def em_step(P, freq, Ts, Ti):
    """One fixed-point update; returns ``(new_P, log-likelihood of P)``."""
    model = Ts @ P @ Ti.T
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(freq > 0, freq / model, 0.0)
    return P * (Ts.T @ ratio @ Ti), _loglik(freq, model)


class _EmMap:
    """The update map with bookkeeping of normalisation drift and call count."""

    def __init__(self, freq, Ts, Ti):
        self.freq, self.Ts, self.Ti = freq, Ts, Ti
        self.calls = 0
        self.norm_error = 0.0

    def __call__(self, P):
        new_P, ll = em_step(P, self.freq, self.Ts, self.Ti)
        self.calls += 1
        total = new_P.sum()
        self.norm_error = max(self.norm_error, abs(total - 1.0))
        return new_P / total, ll

    def loglik(self, P):
        return _loglik(self.freq, self.Ts @ P @ self.Ti.T)


def _squarem_step(em: _EmMap, P):
    """One SQUAREM cycle; returns ``(new_P, new_ll, rejected)``."""
    P1, _ = em(P)
    P2, _ = em(P1)
    ll2 = em.loglik(P2)
    r = P1 - P
    v = P2 - 2.0 * P1 + P
    norm_v = np.linalg.norm(v)
    if norm_v == 0.0:
        return P2, ll2, False
    alpha = min(-np.linalg.norm(r) / norm_v, -1.0)
    while True:
        trial = P - 2.0 * alpha * r + alpha * alpha * v
        if trial.min() >= 0.0 or alpha >= -1.0:
            break
        alpha = 0.5 * (alpha - 1.0)
    np.clip(trial, 0.0, None, out=trial)
    trial /= trial.sum()
    stabilised, _ = em(trial)
    ll_new = em.loglik(stabilised)
    if not ll_new >= ll2:
        return P2, ll2, True
    return stabilised, ll_new, False


def em_reconstruct(f, povm_s: PovmMatrix, povm_i: PovmMatrix,
                   opts: EmOptions = EmOptions()):
    """Reconstruct ``p(n_s, n_i)`` on the photon-number grid of the two POVMs.

    Returns ``(JointPhotonDistribution, EmDiagnostics)``.  Hitting the
    iteration budget is not an error; it is reported as the stop reason.
    """
    freq, Ts, Ti = _restricted(_as_frequencies(f), povm_s, povm_i)
    shape = (Ts.shape[1], Ti.shape[1])
    if isinstance(opts.init, str):
        if opts.init != "uniform":
            raise DomainError(f"unknown init {opts.init!r}")
        P = np.full(shape, 1.0 / (shape[0] * shape[1]))
    else:
        init = opts.init.table if isinstance(opts.init, JointPhotonDistribution) else opts.init
        init = np.asarray(init, dtype=float)
        P = np.zeros(shape)
        r, c = min(shape[0], init.shape[0]), min(shape[1], init.shape[1])
        P[:r, :c] = init[:r, :c]
        if not P.sum() > 0:
            raise DomainError("initial distribution carries no mass")
        P /= P.sum()

    em = _EmMap(freq, Ts, Ti)
    ll = em.loglik(P)
    trace = [ll]
    worst_step = 0.0
    rejected = 0
    reason = STOP_BUDGET
    iterations = 0
    for iterations in range(1, opts.max_iterations + 1):
        if opts.accelerate:
            new_P, new_ll, was_rejected = _squarem_step(em, P)
            rejected += was_rejected
        else:
            new_P, _ = em(P)
            new_ll = em.loglik(new_P)
        if opts.record_trace:
            trace.append(new_ll)
        if math.isfinite(ll):
            worst_step = min(worst_step, new_ll - ll)
        change = float(np.max(np.abs(new_P - P)))
        gain = abs(new_ll - ll)
        P, ll = new_P, new_ll
        if change < opts.cell_tol and gain <= opts.loglik_tol * abs(ll):
            reason = STOP_CONVERGED
            break

    diag = EmDiagnostics(iterations, ll, reason, np.asarray(trace), em.calls,
                         em.norm_error, worst_step, rejected)
    meta = {"source": "em_reconstruct", "em": opts.to_dict(),
            "iterations": iterations, "stop_reason": reason}
    return JointPhotonDistribution(P, 0.0, PHOTON, meta), diag


def default_n_max(mean_counts: float, efficiency: float, c_top: int = 0) -> int:
    """Photon-number grid bound ``ceil((<c> + 6 sqrt(<c>)) / eta)``, at least ``c_top``."""
    if efficiency <= 0:
        raise DomainError("efficiency must be positive to size the grid")
    bound = math.ceil((mean_counts + 6.0 * math.sqrt(max(mean_counts, 0.0))) / efficiency)
    return max(bound, c_top)


def reconstruct(f, model_s: DetectorModel, model_i: DetectorModel,
                opts: EmOptions = EmOptions(), n_max=None):
    """Build POVMs on the default grid and run :func:`em_reconstruct`.

    ``n_max`` may be an int or a ``(signal, idler)`` pair overriding the
    default grid.  Returns ``(distribution, diagnostics, (povm_s, povm_i))``.
    """
    freq = _as_frequencies(f)
    rows = np.flatnonzero(freq.sum(axis=1) > 0)
    cols = np.flatnonzero(freq.sum(axis=0) > 0)
    if rows.size == 0:
        raise DomainError("photocount data carry no mass")
    mean_s = float(np.arange(freq.shape[0]) @ freq.sum(axis=1))
    mean_i = float(np.arange(freq.shape[1]) @ freq.sum(axis=0))
    if n_max is None:
        n_s = default_n_max(mean_s, model_s.efficiency, int(rows[-1]))
        n_i = default_n_max(mean_i, model_i.efficiency, int(cols[-1]))
    elif np.ndim(n_max) == 0:
        n_s = n_i = int(n_max)
    else:
        n_s, n_i = (int(v) for v in n_max)
    povm_s = povm_matrix(model_s, int(rows[-1]), n_s)
    povm_i = povm_matrix(model_i, int(cols[-1]), n_i)
    dist, diag = em_reconstruct(freq, povm_s, povm_i, opts)
    return dist, diag, (povm_s, povm_i)
