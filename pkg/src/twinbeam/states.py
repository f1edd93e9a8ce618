"""Joint photon-number and photocount distributions of noisy twin beams.

Distributions are stored as dense two-dimensional probability tables indexed
by ``(signal, idler)`` counts.  Whatever probability falls outside the table
is tracked in ``tail_mass`` so that ``table.sum() + tail_mass == 1``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, special, stats

from .errors import DomainError, TruncationError

DEFAULT_TAIL_BUDGET = 1e-9
DEFAULT_HARD_LIMIT = 512

PHOTON = "photon"
PHOTOCOUNT = "photocount"
_AXIS_LABELS = (PHOTON, PHOTOCOUNT)

GENERATOR_NAME = "numpy.random.Philox"


@dataclass(frozen=True)
class ThermalFieldSpec:
    """Multi-mode thermal (chaotic) field.

    Parameters
    ----------
    total_mean : float
        Mean photon (or photocount) number of the whole field.
    modes : float
        Number of equally populated modes; non-integer values are allowed.
    """

    total_mean: float
    modes: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.total_mean) or self.total_mean < 0:
            raise DomainError(f"total_mean must be >= 0, got {self.total_mean}")
        if not np.isfinite(self.modes) or self.modes < 1:
            raise DomainError(f"modes must be >= 1, got {self.modes}")

    @property
    def per_mode_mean(self) -> float:
        return self.total_mean / self.modes


@dataclass(frozen=True)
class TwinBeamSpec:
    """Ideal twin beam made of ``paired_modes`` identical photon-pair modes."""

    pair_mean: float
    paired_modes: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.pair_mean) or self.pair_mean < 0:
            raise DomainError(f"pair_mean must be >= 0, got {self.pair_mean}")
        if not np.isfinite(self.paired_modes) or self.paired_modes < 1:
            raise DomainError(f"paired_modes must be >= 1, got {self.paired_modes}")


@dataclass(frozen=True, eq=False)
class JointPhotonDistribution:
    """Truncated joint probability table ``q(a, b)``.

    ``axis_labels`` says whether the indices are photon numbers or photocounts.
    """

    table: np.ndarray
    tail_mass: float = 0.0
    axis_labels: str = PHOTON
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        table = np.array(self.table, dtype=float)
        if table.ndim != 2:
            raise DomainError("table must be two-dimensional")
        if self.axis_labels not in _AXIS_LABELS:
            raise DomainError(f"axis_labels must be one of {_AXIS_LABELS}")
        if np.any(table < 0) or not np.all(np.isfinite(table)):
            raise DomainError("table entries must be finite and non-negative")
        if self.tail_mass < 0:
            raise DomainError("tail_mass must be non-negative")
        table.setflags(write=False)
        object.__setattr__(self, "table", table)

    @property
    def shape(self):
        return self.table.shape

    @property
    def total(self) -> float:
        return float(self.table.sum())

    def marginal(self, axis: int) -> np.ndarray:
        """Marginal probabilities of the signal (0) or idler (1) arm."""
        return self.table.sum(axis=1 - axis)

    def mean(self, axis: int) -> float:
        m = self.marginal(axis)
        return float(np.arange(m.size) @ m)

    def normalized(self) -> "JointPhotonDistribution":
        """Renormalise the table to unit mass, discarding the tail."""
        return JointPhotonDistribution(
            self.table / self.total, 0.0, self.axis_labels, dict(self.metadata)
        )

    def padded(self, shape) -> np.ndarray:
        """Table zero-padded (never cropped) to at least ``shape``."""
        rows = max(shape[0], self.shape[0])
        cols = max(shape[1], self.shape[1])
        out = np.zeros((rows, cols))
        out[: self.shape[0], : self.shape[1]] = self.table
        return out


@dataclass(frozen=True, eq=False)
class JointHistogram:
    """Frame counts per ``(c_s, c_i)`` cell."""

    counts: np.ndarray
    frames: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        counts = np.array(self.counts)
        if counts.ndim != 2:
            raise DomainError("counts must be two-dimensional")
        if np.any(counts < 0) or np.any(counts != np.round(counts)):
            raise DomainError("counts must be non-negative integers")
        counts = counts.astype(np.int64)
        if int(counts.sum()) != int(self.frames):
            raise DomainError(
                f"counts sum to {int(counts.sum())}, expected {self.frames} frames"
            )
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "frames", int(self.frames))

    @classmethod
    def from_counts(cls, counts, metadata=None) -> "JointHistogram":
        counts = np.asarray(counts)
        return cls(counts, int(counts.sum()), metadata or {})

    @property
    def shape(self):
        return self.counts.shape

    def to_distribution(self) -> JointPhotonDistribution:
        if self.frames == 0:
            raise DomainError("histogram holds zero frames")
        return JointPhotonDistribution(
            self.counts / self.frames, 0.0, PHOTOCOUNT, dict(self.metadata)
        )


def mandel_rice_pmf(n, per_mode_mean, modes):
    """Mandel-Rice (negative binomial) probability of ``n`` quanta.

    ``per_mode_mean`` is the mean number per mode and ``modes`` the (possibly
    non-integer) mode count, so the total mean is ``modes * per_mode_mean``.
    Works elementwise on arrays of ``n``.
    """
    n_arr = np.asarray(n)
    if np.any(n_arr < 0) or np.any(n_arr != np.floor(n_arr)):
        raise DomainError("n must be a non-negative integer")
    if not per_mode_mean >= 0:
        raise DomainError(f"per_mode_mean must be >= 0, got {per_mode_mean}")
    if not modes >= 1:
        raise DomainError(f"modes must be >= 1, got {modes}")
    x = float(per_mode_mean)
    k = float(modes)
    n_f = n_arr.astype(float)
    log_p = (
        special.gammaln(n_f + k)
        - special.gammaln(n_f + 1.0)
        - special.gammaln(k)
        + special.xlogy(n_f, x)
        - (n_f + k) * np.log1p(x)
    )
    p = np.exp(log_p)
    return float(p) if np.ndim(p) == 0 else p


def _thermal_sf(n_max, spec: ThermalFieldSpec) -> float:
    """Probability of more than ``n_max`` quanta, computed independently of the pmf."""
    if spec.total_mean == 0:
        return 0.0
    p = 1.0 / (1.0 + spec.per_mode_mean)
    return float(stats.nbinom.sf(n_max, spec.modes, p))


def _auto_n_max(spec: ThermalFieldSpec, tail_budget, hard_limit) -> int:
    if spec.total_mean == 0:
        return 0
    p = 1.0 / (1.0 + spec.per_mode_mean)
    guess = stats.nbinom.isf(tail_budget, spec.modes, p)
    n = int(np.clip(guess if np.isfinite(guess) else hard_limit, 0, hard_limit))
    while n > 0 and _thermal_sf(n - 1, spec) < tail_budget:
        n -= 1
    while n < hard_limit and _thermal_sf(n, spec) >= tail_budget:
        n += 1
    tail = _thermal_sf(n, spec)
    if tail >= tail_budget:
        raise TruncationError(
            f"thermal field with mean {spec.total_mean} needs more than "
            f"{hard_limit} entries for tail < {tail_budget}",
            tail_mass=tail,
        )
    return n


def thermal_marginal(
    spec: ThermalFieldSpec,
    n_max: int | None = None,
    tail_budget: float = DEFAULT_TAIL_BUDGET,
    hard_limit: int = DEFAULT_HARD_LIMIT,
):
    """Photon-number distribution of a multi-mode thermal field.

    Returns ``(probabilities, tail_mass)`` for ``n = 0 .. n_max``.  When
    ``n_max`` is omitted it is the smallest bound whose tail is below
    ``tail_budget``.
    """
    if n_max is None:
        n_max = _auto_n_max(spec, tail_budget, hard_limit)
    if n_max < 0:
        raise DomainError("n_max must be non-negative")
    probs = mandel_rice_pmf(np.arange(n_max + 1), spec.per_mode_mean, spec.modes)
    probs = np.atleast_1d(probs)
    tail = _thermal_sf(n_max, spec)
    if tail >= tail_budget and tail > 0:
        raise TruncationError(
            f"tail mass {tail:.3e} exceeds budget {tail_budget:.1e} at n_max={n_max}",
            tail_mass=tail,
        )
    return probs, tail


def ideal_twb(
    spec: TwinBeamSpec,
    n_max: int | None = None,
    tail_budget: float = DEFAULT_TAIL_BUDGET,
    hard_limit: int = DEFAULT_HARD_LIMIT,
) -> JointPhotonDistribution:
    """Perfectly paired multi-mode twin beam: ``q(n, n)`` is Mandel-Rice."""
    marginal_spec = ThermalFieldSpec(spec.pair_mean, spec.paired_modes)
    probs, tail = thermal_marginal(marginal_spec, n_max, tail_budget, hard_limit)
    return JointPhotonDistribution(
        np.diag(probs),
        tail,
        PHOTON,
        {"source": "ideal_twb", "pair_mean": spec.pair_mean,
         "paired_modes": spec.paired_modes},
    )


def _convolution_matrix(kernel: np.ndarray, size: int) -> np.ndarray:
    column = np.concatenate([kernel, np.zeros(size - 1)])
    row = np.zeros(size)
    row[0] = kernel[0]
    return linalg.toeplitz(column, row)


def _trim(table: np.ndarray, tail: float, budget: float):
    """Drop trailing rows/columns while the accumulated tail stays below budget."""
    row_mass = table.sum(axis=1)
    col_mass = table.sum(axis=0)
    rows, cols = table.shape
    while rows > 1 and tail + row_mass[rows - 1] < budget:
        tail += row_mass[rows - 1]
        col_mass -= table[rows - 1, :cols]
        rows -= 1
    while cols > 1 and tail + col_mass[cols - 1] < budget:
        tail += table[:rows, cols - 1].sum()
        cols -= 1
    return table[:rows, :cols]


def convolve_noise(
    dist: JointPhotonDistribution,
    noise_s: ThermalFieldSpec,
    noise_i: ThermalFieldSpec | None = None,
    tail_budget: float = DEFAULT_TAIL_BUDGET,
    hard_limit: int = DEFAULT_HARD_LIMIT,
) -> JointPhotonDistribution:
    """Superimpose independent thermal noise onto each arm.

    The output is the two-dimensional convolution of ``dist`` with the product
    of the two noise marginals.  ``noise_i`` defaults to ``noise_s``.
    """
    if noise_i is None:
        noise_i = noise_s
    if noise_s.total_mean == 0 and noise_i.total_mean == 0:
        return dist
    # each noise marginal gets a share of the budget; the remainder goes to trimming
    share = tail_budget / 4
    ps, _ = thermal_marginal(noise_s, None, share, hard_limit)
    pi, _ = thermal_marginal(noise_i, None, share, hard_limit)
    rows, cols = dist.shape
    table = _convolution_matrix(ps, rows) @ dist.table @ _convolution_matrix(pi, cols).T
    np.clip(table, 0.0, None, out=table)
    # the budget bounds the tail added here, on top of what the input already lost
    allowed = dist.tail_mass + tail_budget
    table = _trim(table, max(0.0, 1.0 - table.sum()), allowed)
    if table.shape[0] > hard_limit + 1 or table.shape[1] > hard_limit + 1:
        table = table[: hard_limit + 1, : hard_limit + 1]
    tail = max(0.0, 1.0 - float(table.sum()))
    if tail >= allowed:
        raise TruncationError(
            f"noisy distribution exceeds {hard_limit} entries per axis "
            f"(tail {tail:.3e})",
            tail_mass=tail,
        )
    meta = dict(dist.metadata)
    meta.setdefault("noise", []).append(
        {"signal": [noise_s.total_mean, noise_s.modes],
         "idler": [noise_i.total_mean, noise_i.modes]}
    )
    return JointPhotonDistribution(np.ascontiguousarray(table), tail, dist.axis_labels, meta)


def make_rng(seed) -> np.random.Generator:
    """Counter-based generator used for every random draw in the package."""
    return np.random.Generator(np.random.Philox(seed))


def sample_histogram(dist: JointPhotonDistribution, frames: int, seed) -> JointHistogram:
    """Multinomial draw of ``frames`` detection frames from ``dist``.

    The truncated tail is excluded: cells are drawn with probabilities
    renormalised over the table.
    """
    if frames < 1:
        raise DomainError("frames must be >= 1")
    rng = make_rng(seed)
    probs = dist.table.ravel() / dist.total
    counts = rng.multinomial(frames, probs).reshape(dist.shape)
    meta = {"generator": GENERATOR_NAME, "seed": _jsonable_seed(seed),
            "source_tail_mass": dist.tail_mass}
    return JointHistogram(counts, frames, meta)


def _jsonable_seed(seed):
    if isinstance(seed, (list, tuple)):
        return [int(s) for s in seed]
    return int(seed)
