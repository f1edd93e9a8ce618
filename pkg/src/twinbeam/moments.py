"""Moment algebra for two-arm photon statistics.

Moment sets are square arrays ``values[k, l] = <A^k B^l>`` with entries of
total order ``k + l > max_order`` set to NaN.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache
from math import comb, factorial

import numpy as np
from scipy import special

from .errors import DegenerateInputError, DomainError
from .states import PHOTOCOUNT, PHOTON, JointHistogram, JointPhotonDistribution

WHOLE_BEAM = "whole-beam"
SINGLE_MODE = "single-mode"
MAX_SUPPORTED_ORDER = 6
DEFAULT_ORDER = 3


def _empty(max_order):
    values = np.full((max_order + 1, max_order + 1), np.nan)
    return values


def _frozen(values):
    values = np.array(values, dtype=float)
    values.setflags(write=False)
    return values


@dataclass(frozen=True, eq=False)
class RawMomentSet:
    """Plain moments ``<a^i b^j>`` of photon numbers or photocounts."""

    values: np.ndarray
    max_order: int
    branch: str = PHOTON
    tail_mass: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values))

    def __getitem__(self, kl):
        return float(self.values[kl])


@dataclass(frozen=True, eq=False)
class IntensityMomentSet:
    """Intensity moments ``<W_s^k W_i^l>_s`` tagged with their ordering.

    ``ordering`` is the ordering parameter ``s`` (1 for normal order) and
    ``scale`` tells whole-beam moments ``W`` from single-mode moments ``w``.
    """

    values: np.ndarray
    max_order: int
    ordering: float = 1.0
    scale: str = WHOLE_BEAM
    branch: str = PHOTON
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values))
        if self.scale not in (WHOLE_BEAM, SINGLE_MODE):
            raise DomainError(f"unknown scale {self.scale!r}")

    def __getitem__(self, kl):
        return float(self.values[kl])

    @property
    def means(self):
        return self[1, 0], self[0, 1]

    def with_values(self, values, **changes) -> "IntensityMomentSet":
        return replace(self, values=values, **changes)

    @classmethod
    def from_dict(cls, moments: dict, max_order: int | None = None, **tags):
        """Build from ``{(k, l): value}``; ``(0, 0)`` defaults to 1."""
        if max_order is None:
            max_order = max(k + l for k, l in moments)
        values = _empty(max_order)
        for k in range(max_order + 1):
            for l in range(max_order + 1 - k):
                values[k, l] = moments.get((k, l), np.nan)
        values[0, 0] = moments.get((0, 0), 1.0)
        return cls(values, max_order, **tags)

    def to_dict(self) -> dict:
        return {
            "ordering": self.ordering,
            "scale": self.scale,
            "branch": self.branch,
            "max_order": self.max_order,
            "moments": [
                [k, l, float(self.values[k, l])]
                for k in range(self.max_order + 1)
                for l in range(self.max_order + 1 - k)
            ],
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "IntensityMomentSet":
        moments = {(int(k), int(l)): float(v) for k, l, v in data["moments"]}
        return cls.from_dict(
            moments, int(data["max_order"]), ordering=float(data["ordering"]),
            scale=data["scale"], branch=data["branch"],
        )


@dataclass(frozen=True)
class ModeEstimate:
    signal: float
    idler: float

    @property
    def average(self) -> float:
        return 0.5 * (self.signal + self.idler)


def _check_order(max_order):
    if not 1 <= max_order <= MAX_SUPPORTED_ORDER:
        raise DomainError(f"max_order must be in [1, {MAX_SUPPORTED_ORDER}], got {max_order}")


def raw_moments(table, max_order: int = DEFAULT_ORDER) -> RawMomentSet:
    """Moments ``<a^i b^j>`` of a distribution or histogram, ``i + j <= max_order``.

    The table is renormalised to unit mass; the truncated tail is only recorded.
    """
    _check_order(max_order)
    if isinstance(table, JointHistogram):
        dist = table.to_distribution()
    elif isinstance(table, JointPhotonDistribution):
        dist = table
    else:
        raise DomainError("expected a JointPhotonDistribution or JointHistogram")
    total = dist.total
    if total <= 0:
        raise DomainError("table carries no probability mass")
    q = dist.table / total
    a = np.arange(q.shape[0], dtype=float)
    b = np.arange(q.shape[1], dtype=float)
    pa = a[None, :] ** np.arange(max_order + 1)[:, None]   # (order, rows)
    pb = b[None, :] ** np.arange(max_order + 1)[:, None]
    full = pa @ q @ pb.T
    values = _empty(max_order)
    for i in range(max_order + 1):
        values[i, : max_order + 1 - i] = full[i, : max_order + 1 - i]
    values[0, 0] = 1.0
    branch = PHOTOCOUNT if dist.axis_labels == PHOTOCOUNT else PHOTON
    return RawMomentSet(values, max_order, branch, dist.tail_mass)


@lru_cache(maxsize=None)
def stirling_first_kind(k: int, m: int) -> int:
    """Signed Stirling number of the first kind, ``0 <= m <= k <= 8``."""
    if not (0 <= m <= k <= 8):
        raise DomainError(f"stirling_first_kind needs 0 <= m <= k <= 8, got ({k}, {m})")
    if k == 0:
        return 1 if m == 0 else 0
    if m == 0:
        return 0
    # s(k, m) = s(k-1, m-1) - (k-1) s(k-1, m)
    prev_same = stirling_first_kind(k - 1, m) if m <= k - 1 else 0
    return stirling_first_kind(k - 1, m - 1) - (k - 1) * prev_same


def _stirling_matrix(order):
    return np.array(
        [[stirling_first_kind(k, m) if m <= k else 0 for m in range(order + 1)]
         for k in range(order + 1)],
        dtype=float,
    )


def intensity_moments(raw: RawMomentSet) -> IntensityMomentSet:
    """Normally ordered intensity moments (factorial moments) from raw moments."""
    order = raw.max_order
    S = _stirling_matrix(order)
    filled = np.nan_to_num(raw.values, nan=0.0)
    full = S @ filled @ S.T
    values = _empty(order)
    for k in range(order + 1):
        values[k, : order + 1 - k] = full[k, : order + 1 - k]
    return IntensityMomentSet(values, order, 1.0, WHOLE_BEAM, raw.branch,
                              {"tail_mass": raw.tail_mass})


def intensity_moments_of(table, max_order: int = DEFAULT_ORDER) -> IntensityMomentSet:
    """Shortcut: intensity moments straight from a table."""
    return intensity_moments(raw_moments(table, max_order))


def _ordering_matrix(order, t):
    """``L[k, m] = binom(k, m) k!/m! t^(k-m)`` (zero above the diagonal)."""
    L = np.zeros((order + 1, order + 1))
    for k in range(order + 1):
        for m in range(k + 1):
            L[k, m] = comb(k, m) * factorial(k) / factorial(m) * t ** (k - m)
    return L


def _apply_per_arm(values, order, Ls, Li):
    filled = np.nan_to_num(values, nan=0.0)
    full = Ls @ filled @ Li.T
    out = _empty(order)
    for k in range(order + 1):
        out[k, : order + 1 - k] = full[k, : order + 1 - k]
    return out


def s_ordered_moments(m: IntensityMomentSet, s_target: float) -> IntensityMomentSet:
    """Re-order normally ordered moments to ordering parameter ``s_target <= 1``.

    Each arm picks up the Laguerre-type expansion
    ``<W^k>_s = sum_m binom(k, m) k!/m! t^(k-m) <W^m>`` with ``t = (1 - s)/2``;
    cross moments factor across the arms.  A set that is already s-ordered is
    shifted further, the offsets ``t`` being additive.
    """
    if s_target > 1:
        raise DomainError(f"s_target must be <= 1, got {s_target}")
    t = 0.5 * (m.ordering - s_target)
    if t == 0:
        return m
    L = _ordering_matrix(m.max_order, t)
    values = _apply_per_arm(m.values, m.max_order, L, L)
    return m.with_values(values, ordering=float(s_target))


def central_moments(m: IntensityMomentSet) -> np.ndarray:
    """``<(dW_s)^k (dW_i)^l>`` treating the intensities as classical variables."""
    order = m.max_order
    mu_s, mu_i = m.means
    Cs = np.array([[comb(k, a) * (-mu_s) ** (k - a) if a <= k else 0.0
                    for a in range(order + 1)] for k in range(order + 1)])
    Ci = np.array([[comb(l, b) * (-mu_i) ** (l - b) if b <= l else 0.0
                    for b in range(order + 1)] for l in range(order + 1)])
    return _apply_per_arm(m.values, order, Cs, Ci)


def _from_central(central, means, order):
    mu_s, mu_i = means
    Bs = np.array([[comb(k, a) * mu_s ** (k - a) if a <= k else 0.0
                    for a in range(order + 1)] for k in range(order + 1)])
    Bi = np.array([[comb(l, b) * mu_i ** (l - b) if b <= l else 0.0
                    for b in range(order + 1)] for l in range(order + 1)])
    return _apply_per_arm(central, order, Bs, Bi)


def estimate_modes(m: IntensityMomentSet) -> ModeEstimate:
    """Effective thermal mode numbers ``<W>^2 / <(dW)^2>`` of each arm."""
    if m.ordering != 1.0:
        raise DomainError("mode estimate needs normally ordered moments")
    if m.max_order < 2:
        raise DomainError("mode estimate needs second-order moments")
    ks = []
    for mean, second in ((m[1, 0], m[2, 0]), (m[0, 1], m[0, 2])):
        variance = second - mean**2
        if not variance > 0:
            raise DegenerateInputError(
                f"non-positive intensity variance {variance:.3e}; the marginal "
                "is not thermal-like"
            )
        ks.append(mean**2 / variance)
    return ModeEstimate(*ks)


def reduce_to_single_mode(m: IntensityMomentSet, modes: float) -> IntensityMomentSet:
    """Moments of one typical paired mode of a ``modes``-mode beam.

    Means and all central moments of order two and higher are divided by
    ``modes``; raw single-mode moments are rebuilt from them.
    """
    if not modes >= 1:
        raise DomainError(f"modes must be >= 1, got {modes}")
    central = central_moments(m) / modes
    central[0, 0] = 1.0
    central[1, 0] = central[0, 1] = 0.0
    means = (m[1, 0] / modes, m[0, 1] / modes)
    values = _from_central(central, means, m.max_order)
    meta = dict(m.metadata, modes=float(modes))
    return m.with_values(values, scale=SINGLE_MODE, metadata=meta)


def expand_to_whole_beam(m: IntensityMomentSet, modes: float) -> IntensityMomentSet:
    """Inverse of :func:`reduce_to_single_mode`."""
    central = central_moments(m) * modes
    central[0, 0] = 1.0
    central[1, 0] = central[0, 1] = 0.0
    means = (m[1, 0] * modes, m[0, 1] * modes)
    values = _from_central(central, means, m.max_order)
    return m.with_values(values, scale=WHOLE_BEAM)


def thermal_factorial_moments(mean: float, modes: float, order: int) -> np.ndarray:
    """``<x^k> = Gamma(K + k)/Gamma(K) (mean/K)^k`` for ``k = 0..order``."""
    k = np.arange(order + 1, dtype=float)
    return special.poch(modes, k) * (mean / modes) ** k


def add_thermal_noise_to_moments(
    m: IntensityMomentSet, noise_s: float, noise_i: float | None = None,
    noise_modes: float = 1.0,
) -> IntensityMomentSet:
    """Moments after adding independent thermal photons to each arm.

    Photon numbers add, so factorial moments combine binomially:
    ``<(W + x)^k> = sum_a binom(k, a) <W^a> <x^(k-a)>``.
    """
    if noise_i is None:
        noise_i = noise_s
    if noise_s < 0 or noise_i < 0:
        raise DomainError("noise means must be non-negative")
    if noise_modes < 1:
        raise DomainError("noise_modes must be >= 1")
    if m.ordering != 1.0:
        raise DomainError("noise is added to normally ordered moments only")
    if noise_s == 0 and noise_i == 0:
        return m
    order = m.max_order
    xs = thermal_factorial_moments(noise_s, noise_modes, order)
    xi = thermal_factorial_moments(noise_i, noise_modes, order)
    Ns = np.array([[comb(k, a) * xs[k - a] if a <= k else 0.0
                    for a in range(order + 1)] for k in range(order + 1)])
    Ni = np.array([[comb(l, b) * xi[l - b] if b <= l else 0.0
                    for b in range(order + 1)] for l in range(order + 1)])
    return m.with_values(_apply_per_arm(m.values, order, Ns, Ni))
