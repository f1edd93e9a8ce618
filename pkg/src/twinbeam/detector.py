"""Pixelated photon-counting camera (iCCD) response.

A beam of ``n`` photons hits a detection region of ``N`` pixels.  Each photon
is detected with efficiency ``eta`` in a uniformly random pixel and every
pixel also fires spontaneously with dark-count probability ``D``.  ``T(c, n)``
is the probability that exactly ``c`` pixels fire.

Two independent evaluation routes are provided:

* the closed alternating sum over ``l = 0..c`` (inclusion-exclusion on the
  silent pixels), evaluated with sign-split log-sum-exp and an adaptive
  high-precision fallback when cancellation eats the double-precision digits;
* a positive-term recurrence on the number of occupied pixels, used for
  tabulation since it never cancels.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import mpmath
import numpy as np
from scipy import special, stats

from .errors import DomainError, PrecisionError
from .states import PHOTOCOUNT, PHOTON, JointPhotonDistribution

DEFAULT_C_MAX = 30
CLAMP_EPS = 1e-9
# accept the double-precision alternating sum only if its estimated relative
# error is below this; otherwise use the high-precision route
FAST_PATH_REL_ERROR = 1e-10

CALIBRATED = {
    "signal": dict(efficiency=0.230, pixels=4096, dark_mean_per_pixel=0.040 / 4096),
    "idler": dict(efficiency=0.220, pixels=4096, dark_mean_per_pixel=0.040 / 4096),
}


@dataclass(frozen=True)
class DetectorModel:
    """Detection region of the camera.

    Attributes
    ----------
    efficiency : float
        Detection efficiency in [0, 1].
    pixels : int
        Number of active pixels.
    dark_mean_per_pixel : float
        Mean dark count per pixel and frame, used as a per-pixel probability.
    """

    efficiency: float
    pixels: int = 4096
    dark_mean_per_pixel: float = 0.040 / 4096

    def __post_init__(self):
        if not 0.0 <= self.efficiency <= 1.0:
            raise DomainError(f"efficiency must be in [0, 1], got {self.efficiency}")
        if int(self.pixels) != self.pixels or self.pixels < 1:
            raise DomainError(f"pixels must be a positive integer, got {self.pixels}")
        if not 0.0 <= self.dark_mean_per_pixel < 1.0:
            raise DomainError(
                f"dark_mean_per_pixel must be in [0, 1), got {self.dark_mean_per_pixel}"
            )
        object.__setattr__(self, "pixels", int(self.pixels))

    @classmethod
    def calibrated(cls, arm: str = "signal") -> "DetectorModel":
        return cls(**CALIBRATED[arm])

    @property
    def dark_total(self) -> float:
        """Mean dark counts of the whole region, ``D * N``."""
        return self.dark_mean_per_pixel * self.pixels

    def to_dict(self) -> dict:
        return {"efficiency": self.efficiency, "pixels": self.pixels,
                "dark_mean_per_pixel": self.dark_mean_per_pixel}


@dataclass(frozen=True, eq=False)
class PovmMatrix:
    """Tabulated response ``T(c, n)`` for ``c <= c_max`` and ``n <= n_max``.

    ``captured[n]`` is the probability mass of column ``n`` inside the table and
    ``uncaptured[n]`` its complement, evaluated directly so that tiny tails keep
    their relative precision.
    """

    entries: np.ndarray
    model: DetectorModel | None
    captured: np.ndarray
    uncaptured: np.ndarray
    clamped: int = 0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("entries", "captured", "uncaptured"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def c_max(self) -> int:
        return self.entries.shape[0] - 1

    @property
    def n_max(self) -> int:
        return self.entries.shape[1] - 1

    @classmethod
    def identity(cls, size: int) -> "PovmMatrix":
        """Perfect photon-number-resolving detection on ``size`` levels."""
        return cls(np.eye(size), None, np.ones(size), np.zeros(size),
                   metadata={"route": "identity"})

    @classmethod
    def from_entries(cls, entries, model=None) -> "PovmMatrix":
        entries = np.asarray(entries, dtype=float)
        captured = entries.sum(axis=0)
        return cls(entries, model, captured, np.clip(1.0 - captured, 0.0, None),
                   metadata={"route": "explicit"})

    def restrict(self, c_max: int | None = None, n_max: int | None = None) -> "PovmMatrix":
        """Sub-table with fewer rows and/or columns."""
        c_max = self.c_max if c_max is None else c_max
        n_max = self.n_max if n_max is None else n_max
        if c_max > self.c_max or n_max > self.n_max:
            raise DomainError("restriction exceeds tabulated range")
        sub = self.entries[: c_max + 1, : n_max + 1]
        captured = sub.sum(axis=0)
        uncaptured = self.uncaptured[: n_max + 1] + (self.captured[: n_max + 1] - captured)
        return PovmMatrix(sub, self.model, captured, uncaptured, self.clamped,
                          dict(self.metadata))


def _check_element_args(model: DetectorModel, c: int, n: int):
    if c < 0 or n < 0:
        raise DomainError("c and n must be non-negative")
    if c > model.pixels:
        raise DomainError(f"c={c} exceeds the pixel count {model.pixels}")


def _alternating_terms(model: DetectorModel, c: int, n: int):
    """Log-magnitudes and signs of the terms of the inclusion-exclusion sum.

    Term ``l`` is ``binom(c, l) (-1)^(c-l) (1-D)^(N-l) (1 - eta (N-l)/N)^n``,
    an algebraic rearrangement of the camera formula that stays finite at
    ``eta = 1``.
    """
    N = model.pixels
    eta = model.efficiency
    D = model.dark_mean_per_pixel
    l = np.arange(c + 1, dtype=float)
    base = 1.0 - eta * (N - l) / N
    log_mag = (
        np.array([_log_binom(c, k) for k in range(c + 1)])
        + (N - l) * np.log1p(-D)
        + special.xlogy(n, base)
    )
    signs = np.where((c - np.arange(c + 1)) % 2 == 0, 1.0, -1.0)
    return log_mag, signs


def _log_binom(N, c):
    return math.log(math.comb(N, c))


def _alternating_fast(model: DetectorModel, c: int, n: int):
    """Double-precision sign-split log-sum-exp; returns (value, rel_error_estimate)."""
    log_mag, signs = _alternating_terms(model, c, n)
    finite = np.isfinite(log_mag)
    pos = log_mag[(signs > 0) & finite]
    neg = log_mag[(signs < 0) & finite]
    lp = special.logsumexp(pos) if pos.size else -np.inf
    ln = special.logsumexp(neg) if neg.size else -np.inf
    if lp == -np.inf and ln == -np.inf:
        return 0.0, 0.0
    top = max(lp, ln)
    a = math.exp(lp - top) if lp > -np.inf else 0.0
    b = math.exp(ln - top) if ln > -np.inf else 0.0
    diff = a - b
    # rounding in each partial sum is ~ (terms) * eps relative to the larger sum
    round_off = (c + 2) * np.finfo(float).eps * (a + b)
    rel_error = math.inf if diff == 0 else round_off / abs(diff)
    log_value = _log_binom(model.pixels, c) + top
    value = math.exp(log_value) * diff if diff != 0 else 0.0
    return value, rel_error


def _alternating_exact(model: DetectorModel, c: int, n: int, dps: int) -> float:
    """The alternating sum at ``dps`` decimal digits (inputs taken as exact binaries)."""
    with mpmath.workdps(dps):
        N = model.pixels
        eta = mpmath.mpf(model.efficiency)
        one_minus_d = 1 - mpmath.mpf(model.dark_mean_per_pixel)
        total = mpmath.mpf(0)
        for l in range(c + 1):
            base = 1 - eta * (N - l) / N
            term = mpmath.binomial(c, l) * one_minus_d ** (N - l) * base**n
            total += term if (c - l) % 2 == 0 else -term
        return float(mpmath.binomial(N, c) * total)


def povm_element(model: DetectorModel, c: int, n: int, method: str = "auto") -> float:
    """Probability ``T(c, n)`` of ``c`` fired pixels given ``n`` photons.

    ``method`` is ``"auto"`` (double precision, falling back to high precision
    when cancellation is detected), ``"fast"`` (double precision only; raises
    :class:`PrecisionError` on cancellation), ``"exact"`` (high precision) or
    ``"occupancy"`` (positive-term recurrence).
    """
    c, n = int(c), int(n)
    _check_element_args(model, c, n)
    if method not in ("auto", "fast", "exact", "occupancy"):
        raise DomainError(f"unknown method {method!r}")
    if method == "occupancy":
        return float(_occupancy_table(model, c, n)[c, n])
    if method == "exact":
        return _exact_with_digits(model, c, n)
    value, rel_error = _alternating_fast(model, c, n)
    if rel_error <= FAST_PATH_REL_ERROR:
        return value
    if method == "fast":
        raise PrecisionError(
            f"cancellation in T({c}, {n}): estimated relative error {rel_error:.2e}",
            relative_error=rel_error,
        )
    return _exact_with_digits(model, c, n)


def _exact_with_digits(model, c, n) -> float:
    _, rel_error = _alternating_fast(model, c, n)
    eps = np.finfo(float).eps
    if math.isfinite(rel_error):
        dps = 30 + max(0, math.ceil(math.log10(rel_error / eps)))
    else:
        dps = 30 + 4 * c
    value = _alternating_exact(model, c, n, dps)
    # raise the precision until two evaluations agree
    for _ in range(8):
        dps *= 2
        check = _alternating_exact(model, c, n, dps)
        if math.isclose(value, check, rel_tol=1e-13, abs_tol=0.0):
            return check
        value = check
    raise PrecisionError(f"high-precision evaluation of T({c}, {n}) did not settle")


def _occupancy_distribution(model: DetectorModel, n_max: int) -> np.ndarray:
    """``Q[n, j]``: probability that ``n`` photons light exactly ``j`` distinct pixels."""
    N = model.pixels
    eta = model.efficiency
    J = min(n_max, N)
    Q = np.zeros((n_max + 1, J + 1))
    Q[0, 0] = 1.0
    j = np.arange(J + 1, dtype=float)
    stay = (1.0 - eta) + eta * j / N
    move = eta * (N - j + 1) / N  # into j from j - 1
    for k in range(n_max):
        prev = Q[k]
        Q[k + 1] = stay * prev
        Q[k + 1, 1:] += move[1:] * prev[:-1]
    return Q


def _dark_matrix(model: DetectorModel, c_max: int, J: int):
    """``B[c, j]``: probability of ``c - j`` dark counts among ``N - j`` idle pixels."""
    N = model.pixels
    D = model.dark_mean_per_pixel
    c = np.arange(c_max + 1)[:, None]
    j = np.arange(J + 1)[None, :]
    k, m = c - j, N - j
    valid = (k >= 0) & (k <= m)
    k, m = np.where(valid, k, 0), np.where(valid, m, 0)
    # log space: scipy's binom.pmf overflows for subnormal D
    log_pmf = (special.gammaln(m + 1) - special.gammaln(k + 1) - special.gammaln(m - k + 1)
               + special.xlogy(k, D) + special.xlog1py(m - k, -D))
    return np.where(valid, np.exp(log_pmf), 0.0)


def _occupancy_table(model: DetectorModel, c_max: int, n_max: int):
    Q = _occupancy_distribution(model, n_max)
    return _dark_matrix(model, c_max, Q.shape[1] - 1) @ Q.T


def povm_matrix(
    model: DetectorModel,
    c_max: int = DEFAULT_C_MAX,
    n_max: int = 120,
    method: str = "occupancy",
) -> PovmMatrix:
    """Tabulate ``T(c, n)`` for ``0 <= c <= c_max`` and ``0 <= n <= n_max``.

    ``method="alternating"`` evaluates every cell through :func:`povm_element`
    instead; it is much slower and meant for cross-checks on small tables.
    """
    if c_max < 0 or n_max < 0:
        raise DomainError("c_max and n_max must be non-negative")
    if c_max > model.pixels:
        raise DomainError(f"c_max={c_max} exceeds the pixel count {model.pixels}")
    if c_max > model.pixels / 4:
        warnings.warn(
            f"c_max={c_max} is beyond N/4={model.pixels / 4:g}; the camera model "
            "is untested in that regime",
            stacklevel=2,
        )
    Q = _occupancy_distribution(model, n_max)
    J = Q.shape[1] - 1
    clamped = 0
    if method == "occupancy":
        entries = _dark_matrix(model, c_max, J) @ Q.T
    elif method == "alternating":
        entries = np.empty((c_max + 1, n_max + 1))
        for c in range(c_max + 1):
            for n in range(n_max + 1):
                entries[c, n] = povm_element(model, c, n)
        low = entries < 0
        if np.any(entries < -CLAMP_EPS) or np.any(entries > 1 + CLAMP_EPS):
            raise PrecisionError("POVM entry outside [0, 1] beyond clamping tolerance")
        clamped = int(low.sum() + (entries > 1).sum())
        np.clip(entries, 0.0, 1.0, out=entries)
    else:
        raise DomainError(f"unknown method {method!r}")
    # mass beyond c_max: c - j dark counts exceeding c_max - j, summed over occupancy
    j = np.arange(J + 1)
    dark_sf = stats.binom.sf(c_max - j, model.pixels - j, model.dark_mean_per_pixel)
    uncaptured = Q @ np.where(j <= c_max, dark_sf, 1.0)
    captured = entries.sum(axis=0)
    return PovmMatrix(entries, model, captured, uncaptured, clamped,
                      {"route": method, **model.to_dict()})


def forward_detect(
    dist: JointPhotonDistribution, povm_s: PovmMatrix, povm_i: PovmMatrix
) -> JointPhotonDistribution:
    """Photocount distribution ``f = T_s p T_i^T`` of a photon-number distribution."""
    rows, cols = dist.shape
    if povm_s.n_max + 1 < rows or povm_i.n_max + 1 < cols:
        raise DomainError(
            f"POVM covers n <= ({povm_s.n_max}, {povm_i.n_max}) but the "
            f"distribution has shape {dist.shape}"
        )
    f = povm_s.entries[:, :rows] @ dist.table @ povm_i.entries[:, :cols].T
    np.clip(f, 0.0, None, out=f)
    tail = max(0.0, 1.0 - float(f.sum()))
    meta = dict(dist.metadata)
    meta["detection"] = {
        "signal": povm_s.model.to_dict() if povm_s.model else "identity",
        "idler": povm_i.model.to_dict() if povm_i.model else "identity",
    }
    return JointPhotonDistribution(f, tail, PHOTOCOUNT, meta)


def mean_photocounts(model: DetectorModel, photon_probs) -> float:
    """Exact mean number of fired pixels for a photon-number marginal.

    Each pixel stays dark with probability ``(1 - D)(1 - eta/N)^n``.
    """
    probs = np.asarray(photon_probs, dtype=float)
    n = np.arange(probs.size)
    N = model.pixels
    silent = (1.0 - model.dark_mean_per_pixel) * (1.0 - model.efficiency / N) ** n
    return float(probs @ (N * (1.0 - silent)))


__all__ = [
    "DetectorModel", "PovmMatrix", "povm_element", "povm_matrix",
    "forward_detect", "mean_photocounts", "PHOTON", "PHOTOCOUNT",
]
