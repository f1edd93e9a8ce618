"""Non-classicality identifiers and entanglement quantifiers.

Identifiers (M, E2, E3, Q) are moment functionals that turn negative for
non-classical twin beams.  Each is quantified two ways: by the ordering
depth ``tau`` at which s-ordered moments stop violating it, and by the mean
``nu`` of single-mode thermal noise per arm needed to conceal it.  For one
typical paired mode the Gaussian negativity ``E_N`` is available as well.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .errors import ConvergenceError, DomainError, NonPhysicalError, TwinBeamError
from .moments import (
    SINGLE_MODE,
    WHOLE_BEAM,
    IntensityMomentSet,
    add_thermal_noise_to_moments,
    intensity_moments_of,
    s_ordered_moments,
)
from .states import JointPhotonDistribution, ThermalFieldSpec, convolve_noise

DEFAULT_TOL = 1e-8
MAX_BISECTIONS = 200
MAX_NOISE = 1e6
NEGATIVITY_CLAMP = 1e-9


class NiId(str, enum.Enum):
    M = "M"
    E2 = "E2"
    E3 = "E3"
    Q = "Q"
    EN = "EN"


WHOLE_BEAM_IDS = (NiId.M, NiId.E2, NiId.E3)
SINGLE_MODE_IDS = (NiId.M, NiId.E2, NiId.E3, NiId.Q, NiId.EN)


def noise_reduction_factor(m: IntensityMomentSet) -> float:
    """``R = 1 + <[d(W_s - W_i)]^2> / (<W_s> + <W_i>)``; ``R < 1`` is non-classical."""
    mu_s, mu_i = m.means
    total = mu_s + mu_i
    if not total > 0:
        raise DomainError("noise reduction factor needs a positive total mean")
    var_s = m[2, 0] - mu_s**2
    var_i = m[0, 2] - mu_i**2
    cov = m[1, 1] - mu_s * mu_i
    return 1.0 + (var_s + var_i - 2.0 * cov) / total


@dataclass(frozen=True)
class NegativityResult:
    value: float
    b_p: float
    b_s: float
    b_i: float
    clamped: bool = False

    @property
    def entangled(self) -> bool:
        return self.value > 0

    @property
    def reported(self) -> float:
        """Negativity as an entanglement measure (negative raw values read as 0)."""
        return max(self.value, 0.0)


def negativity(m: IntensityMomentSet) -> NegativityResult:
    """Negativity of the two-mode Gaussian state sharing these single-mode moments.

    The state is parametrised by the pair population ``b_p`` fixed by the
    intensity covariance, ``b_p = -1/2 + sqrt(1/4 + <dw_s dw_i>)``, and by the
    extra (noise) populations ``b_a = <w_a> - b_p``.
    """
    if m.scale != SINGLE_MODE:
        raise DomainError("negativity needs single-mode moments")
    mu_s, mu_i = m.means
    cov = m[1, 1] - mu_s * mu_i
    disc = 0.25 + cov
    if disc < 0:
        raise NonPhysicalError(f"intensity covariance {cov:.3e} is below -1/4")
    b_p = -0.5 + math.sqrt(disc)
    b_s = mu_s - b_p
    b_i = mu_i - b_p
    clamped = False
    if min(b_s, b_i) < -NEGATIVITY_CLAMP:
        raise NonPhysicalError(
            f"negative noise population (b_s={b_s:.3e}, b_i={b_i:.3e}); the "
            "single-mode reduction is not a physical Gaussian state"
        )
    if b_s < 0 or b_i < 0:
        b_s, b_i, clamped = max(b_s, 0.0), max(b_i, 0.0), True
    numerator = (
        2 * b_p - (b_s + b_i) * (4 * b_p + 1) - 4 * b_s * b_i
        + math.sqrt((b_s - b_i) ** 2 + 4 * b_p * (b_p + 1))
    )
    denominator = 4 * (b_s + b_i) * (2 * b_p + 1) + 8 * b_s * b_i + 2
    return NegativityResult(numerator / denominator, b_p, b_s, b_i, clamped)


def evaluate_ni(ni: NiId, m: IntensityMomentSet) -> float:
    """Signed identifier value; negative M, E2, E3, Q and positive EN flag non-classicality."""
    ni = NiId(ni)
    if ni in (NiId.Q, NiId.EN) and m.scale != SINGLE_MODE:
        raise DomainError(f"{ni.value} is defined for single-mode moments only")
    if ni is NiId.M:
        return m[2, 0] * m[0, 2] - m[1, 1] ** 2
    if ni is NiId.E2:
        return m[2, 0] + m[0, 2] - 2.0 * m[1, 1]
    if ni is NiId.E3:
        if m.max_order < 3:
            raise DomainError("E3 needs third-order moments")
        return m[3, 0] + m[0, 3] - m[2, 1] - m[1, 2]
    if ni is NiId.Q:
        return 2.0 * m[1, 0] * m[0, 1] - m[1, 1]
    return negativity(m).value


def _witness(ni: NiId, m: IntensityMomentSet) -> float:
    """Identifier oriented so that negative always means non-classical."""
    value = evaluate_ni(ni, m)
    return -value if ni is NiId.EN else value


def evaluate_ni_gaussian(ni: NiId, mean_s: float, mean_i: float, cross: float) -> float:
    """Closed forms of the identifiers for single-mode Gaussian fields."""
    ni = NiId(ni)
    q = 2.0 * mean_s * mean_i - cross
    diff2 = (mean_s - mean_i) ** 2
    if ni is NiId.Q:
        return q
    if ni is NiId.M:
        return q * (2.0 * mean_s * mean_i + cross)
    if ni is NiId.E2:
        return 2.0 * q + 2.0 * diff2
    if ni is NiId.E3:
        total = mean_s + mean_i
        return 2.0 * q * total + 2.0 * (mean_s**3 + mean_i**3) + 4.0 * diff2 * total
    raise DomainError("no Gaussian closed form for EN")


def gaussian_factorized(mean_s: float, mean_i: float, cross: float,
                        scale: str = SINGLE_MODE) -> IntensityMomentSet:
    """Third-order moments of a single-mode Gaussian (thermal-marginal) field."""
    return IntensityMomentSet.from_dict(
        {
            (1, 0): mean_s, (0, 1): mean_i, (1, 1): cross,
            (2, 0): 2 * mean_s**2, (0, 2): 2 * mean_i**2,
            (3, 0): 6 * mean_s**3, (0, 3): 6 * mean_i**3,
            (2, 1): 2 * cross * mean_s, (1, 2): 2 * cross * mean_i,
        },
        3,
        scale=scale,
    )


def _bisect(fn, lo, hi, xtol):
    try:
        return optimize.bisect(fn, lo, hi, xtol=xtol, maxiter=MAX_BISECTIONS)
    except RuntimeError as exc:
        raise ConvergenceError(str(exc)) from exc


@dataclass(frozen=True)
class DepthResult:
    tau: float
    saturated: bool = False

    @property
    def s_threshold(self) -> float:
        return 1.0 - 2.0 * self.tau


def nonclassicality_depth(
    ni: NiId, m: IntensityMomentSet, tol: float = DEFAULT_TOL, initial_step: float = 1.0
) -> DepthResult:
    """Depth ``tau = (1 - s_th)/2`` at which s-ordered moments nullify the identifier.

    The offset ``t = (1 - s)/2`` is bracketed from ``initial_step`` upward in
    doubling steps and capped at ``tau = 1``; the root is then bisected to
    ``tol`` in ``s``.
    """
    ni = NiId(ni)
    if m.ordering != 1.0:
        raise DomainError("depth is measured from normally ordered moments")

    def witness(t):
        return _witness(ni, s_ordered_moments(m, 1.0 - 2.0 * t))

    if witness(0.0) >= 0:
        return DepthResult(0.0)
    lo, hi = 0.0, min(initial_step, 1.0)
    while witness(hi) < 0:
        if hi >= 1.0:
            return DepthResult(1.0, saturated=True)
        lo, hi = hi, min(2.0 * hi, 1.0)
    return DepthResult(_bisect(witness, lo, hi, tol / 2.0))


@dataclass(frozen=True)
class NcpResult:
    nu: float
    unbounded: bool = False


def ncp(
    ni: NiId,
    source,
    tol: float = DEFAULT_TOL,
    path: str = "moments",
    initial_step: float = 1.0,
    max_noise: float = MAX_NOISE,
) -> NcpResult:
    """Mean single-mode thermal noise per arm that conceals the identifier.

    ``source`` is an :class:`IntensityMomentSet` or a
    :class:`JointPhotonDistribution`.  ``path="moments"`` adds the noise to the
    moments; ``path="distribution"`` convolves the distribution with the noise
    and recomputes its moments (distribution sources only).
    """
    ni = NiId(ni)
    if path == "moments":
        m = source if isinstance(source, IntensityMomentSet) else intensity_moments_of(source)

        def witness(nu):
            return _witness(ni, add_thermal_noise_to_moments(m, nu, nu, 1.0))
    elif path == "distribution":
        if not isinstance(source, JointPhotonDistribution):
            raise DomainError("the distribution path needs a JointPhotonDistribution")
        order = 3 if ni is NiId.E3 else 2

        def witness(nu):
            noisy = source if nu == 0 else convolve_noise(source, ThermalFieldSpec(nu, 1.0))
            return _witness(ni, intensity_moments_of(noisy, order))
    else:
        raise DomainError(f"unknown path {path!r}")

    if witness(0.0) >= 0:
        return NcpResult(0.0)
    lo, hi = 0.0, initial_step
    while witness(hi) < 0:
        if hi >= max_noise:
            return NcpResult(math.inf, unbounded=True)
        lo, hi = hi, min(2.0 * hi, max_noise)
    return NcpResult(_bisect(witness, lo, hi, tol / 2.0))


@dataclass
class QuantifierReport:
    """All quantifiers of one moment set (one branch, one mode scale)."""

    branch: str
    scale: str
    R: float = math.nan
    values: dict = field(default_factory=dict)
    depth: dict = field(default_factory=dict)
    depth_saturated: dict = field(default_factory=dict)
    ncp: dict = field(default_factory=dict)
    ncp_unbounded: dict = field(default_factory=dict)
    EN: float = math.nan
    EN_raw: float = math.nan
    entangled: bool | None = None
    errors: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def flat(self) -> dict:
        """Scalar quantities keyed by name (``R``, ``E2``, ``tau_M``, ``nu_E3``, ``EN`` ...)."""
        out = {"R": self.R}
        for key, value in self.values.items():
            out[key] = value
        for key, value in self.depth.items():
            out[f"tau_{key}"] = value
        for key, value in self.ncp.items():
            out[f"nu_{key}"] = value
        if self.scale == SINGLE_MODE:
            out["EN"] = self.EN
        return out

    def to_dict(self) -> dict:
        return {
            "branch": self.branch,
            "scale": self.scale,
            "R": self.R,
            "values": dict(self.values),
            "depth": dict(self.depth),
            "depth_saturated": dict(self.depth_saturated),
            "ncp": dict(self.ncp),
            "ncp_unbounded": dict(self.ncp_unbounded),
            "EN": self.EN,
            "EN_raw": self.EN_raw,
            "entangled": self.entangled,
            "errors": dict(self.errors),
            "notes": list(self.notes),
        }


def quantify(m: IntensityMomentSet, ids=None, tol: float = DEFAULT_TOL) -> QuantifierReport:
    """Evaluate R, identifiers, depths, counting parameters and (single-mode) E_N.

    Failures of individual quantities are recorded as NaN plus a note rather
    than raised, so that one bad identifier does not hide the others.
    """
    if ids is None:
        ids = SINGLE_MODE_IDS if m.scale == SINGLE_MODE else WHOLE_BEAM_IDS
    ids = [NiId(i) for i in ids if m.max_order >= 3 or NiId(i) is not NiId.E3]
    report = QuantifierReport(m.branch, m.scale)
    try:
        report.R = noise_reduction_factor(m)
    except TwinBeamError as exc:
        report.notes.append(f"R: {exc}")
    if m.scale == SINGLE_MODE:
        try:
            neg = negativity(m)
            report.EN_raw = neg.value
            report.EN = neg.reported
            report.entangled = neg.entangled
            if neg.clamped:
                report.notes.append("EN: noise populations clamped to 0")
        except TwinBeamError as exc:
            report.notes.append(f"EN: {exc}")
    for ni in ids:
        key = ni.value
        try:
            report.values[key] = evaluate_ni(ni, m)
        except TwinBeamError as exc:
            report.values[key] = math.nan
            report.notes.append(f"{key}: {exc}")
            report.depth[key] = report.ncp[key] = math.nan
            continue
        try:
            d = nonclassicality_depth(ni, m, tol)
            report.depth[key] = d.tau
            report.depth_saturated[key] = d.saturated
        except TwinBeamError as exc:
            report.depth[key] = math.nan
            report.notes.append(f"tau_{key}: {exc}")
        try:
            n = ncp(ni, m, tol)
            report.ncp[key] = n.nu
            report.ncp_unbounded[key] = n.unbounded
        except TwinBeamError as exc:
            report.ncp[key] = math.nan
            report.notes.append(f"nu_{key}: {exc}")
    return report
