"""Noise-sweep scenario: synthetic twin beams, both analysis branches, tables.

Every grid point builds a noisy twin beam, detects it with the camera model,
optionally samples a finite number of frames, and is analysed twice: directly
from the photocount moments and from the EM-reconstructed photon-number
distribution.  Deterministic model curves come from adding thermal noise to
the moments of the noiseless twin beam.
"""
from __future__ import annotations

import dataclasses
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .detector import DetectorModel, forward_detect, povm_matrix
from .errors import (
    ConfigError,
    ConvergenceError,
    DegenerateInputError,
    DomainError,
    TwinBeamError,
)
from .io import load_table, read_json, write_json, write_rows
from .moments import (
    ModeEstimate,
    add_thermal_noise_to_moments,
    estimate_modes,
    intensity_moments_of,
    reduce_to_single_mode,
)
from .quantifiers import DEFAULT_TOL, WHOLE_BEAM_IDS, QuantifierReport, quantify
from .reconstruction import EmDiagnostics, EmOptions, reconstruct
from .states import (
    PHOTOCOUNT,
    PHOTON,
    JointHistogram,
    JointPhotonDistribution,
    ThermalFieldSpec,
    TwinBeamSpec,
    convolve_noise,
    ideal_twb,
    make_rng,
    sample_histogram,
)

DEFAULT_GRID = tuple(float(v) for v in np.linspace(0.0, 14.0, 36))
SWEEP_EM = EmOptions(max_iterations=300, record_trace=False)
MIN_RESAMPLES = 10
MAX_FAILURE_FRACTION = 0.2
SINGLE_MODE_KEYS = ("M", "E2", "EN")

# short branch suffixes used in table columns
SUFFIX = {PHOTOCOUNT: "c", PHOTON: "n"}


def _detector_from(value, arm):
    if isinstance(value, DetectorModel):
        return value
    if value is None:
        return DetectorModel.calibrated(arm)
    try:
        return DetectorModel(**value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {arm} detector: {exc}") from exc


def _em_from(value):
    if isinstance(value, EmOptions):
        return value
    if value is None:
        return SWEEP_EM
    known = {f.name for f in dataclasses.fields(EmOptions)}
    unknown = set(value) - known
    if unknown:
        raise ConfigError(f"unknown EM options {sorted(unknown)}")
    if value.get("init", "uniform") != "uniform":
        raise ConfigError("only the uniform EM start can be configured from a file")
    try:
        return EmOptions(**value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad EM options: {exc}") from exc


@dataclass(frozen=True)
class SweepConfig:
    """Scenario definition.

    ``noise_grid`` lists the mean noise photocounts per arm.  The photon-level
    noise of arm ``a`` is that value divided by the arm's efficiency.  The
    synthetic truth carries noise with ``truth_noise_modes`` modes; the model
    curves use ``model_modes_photocount`` and ``model_modes_photon``.
    """

    pair_mean: float = 24.4
    paired_modes: float = 50.0
    signal: DetectorModel = field(default_factory=lambda: DetectorModel.calibrated("signal"))
    idler: DetectorModel = field(default_factory=lambda: DetectorModel.calibrated("idler"))
    noise_grid: tuple = DEFAULT_GRID
    truth_noise_modes: float = 90.0
    model_modes_photocount: float = 110.0
    model_modes_photon: float = 90.0
    frames: int = 10_000
    seed: int = 12345
    exact: bool = False
    em: EmOptions = SWEEP_EM
    bootstrap_resamples: int = 10
    bootstrap_em_iterations: int = 100
    max_order: int = 3
    tol: float = DEFAULT_TOL
    out: str = "sweep-output"
    notes: tuple = ()

    def __post_init__(self):
        grid = tuple(float(v) for v in self.noise_grid)
        notes = tuple(self.notes)
        if not grid:
            grid = (0.0,)
            notes += ("empty noise grid replaced by (0.0,)",)
        object.__setattr__(self, "noise_grid", grid)
        object.__setattr__(self, "notes", notes)
        if any(not math.isfinite(v) or v < 0 for v in grid):
            raise ConfigError("noise means must be finite and non-negative")
        if any(b < a for a, b in zip(grid, grid[1:])):
            raise ConfigError("noise grid must be non-decreasing")
        if int(self.frames) != self.frames or self.frames < 1:
            raise ConfigError("frames must be a positive integer")
        if self.bootstrap_resamples != 0 and self.bootstrap_resamples < MIN_RESAMPLES:
            raise ConfigError(f"bootstrap_resamples must be 0 or >= {MIN_RESAMPLES}")
        if self.bootstrap_em_iterations < 1:
            raise ConfigError("bootstrap_em_iterations must be >= 1")
        for name in ("truth_noise_modes", "model_modes_photocount", "model_modes_photon"):
            if not getattr(self, name) >= 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.max_order not in (2, 3, 4, 5, 6):
            raise ConfigError("max_order must lie in 2..6")
        try:
            TwinBeamSpec(self.pair_mean, self.paired_modes)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def twin_beam(self) -> TwinBeamSpec:
        return TwinBeamSpec(self.pair_mean, self.paired_modes)

    def photon_noise(self, noise_mean: float):
        """Photon-level noise means per arm for a photocount-level mean."""
        return noise_mean / self.signal.efficiency, noise_mean / self.idler.efficiency

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, (DetectorModel, EmOptions)):
                value = value.to_dict()
            elif isinstance(value, tuple):
                value = list(value)
            out[f.name] = value
        return out

    @classmethod
    def from_dict(cls, data: dict, **overrides) -> "SweepConfig":
        data = {**data, **{k: v for k, v in overrides.items() if v is not None}}
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        kwargs = dict(data)
        kwargs["signal"] = _detector_from(data.get("signal"), "signal")
        kwargs["idler"] = _detector_from(data.get("idler"), "idler")
        kwargs["em"] = _em_from(data.get("em"))
        if "noise_grid" in kwargs:
            kwargs["noise_grid"] = tuple(kwargs["noise_grid"])
        if "notes" in kwargs:
            kwargs["notes"] = tuple(kwargs["notes"])
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path, **overrides) -> "SweepConfig":
        try:
            data = read_json(path)
        except TwinBeamError as exc:
            raise ConfigError(str(exc)) from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data, **overrides)


@dataclass
class BranchReport:
    """Whole-beam and single-mode quantifiers of one branch."""

    branch: str
    means: tuple
    modes: ModeEstimate | None
    whole: QuantifierReport
    single: QuantifierReport | None
    notes: list = field(default_factory=list)

    def flat(self) -> dict:
        """Scalars keyed without branch suffix; single-mode keys get ``sm_``."""
        out = {"mean_s": self.means[0], "mean_i": self.means[1],
               "modes": self.modes.average if self.modes else math.nan}
        out.update(self.whole.flat())
        if self.single is not None:
            for key, value in self.single.flat().items():
                out["EN" if key == "EN" else f"sm_{key}"] = value
        return out

    def to_dict(self) -> dict:
        return {
            "branch": self.branch,
            "means": list(self.means),
            "modes": None if self.modes is None else [self.modes.signal, self.modes.idler],
            "whole": self.whole.to_dict(),
            "single": None if self.single is None else self.single.to_dict(),
            "notes": list(self.notes),
            "flat": self.flat(),
        }


def branch_report(m, tol: float = DEFAULT_TOL, modes: float | None = None) -> BranchReport:
    """Quantify a normally ordered whole-beam moment set.

    The single-mode reduction divides by ``modes``, by default the average of
    the per-arm mode numbers estimated from ``m`` itself.
    """
    whole = quantify(m, WHOLE_BEAM_IDS, tol)
    notes = []
    estimate = None
    single = None
    k = modes
    try:
        estimate = estimate_modes(m)
        k = estimate.average if k is None else k
    except DegenerateInputError as exc:
        # no thermal-like fluctuations to count modes from: keep the beam as one mode
        notes.append(f"mode estimate: {exc}; single-mode scale taken as one mode")
        k = 1.0 if k is None else k
    except TwinBeamError as exc:
        notes.append(f"mode estimate: {exc}")
    if k is not None:
        try:
            single = quantify(reduce_to_single_mode(m, max(k, 1.0)), SINGLE_MODE_KEYS, tol)
        except TwinBeamError as exc:
            notes.append(f"single-mode reduction: {exc}")
    return BranchReport(m.branch, m.means, estimate, whole, single, notes)


@dataclass
class Analysis:
    """Both branches of one photocount data set."""

    photocount: BranchReport
    photon: BranchReport
    reconstruction: JointPhotonDistribution
    diagnostics: EmDiagnostics

    def flat(self) -> dict:
        out = {}
        for rep in (self.photocount, self.photon):
            suffix = SUFFIX[rep.branch]
            out.update({f"{k}_{suffix}": v for k, v in rep.flat().items()})
        return out


def _tag_branch(m, branch):
    return m.with_values(m.values, branch=branch)


def analyze_histogram(data, model_s: DetectorModel, model_i: DetectorModel,
                      em: EmOptions = SWEEP_EM, max_order: int = 3,
                      tol: float = DEFAULT_TOL, n_max=None) -> Analysis:
    """Photocount-branch and photon-branch reports of a photocount data set.

    ``data`` is a :class:`JointHistogram`, a photocount
    :class:`JointPhotonDistribution` or a path to a histogram/distribution CSV.
    """
    if isinstance(data, (str, os.PathLike)):
        data = load_table(data)
    if isinstance(data, JointHistogram) and data.frames == 0:
        raise DomainError("histogram holds zero frames")
    counts_m = _tag_branch(intensity_moments_of(data, max_order), PHOTOCOUNT)
    photocount = branch_report(counts_m, tol)
    dist, diag, _ = reconstruct(data, model_s, model_i, em, n_max)
    photon = branch_report(intensity_moments_of(dist, max_order), tol)
    return Analysis(photocount, photon, dist, diag)


@dataclass
class BootstrapResult:
    errors: dict
    resamples: int
    failures: int
    failure_notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"errors": self.errors, "resamples": self.resamples,
                "failures": self.failures, "failure_notes": self.failure_notes}


def bootstrap_errors(hist: JointHistogram, resamples: int, seed, model_s: DetectorModel,
                     model_i: DetectorModel, em: EmOptions = SWEEP_EM,
                     warm_start: JointPhotonDistribution | None = None,
                     max_order: int = 3, tol: float = DEFAULT_TOL, n_max=None) -> BootstrapResult:
    """Standard deviations of every reported quantity over multinomial resamples.

    Each resample redraws ``hist.frames`` frames from the observed cell
    frequencies and runs the full two-branch analysis.  ``warm_start`` seeds
    the EM of each resample (its grid is then reused).  More than 20 % failed
    resamples raise :class:`ConvergenceError`.
    """
    if resamples < MIN_RESAMPLES:
        raise ConfigError(f"resamples must be >= {MIN_RESAMPLES}")
    if hist.frames == 0:
        raise ConfigError("histogram holds zero frames")
    rng = make_rng(seed)
    probs = (hist.counts / hist.frames).ravel()
    if warm_start is not None:
        em = dataclasses.replace(em, init=warm_start.table)
        if n_max is None:
            n_max = (warm_start.shape[0] - 1, warm_start.shape[1] - 1)
    samples = []
    failures = []
    for r in range(resamples):
        counts = rng.multinomial(hist.frames, probs).reshape(hist.shape)
        try:
            a = analyze_histogram(JointHistogram(counts, hist.frames), model_s, model_i,
                                  em, max_order, tol, n_max)
            samples.append(a.flat())
        except TwinBeamError as exc:
            failures.append(f"resample {r}: {type(exc).__name__}: {exc}")
    if len(failures) > MAX_FAILURE_FRACTION * resamples:
        raise ConvergenceError(
            f"{len(failures)} of {resamples} bootstrap resamples failed; first: {failures[0]}"
        )
    keys = sorted(samples[0]) if samples else []
    errors = {}
    for key in keys:
        vals = np.array([s.get(key, math.nan) for s in samples], dtype=float)
        vals = vals[np.isfinite(vals)]
        errors[key] = float(np.std(vals, ddof=1)) if vals.size >= 2 else math.nan
    return BootstrapResult(errors, resamples, len(failures), failures)


def neighbor_pair_scatter(values, reference=None) -> float:
    """Relative scatter of a sweep series estimated from neighbouring points.

    With a ``reference`` (model) curve the relative residuals
    ``r_j = v_j / ref_j - 1`` are formed and the scatter is
    ``sqrt(mean((r_{j+1} - r_j)^2) / 2)`` over adjacent pairs with non-zero
    reference.  Without one, each pair is compared to its own average,
    ``(v_{j+1} - v_j) / ((v_{j+1} + v_j)/2)``, which also picks up the trend.
    Pairs with non-finite members are skipped; NaN when no pair is usable.
    """
    v = np.asarray(values, dtype=float)
    if reference is None:
        a, b = v[:-1], v[1:]
        mid = 0.5 * (a + b)
        ok = np.isfinite(a) & np.isfinite(b) & (mid != 0)
        if not ok.any():
            return math.nan
        rel = (b[ok] - a[ok]) / mid[ok]
        return float(np.sqrt(np.mean(rel**2) / 2.0))
    ref = np.asarray(reference, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(ref != 0, v / ref - 1.0, np.nan)
    d = r[1:] - r[:-1]
    d = d[np.isfinite(d)]
    if d.size == 0:
        return math.nan
    return float(np.sqrt(np.mean(d**2) / 2.0))


def loss_index(nonclassical) -> int:
    """Index of the first grid point after the last non-classical one.

    ``nonclassical`` is a boolean series over the grid.  Returns 0 when no
    point is non-classical and the series length when the last one still is.
    """
    hits = np.flatnonzero(np.asarray(nonclassical, dtype=bool))
    return int(hits[-1]) + 1 if hits.size else 0


def _model_moments(config: SweepConfig):
    """Noiseless photon and photocount moments of the ideal twin beam."""
    base = ideal_twb(config.twin_beam)
    povm_s = povm_matrix(config.signal, _c_max_for(base.shape[0]), base.shape[0] - 1)
    povm_i = povm_matrix(config.idler, _c_max_for(base.shape[1]), base.shape[1] - 1)
    counts = forward_detect(base, povm_s, povm_i)
    photon_m = intensity_moments_of(base, config.max_order)
    counts_m = _tag_branch(intensity_moments_of(counts, config.max_order), PHOTOCOUNT)
    return photon_m, counts_m


def _c_max_for(n_rows: int) -> int:
    # a photocount needs a photon or a dark count; a few dark counts on top suffice
    return n_rows + 4


def model_reports(config: SweepConfig, noise_mean: float, baseline=None):
    """Model-curve reports (photocount, photon) at one noise level."""
    photon_m, counts_m = baseline if baseline is not None else _model_moments(config)
    ns, ni = config.photon_noise(noise_mean)
    photon = add_thermal_noise_to_moments(photon_m, ns, ni, config.model_modes_photon)
    counts = add_thermal_noise_to_moments(counts_m, noise_mean, noise_mean,
                                          config.model_modes_photocount)
    return branch_report(counts, config.tol), branch_report(photon, config.tol)


def simulate_point(config: SweepConfig, noise_mean: float, seed=None):
    """Truth, exact photocount distribution and (unless exact) a sampled histogram."""
    ns, ni = config.photon_noise(noise_mean)
    truth = ideal_twb(config.twin_beam)
    if noise_mean > 0:
        truth = convolve_noise(truth, ThermalFieldSpec(ns, config.truth_noise_modes),
                               ThermalFieldSpec(ni, config.truth_noise_modes))
    povm_s = povm_matrix(config.signal, _c_max_for(truth.shape[0]), truth.shape[0] - 1)
    povm_i = povm_matrix(config.idler, _c_max_for(truth.shape[1]), truth.shape[1] - 1)
    counts = forward_detect(truth, povm_s, povm_i)
    hist = None
    if not config.exact:
        hist = sample_histogram(counts, config.frames, seed)
    return truth, counts, hist


def _point_seeds(seed, index):
    return [int(seed), int(index), 0], [int(seed), int(index), 1]


def run_point(config: SweepConfig, index: int, baseline=None) -> dict:
    """All results of one grid point as a JSON-ready record.

    Errors are caught and recorded so that a sweep can carry on.
    """
    noise_mean = config.noise_grid[index]
    record = {"index": index, "noise_mean": noise_mean, "status": "ok", "error": None}
    try:
        sample_seed, boot_seed = _point_seeds(config.seed, index)
        truth, counts, hist = simulate_point(config, noise_mean, sample_seed)
        data = counts if hist is None else hist
        analysis = analyze_histogram(data, config.signal, config.idler, config.em,
                                     config.max_order, config.tol)
        model_c, model_n = model_reports(config, noise_mean, baseline)
        record.update({
            # the noise region sees the same mean photocount in both arms
            "noise_counts": [noise_mean, noise_mean],
            "photon_noise": list(config.photon_noise(noise_mean)),
            "truth_means": [truth.mean(0), truth.mean(1)],
            "photocount": analysis.photocount.to_dict(),
            "photon": analysis.photon.to_dict(),
            "model_photocount": model_c.to_dict(),
            "model_photon": model_n.to_dict(),
            "em": {k: v for k, v in analysis.diagnostics.to_dict().items() if k != "trace"},
            "reconstruction_shape": list(analysis.reconstruction.shape),
            "bootstrap": None,
        })
        if hist is not None and config.bootstrap_resamples:
            try:
                boot_em = dataclasses.replace(config.em,
                                              max_iterations=config.bootstrap_em_iterations)
                boot = bootstrap_errors(hist, config.bootstrap_resamples, boot_seed,
                                        config.signal, config.idler, boot_em,
                                        analysis.reconstruction, config.max_order, config.tol)
                record["bootstrap"] = boot.to_dict()
            except TwinBeamError as exc:
                record["bootstrap"] = {"error": f"{type(exc).__name__}: {exc}"}
    except TwinBeamError as exc:
        record["status"] = "failed"
        record["error"] = f"{type(exc).__name__}: {exc}"
    return record


def _run_indexed(args):
    config, index, baseline = args
    return run_point(config, index, baseline)


@dataclass
class SweepReport:
    config: dict
    points: list
    version: str = __version__

    @property
    def noise_grid(self):
        return [p["noise_mean"] for p in self.points]

    def series(self, source: str, key: str) -> np.ndarray:
        """One quantity across the grid; ``source`` is a record section name."""
        out = []
        for p in self.points:
            section = p.get(source) or {}
            value = section.get("flat", {}).get(key, math.nan)
            out.append(float(value))
        return np.array(out)

    def errors(self, key: str) -> np.ndarray:
        out = []
        for p in self.points:
            boot = p.get("bootstrap") or {}
            out.append(float(boot.get("errors", {}).get(key, math.nan)))
        return np.array(out)

    def failed(self) -> list:
        return [p["index"] for p in self.points if p["status"] != "ok"]

    def scatter(self) -> dict:
        """Neighbour-pair relative scatter of the depths against the model curves."""
        out = {}
        for branch, model in (("photocount", "model_photocount"), ("photon", "model_photon")):
            for key in ("R", "tau_M", "tau_E2", "tau_E3", "EN"):
                suffix = "n" if branch == "photon" else "c"
                out[f"{key}_{suffix}"] = neighbor_pair_scatter(
                    self.series(branch, key), self.series(model, key))
        return out

    def to_dict(self) -> dict:
        return {"software": {"name": "twinbeam", "version": self.version},
                "config": self.config, "points": self.points,
                "failed_points": self.failed(), "scatter": self.scatter()}

    @classmethod
    def from_dict(cls, data: dict) -> "SweepReport":
        return cls(data["config"], data["points"], data.get("software", {}).get("version", ""))


def run_sweep(config: SweepConfig, workers: int = 1) -> SweepReport:
    """Run every grid point, in parallel when ``workers > 1``.

    Points are independent jobs; results are assembled by grid index so the
    report does not depend on scheduling.
    """
    baseline = _model_moments(config)
    jobs = [(config, i, baseline) for i in range(len(config.noise_grid))]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_run_indexed, jobs))
    else:
        records = [_run_indexed(job) for job in jobs]
    records.sort(key=lambda r: r["index"])
    return SweepReport(config.to_dict(), records)


def _flat_num(value):
    if isinstance(value, str):
        return float(value)
    return math.nan if value is None else float(value)


def _columns(report: SweepReport, spec):
    """Rows ``index, noise_mean, ...`` for (header, source, key) column specs."""
    header = ["index", "noise_mean"] + [h for h, _, _ in spec]
    rows = []
    for p in report.points:
        row = [p["index"], _flat_num(p["noise_mean"])]
        for _, source, key in spec:
            if source == "bootstrap":
                value = ((p.get("bootstrap") or {}).get("errors") or {}).get(key, math.nan)
            elif source == "record":
                value = p.get(key[0], [math.nan] * 2)
                value = value[key[1]] if isinstance(value, list) else math.nan
            else:
                value = ((p.get(source) or {}).get("flat") or {}).get(key, math.nan)
            row.append(_flat_num(value))
        rows.append(row)
    return header, rows


def _branch_columns(keys):
    spec = []
    for key in keys:
        for branch, source in ((PHOTOCOUNT, "photocount"), (PHOTON, "photon")):
            s = SUFFIX[branch]
            spec.append((f"{key}_{s}", source, key))
            spec.append((f"{key}_{s}_se", "bootstrap", f"{key}_{s}"))
            spec.append((f"{key}_{s}_model", f"model_{source}", key))
    return spec


def emit_tables(report: SweepReport, out_dir) -> list:
    """Write fig2a/fig2b/fig3/fig4 CSVs and the JSON master report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fig2a = [
        ("noise_c_s", "record", ("noise_counts", 0)),
        ("noise_n_s", "record", ("photon_noise", 0)),
        ("noise_n_i", "record", ("photon_noise", 1)),
        ("mean_c_s", "photocount", "mean_s"), ("mean_c_i", "photocount", "mean_i"),
        ("mean_n_s", "photon", "mean_s"), ("mean_n_i", "photon", "mean_i"),
        ("true_n_s", "record", ("truth_means", 0)), ("true_n_i", "record", ("truth_means", 1)),
        ("modes_c", "photocount", "modes"), ("modes_n", "photon", "modes"),
    ]
    fig3 = [c for key in ("M", "E2", "E3") for c in _branch_columns([key, f"tau_{key}", f"nu_{key}"])]
    fig4 = _branch_columns(["EN", "sm_tau_M", "sm_tau_E2", "sm_tau_EN", "sm_nu_EN"])
    tables = {"fig2a.csv": fig2a, "fig2b.csv": _branch_columns(["R"]),
              "fig3.csv": fig3, "fig4.csv": fig4}
    written = []
    for name, spec in tables.items():
        header, rows = _columns(report, spec)
        written.append(write_rows(out / name, header, rows))
    written.append(write_json(out / "report.json", report.to_dict()))
    return written


def load_report(path) -> SweepReport:
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    return SweepReport.from_dict(read_json(path))


def default_workers() -> int:
    return max(1, os.cpu_count() or 1)


__all__ = [
    "SweepConfig", "SweepReport", "BranchReport", "Analysis", "BootstrapResult",
    "analyze_histogram", "bootstrap_errors", "branch_report", "emit_tables",
    "load_report", "loss_index", "model_reports", "neighbor_pair_scatter", "run_point",
    "run_sweep", "simulate_point",
]
