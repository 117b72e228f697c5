"""Charging profiles, convergence and timing studies, impedance sweeps.

Every study is a thin layer over :func:`supercap.integrator.integrate`;
the CSV writers at the bottom fix the column layout of all artifacts.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from .cellmodel import CellModel, CellParameters, ModelVariant, build_mesh
from .integrator import (
    ConstantCurrent,
    ConstantVoltage,
    Protocol,
    SimulationTrace,
    Sinusoid,
    StepperConfig,
    integrate,
    time_samples,
)
from .spectral import Scheme, interpolate

STANDARD_CURRENT = 100.0  # A
STANDARD_CC = 23.2  # s
STANDARD_CV = 6.0  # s
STANDARD_V0 = 1.63  # V
EXTENDED_V0 = -2.37
EXTENDED_CC = 130.0
EXTENDED_CV = 70.0
EXTENDED_DROP = -1.08  # V, set-point step at the CC to CV switch
DILUTE_C0 = 250.0  # mol/m^3
FIELDS = ("c", "phi1", "phi2")

TRACE_HEADER = ("time_s", "voltage_V", "current_A")
CONVERGENCE_HEADER = ("scheme", "order", "field", "error")
EIS_HEADER = ("frequency_Hz", "re_Z_ohm", "im_Z_ohm", "re_C_F", "im_C_F", "abs_C_F")

# tight time integration so spatial error dominates the comparison
CONVERGENCE_STEPPER = StepperConfig(rel_tol=1e-9, abs_tol=1e-12, initial_step=1e-7)


def build_model(
    variant: ModelVariant | str = "linear",
    scheme: Scheme | str = "sem",
    order: int = 5,
    params: CellParameters | None = None,
    order_separator: int | None = None,
) -> CellModel:
    params = params or CellParameters()
    return CellModel(params, build_mesh(params, scheme, order, order_separator), variant)


def _map(fn: Callable, items: Sequence, workers: int) -> list:
    """Ordered map, optionally over a process pool."""
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ------------------------------------------------------------------ profiles
def standard_protocol(
    current: float = STANDARD_CURRENT,
    cc_duration: float = STANDARD_CC,
    cv_duration: float = STANDARD_CV,
    hold_voltage: float | None = None,
    offset: float = 0.0,
) -> Protocol:
    """CC charge followed by a CV hold (default: hold the voltage reached)."""
    return Protocol((ConstantCurrent(current, cc_duration), ConstantVoltage(hold_voltage, cv_duration, offset)))


def run_profile(
    model: CellModel,
    protocol: Protocol,
    v0: float,
    config: StepperConfig | None = None,
    t_eval: Sequence[float] | None = None,
    store_states: bool = False,
) -> SimulationTrace:
    return integrate(model.initial_state(v0), protocol, model, config, t_eval=t_eval, store_states=store_states)


def run_standard_profile(
    variant: ModelVariant | str = "linear",
    scheme: Scheme | str = "sem",
    order: int = 5,
    *,
    params: CellParameters | None = None,
    config: StepperConfig | None = None,
    hold_voltage: float | None = None,
    t_eval: Sequence[float] | None = None,
    store_states: bool = False,
    order_separator: int | None = None,
) -> SimulationTrace:
    """100 A for 23.2 s from 1.63 V, then a 6 s voltage hold."""
    model = build_model(variant, scheme, order, params, order_separator)
    return run_profile(model, standard_protocol(hold_voltage=hold_voltage), STANDARD_V0, config, t_eval, store_states)


def run_dilute_profile(
    variant: ModelVariant | str = "linear",
    scheme: Scheme | str = "sem",
    order: int = 5,
    *,
    params: CellParameters | None = None,
    config: StepperConfig | None = None,
    order_separator: int | None = None,
) -> SimulationTrace:
    """Standard profile with the electrolyte diluted to 250 mol/m^3.

    States are stored so final-time distributions can be compared.
    """
    params = (params or CellParameters()).with_changes(c0=DILUTE_C0)
    return run_standard_profile(
        variant, scheme, order, params=params, config=config, store_states=True, order_separator=order_separator
    )


def run_extended_profile(
    variant: ModelVariant | str = "linear",
    scheme: Scheme | str = "sem",
    order: int = 5,
    *,
    params: CellParameters | None = None,
    config: StepperConfig | None = None,
    store_states: bool = True,
    order_separator: int | None = None,
) -> SimulationTrace:
    """130 s at 100 A from -2.37 V, then 70 s held 1.08 V below V(130 s)."""
    model = build_model(variant, scheme, order, params, order_separator)
    protocol = standard_protocol(STANDARD_CURRENT, EXTENDED_CC, EXTENDED_CV, offset=EXTENDED_DROP)
    return run_profile(model, protocol, EXTENDED_V0, config, store_states=store_states)


# --------------------------------------------------------------- convergence
def normalized_error(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b||_2 / size`` over a (time x space) block."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b) / a.size) if a.size else 0.0


def field_histories(model: CellModel, trace: SimulationTrace, rows: np.ndarray, targets=None) -> dict:
    """Per-field arrays of shape (time, space) on each subdomain's nodes.

    With ``targets`` (a mesh) the fields are interpolated onto its nodes
    using ``model``'s own interpolant.
    """
    mesh = model.mesh
    ne = mesh.left.size
    ys = trace.states[rows]
    phis = trace.phi2[rows]
    c = ys[:, : model.n_c]
    q = ys[:, model.n_c :]
    blocks = {f: [] for f in FIELDS}
    for m, sub in enumerate(mesh.subdomains):
        dest = None if targets is None else targets.subdomains[m].nodes

        def put(name, values):
            values = values.T  # space x time
            if dest is not None:
                values = interpolate(sub.ops, values, dest)
            blocks[name].append(values.T)

        put("c", c[:, sub.index])
        put("phi2", phis[:, sub.index])
        if m != 1:
            qm = q[:, :ne] if m == 0 else q[:, ne:]
            put("phi1", qm + phis[:, sub.index])
    return {f: np.hstack(v) for f, v in blocks.items()}


@dataclass(frozen=True)
class ConvergenceEntry:
    scheme: str
    order: int
    field: str
    error: float


@dataclass
class ConvergenceReport:
    entries: list[ConvergenceEntry]
    reference: str
    n_times: int
    variant: str

    def error(self, scheme: Scheme | str, order: int, field_name: str) -> float:
        scheme = Scheme.parse(scheme).value
        for e in self.entries:
            if e.scheme == scheme and e.order == order and e.field == field_name:
                return e.error
        raise KeyError((scheme, order, field_name))

    def errors(self, scheme: Scheme | str, field_name: str) -> dict[int, float]:
        scheme = Scheme.parse(scheme).value
        return {e.order: e.error for e in self.entries if e.scheme == scheme and e.field == field_name}


def _profile_job(args):
    variant, scheme, order, params, config, t_eval = args
    model = build_model(variant, scheme, order, params)
    trace = run_profile(model, standard_protocol(), STANDARD_V0, config, t_eval, store_states=True)
    return model, trace


def convergence_study(
    variant: ModelVariant | str = "linear",
    orders: Iterable[int] = (4, 6, 8, 10, 12),
    reference_order: int = 30,
    *,
    schemes: Iterable[Scheme | str] = (Scheme.CHEBYSHEV, Scheme.FINITE_DIFFERENCE),
    params: CellParameters | None = None,
    config: StepperConfig | None = None,
    output_times: Sequence[float] | None = None,
    workers: int = 1,
) -> ConvergenceReport:
    """Normalised errors against a high-order Chebyshev reference.

    Each run is interpolated onto the reference nodes at shared output
    times; the error per field is ``||diff||_2 / (n_time * n_space)``.
    """
    orders = sorted(set(int(o) for o in orders))
    if orders and reference_order <= max(orders):
        raise ValueError("reference_order must exceed every compared order")
    variant = ModelVariant.parse(variant)
    params = params or CellParameters()
    config = config or CONVERGENCE_STEPPER
    if output_times is None:
        output_times = np.linspace(0.0, STANDARD_CC + STANDARD_CV, 147)
    output_times = np.asarray(output_times, dtype=float)
    schemes = [Scheme.parse(s) for s in schemes]

    jobs = [(variant, Scheme.CHEBYSHEV, reference_order, params, config, output_times)]
    keys = [(s, o) for s in schemes for o in orders]
    jobs += [(variant, s, o, params, config, output_times) for s, o in keys]
    results = _map(_profile_job, jobs, workers)

    ref_model, ref_trace = results[0]
    ref = field_histories(ref_model, ref_trace, ref_trace.index_of(output_times))
    entries = []
    for (scheme, order), (model, trace) in zip(keys, results[1:]):
        got = field_histories(model, trace, trace.index_of(output_times), targets=ref_model.mesh)
        for f in FIELDS:
            entries.append(ConvergenceEntry(scheme.value, order, f, normalized_error(got[f], ref[f])))
    return ConvergenceReport(entries, f"sem order {reference_order}", len(output_times), variant.value)


# --------------------------------------------------------------------- EIS
@dataclass(frozen=True)
class ImpedancePoint:
    frequency: float  # Hz
    impedance: complex  # ohm
    capacitance: complex  # F
    drift: float = 0.0  # largest relative change of Z between consecutive cycles
    flagged: bool = False

    def __post_init__(self):
        if not self.frequency > 0:
            raise ValueError("frequency must be positive")

    @classmethod
    def from_impedance(cls, frequency: float, z: complex, drift: float = 0.0, flagged: bool = False):
        omega = 2.0 * math.pi * frequency
        return cls(frequency, complex(z), 1.0 / (1j * omega * complex(z)), drift, flagged)

    @property
    def real_capacitance(self) -> float:
        return self.capacitance.real

    @property
    def imag_capacitance(self) -> float:
        """``C''`` with the sign convention ``C = C' - j C''``."""
        return -self.capacitance.imag

    @property
    def total_capacitance(self) -> float:
        return abs(self.capacitance)


def default_frequencies(n: int = 20) -> np.ndarray:
    return np.logspace(-3, 1, n)


def fit_phasor(t: np.ndarray, v: np.ndarray, omega: float) -> complex:
    """Phasor of ``v`` at ``omega`` after removing an offset and a drift.

    ``v ~ a + b t + Re(V exp(j omega t))`` in the least-squares sense.
    """
    basis = np.column_stack([np.ones_like(t), t - t[0], np.cos(omega * t), np.sin(omega * t)])
    coef, *_ = np.linalg.lstsq(basis, v, rcond=None)
    return complex(coef[2], -coef[3])


def _eis_job(args):
    variant, scheme, order, params, config, freq, dc, amplitude, v0, extract_cycles, samples, drift_tol = args
    model = build_model(variant, scheme, order, params)
    period = 1.0 / freq
    settle = math.ceil(max(3.0, 3.0 * model.params.rc_time * freq) - 1e-9)
    total = settle + extract_cycles
    n = samples * extract_cycles
    t_eval = settle * period + np.arange(n + 1) * (period / samples)
    trace = integrate(
        model.initial_state(v0), Protocol((Sinusoid(dc, amplitude, freq, total),)), model, config, t_eval=t_eval
    )
    v = trace.voltage[trace.index_of(t_eval)]
    omega = 2.0 * math.pi * freq
    i_phasor = -1j * amplitude
    t_fit, v_fit = t_eval[:-1], v[:-1]
    z = fit_phasor(t_fit, v_fit, omega) / i_phasor
    per_cycle = [
        fit_phasor(t_fit[k * samples : (k + 1) * samples], v_fit[k * samples : (k + 1) * samples], omega) / i_phasor
        for k in range(extract_cycles)
    ]
    drift = max((abs(b - a) / abs(z) for a, b in zip(per_cycle, per_cycle[1:])), default=0.0)
    return ImpedancePoint.from_impedance(freq, z, drift, drift > drift_tol), trace.diagnostics


def run_eis(
    variant: ModelVariant | str = "linear",
    frequencies: Sequence[float] | None = None,
    dc: float = 2.0,
    amplitude: float = 0.1,
    *,
    scheme: Scheme | str = "sem",
    order: int = 5,
    params: CellParameters | None = None,
    config: StepperConfig | None = None,
    v0: float = 0.0,
    extract_cycles: int = 4,
    samples_per_cycle: int = 32,
    drift_tol: float = 1e-3,
    workers: int = 1,
    diagnostics: list | None = None,
) -> list[ImpedancePoint]:
    """Impedance spectrum from sinusoidal current drives.

    Each frequency starts from rest, discards the longer of three periods
    and three RC times, then fits the voltage phasor over
    ``extract_cycles`` whole periods.  A point is flagged when the phasor
    of consecutive single cycles drifts by more than ``drift_tol``.
    """
    freqs = np.asarray(default_frequencies() if frequencies is None else frequencies, dtype=float)
    if freqs.size == 0:
        return []
    if np.any(freqs <= 0) or np.any(np.diff(freqs) <= 0):
        raise ValueError("frequencies must be positive and strictly increasing")
    if not 0 < amplitude:
        raise ValueError("amplitude must be positive")
    if extract_cycles < 1 or samples_per_cycle < 4:
        raise ValueError("need at least one extraction cycle and four samples per cycle")
    params = params or CellParameters()
    jobs = [
        (variant, scheme, order, params, config, float(f), dc, amplitude, v0, extract_cycles, samples_per_cycle, drift_tol)
        for f in freqs
    ]
    results = _map(_eis_job, jobs, workers)
    if diagnostics is not None:
        diagnostics.extend(d for _, d in results)
    return [p for p, _ in results]


def knee_frequency(points: Sequence[ImpedancePoint]) -> float | None:
    """Frequency of the interior maximum of ``C''``, or None if it is at an end."""
    if len(points) < 3:
        return None
    imag = np.array([p.imag_capacitance for p in points])
    k = int(np.argmax(imag))
    if k == 0 or k == len(points) - 1:
        return None
    return points[k].frequency


# ------------------------------------------------------------------ timing
class TimingResult(NamedTuple):
    ratio: float
    sem_median: float
    fdm_median: float
    sem_samples: list[float]
    fdm_samples: list[float]


def timing_study(
    orders_sem: int = 6,
    orders_fdm: int = 12,
    *,
    variant: ModelVariant | str = "linear",
    params: CellParameters | None = None,
    config: StepperConfig | None = None,
    repeats: int = 5,
    schemes: tuple[Scheme | str, Scheme | str] = (Scheme.CHEBYSHEV, Scheme.FINITE_DIFFERENCE),
) -> TimingResult:
    """Median wall-clock of the standard profile, first scheme over second.

    Models are built outside the timed region.
    """
    runs = []
    for scheme, order in zip(schemes, (orders_sem, orders_fdm)):
        model = build_model(variant, scheme, order, params)
        protocol = standard_protocol()
        state0 = model.initial_state(STANDARD_V0)
        integrate(state0, protocol, model, config)  # warm caches
        runs.append(lambda m=model, p=protocol, s=state0: integrate(s, p, m, config))
    # alternate the two runs so slow drifts in machine speed hit both alike
    samples = [[], []]
    for _ in range(repeats):
        for k, run in enumerate(runs):
            samples[k].extend(time_samples(run, 1))
    medians = [float(np.median(s)) for s in samples]
    return TimingResult(medians[0] / medians[1], medians[0], medians[1], samples[0], samples[1])


# --------------------------------------------------------------------- CSV
def _fmt(x: float) -> str:
    return f"{float(x):.17e}"


def _write(path: Path | str, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def write_trace_csv(path: Path | str, trace: SimulationTrace) -> Path:
    """Columns: time_s, voltage_V, current_A."""
    rows = ((_fmt(t), _fmt(v), _fmt(i)) for t, v, i in zip(trace.times, trace.voltage, trace.current))
    return _write(path, TRACE_HEADER, rows)


def write_convergence_csv(path: Path | str, report: ConvergenceReport) -> Path:
    """Columns: scheme, order, field, error."""
    rows = ((e.scheme, e.order, e.field, _fmt(e.error)) for e in report.entries)
    return _write(path, CONVERGENCE_HEADER, rows)


def write_eis_csv(path: Path | str, points: Sequence[ImpedancePoint]) -> Path:
    """Columns: frequency_Hz, re_Z_ohm, im_Z_ohm, re_C_F, im_C_F, abs_C_F."""
    rows = (
        (
            _fmt(p.frequency),
            _fmt(p.impedance.real),
            _fmt(p.impedance.imag),
            _fmt(p.capacitance.real),
            _fmt(p.capacitance.imag),
            _fmt(abs(p.capacitance)),
        )
        for p in points
    )
    return _write(path, EIS_HEADER, rows)
