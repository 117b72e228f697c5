"""Adaptive TR-BDF2 time stepping for the reduced cell model.

The scheme is the three-stage ESDIRK form of TR-BDF2 (trapezoidal stage to
``t + gamma h`` followed by BDF2), with ``gamma = 2 - sqrt(2)``.  It is
L-stable and stiffly accurate; a third-order companion solution built from
the same stages gives the local error estimate, which is filtered through
the Newton matrix before use.

Constant-voltage segments add the applied current as an algebraic unknown
and the voltage set-point as an extra equation, so each stage solves a
bordered Newton system.
"""
from __future__ import annotations

import math
import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence, Union

import numpy as np
import scipy.linalg as sla

from .cellmodel import CellModel, CellState, ConcentrationError, SingularSystemError

GAMMA = 2.0 - math.sqrt(2.0)
D = GAMMA / 2.0
W = math.sqrt(2.0) / 4.0
# stage coefficients and (b - b_hat) of the embedded third-order solution
A21 = D
A31, A32 = W, W
E1, E2, E3 = (4.0 * W - 1.0) / 3.0, -1.0 / 3.0, 2.0 * D / 3.0


class StepFailure(RuntimeError):
    """The step size fell below ``min_step``."""

    def __init__(self, message: str, t: float | None = None, segment: int | None = None):
        super().__init__(message)
        self.t = t
        self.segment = segment


class NewtonFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class StepperConfig:
    rel_tol: float = 1e-6
    abs_tol: float = 1e-9
    max_step: float = 5.0
    min_step: float = 1e-12
    initial_step: float = 1e-6
    max_newton_iters: int = 8
    newton_tol: float = 1e-3

    def __post_init__(self):
        if not (self.rel_tol > 0 and self.abs_tol > 0):
            raise ValueError("tolerances must be positive")
        if not 0 < self.min_step <= self.initial_step <= self.max_step:
            raise ValueError("need 0 < min_step <= initial_step <= max_step")
        if self.max_newton_iters < 1:
            raise ValueError("max_newton_iters must be >= 1")


# ----------------------------------------------------------------- protocol
@dataclass(frozen=True)
class ConstantCurrent:
    current: float  # A
    duration: float  # s

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("segment duration must be positive")


@dataclass(frozen=True)
class ConstantVoltage:
    """Hold the terminal voltage.

    With ``voltage=None`` the set-point is the voltage at the start of the
    segment plus ``offset``.
    """

    voltage: float | None
    duration: float
    offset: float = 0.0

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("segment duration must be positive")


@dataclass(frozen=True)
class Sinusoid:
    dc: float  # A
    amplitude: float  # A
    frequency: float  # Hz
    cycles: float

    def __post_init__(self):
        if not self.frequency > 0:
            raise ValueError("frequency must be positive")
        if not self.amplitude >= 0:
            raise ValueError("amplitude must be non-negative")
        if not self.cycles > 0:
            raise ValueError("cycles must be positive")

    @property
    def duration(self) -> float:
        return self.cycles / self.frequency

    def current(self, t_rel: float) -> float:
        return self.dc + self.amplitude * math.sin(2.0 * math.pi * self.frequency * t_rel)


@dataclass(frozen=True)
class TabulatedCurrent:
    """Current (A) interpolated linearly between samples; times start at 0."""

    times: tuple[float, ...]
    currents: tuple[float, ...]

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.size < 2 or len(self.currents) != t.size:
            raise ValueError("need matching times and currents with at least two samples")
        if t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise ValueError("times must start at 0 and increase strictly")
        object.__setattr__(self, "times", tuple(float(x) for x in t))
        object.__setattr__(self, "currents", tuple(float(x) for x in self.currents))

    @property
    def duration(self) -> float:
        return self.times[-1]

    def current(self, t_rel: float) -> float:
        return float(np.interp(t_rel, self.times, self.currents))


Segment = Union[ConstantCurrent, ConstantVoltage, Sinusoid, TabulatedCurrent]


@dataclass(frozen=True)
class Protocol:
    segments: tuple[Segment, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))

    @property
    def duration(self) -> float:
        return float(sum(s.duration for s in self.segments))

    def boundaries(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum([s.duration for s in self.segments])])


@dataclass
class SimulationTrace:
    times: np.ndarray
    voltage: np.ndarray
    current_density: np.ndarray  # A/m^2
    segment: np.ndarray
    area: float
    states: np.ndarray | None = None  # rows of y = [c, q]
    phi2: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def current(self) -> np.ndarray:
        return self.current_density * self.area

    def index_of(self, times: Sequence[float]) -> np.ndarray:
        """Row indices of times the integrator was asked to stop at."""
        times = np.asarray(times, dtype=float)
        idx = np.searchsorted(self.times, times)
        idx = np.clip(idx, 0, len(self.times) - 1)
        lower = np.clip(idx - 1, 0, None)
        pick = np.where(
            np.abs(self.times[lower] - times) < np.abs(self.times[idx] - times), lower, idx
        )
        if np.any(np.abs(self.times[pick] - times) > 1e-9 * max(1.0, float(self.times[-1]))):
            raise KeyError("requested times are not rows of this trace")
        return pick


# ------------------------------------------------------------------ stepping
class StepResult(NamedTuple):
    y: np.ndarray
    error: np.ndarray  # filtered local error estimate
    error_norm: float
    f_end: np.ndarray
    newton_iters: int


def _rms(v: np.ndarray) -> float:
    return float(np.sqrt(np.mean(v * v))) if v.size else 0.0


def step_implicit(
    fun: Callable[[float, np.ndarray], np.ndarray],
    t: float,
    y: np.ndarray,
    h: float,
    config: StepperConfig,
    jac: np.ndarray | Callable[[float, np.ndarray], np.ndarray],
    *,
    f0: np.ndarray | None = None,
    mass: np.ndarray | None = None,
    atol: np.ndarray | float | None = None,
) -> StepResult:
    """One TR-BDF2 step of ``M y' = fun(t, y)``.

    ``mass`` is an optional 0/1 vector marking differential (1) and
    algebraic (0) components; algebraic components must be consistent at
    ``t``.  ``jac`` is the Jacobian of ``fun`` (or a callable returning it),
    held fixed over the step (simplified Newton).

    Raises
    ------
    NewtonFailure
        if a stage does not converge within ``config.max_newton_iters``.
    """
    y = np.asarray(y, dtype=float)
    n = y.size
    m = np.ones(n) if mass is None else np.asarray(mass, dtype=float)
    diff = m != 0
    atol = config.abs_tol if atol is None else atol
    scale = np.broadcast_to(np.asarray(atol, dtype=float), (n,)) + config.rel_tol * np.abs(y)
    j = jac(t, y) if callable(jac) else jac
    k1 = fun(t, y) if f0 is None else f0
    wmat = np.diag(m) - h * D * j
    try:
        lu = sla.lu_factor(wmat, check_finite=False)
    except (ValueError, sla.LinAlgError) as exc:
        raise NewtonFailure(str(exc)) from exc

    iters = 0

    def solve_stage(tc: float, base: np.ndarray, guess: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        nonlocal iters
        z = guess.copy()
        prev = None
        for _ in range(config.max_newton_iters):
            fz = fun(tc, z)
            res = m * (z - y) - base - h * D * fz
            dz = sla.lu_solve(lu, -res, check_finite=False)
            z = z + dz
            iters += 1
            norm = _rms(dz / scale)
            if not np.isfinite(norm):
                break
            if norm <= config.newton_tol:
                if tc == t + h:
                    return z, fun(tc, z)
                # stage derivative from the stage equation itself
                return z, np.where(diff, (m * (z - y) - base) / (h * D), 0.0)
            if prev is not None and norm > 0.9 * prev:
                break
            prev = norm
        raise NewtonFailure(f"Newton iteration did not converge at t={tc:.6g}")

    base2 = h * A21 * (m * k1)
    y2, k2 = solve_stage(t + GAMMA * h, base2, y + GAMMA * h * np.where(diff, k1, 0.0))
    base3 = h * (A31 * (m * k1) + A32 * (m * k2))
    y3, k3 = solve_stage(t + h, base3, y + (y2 - y) / GAMMA)
    raw = h * (E1 * k1 + E2 * k2 + E3 * k3)
    raw = np.where(diff, raw, 0.0)
    err = sla.lu_solve(lu, raw, check_finite=False)
    err = np.where(diff, err, 0.0)
    scale_end = np.broadcast_to(np.asarray(atol, dtype=float), (n,)) + config.rel_tol * np.maximum(
        np.abs(y), np.abs(y3)
    )
    err_norm = _rms(err[diff] / scale_end[diff])
    return StepResult(y3, err, err_norm, k3, iters)


# --------------------------------------------------------------- integration
class _Segment:
    """Right-hand side and Jacobian for one protocol segment."""

    def __init__(self, model: CellModel, seg: Segment, t0: float, y0: np.ndarray, i_prev: float):
        self.model = model
        self.seg = seg
        self.t0 = t0
        self.area = model.params.area
        self.n = model.n_y
        self.algebraic = isinstance(seg, ConstantVoltage)
        self.mass = None
        if self.algebraic:
            if seg.voltage is None:
                ev = model.evaluate(y0, i_prev)
                self.v_set = model.voltage(y0, ev.phi2) + seg.offset
            else:
                self.v_set = seg.voltage + seg.offset
            self.mass = np.concatenate([np.ones(self.n), [0.0]])

    def density(self, t: float) -> float:
        seg = self.seg
        if isinstance(seg, ConstantCurrent):
            return seg.current / self.area
        return seg.current(t - self.t0) / self.area

    def consistent(self, y: np.ndarray, i_guess: float) -> np.ndarray:
        if not self.algebraic:
            return y
        model = self.model
        i = i_guess
        for _ in range(3):
            v = model.voltage(y, model.evaluate(y, i).phi2)
            dv_di = model.linearise(y, i).dv_di
            step = (v - self.v_set) / dv_di
            i -= step
            if abs(step) <= 1e-14 * (abs(i) + 1.0):
                break
        return np.concatenate([y, [i]])

    def split(self, z: np.ndarray) -> tuple[np.ndarray, float]:
        if self.algebraic:
            return z[:-1], float(z[-1])
        return z, None

    def current_at(self, t: float, z: np.ndarray) -> float:
        return float(z[-1]) if self.algebraic else self.density(t)

    def fun(self, t: float, z: np.ndarray) -> np.ndarray:
        model = self.model
        if self.algebraic:
            y, i = z[:-1], z[-1]
            ev = model.evaluate(y, i)
            return np.concatenate([ev.ydot, [model.voltage(y, ev.phi2) - self.v_set]])
        return model.evaluate(z, self.density(t)).ydot

    def jac(self, t: float, z: np.ndarray):
        y, _ = self.split(z)
        i = self.current_at(t, z)
        lin = self.model.linearise(y, i)
        if not self.algebraic:
            return lin.jac, lin
        j = np.zeros((self.n + 1, self.n + 1))
        j[: self.n, : self.n] = lin.jac
        j[: self.n, -1] = lin.dydot_di
        j[-1, : self.n] = lin.dv_dy
        j[-1, -1] = lin.dv_di
        return j, lin


def _field_scale(model: CellModel) -> np.ndarray:
    return np.concatenate([np.full(model.n_c, model.params.c0), np.ones(model.n_q)])


def _merge_stops(bounds: np.ndarray, extra: Sequence[float]) -> np.ndarray:
    """Sorted stop times; segment boundaries win over near-coincident extras."""
    tol = 1e-12 * max(1.0, float(bounds[-1]))
    out = list(bounds)
    for t in sorted(extra):
        near = np.abs(np.asarray(out) - t) <= tol
        if not near.any():
            out.append(t)
    return np.array(sorted(out))


def integrate(
    state0: CellState,
    protocol: Protocol,
    model: CellModel,
    config: StepperConfig | None = None,
    *,
    t_eval: Sequence[float] | None = None,
    store_states: bool = False,
) -> SimulationTrace:
    """Advance ``state0`` through ``protocol``.

    Segment boundaries and every time in ``t_eval`` are hit exactly.  The
    first trace row is ``state0`` itself at ``t = 0``; a row at a segment
    boundary holds the state reached at the end of the earlier segment.

    Raises
    ------
    StepFailure
        if the step size drops below ``config.min_step``; the message names
        the failing time and segment.
    """
    config = config or StepperConfig()
    started = time.perf_counter()
    y = model.pack(state0).astype(float)
    i_now = float(state0.i_app)
    ev0 = model.evaluate(y, i_now)
    bounds = protocol.boundaries()
    extra = []
    for seg, start in zip(protocol.segments, bounds):
        if isinstance(seg, TabulatedCurrent):
            extra.extend(start + t for t in seg.times[1:-1])
    if t_eval is not None:
        extra.extend(float(t) for t in t_eval if 0.0 <= t <= bounds[-1])
    stops = _merge_stops(bounds, extra)

    times = [0.0]
    volts = [model.voltage(y, ev0.phi2)]
    currents = [i_now]
    segs = [0]
    ys = [y.copy()] if store_states else None
    phis = [ev0.phi2.copy()] if store_states else None
    diag = dict(
        steps=0,
        rejected_steps=0,
        newton_iterations=0,
        newton_failures=0,
        jacobian_evaluations=0,
        max_algebraic_residual=model.algebraic_residual(y, ev0.phi2, i_now),
        max_salt_balance_error=0.0,
        voltage_error_estimate=0.0,
        min_concentration=float(y[: model.n_c].min()),
    )

    atol_y = config.abs_tol * _field_scale(model)
    h = config.initial_step
    t = 0.0
    for k, seg in enumerate(protocol.segments):
        t_end = bounds[k + 1]
        sd = _Segment(model, seg, t, y, i_now)
        z = sd.consistent(y, i_now)
        atol = np.concatenate([atol_y, [config.abs_tol * max(1.0, abs(z[-1]))]]) if sd.algebraic else atol_y
        f0 = sd.fun(t, z)
        err_prev = 1.0
        seg_stops = stops[(stops > t) & (stops <= t_end)]
        stop_idx = 0
        while t < t_end:
            target = seg_stops[stop_idx]
            h = min(h, config.max_step)
            h_try = h
            clipped = False
            if t + 1.05 * h_try >= target:
                h_try = target - t
                clipped = True
            jmat, lin = sd.jac(t, z)
            diag["jacobian_evaluations"] += 1
            try:
                res = step_implicit(sd.fun, t, z, h_try, config, jmat, f0=f0, mass=sd.mass, atol=atol)
            except (NewtonFailure, ConcentrationError, SingularSystemError):
                # trial iterates may leave the model's domain; retry smaller
                diag["newton_failures"] += 1
                h = h_try / 2.0
                if h < config.min_step:
                    raise StepFailure(
                        f"step size fell below min_step at t={t:.9g} s in segment {k} ({type(seg).__name__})",
                        t,
                        k,
                    ) from None
                continue
            diag["newton_iterations"] += res.newton_iters
            err = res.error_norm
            if err > 1.0:
                diag["rejected_steps"] += 1
                h = h_try * max(0.2, 0.9 * err ** (-1.0 / 3.0))
                if h < config.min_step:
                    raise StepFailure(
                        f"step size fell below min_step at t={t:.9g} s in segment {k} ({type(seg).__name__})",
                        t,
                        k,
                    )
                continue
            # accepted
            t_new = target if clipped else t + h_try
            z_old = z
            z = res.y
            f0 = res.f_end
            y_new, _ = sd.split(z)
            i_new = sd.current_at(t_new, z)
            ev = model.evaluate(y_new, i_new)
            lhs, src, scale = model.salt_balance(ev.ydot)
            diag["max_salt_balance_error"] = max(
                diag["max_salt_balance_error"], abs(lhs - src) / (scale + 1e-300)
            )
            diag["max_algebraic_residual"] = max(
                diag["max_algebraic_residual"], model.algebraic_residual(y_new, ev.phi2, i_new)
            )
            diag["voltage_error_estimate"] += abs(float(lin.dv_dy @ res.error[: model.n_y]))
            diag["min_concentration"] = min(diag["min_concentration"], float(y_new[: model.n_c].min()))
            diag["steps"] += 1

            times.append(t_new)
            volts.append(model.voltage(y_new, ev.phi2))
            currents.append(i_new)
            segs.append(k)
            if store_states:
                ys.append(y_new.copy())
                phis.append(ev.phi2.copy())

            factor = 0.9 * max(err, 1e-10) ** (-0.7 / 3.0) * max(err_prev, 1e-10) ** (0.4 / 3.0)
            factor = min(4.0, max(0.2, factor))
            err_prev = max(err, 1e-4)
            h_next = h_try * factor
            h = max(h_next, h) if clipped else h_next
            t = t_new
            if clipped:
                stop_idx += 1
            del z_old
        y, _ = sd.split(z)
        i_now = sd.current_at(t, z)

    diag["wall_time"] = time.perf_counter() - started
    return SimulationTrace(
        times=np.array(times),
        voltage=np.array(volts),
        current_density=np.array(currents),
        segment=np.array(segs),
        area=model.params.area,
        states=np.array(ys) if store_states else None,
        phi2=np.array(phis) if store_states else None,
        diagnostics=diag,
    )


def time_samples(run: Callable[[], object], repeats: int = 5) -> list[float]:
    """Wall-clock seconds of ``repeats`` calls of ``run``."""
    out = []
    for _ in range(repeats):
        start = time.perf_counter()
        run()
        out.append(time.perf_counter() - start)
    return out


def measure_runtime(run: Callable[[], object], repeats: int = 5) -> float:
    """Median wall-clock time of ``run`` over ``repeats`` calls."""
    return statistics.median(time_samples(run, repeats))
