"""Three-region porous-electrode model of an EDL supercapacitor.

The cell is ``[0, L_e] | [L_e, L_e + L_s] | [L_e + L_s, 2 L_e + L_s]``:
left electrode, separator, right electrode.  Unknowns are the salt
concentration ``c`` on every node, the double-layer potential
``q = phi1 - phi2`` on electrode nodes, and the electrolyte potential
``phi2`` (algebraic).  Interface nodes are shared between the two adjoining
regions, which makes ``c`` and ``phi2`` continuous by construction.

Diffusion of salt and of charge is written in flux form (see
:class:`supercap.spectral.FluxLaplacian`): boundary slopes are fed in as
data.  At the current collectors the salt flux is zero and the solid-phase
slope is ``-i/sigma``; at the electrode/separator interfaces the
solid-phase current vanishes and both regions see one common salt flux,
chosen so that the two one-sided equations at the shared node agree.
With these choices total salt and charge balances hold exactly in the
discrete system.

``phi2`` is fixed by the current-balance rows ``sigma dphi1/dx + i2 = i``.
Each region's first row is replaced by the continuity of ``phi2`` with the
region to its left; at ``x = 0`` it is replaced by the reference
``phi2 = 0``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, fields, replace
from typing import NamedTuple

import numpy as np
import scipy.linalg as sla

from .spectral import (
    DiffOps,
    FluxLaplacian,
    Scheme,
    diff_ops,
    flux_laplacian,
    map_to_physical,
    quadrature_weights,
    reference_grid,
)


class ParameterError(ValueError):
    """A physical parameter is outside its admissible range."""


class SingularSystemError(RuntimeError):
    """The algebraic system for phi2 cannot be solved."""


class ConcentrationError(ValueError):
    """Concentration became non-positive where the model needs log(c) or 1/c."""


class ModelVariant(str, enum.Enum):
    LINEAR = "linear"
    LOGARITHMIC = "log"
    QUADRATIC = "quadratic"

    @classmethod
    def parse(cls, value: "ModelVariant | str") -> "ModelVariant":
        if isinstance(value, cls):
            return value
        aliases = {"logarithmic": "log", "logarithm": "log", "quad": "quadratic"}
        key = str(value).lower()
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValueError(
                f"unknown model variant {value!r}; expected linear, log or quadratic"
            ) from None


@dataclass(frozen=True)
class RegionParameters:
    epsilon: float
    gamma: float
    length: float
    sigma: float | None = None

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ParameterError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if not self.gamma >= 1.0:
            raise ParameterError(f"gamma (tortuosity) must be >= 1, got {self.gamma}")
        if not self.length > 0.0:
            raise ParameterError(f"length must be positive, got {self.length}")
        if self.sigma is not None and not self.sigma > 0.0:
            raise ParameterError(f"sigma must be positive, got {self.sigma}")


ELECTRODE_DEFAULT = RegionParameters(epsilon=0.67, gamma=2.3, length=50e-6, sigma=0.0521)
SEPARATOR_DEFAULT = RegionParameters(epsilon=0.6, gamma=1.29, length=25e-6)


@dataclass(frozen=True)
class CellParameters:
    """Cell constants in SI units; defaults reproduce the reference cell."""

    electrode: RegionParameters = ELECTRODE_DEFAULT
    separator: RegionParameters = SEPARATOR_DEFAULT
    aC: float = 42e6
    c0: float = 930.0
    kappa_inf: float = 0.067
    t_plus: float = 0.5
    dqp_dq: float = -0.5
    dqm_dq: float = -0.5
    temperature: float = 298.0
    area: float = 2.747
    faraday: float = 96485.0
    gas_constant: float = 8.314

    def __post_init__(self):
        if self.electrode.sigma is None:
            raise ParameterError("electrode.sigma is required")
        if not 0.0 < self.t_plus < 1.0:
            raise ParameterError(f"t_plus must lie in (0, 1), got {self.t_plus}")
        for name in ("aC", "c0", "kappa_inf", "temperature", "area", "faraday", "gas_constant"):
            if not getattr(self, name) > 0.0:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")

    @property
    def t_minus(self) -> float:
        return 1.0 - self.t_plus

    @property
    def total_length(self) -> float:
        return 2.0 * self.electrode.length + self.separator.length

    @property
    def cell_capacitance(self) -> float:
        """Two electrode double layers in series, in farads."""
        return self.aC * self.electrode.length * self.area / 2.0

    @property
    def rc_time(self) -> float:
        """Charging time constant of one electrode, ``aC L^2 (1/sigma + 1/kappa)``."""
        kappa = self.kappa_inf * self.electrode.epsilon / self.electrode.gamma
        return self.aC * self.electrode.length**2 * (1.0 / self.electrode.sigma + 1.0 / kappa)

    def current_density(self, current: float) -> float:
        return current / self.area

    def with_changes(self, **changes) -> "CellParameters":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, RegionParameters):
                value = {k.name: getattr(value, k.name) for k in fields(value)}
            out[f.name] = value
        return out


class RegionTransport(NamedTuple):
    kappa: float  # S/m
    diffusivity: float  # m^2/s
    beta: float  # S m^2/mol


class DerivedTransport(NamedTuple):
    electrode: RegionTransport
    separator: RegionTransport
    f: float  # 1/V


def derive_transport(p: CellParameters) -> DerivedTransport:
    """Effective conductivity, diffusivity and ``kappa = beta c`` slope per region.

    The diffusivity follows from ``kappa = F^2/(RT) * D/2 * (1/t- + 1/t+) * c0``
    written between effective quantities, so it inherits the same
    porosity/tortuosity correction as the conductivity.
    """
    if p.t_plus <= 0.0 or p.t_plus >= 1.0:
        raise ParameterError(f"t_plus must lie in (0, 1), got {p.t_plus}")
    rt = p.gas_constant * p.temperature
    transference = 0.5 * (1.0 / p.t_minus + 1.0 / p.t_plus)

    def region(r: RegionParameters) -> RegionTransport:
        kappa = p.kappa_inf * r.epsilon / r.gamma
        d = kappa * rt / (p.faraday**2 * transference * p.c0)
        return RegionTransport(kappa, d, kappa / p.c0)

    return DerivedTransport(region(p.electrode), region(p.separator), p.faraday / rt)


@dataclass(frozen=True, eq=False)
class Subdomain:
    name: str
    ops: DiffOps
    weights: np.ndarray
    flux: FluxLaplacian
    index: np.ndarray  # global node indices, ascending

    @property
    def size(self) -> int:
        return len(self.index)

    @property
    def nodes(self) -> np.ndarray:
        return self.ops.nodes


@dataclass(frozen=True, eq=False)
class Mesh:
    """Three subdomains laid end to end with shared interface nodes."""

    scheme: Scheme
    order_electrode: int
    order_separator: int
    subdomains: tuple[Subdomain, Subdomain, Subdomain]
    x: np.ndarray = field(repr=False)  # unique global coordinates

    @property
    def n_nodes(self) -> int:
        return len(self.x)

    @property
    def left(self) -> Subdomain:
        return self.subdomains[0]

    @property
    def separator(self) -> Subdomain:
        return self.subdomains[1]

    @property
    def right(self) -> Subdomain:
        return self.subdomains[2]

    @property
    def electrodes(self) -> tuple[Subdomain, Subdomain]:
        return self.subdomains[0], self.subdomains[2]

    @property
    def coordinates(self) -> np.ndarray:
        """Per-subdomain coordinates concatenated (interfaces appear twice)."""
        return np.concatenate([s.nodes for s in self.subdomains])

    @property
    def interfaces(self) -> tuple[float, float]:
        return float(self.left.nodes[-1]), float(self.right.nodes[0])

    def split(self, values: np.ndarray) -> list[np.ndarray]:
        """Per-subdomain copies of a field stored on the unique global nodes."""
        return [np.asarray(values)[s.index] for s in self.subdomains]


def build_mesh(
    p: CellParameters, scheme: Scheme | str, order_electrode: int, order_separator: int | None = None
) -> Mesh:
    scheme = Scheme.parse(scheme)
    if order_separator is None:
        order_separator = order_electrode
    le, ls = p.electrode.length, p.separator.length
    bounds = [(0.0, le), (le, le + ls), (le + ls, 2 * le + ls)]
    orders = [order_electrode, order_separator, order_electrode]
    names = ["left electrode", "separator", "right electrode"]
    subdomains = []
    start = 0
    for name, (a, b), n in zip(names, bounds, orders):
        ops = map_to_physical(diff_ops(reference_grid(scheme, n)), a, b)
        index = np.arange(start, start + n + 1)
        index.setflags(write=False)
        subdomains.append(Subdomain(name, ops, quadrature_weights(ops), flux_laplacian(ops), index))
        start += n
    x = np.empty(start + 1)
    for s in subdomains:
        x[s.index] = s.nodes
    # snap interface coordinates so both sides carry the identical value
    x[subdomains[1].index[0]] = le
    x[subdomains[2].index[0]] = le + ls
    return Mesh(scheme, order_electrode, order_separator, tuple(subdomains), x)


@dataclass
class CellState:
    """Collocated fields; ``c`` and ``phi2`` live on the unique global nodes.

    ``q`` holds the left-electrode values followed by the right-electrode
    values.
    """

    c: np.ndarray
    q: np.ndarray
    phi2: np.ndarray
    i_app: float = 0.0


class Evaluation(NamedTuple):
    ydot: np.ndarray
    phi2: np.ndarray


class Linearisation(NamedTuple):
    jac: np.ndarray  # d ydot / d y
    dydot_di: np.ndarray  # d ydot / d i_app
    dv_dy: np.ndarray  # d terminal voltage / d y
    dv_di: float


class CellModel:
    """Discrete DAE for one model variant on one mesh.

    The state vector is ``y = [c, q_left, q_right]``; ``phi2`` is eliminated
    by a linear solve every time the right-hand side is evaluated, so the
    integrator only ever sees ``dy/dt = F(y, i)``.
    """

    def __init__(self, params: CellParameters, mesh: Mesh, variant: ModelVariant | str = "linear"):
        self.params = params
        self.mesh = mesh
        self.variant = ModelVariant.parse(variant)
        self.transport = derive_transport(params)
        self._assemble_constants()

    # ------------------------------------------------------------------ layout
    @property
    def n_c(self) -> int:
        return self.mesh.n_nodes

    @property
    def n_q(self) -> int:
        return 2 * self.mesh.left.size

    @property
    def n_y(self) -> int:
        return self.n_c + self.n_q

    def pack(self, state: CellState) -> np.ndarray:
        return np.concatenate([state.c, state.q])

    def unpack(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return y[: self.n_c], y[self.n_c :]

    def state_from_y(self, y: np.ndarray, i_app: float) -> CellState:
        c, q = self.unpack(np.asarray(y, dtype=float))
        return CellState(c.copy(), q.copy(), self.solve_phi2(c, q, i_app), float(i_app))

    # ---------------------------------------------------------------- assembly
    def _assemble_constants(self):
        p, mesh, tr = self.params, self.mesh, self.transport
        n_c, n_q = self.n_c, self.n_q
        ne = mesh.left.size
        sigma = p.electrode.sigma
        region = {0: tr.electrode, 1: tr.separator, 2: tr.electrode}
        eps = {0: p.electrode.epsilon, 1: p.separator.epsilon, 2: p.electrode.epsilon}
        q_slice = {0: slice(0, ne), 2: slice(ne, 2 * ne)}

        # current-balance rows; row r belongs to global node r
        d1_rows = np.zeros((n_c, n_c))
        kappa_rows = np.zeros(n_c)
        beta_rows = np.zeros(n_c)
        sigma_rows = np.zeros(n_c)
        bq = np.zeros((n_c, n_q))
        for m, sub in enumerate(mesh.subdomains):
            d1 = np.asarray(sub.ops.d1)
            last = sub.size - 1
            for j in range(1, sub.size):
                r = sub.index[j]
                d1_rows[r, sub.index] = d1[j]
                kappa_rows[r] = region[m].kappa
                beta_rows[r] = region[m].beta
                if m != 1 and j != last:
                    sigma_rows[r] = sigma
                    bq[r, q_slice[m]] = sigma * d1[j]
        current_rows = np.ones(n_c)
        current_rows[0] = 0.0
        current_rows[-1] = 0.0  # sigma dphi1/dx = -i cancels i at x = L
        ref = np.zeros(n_c)
        ref[0] = 1.0

        self._d1_rows = d1_rows
        self._kappa_rows = kappa_rows
        self._beta_rows = beta_rows
        self._sigma_rows = sigma_rows
        self._bq = bq
        self._current_rows = current_rows
        self._ref_row = ref
        self._tau = (p.t_plus - p.t_minus) / tr.f

        # charge balance in the electrodes: aC dq/dt = sigma d2(phi1)/dx2
        qq = np.zeros((n_q, n_q))
        qphi = np.zeros((n_q, n_c))
        qi = np.zeros(n_q)
        for m in (0, 2):
            sub = mesh.subdomains[m]
            lap = sigma / p.aC * sub.flux.lap
            qq[q_slice[m], q_slice[m]] = lap
            qphi[q_slice[m], sub.index] = lap
            # solid-phase slope at the collector is -i/sigma
            qi[q_slice[m]] = -(sub.flux.left if m == 0 else sub.flux.right) / p.aC
        self._qq, self._qphi, self._qi = qq, qphi, qi

        # salt balance with a common flux at each interface
        k = p.aC / p.faraday * (p.t_minus * p.dqp_dq + p.t_plus * p.dqm_dq)
        self._k_coupling = k
        bc, bs, lam = [], [], []
        for m, sub in enumerate(mesh.subdomains):
            rc = np.zeros((sub.size, n_c))
            rc[:, sub.index] = region[m].diffusivity * sub.flux.lap / eps[m]
            rs = np.zeros((sub.size, n_q))
            if m in q_slice:
                rs[:, q_slice[m]] = np.eye(sub.size) / eps[m]
            rl = np.zeros((sub.size, 2))
            if m == 0:
                rl[:, 0] = sub.flux.right / eps[m]
            elif m == 1:
                rl[:, 0] = sub.flux.left / eps[m]
                rl[:, 1] = sub.flux.right / eps[m]
            else:
                rl[:, 1] = sub.flux.left / eps[m]
            bc.append(rc)
            bs.append(rs)
            lam.append(rl)
        # rows: left-interface match, right-interface match
        a = np.vstack([lam[0][-1] - lam[1][0], lam[1][-1] - lam[2][0]])
        rhs_c = -np.vstack([bc[0][-1] - bc[1][0], bc[1][-1] - bc[2][0]])
        rhs_s = -np.vstack([bs[0][-1] - bs[1][0], bs[1][-1] - bs[2][0]])
        xc = np.linalg.solve(a, rhs_c)
        xs = np.linalg.solve(a, rhs_s)
        pc = np.zeros((n_c, n_c))
        ps = np.zeros((n_c, n_q))
        for m, sub in enumerate(mesh.subdomains):
            rows_c = bc[m] + lam[m] @ xc
            rows_s = bs[m] + lam[m] @ xs
            start = 0 if m == 0 else 1
            pc[sub.index[start:]] = rows_c[start:]
            ps[sub.index[start:]] = rows_s[start:]
        self._pc, self._ps = pc, ps
        self._eps_nodes = [eps[m] for m in range(3)]

        self._a_const = None
        self._a_lu = None
        self._linear_cache = None
        if self.variant is not ModelVariant.QUADRATIC:
            self._a_const = (kappa_rows + sigma_rows)[:, None] * d1_rows + np.outer(ref, ref)
            self._a_lu = self._factor(self._a_const)

    @staticmethod
    def _factor(a: np.ndarray):
        lu, piv = sla.lu_factor(a, check_finite=False)
        pivots = np.abs(np.diag(lu))
        if not np.all(np.isfinite(pivots)) or pivots.min() <= 1e-13 * pivots.max():
            raise SingularSystemError(
                "singular phi2 system: check patching rows and the reference row"
            )
        return lu, piv

    def _check_c(self, c: np.ndarray):
        if self.variant is not ModelVariant.LINEAR and not np.all(c > 0.0):
            raise ConcentrationError(
                f"non-positive concentration (min {c.min():.6g} mol/m^3) in the {self.variant.value} model"
            )

    def _conductivity_rows(self, c: np.ndarray) -> np.ndarray:
        if self.variant is ModelVariant.QUADRATIC:
            return self._beta_rows * c
        return self._kappa_rows

    def _algebraic_matrix(self, c: np.ndarray) -> np.ndarray:
        if self._a_const is not None:
            return self._a_const
        k = self._conductivity_rows(c)
        return (k + self._sigma_rows)[:, None] * self._d1_rows + np.outer(self._ref_row, self._ref_row)

    def _lu(self, c: np.ndarray):
        if self._a_lu is not None:
            return self._a_lu
        return self._factor(self._algebraic_matrix(c))

    def _concentration_term(self, c: np.ndarray) -> np.ndarray:
        if self.variant is ModelVariant.LINEAR or self._tau == 0.0:
            return np.zeros(self.n_c)
        if self.variant is ModelVariant.LOGARITHMIC:
            return self._tau * self._kappa_rows * (self._d1_rows @ np.log(c))
        return self._tau * self._beta_rows * (self._d1_rows @ c)

    def _algebraic_offset(self, c, q, i_app) -> np.ndarray:
        return self._bq @ q + self._concentration_term(c) + i_app * self._current_rows

    def assemble_algebraic(self, state: CellState, i_app: float | None = None):
        """Residual of the phi2 equations at ``state`` and its Jacobian in phi2."""
        i_app = state.i_app if i_app is None else i_app
        self._check_c(state.c)
        a = self._algebraic_matrix(state.c)
        g = a @ state.phi2 + self._algebraic_offset(state.c, state.q, i_app)
        return g, a.copy()

    def solve_phi2(self, c: np.ndarray, q: np.ndarray, i_app: float) -> np.ndarray:
        self._check_c(c)
        b = self._algebraic_offset(c, q, i_app)
        return -sla.lu_solve(self._lu(c), b, check_finite=False)

    # -------------------------------------------------------------- dynamics
    def evaluate(self, y: np.ndarray, i_app: float) -> Evaluation:
        c, q = self.unpack(y)
        phi2 = self.solve_phi2(c, q, i_app)
        qdot = self._qq @ q + self._qphi @ phi2 + i_app * self._qi
        cdot = self._pc @ c - self._k_coupling * (self._ps @ qdot)
        return Evaluation(np.concatenate([cdot, qdot]), phi2)

    def rhs(self, state: CellState, i_app: float | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Time derivatives ``(dc/dt, dq/dt)`` at ``state``."""
        i_app = state.i_app if i_app is None else i_app
        ydot = self.evaluate(self.pack(state), i_app).ydot
        return ydot[: self.n_c], ydot[self.n_c :]

    def linearise(self, y: np.ndarray, i_app: float) -> Linearisation:
        """Analytic derivatives of the reduced right-hand side and the voltage."""
        if self.variant is ModelVariant.LINEAR and self._linear_cache is not None:
            return self._linear_cache
        c, q = self.unpack(y)
        n_c = self.n_c
        lu = self._lu(c)
        rhs = np.zeros((n_c, self.n_y + 1))
        if self.variant is ModelVariant.LOGARITHMIC and self._tau != 0.0:
            rhs[:, :n_c] = self._tau * self._kappa_rows[:, None] * self._d1_rows / c[None, :]
        elif self.variant is ModelVariant.QUADRATIC:
            phi2 = self.solve_phi2(c, q, i_app)
            rhs[:, :n_c] = self._tau * self._beta_rows[:, None] * self._d1_rows
            rhs[:, :n_c] += np.diag(self._beta_rows * (self._d1_rows @ phi2))
        rhs[:, n_c : self.n_y] = self._bq
        rhs[:, -1] = self._current_rows
        dphi = -sla.lu_solve(lu, rhs, check_finite=False)
        dphi_dy, dphi_di = dphi[:, :-1], dphi[:, -1]

        dq_dy = self._qphi @ dphi_dy
        dq_dy[:, n_c:] += self._qq
        dq_di = self._qphi @ dphi_di + self._qi
        dc_dy = -self._k_coupling * (self._ps @ dq_dy)
        dc_dy[:, :n_c] += self._pc
        dc_di = -self._k_coupling * (self._ps @ dq_di)
        jac = np.vstack([dc_dy, dq_dy])
        dydot_di = np.concatenate([dc_di, dq_di])

        dv_dy = dphi_dy[0] - dphi_dy[-1]
        dv_dy[n_c] += 1.0
        dv_dy[-1] -= 1.0
        dv_di = float(dphi_di[0] - dphi_di[-1])
        out = Linearisation(jac, dydot_di, dv_dy, dv_di)
        if self.variant is ModelVariant.LINEAR:
            self._linear_cache = out
        return out

    # ---------------------------------------------------------------- outputs
    def voltage(self, y: np.ndarray, phi2: np.ndarray) -> float:
        q = y[self.n_c :]
        return float(q[0] + phi2[0] - q[-1] - phi2[-1])

    def terminal_voltage(self, state: CellState) -> float:
        """``phi1(0) - phi1(L)`` with ``phi1 = q + phi2`` on the electrodes."""
        return float(state.q[0] + state.phi2[0] - state.q[-1] - state.phi2[-1])

    def initial_state(self, v0: float = 0.0) -> CellState:
        """Rest state: uniform ``c0``, ``phi2 = 0`` and ``q = +-v0/2``."""
        ne = self.mesh.left.size
        q = np.concatenate([np.full(ne, 0.5 * v0), np.full(ne, -0.5 * v0)])
        return CellState(np.full(self.n_c, self.params.c0), q, np.zeros(self.n_c), 0.0)

    def phi1(self, state: CellState) -> list[np.ndarray]:
        ne = self.mesh.left.size
        left, right = self.mesh.electrodes
        return [state.q[:ne] + state.phi2[left.index], state.q[ne:] + state.phi2[right.index]]

    def reconstruct_currents(self, state: CellState) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """Solid- and liquid-phase current densities on each subdomain.

        ``i1 = -sigma dphi1/dx`` uses the boundary slopes imposed on phi1, so
        it equals ``i_app`` at the collectors and 0 at the interfaces.  ``i2``
        is evaluated pointwise from the electrolyte current law.
        """
        sigma = self.params.electrode.sigma
        i = state.i_app
        phi1 = self.phi1(state)
        i1 = []
        for m, sub in ((0, self.mesh.left), (2, self.mesh.right)):
            slope = np.asarray(sub.ops.d1) @ phi1[len(i1)]
            if m == 0:
                slope[0], slope[-1] = -i / sigma, 0.0
            else:
                slope[0], slope[-1] = 0.0, -i / sigma
            i1.append(-sigma * slope)
        i1 = [i1[0], np.zeros(self.mesh.separator.size), i1[1]]

        tr = self.transport
        i2 = []
        for m, sub in enumerate(self.mesh.subdomains):
            region = tr.separator if m == 1 else tr.electrode
            d1 = np.asarray(sub.ops.d1)
            c = state.c[sub.index]
            dphi = d1 @ state.phi2[sub.index]
            if self.variant is ModelVariant.QUADRATIC:
                kappa = region.beta * c
                extra = region.beta * self._tau * (d1 @ c)
            else:
                kappa = np.full(sub.size, region.kappa)
                extra = (
                    region.kappa * self._tau * (d1 @ np.log(c))
                    if self.variant is ModelVariant.LOGARITHMIC
                    else 0.0
                )
            i2.append(-kappa * dphi - extra)
        return i1, i2

    # ------------------------------------------------------------- balances
    def salt_balance(self, ydot: np.ndarray) -> tuple[float, float, float]:
        """``(d/dt total salt, coupling source, scale)`` for a derivative vector.

        Total salt is ``sum_regions eps * integral(c)`` with each region's own
        quadrature; the source is ``-k * sum_electrodes integral(dq/dt)``.
        """
        cdot, qdot = ydot[: self.n_c], ydot[self.n_c :]
        ne = self.mesh.left.size
        lhs = 0.0
        scale = 0.0
        for m, sub in enumerate(self.mesh.subdomains):
            term = self._eps_nodes[m] * sub.weights * cdot[sub.index]
            lhs += term.sum()
            scale += np.abs(term).sum()
        src = 0.0
        for sub, qd in zip(self.mesh.electrodes, (qdot[:ne], qdot[ne:])):
            term = -self._k_coupling * sub.weights * qd
            src += term.sum()
            scale += np.abs(term).sum()
        return float(lhs), float(src), float(scale)

    def algebraic_residual(self, y: np.ndarray, phi2: np.ndarray, i_app: float) -> float:
        """Max ``|g|`` scaled by ``|i_app| + 1``."""
        c, q = self.unpack(y)
        g = self._algebraic_matrix(c) @ phi2 + self._algebraic_offset(c, q, i_app)
        return float(np.abs(g).max() / (abs(i_app) + 1.0))
