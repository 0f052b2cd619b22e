"""Finite-difference reference solutions.

Space is discretised by centered differences on a uniform grid (method of
lines); the resulting stiff ODE system is advanced by a variable-step,
variable-order (1-2) BDF integrator with simplified Newton iterations on a
sparse LU factorisation of the iteration matrix. The step-size/order control
and the dense output follow the quasi-constant-step BDF formulation used by
scipy's ``solve_ivp``.
"""

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from loguru import logger
from scipy import sparse
from scipy.interpolate import CubicSpline
from scipy.sparse.linalg import splu

from ..errors import ContractError, SolverError
from ..models.domain import MIN_REFERENCE_NX, EquationId, ReferenceGrid, Trajectory
from .storage import save_grid

RHS = Callable[[float, np.ndarray], np.ndarray]
Jacobian = Callable[[float, np.ndarray], sparse.spmatrix]

MAX_ORDER = 2
NEWTON_MAXITER = 4
MIN_FACTOR = 0.2
MAX_FACTOR = 10
EPS = np.finfo(float).eps

# Pure BDF coefficients (no NDF correction).
GAMMA = np.hstack((0, np.cumsum(1 / np.arange(1, MAX_ORDER + 1))))
ALPHA = GAMMA
ERROR_CONST = 1 / np.arange(1, MAX_ORDER + 2)

AC_EPS = 0.0001
KDV_DELTA = 0.0025
BURGERS_NU = 0.01 / np.pi

BOUNDARY_VALUES: Dict[EquationId, float] = {EquationId.AC: -1.0, EquationId.BURGERS: 0.0}


def rms_norm(x: np.ndarray) -> float:
    return float(np.linalg.norm(x) / x.size**0.5)


def initial_condition(equation: EquationId, x: np.ndarray) -> np.ndarray:
    if equation == EquationId.AC:
        return x**2 * np.cos(np.pi * x)
    if equation == EquationId.KDV:
        return np.cos(np.pi * x)
    return -np.sin(np.pi * x)


def difference_matrices(n: int, h: float, periodic: bool) -> Dict[str, sparse.csc_matrix]:
    """Centered first, second and third differences on ``n`` unknowns.

    Without ``periodic`` the stencils are truncated at the ends; boundary
    contributions are added separately by ``boundary_vector``.
    """
    def banded(coeffs: Dict[int, float]) -> sparse.csc_matrix:
        rows = []
        offsets = []
        for offset, value in coeffs.items():
            rows.append(np.full(n, value))
            offsets.append(offset)
            if periodic and offset:
                rows.append(np.full(n, value))
                offsets.append(offset - n if offset > 0 else offset + n)
        return sparse.diags(rows, offsets, shape=(n, n), format="csc")

    return {
        "d1": banded({-1: -1 / (2 * h), 1: 1 / (2 * h)}),
        "d2": banded({-1: 1 / h**2, 0: -2 / h**2, 1: 1 / h**2}),
        "d3": banded({-2: -1 / (2 * h**3), -1: 1 / h**3, 1: -1 / h**3, 2: 1 / (2 * h**3)}),
    }


def boundary_vector(n: int, h: float, left: float, right: float, kind: str) -> np.ndarray:
    """Contribution of fixed end values to the truncated interior stencil."""
    b = np.zeros(n)
    if kind == "d2":
        b[0] += left / h**2
        b[-1] += right / h**2
    elif kind == "d1":
        b[0] -= left / (2 * h)
        b[-1] += right / (2 * h)
    else:
        raise ContractError(f"no boundary vector for {kind}")
    return b


@dataclass
class SemiDiscretization:
    """Method-of-lines system of one equation.

    Allen-Cahn and Burgers evolve the interior points with the end values held
    fixed; KdV evolves the ``nx - 1`` distinct points of the periodic grid.
    """

    equation: EquationId
    nx: int
    x: np.ndarray
    h: float
    ops: Dict[str, sparse.csc_matrix] = field(repr=False)
    bvec: Dict[str, np.ndarray] = field(repr=False)

    @property
    def periodic(self) -> bool:
        return self.equation == EquationId.KDV

    @property
    def size(self) -> int:
        return self.nx - 1 if self.periodic else self.nx - 2

    def initial_state(self) -> np.ndarray:
        u0 = initial_condition(self.equation, self.x)
        return u0[:-1].copy() if self.periodic else u0[1:-1].copy()

    def full_state(self, y: np.ndarray) -> np.ndarray:
        """Values on the full grid for one state (or a stack of states)."""
        y = np.atleast_2d(y)
        if self.periodic:
            return np.concatenate([y, y[:, :1]], axis=1)
        edge = np.full((y.shape[0], 1), BOUNDARY_VALUES[self.equation])
        return np.concatenate([edge, y, edge], axis=1)

    def rhs(self, t: float, y: np.ndarray) -> np.ndarray:
        ops, b = self.ops, self.bvec
        if self.equation == EquationId.AC:
            return AC_EPS * (ops["d2"] @ y + b["d2"]) - 5 * y**3 + 5 * y
        if self.equation == EquationId.BURGERS:
            return BURGERS_NU * (ops["d2"] @ y + b["d2"]) - y * (ops["d1"] @ y + b["d1"])
        return -y * (ops["d1"] @ y) - KDV_DELTA * (ops["d3"] @ y)

    def jac(self, t: float, y: np.ndarray) -> sparse.csc_matrix:
        ops, b = self.ops, self.bvec
        if self.equation == EquationId.AC:
            return (AC_EPS * ops["d2"] + sparse.diags(-15 * y**2 + 5)).tocsc()
        if self.equation == EquationId.BURGERS:
            ux = ops["d1"] @ y + b["d1"]
            return (BURGERS_NU * ops["d2"] - sparse.diags(ux) - sparse.diags(y) @ ops["d1"]).tocsc()
        ux = ops["d1"] @ y
        return (-sparse.diags(ux) - sparse.diags(y) @ ops["d1"] - KDV_DELTA * ops["d3"]).tocsc()


def semidiscretize(equation: EquationId, nx: int) -> SemiDiscretization:
    """Build the method-of-lines system on ``nx`` grid points over [-1, 1]."""
    equation = EquationId(equation)
    minimum = MIN_REFERENCE_NX[equation]
    if nx < minimum:
        raise ContractError(f"{equation.value} reference grids need nx >= {minimum}, got {nx}")
    x = np.linspace(-1.0, 1.0, nx)
    h = 2.0 / (nx - 1)
    periodic = equation == EquationId.KDV
    n = nx - 1 if periodic else nx - 2
    ops = difference_matrices(n, h, periodic)
    bvec: Dict[str, np.ndarray] = {}
    if not periodic:
        edge = BOUNDARY_VALUES[equation]
        bvec = {kind: boundary_vector(n, h, edge, edge, kind) for kind in ("d1", "d2")}
    return SemiDiscretization(equation=equation, nx=nx, x=x, h=h, ops=ops, bvec=bvec)


def compute_R(order: int, factor: float) -> np.ndarray:
    """Matrix rescaling the differences array for a new step size."""
    i = np.arange(1, order + 1)[:, None]
    j = np.arange(1, order + 1)
    m = np.zeros((order + 1, order + 1))
    m[1:, 1:] = (i - 1 - factor * j) / i
    m[0] = 1
    return np.cumprod(m, axis=0)


def change_D(D: np.ndarray, order: int, factor: float) -> None:
    """Rescale the differences array in place after a step-size change."""
    ru = compute_R(order, factor).dot(compute_R(order, 1))
    D[: order + 1] = np.dot(ru.T, D[: order + 1])


def numerical_jacobian(fun: RHS) -> Jacobian:
    """Dense forward-difference Jacobian for systems without an analytic one."""

    def jac(t: float, y: np.ndarray) -> sparse.csc_matrix:
        f0 = fun(t, y)
        cols = []
        for i in range(y.size):
            step = np.sqrt(EPS) * max(1.0, abs(y[i]))
            yp = y.copy()
            yp[i] += step
            cols.append((fun(t, yp) - f0) / step)
        return sparse.csc_matrix(np.column_stack(cols))

    return jac


class BDFIntegrator:
    """Variable-order (1-2) BDF stepper with Newton iterations and error control."""

    def __init__(
        self,
        fun: RHS,
        jac: Jacobian,
        t0: float,
        y0: np.ndarray,
        t_bound: float,
        rtol: float = 1e-6,
        atol: float = 1e-8,
        max_step: float = np.inf,
    ):
        self.fun = fun
        self.jac = jac
        self.t = float(t0)
        self.t_old: Optional[float] = None
        self.y = np.asarray(y0, dtype=float).copy()
        self.t_bound = float(t_bound)
        self.rtol, self.atol = rtol, atol
        self.max_step = max_step
        self.n = self.y.size
        self.nfev = self.njev = self.nlu = 0
        self.n_steps = self.n_rejected = 0

        f = self._fun(self.t, self.y)
        self.h_abs = self._initial_step(f)
        self.newton_tol = max(10 * EPS / rtol, min(0.03, rtol**0.5))
        self.J = self._jac(self.t, self.y)
        self.identity = sparse.eye(self.n, format="csc")

        self.D = np.empty((MAX_ORDER + 3, self.n))
        self.D[0] = self.y
        self.D[1] = f * self.h_abs
        self.order = 1
        self.n_equal_steps = 0
        self.LU = None

    def _fun(self, t: float, y: np.ndarray) -> np.ndarray:
        self.nfev += 1
        return self.fun(t, y)

    def _jac(self, t: float, y: np.ndarray) -> sparse.csc_matrix:
        self.njev += 1
        return sparse.csc_matrix(self.jac(t, y))

    def _lu(self, a: sparse.spmatrix):
        self.nlu += 1
        return splu(sparse.csc_matrix(a))

    def _initial_step(self, f0: np.ndarray) -> float:
        interval = abs(self.t_bound - self.t)
        if interval == 0.0:
            return 0.0
        scale = self.atol + np.abs(self.y) * self.rtol
        d0 = rms_norm(self.y / scale)
        d1 = rms_norm(f0 / scale)
        h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
        h0 = min(h0, interval)
        f1 = self._fun(self.t + h0, self.y + h0 * f0)
        d2 = rms_norm((f1 - f0) / scale) / h0
        if d1 <= 1e-15 and d2 <= 1e-15:
            h1 = max(1e-6, h0 * 1e-3)
        else:
            h1 = (0.01 / max(d1, d2)) ** 0.5
        return min(100 * h0, h1, interval, self.max_step)

    def _solve_newton(self, t_new: float, y_predict: np.ndarray, c: float, psi: np.ndarray, scale: np.ndarray):
        d = np.zeros_like(y_predict)
        y = y_predict.copy()
        dy_norm_old = None
        converged = False
        k = 0
        for k in range(NEWTON_MAXITER):
            f = self._fun(t_new, y)
            if not np.all(np.isfinite(f)):
                break
            dy = self.LU.solve(c * f - psi - d)
            dy_norm = rms_norm(dy / scale)
            rate = None if dy_norm_old is None else dy_norm / dy_norm_old
            if rate is not None and (
                rate >= 1 or rate ** (NEWTON_MAXITER - k) / (1 - rate) * dy_norm > self.newton_tol
            ):
                break
            y += dy
            d += dy
            if dy_norm == 0 or (rate is not None and rate / (1 - rate) * dy_norm < self.newton_tol):
                converged = True
                break
            dy_norm_old = dy_norm
        return converged, k + 1, y, d

    def step(self) -> None:
        """Advance one accepted step; raises when the step size underflows."""
        t = self.t
        D = self.D
        min_step = 10 * np.abs(np.nextafter(t, np.inf) - t)
        if self.h_abs > self.max_step:
            h_abs = self.max_step
            change_D(D, self.order, self.max_step / self.h_abs)
            self.n_equal_steps = 0
        elif self.h_abs < min_step:
            h_abs = min_step
            change_D(D, self.order, min_step / self.h_abs)
            self.n_equal_steps = 0
        else:
            h_abs = self.h_abs

        order = self.order
        J = self.J
        current_jac = False
        accepted = False
        while not accepted:
            if h_abs < min_step:
                logger.error(f"BDF step size underflow at t={t:.6g} (order {order})")
                raise SolverError("Newton iteration failed to converge at the step-size floor", t)

            t_new = t + h_abs
            if t_new > self.t_bound:
                t_new = self.t_bound
                change_D(D, order, np.abs(t_new - t) / h_abs)
                self.n_equal_steps = 0
                self.LU = None
            h = t_new - t
            h_abs = abs(h)

            y_predict = np.sum(D[: order + 1], axis=0)
            scale = self.atol + self.rtol * np.abs(y_predict)
            psi = np.dot(D[1 : order + 1].T, GAMMA[1 : order + 1]) / ALPHA[order]
            c = h / ALPHA[order]

            converged = False
            while not converged:
                if self.LU is None:
                    self.LU = self._lu(self.identity - c * J)
                converged, n_iter, y_new, d = self._solve_newton(t_new, y_predict, c, psi, scale)
                if not converged:
                    if current_jac:
                        break
                    J = self._jac(t_new, y_predict)
                    self.LU = None
                    current_jac = True

            if not converged:
                factor = 0.5
                h_abs *= factor
                change_D(D, order, factor)
                self.n_equal_steps = 0
                self.LU = None
                self.n_rejected += 1
                continue

            safety = 0.9 * (2 * NEWTON_MAXITER + 1) / (2 * NEWTON_MAXITER + n_iter)
            scale = self.atol + self.rtol * np.abs(y_new)
            error_norm = rms_norm(ERROR_CONST[order] * d / scale)
            if error_norm > 1:
                factor = max(MIN_FACTOR, safety * error_norm ** (-1 / (order + 1)))
                h_abs *= factor
                change_D(D, order, factor)
                self.n_equal_steps = 0
                self.n_rejected += 1
            else:
                accepted = True

        self.n_steps += 1
        self.n_equal_steps += 1
        self.t_old, self.t = t, t_new
        self.y = y_new
        self.h_abs = h_abs
        self.J = J

        # D^{j+1} y_n = D^j y_n - D^j y_{n-1}, with d = D^{k+1} y_n
        D[order + 2] = d - D[order + 1]
        D[order + 1] = d
        for i in reversed(range(order + 1)):
            D[i] += D[i + 1]

        # the order stays fixed until order + 1 equal steps have been taken
        if self.n_equal_steps < order + 1:
            return

        error_m_norm = rms_norm(ERROR_CONST[order - 1] * D[order] / scale) if order > 1 else np.inf
        error_p_norm = rms_norm(ERROR_CONST[order + 1] * D[order + 2] / scale) if order < MAX_ORDER else np.inf
        error_norms = np.array([error_m_norm, error_norm, error_p_norm])
        with np.errstate(divide="ignore"):
            factors = error_norms ** (-1 / np.arange(order, order + 3))
        order += int(np.argmax(factors)) - 1
        self.order = order
        factor = min(MAX_FACTOR, safety * np.max(factors))
        self.h_abs *= factor
        change_D(D, order, factor)
        self.n_equal_steps = 0
        self.LU = None

    def interpolate(self, t_eval: np.ndarray) -> np.ndarray:
        """States at times inside the last accepted step, one row per time."""
        order = self.order
        h = self.h_abs
        t_shift = self.t - h * np.arange(order)
        denom = h * (1 + np.arange(order))
        x = (np.asarray(t_eval, dtype=float)[None, :] - t_shift[:, None]) / denom[:, None]
        p = np.cumprod(x, axis=0)
        return (np.dot(self.D[1 : order + 1].T, p) + self.D[0][:, None]).T


def integrate(
    rhs: RHS,
    u0: np.ndarray,
    output_times: Sequence[float],
    rtol: float = 1e-6,
    atol: float = 1e-8,
    jac: Optional[Jacobian] = None,
) -> Trajectory:
    """Integrate ``u' = rhs(t, u)`` from ``output_times[0]`` and sample at every output time."""
    output_times = np.asarray(output_times, dtype=float)
    u0 = np.asarray(u0, dtype=float)
    if not np.all(np.isfinite(u0)):
        raise ContractError("initial state must be finite")
    if output_times.size == 0 or np.any(np.diff(output_times) <= 0):
        raise ContractError("output times must be a non-empty increasing sequence")

    solver = BDFIntegrator(rhs, jac or numerical_jacobian(rhs), output_times[0], u0, output_times[-1], rtol, atol)
    states = np.empty((output_times.size, u0.size))
    states[0] = u0
    next_index = 1
    while next_index < output_times.size:
        solver.step()
        hits = []
        while next_index < output_times.size and output_times[next_index] <= solver.t:
            hits.append(next_index)
            next_index += 1
        if hits:
            states[hits] = solver.interpolate(output_times[hits])
            if output_times[hits[-1]] == solver.t:
                states[hits[-1]] = solver.y
        if not np.all(np.isfinite(solver.y)):
            raise SolverError("integration produced non-finite values", solver.t)
    return Trajectory(
        t=output_times,
        y=states,
        n_steps=solver.n_steps,
        n_rejected=solver.n_rejected,
        nfev=solver.nfev,
        njev=solver.njev,
        nlu=solver.nlu,
    )


def output_grid(dt: float, t_end: float = 1.0) -> np.ndarray:
    """Uniform output times ``0, dt, ..., t_end``."""
    steps = int(round(t_end / dt))
    return np.linspace(0.0, t_end, steps + 1)


def solve_on_grid(
    equation: EquationId, nx: int, output_times: np.ndarray, rtol: float = 1e-6, atol: float = 1e-8
) -> np.ndarray:
    """Full-grid solution ``u[t_index, x_index]`` at ``nx`` points."""
    system = semidiscretize(equation, nx)
    trajectory = integrate(system.rhs, system.initial_state(), output_times, rtol, atol, jac=system.jac)
    logger.debug(
        f"{equation.value} nx={nx}: {trajectory.n_steps} steps, {trajectory.n_rejected} rejected, "
        f"{trajectory.nlu} LU factorisations"
    )
    return system.full_state(trajectory.y)


def resample(equation: EquationId, x_from: np.ndarray, u: np.ndarray, x_to: np.ndarray) -> np.ndarray:
    """Cubic-spline resampling in x of every time row."""
    bc_type = "periodic" if equation == EquationId.KDV else "not-a-knot"
    return CubicSpline(x_from, u, axis=1, bc_type=bc_type)(x_to)


def generate_reference(
    equation: EquationId,
    nx_internal: int = 1024,
    eval_nx: int = 400,
    dt: float = 0.005,
    rtol: float = 1e-6,
    atol: float = 1e-8,
    path: Optional[Path] = None,
) -> ReferenceGrid:
    """Solve on the internal grid and resample onto the evaluation grid.

    The t = 0 row is the exact initial condition and Dirichlet end values are
    imposed exactly. The grid is written to ``path`` when one is given.
    """
    equation = EquationId(equation)
    started = time.perf_counter()
    t = output_grid(dt)
    x_internal = np.linspace(-1.0, 1.0, nx_internal)
    x = np.linspace(-1.0, 1.0, eval_nx)
    logger.info(f"Solving {equation.value} reference on {nx_internal} points, {t.size} output times")
    u_internal = solve_on_grid(equation, nx_internal, t, rtol, atol)
    u = resample(equation, x_internal, u_internal, x)
    u[0] = initial_condition(equation, x)
    if equation in BOUNDARY_VALUES:
        u[:, 0] = u[:, -1] = BOUNDARY_VALUES[equation]
    grid = ReferenceGrid(
        equation=equation,
        x=x,
        t=t,
        u=u,
        metadata={
            "rtol": rtol,
            "atol": atol,
            "scheme": "mol-centered-fd/bdf12",
            "nx_internal": nx_internal,
        },
    )
    if equation == EquationId.KDV:
        grid.metadata["mass_drift"] = mass_drift(periodic_mass(x_internal, u_internal))
    logger.info(f"Reference for {equation.value} solved in {time.perf_counter() - started:.1f}s")
    if path is not None:
        save_grid(grid, path)
    return grid


def convergence_sizes(nx: int) -> List[int]:
    """Grid sizes nx/4, nx/2 and nx sharing every coarse-grid point."""
    return [(nx - 1) // 4 + 1, (nx - 1) // 2 + 1, nx]


def min_convergence_nx(equation: EquationId) -> int:
    """Smallest finest grid whose quarter-resolution solve is still valid."""
    return 4 * (MIN_REFERENCE_NX[EquationId(equation)] - 1) + 1


def convergence_study(
    equation: EquationId, nx: int, rtol: float = 1e-6, atol: float = 1e-8, t_end: float = 1.0
) -> Dict[str, float]:
    """Spatial self-convergence at ``t_end`` from grids of nx/4, nx/2 and nx points.

    The relative L2 change between successive resolutions, measured on the
    coarsest grid, should shrink by about four for a second-order scheme.
    """
    equation = EquationId(equation)
    if nx < min_convergence_nx(equation):
        raise ContractError(
            f"{equation.value} convergence study needs nx >= {min_convergence_nx(equation)} "
            f"(coarsest grid {convergence_sizes(nx)[0]} < {MIN_REFERENCE_NX[equation]})"
        )
    times = np.array([0.0, t_end])
    sizes = convergence_sizes(nx)
    x_coarse = np.linspace(-1.0, 1.0, sizes[0])
    coarse = []
    for n in sizes:
        final = solve_on_grid(equation, n, times, rtol, atol)[-1:]
        coarse.append(resample(equation, np.linspace(-1.0, 1.0, n), final, x_coarse)[0])
    norm = np.linalg.norm(coarse[-1])
    change_coarse = float(np.linalg.norm(coarse[1] - coarse[0]) / norm)
    change_fine = float(np.linalg.norm(coarse[2] - coarse[1]) / norm)
    return {
        "nx": nx,
        "change_half_vs_quarter": change_coarse,
        "change_full_vs_half": change_fine,
        "ratio": change_coarse / change_fine if change_fine > 0 else float("inf"),
    }


def periodic_mass(x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Discrete mass of every time row over the distinct periodic points."""
    return u[:, :-1].sum(axis=1) * (x[1] - x[0])


def kdv_mass(grid: ReferenceGrid) -> np.ndarray:
    return periodic_mass(grid.x, grid.u)


def mass_drift(mass: np.ndarray) -> float:
    """Largest deviation of the mass from its initial value."""
    return float(np.abs(mass - mass[0]).max())
