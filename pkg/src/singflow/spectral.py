"""Fourier eigenbasis, weighted basis, and the Galerkin system for the linearized flow.

The eigenfunctions of -Lap on the torus are real sin/cos modes, normalized to
unit grid L^2 norm and ordered by continuum eigenvalue with lexicographic
wave-vector tie-breaking (cos before sin), so assembled matrices are
reproducible. Each mode carries three eigenvalues: the continuum symbol
4 pi^2 |k|^2 / L^2, the 7-point stencil symbol (used by the heat propagator),
and the centered-gradient symbol (which appears on the diagonal of the
stiffness-type matrices assembled with the adjoint div/grad pair).

The projected system for coefficients (C1, C2) of (k1, k2) is

    dC1/dt + A C1 + B C2 = F1,   dC2/dt + C C2 + D C1 = F2,

with zero initial data, integrated by the implicit trapezoidal rule on the
full block matrix (the couplings are mild at the truncations used here and
folding them into the implicit solve costs nothing at 2N <= a few dozen).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from singflow.geometry import TorusGrid
from singflow.operators import exact_inner, gradient, grid_inner, laplacian
from singflow.weight import WeightField, weight_power


@dataclass(frozen=True)
class Mode:
    wavevector: tuple[int, int, int]
    kind: str  # 'const', 'cos' or 'sin'
    lambda_continuum: float
    lambda_stencil: float
    lambda_grad: float


def stencil_eigenvalue(k, grid: TorusGrid) -> float:
    s, L = grid.spacing, grid.length
    return (2.0 / s**2) * sum(1.0 - np.cos(2 * np.pi * ki * s / L) for ki in k)


def grad_eigenvalue(k, grid: TorusGrid) -> float:
    s, L = grid.spacing, grid.length
    return sum(np.sin(2 * np.pi * ki * s / L) ** 2 for ki in k) / s**2


def _wavevector_representatives(kmax: int):
    """One representative per {k, -k} pair: first nonzero component positive."""
    reps = []
    rng = range(-kmax, kmax + 1)
    for k1 in rng:
        for k2 in rng:
            for k3 in rng:
                k = (k1, k2, k3)
                if k == (0, 0, 0):
                    continue
                nz = next(v for v in k if v != 0)
                if nz > 0:
                    reps.append(k)
    return reps


@dataclass
class SpectralBasis:
    grid: TorusGrid
    modes: list[Mode]
    fields: np.ndarray  # (N, n, n, n)
    grads: np.ndarray = field(init=False)  # (N, 3, n, n, n)

    def __post_init__(self):
        self.grads = np.stack([gradient(f, self.grid.spacing) for f in self.fields])

    @property
    def size(self) -> int:
        return len(self.modes)

    def eigenvalues(self, which: str = "stencil") -> np.ndarray:
        key = {
            "continuum": "lambda_continuum",
            "stencil": "lambda_stencil",
            "grad": "lambda_grad",
        }[which]
        return np.array([getattr(m, key) for m in self.modes])


def build_basis(grid: TorusGrid, N: int) -> SpectralBasis:
    """First N eigenmodes of -Lap, ordered by (eigenvalue, wave-vector, cos<sin)."""
    if N < 1 or N > grid.n**3:
        raise ValueError("N must lie in [1, n^3]")
    volume = grid.length**3
    lam = (2 * np.pi / grid.length) ** 2

    kmax = 1
    while True:
        cands = [(0, 0, 0)] + _wavevector_representatives(kmax)
        entries = []
        for k in cands:
            k2 = sum(v * v for v in k)
            if k == (0, 0, 0):
                entries.append((0.0, k, 0, "const"))
            else:
                entries.append((lam * k2, k, 0, "cos"))
                entries.append((lam * k2, k, 1, "sin"))
        entries.sort(key=lambda e: (e[0], e[1], e[2]))
        # complete: the (N-1)-th eigenvalue must be below the box boundary
        if len(entries) >= N and entries[N - 1][0] <= lam * kmax**2:
            entries = entries[:N]
            break
        kmax += 1

    if any(abs(v) >= grid.n / 2 for e in entries for v in e[1]):
        raise ValueError("basis includes modes at or above the grid Nyquist wavenumber")

    x1, x2, x3 = grid.coords
    modes, fields = [], []
    for lam_c, k, _, kind in entries:
        if kind == "const":
            f = np.full(grid.shape, 1.0 / np.sqrt(volume))
        else:
            phase = 2 * np.pi * (k[0] * x1 + k[1] * x2 + k[2] * x3) / grid.length
            base = np.cos(phase) if kind == "cos" else np.sin(phase)
            f = np.sqrt(2.0 / volume) * np.broadcast_to(base, grid.shape)
        modes.append(
            Mode(
                wavevector=k,
                kind=kind,
                lambda_continuum=lam_c,
                lambda_stencil=stencil_eigenvalue(k, grid),
                lambda_grad=grad_eigenvalue(k, grid),
            )
        )
        fields.append(np.ascontiguousarray(f))
    return SpectralBasis(grid=grid, modes=modes, fields=np.stack(fields))


@dataclass
class WeightedBasis:
    """psi1_m = h^alpha e^{phi0_2} psi2_m, the blow-up-adapted test fields."""

    basis: SpectralBasis
    weight: WeightField
    phi0_2: np.ndarray
    fields: np.ndarray  # (N, n, n, n)
    grads: np.ndarray  # (N, 3, n, n, n)


def build_weighted_basis(basis: SpectralBasis, w: WeightField, phi0_2: np.ndarray) -> WeightedBasis:
    envelope = weight_power(w, w.alpha) * np.exp(phi0_2)
    fields = basis.fields * envelope[None]
    grads = np.stack([gradient(f, basis.grid.spacing) for f in fields])
    return WeightedBasis(basis=basis, weight=w, phi0_2=phi0_2, fields=fields, grads=grads)


def weighted_norm_check(wb: WeightedBasis) -> np.ndarray:
    """||psi1_m||^2 in L^2(M; h^{-alpha}): should be 1 for every mode."""
    w = wb.weight
    wtil = weight_power(w, -2.0 * w.alpha) * np.exp(-2.0 * wb.phi0_2)
    vol = w.grid.cell_volume
    return np.array([grid_inner(wtil * f, f, vol) for f in wb.fields])


@dataclass
class GalerkinSystem:
    basis: SpectralBasis
    wbasis: WeightedBasis
    weight: WeightField
    phi0_1: np.ndarray
    phi0_2: np.ndarray
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    times: np.ndarray  # load sample times
    F1: np.ndarray  # (len(times), N)
    F2: np.ndarray
    coeff_times: np.ndarray | None = None
    C1: np.ndarray | None = None  # (steps+1, N)
    C2: np.ndarray | None = None

    @property
    def N(self) -> int:
        return self.A.shape[0]


def assemble_galerkin(
    phi0_1: np.ndarray,
    phi0_2: np.ndarray,
    w: WeightField,
    basis: SpectralBasis,
    f1,
    f2,
    times: np.ndarray,
) -> GalerkinSystem:
    """Project the linearized system onto the basis.

    f1, f2 are callables t -> field sampled at `times`. Matrix entries are
    accumulated exactly (fsum) so they can be checked against a brute-force
    quadrature oracle at tight tolerance; the time-sampled loads use the fast
    fixed-order dot product.
    """
    grid = w.grid
    vol = grid.cell_volume
    s = grid.spacing
    N = basis.size

    wb = build_weighted_basis(basis, w, phi0_2)
    wtil = weight_power(w, -2.0 * w.alpha) * np.exp(-2.0 * phi0_2)
    g0 = gradient(phi0_1, s)
    g0_sq = np.sum(g0 * g0, axis=0)

    ones = np.ones(grid.shape)
    A = np.empty((N, N))
    B = np.empty((N, N))
    C = np.empty((N, N))
    D = np.empty((N, N))
    for m in range(N):
        wpsi1_m = wtil * wb.fields[m]
        for l in range(N):
            A[m, l] = exact_inner(wtil * np.sum(wb.grads[l] * wb.grads[m], axis=0), ones, vol)
            B[m, l] = exact_inner(2.0 * np.sum(g0 * basis.grads[l], axis=0), wpsi1_m, vol)
            # -(Lap psi2_l, psi2_m) written through the adjoint identity
            C[m, l] = 2.0 * exact_inner(
                wtil * g0_sq * basis.fields[l], basis.fields[m], vol
            ) + exact_inner(np.sum(basis.grads[l] * basis.grads[m], axis=0), ones, vol)
            D[m, l] = exact_inner(
                -2.0 * wtil * np.sum(g0 * wb.grads[l], axis=0), basis.fields[m], vol
            )

    F1 = np.empty((len(times), N))
    F2 = np.empty((len(times), N))
    wpsi1 = wtil[None] * wb.fields
    for it, t in enumerate(times):
        f1_t = f1(float(t))
        f2_t = f2(float(t))
        F1[it] = vol * wpsi1.reshape(N, -1) @ f1_t.ravel()
        F2[it] = vol * basis.fields.reshape(N, -1) @ f2_t.ravel()

    return GalerkinSystem(
        basis=basis,
        wbasis=wb,
        weight=w,
        phi0_1=phi0_1,
        phi0_2=phi0_2,
        A=A,
        B=B,
        C=C,
        D=D,
        times=np.asarray(times, dtype=float),
        F1=F1,
        F2=F2,
    )


class OdeBlowupError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite Galerkin coefficient at step {step} (max |C| = {value})")
        self.step = step


def integrate_ode(system: GalerkinSystem, T: float, dt: float) -> GalerkinSystem:
    """Implicit trapezoidal integration of the 2N-dimensional system from zero data."""
    N = system.N
    M = np.zeros((2 * N, 2 * N))
    M[:N, :N] = system.A
    M[:N, N:] = system.B
    M[N:, N:] = system.C
    M[N:, :N] = system.D

    steps = int(round(T / dt))
    t_grid = dt * np.arange(steps + 1)
    F = np.zeros((steps + 1, 2 * N))
    for m in range(N):
        F[:, m] = np.interp(t_grid, system.times, system.F1[:, m])
        F[:, N + m] = np.interp(t_grid, system.times, system.F2[:, m])

    eye = np.eye(2 * N)
    lhs_inv = np.linalg.inv(eye + 0.5 * dt * M)
    rhs_mat = eye - 0.5 * dt * M

    traj = np.zeros((steps + 1, 2 * N))
    c = np.zeros(2 * N)
    for i in range(steps):
        c = lhs_inv @ (rhs_mat @ c + 0.5 * dt * (F[i] + F[i + 1]))
        if not np.all(np.isfinite(c)):
            finite = c[np.isfinite(c)]
            raise OdeBlowupError(i + 1, float(np.max(np.abs(finite))) if finite.size else float("nan"))
        traj[i + 1] = c

    system.coeff_times = t_grid
    system.C1 = traj[:, :N]
    system.C2 = traj[:, N:]
    return system


def reconstruct(system: GalerkinSystem, index: int) -> tuple[np.ndarray, np.ndarray]:
    """(k1, k2) fields at integration step `index`."""
    if system.C1 is None:
        raise ValueError("integrate_ode must run before reconstruct")
    N = system.N
    k1 = np.tensordot(system.C1[index], system.wbasis.fields, axes=(0, 0))
    k2 = np.tensordot(system.C2[index], system.basis.fields, axes=(0, 0))
    return k1, k2


def project_onto_basis(system: GalerkinSystem, k1: np.ndarray, k2: np.ndarray):
    """Coefficients recovering (k1, k2) from the weighted/plain Gram systems."""
    vol = system.weight.grid.cell_volume
    wtil = weight_power(system.weight, -2.0 * system.weight.alpha) * np.exp(-2.0 * system.phi0_2)
    N = system.N
    wb = system.wbasis.fields
    gram1 = vol * (wb.reshape(N, -1) * wtil.ravel()[None]) @ wb.reshape(N, -1).T
    rhs1 = vol * (wb.reshape(N, -1) * wtil.ravel()[None]) @ k1.ravel()
    gram2 = vol * system.basis.fields.reshape(N, -1) @ system.basis.fields.reshape(N, -1).T
    rhs2 = vol * system.basis.fields.reshape(N, -1) @ k2.ravel()
    return np.linalg.solve(gram1, rhs1), np.linalg.solve(gram2, rhs2)


def weak_residual(
    states,
    system: GalerkinSystem,
    f1,
    f2,
    checkpoints: int = 8,
    test_functions: tuple[SpectralBasis, WeightedBasis] | None = None,
) -> float:
    """Max defect of the two weak-form identities over a set of test functions.

    `states` iterates (t, k1, k2) at uniform time spacing from t=0; time
    integrals are trapezoidal on that spacing and the identities are checked
    at `checkpoints` evenly spread times. Test functions default to the
    system's own basis fields (time independent, so the time-derivative
    transfer terms vanish); pass a larger (basis, weighted basis) pair to
    probe directions outside the solution span.
    """
    grid = system.weight.grid
    vol = grid.cell_volume
    s = grid.spacing
    wtil = weight_power(system.weight, -2.0 * system.weight.alpha) * np.exp(-2.0 * system.phi0_2)
    g0 = gradient(system.phi0_1, s)
    g0_sq = np.sum(g0 * g0, axis=0)

    if test_functions is None:
        test_basis, test_wbasis = system.basis, system.wbasis
    else:
        test_basis, test_wbasis = test_functions
    N = test_basis.size

    wpsi1 = (wtil[None] * test_wbasis.fields).reshape(N, -1)
    psi2 = test_basis.fields.reshape(N, -1)

    rows = []
    times = []
    for t, k1, k2 in states:
        gk1 = gradient(k1, s)
        gk2 = gradient(k2, s)
        mass1 = vol * wpsi1 @ k1.ravel()
        mass2 = vol * psi2 @ k2.ravel()
        stiff1 = vol * np.array(
            [
                grid_inner(wtil * np.sum(gk1 * test_wbasis.grads[m], axis=0), np.ones(grid.shape), 1.0)
                for m in range(N)
            ]
        )
        coup1 = vol * wpsi1 @ (2.0 * np.sum(g0 * gk2, axis=0)).ravel()
        load1 = vol * wpsi1 @ f1(float(t)).ravel()
        stiff2 = vol * np.array(
            [grid_inner(np.sum(gk2 * test_basis.grads[m], axis=0), np.ones(grid.shape), 1.0) for m in range(N)]
        )
        coup2 = vol * psi2 @ (2.0 * wtil * g0_sq * k2 - 2.0 * wtil * np.sum(g0 * gk1, axis=0)).ravel()
        load2 = vol * psi2 @ f2(float(t)).ravel()
        rows.append(np.concatenate([mass1, stiff1 + coup1 - load1, mass2, stiff2 + coup2 - load2]))
        times.append(t)

    rows = np.asarray(rows)
    times = np.asarray(times)
    n_steps = len(times) - 1
    check_idx = np.unique(np.linspace(1, n_steps, min(checkpoints, n_steps)).astype(int))

    defect = 0.0
    for idx in check_idx:
        tt = times[: idx + 1]
        integrand1 = rows[: idx + 1, N : 2 * N]
        integrand2 = rows[: idx + 1, 3 * N :]
        id1 = rows[idx, :N] + np.trapezoid(integrand1, tt, axis=0)
        id2 = rows[idx, 2 * N : 3 * N] + np.trapezoid(integrand2, tt, axis=0)
        defect = max(defect, float(np.max(np.abs(id1))), float(np.max(np.abs(id2))))
    return defect


def galerkin_states(system: GalerkinSystem):
    """Iterator of (t, k1, k2) over the stored coefficient trajectory."""
    for i, t in enumerate(system.coeff_times):
        k1, k2 = reconstruct(system, i)
        yield float(t), k1, k2


def energy_estimate_sides(system: GalerkinSystem, f1, f2) -> tuple[float, float]:
    """Measured (LHS, RHS) of the Galerkin energy estimate.

    LHS: max_t (||rho^-a k1||^2 + ||k2||^2) plus the time integral of the
    weighted gradient energies. RHS: ||rho^{-a+1} f1||^2 + ||f2||^2 in
    L^2(0,T; L^2).
    """
    w = system.weight
    grid = w.grid
    vol = grid.cell_volume
    s = grid.spacing
    alpha = w.alpha
    rho = w.rho.rho
    wtil = weight_power(w, -2.0 * alpha) * np.exp(-2.0 * system.phi0_2)

    max_mass = 0.0
    grad_series = []
    for t, k1, k2 in galerkin_states(system):
        mass = grid_inner(rho ** (-2 * alpha) * k1, k1, vol) + grid_inner(k2, k2, vol)
        max_mass = max(max_mass, mass)
        gk1 = gradient(k1, s)
        gk2 = gradient(k2, s)
        grad_series.append(
            grid_inner(wtil * np.sum(gk1 * gk1, axis=0), np.ones(grid.shape), vol)
            + grid_inner(np.sum(gk2 * gk2, axis=0), np.ones(grid.shape), vol)
        )
    lhs = max_mass + float(np.trapezoid(grad_series, system.coeff_times))

    rhs_series = []
    for t in system.coeff_times:
        f1_t, f2_t = f1(float(t)), f2(float(t))
        rhs_series.append(
            grid_inner(rho ** (2 * (1 - alpha)) * f1_t, f1_t, vol) + grid_inner(f2_t, f2_t, vol)
        )
    rhs = float(np.trapezoid(rhs_series, system.coeff_times))
    return lhs, rhs


def poincare_ratio(wb: WeightedBasis, coeffs: np.ndarray) -> float:
    """(int k1^2 / h^{2a+2}) / (int |grad k1|^2 / h^{2a}) for a reconstruction."""
    w = wb.weight
    vol = w.grid.cell_volume
    k1 = np.tensordot(coeffs, wb.fields, axes=(0, 0))
    gk1 = np.tensordot(coeffs, wb.grads, axes=(0, 0))
    num = grid_inner(weight_power(w, -2 * w.alpha - 2) * k1, k1, vol)
    den = grid_inner(weight_power(w, -2 * w.alpha) * np.sum(gk1 * gk1, axis=0), np.ones(w.grid.shape), vol)
    return num / den


def linearized_imex_states(
    phi0_1: np.ndarray,
    phi0_2: np.ndarray,
    w: WeightField,
    f1,
    f2,
    T: float,
    dt: float,
):
    """Grid-level second-order IMEX (Crank-Nicolson + Heun) solve of the
    linearized system from zero data, yielding (t, k1, k2) each step.

    Cross-validates the Galerkin route: diffusion is treated spectrally with
    the 7-point symbol, drift and couplings explicitly in drift form.
    """
    from singflow.flow import heat_propagator_factors

    grid = w.grid
    s = grid.spacing
    wtil = weight_power(w, -2.0 * w.alpha) * np.exp(-2.0 * phi0_2)
    g0 = gradient(phi0_1, s)
    g0_sq = np.sum(g0 * g0, axis=0)
    v = gradient(phi0_2, s) + w.alpha * w.grad_log_h

    half_minus, half_plus = heat_propagator_factors(grid, dt)

    def explicit(k1, k2, t):
        gk1 = gradient(k1, s)
        gk2 = gradient(k2, s)
        n1 = -2.0 * np.sum(v * gk1, axis=0) - 2.0 * np.sum(g0 * gk2, axis=0) + f1(t)
        n2 = -2.0 * wtil * g0_sq * k2 + 2.0 * wtil * np.sum(g0 * gk1, axis=0) + f2(t)
        return n1, n2

    def cn_step(k, expl):
        k_hat = np.fft.rfftn(k, axes=(0, 1, 2))
        rhs = half_plus * k_hat + dt * np.fft.rfftn(expl, axes=(0, 1, 2))
        return np.fft.irfftn(rhs * half_minus, s=grid.shape, axes=(0, 1, 2))

    steps = int(round(T / dt))
    k1 = grid.zeros()
    k2 = grid.zeros()
    yield 0.0, k1.copy(), k2.copy()
    for i in range(steps):
        t = i * dt
        n1a, n2a = explicit(k1, k2, t)
        k1_pred = cn_step(k1, n1a)
        k2_pred = cn_step(k2, n2a)
        n1b, n2b = explicit(k1_pred, k2_pred, t + dt)
        k1 = cn_step(k1, 0.5 * (n1a + n1b))
        k2 = cn_step(k2, 0.5 * (n2a + n2b))
        yield (i + 1) * dt, k1.copy(), k2.copy()
