"""Per-DG line-fault diagnosis: pre-filters, parity space, detection rules,
and the regularized faulty-current estimator with its error bound.

The runtime chain per DG unit i is

    pre-filter 1 (decouples the actuator fault)        -> r_i
    open-loop line-current estimators                  -> sum_k B_ik Ihat_k,h
    pre-filter 2 (filters the estimated healthy part)  -> rhat_I,i
    residual r~_i = r_i - rhat_I,i

followed by a discrete sliding-window parity projection of r~ at the
sampling period, weighted least squares for the unknown load, Chebyshev
thresholds, the three-valued status rules, and (after detection) the
regularized estimator for the window-mean faulty current.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import (ConfigError, DimensionMismatch, NegativeVariance,
                     RankDeficient, SingularK, SingularPsi, ZeroZbar)
from .grid import GridSpec, ScenarioTrace, aggregate_fault_current
from .numerics import null_space_rows, zoh_discretize
from .synthesis import FilterDesign

NU1 = np.array([[1.0, 0.0]])
NU2 = np.array([[0.0, 1.0]])


# --- runtime filters (exact stepping, first-order-hold inputs) -------------------

class _ExactFilter:
    """LTI filter stepped by the exact matrix-exponential map."""

    def __init__(self, A: np.ndarray, B: np.ndarray):
        self.A = A
        self.B = B
        self.x = np.zeros(A.shape[0])
        self._h = None
        self._mats = None

    @property
    def output(self) -> float:
        return float(self.x[-1])

    def _step_mats(self, h: float):
        if self._h != h:
            Ead, M0, M1 = foh_step_matrices(self.A, h)
            self._mats = (Ead, M0 @ self.B, M1 @ self.B)
            self._h = h
        return self._mats

    def advance(self, u0: np.ndarray, u1: np.ndarray, h: float) -> float:
        Ead, F0, F1 = self._step_mats(h)
        self.x = Ead @ self.x + F0 @ u0 + F1 @ u1
        return self.output

    def warm_start_input(self, u):
        """Start at the DC-consistent state for a constant past input u."""
        self.x = np.linalg.solve(self.A, -self.B @ np.atleast_1d(u))


class Prefilter1(_ExactFilter):
    """-N(p) B_cal / a(p) on Y = [y; V*]; output decouples the actuator fault."""

    def __init__(self, design: FilterDesign, vref: float):
        if design.dae.variant != "line":
            raise DimensionMismatch("pre-filter 1 needs a line-variant design")
        super().__init__(design.Ar_balanced, design.input_matrix_balanced)
        self.design = design
        self.vref = float(vref)

    def step(self, y, h: float, y_next=None) -> float:
        y = np.asarray(y, dtype=float)
        u0 = np.array([y[0], y[1], y[2], self.vref])
        if y_next is None:
            u1 = u0
        else:
            yn = np.asarray(y_next, dtype=float)
            u1 = np.array([yn[0], yn[1], yn[2], self.vref])
        return self.advance(u0, u1, h)


class Prefilter2(_ExactFilter):
    """N(p) G / a(p) on the aggregated healthy-line-current estimate."""

    def __init__(self, design: FilterDesign):
        if design.dae.variant != "line":
            raise DimensionMismatch("pre-filter 2 needs a line-variant design")
        super().__init__(design.Ar_balanced, design.target_gain_balanced.reshape(-1, 1))

    def step(self, agg_ihat: float, h: float, agg_next: float | None = None) -> float:
        u0 = np.array([float(agg_ihat)])
        u1 = u0 if agg_next is None else np.array([float(agg_next)])
        return self.advance(u0, u1, h)


class LineCurrentEstimator:
    """Open-loop estimate of one line's fault-free current from end voltages."""

    def __init__(self, R: float, L: float, i0: float = 0.0):
        self.R = float(R)
        self.L = float(L)
        self.I = float(i0)
        self._h = None
        self._mats = None

    def _step_mats(self, h: float):
        if self._h != h:
            a = -self.R / self.L
            ead = np.exp(a * h)
            g1 = (ead - 1.0) / a
            g2 = (g1 - h) / a
            self._mats = (ead, (g1 - g2 / h) / self.L, (g2 / h) / self.L)
            self._h = h
        return self._mats

    def step(self, v_pos: float, v_neg: float, h: float,
             v_pos_next: float | None = None, v_neg_next: float | None = None) -> float:
        ead, f0, f1 = self._step_mats(h)
        u0 = v_pos - v_neg
        u1 = u0 if v_pos_next is None else (v_pos_next - v_neg_next)
        self.I = ead * self.I + f0 * u0 + f1 * u1
        return self.I


def residual_step(r_i: float, rhat_I: float) -> float:
    """The diagnosis residual r~ = r - rhat_I."""
    return r_i - rhat_I


@dataclass
class FilterBank:
    """Per-DG runtime filter matrices packed for the simulation kernel."""

    Ar: np.ndarray    # (nf, nf) shared, balanced coordinates
    Bya: np.ndarray   # (n, nf, 4) actuator-estimator inputs
    Byr: np.ndarray   # (n, nf, 4) pre-filter-1 inputs
    Bg: np.ndarray    # (n, nf)    pre-filter-2 input columns
    actuator_designs: tuple
    line_designs: tuple

    def discretize(self, h: float, lines) -> dict:
        """Exact step matrices at step h (first-order-hold input weights)."""
        Ead, M0, M1 = foh_step_matrices(self.Ar, h)
        n, nf, _ = self.Bya.shape
        F0a = np.einsum("ab,ibc->iac", M0, self.Bya)
        F1a = np.einsum("ab,ibc->iac", M1, self.Bya)
        F0r = np.einsum("ab,ibc->iac", M0, self.Byr)
        F1r = np.einsum("ab,ibc->iac", M1, self.Byr)
        F0g = (M0 @ self.Bg.T).T
        F1g = (M1 @ self.Bg.T).T
        m = len(lines)
        ead_l = np.zeros(m)
        f0_l = np.zeros(m)
        f1_l = np.zeros(m)
        for k, ln in enumerate(lines):
            a = -ln.R / ln.L
            ead_l[k] = np.exp(a * h)
            g1 = (ead_l[k] - 1.0) / a
            g2 = (g1 - h) / a
            f0_l[k] = (g1 - g2 / h) / ln.L
            f1_l[k] = (g2 / h) / ln.L
        return dict(Ead=Ead, F0a=F0a, F1a=F1a, F0r=F0r, F1r=F1r,
                    F0g=F0g, F1g=F1g, ead_l=ead_l, f0_l=f0_l, f1_l=f1_l)


def foh_step_matrices(A: np.ndarray, h: float):
    """Exact step of x' = A x + B u with u linear over [0, h].

    Returns (Ead, M0, M1) such that x+ = Ead x + M0 B u(0) + M1 B u(h).
    """
    from .numerics import expm
    Ead = expm(A * h)
    Ainv = np.linalg.inv(A)
    G1 = Ainv @ (Ead - np.eye(A.shape[0]))
    G2 = Ainv @ (G1 - h * np.eye(A.shape[0]))
    return Ead, G1 - G2 / h, G2 / h


def make_filter_bank(actuator_designs, line_designs) -> FilterBank:
    """Pack per-DG designs for co-integration, in balanced coordinates
    (the shared output row is unchanged by the balancing similarity)."""
    n = len(actuator_designs)
    if len(line_designs) != n:
        raise DimensionMismatch("need one actuator and one line design per DG")
    Ar = actuator_designs[0].Ar
    for d in list(actuator_designs) + list(line_designs):
        if not np.allclose(d.Ar, Ar, rtol=0, atol=1e-9 * max(1.0, np.abs(Ar).max())):
            raise DimensionMismatch("all designs must share the same denominator")
    Ab = actuator_designs[0].Ar_balanced
    nf = Ar.shape[0]
    Bya = np.zeros((n, nf, 4))
    Byr = np.zeros((n, nf, 4))
    Bg = np.zeros((n, nf))
    for i in range(n):
        Bya[i] = actuator_designs[i].input_matrix_balanced
        Byr[i] = line_designs[i].input_matrix_balanced
        Bg[i] = line_designs[i].target_gain_balanced
    return FilterBank(Ar=Ab.copy(), Bya=Bya, Byr=Byr, Bg=Bg,
                      actuator_designs=tuple(actuator_designs),
                      line_designs=tuple(line_designs))


# --- residual model and parity kit ----------------------------------------------

@dataclass
class ResidualModel:
    """State-space form of the residual r~ for one DG, plus its ZOH discretization.

    Continuous: x' = Ar x + Bg (f_I + P/V) + Bw varpi,  r~ = Cr x,
    with varpi = [sum_k B_ik eps_k; delta; zeta] (7 channels).
    """

    Ar: np.ndarray
    Bg: np.ndarray        # (nf,)
    Bw: np.ndarray        # (nf, 7)
    Cr: np.ndarray        # (nf,)
    ts: float
    Ad: np.ndarray
    Bdg: np.ndarray       # (nf,)
    Bdw: np.ndarray       # (nf, 7)
    varpi_cov: np.ndarray  # (7,7) per-sample covariance of varpi


def residual_model(design: FilterDesign, spec: GridSpec, dg_index: int,
                   ts: float) -> ResidualModel:
    """Build the per-DG residual model from the line-variant design.

    The per-sample varpi covariance aggregates the line noise over connected
    lines (sum of squared incidence entries times eps variances) and maps the
    process-noise intensity to its ZOH-equivalent per-sample variance
    (delta_cov / ts); the measurement block is used as-is.
    """
    if design.dae.variant != "line":
        raise DimensionMismatch("residual model needs the line-variant design")
    # balanced coordinates: all parity quantities are similarity-invariant,
    # the raw companion form is numerically unusable at fast pole scales
    Ar = design.Ar_balanced
    Bg = design.target_gain_balanced
    # B_omega = [N_0; ...; N_dN] [G  I6] = [Bg | numerator stack]
    Bw = np.hstack([Bg.reshape(-1, 1), design.numerators_balanced])
    Cr = design.Cr.ravel()
    Ad, Bd = zoh_discretize(Ar, np.column_stack([Bg, Bw]), ts)
    eps_agg = float(np.sum(spec.incidence[dg_index] ** 2 * spec.noise.eps_var))
    cov = np.zeros((7, 7))
    cov[0, 0] = eps_agg
    cov[1:4, 1:4] = spec.noise.delta_cov / ts
    cov[4:7, 4:7] = spec.noise.zeta_cov
    return ResidualModel(Ar=Ar, Bg=Bg, Bw=Bw, Cr=Cr, ts=ts,
                         Ad=Ad, Bdg=Bd[:, 0].copy(), Bdw=Bd[:, 1:].copy(),
                         varpi_cov=cov)


@dataclass
class ParityKit:
    """Precomputed sliding-window machinery for one DG unit."""

    T: int
    O: np.ndarray            # (T, nf) window observability matrix
    Z1: np.ndarray           # (T, T-1) Toeplitz of the scalar input channel
    Z2: np.ndarray           # (T, 7(T-1)) Toeplitz of the noise channels
    W: np.ndarray            # (n_Y, T) orthonormal basis of col(O)-complement
    WZ1: np.ndarray          # (n_Y, T-1)
    sigma_omega: np.ndarray  # (n_Y, n_Y) covariance of the projected noise
    sigma_omega_inv: np.ndarray
    Zbar: np.ndarray         # (n_Y,) W Z1 1
    sbar_WZ1: float          # largest singular value of W Z1
    lam_min: float           # eigenvalue range of sigma_omega
    lam_max: float

    @property
    def n_upsilon(self) -> int:
        return self.W.shape[0]


def build_parity(model: ResidualModel, T: int) -> ParityKit:
    """Assemble the window-T parity kit from the discretized residual model."""
    nf = model.Ar.shape[0]
    if T <= nf:
        raise ConfigError(f"window T must exceed the filter order {nf}")
    if T % 2 != 0:
        raise ConfigError("window T must be even (the T/2 status rule)")
    O = np.zeros((T, nf))
    row = model.Cr.copy()
    for j in range(T):
        O[j] = row
        row = row @ model.Ad
    h1 = np.zeros(T)
    h2 = np.zeros((T, 7))
    v = model.Bdg.copy()
    M = model.Bdw.copy()
    for i in range(T):
        h1[i] = model.Cr @ v
        h2[i] = model.Cr @ M
        v = model.Ad @ v
        M = model.Ad @ M
    Z1 = np.zeros((T, T - 1))
    Z2 = np.zeros((T, 7 * (T - 1)))
    for j in range(1, T):
        for l in range(j):
            Z1[j, l] = h1[j - 1 - l]
            Z2[j, 7 * l:7 * (l + 1)] = h2[j - 1 - l]
    W = null_space_rows(O)
    if W.shape[0] == 0:
        raise RankDeficient("window observability matrix leaves no parity directions")
    WZ2 = W @ Z2
    Sstack = np.kron(np.eye(T - 1), model.varpi_cov)
    SO = WZ2 @ Sstack @ WZ2.T
    SO = 0.5 * (SO + SO.T)
    lam = np.linalg.eigvalsh(SO)
    rho = 1e-12 * np.trace(SO)
    if lam[0] < rho:
        SO = SO + rho * np.eye(SO.shape[0])
        lam = lam + rho
    WZ1 = W @ Z1
    return ParityKit(T=T, O=O, Z1=Z1, Z2=Z2, W=W, WZ1=WZ1,
                     sigma_omega=SO, sigma_omega_inv=np.linalg.inv(SO),
                     Zbar=WZ1 @ np.ones(T - 1),
                     sbar_WZ1=float(np.linalg.svd(WZ1, compute_uv=False)[0]),
                     lam_min=float(lam[0]), lam_max=float(lam[-1]))


# --- per-sample operations -------------------------------------------------------

def wls_load(upsilon, psi, sigma_omega) -> float:
    """Weighted least-squares load estimate P = Phi Upsilon."""
    upsilon = np.asarray(upsilon, dtype=float)
    psi = np.asarray(psi, dtype=float)
    w = np.linalg.solve(sigma_omega, psi)
    den = float(psi @ w)
    if den < 1e-14:
        raise SingularPsi(f"Psi'S^-1 Psi = {den:.3e} is numerically singular")
    return float(w @ upsilon) / den


def thresholds(kit: ParityKit, psi, alpha: float) -> np.ndarray:
    """Chebyshev thresholds eps_k = alpha sqrt(Var[residual component k])."""
    psi = np.asarray(psi, dtype=float)
    w = kit.sigma_omega_inv @ psi
    den = float(psi @ w)
    if den < 1e-14:
        raise SingularPsi(f"Psi'S^-1 Psi = {den:.3e} is numerically singular")
    var = np.diag(kit.sigma_omega) - (kit.sigma_omega @ w) * psi / den
    floor = -1e-12 * max(1.0, float(np.abs(var).max()))
    if np.any(var < floor):
        raise NegativeVariance(f"residual variance fell below {floor:.2e}")
    return alpha * np.sqrt(np.maximum(var, 0.0))


def update_status(ups_tilde, eps, state, k: int):
    """Apply the crossing-time recorder and the three-valued status rules."""
    crossed = bool(np.any(np.abs(ups_tilde) > eps))
    if not crossed:
        state.Tcal = k
    d = k - state.Tcal
    T = state.T
    if d < T // 2:
        state.sigma = 0
    elif d < T:
        state.sigma = 1
    else:
        state.sigma = 2
    return state.sigma


def regularized_estimate(upsilon, gamma_mat, sigma_omega_inv, eta: float,
                         theta_prev) -> np.ndarray:
    """Closed-form solution of the regularized least-squares problem.

    Theta = K^-1 (Gamma' S^-1 Upsilon + eta nu1' nu1 Theta_prev),
    K = Gamma' S^-1 Gamma + eta nu1' nu1;   fhat_I = nu2 Theta.
    """
    G = np.asarray(gamma_mat, dtype=float)
    th_prev = np.asarray(theta_prev, dtype=float).reshape(2)
    K = G.T @ sigma_omega_inv @ G + eta * (NU1.T @ NU1)
    sv = np.linalg.svd(K, compute_uv=False)
    if sv[-1] <= 0 or sv[0] / sv[-1] > 1e14:
        raise SingularK(f"K condition number {sv[0] / max(sv[-1], 1e-300):.3e} > 1e14")
    rhs = G.T @ (sigma_omega_inv @ np.asarray(upsilon, dtype=float)) \
        + eta * (NU1.T @ NU1) @ th_prev
    return np.linalg.solve(K, rhs)


def error_bound(kit: ParityKit, psi, zbar, eta: float,
                df_norm: float, dP_norm: float, p_dev: float) -> float:
    """Right-hand side of the window-mean estimation error bound.

    Uses the 2x2 eigenvalue bracket (lam_max = Psi'Psi + Zbar'Zbar,
    lam_min via the Cauchy-Schwarz determinant form), the extreme
    eigenvalues of the projected-noise covariance, and the largest
    singular value of W Z1.
    """
    psi = np.asarray(psi, dtype=float)
    zbar = np.asarray(zbar, dtype=float)
    ZZ = float(zbar @ zbar)
    if ZZ <= 0:
        raise ZeroZbar("Zbar vanishes; the fault direction is unobservable")
    PP = float(psi @ psi)
    PZ = float(psi @ zbar)
    lamM_max = PP + ZZ
    lamM_min = (PP * ZZ - PZ * PZ) / lamM_max
    t1 = (kit.lam_max / (lamM_min + eta * kit.lam_max)) \
        * (np.sqrt(lamM_max) / kit.lam_min) * kit.sbar_WZ1 * (df_norm + dP_norm)
    t2 = (kit.lam_max * PZ) / (kit.lam_min * ZZ) * abs(p_dev)
    return float(t1 + t2)


def lemma1_bracket(psi, zbar) -> tuple[float, float]:
    """(lam_min, lam_max) bracket of the 2x2 Gram matrix of [Psi Zbar]."""
    psi = np.asarray(psi, dtype=float)
    zbar = np.asarray(zbar, dtype=float)
    PP = float(psi @ psi)
    ZZ = float(zbar @ zbar)
    PZ = float(psi @ zbar)
    return (PP * ZZ - PZ * PZ) / (PP + ZZ), PP + ZZ


# --- sequential reference implementation ----------------------------------------

@dataclass
class DiagnosisState:
    """Mutable per-DG runtime state for the step-by-step diagnosis."""

    T: int
    alpha: float
    eta: float
    rbuf: list = field(default_factory=list)
    vbuf: list = field(default_factory=list)
    sigma: int = 0
    Tcal: int = -1
    theta: np.ndarray = None
    p_ref: float = np.nan       # last in-threshold WLS load estimate
    k_detect: int = -1

    def ready(self, k: int) -> bool:
        return k >= self.T


def diagnose_step(state: DiagnosisState, kit: ParityKit, rtilde_k: float,
                  vmeas_k: float, k: int):
    """One step of the per-DG diagnosis (Algorithm-1 semantics).

    Returns (sigma, Phat, fhat) where fhat is NaN before fault detection.
    Call with consecutive integer k starting at 0.
    """
    T = state.T
    state.rbuf.append(float(rtilde_k))
    if len(state.rbuf) > T:
        state.rbuf.pop(0)
    phat = np.nan
    fhat = np.nan
    if k < T:
        state.Tcal = k
        state.vbuf.append(float(vmeas_k))
        if len(state.vbuf) > T - 1:
            state.vbuf.pop(0)
        return state.sigma, phat, fhat
    rwin = np.asarray(state.rbuf)
    vwin = 1.0 / np.asarray(state.vbuf)
    ups = kit.W @ rwin
    psi = kit.WZ1 @ vwin
    if state.sigma < 2:
        phat = wls_load(ups, psi, kit.sigma_omega)
        ups_t = ups - psi * phat
        eps = thresholds(kit, psi, state.alpha)
        inside = bool(np.all(np.abs(ups_t) <= eps))
        if inside:
            state.p_ref = phat
        update_status(ups_t, eps, state, k)
        if state.sigma == 2:
            state.k_detect = k
            p0 = state.p_ref if np.isfinite(state.p_ref) else phat
            state.theta = np.array([p0, 0.0])
    else:
        gamma = np.column_stack([psi, kit.Zbar])
        state.theta = regularized_estimate(ups, gamma, kit.sigma_omega_inv,
                                           state.eta, state.theta)
        phat = float(state.theta[0])
        fhat = float(state.theta[1])
        state.sigma = 2
    state.vbuf.append(float(vmeas_k))
    if len(state.vbuf) > T - 1:
        state.vbuf.pop(0)
    return state.sigma, phat, fhat


# --- vectorized whole-trace driver ----------------------------------------------

@njit(cache=True, nogil=True)
def _status_scan(crossed, T, k0):
    ns = crossed.shape[0]
    sigma = np.zeros(ns, dtype=np.int64)
    tcal = np.empty(ns, dtype=np.int64)
    tcal[:] = -1
    t = k0 - 1
    kdet = -1
    for k in range(k0, ns):
        if not crossed[k]:
            t = k
        tcal[k] = t
        d = k - t
        if d < T // 2:
            sigma[k] = 0
        elif d < T:
            sigma[k] = 1
        else:
            sigma[k] = 2
            kdet = k
            break
    return sigma, tcal, kdet


@njit(cache=True, nogil=True)
def _estimation_scan(K11, K12, K22, g1, g2, eta, p0, k_start, ns):
    phat = np.full(ns, np.nan)
    fhat = np.full(ns, np.nan)
    p_prev = p0
    for k in range(k_start, ns):
        a = K11[k] + eta
        b = K12[k]
        c = K22
        det = a * c - b * b
        # keep the unregularized baseline computable through its
        # near-singular samples: floor the determinant at condition 1e14
        floor = (a + c) ** 2 * 1e-14
        if np.abs(det) < floor:
            det = floor if det >= 0 else -floor
        r1 = g1[k] + eta * p_prev
        r2 = g2[k]
        p = (c * r1 - b * r2) / det
        f = (-b * r1 + a * r2) / det
        phat[k] = p
        fhat[k] = f
        p_prev = p
    return phat, fhat


@dataclass
class DgDiagnosis:
    """Diagnosis outputs for one DG over a full trace."""

    sigma: np.ndarray        # (ns,)
    tcal: np.ndarray         # (ns,)
    phat: np.ndarray         # (ns,)
    fhat: np.ndarray         # (ns,) NaN before detection
    ups_tilde: np.ndarray    # (ns, n_Y) NaN rows before warm-up
    eps: np.ndarray          # (ns, n_Y)
    crossed: np.ndarray      # (ns,) bool
    k_detect: int            # first sample with sigma = 2, or -1
    p_ref: float             # prior load estimate used at activation
    bound: np.ndarray = None  # (ns,) oracle-mode error bound, if truths given


def diagnose_trace(rtilde: np.ndarray, vmeas: np.ndarray, kit: ParityKit,
                   alpha: float, eta: float,
                   fI_true: np.ndarray | None = None,
                   P_true: np.ndarray | None = None,
                   V_true: np.ndarray | None = None) -> DgDiagnosis:
    """Run the full per-DG diagnosis over a sampled trace.

    Implements the same phase logic as repeated diagnose_step (warm-up of T
    samples, discrimination with WLS + thresholds + status rules, latched
    estimation phase), vectorized over samples. When the true fault/load
    series are supplied, the oracle-mode error bound is evaluated at every
    post-detection sample.
    """
    from numpy.lib.stride_tricks import sliding_window_view

    ns = len(rtilde)
    T = kit.T
    nY = kit.n_upsilon
    if ns < T + 1:
        raise ConfigError("trace shorter than one diagnosis window")
    RW = sliding_window_view(rtilde, T)          # row q = samples q .. q+T-1
    VW = sliding_window_view(1.0 / vmeas, T - 1)
    # window ending at k uses rows k-T+1 of both views; k runs from T
    U_all = RW @ kit.W.T                         # (ns-T+1, nY)
    Psi_all = VW[:ns - T + 1] @ kit.WZ1.T
    w_all = Psi_all @ kit.sigma_omega_inv        # rows = S^-1 psi (symmetric S)
    den = np.einsum("ij,ij->i", w_all, Psi_all)
    if np.any(den[1:] < 1e-14):
        raise SingularPsi("Psi'S^-1 Psi numerically singular inside the trace")
    num = np.einsum("ij,ij->i", w_all, U_all)
    phat_wls = num / den
    ups_t = U_all - Psi_all * phat_wls[:, None]
    SOw = w_all @ kit.sigma_omega                # rows = S w  (= psi back-map)
    var = np.diag(kit.sigma_omega)[None, :] - SOw * Psi_all / den[:, None]
    if np.any(var < -1e-12 * max(1.0, float(np.abs(var).max()))):
        raise NegativeVariance("negative residual variance in vectorized pass")
    eps_all = alpha * np.sqrt(np.maximum(var, 0.0))
    crossed_w = np.any(np.abs(ups_t) > eps_all, axis=1)

    # map window-indexed arrays to sample index k (valid for k >= T)
    sigma = np.zeros(ns, dtype=np.int64)
    tcal = np.concatenate([np.arange(T), np.full(ns - T, -1)])
    crossed = np.zeros(ns, dtype=bool)
    crossed[T:] = crossed_w[1:ns - T + 1]
    sig_w, tcal_w, kdet = _status_scan(crossed, T, T)
    sigma[T:] = sig_w[T:]
    tcal[T:] = tcal_w[T:]

    phat = np.full(ns, np.nan)
    fhat = np.full(ns, np.nan)
    ups_out = np.full((ns, nY), np.nan)
    eps_out = np.full((ns, nY), np.nan)
    kd_end = kdet + 1 if kdet >= 0 else ns
    phat[T:kd_end] = phat_wls[1:kd_end - T + 1]
    ups_out[T:kd_end] = ups_t[1:kd_end - T + 1]
    eps_out[T:kd_end] = eps_all[1:kd_end - T + 1]

    p_ref = np.nan
    if kdet >= 0:
        inside = ~crossed[T:kdet + 1]
        idx = np.nonzero(inside)[0]
        if idx.size:
            p_ref = float(phat[T + idx[-1]])
        else:
            p_ref = float(phat[kdet])
        sigma[kdet:] = 2
        tcal[kdet + 1:] = tcal[kdet]
        K11 = np.zeros(ns)
        K12 = np.zeros(ns)
        g1 = np.zeros(ns)
        g2 = np.zeros(ns)
        wz = kit.sigma_omega_inv @ kit.Zbar
        K22 = float(kit.Zbar @ wz)
        k0 = kdet + 1
        rows = slice(k0 - T + 1, ns - T + 1)
        K11[k0:] = den[rows]
        K12[k0:] = w_all[rows] @ kit.Zbar
        g1[k0:] = num[rows]
        g2[k0:] = U_all[rows] @ wz
        # unlike the per-call operation (which raises SingularK), the trace
        # driver floors near-singular samples inside _estimation_scan so the
        # eta = 0 baseline can exhibit its ill-conditioned estimates
        ph_e, fh_e = _estimation_scan(K11, K12, K22, g1, g2, eta, p_ref, k0, ns)
        phat[k0:] = ph_e[k0:]
        fhat[k0:] = fh_e[k0:]

    out = DgDiagnosis(sigma=sigma, tcal=tcal, phat=phat, fhat=fhat,
                      ups_tilde=ups_out, eps=eps_out, crossed=crossed,
                      k_detect=kdet, p_ref=p_ref)

    if kdet >= 0 and fI_true is not None and P_true is not None and V_true is not None:
        # oracle-mode bound, vectorized over the post-detection samples
        ZZ = float(kit.Zbar @ kit.Zbar)
        if ZZ <= 0:
            raise ZeroZbar("Zbar vanishes; the fault direction is unobservable")
        bound = np.full(ns, np.nan)
        ks = np.arange(kdet + 1, ns)
        qs = ks - T + 1
        FW = sliding_window_view(fI_true, T - 1)[qs]
        PW = sliding_window_view(P_true, T - 1)[qs]
        VWt = sliding_window_view(V_true, T - 1)[qs]
        df = np.linalg.norm(FW - FW.mean(axis=1, keepdims=True), axis=1)
        dP = np.linalg.norm((PW - PW[:, :1]) / VWt, axis=1)
        PsiK = Psi_all[qs]
        PP = np.einsum("ij,ij->i", PsiK, PsiK)
        PZ = PsiK @ kit.Zbar
        lamM_max = PP + ZZ
        lamM_min = (PP * ZZ - PZ * PZ) / lamM_max
        p_prev = np.empty(len(ks))
        p_prev[0] = p_ref
        p_prev[1:] = phat[kdet + 1:ns - 1]
        t1 = (kit.lam_max / (lamM_min + eta * kit.lam_max)) \
            * (np.sqrt(lamM_max) / kit.lam_min) * kit.sbar_WZ1 * (df + dP)
        t2 = (kit.lam_max * PZ) / (kit.lam_min * ZZ) * np.abs(PW[:, 0] - p_prev)
        bound[ks] = t1 + t2
        out.bound = bound
    return out


@dataclass
class DiagnosisTrace:
    """Diagnosis outputs for all DG units of a scenario."""

    dgs: tuple  # tuple[DgDiagnosis]
    fI_true: np.ndarray  # (ns, n)
    fbar_true: np.ndarray  # (ns, n) window-mean of fI (the estimation target)


def run_algorithm1(trace: ScenarioTrace, spec: GridSpec, kits,
                   alpha: float, eta: float, with_bound: bool = True) -> DiagnosisTrace:
    """Run the per-DG diagnosis over a simulated trace for every DG unit."""
    n = spec.n
    Binc = spec.incidence
    ns = trace.nsamp
    T = kits[0].T
    fI = np.column_stack([aggregate_fault_current(trace, i, Binc) for i in range(n)])
    fbar = np.full((ns, n), np.nan)
    for i in range(n):
        csum = np.concatenate([[0.0], np.cumsum(fI[:, i])])
        # window mean over samples k-T+1 .. k-1
        ks = np.arange(T, ns)
        fbar[T:, i] = (csum[ks] - csum[ks - (T - 1)]) / (T - 1)
    results = []
    for i in range(n):
        res = diagnose_trace(
            trace.rtilde[:, i], trace.y[:, i, 0], kits[i], alpha, eta,
            fI_true=fI[:, i] if with_bound else None,
            P_true=trace.P[:, i] if with_bound else None,
            V_true=trace.x[:, i, 0] if with_bound else None)
        results.append(res)
    return DiagnosisTrace(dgs=tuple(results), fI_true=fI, fbar_true=fbar)
