"""Offline design of the DAE-based estimation filters.

Two filter variants share the same machinery:

* the actuator-fault estimator, which annihilates the augmented state
  [x; d] and has unity DC gain from the actuator-fault direction, and
* pre-filter 1 of the line-diagnosis block, which annihilates [x; f_a]
  and has unity DC gain from the load/line-current direction.

The constrained H2 minimization is solved exactly as an equality-
constrained QP: the numerator row is parameterized in the left null
space of the stacked coefficient matrix, the squared H2 norm becomes a
quadratic form through the observability-Gramian Lyapunov equation, and
the KKT system is solved directly (minimum-norm on flat directions).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, IllConditioned, Infeasible, NonHurwitz
from .numerics import lyapunov_solve, matrix_rank, null_space_rows

ANNIHILATION_RTOL = 1e-8
DC_GAIN_RTOL = 1e-10


@dataclass(frozen=True)
class DenominatorPoly:
    """Monic denominator a(p) = p^d + a_{d-1} p^{d-1} + ... + a_0, Hurwitz."""

    coeffs: np.ndarray  # (d,) low-to-high: a_0 ... a_{d-1}

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.coeffs, dtype=float))
        object.__setattr__(self, "coeffs", c)
        r = self.roots
        if np.any(r.real >= 0):
            raise NonHurwitz(f"denominator roots must lie in the open LHP, got {r}")

    @classmethod
    def from_roots(cls, roots) -> "DenominatorPoly":
        monic = np.real(np.poly(np.asarray(roots, dtype=complex)))
        return cls(coeffs=monic[::-1][:-1].copy())

    @property
    def degree(self) -> int:
        return len(self.coeffs)

    @property
    def a0(self) -> float:
        return float(self.coeffs[0])

    @property
    def roots(self) -> np.ndarray:
        return np.roots(np.concatenate(([1.0], self.coeffs[::-1])))

    def __call__(self, p: complex) -> complex:
        return p ** self.degree + sum(a * p ** j for j, a in enumerate(self.coeffs))


@dataclass(frozen=True)
class DaeSystem:
    """One DG unit's dynamics in DAE form: H(p) X + B_cal Y + target * s + omega = 0.

    For the actuator variant, X = [x; d] and `target` multiplies the actuator
    fault; for the line variant, X = [x; f_a] and `target` multiplies the
    lumped load/line-current signal d.
    """

    H1: np.ndarray      # 6x4
    H0: np.ndarray      # 6x4
    Bcal: np.ndarray    # 6x4, multiplies the known signals Y = [y; V*]
    target: np.ndarray  # 6x1 direction with the unity-DC-gain requirement
    variant: str = "actuator"

    def __post_init__(self):
        for name in ("H1", "H0", "Bcal", "target"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.H0.shape != self.H1.shape:
            raise DimensionMismatch("H0 and H1 must have identical shapes")
        if self.target.ndim == 1:
            object.__setattr__(self, "target", self.target.reshape(-1, 1))


def actuator_dae(A, B, D, E) -> DaeSystem:
    """DAE for estimating the actuator fault: decouples X = [x; d]."""
    n = A.shape[0]
    H1 = np.block([[-np.eye(n), np.zeros((n, 1))],
                   [np.zeros((n, n)), np.zeros((n, 1))]])
    H0 = np.block([[A, D.reshape(n, 1)],
                   [np.eye(n), np.zeros((n, 1))]])
    Bcal = np.block([[np.zeros((n, n)), B.reshape(n, 1)],
                     [-np.eye(n), np.zeros((n, 1))]])
    target = np.vstack([E.reshape(n, 1), np.zeros((n, 1))])
    return DaeSystem(H1=H1, H0=H0, Bcal=Bcal, target=target, variant="actuator")


def line_dae(A, B, D, E) -> DaeSystem:
    """DAE for pre-filter 1: decouples X = [x; f_a], unity gain from d."""
    n = A.shape[0]
    H1 = np.block([[-np.eye(n), np.zeros((n, 1))],
                   [np.zeros((n, n)), np.zeros((n, 1))]])
    H0 = np.block([[A, E.reshape(n, 1)],
                   [np.eye(n), np.zeros((n, 1))]])
    Bcal = np.block([[np.zeros((n, n)), B.reshape(n, 1)],
                     [-np.eye(n), np.zeros((n, 1))]])
    target = np.vstack([D.reshape(n, 1), np.zeros((n, 1))])
    return DaeSystem(H1=H1, H0=H0, Bcal=Bcal, target=target, variant="line")


def build_hbar(H0, H1, d_N: int) -> np.ndarray:
    """Stack the polynomial-product coefficient matrix.

    Block row j carries [H0 H1] starting at block column j, so that
    [N_0 ... N_dN] @ Hbar equals the coefficient stack of N(p) H(p).
    """
    if d_N < 1:
        raise DimensionMismatch("d_N must be >= 1")
    H0 = np.asarray(H0, dtype=float)
    H1 = np.asarray(H1, dtype=float)
    r, c = H0.shape
    Hbar = np.zeros(((d_N + 1) * r, (d_N + 2) * c))
    for j in range(d_N + 1):
        Hbar[j * r:(j + 1) * r, j * c:(j + 1) * c] = H0
        Hbar[j * r:(j + 1) * r, (j + 1) * c:(j + 2) * c] = H1
    return Hbar


def companion_realization(a: DenominatorPoly) -> tuple[np.ndarray, np.ndarray]:
    """Observable canonical (A_r, C_r) shared by all filters with denominator a."""
    d = a.degree
    Ar = np.zeros((d, d))
    Ar[1:, :-1] = np.eye(d - 1)
    Ar[:, -1] = -a.coeffs
    Cr = np.zeros((1, d))
    Cr[0, -1] = 1.0
    return Ar, Cr


def balance_diag(a: DenominatorPoly) -> np.ndarray:
    """Diagonal similarity scale for the companion form of a(p).

    With fast poles the raw companion coefficients span many orders of
    magnitude (a_0 ~ |root|^d), which wrecks both time stepping and matrix
    exponentials. The diagonal S = diag(s^{d-1}, ..., s, 1) with s the
    largest pole magnitude maps the companion to the one of the unit-scaled
    polynomial (times s), with O(1) entries. The output row [0...0 1] is
    unchanged, so sampled filter outputs are identical.
    """
    s0 = max(1.0, float(np.abs(a.roots).max()))
    d = a.degree
    return s0 ** np.arange(d - 1, -1, -1.0)


def balanced_state_matrix(Ar: np.ndarray, S: np.ndarray) -> np.ndarray:
    """S^-1 A_r S for diagonal S given as a vector."""
    return Ar * (S[None, :] / S[:, None])


def h2_sq(Ar, Br, Cr) -> float:
    """Squared H2 norm of (Ar, Br, Cr): trace(Br^T Qt Br) with the
    observability Gramian A_r^T Qt + Qt A_r + C_r^T C_r = 0."""
    Ar = np.asarray(Ar, dtype=float)
    Br = np.atleast_2d(np.asarray(Br, dtype=float))
    Cr = np.atleast_2d(np.asarray(Cr, dtype=float))
    Qt = lyapunov_solve(Ar.T, Cr.T @ Cr)
    return float(np.trace(Br.T @ Qt @ Br))


@dataclass
class FilterDesign:
    """A synthesized filter: numerator blocks, denominator, realization."""

    numerators: np.ndarray          # (d_N+1, 6): rows N_0 ... N_dN
    denominator: DenominatorPoly
    gamma: float                    # achieved squared-H2 bound of N/a
    Ar: np.ndarray
    Cr: np.ndarray
    dae: DaeSystem
    channel_h2_sq: np.ndarray = field(default=None)  # per-omega-channel H2^2

    @property
    def d_N(self) -> int:
        return self.numerators.shape[0] - 1

    @property
    def Br(self) -> np.ndarray:
        """Realization input matrix of N(p)/a(p): stacked numerator rows."""
        return self.numerators

    @property
    def input_matrix(self) -> np.ndarray:
        """Realization input matrix of the runtime filter -N(p) Bcal / a(p)."""
        return -self.numerators @ self.dae.Bcal

    @property
    def target_gain_vector(self) -> np.ndarray:
        """Realization input column of N(p) target / a(p) (B_G for pre-filters)."""
        return (self.numerators @ self.dae.target).ravel()

    def numerator_row(self) -> np.ndarray:
        return self.numerators.reshape(-1)

    @property
    def balance(self) -> np.ndarray:
        """Diagonal similarity that keeps the realization well-scaled."""
        return balance_diag(self.denominator)

    @property
    def Ar_balanced(self) -> np.ndarray:
        return balanced_state_matrix(self.Ar, self.balance)

    @property
    def input_matrix_balanced(self) -> np.ndarray:
        return self.input_matrix / self.balance[:, None]

    @property
    def numerators_balanced(self) -> np.ndarray:
        return self.numerators / self.balance[:, None]

    @property
    def target_gain_balanced(self) -> np.ndarray:
        return self.target_gain_vector / self.balance

    def transfer(self, p: complex) -> np.ndarray:
        """N(p)/a(p) evaluated at a point (1x6 row)."""
        N = sum(self.numerators[j] * p ** j for j in range(self.d_N + 1))
        return N / self.denominator(p)


def _padded_target(dae: DaeSystem, d_N: int) -> np.ndarray:
    r = dae.H0.shape[0]
    return np.vstack([dae.target, np.zeros((r * d_N, 1))])


def synthesize(dae: DaeSystem, a: DenominatorPoly, d_N: int = 2,
               cond_limit: float = 1e12) -> FilterDesign:
    """Solve the constrained H2-minimal numerator for the given DAE.

    minimize   ||N(p)/a(p)||_H2^2
    subject to [N_0 ... N_dN] Hbar = 0          (annihilation)
               N_0 target = a(0)                (unity DC gain)
    """
    if a.degree != d_N + 1:
        raise DimensionMismatch(f"need deg a = d_N + 1, got {a.degree} != {d_N + 1}")
    Hbar = build_hbar(dae.H0, dae.H1, d_N)
    tpad = _padded_target(dae, d_N)
    rank_h = matrix_rank(Hbar)
    if matrix_rank(np.hstack([Hbar, tpad])) <= rank_h:
        raise Infeasible(
            "target direction lies in the column range of Hbar; "
            "the DC-gain constraint cannot be met (raise d_N?)")
    basis = null_space_rows(Hbar)
    if basis.shape[0] == 0:
        raise Infeasible("Hbar has full row rank; no annihilating numerator exists")

    nfree = basis.shape[0]
    nf = d_N + 1
    width = dae.H0.shape[0]  # numerator blocks multiply the DAE rows from the left
    Ar, Cr = companion_realization(a)
    # Gramian computed in balanced coordinates (similarity-invariant objective)
    S = balance_diag(a)
    Qt_b = lyapunov_solve(balanced_state_matrix(Ar, S).T, Cr.T @ Cr)
    # quadratic form of the H2^2 objective in the null-space coordinates
    Bstack = basis.reshape(nfree, nf, width) / S[None, :, None]
    M = np.einsum("iac,ab,jbc->ij", Bstack, Qt_b, Bstack)
    M = 0.5 * (M + M.T)
    cvec = (basis @ tpad).ravel()

    KKT = np.zeros((nfree + 1, nfree + 1))
    KKT[:nfree, :nfree] = 2.0 * M
    KKT[:nfree, -1] = cvec
    KKT[-1, :nfree] = cvec
    rhs = np.zeros(nfree + 1)
    rhs[-1] = a.a0
    # minimum-norm solve; flat objective directions are truncated
    sol, _, _, sv = np.linalg.lstsq(KKT, rhs, rcond=1e-12)
    theta = sol[:nfree]
    N = theta @ basis
    numerators = N.reshape(nf, width)

    ann = np.linalg.norm(N @ Hbar)
    dc = float(N @ tpad.ravel()) - a.a0
    nrm = max(np.linalg.norm(N), 1.0)
    if ann > ANNIHILATION_RTOL * nrm or abs(dc) > 1e-8 * max(abs(a.a0), 1.0):
        cond = sv[0] / sv[-1] if sv[-1] > 0 else np.inf
        if cond > cond_limit:
            raise IllConditioned(
                f"KKT system condition number {cond:.2e} exceeds {cond_limit:.0e} "
                f"(annihilation residual {ann:.2e}, DC residual {dc:.2e})")
        raise IllConditioned(
            f"synthesis failed constraint verification: |N Hbar|={ann:.2e}, DC={dc:.2e}")

    gamma = float(theta @ M @ theta)
    numerators_b = numerators / S[:, None]
    chan = np.einsum("ac,ab,bc->c", numerators_b, Qt_b, numerators_b)
    return FilterDesign(numerators=numerators, denominator=a, gamma=gamma,
                        Ar=Ar, Cr=Cr, dae=dae, channel_h2_sq=chan)


def feasibility_report(dae: DaeSystem, d_N: int) -> dict:
    """Rank facts behind the Prop.-1 solvability conditions."""
    Hbar = build_hbar(dae.H0, dae.H1, d_N)
    tpad = _padded_target(dae, d_N)
    rank_h = matrix_rank(Hbar)
    rank_aug = matrix_rank(np.hstack([Hbar, tpad]))
    return {
        "rows": Hbar.shape[0],
        "rank_hbar": rank_h,
        "rank_augmented": rank_aug,
        "null_dim": Hbar.shape[0] - rank_h,
        "feasible": Hbar.shape[0] > rank_h and rank_aug > rank_h,
    }


def verify_lmi_pair(design: FilterDesign, margin: float = 1e-9) -> bool:
    """Post-hoc check of the two matrix inequalities certifying gamma.

    Uses Q from the controllability-Gramian Lyapunov equation; the check is
    by eigenvalues (no SDP solve), with gamma inflated by a tiny margin to
    land strictly inside the feasible set. Evaluated in the balanced
    coordinates (a congruence, so definiteness is unchanged).
    """
    Ar = design.Ar_balanced
    Br = design.numerators_balanced
    Cr = design.Cr
    Q = lyapunov_solve(Ar, Br @ Br.T)
    g = design.gamma * (1.0 + 1e-7) + margin
    top = np.block([[Ar @ Q + Q @ Ar.T, Br], [Br.T, -np.eye(Br.shape[1])]])
    lmi1 = np.linalg.eigvalsh(0.5 * (top + top.T)).max() < margin * max(1.0, np.linalg.norm(top))
    bot = np.block([[np.array([[g]]), Cr @ Q], [Q @ Cr.T, Q]])
    lmi2 = np.linalg.eigvalsh(0.5 * (bot + bot.T)).min() > -margin * max(1.0, np.linalg.norm(bot))
    return bool(lmi1 and lmi2)


def export_design(design: FilterDesign, path) -> None:
    """Write a human-auditable description of a design to a text file."""
    lines = [
        f"variant: {design.dae.variant}",
        f"d_N: {design.d_N}",
        "denominator coefficients (a_0..a_{d-1}, monic): "
        + " ".join(f"{c:.17g}" for c in design.denominator.coeffs),
        "denominator roots: " + " ".join(f"{r:.17g}" for r in np.sort(design.denominator.roots.real)),
        f"gamma (H2 squared): {design.gamma:.17g}",
    ]
    for j in range(design.d_N + 1):
        lines.append(f"N_{j}: " + " ".join(f"{v:.17g}" for v in design.numerators[j]))
    Ar, Cr = design.Ar, design.Cr
    lines.append("A_r rows:")
    for row in Ar:
        lines.append("  " + " ".join(f"{v:.17g}" for v in row))
    lines.append("C_r: " + " ".join(f"{v:.17g}" for v in Cr.ravel()))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
