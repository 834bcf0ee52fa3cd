"""System data for coupled linear hyperbolic transport equations on [0, 1].

The model couples ``n`` rightward-convecting states ``u`` (speeds ``lam``)
with ``m`` leftward-convecting states ``v`` (speeds ``mu``)::

    u_t + diag(lam) u_x = sigma_pp u + sigma_pm v
    v_t - diag(mu)  v_x = sigma_mp u + sigma_mm v

    u(t, 0) = q0 v(t, 0),      v(t, 1) = r1 u(t, 1) + U(t)

All coefficients are constant in space and time.  The leftward speeds must be
strictly decreasing (equal speeds are "isotachic" and need a preliminary
change of coordinates, see :func:`isotachic_decoupling`), and the internal
diagonal coupling of the ``v`` block must vanish.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

ISOTACHIC_TOL = 1e-12


def _as_matrix(a, rows, cols, name):
    arr = np.asarray(a, dtype=float)
    if arr.size == 0:
        arr = arr.reshape(rows, cols)
    if arr.shape != (rows, cols):
        raise ValueError(f"{name} must have shape {(rows, cols)}, got {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class HyperbolicSystem:
    """Constant coefficients of an (n+m)-state coupled transport system."""

    n: int
    m: int
    lam: np.ndarray     # n rightward speeds, positive, non-decreasing
    mu: np.ndarray      # m leftward speeds, positive, strictly decreasing
    sigma_pp: np.ndarray  # n x n
    sigma_pm: np.ndarray  # n x m
    sigma_mp: np.ndarray  # m x n
    sigma_mm: np.ndarray  # m x m, zero diagonal
    q0: np.ndarray        # n x m left-boundary reflection
    r1: np.ndarray        # m x n right-boundary reflection

    def __post_init__(self):
        n, m = int(self.n), int(self.m)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "lam", np.atleast_1d(np.asarray(self.lam, dtype=float)))
        object.__setattr__(self, "mu", np.atleast_1d(np.asarray(self.mu, dtype=float)))
        object.__setattr__(self, "sigma_pp", _as_matrix(self.sigma_pp, n, n, "sigma_pp"))
        object.__setattr__(self, "sigma_pm", _as_matrix(self.sigma_pm, n, m, "sigma_pm"))
        object.__setattr__(self, "sigma_mp", _as_matrix(self.sigma_mp, m, n, "sigma_mp"))
        object.__setattr__(self, "sigma_mm", _as_matrix(self.sigma_mm, m, m, "sigma_mm"))
        object.__setattr__(self, "q0", _as_matrix(self.q0, n, m, "q0"))
        object.__setattr__(self, "r1", _as_matrix(self.r1, m, n, "r1"))

    @property
    def max_speed(self) -> float:
        speeds = [self.mu.max() if self.m else 0.0]
        if self.n:
            speeds.append(self.lam.max())
        return float(max(speeds))

    def __repr__(self):  # keep short; matrices printed on demand
        return f"HyperbolicSystem(n={self.n}, m={self.m}, lam={self.lam}, mu={self.mu})"


def zero_coupling_system(n, m, lam, mu, q0=None, r1=None) -> HyperbolicSystem:
    """System with the given speeds and all Sigma blocks zero."""
    q0 = np.zeros((n, m)) if q0 is None else q0
    r1 = np.zeros((m, n)) if r1 is None else r1
    return HyperbolicSystem(
        n=n, m=m, lam=lam, mu=mu,
        sigma_pp=np.zeros((n, n)), sigma_pm=np.zeros((n, m)),
        sigma_mp=np.zeros((m, n)), sigma_mm=np.zeros((m, m)),
        q0=q0, r1=r1,
    )


@dataclass
class ValidationReport:
    """Outcome of :func:`validate`.

    ``isotachic_groups`` uses 1-based state indices to match the usual
    v_1..v_m naming of the leftward states.
    """

    ok: bool
    violations: list = field(default_factory=list)        # (rule_id, message)
    isotachic_groups: list = field(default_factory=list)  # list of sorted index lists

    def raise_if_invalid(self):
        if not self.ok:
            parts = [f"{rid}: {msg}" for rid, msg in self.violations]
            if self.isotachic_groups:
                parts.append(f"isotachic: equal leftward speeds in groups {self.isotachic_groups}")
            raise InvalidSystemError("; ".join(parts))


class InvalidSystemError(ValueError):
    pass


def validate(sys: HyperbolicSystem) -> ValidationReport:
    """Check speed ordering/positivity, the zero v-diagonal, and shapes.

    Equal leftward speeds (within ``ISOTACHIC_TOL``) are reported in
    ``isotachic_groups`` rather than as an ordering violation; the caller is
    expected to decouple them first.  The report lists every violated rule.
    """
    violations = []
    groups = []
    n, m = sys.n, sys.m

    if m < 1:
        violations.append(("m-positive", "at least one leftward state is required"))
    if n < 0:
        violations.append(("n-nonnegative", "n must be >= 0"))
    if len(sys.lam) != n:
        violations.append(("lambda-length", f"lam has {len(sys.lam)} entries, expected {n}"))
    if len(sys.mu) != m:
        violations.append(("mu-length", f"mu has {len(sys.mu)} entries, expected {m}"))

    if len(sys.lam) == n and n > 0:
        if np.any(sys.lam <= 0):
            violations.append(("lambda-positive", "all rightward speeds must be > 0"))
        if np.any(np.diff(sys.lam) < 0):
            violations.append(("lambda-ordering", "rightward speeds must be non-decreasing"))

    if len(sys.mu) == m and m > 0:
        if np.any(sys.mu <= 0):
            violations.append(("mu-positive", "all leftward speeds must be > 0"))
        # Ties are isotachic groups; inversions between runs of (nearly) equal
        # speeds are ordering violations.
        mu = sys.mu
        run_heads = []
        i = 0
        while i < m:
            j = i
            while j + 1 < m and abs(mu[j + 1] - mu[i]) <= ISOTACHIC_TOL:
                j += 1
            run_heads.append(mu[i])
            if j > i:
                groups.append(list(range(i + 1, j + 2)))  # 1-based
            i = j + 1
        if any(b >= a - ISOTACHIC_TOL for a, b in zip(run_heads, run_heads[1:])):
            violations.append(("mu-ordering", "leftward speeds must be strictly decreasing"))

    diag = np.abs(np.diag(sys.sigma_mm)) if sys.sigma_mm.shape == (m, m) else np.array([])
    if diag.size and np.any(diag > 0):
        violations.append((
            "sigma-mm-diagonal",
            "diagonal self-coupling of the leftward block must be zero; remove it by a "
            "change of coordinates before building the system (spatially varying "
            "coefficients are unsupported here)",
        ))

    ok = not violations and not groups
    return ValidationReport(ok=ok, violations=violations, isotachic_groups=groups)


def isotachic_decoupling(sigma_iso: np.ndarray, mu_i: float, x: float):
    """Decoupling change of coordinates for a block of equal-speed states.

    Returns ``(B(x), C(x))`` where ``B`` solves ``B'(x) = (1/mu_i) B(x) S``,
    ``B(0) = I`` for the block coupling matrix ``S``, and ``C`` solves
    ``C'(x) = -(1/mu_i) S C(x)``, ``C(0) = I``.  ``C`` is the inverse of ``B``.
    """
    S = np.asarray(sigma_iso, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"sigma_iso must be square, got shape {S.shape}")
    if mu_i <= 0:
        raise ValueError("mu_i must be positive")
    B = expm((x / mu_i) * S)
    C = expm(-(x / mu_i) * S)
    return B, C


def horizons(sys: HyperbolicSystem):
    """Settling horizons ``(t_f, t_m)``.

    ``t_m = sum_j 1/mu_j`` is the output-tracking horizon.  ``t_f = 1/lam_1 +
    t_m`` is the closed-loop finite-settling horizon; it is ``None`` when the
    system has no rightward states.
    """
    report = validate(sys)
    report.raise_if_invalid()
    t_m = float(np.sum(1.0 / sys.mu))
    t_f = None if sys.n == 0 else float(1.0 / sys.lam[0] + t_m)
    return t_f, t_m
