"""Constructive sup-norm envelope for the feedback kernels.

The successive-approximation proof yields the explicit bound
``|K|, |L| <= phi_bar * exp(M * (x - (1 - eps) * xi))`` on T, for any ``eps``
in ``(0, 1 - max_{j<i} mu_i/mu_j)``, with

    M_lam   = max over kernel families of the reciprocal transversal speeds
              1/(mu_i + (1-eps) lam_j) and 1/(-eps_ij (mu_i - (1-eps) mu_p)),
    M       = (n lam_hi lam_lo q_bar + 1) (n + m) sigma_bar M_lam,
    phi_bar = sup of the endpoint data magnitudes.

The same constants give the factorial envelope
``|increment_q| <= phi_bar M^q (x - (1-eps) xi)^q / q!`` for the recorded
successive-approximation increments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .system import HyperbolicSystem, validate
from .kernels import ArtificialBoundary


def admissible_eps_sup(sys: HyperbolicSystem) -> float:
    """Supremum of the admissible eps interval, 1 - max_{j<i} mu_i/mu_j."""
    m = sys.m
    if m < 2:
        return 1.0
    ratios = [sys.mu[i] / sys.mu[j] for i in range(m) for j in range(i)]
    return 1.0 - max(ratios)


@dataclass(frozen=True)
class KernelBound:
    """Evaluable kernel envelope with its constants."""

    eps: float
    lam_hi: float      # largest transport speed
    lam_lo: float      # reciprocal of the slowest transport speed
    sigma_bar: float   # largest coupling magnitude
    q_bar: float       # largest left reflection magnitude
    m_lam: float
    rate: float        # M
    phi_bar: float

    def __call__(self, x, xi):
        return self.evaluate(x, xi)

    def evaluate(self, x, xi):
        x = np.asarray(x, dtype=float)
        xi = np.asarray(xi, dtype=float)
        return self.phi_bar * np.exp(self.rate * (x - (1.0 - self.eps) * xi))

    def increment_envelope(self, q: int) -> float:
        """Bound on the q-th successive-approximation increment sup-norm."""
        from math import lgamma

        log_v = q * np.log(self.rate) - lgamma(q + 1) if self.rate > 0 else -np.inf
        if q == 0:
            return self.phi_bar
        return float(self.phi_bar * np.exp(log_v))


def theoretical_bound(
    sys: HyperbolicSystem,
    eps: float | None = None,
    artificial_bc: ArtificialBoundary | None = None,
) -> KernelBound:
    """Build the kernel envelope; eps defaults to half the admissible sup."""
    validate(sys).raise_if_invalid()
    sup = admissible_eps_sup(sys)
    if eps is None:
        eps = 0.5 * sup
    if not (0.0 < eps < sup):
        raise ValueError(f"eps must lie strictly inside (0, {sup}); got {eps}")

    n, m = sys.n, sys.m
    mu, lam = sys.mu, sys.lam
    artificial_bc = artificial_bc or ArtificialBoundary.constant_default(sys)

    cands = []
    for i in range(m):
        for j in range(n):
            cands.append(1.0 / (mu[i] + (1.0 - eps) * lam[j]))
        for p in range(m):
            e_ip = 1.0 if i > p else -1.0
            cands.append(1.0 / (-e_ip * (mu[i] - (1.0 - eps) * mu[p])))
    m_lam = max(cands)

    lam_hi = float(max([mu[0]] + ([lam[-1]] if n else [])))
    lam_lo = float(max([1.0 / mu[-1]] + ([1.0 / lam[0]] if n else [])))
    sigmas = [sys.sigma_pp, sys.sigma_pm, sys.sigma_mp, sys.sigma_mm]
    sigma_bar = float(max(np.max(np.abs(s)) if s.size else 0.0 for s in sigmas))
    q_bar = float(np.max(np.abs(sys.q0))) if sys.q0.size else 0.0
    rate = (n * lam_hi * lam_lo * q_bar + 1.0) * (n + m) * sigma_bar * m_lam

    # endpoint data magnitudes: hypotenuse values, the xi = 0 relation seed,
    # and the prescribed x = 1 traces
    vals = [0.0]
    for i in range(m):
        for j in range(n):
            vals.append(abs(sys.sigma_mp[i, j] / (mu[i] + lam[j])))
    for i in range(m):
        for j in range(m):
            if i != j:
                vals.append(abs(sys.sigma_mm[i, j] / (mu[i] - mu[j])))
            if i <= j and n:
                c0 = sum(
                    lam[r] * sys.q0[r, j] * (-sys.sigma_mp[i, r] / (mu[i] + lam[r]))
                    for r in range(n)
                ) / mu[j]
                vals.append(abs(c0))
            if i > j:
                probe = artificial_bc(i + 1, j + 1, np.linspace(0.0, 1.0, 257))
                vals.append(float(np.max(np.abs(probe))))
    phi_bar = max(vals)

    return KernelBound(
        eps=float(eps), lam_hi=lam_hi, lam_lo=lam_lo, sigma_bar=sigma_bar,
        q_bar=q_bar, m_lam=float(m_lam), rate=float(rate), phi_bar=float(phi_bar),
    )
