"""Characteristic lines of the kernel equations on T = {0 <= xi <= x <= 1}.

Two families of straight characteristics appear:

* K-type, for the kernels coupling leftward state ``i`` to rightward state
  ``j``: starting from ``(x, xi)`` the line runs with ``dx/ds = -mu_i`` and
  ``dxi/ds = +lam_j`` until it meets the hypotenuse.

* L-type, for the kernels coupling leftward states ``i`` and ``j``: the line
  runs with ``d(chi)/dnu = eps * mu_i``, ``d(zeta)/dnu = eps * mu_j`` where
  ``eps = +1`` for ``i > j`` and ``-1`` otherwise.  Depending on the index
  order it terminates on the hypotenuse, on the ``xi = 0`` edge, or on the
  ``x = 1`` edge; ``delta`` records whether the endpoint datum comes from the
  hypotenuse / x=1 data (``delta = 1``) or from the ``xi = 0`` relation
  (``delta = 0``).

Indices ``i, j`` are 1-based to match the usual state numbering.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .system import HyperbolicSystem

_EDGE_HYP = "hypotenuse"
_EDGE_XI0 = "xi0"
_EDGE_X1 = "x1"


@dataclass(frozen=True)
class CharacteristicPath:
    """A straight characteristic segment from (x, xi) to the boundary of T."""

    x0: float
    xi0: float
    dir_x: float          # d(position)/d(parameter)
    dir_xi: float
    length: float         # parameter value at the boundary
    endpoint: tuple       # (x_F, xi_F)
    edge: str             # which part of the boundary terminates the line
    delta: int            # 1: hypotenuse / x=1 datum, 0: xi=0 relation
    eps: int              # characteristic orientation (+1 or -1), L-type only

    def sample(self, s):
        s = np.asarray(s, dtype=float)
        return self.x0 + self.dir_x * s, self.xi0 + self.dir_xi * s

    @property
    def sampler(self) -> Callable:
        return self.sample


def _check_point(x, xi):
    if not (0.0 <= xi <= x <= 1.0):
        raise ValueError(f"point ({x}, {xi}) lies outside the triangle T")


def _check_indices(i, lo, hi, what):
    if not (lo <= i <= hi):
        raise ValueError(f"{what} index {i} out of range [{lo}, {hi}]")


def trace_characteristic_K(sys: HyperbolicSystem, i: int, j: int, x: float, xi: float) -> CharacteristicPath:
    """K-type characteristic from (x, xi); always ends on the hypotenuse.

    Closed form: ``s_F = (x - xi) / (mu_i + lam_j)`` and the endpoint is
    ``x_F = (lam_j x + mu_i xi) / (mu_i + lam_j)`` on the diagonal.
    """
    _check_indices(i, 1, sys.m, "leftward")
    _check_indices(j, 1, sys.n, "rightward")
    _check_point(x, xi)
    mu_i = float(sys.mu[i - 1])
    lam_j = float(sys.lam[j - 1])
    s_f = (x - xi) / (mu_i + lam_j)
    x_f = (lam_j * x + mu_i * xi) / (mu_i + lam_j)
    return CharacteristicPath(
        x0=x, xi0=xi, dir_x=-mu_i, dir_xi=lam_j, length=s_f,
        endpoint=(x_f, x_f), edge=_EDGE_HYP, delta=1, eps=-1,
    )


def trace_characteristic_L(sys: HyperbolicSystem, i: int, j: int, x: float, xi: float) -> CharacteristicPath:
    """L-type characteristic from (x, xi).

    * ``i = j``: parallel to the hypotenuse, ends at ``(x - xi, 0)``, delta 0.
    * ``i < j``: ends on the hypotenuse iff ``mu_i xi - mu_j x > 0`` (delta 1),
      otherwise on ``xi = 0`` (delta 0; ties take the xi = 0 branch).
    * ``i > j``: runs forward to the hypotenuse or the ``x = 1`` edge; the
      endpoint datum is prescribed data in both sub-cases (delta 1).
    """
    _check_indices(i, 1, sys.m, "leftward")
    _check_indices(j, 1, sys.m, "leftward")
    _check_point(x, xi)
    mu_i = float(sys.mu[i - 1])
    mu_j = float(sys.mu[j - 1])
    eps = 1 if i > j else -1

    if i == j:
        nu_f = xi / mu_i
        return CharacteristicPath(
            x0=x, xi0=xi, dir_x=-mu_i, dir_xi=-mu_i, length=nu_f,
            endpoint=(x - xi, 0.0), edge=_EDGE_XI0, delta=0, eps=eps,
        )

    if i < j:
        # both coordinates decrease; mu_i > mu_j so the gap x - xi shrinks
        if mu_i * xi - mu_j * x > 0.0:
            nu_f = (x - xi) / (mu_i - mu_j)
            x_f = (mu_i * xi - mu_j * x) / (mu_i - mu_j)
            return CharacteristicPath(
                x0=x, xi0=xi, dir_x=-mu_i, dir_xi=-mu_j, length=nu_f,
                endpoint=(x_f, x_f), edge=_EDGE_HYP, delta=1, eps=eps,
            )
        nu_f = xi / mu_j
        return CharacteristicPath(
            x0=x, xi0=xi, dir_x=-mu_i, dir_xi=-mu_j, length=nu_f,
            endpoint=(x - mu_i * xi / mu_j, 0.0), edge=_EDGE_XI0, delta=0, eps=eps,
        )

    # i > j: both coordinates increase; mu_j > mu_i so the gap shrinks
    nu_hyp = (x - xi) / (mu_j - mu_i)
    nu_edge = (1.0 - x) / mu_i
    if nu_hyp <= nu_edge:
        x_f = x + mu_i * nu_hyp
        return CharacteristicPath(
            x0=x, xi0=xi, dir_x=mu_i, dir_xi=mu_j, length=nu_hyp,
            endpoint=(x_f, x_f), edge=_EDGE_HYP, delta=1, eps=eps,
        )
    return CharacteristicPath(
        x0=x, xi0=xi, dir_x=mu_i, dir_xi=mu_j, length=nu_edge,
        endpoint=(1.0, xi + mu_j * nu_edge), edge=_EDGE_X1, delta=1, eps=eps,
    )
