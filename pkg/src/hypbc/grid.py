"""Discretization of the triangular kernel domain T = {0 <= xi <= x <= 1}.

Kernel values live on the nodes ``(a/N, b/N)`` with ``b <= a``.  Evaluation
anywhere in T uses bilinear interpolation on interior cells and barycentric
interpolation on the half-cells cut by the hypotenuse, so no stencil ever
reaches outside T.  Fields may carry flagged lines ``xi = c * x`` across which
they are not smooth; evaluation then keeps the stencil on the query point's
side of each flagged line.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class TriangularGrid:
    """Uniform subdivision of T with N cells per axis (N >= 2)."""

    n_sub: int

    def __post_init__(self):
        if self.n_sub < 2:
            raise ValueError("triangular grid needs at least 2 subdivisions")

    @property
    def step(self) -> float:
        return 1.0 / self.n_sub

    @property
    def node_count(self) -> int:
        return (self.n_sub + 1) * (self.n_sub + 2) // 2

    @property
    def axis(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_sub + 1)

    def node_coords(self):
        """Arrays (x, xi) over nodes in row-major (a, b <= a) order."""
        N = self.n_sub
        a, b = np.tril_indices(N + 1)
        return a / N, b / N

    def tril_mask(self) -> np.ndarray:
        N = self.n_sub
        return np.tril(np.ones((N + 1, N + 1), dtype=bool))

    def flatten(self, square: np.ndarray) -> np.ndarray:
        """Lower-triangular entries of a (N+1, N+1) array, row-major."""
        return square[self.tril_mask()]

    def unflatten(self, flat: np.ndarray) -> np.ndarray:
        N = self.n_sub
        out = np.zeros((N + 1, N + 1))
        out[self.tril_mask()] = flat
        return out


def interp_weights(N: int, x, xi):
    """Stencil indices and weights for triangle-aware bilinear interpolation.

    Returns ``(rows, cols, w)`` each of shape ``(4, npts)`` such that the
    interpolated value of a field ``F`` (square (N+1, N+1) array, lower
    triangle meaningful) is ``sum_k w[k] * F[rows[k], cols[k]]``.  Cells cut
    by the hypotenuse use the three in-domain corners (the fourth weight is
    zero); queries are clamped to T.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    x = np.clip(x, 0.0, 1.0)
    xi = np.clip(xi, 0.0, x)

    fx = x * N
    fxi = xi * N
    a = np.minimum(fx.astype(np.int64), N - 1)
    b = np.minimum(fxi.astype(np.int64), N - 1)
    b = np.minimum(b, a)  # keep the cell inside the triangle
    u = fx - a
    v = fxi - b

    diag = b == a  # hypotenuse half-cells: corners (a,a), (a+1,a), (a+1,a+1)
    u_ = np.where(diag, np.maximum(u, v), u)  # clamp onto the triangle

    rows = np.empty((4, x.size), dtype=np.int64)
    cols = np.empty((4, x.size), dtype=np.int64)
    w = np.empty((4, x.size))

    # interior cell: bilinear on (a,b),(a+1,b),(a,b+1),(a+1,b+1)
    rows[0], cols[0], w[0] = a, b, (1 - u) * (1 - v)
    rows[1], cols[1], w[1] = a + 1, b, u * (1 - v)
    rows[2], cols[2], w[2] = a, b + 1, (1 - u) * v
    rows[3], cols[3], w[3] = a + 1, b + 1, u * v

    if np.any(diag):
        rows[0][diag], cols[0][diag], w[0][diag] = a[diag], b[diag], 1 - u_[diag]
        rows[1][diag], cols[1][diag], w[1][diag] = a[diag] + 1, b[diag], u_[diag] - v[diag]
        rows[2][diag], cols[2][diag], w[2][diag] = a[diag] + 1, b[diag] + 1, v[diag]
        rows[3][diag], cols[3][diag], w[3][diag] = a[diag], b[diag], 0.0
    return rows, cols, w


def interp_apply(values: np.ndarray, rows, cols, w):
    return (w * values[rows, cols]).sum(axis=0)


@dataclass
class KernelField:
    """A scalar kernel discretized on a :class:`TriangularGrid`.

    ``values`` is a square (N+1, N+1) array whose lower triangle holds the
    node values; entries above the diagonal are ignored.  ``discontinuity_lines``
    lists slopes ``c`` of rays ``xi = c * x`` across which the field may jump
    or kink; evaluation near those rays uses one-sided stencils.
    """

    grid: TriangularGrid
    values: np.ndarray
    discontinuity_lines: list = field(default_factory=list)

    def __post_init__(self):
        N = self.grid.n_sub
        v = np.asarray(self.values, dtype=float)
        if v.shape != (N + 1, N + 1):
            raise ValueError(f"values must be ({N+1}, {N+1}), got {v.shape}")
        if not np.all(np.isfinite(v[self.grid.tril_mask()])):
            raise ValueError("kernel field contains non-finite node values")
        self.values = v

    def __call__(self, x, xi):
        return self.evaluate(x, xi)

    def evaluate(self, x, xi):
        scalar = np.isscalar(x) and np.isscalar(xi)
        x = np.atleast_1d(np.asarray(x, dtype=float))
        xi = np.atleast_1d(np.asarray(xi, dtype=float))
        x, xi = np.broadcast_arrays(x, xi)
        x = x.ravel().copy()
        xi = xi.ravel().copy()
        N = self.grid.n_sub
        rows, cols, w = interp_weights(N, x, xi)
        if self.discontinuity_lines:
            self._apply_one_sided(x, xi, rows, cols, w)
        out = interp_apply(self.values, rows, cols, w)
        return float(out[0]) if scalar else out

    def _apply_one_sided(self, x, xi, rows, cols, w):
        # Drop stencil corners on the other side of a flagged ray xi = c*x,
        # then renormalize.  Nodes exactly on the ray store the lower-side
        # limit (the solver's tie-break), so on-ray queries and corners both
        # count for the lower side.
        N = self.grid.n_sub
        tol = 1e-12
        cx = rows.astype(float) / N
        cxi = cols.astype(float) / N
        for c in self.discontinuity_lines:
            q_above = xi - c * x > tol
            corner_above = cxi - c * cx > tol
            keep = corner_above == q_above[None, :]
            crossed = np.any(~keep & (np.abs(w) > 0.0), axis=0)
            if not np.any(crossed):
                continue
            w_new = np.where(keep, w, 0.0)
            tot = w_new.sum(axis=0)
            # if everything got dropped, fall back to the nearest same-side corner
            bad = crossed & (tot <= 1e-12)
            if np.any(bad):
                d2 = (cx - x[None, :]) ** 2 + (cxi - xi[None, :]) ** 2
                d2 = np.where(keep, d2, np.inf)
                pick = np.argmin(d2[:, bad], axis=0)
                w_new[:, bad] = 0.0
                w_new[pick, np.nonzero(bad)[0]] = 1.0
                tot = w_new.sum(axis=0)
            scale = np.where(tot > 0, 1.0 / np.where(tot > 0, tot, 1.0), 1.0)
            w[:] = np.where(crossed[None, :], w_new * scale[None, :], w)

    # boundary traces on grid nodes ------------------------------------
    def trace_x1(self) -> np.ndarray:
        """Values on the x = 1 edge, xi = 0..1."""
        return self.values[self.grid.n_sub, :].copy()

    def trace_xi0(self) -> np.ndarray:
        """Values on the xi = 0 edge, x = 0..1."""
        return self.values[:, 0].copy()

    def trace_diag(self) -> np.ndarray:
        """Values on the hypotenuse xi = x."""
        return np.diag(self.values).copy()

    def flat(self) -> np.ndarray:
        return self.grid.flatten(self.values)
