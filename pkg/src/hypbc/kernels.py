"""Feedback and observer kernel synthesis on the triangle T.

The controller kernels ``K`` (m x n) and ``L`` (m x m) satisfy first-order
transport equations on T with boundary data on the hypotenuse, the ``xi = 0``
edge, and (for the lower-triangular L block) freely choosable data on the
``x = 1`` edge.  Integrating along characteristics turns them into coupled
integral equations; these are solved here by successive approximations,
iterating directly on the increments so the recorded increment norms follow
the factorial decay envelope of the underlying fixed point.

The equations decouple row by row in the first index: row ``i`` of K and L
only references fields of row ``i``.  Rows can therefore be solved
independently (and concurrently).

The observer kernels ``M`` (n x m) and ``N`` (m x m) solve a system that maps
onto the controller equations after reflecting coordinates through
``(x, xi) -> (1 - xi, 1 - x)``, transposing the coupling matrices, flipping
the sign of the cross couplings, and substituting
``q0 <- -diag(lam)^-1 r1^T diag(mu)``.  The same engine is reused and the
results mapped back, which realizes the column-by-column decoupling of the
observer system.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .grid import KernelField, TriangularGrid, interp_apply, interp_weights
from .system import HyperbolicSystem, validate

__all__ = [
    "ArtificialBoundary",
    "PicardReport",
    "ControllerKernels",
    "ObserverKernels",
    "KernelConvergenceError",
    "picard_solve_controller",
    "compute_G",
    "solve_C_kernels",
    "invert_transform",
    "solve_observer_kernels",
]


class KernelConvergenceError(RuntimeError):
    """Raised when successive approximations hit max_iter; carries the report."""

    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


# --------------------------------------------------------------------------
# interpolation backends (numba-accelerated with a pure-numpy fallback)
# --------------------------------------------------------------------------

_BACKEND = os.environ.get("HYPBC_BACKEND", "auto")
_HAVE_NUMBA = False
if _BACKEND != "numpy":
    try:
        import numba
        from numba import njit, prange

        _HAVE_NUMBA = True
    except Exception:  # pragma: no cover - depends on environment
        _HAVE_NUMBA = False

if _HAVE_NUMBA:

    @njit(cache=True, inline="always")
    def _interp_tri(F, N, x, xi):
        if x < 0.0:
            x = 0.0
        elif x > 1.0:
            x = 1.0
        if xi < 0.0:
            xi = 0.0
        elif xi > x:
            xi = x
        fx = x * N
        fxi = xi * N
        a = int(fx)
        if a > N - 1:
            a = N - 1
        b = int(fxi)
        if b > N - 1:
            b = N - 1
        if b > a:
            b = a
        u = fx - a
        v = fxi - b
        if b == a:
            if v > u:
                u = v
            return F[a, b] * (1.0 - u) + F[a + 1, b] * (u - v) + F[a + 1, b + 1] * v
        return (
            F[a, b] * (1.0 - u) * (1.0 - v)
            + F[a + 1, b] * u * (1.0 - v)
            + F[a, b + 1] * (1.0 - u) * v
            + F[a + 1, b + 1] * u * v
        )

    @njit(cache=True, inline="always")
    def _q3(fm, f0, fp, t):
        return f0 + 0.5 * t * (fp - fm) + 0.5 * t * t * (fp - 2.0 * f0 + fm)

    @njit(cache=True, inline="always")
    def _interp_tri_quad(F, N, x, xi):
        # Biquadratic interpolation aligned with the triangle: sheared
        # (diagonal, xi) stencils near the hypotenuse, axis-aligned stencils
        # in the bulk.  Falls back to the bilinear rule on grids too coarse
        # for a 3x3 stencil.
        if N < 6:
            return _interp_tri(F, N, x, xi)
        if x < 0.0:
            x = 0.0
        elif x > 1.0:
            x = 1.0
        if xi < 0.0:
            xi = 0.0
        elif xi > x:
            xi = x
        fx = x * N
        fxi = xi * N
        fd = fx - fxi
        if fd <= 3.0:
            dd = int(fd + 0.5)
            if dd < 1:
                dd = 1
            cmax = N - dd - 2
            c = int(fxi + 0.5)
            if c < 1:
                c = 1
            elif c > cmax:
                c = cmax
            t = fxi - c
            s = fd - dd
            vm = _q3(F[c - 1 + dd - 1, c - 1], F[c + dd - 1, c], F[c + 1 + dd - 1, c + 1], t)
            v0 = _q3(F[c - 1 + dd, c - 1], F[c + dd, c], F[c + 1 + dd, c + 1], t)
            vp = _q3(F[c - 1 + dd + 1, c - 1], F[c + dd + 1, c], F[c + 1 + dd + 1, c + 1], t)
            return _q3(vm, v0, vp, s)
        r = int(fx + 0.5)
        if r < 3:
            r = 3
        elif r > N - 1:
            r = N - 1
        c = int(fxi + 0.5)
        if c < 1:
            c = 1
        elif c > r - 2:
            c = r - 2
        t = fxi - c
        s = fx - r
        vm = _q3(F[r - 1, c - 1], F[r - 1, c], F[r - 1, c + 1], t)
        v0 = _q3(F[r, c - 1], F[r, c], F[r, c + 1], t)
        vp = _q3(F[r + 1, c - 1], F[r + 1, c], F[r + 1, c + 1], t)
        return _q3(vm, v0, vp, s)

    @njit(cache=True, inline="always")
    def _stencil_sided_ok(N, diag_branch, dd, r, c, lines, sides):
        # all 9 stencil nodes on the required side of every flagged line;
        # nodes exactly on a ray store the h >= 0 branch (the xi = 0
        # relation side), so they are valid for req=+1 and excluded for
        # req=-1
        delta = 1.0 / N
        for ln in range(lines.shape[0]):
            if sides[ln] == 0:
                continue
            al = lines[ln, 0]
            be = lines[ln, 1]
            ga = lines[ln, 2]
            req = sides[ln]
            for jj in range(-1, 2):
                for kk in range(-1, 2):
                    if diag_branch:
                        row = c + jj + dd + kk
                        col = c + jj
                    else:
                        row = r + kk
                        col = c + jj
                    h = (al * row - be * col) * delta - ga
                    if req > 0 and h < -1e-12:
                        return False
                    if req < 0 and h > -1e-12:
                        return False
        return True

    @njit(cache=True, inline="always")
    def _quad_eval_diag(F, dd, c, fx, fxi):
        t = fxi - c
        s = (fx - fxi) - dd
        vm = _q3(F[c - 1 + dd - 1, c - 1], F[c + dd - 1, c], F[c + 1 + dd - 1, c + 1], t)
        v0 = _q3(F[c - 1 + dd, c - 1], F[c + dd, c], F[c + 1 + dd, c + 1], t)
        vp = _q3(F[c - 1 + dd + 1, c - 1], F[c + dd + 1, c], F[c + 1 + dd + 1, c + 1], t)
        return _q3(vm, v0, vp, s)

    @njit(cache=True, inline="always")
    def _quad_eval_row(F, r, c, fx, fxi):
        t = fxi - c
        s = fx - r
        vm = _q3(F[r - 1, c - 1], F[r - 1, c], F[r - 1, c + 1], t)
        v0 = _q3(F[r, c - 1], F[r, c], F[r, c + 1], t)
        vp = _q3(F[r + 1, c - 1], F[r + 1, c], F[r + 1, c + 1], t)
        return _q3(vm, v0, vp, s)

    @njit(cache=True, inline="always")
    def _node_side_ok(N, row, col, lines, sides):
        delta = 1.0 / N
        for ln in range(lines.shape[0]):
            if sides[ln] == 0:
                continue
            h = (lines[ln, 0] * row - lines[ln, 1] * col) * delta - lines[ln, 2]
            if sides[ln] > 0 and h < -1e-12:
                return False
            if sides[ln] < 0 and h > -1e-12:
                return False
        return True

    @njit(cache=True, inline="always")
    def _filtered_bilinear(F, N, fx, fxi, lines, sides):
        # bilinear stencil with wrong-side corners dropped and weights
        # renormalized; nearest same-side node as a last resort.  Used where
        # the thin side of a ray cannot host a quadratic stencil.
        a = int(fx)
        if a > N - 1:
            a = N - 1
        b = int(fxi)
        if b > N - 1:
            b = N - 1
        if b > a:
            b = a
        u = fx - a
        v = fxi - b
        tot = 0.0
        acc = 0.0
        for (row, col, w) in ((a, b, (1.0 - u) * (1.0 - v)), (a + 1, b, u * (1.0 - v)),
                              (a, b + 1, (1.0 - u) * v), (a + 1, b + 1, u * v)):
            if col > row:
                continue
            if _node_side_ok(N, row, col, lines, sides):
                acc += w * F[row, col]
                tot += w
        if tot > 1e-12:
            return acc / tot
        best = 1.0e30
        val = 0.0
        for dr in range(-2, 3):
            for dc in range(-3, 4):
                row = a + dr
                col = b + dc
                if row < 0 or row > N or col < 0 or col > row:
                    continue
                if not _node_side_ok(N, row, col, lines, sides):
                    continue
                d2 = (row - fx) ** 2 + (col - fxi) ** 2
                if d2 < best:
                    best = d2
                    val = F[row, col]
        if best < 1.0e30:
            return val
        return F[a, b]

    @njit(cache=True, inline="always")
    def _interp_quad_sided(F, N, x, xi, lines, sides):
        # quadratic interpolation that keeps the stencil on the required side
        # of each flagged ray; shifting moves the stencil along the grid
        # column index, which changes the ray clearance monotonically because
        # ray slopes are below one
        if N < 6:
            return _interp_tri(F, N, x, xi)
        if x < 0.0:
            x = 0.0
        elif x > 1.0:
            x = 1.0
        if xi < 0.0:
            xi = 0.0
        elif xi > x:
            xi = x
        fx = x * N
        fxi = xi * N
        fd = fx - fxi
        diag_branch = fd <= 3.0
        if diag_branch:
            dd = int(fd + 0.5)
            if dd < 1:
                dd = 1
            cmax = N - dd - 2
            c = int(fxi + 0.5)
            if c < 1:
                c = 1
            elif c > cmax:
                c = cmax
            r = 0
        else:
            r = int(fx + 0.5)
            if r < 3:
                r = 3
            elif r > N - 1:
                r = N - 1
            c = int(fxi + 0.5)
            if c < 1:
                c = 1
            elif c > r - 2:
                c = r - 2
            dd = 0
        nl = lines.shape[0]
        if nl:
            # fast path: far from every flagged ray nothing can straddle
            near = False
            for ln in range(nl):
                if sides[ln] == 0:
                    continue
                h = lines[ln, 0] * x - lines[ln, 1] * xi - lines[ln, 2]
                if abs(h) <= 4.0 * (lines[ln, 0] + lines[ln, 1]) / N:
                    near = True
                    break
            if near and not _stencil_sided_ok(N, diag_branch, dd, r, c, lines, sides):
                shifted = 0
                for ln in range(nl):
                    if sides[ln] == 0:
                        continue
                    dc = -1 if sides[ln] > 0 else 1
                    for _ in range(3):
                        if _stencil_sided_ok(N, diag_branch, dd, r, c, lines, sides):
                            break
                        c2 = c + dc
                        if diag_branch:
                            if c2 < 1 or c2 > N - dd - 2:
                                break
                        else:
                            if c2 < 1 or c2 > r - 2:
                                break
                        c = c2
                        shifted += 1
                    if _stencil_sided_ok(N, diag_branch, dd, r, c, lines, sides):
                        break
                if shifted > 2 or not _stencil_sided_ok(N, diag_branch, dd, r, c, lines, sides):
                    return _filtered_bilinear(F, N, fx, fxi, lines, sides)
        if diag_branch:
            return _quad_eval_diag(F, dd, c, fx, fxi)
        return _quad_eval_row(F, r, c, fx, fxi)

    @njit(cache=True, parallel=True)
    def _char_int_grid_nb(g, N, dirx, dixi, bounds, lines, h_ref, out):
        # piecewise composite Simpson along each characteristic, pieces split
        # at the row's flagged lines, stencils kept on each piece's side
        delta = 1.0 / N
        npb = bounds.shape[0]
        nl = lines.shape[0]
        for a in prange(N + 1):
            sides = np.zeros(nl, dtype=np.int8)
            for b in range(a + 1):
                x0 = a * delta
                xi0 = b * delta
                total = 0.0
                for p in range(npb - 1):
                    lo = bounds[p, a, b]
                    hi = bounds[p + 1, a, b]
                    ln_piece = hi - lo
                    if ln_piece <= 1e-14:
                        continue
                    smid = 0.5 * (lo + hi)
                    xm = x0 + dirx * smid
                    xim = xi0 + dixi * smid
                    for ln in range(nl):
                        h = lines[ln, 0] * xm - lines[ln, 1] * xim - lines[ln, 2]
                        sides[ln] = 1 if h >= -1e-12 else -1
                    half = int(ln_piece / (2.0 * h_ref) - 1e-12) + 1
                    ns = 2 * half
                    h = ln_piece / ns
                    acc = _interp_quad_sided(g, N, x0 + dirx * lo, xi0 + dixi * lo, lines, sides)
                    for k in range(1, ns):
                        s = lo + k * h
                        w = 4.0 if k % 2 == 1 else 2.0
                        acc += w * _interp_quad_sided(g, N, x0 + dirx * s, xi0 + dixi * s, lines, sides)
                    acc += _interp_quad_sided(g, N, x0 + dirx * hi, xi0 + dixi * hi, lines, sides)
                    total += acc * h / 3.0
                out[a, b] = total


def _quad_interp_np(F, N, x, xi):
    """Vectorized counterpart of the numba biquadratic rule."""
    if N < 6:
        rows, cols, w = interp_weights(N, x, xi)
        return interp_apply(F, rows, cols, w)
    x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
    xi = np.clip(np.asarray(xi, dtype=float), 0.0, x)
    fx = x * N
    fxi = xi * N
    fd = fx - fxi
    out = np.empty_like(fx)

    def q3(fm, f0, fp, t):
        return f0 + 0.5 * t * (fp - fm) + 0.5 * t * t * (fp - 2.0 * f0 + fm)

    diag = fd <= 3.0
    if np.any(diag):
        dd = np.clip((fd[diag] + 0.5).astype(np.int64), 1, N - 1)
        c = np.clip((fxi[diag] + 0.5).astype(np.int64), 1, N - dd - 2)
        t = fxi[diag] - c
        s = fd[diag] - dd
        vs = []
        for kd in (-1, 0, 1):
            d = dd + kd
            vs.append(q3(F[c - 1 + d, c - 1], F[c + d, c], F[c + 1 + d, c + 1], t))
        out[diag] = q3(vs[0], vs[1], vs[2], s)
    bulk = ~diag
    if np.any(bulk):
        r = np.clip((fx[bulk] + 0.5).astype(np.int64), 3, N - 1)
        c = np.clip((fxi[bulk] + 0.5).astype(np.int64), 1, r - 2)
        t = fxi[bulk] - c
        s = fx[bulk] - r
        vs = [q3(F[r + kr, c - 1], F[r + kr, c], F[r + kr, c + 1], t) for kr in (-1, 0, 1)]
        out[bulk] = q3(vs[0], vs[1], vs[2], s)
    return out


def _char_int_grid_np(g, N, dirx, dixi, bounds, lines, h_ref, out):
    """Pure-numpy fallback: piecewise Simpson with plain (non-sided) stencils.

    Matches the accelerated path except that interpolation stencils may
    straddle flagged lines, which costs accuracy in an O(step) band around
    them; install numba for full accuracy on systems with several leftward
    speeds.
    """
    A = N + 1
    delta = 1.0 / N
    out[:] = 0.0
    aa, bb = np.meshgrid(np.arange(A), np.arange(A), indexing="ij")
    x0 = aa * delta
    xi0 = bb * delta
    tril = bb <= aa
    for p in range(bounds.shape[0] - 1):
        lo, hi = bounds[p], bounds[p + 1]
        length = hi - lo
        live = tril & (length > 1e-14)
        if not np.any(live):
            continue
        nseg = 2 * (np.floor(length[live] / (2.0 * h_ref) - 1e-12).astype(np.int64) + 1)
        h = length[live] / nseg
        max_ns = int(nseg.max())
        acc = np.zeros(live.sum())
        for k in range(max_ns + 1):
            kk = np.minimum(k, nseg)
            s = lo[live] + kk * h
            xs = x0[live] + dirx * s
            xis = xi0[live] + dixi * s
            vals = _quad_interp_np(g, N, xs, xis)
            wk = np.where(k > nseg, 0.0, _simpson_weights(kk, nseg))
            acc += wk * vals * h / 3.0
        out[live] += acc


def _char_int_grid(g, N, dirx, dixi, bounds, lines, h_ref, out):
    if _HAVE_NUMBA:
        _char_int_grid_nb(g, N, dirx, dixi, bounds, lines, h_ref, out)
    else:
        _char_int_grid_np(g, N, dirx, dixi, bounds, lines, h_ref, out)


def _family_bounds(geo, lines, X0, XI0):
    """Per-node integration breakpoints: 0, crossings with flagged lines, s_F."""
    sf = geo.sf2
    pieces = [np.zeros_like(sf)]
    cross = []
    for (al, be, ga) in lines:
        den = al * geo.dirx - be * geo.dixi
        if abs(den) < 1e-300:
            continue
        s = (ga - al * X0 + be * XI0) / den
        s = np.where((s > 1e-14) & (s < sf - 1e-14), s, np.inf)
        cross.append(s)
    if cross:
        cr = np.sort(np.stack(cross), axis=0)
        for r in range(cr.shape[0]):
            pieces.append(np.minimum(cr[r], sf))
    pieces.append(sf)
    return np.ascontiguousarray(np.stack(pieces))


# --------------------------------------------------------------------------
# boundary data
# --------------------------------------------------------------------------


@dataclass
class ArtificialBoundary:
    """Data prescribed on the x = 1 edge for the lower-triangular L block.

    ``functions[(i, j)]`` (1-based, i > j) maps an array of xi values in
    [0, 1] to the prescribed trace ``L_ij(1, xi)``.  The default is the
    constant hypotenuse value ``-sigma_mm[i, j] / (mu_i - mu_j)``, which keeps
    the field continuous across the switch between hypotenuse-terminating and
    edge-terminating characteristics.
    """

    functions: dict

    @staticmethod
    def constant_default(sys: HyperbolicSystem) -> "ArtificialBoundary":
        fns = {}
        for i in range(2, sys.m + 1):
            for j in range(1, i):
                c = -sys.sigma_mm[i - 1, j - 1] / (sys.mu[i - 1] - sys.mu[j - 1])
                fns[(i, j)] = _const_fn(c)
        return ArtificialBoundary(functions=fns)

    @staticmethod
    def from_functions(sys: HyperbolicSystem, overrides: dict) -> "ArtificialBoundary":
        ab = ArtificialBoundary.constant_default(sys)
        for key, fn in overrides.items():
            i, j = key
            if not (1 <= j < i <= sys.m):
                raise ValueError(f"artificial data index {key} must satisfy 1 <= j < i <= m")
            ab.functions[key] = fn
        return ab

    def __call__(self, i: int, j: int, xi):
        return np.asarray(self.functions[(i, j)](np.asarray(xi, dtype=float)), dtype=float)


def _const_fn(c):
    return lambda xi: np.full_like(np.asarray(xi, dtype=float), c)


@dataclass
class PicardReport:
    """Convergence record of the successive-approximation solve."""

    iterations: int
    increment_norms: list
    converged: bool
    residual: float
    tol: float
    row_reports: list = field(default_factory=list)


# --------------------------------------------------------------------------
# per-row geometry and piecewise seed data
# --------------------------------------------------------------------------


class _FamilyGeometry:
    """Characteristic geometry of one (i, j) kernel family on the grid."""

    __slots__ = ("dirx", "dixi", "sf2", "nseg2", "delta0", "chi_f", "eps")

    def __init__(self, dirx, dixi, sf2, nseg2, delta0=None, chi_f=None, eps=-1):
        self.dirx = dirx
        self.dixi = dixi
        self.sf2 = sf2
        self.nseg2 = nseg2
        self.delta0 = delta0    # mask of nodes taking the xi=0 relation datum
        self.chi_f = chi_f      # xi=0 endpoint abscissa where delta0
        self.eps = eps


class _SeedPiece:
    """Analytic two-branch seed datum of one row field.

    The seed (zeroth successive approximation) of every field is constant or
    piecewise defined across one straight line ``alpha*x - beta*xi = gamma``:
    value ``pos`` where ``alpha*x - beta*xi - gamma >= 0`` and ``neg`` below.
    Either branch may be a smooth function of the x = 1 exit ordinate instead
    of a constant (the prescribed artificial trace).
    """

    __slots__ = ("line", "pos_const", "neg_const", "neg_fn", "mu_i", "mu_j")

    def __init__(self, line=None, pos_const=0.0, neg_const=0.0, neg_fn=None, mu_i=1.0, mu_j=1.0):
        self.line = line            # (alpha, beta, gamma) or None for constant
        self.pos_const = pos_const
        self.neg_const = neg_const
        self.neg_fn = neg_fn        # branch on the negative side, else const
        self.mu_i = mu_i
        self.mu_j = mu_j

    def side(self, x, xi):
        # ties (points on the line up to rounding) take the positive branch,
        # matching the characteristic tracer's tie-break and the engine's
        # stencil convention
        if self.line is None:
            return np.ones_like(np.asarray(x, dtype=float), dtype=bool)
        a, b, g = self.line
        return a * x - b * xi - g >= -1e-12

    def value(self, x, xi, positive):
        x = np.asarray(x, dtype=float)
        if self.line is None or positive:
            return np.full_like(x, self.pos_const)
        if self.neg_fn is None:
            return np.full_like(x, self.neg_const)
        zeta = np.clip(xi + self.mu_j * (1.0 - x) / self.mu_i, 0.0, 1.0)
        return np.asarray(self.neg_fn(zeta), dtype=float)

    def node_values(self, x, xi):
        pos = self.side(x, xi)
        out = self.value(x, xi, False)
        out = np.where(pos, self.pos_const, out)
        return out


def _nseg_for(sf2, step, dirx, dixi):
    # even segment counts for composite Simpson; spatial step <= grid step
    speed = max(abs(dirx), abs(dixi))
    h_max = step * min(1.0, 1.0 / speed)
    half = np.ceil(sf2 / (2.0 * h_max) - 1e-12).astype(np.int64)
    nseg = (2 * np.maximum(half, 1)).astype(np.int32)
    nseg[sf2 <= 0.0] = 0
    return nseg


def _row_lines(sys: HyperbolicSystem, i: int):
    """Rays xi = (mu_jj / mu_i) x across which row i's fields genuinely jump.

    These are the switch loci of the xi = 0 relation for the fields pairing
    row i with a slower leftward state jj > i.  The solved fields are
    discontinuous across them, so quadrature is split there and interpolation
    stencils stay on one side.  (The hypotenuse / x = 1 switch lines of the
    jj < i fields are not included: the fields are continuous across those.)
    """
    lines = []
    mu = sys.mu
    for jj in range(i + 1, sys.m + 1):
        lines.append((mu[jj - 1], mu[i - 1], 0.0))
    return lines


def _row_geometry(sys: HyperbolicSystem, grid: TriangularGrid, artificial: ArtificialBoundary, i: int):
    """Geometry and seed data of every kernel family in row i (1-based)."""
    N = grid.n_sub
    A = N + 1
    step = grid.step
    aa, bb = np.meshgrid(np.arange(A), np.arange(A), indexing="ij")
    X = aa * step
    XI = bb * step
    tril = bb <= aa
    mu_i = sys.mu[i - 1]

    k_fams = []
    for j in range(1, sys.n + 1):
        lam_j = sys.lam[j - 1]
        sf2 = np.where(tril, (X - XI) / (mu_i + lam_j), 0.0)
        k_fams.append(
            _FamilyGeometry(
                dirx=-mu_i, dixi=lam_j, sf2=sf2, nseg2=_nseg_for(sf2, step, -mu_i, lam_j)
            )
        )

    k_consts = np.array(
        [-sys.sigma_mp[i - 1, r] / (mu_i + sys.lam[r]) for r in range(sys.n)]
    )
    edge_w = _edge_coeffs(sys)

    l_fams = []
    seeds = [_SeedPiece(pos_const=float(k_consts[r])) for r in range(sys.n)]
    for j in range(1, sys.m + 1):
        mu_j = sys.mu[j - 1]
        c0 = float(edge_w[j - 1] @ k_consts) if sys.n else 0.0
        if i == j:
            sf2 = np.where(tril, XI / mu_i, 0.0)
            geo = _FamilyGeometry(
                dirx=-mu_i, dixi=-mu_i, sf2=sf2,
                nseg2=_nseg_for(sf2, step, -mu_i, -mu_i),
                delta0=tril.copy(), chi_f=np.where(tril, X - XI, 0.0), eps=-1,
            )
            seeds.append(_SeedPiece(pos_const=c0))
        elif i < j:
            hyp = (mu_i * XI - mu_j * X > 1e-12) & tril
            sf2 = np.where(hyp, (X - XI) / (mu_i - mu_j), XI / mu_j)
            sf2 = np.where(tril, sf2, 0.0)
            l_ij = -sys.sigma_mm[i - 1, j - 1] / (mu_i - mu_j)
            geo = _FamilyGeometry(
                dirx=-mu_i, dixi=-mu_j, sf2=sf2,
                nseg2=_nseg_for(sf2, step, -mu_i, -mu_j),
                delta0=tril & ~hyp, chi_f=np.where(tril, X - mu_i * XI / mu_j, 0.0), eps=-1,
            )
            # below the ray (mu_j x - mu_i xi >= 0): the xi = 0 relation datum
            seeds.append(_SeedPiece(line=(mu_j, mu_i, 0.0), pos_const=c0, neg_const=l_ij))
        else:  # i > j: forward characteristics to the hypotenuse or x = 1
            nu_hyp = np.where(tril, (X - XI) / (mu_j - mu_i), 0.0)
            nu_edge = np.where(tril, (1.0 - X) / mu_i, 0.0)
            on_hyp = nu_hyp <= nu_edge
            sf2 = np.where(tril, np.where(on_hyp, nu_hyp, nu_edge), 0.0)
            l_ij = -sys.sigma_mm[i - 1, j - 1] / (mu_i - mu_j)
            geo = _FamilyGeometry(
                dirx=mu_i, dixi=mu_j, sf2=sf2,
                nseg2=_nseg_for(sf2, step, mu_i, mu_j),
                delta0=np.zeros_like(tril), chi_f=None, eps=+1,
            )
            # hypotenuse side is mu_j x - mu_i xi <= mu_j - mu_i: negative side
            # of the switch line carries the x = 1 artificial trace
            seeds.append(_SeedPiece(
                line=(-mu_j, -mu_i, -(mu_j - mu_i)), pos_const=l_ij,
                neg_fn=artificial.functions[(i, j)], mu_i=mu_i, mu_j=mu_j,
            ))
            # note: negative side means mu_j x - mu_i xi > mu_j - mu_i (exit at x=1)
        l_fams.append(geo)

    lines = _row_lines(sys, i)
    return k_fams, k_consts, l_fams, seeds, lines, tril


def _row_coefficients(sys: HyperbolicSystem):
    """Source combination coefficients over the stacked row fields.

    Row fields are ordered K_i1..K_in, L_i1..L_im.  The K_ij source is
    sum_k sigma_pp[k, j] K_ik + sum_p sigma_mp[p, j] L_ip and the L_ij source
    is sum_p sigma_mm[p, j] L_ip + sum_k sigma_pm[k, j] K_ik.
    """
    n, m = sys.n, sys.m
    cK = np.zeros((n, n + m))
    for j in range(n):
        cK[j, :n] = sys.sigma_pp[:, j]
        cK[j, n:] = sys.sigma_mp[:, j]
    cL = np.zeros((m, n + m))
    for j in range(m):
        cL[j, :n] = sys.sigma_pm[:, j]
        cL[j, n:] = sys.sigma_mm[:, j]
    return cK, cL


def _edge_coeffs(sys: HyperbolicSystem):
    # weight of K_ir(x, 0) in the xi=0 relation for L_ij:
    # mu_j L_ij(x,0) = sum_r lam_r q0[r, j] K_ir(x,0)
    n, m = sys.n, sys.m
    w = np.zeros((m, n))
    for j in range(m):
        for r in range(n):
            w[j, r] = sys.lam[r] * sys.q0[r, j] / sys.mu[j]
    return w


def _simpson_weights(k, nseg):
    """Composite Simpson weights (factor h/3 excluded) for sample index k."""
    w = np.where((k == 0) | (k == nseg), 1.0, np.where(k % 2 == 1, 4.0, 2.0))
    return w


def _solve_row(sys, grid, artificial, i, tol, max_iter):
    """Successive approximations for row i (1-based). Returns (K_row, L_row, report).

    Iterates the fully discrete characteristic-integral operator on the
    increments; the first increment is the analytic endpoint datum sampled at
    the nodes.  Keeping every application inside the same linear discrete
    operator makes the converged values the exact fixed point of that
    operator, so the final accuracy is governed by the quadrature and
    interpolation consistency on the (piecewise smooth) solution, not by the
    roughness of intermediate increments.
    """
    N = grid.n_sub
    A = N + 1
    n, m = sys.n, sys.m
    axis = grid.axis
    k_fams, k_consts, l_fams, seeds, lines, tril = _row_geometry(sys, grid, artificial, i)
    cK, cL = _row_coefficients(sys)
    edge_w = _edge_coeffs(sys)

    nf = n + m
    aa, bb = np.meshgrid(np.arange(A), np.arange(A), indexing="ij")
    X0 = aa * grid.step
    XI0 = bb * grid.step
    seed_nodes = np.zeros((nf, A, A))
    for f in range(nf):
        seed_nodes[f] = np.where(tril, seeds[f].node_values(X0, XI0), 0.0)

    lines_arr = np.asarray(lines, dtype=float).reshape(-1, 3)
    fam_bounds = [_family_bounds(geo, lines, X0, XI0) for geo in k_fams + l_fams]
    fam_href = [
        grid.step * min(1.0, 1.0 / max(abs(geo.dirx), abs(geo.dixi)))
        for geo in k_fams + l_fams
    ]

    total = seed_nodes.copy()
    inc_norms = [float(np.max(np.abs(seed_nodes[:, tril])))]
    converged = False  # always confirm with at least one operator application

    def l_update(j, integral, k_new):
        geo = l_fams[j]
        out = -geo.eps * integral
        if n and np.any(geo.delta0):
            edge = np.tensordot(edge_w[j], k_new[:, :, 0], axes=1)
            out[geo.delta0] += np.interp(geo.chi_f[geo.delta0], axis, edge)
        return np.where(tril, out, 0.0)

    def apply_op(fields, out):
        # one application of the discrete characteristic-integral operator;
        # K targets first, the xi = 0 relation reads the fresh K outputs
        for j in range(n):
            g = np.tensordot(cK[j], fields, axes=1)
            _char_int_grid(g, N, k_fams[j].dirx, k_fams[j].dixi,
                           fam_bounds[j], lines_arr, fam_href[j], scratch)
            out[j] = np.where(tril, scratch, 0.0)
        for j in range(m):
            geo = l_fams[j]
            g = np.tensordot(cL[j], fields, axes=1)
            _char_int_grid(g, N, geo.dirx, geo.dixi,
                           fam_bounds[n + j], lines_arr, fam_href[n + j], scratch)
            out[n + j] = l_update(j, np.where(tril, scratch, 0.0), out[:n])
        return out

    delta = seed_nodes.copy()
    new = np.zeros_like(delta)
    scratch = np.zeros((A, A))
    iterations = 0
    while not converged and iterations < max_iter:
        iterations += 1
        apply_op(delta, new)
        delta = new.copy()
        total += delta
        nrm = float(np.max(np.abs(delta[:, tril])))
        inc_norms.append(nrm)
        converged = nrm < tol

    # fixed-point residual of the affine discrete equations at the solution
    # (the xi = 0 relation term telescopes through the K block by linearity)
    resid = 0.0
    op_total = apply_op(total, np.zeros_like(total))
    for j in range(n):
        r = np.where(tril, k_consts[j] + op_total[j] - total[j], 0.0)
        resid = max(resid, float(np.max(np.abs(r))))
    for j in range(m):
        r = np.where(tril, seed_nodes[n + j] + op_total[n + j] - total[n + j], 0.0)
        resid = max(resid, float(np.max(np.abs(r))))

    report = PicardReport(
        iterations=iterations, increment_norms=inc_norms,
        converged=converged, residual=resid, tol=tol,
    )
    return total[:n], total[n:], report


# --------------------------------------------------------------------------
# controller kernels
# --------------------------------------------------------------------------


@dataclass
class ControllerKernels:
    """Converged feedback kernels of a hyperbolic system on a triangular grid.

    ``k_values`` has shape (m, n, N+1, N+1) and ``l_values`` (m, m, N+1, N+1);
    only the lower triangles (xi <= x) are meaningful.  ``row_lines[i]`` lists
    the slopes of rays xi = c*x across which the fields of row i may be
    non-smooth (one ray per faster-paired index j > i).
    """

    sys: HyperbolicSystem
    grid: TriangularGrid
    k_values: np.ndarray
    l_values: np.ndarray
    artificial_bc: ArtificialBoundary
    report: PicardReport
    g_traces: Optional[np.ndarray] = None       # (m, m, N+1), strictly lower triangular
    c_minus: Optional[np.ndarray] = None        # (m, m, N+1, N+1)
    c_plus: Optional[np.ndarray] = None         # (m, n, N+1, N+1)

    @property
    def row_lines(self):
        m = self.sys.m
        mu = self.sys.mu
        return [[mu[j] / mu[i] for j in range(i + 1, m)] for i in range(m)]

    def K_field(self, i: int, j: int) -> KernelField:
        """K kernel for leftward state i against rightward state j (1-based)."""
        return KernelField(self.grid, self.k_values[i - 1, j - 1],
                           discontinuity_lines=list(self.row_lines[i - 1]))

    def L_field(self, i: int, j: int) -> KernelField:
        return KernelField(self.grid, self.l_values[i - 1, j - 1],
                           discontinuity_lines=list(self.row_lines[i - 1]))

    def feedback_traces(self, xs: np.ndarray):
        """K(1, xs) and L(1, xs) resampled for the boundary feedback integral."""
        m, n = self.sys.m, self.sys.n
        Kt = np.zeros((m, n, len(xs)))
        Lt = np.zeros((m, m, len(xs)))
        for i in range(1, m + 1):
            for j in range(1, n + 1):
                Kt[i - 1, j - 1] = self.K_field(i, j).evaluate(np.ones_like(xs), xs)
            for j in range(1, m + 1):
                Lt[i - 1, j - 1] = self.L_field(i, j).evaluate(np.ones_like(xs), xs)
        return Kt, Lt

    def resample(self, values: np.ndarray, xs: np.ndarray, row_index: int):
        """Evaluate one stored field at all (xs[k], xs[l <= k]) pairs."""
        K = len(xs)
        fld = KernelField(self.grid, values, discontinuity_lines=list(self.row_lines[row_index]))
        out = np.zeros((K, K))
        for k in range(K):
            out[k, : k + 1] = fld.evaluate(np.full(k + 1, xs[k]), xs[: k + 1])
        return out


def picard_solve_controller(
    sys: HyperbolicSystem,
    grid: TriangularGrid,
    artificial_bc: Optional[ArtificialBoundary] = None,
    tol: float = 1e-10,
    max_iter: int = 200,
    parallel_rows: bool = False,
    rows: Optional[list] = None,
) -> ControllerKernels:
    """Solve the controller kernel equations by successive approximations.

    The m rows decouple; ``rows`` restricts the solve to a subset (1-based),
    leaving the remaining fields zero.  Raises :class:`KernelConvergenceError`
    when any row fails to converge within ``max_iter``.
    """
    report = validate(sys)
    report.raise_if_invalid()
    if tol <= 0:
        raise ValueError("tol must be positive")
    artificial_bc = artificial_bc or ArtificialBoundary.constant_default(sys)
    A = grid.n_sub + 1
    n, m = sys.n, sys.m
    k_values = np.zeros((m, n, A, A))
    l_values = np.zeros((m, m, A, A))

    row_list = list(range(1, m + 1)) if rows is None else list(rows)

    def run(i):
        return _solve_row(sys, grid, artificial_bc, i, tol, max_iter)

    if parallel_rows and len(row_list) > 1:
        with ThreadPoolExecutor(max_workers=min(len(row_list), os.cpu_count() or 1)) as ex:
            results = list(ex.map(run, row_list))
    else:
        results = [run(i) for i in row_list]

    row_reports = []
    for i, (k_row, l_row, rep) in zip(row_list, results):
        k_values[i - 1] = k_row
        l_values[i - 1] = l_row
        row_reports.append(rep)

    iters = max(r.iterations for r in row_reports)
    norms = [
        max(r.increment_norms[q] if q < len(r.increment_norms) else 0.0 for r in row_reports)
        for q in range(1 + max(len(r.increment_norms) - 1 for r in row_reports))
    ]
    merged = PicardReport(
        iterations=iters,
        increment_norms=norms,
        converged=all(r.converged for r in row_reports),
        residual=max(r.residual for r in row_reports),
        tol=tol,
        row_reports=row_reports,
    )
    kernels = ControllerKernels(
        sys=sys, grid=grid, k_values=k_values, l_values=l_values,
        artificial_bc=artificial_bc, report=merged,
    )
    if not merged.converged:
        raise KernelConvergenceError(
            f"kernel solve did not reach tol={tol} within {max_iter} iterations "
            f"(last increment {merged.increment_norms[-1]:.3e})",
            merged,
        )
    return kernels


def compute_G(kernels: ControllerKernels) -> np.ndarray:
    """Boundary-trace couplings g_ij(x) = mu_j L_ij(x, 0) - sum_p lam_p q0[p, j] K_ip(x, 0).

    Only the strictly lower triangle (i > j) is nonzero; for i <= j the same
    expression is the xi = 0 boundary relation and vanishes, so those entries
    are set to exactly zero.  Returns an (m, m, N+1) array over the x-grid and
    stores it on ``kernels.g_traces``.
    """
    sys = kernels.sys
    m, n = sys.m, sys.n
    A = kernels.grid.n_sub + 1
    g = np.zeros((m, m, A))
    for i in range(m):
        for j in range(i):
            acc = sys.mu[j] * kernels.l_values[i, j][:, 0]
            for p in range(n):
                acc = acc - sys.lam[p] * sys.q0[p, j] * kernels.k_values[i, p][:, 0]
            g[i, j] = acc
    kernels.g_traces = g
    return g


# --------------------------------------------------------------------------
# Volterra resolvents: C kernels and the inverse transform
# --------------------------------------------------------------------------


def _pad_matmul(Avals, Bvals, step):
    """Trapezoid of integral_xi^x A(x, s) B(s, xi) ds on the grid.

    ``Avals`` has shape (p, q, A, A) and ``Bvals`` (q, r, A, A); returns
    (p, r, A, A).  Upper triangles must be zero, which confines the plain
    matrix product to the integration range; endpoint corrections restore
    trapezoid weights.
    """
    p, q, A, _ = Avals.shape
    r = Bvals.shape[1]
    out = np.einsum("pqac,qrcb->prab", Avals, Bvals, optimize=True)
    diagB = np.einsum("qrbb->qrb", Bvals)  # B(xi, xi)
    diagA = np.einsum("pqaa->pqa", Avals)  # A(x, x)
    corr1 = np.einsum("pqab,qrb->prab", Avals, diagB, optimize=True)
    corr2 = np.einsum("pqa,qrab->prab", diagA, Bvals, optimize=True)
    return step * (out - 0.5 * corr1 - 0.5 * corr2)


def _volterra_left(Kvals, Gvals, step, tol=1e-12, max_iter=400):
    """Solve D = G + integral_xi^x D(x, s) K(s, xi) ds by successive substitution."""
    D = Gvals.copy()
    trace = []
    for it in range(1, max_iter + 1):
        D_new = Gvals + _pad_matmul(D, Kvals, step)
        inc = float(np.max(np.abs(D_new - D)))
        trace.append(inc)
        D = D_new
        if inc < tol:
            return D, trace
    raise KernelConvergenceError(
        f"Volterra resolvent iteration stalled (last increment {trace[-1]:.3e}); "
        "second-kind Volterra series must converge, so this indicates a bug or "
        "wildly scaled kernels",
        trace,
    )


def _volterra_right(Kvals, Gvals, step, tol=1e-12, max_iter=400):
    """Solve D = G + integral_xi^x K(x, s) D(s, xi) ds by successive substitution."""
    D = Gvals.copy()
    trace = []
    for it in range(1, max_iter + 1):
        D_new = Gvals + _pad_matmul(Kvals, D, step)
        inc = float(np.max(np.abs(D_new - D)))
        trace.append(inc)
        D = D_new
        if inc < tol:
            return D, trace
    raise KernelConvergenceError(
        f"Volterra resolvent iteration stalled (last increment {trace[-1]:.3e})",
        trace,
    )


def solve_C_kernels(kernels: ControllerKernels, tol: float = 1e-12, max_iter: int = 400):
    """Target-system kernels: C^- = L + int C^- L and C^+ = K + int C^- K.

    ``C^-`` is, for each x, a second-kind Volterra equation on [0, x] solved
    by successive substitution; ``C^+`` follows explicitly.  Results are
    cached on the kernels object and returned as (c_minus, c_plus).
    """
    step = kernels.grid.step
    L = _mask_tril(kernels.l_values, kernels.grid)
    K = _mask_tril(kernels.k_values, kernels.grid)
    c_minus, _ = _volterra_left(L, L, step, tol=tol, max_iter=max_iter)
    if kernels.sys.n:
        c_plus = K + _pad_matmul(c_minus, K, step)
    else:
        c_plus = np.zeros_like(K)
    kernels.c_minus = c_minus
    kernels.c_plus = c_plus
    return c_minus, c_plus


def _mask_tril(values, grid):
    mask = grid.tril_mask()
    return np.where(mask[None, None, :, :], values, 0.0)


def invert_transform(kernels: ControllerKernels):
    """Kernel of the inverse state transform as an (n+m) x (n+m) block array.

    The forward transform subtracts ``int_0^x [[0, 0], [K, L]] w dxi`` from the
    state w = (u, v); its inverse adds back the Volterra resolvent of that
    block kernel, whose nonzero rows are exactly (C^+, C^-).  Following the
    convention that the inverse transform also subtracts its kernel, the
    returned R is the negated resolvent: rows for u-components vanish and
    ``R[v-block] = -(C^+, C^-)``.
    """
    if kernels.c_minus is None:
        solve_C_kernels(kernels)
    n, m = kernels.sys.n, kernels.sys.m
    A = kernels.grid.n_sub + 1
    R = np.zeros((n + m, n + m, A, A))
    R[n:, :n] = -kernels.c_plus
    R[n:, n:] = -kernels.c_minus
    return R


# --------------------------------------------------------------------------
# observer kernels
# --------------------------------------------------------------------------


@dataclass
class ObserverKernels:
    """Output-injection kernels and gains for the boundary observer.

    ``m_values`` has shape (n, m, N+1, N+1), ``n_values`` (m, m, N+1, N+1).
    ``h_traces`` (m, m, N+1) is strictly upper triangular.  ``p_plus`` (n, m,
    N+1) and ``p_minus`` (m, m, N+1) are the output-injection gains over the
    x-grid, ``P^+ = M(x, 0) diag(mu)`` and ``P^- = N(x, 0) diag(mu)``.
    """

    sys: HyperbolicSystem
    grid: TriangularGrid
    m_values: np.ndarray
    n_values: np.ndarray
    h_traces: np.ndarray
    p_plus: np.ndarray
    p_minus: np.ndarray
    report: PicardReport
    d_plus: Optional[np.ndarray] = None
    d_minus: Optional[np.ndarray] = None

    def M_field(self, i: int, j: int) -> KernelField:
        return KernelField(self.grid, self.m_values[i - 1, j - 1])

    def N_field(self, i: int, j: int) -> KernelField:
        return KernelField(self.grid, self.n_values[i - 1, j - 1])


def observer_companion_system(sys: HyperbolicSystem) -> HyperbolicSystem:
    """Reflected companion system whose controller kernels yield (M, N).

    Transposing the couplings, negating the cross blocks, and substituting
    ``q0 <- -diag(lam)^-1 r1^T diag(mu)`` makes the reflected observer system
    structurally identical to a controller kernel system.
    """
    n, m = sys.n, sys.m
    if n:
        q0_sub = -(1.0 / sys.lam)[:, None] * sys.r1.T * sys.mu[None, :]
    else:
        q0_sub = np.zeros((0, m))
    return HyperbolicSystem(
        n=n, m=m, lam=sys.lam, mu=sys.mu,
        sigma_pp=sys.sigma_pp.T, sigma_pm=-sys.sigma_mp.T,
        sigma_mp=-sys.sigma_pm.T, sigma_mm=sys.sigma_mm.T,
        q0=q0_sub, r1=np.zeros((m, n)),
    )


def solve_observer_kernels(
    sys: HyperbolicSystem,
    grid: TriangularGrid,
    tol: float = 1e-10,
    max_iter: int = 200,
    parallel_rows: bool = False,
    gain_sign: float = 1.0,
    with_d_kernels: bool = False,
) -> ObserverKernels:
    """Solve the observer kernel system via the reflected controller engine.

    Maps back through ``M_ij(x, xi) = K'_ji(1 - xi, 1 - x)`` and
    ``N_ij(x, xi) = -L'_ji(1 - xi, 1 - x)``, computes the boundary traces
    ``h_ij(x) = N_ij(1, x) - [r1 M(1, x)]_ij`` (exactly zero for j <= i by the
    x = 1 boundary condition), and the injection gains ``P^+ = M(x, 0) diag(mu)``,
    ``P^- = N(x, 0) diag(mu)`` (scaled by ``gain_sign``).
    """
    report = validate(sys)
    report.raise_if_invalid()
    companion = observer_companion_system(sys)
    zero_art = ArtificialBoundary(
        functions={(i, j): _const_fn(0.0) for i in range(2, sys.m + 1) for j in range(1, i)}
    )
    ctrl = picard_solve_controller(
        companion, grid, artificial_bc=zero_art, tol=tol, max_iter=max_iter,
        parallel_rows=parallel_rows,
    )
    n, m = sys.n, sys.m
    A = grid.n_sub + 1
    m_values = np.zeros((n, m, A, A))
    n_values = np.zeros((m, m, A, A))
    for i in range(n):
        for j in range(m):
            m_values[i, j] = ctrl.k_values[j, i][::-1, ::-1].T
    for i in range(m):
        for j in range(m):
            n_values[i, j] = -ctrl.l_values[j, i][::-1, ::-1].T
    mask = grid.tril_mask()
    m_values = np.where(mask[None, None], m_values, 0.0)
    n_values = np.where(mask[None, None], n_values, 0.0)

    h = np.zeros((m, m, A))
    for i in range(m):
        for j in range(i + 1, m):
            acc = n_values[i, j][A - 1, :].copy()
            for k in range(n):
                acc -= sys.r1[i, k] * m_values[k, j][A - 1, :]
            h[i, j] = acc

    p_plus = gain_sign * m_values[:, :, :, 0] * sys.mu[None, :, None]
    p_minus = gain_sign * n_values[:, :, :, 0] * sys.mu[None, :, None]

    obs = ObserverKernels(
        sys=sys, grid=grid, m_values=m_values, n_values=n_values,
        h_traces=h, p_plus=p_plus, p_minus=p_minus, report=ctrl.report,
    )
    if with_d_kernels:
        solve_D_kernels(obs)
    return obs


def solve_D_kernels(obs: ObserverKernels, tol: float = 1e-12, max_iter: int = 400):
    """Companion kernels of the observer target dynamics.

    ``d^-`` solves the second-kind Volterra relation
    ``d^- = -N sigma_mp + int_xi^x N(x, s) d^-(s, xi) ds`` and ``d^+`` follows
    explicitly as ``-M sigma_mp + int M d^-``.
    """
    sys = obs.sys
    step = obs.grid.step
    Nv = _mask_tril(obs.n_values, obs.grid)
    Mv = _mask_tril(obs.m_values, obs.grid)
    g_minus = -np.einsum("ikab,kj->ijab", Nv, sys.sigma_mp)
    d_minus, _ = _volterra_right(Nv, g_minus, step, tol=tol, max_iter=max_iter)
    if sys.n:
        d_plus = -np.einsum("ikab,kj->ijab", Mv, sys.sigma_mp) + _pad_matmul(Mv, d_minus, step)
    else:
        d_plus = np.zeros((0, sys.n, Nv.shape[2], Nv.shape[3]))
    obs.d_minus = d_minus
    obs.d_plus = d_plus
    return d_minus, d_plus
