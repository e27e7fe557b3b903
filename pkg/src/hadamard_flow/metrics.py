"""Lorentzian metric models on a four-dimensional chart patch.

All models expose batched component maps with signature (+,-,-,-):
``g(x)`` returns metric components, ``dg(x)`` their coordinate derivatives
(``dg[..., k, i, j] = d g_ij / d x^k``), plus a time function, an observer
field u = grad(t)/|grad(t)| and scalar curvature.  Chart bounds and the
convex-patch radius are engineering parameters validated by solver
convergence, not derived quantities.
"""

import csv

import numpy as np

from .errors import OutOfChart

ETA = np.diag([1.0, -1.0, -1.0, -1.0])

# upper-triangle index pairs used for 10-component symmetric storage
SYM_PAIRS = [(i, j) for i in range(4) for j in range(i, 4)]


class MetricModel:
    """Base class: a metric on a box chart with a time function t(x) = x^0.

    The time function increases toward the future (the observer field
    grad(t)/|grad(t)| is future-directed); this convention is recorded in
    ``metadata`` and is what makes the flat-space regularization functions
    come out as x^0 - y^0.
    """

    dimension = 4
    family_id = "abstract"

    def __init__(self, chart_bounds, patch_radius):
        self.chart_bounds = np.asarray(chart_bounds, dtype=float)  # (4, 2)
        self.patch_radius = float(patch_radius)
        self.metadata = {
            "signature": "+---",
            "time_function": "x0",
            "time_orientation": "future-increasing",
        }

    # -- components -----------------------------------------------------
    def g(self, x):
        raise NotImplementedError

    def dg(self, x):
        raise NotImplementedError

    def ginv(self, x):
        return np.linalg.inv(self.g(x))

    def sqrt_abs_det(self, x):
        return np.sqrt(np.abs(np.linalg.det(self.g(x))))

    def christoffel(self, x):
        """Gamma^l_ij from g and dg."""
        dg = self.dg(x)  # dg[..., k, i, j] = d_k g_ij
        gi = self.ginv(x)
        inner = (np.einsum("...ikj->...kij", dg)
                 + np.einsum("...jki->...kij", dg)
                 - dg)  # inner[..., k, i, j] = d_i g_kj + d_j g_ki - d_k g_ij
        return 0.5 * np.einsum("...lk,...kij->...lij", gi, inner)

    def geodesic_acceleration(self, x, p):
        """-Gamma^l_ij p^i p^j; overridden where a closed form is cheaper."""
        gam = self.christoffel(x)
        return -np.einsum("...lij,...i,...j->...l", gam, p, p)

    # -- time function / observer --------------------------------------
    def time_function(self, x):
        x = np.asarray(x, dtype=float)
        return x[..., 0]

    def grad_time(self, x):
        """Vector field (grad t)^j = g^{j0}."""
        return self.ginv(x)[..., :, 0]

    def observer(self, x):
        """Unit future timelike u = grad(t)/|grad(t)|."""
        gt = self.grad_time(x)
        g = self.g(x)
        norm2 = np.einsum("...i,...ij,...j->...", gt, g, gt)
        return gt / np.sqrt(norm2)[..., None]

    def scalar_curvature(self, x):
        raise NotImplementedError

    # -- frames / bounds -------------------------------------------------
    def orthonormal_frame(self, y):
        """Columns e_a with g(e_a, e_b) = eta_ab and e_0 = observer(y)."""
        y = np.asarray(y, dtype=float)
        g = self.g(y)
        frame = np.zeros((4, 4))
        frame[:, 0] = self.observer(y)
        for i in range(1, 4):
            w = np.zeros(4)
            w[i] = 1.0
            for b in range(i):
                coef = w @ g @ frame[:, b] * ETA[b, b]
                w = w - coef * frame[:, b]
            n2 = -(w @ g @ w)
            if n2 <= 0:
                raise ValueError("Gram-Schmidt produced a non-spacelike leg")
            frame[:, i] = w / np.sqrt(n2)
        return frame

    def contains(self, x):
        x = np.asarray(x, dtype=float)
        lo, hi = self.chart_bounds[:, 0], self.chart_bounds[:, 1]
        return np.all((x >= lo) & (x <= hi), axis=-1)

    def require_inside(self, x, label="point"):
        if not np.all(self.contains(x)):
            raise OutOfChart(f"{label} outside chart bounds")


class MinkowskiMetric(MetricModel):
    family_id = "minkowski"
    flat_connection = True

    def __init__(self, chart_half_width=5.0, patch_radius=4.0):
        w = float(chart_half_width)
        super().__init__([[-w, w]] * 4, patch_radius)

    def g(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(ETA, x.shape[:-1] + (4, 4)).copy()

    def dg(self, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (4, 4, 4))

    def ginv(self, x):
        return self.g(x)

    def christoffel(self, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (4, 4, 4))

    def scalar_curvature(self, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1])


class ConformalFLRW(MetricModel):
    """g = a(x^0)^2 eta with a polynomial scale-factor profile.

    The profile must stay positive on the chart; this is checked at
    construction on the time interval of the bounds.
    """

    family_id = "conformal_flrw"

    def __init__(self, a_coeffs=(1.0, 0.1), chart_half_width=4.0, patch_radius=3.5):
        w = float(chart_half_width)
        super().__init__([[-w, w]] * 4, patch_radius)
        self.a_coeffs = np.asarray(a_coeffs, dtype=float)
        etas = np.linspace(-w, w, 2001)
        if np.any(self._a(etas) <= 0):
            raise ValueError("scale factor must stay positive on the chart")
        self.metadata["scale_factor_coeffs"] = [float(c) for c in self.a_coeffs]

    def _a(self, eta):
        return np.polynomial.polynomial.polyval(eta, self.a_coeffs)

    def _da(self, eta):
        der = np.polynomial.polynomial.polyder(self.a_coeffs)
        return np.polynomial.polynomial.polyval(eta, der)

    def _d2a(self, eta):
        der2 = np.polynomial.polynomial.polyder(self.a_coeffs, 2)
        return np.polynomial.polynomial.polyval(eta, der2)

    def g(self, x):
        x = np.asarray(x, dtype=float)
        a2 = self._a(x[..., 0]) ** 2
        return a2[..., None, None] * ETA

    def ginv(self, x):
        x = np.asarray(x, dtype=float)
        a2 = self._a(x[..., 0]) ** 2
        return ETA / a2[..., None, None]

    def dg(self, x):
        x = np.asarray(x, dtype=float)
        eta0 = x[..., 0]
        out = np.zeros(x.shape[:-1] + (4, 4, 4))
        out[..., 0, :, :] = (2.0 * self._a(eta0) * self._da(eta0))[..., None, None] * ETA
        return out

    def christoffel(self, x):
        x = np.asarray(x, dtype=float)
        eta0 = x[..., 0]
        H = (self._da(eta0) / self._a(eta0))[..., None, None, None]
        delta = np.eye(4)
        d0 = np.zeros(4)
        d0[0] = 1.0
        # Gamma^l_ij = H (delta^0_i delta^l_j + delta^0_j delta^l_i - eta^{l0} eta_ij)
        base = (np.einsum("i,lj->lij", d0, delta)
                + np.einsum("j,li->lij", d0, delta)
                - np.einsum("l,ij->lij", ETA[:, 0], ETA))
        return H * base

    def geodesic_acceleration(self, x, p):
        x = np.asarray(x, dtype=float)
        p = np.asarray(p, dtype=float)
        eta0 = x[..., 0]
        H = self._da(eta0) / self._a(eta0)
        pp = np.einsum("...i,ij,...j->...", p, ETA, p)
        acc = -2.0 * p[..., 0][..., None] * p
        acc[..., 0] += pp
        return H[..., None] * acc

    def scalar_curvature(self, x):
        # sign fixed by the numerical Lichnerowicz-Weitzenboeck test and the
        # finite-difference Riemann oracle (both use the same Ricci convention)
        x = np.asarray(x, dtype=float)
        eta0 = x[..., 0]
        return -6.0 * self._d2a(eta0) / self._a(eta0) ** 3


class TabulatedMetric(MetricModel):
    """Metric ingested from a CSV grid with multilinear interpolation.

    Row format: x0,x1,x2,x3 followed by the 10 upper-triangle components
    g00,g01,g02,g03,g11,g12,g13,g22,g23,g33.  The rows must fill a regular
    (possibly non-uniform) tensor grid.
    """

    family_id = "custom"

    def __init__(self, path, patch_radius=None):
        coords = []
        comps = []
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].lstrip().startswith("#"):
                    continue
                vals = [float(c) for c in row]
                if len(vals) != 14:
                    raise ValueError("expected 14 columns per row (4 coords + 10 components)")
                coords.append(vals[:4])
                comps.append(vals[4:])
        coords = np.asarray(coords)
        comps = np.asarray(comps)
        axes = [np.unique(coords[:, a]) for a in range(4)]
        shape = tuple(len(ax) for ax in axes)
        if np.prod(shape) != len(coords):
            raise ValueError("rows do not fill a regular tensor grid")
        # sort rows into grid order
        idx = np.zeros((len(coords), 4), dtype=np.int64)
        for a in range(4):
            idx[:, a] = np.searchsorted(axes[a], coords[:, a])
        flat = np.ravel_multi_index([idx[:, a] for a in range(4)], shape)
        table = np.empty(shape + (10,))
        table.reshape(-1, 10)[flat] = comps
        self.axes = axes
        self.table = table
        bounds = [[ax[0], ax[-1]] for ax in axes]
        if patch_radius is None:
            patch_radius = 0.45 * min(ax[-1] - ax[0] for ax in axes)
        super().__init__(bounds, patch_radius)
        self._fd_step = min(np.diff(ax).min() for ax in axes) / 53.0

    def _interp(self, x):
        """Multilinear interpolation of the 10 components at points x (..., 4)."""
        x = np.asarray(x, dtype=float)
        flatx = x.reshape(-1, 4)
        w = np.ones((len(flatx), 16))
        corner = np.zeros((len(flatx), 16), dtype=np.int64)
        strides = np.array([int(np.prod(self.table.shape[a + 1:4])) for a in range(4)])
        for a in range(4):
            ax = self.axes[a]
            i = np.clip(np.searchsorted(ax, flatx[:, a]) - 1, 0, len(ax) - 2)
            t = (flatx[:, a] - ax[i]) / (ax[i + 1] - ax[i])
            bit = (np.arange(16) >> (3 - a)) & 1
            w *= np.where(bit[None, :] == 1, t[:, None], 1.0 - t[:, None])
            corner += (i[:, None] + bit[None, :]) * strides[a]
        vals = self.table.reshape(-1, 10)[corner]  # (M, 16, 10)
        out = np.einsum("mc,mck->mk", w, vals)
        return out.reshape(x.shape[:-1] + (10,))

    def g(self, x):
        comps = self._interp(x)
        out = np.zeros(comps.shape[:-1] + (4, 4))
        for k, (i, j) in enumerate(SYM_PAIRS):
            out[..., i, j] = comps[..., k]
            out[..., j, i] = comps[..., k]
        return out

    def dg(self, x):
        x = np.asarray(x, dtype=float)
        h = self._fd_step
        out = np.zeros(x.shape[:-1] + (4, 4, 4))
        for k in range(4):
            dx = np.zeros(4)
            dx[k] = h
            out[..., k, :, :] = (self.g(x + dx) - self.g(x - dx)) / (2 * h)
        return out

    def scalar_curvature(self, x):
        return scalar_curvature_fd(self, x)


def scalar_curvature_fd(metric, x, h=1e-4):
    """Scalar curvature from finite differences of the Christoffel symbols.

    Convention: R^l_{i l j} contracted as
    R_ij = d_l Gamma^l_ij - d_j Gamma^l_il + Gamma^l_lm Gamma^m_ij
           - Gamma^l_jm Gamma^m_il,  R = g^{ij} R_ij.
    Used as the independent oracle for the analytic family formulas.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    dGamma = np.zeros((len(pts), 4, 4, 4, 4))  # [., k, l, i, j] = d_k Gamma^l_ij
    for k in range(4):
        dx = np.zeros(4)
        dx[k] = h
        dGamma[:, k] = (metric.christoffel(pts + dx) - metric.christoffel(pts - dx)) / (2 * h)
    Gam = metric.christoffel(pts)
    ricci = (np.einsum("mllij->mij", dGamma)
             - np.einsum("mjlil->mij", dGamma)
             + np.einsum("mllk,mkij->mij", Gam, Gam)
             - np.einsum("mljk,mkil->mij", Gam, Gam))
    gi = metric.ginv(pts)
    R = np.einsum("mij,mij->m", gi, ricci)
    return R[0] if single else R
