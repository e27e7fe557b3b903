"""Normal-coordinate chart around a base point, with fitted field surrogates.

For a fixed base point y and orthonormal frame (e_0 = observer), the map
v -> exp_y(v^a e_a) realizes normal coordinates in which

  * Gamma(exp_y(v), y) = eta(v, v) exactly (Gauss lemma),
  * geodesics through y are straight rays v(t) = t v0,
  * the null cone of y is the flat cone |v^0| = |vec v|.

The chart map x(v) and the pulled-back metric ghat_ab(v) are sampled by
batched geodesic integration (the Jacobian of exp by central differences in
the velocity argument) and fitted as polynomial surrogates; every smooth
field the transport solvers need (ghat, sqrt(det), divergence weights,
Laplacian of Gamma, van Vleck factor) derives from those two fits.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import StencilTooNarrow
from .geodesics import connect_batch, exp_map, integrate_geodesics
from .metrics import ETA, SYM_PAIRS
from .polyfit import fit_surrogate, halton_points


def fibonacci_directions(n):
    """n roughly uniform unit vectors on S^2 (deterministic)."""
    i = np.arange(n, dtype=float)
    phi = (1 + np.sqrt(5.0)) / 2
    z = 1 - (2 * i + 1) / n
    theta = 2 * np.pi * i / phi
    r = np.sqrt(np.maximum(0.0, 1 - z * z))
    return np.column_stack([r * np.cos(theta), r * np.sin(theta), z])


@dataclass
class ChartSpec:
    """Sampling and fitting controls for one normal chart."""
    l_fit: float = 0.55          # half-width of the fitted box in v
    l_use: float = 0.50          # guaranteed evaluation domain
    degree: int = 6              # polynomial degree of the surrogates
    n_halton: int = 4096         # scattered samples in the box
    n_cone_dirs: int = 32        # cone directions added to the sample set
    t_max: float = 0.45          # cone extent used by the flow solvers
    jacobian_step: float = 1e-5  # velocity FD step for the exp Jacobian
    nsteps: int = 128            # RK4 steps per unit parameter


class NormalChart:
    def __init__(self, metric, base, frame, chart_fit, ghat_fit, spec, residuals):
        self.metric = metric
        self.base = np.asarray(base, dtype=float)
        self.frame = frame                    # columns e_a (chart components)
        self.frame_inv = np.linalg.inv(frame)
        self.chart_fit = chart_fit            # v -> x (4 components)
        self.ghat_fit = ghat_fit              # v -> ghat (10 components)
        self.spec = spec
        self.fit_residuals = residuals
        self.base_time = float(metric.time_function(self.base))

    # -- exact quantities -------------------------------------------------
    @staticmethod
    def gamma(V):
        V = np.atleast_2d(np.asarray(V, dtype=float))
        return V[:, 0] ** 2 - np.sum(V[:, 1:] ** 2, axis=1)

    @staticmethod
    def grad_gamma_vec(V):
        """(nabla Gamma)^a in v-coordinates: equals 2 v^a (Gauss lemma)."""
        V = np.atleast_2d(np.asarray(V, dtype=float))
        return 2.0 * V

    # -- fitted fields ----------------------------------------------------
    def chart_point(self, V):
        return self.chart_fit(np.atleast_2d(V))

    def chart_jacobian(self, V):
        """dx^j/dv^a, shape (B, 4, 4) with rows j, columns a."""
        g = self.chart_fit.gradient(np.atleast_2d(V))   # (B, a, j)
        return np.swapaxes(g, 1, 2)

    def ghat(self, V):
        comps = self.ghat_fit(np.atleast_2d(V))
        B = comps.shape[0]
        out = np.empty((B, 4, 4))
        for k, (i, j) in enumerate(SYM_PAIRS):
            out[:, i, j] = comps[:, k]
            out[:, j, i] = comps[:, k]
        return out

    def ghat_inv(self, V):
        return np.linalg.inv(self.ghat(V))

    def sqrt_det(self, V):
        return np.sqrt(np.abs(np.linalg.det(self.ghat(V))))

    def dghat(self, V):
        """d_b ghat_cd, shape (B, 4, 4, 4) (derivative axis first)."""
        grad = self.ghat_fit.gradient(np.atleast_2d(V))  # (B, 4, 10)
        B = grad.shape[0]
        out = np.empty((B, 4, 4, 4))
        for k, (i, j) in enumerate(SYM_PAIRS):
            out[:, :, i, j] = grad[:, :, k]
            out[:, :, j, i] = grad[:, :, k]
        return out

    def divergence_weights(self, V):
        """b^a = (1/sqrt g) d_b (sqrt g ghat^{ba}) from the ghat surrogate."""
        gi = self.ghat_inv(V)
        dg = self.dghat(V)
        term1 = -np.einsum("mbc,mbcd,mda->ma", gi, dg, gi)
        term2 = 0.5 * np.einsum("mba,mcd,mbcd->ma", gi, gi, dg)
        return term1 + term2

    def laplacian_gamma(self, V):
        """Delta Gamma = 2 ghat^{ab} eta_ab + 2 b^a eta_ab v^b (exact in v)."""
        V = np.atleast_2d(np.asarray(V, dtype=float))
        gi = self.ghat_inv(V)
        b = self.divergence_weights(V)
        return (2.0 * np.einsum("mab,ab->m", gi, ETA)
                + 2.0 * np.einsum("ma,ab,mb->m", b, ETA, V))

    def vleck(self, V):
        """Van Vleck-Morette square root |det ghat|^{-1/4} (equals 1 at v=0)."""
        return np.abs(np.linalg.det(self.ghat(V))) ** -0.25

    def laplacian_gamma_stages(self, grid):
        """DeltaGamma on a StageGrid {s_i * T_m}, shape (S, M).

        Same quantity as laplacian_gamma, but the tensor structure of the
        grid lets one design matrix serve every stage scale.
        """
        S, M = len(grid.svals), len(grid.targets)
        gh = grid.eval(self.ghat_fit)                       # (S, M, 10)
        dgh = np.stack([grid.eval_coeffs(self.ghat_fit.derivative_in_basis(a))
                        for a in range(4)], axis=2)         # (S, M, 4, 10)
        ghm = np.empty((S, M, 4, 4))
        dghm = np.empty((S, M, 4, 4, 4))
        for k, (i, j) in enumerate(SYM_PAIRS):
            ghm[..., i, j] = gh[..., k]
            ghm[..., j, i] = gh[..., k]
            dghm[..., :, i, j] = dgh[..., :, k]
            dghm[..., :, j, i] = dgh[..., :, k]
        gi = np.linalg.inv(ghm.reshape(-1, 4, 4))
        dg = dghm.reshape(-1, 4, 4, 4)
        term1 = -np.einsum("mbc,mbcd,mda->ma", gi, dg, gi)
        term2 = 0.5 * np.einsum("mba,mcd,mbcd->ma", gi, gi, dg)
        b = (term1 + term2).reshape(S, M, 4)
        V = grid.svals[:, None, None] * grid.targets[None, :, :]
        return (2.0 * np.einsum("smab,ab->sm", gi.reshape(S, M, 4, 4), ETA)
                + 2.0 * np.einsum("sma,ab,smb->sm", b, ETA, V))

    def time_diff(self, V):
        """t(x(v)) - t(y); sign reference for the regularization functions."""
        return self.metric.time_function(self.chart_point(V)) - self.base_time

    # -- pairing / differencing helpers ------------------------------------
    def pair_gradients(self, gradF, gradG, V):
        """Metric pairing ghat^{ab} (dF)_a (dG)_b of coordinate gradients."""
        gi = self.ghat_inv(V)
        return np.einsum("mab,ma,mb->m", gi, gradF, gradG)

    def fd_gradient(self, func, V, h=1e-3):
        """Coordinate gradient of a scalar evaluator by central differences."""
        V = np.atleast_2d(np.asarray(V, dtype=float))
        B = V.shape[0]
        pts = np.repeat(V[:, None, :], 8, axis=1)
        for a in range(4):
            pts[:, 2 * a, a] += h
            pts[:, 2 * a + 1, a] -= h
        vals = np.asarray(func(pts.reshape(-1, 4))).reshape(B, 8)
        return (vals[:, 0::2] - vals[:, 1::2]) / (2 * h)

    def laplace_beltrami(self, func, V, h=1e-3):
        """Divergence-form finite-difference Laplace-Beltrami of an evaluator.

        (1/sqrt g) d_a(sqrt g ghat^{ab} d_b f) with fluxes at half-steps;
        second-order accurate.  func must accept (M, 4) arrays.
        """
        V = np.atleast_2d(np.asarray(V, dtype=float))
        B = V.shape[0]
        self.require_inside(V, margin=1.5 * h)
        # enumerate evaluation points: center, axis points, cross points
        pts = [V]
        for a in range(4):
            for s in (1.0, -1.0):
                P = V.copy()
                P[:, a] += s * h
                pts.append(P)
        half = []
        for a in range(4):
            for s in (0.5, -0.5):
                P = V.copy()
                P[:, a] += s * h
                half.append(P)
        cross = []
        for (a, s) in [(a, s) for a in range(4) for s in (0.5, -0.5)]:
            for b in range(4):
                if b == a:
                    continue
                for sb in (1.0, -1.0):
                    P = V.copy()
                    P[:, a] += s * h
                    P[:, b] += sb * h
                    cross.append(P)
        allpts = np.concatenate(pts + cross, axis=0)
        vals = np.asarray(func(allpts))
        fC = vals[:B]
        fAxis = vals[B:9 * B].reshape(8, B)           # (axis/sign, B)
        fCross = vals[9 * B:].reshape(8, 3, 2, B)     # (half, other-axis, sign, B)
        halfpts = np.concatenate(half, axis=0)
        gi_half = self.ghat_inv(halfpts).reshape(8, B, 4, 4)
        sg_half = self.sqrt_det(halfpts).reshape(8, B)
        sg_c = self.sqrt_det(V)
        lap = np.zeros(B)
        for a in range(4):
            for si, s in enumerate((1.0, -1.0)):
                k = 2 * a + si
                # gradient of f at the half point
                grad = np.empty((B, 4))
                grad[:, a] = s * (fAxis[k] - fC) / h
                ob = 0
                for b in range(4):
                    if b == a:
                        continue
                    grad[:, b] = (fCross[k, ob, 0] - fCross[k, ob, 1]) / (2 * h)
                    ob += 1
                flux = sg_half[k] * np.einsum("mab,mb->ma", gi_half[k], grad)[:, a]
                lap += s * flux / h
        return lap / sg_c

    # -- domain -----------------------------------------------------------
    def inside(self, V, margin=0.0):
        V = np.atleast_2d(np.asarray(V, dtype=float))
        return np.all(np.abs(V) <= self.spec.l_fit - margin, axis=1)

    def require_inside(self, V, margin=0.0):
        if not np.all(self.inside(V, margin)):
            raise StencilTooNarrow(
                "evaluation point (or stencil) outside the fitted chart box")

    # -- inverse map --------------------------------------------------------
    def connect(self, x, exact=True):
        """Frame coordinates v with exp_y(v^a e_a) = x, batched over rows."""
        X = np.atleast_2d(np.asarray(x, dtype=float))
        # Newton on the polynomial surrogate for the initial guess
        V = (X - self.base) @ self.frame_inv.T
        for _ in range(20):
            r = self.chart_fit(V) - X
            if np.max(np.abs(r)) < 1e-12:
                break
            J = self.chart_jacobian(V)
            V = V - np.linalg.solve(J, r[..., None])[..., 0]
        if exact:
            Vc, _, _ = connect_batch(self.metric, self.base, X,
                                     nsteps=self.spec.nsteps,
                                     initial=V @ self.frame.T)
            V = Vc @ self.frame_inv.T
        return V


def build_normal_chart(metric, base, spec=None, extra_points=None):
    """Sample exp_y and the pulled-back metric, fit surrogates, build the chart."""
    spec = spec or ChartSpec()
    y = np.asarray(base, dtype=float)
    metric.require_inside(y, "base point")
    E = metric.orthonormal_frame(y)

    # sample set: low-discrepancy box + cone nodes + radial spokes
    V = (halton_points(spec.n_halton) - 0.5) * 2 * spec.l_fit
    dirs = fibonacci_directions(spec.n_cone_dirs)
    ts = np.linspace(-spec.t_max, spec.t_max, 27)
    cone = (ts[:, None, None] * np.concatenate(
        [np.ones((len(dirs), 1)), dirs], axis=1)[None, :, :]).reshape(-1, 4)
    spokes = []
    for a in range(4):
        for s in np.linspace(-spec.l_fit, spec.l_fit, 17):
            p = np.zeros(4)
            p[a] = s
            spokes.append(p)
    parts = [V, cone, np.array(spokes)]
    if extra_points is not None:
        parts.append(np.atleast_2d(extra_points))
    V = np.concatenate(parts, axis=0)

    # batched exponential map with velocity perturbations for the Jacobian
    d = spec.jacobian_step
    shifts = np.concatenate([np.zeros((1, 4)), d * np.eye(4), -d * np.eye(4)])
    P = V @ E.T                                   # chart velocities
    states = (P[:, None, :] + shifts[None] @ E.T).reshape(-1, 4)
    ends = exp_map(metric, y, states, nsteps=spec.nsteps).reshape(len(V), 9, 4)
    X = ends[:, 0]
    J = (ends[:, 1:5] - ends[:, 5:9]) / (2 * d)    # (M, a, j): dx^j/dv^a
    gX = metric.g(X)
    ghat = np.einsum("maj,mjk,mbk->mab", J, gX, J)
    comps = np.stack([ghat[:, i, j] for (i, j) in SYM_PAIRS], axis=1)

    chart_fit = fit_surrogate(V, X, spec.degree, spec.l_fit)
    ghat_fit = fit_surrogate(V, comps, spec.degree, spec.l_fit)
    residuals = {
        "chart_map": float(np.max(chart_fit.residual)),
        "ghat": float(np.max(ghat_fit.residual)),
    }
    return NormalChart(metric, y, E, chart_fit, ghat_fit, spec, residuals)
