"""Regularization-function hierarchy on the light cone of a base point.

In the frame coordinates of the base chart the cone is |v^0| = |vec v| and
its generators are the rays t -> t (1, n).  Each level solves, along every
generator,

    4 t f' C = f (4 C + S_prev / d) + K,

where C is the multiplying coefficient (X_l for the 1/Gamma and log family,
Y_l for the power family), S_prev the (Delta+mu) field of the previous
coefficient, d the level divisor, and K collects every term of the level's
grouping that does not contain the unknown.  K is assembled from measured
gradients and Laplacians of the previous level's off-cone extension, so the
gauge choice (the correction field h in f_off = f_cone + Gamma h) directly
controls the solvability condition K -> 0 at the tip.

Level bookkeeping: bracket levels -1, 0, 1, ..., N; brace levels 1..N.
Brace 1 carries no transport equation (a free choice, default: a copy of
bracket 1); brace levels >= 2 are solved.
"""

from dataclasses import dataclass

import numpy as np

from .errors import (CoefficientVanishes, EnforcementFailure,
                     MissingPrerequisite, NotNull, OdeStepFailure)
from .geodesics import integrate_geodesics
from .normal_chart import fibonacci_directions
from .polyfit import StageGrid, monomial_exponents
from .transport import level_divisor


_SH_TRANSFORM_CACHE = {}


def _sh_transform(degree=3):
    """Matrix T with SH_k = sum_j T[j, k] * monomial_j (ambient polynomials).

    Real solid harmonics up to l = 3: an orthogonal-on-the-sphere direction
    basis whose k = 0 member is the isotropic mode.  Restricted to degree 3
    (16 functions), which spans all direction dependence the sampled cones
    resolve.
    """
    if degree in _SH_TRANSFORM_CACHE:
        return _SH_TRANSFORM_CACHE[degree]
    if degree != 3:
        raise ValueError("direction basis implemented for degree 3")
    exps = monomial_exponents(3, 3)
    index = {tuple(e): j for j, e in enumerate(exps)}

    def combo(terms):
        col = np.zeros(len(exps))
        for mono, c in terms.items():
            col[index[mono]] = c
        return col

    harmonics = [
        {(0, 0, 0): 1.0},                                     # l = 0
        {(1, 0, 0): 1.0}, {(0, 1, 0): 1.0}, {(0, 0, 1): 1.0},  # l = 1
        {(1, 1, 0): 1.0}, {(0, 1, 1): 1.0}, {(1, 0, 1): 1.0},
        {(2, 0, 0): 1.0, (0, 2, 0): -1.0},
        {(0, 0, 2): 3.0, (0, 0, 0): -1.0},                    # l = 2
        {(0, 0, 3): 5.0, (0, 0, 1): -3.0},
        {(1, 0, 2): 5.0, (1, 0, 0): -1.0},
        {(0, 1, 2): 5.0, (0, 1, 0): -1.0},
        {(2, 0, 1): 1.0, (0, 2, 1): -1.0},
        {(1, 1, 1): 1.0},
        {(3, 0, 0): 1.0, (1, 2, 0): -3.0},
        {(2, 1, 0): 3.0, (0, 3, 0): -1.0},                    # l = 3
    ]
    T = np.column_stack([combo(h) for h in harmonics])
    _SH_TRANSFORM_CACHE[degree] = T
    return T


def sphere_basis(normals, degree=3):
    """Direction-basis values on the sphere, (B, nb); column 0 is isotropic."""
    n = np.atleast_2d(np.asarray(normals, dtype=float))
    exps = monomial_exponents(degree, 3)
    mono = np.column_stack([np.prod(n ** e, axis=1) for e in exps])
    return mono @ _sh_transform(degree)


@dataclass
class ConeSpec:
    """Controls for the cone hierarchy of one base point."""
    n_directions: int = 32
    t_max: float = 0.45
    t_start: float = 1e-3        # implicit Euler start of the singular ODE
    sigma_steps: int = 160
    fd_step: float = 1e-3        # stencil width for measured gradients/Laplacians
    sphere_degree: int = 3
    tau_degree: int = 5          # per-sheet polynomial degree in the parameter
    h_degree: int = 3            # degree of the off-cone correction field
    enforce_window: tuple = (0.02, 0.36)
    enforce_tol: float = 1e-4
    t_clean: float = 0.02        # below this, measured E is tapered through 0
    t_grid_step: float = 0.005   # regular grid for serialized samples


class ConeFunctionTable:
    """One regularization function: cone samples, sheet fits, off-cone field."""

    def __init__(self, label, chart, directions, spec, normalization_constant=None):
        self.label = label                    # ("bracket", n) or ("brace", n)
        self.chart = chart
        self.directions = directions          # (D, 3) unit spatial directions
        self.spec = spec
        self.normalization_constant = normalization_constant
        self.sigma_t = None                   # (Nt,) positive parameter values
        self.values = None                    # (2, D, Nt): sheets (future, past)
        self.sheet_coeffs = None              # (2, nb, tau_degree)
        self.h_coeffs = None                  # smooth correction field (global)
        self._h_exps = monomial_exponents(spec.h_degree, 4)
        self.enforcement_residual = None
        self.alpha = None                     # per-direction affine rate (level -1)

    # -- representation ----------------------------------------------------
    def _fit_subset(self):
        """Roughly uniform-in-t subset of the solve grid, tip excluded.

        The log grid crowds the tip, where the start-up transient lives;
        fitting on it directly would ring through the higher polynomial
        orders.  The basis vanishes at t = 0, so the fitted representation
        still honors the diagonal condition.
        """
        t = self.sigma_t
        step = self.spec.t_grid_step
        keep = np.zeros(len(t), dtype=bool)
        keep[-1] = True
        marks = np.arange(self.spec.t_clean, t[-1] + step, step)
        keep[np.unique(np.searchsorted(t, marks).clip(0, len(t) - 1))] = True
        return np.where(keep)[0]

    def fit_sheets(self):
        """Fit f(n, tau) = sum_mp c[m,p] B_m(n) (tau/t_max)^p per cone sheet.

        Anisotropic direction modes whose whole contribution stays below the
        fit's own noise floor are indistinguishable from solver scatter and
        are zeroed: their angular Laplacian would otherwise inject amplified
        noise into the next level's source.  The floor and the dropped modes
        are recorded.
        """
        D = len(self.directions)
        nb = sphere_basis(self.directions[:1], self.spec.sphere_degree).shape[1]
        pdeg = self.spec.tau_degree
        tmax = self.spec.t_max
        sub = self._fit_subset()
        self.sheet_coeffs = np.zeros((2, nb, pdeg))
        self.mode_floor = []
        for sheet, sgn in ((0, 1.0), (1, -1.0)):
            # spatial direction of a past-sheet point is minus the generator's
            Bs = sphere_basis(sgn * self.directions, self.spec.sphere_degree)
            tau = sgn * self.sigma_t[sub] / tmax
            tp = np.stack([tau ** p for p in range(1, pdeg + 1)], axis=1)
            A = np.einsum("db,tp->dtbp", Bs, tp).reshape(
                D * len(tau), nb * pdeg)
            rhs = self.values[sheet][:, sub].reshape(-1)
            sol, *_ = np.linalg.lstsq(A, rhs, rcond=None)
            C = sol.reshape(nb, pdeg)
            resid = A @ sol - rhs
            floor = max(10.0 * float(np.sqrt(np.mean(resid ** 2))), 1e-13)
            dropped = []
            for m in range(1, nb):
                amp = float(np.max(np.abs(tp @ C[m])))
                if amp <= floor:
                    C[m] = 0.0
                    dropped.append(m)
            self.mode_floor.append((floor, dropped))
            self.sheet_coeffs[sheet] = C
        return self

    def cone_value(self, normals, tau):
        """f on the cone for spatial directions (B, 3) and signed parameter."""
        normals = np.atleast_2d(np.asarray(normals, dtype=float))
        tau = np.asarray(tau, dtype=float) / self.spec.t_max
        B = sphere_basis(normals, self.spec.sphere_degree)
        pdeg = self.spec.tau_degree
        tp = np.stack([tau ** p for p in range(1, pdeg + 1)], axis=1)
        out = np.empty(len(normals))
        fut = tau >= 0
        for sheet, mask in ((0, fut), (1, ~fut)):
            if np.any(mask):
                out[mask] = np.einsum("mb,bp,mp->m", B[mask],
                                      self.sheet_coeffs[sheet], tp[mask])
        return out

    def h_value(self, V):
        if self.h_coeffs is None:
            return np.zeros(len(np.atleast_2d(V)))
        Vs = np.atleast_2d(np.asarray(V, dtype=float)) / self.chart.spec.l_fit
        cols = np.stack([np.prod(Vs ** e, axis=1) for e in self._h_exps], axis=1)
        return cols @ self.h_coeffs

    def cone_part_derivatives(self, V):
        """Value, gradient and Hessian of the cone part F(n(v), tau(v)).

        All derivatives are analytic: tau-polynomials and ambient monomial
        derivatives of the direction basis, chained through n(v) = vec v / w.
        Returns (f, df (B,4), d2f (B,4,4)).
        """
        V = np.atleast_2d(np.asarray(V, dtype=float))
        B = len(V)
        tau = V[:, 0]
        w = np.linalg.norm(V[:, 1:], axis=1)
        w = np.maximum(w, 1e-14)
        n = V[:, 1:] / w[:, None]
        tmax = self.spec.t_max
        exps = monomial_exponents(self.spec.sphere_degree, 3)
        nb = len(exps)
        pdeg = self.spec.tau_degree
        # ambient basis values / gradients / Hessians at n
        Bv = np.stack([np.prod(n ** e, axis=1) for e in exps], axis=1)
        Bg = np.zeros((B, nb, 3))
        Bh = np.zeros((B, nb, 3, 3))
        for k, e in enumerate(exps):
            for a in range(3):
                if e[a] == 0:
                    continue
                sh = np.array(e)
                sh[a] -= 1
                Bg[:, k, a] = e[a] * np.prod(n ** sh, axis=1)
                for b in range(3):
                    if sh[b] == 0:
                        continue
                    sh2 = sh.copy()
                    sh2[b] -= 1
                    Bh[:, k, a, b] = e[a] * sh[b] * np.prod(n ** sh2, axis=1)
        # tau polynomials and their derivatives per sheet
        ts = tau / tmax
        pw = np.stack([ts ** p for p in range(1, pdeg + 1)], axis=1)
        dpw = np.stack([p * ts ** (p - 1) / tmax for p in range(1, pdeg + 1)],
                       axis=1)
        d2pw = np.stack([p * (p - 1) * ts ** max(p - 2, 0) / tmax ** 2
                         for p in range(1, pdeg + 1)], axis=1)
        d2pw[:, 0] = 0.0
        sheet = (tau < 0).astype(int)
        T = _sh_transform(self.spec.sphere_degree)
        C = np.einsum("jk,mkp->mjp", T, self.sheet_coeffs[sheet])  # monomial rep
        phi = np.einsum("mbp,mp->mb", C, pw)             # F = phi_m B_m
        dphi = np.einsum("mbp,mp->mb", C, dpw)
        d2phi = np.einsum("mbp,mp->mb", C, d2pw)
        f = np.einsum("mb,mb->m", phi, Bv)
        dF_tau = np.einsum("mb,mb->m", dphi, Bv)
        d2F_tau = np.einsum("mb,mb->m", d2phi, Bv)
        gradN = np.einsum("mb,mba->ma", phi, Bg)         # ambient dF/dn
        gradN_tau = np.einsum("mb,mba->ma", dphi, Bg)
        hessN = np.einsum("mb,mbac->mac", phi, Bh)
        # chain rule: P = I - n n^T, dn_k/dv_i = P_ik / w, dw/dv_i = n_i
        P = np.eye(3)[None] - np.einsum("mi,mj->mij", n, n)
        Pg = np.einsum("mij,mj->mi", P, gradN)           # tangential gradient
        df = np.zeros((B, 4))
        df[:, 0] = dF_tau
        df[:, 1:] = Pg / w[:, None]
        d2f = np.zeros((B, 4, 4))
        d2f[:, 0, 0] = d2F_tau
        mixed = np.einsum("mij,mj->mi", P, gradN_tau) / w[:, None]
        d2f[:, 0, 1:] = mixed
        d2f[:, 1:, 0] = mixed
        PHP = np.einsum("mia,mab,mjb->mij", P, hessN, P)
        ndotg = np.einsum("mi,mi->m", n, gradN)
        spatial = (PHP - P * ndotg[:, None, None]
                   - np.einsum("mj,mi->mij", n, Pg)
                   - np.einsum("mi,mj->mij", n, Pg)) / (w ** 2)[:, None, None]
        d2f[:, 1:, 1:] = spatial
        return f, df, d2f

    def h_part_derivatives(self, V):
        """Value, gradient and Hessian of the correction term Gamma(v) h(v)."""
        V = np.atleast_2d(np.asarray(V, dtype=float))
        B = len(V)
        if self.h_coeffs is None:
            return np.zeros(B), np.zeros((B, 4)), np.zeros((B, 4, 4))
        L = self.chart.spec.l_fit
        Vs = V / L
        exps = self._h_exps
        hv = np.stack([np.prod(Vs ** e, axis=1) for e in exps], axis=1) @ self.h_coeffs
        dh = np.zeros((B, 4))
        d2h = np.zeros((B, 4, 4))
        for k, e in enumerate(exps):
            ck = self.h_coeffs[k]
            if ck == 0.0:
                continue
            for a in range(4):
                if e[a] == 0:
                    continue
                sh = np.array(e)
                sh[a] -= 1
                dh[:, a] += ck * e[a] * np.prod(Vs ** sh, axis=1) / L
                for b in range(4):
                    if sh[b] == 0:
                        continue
                    sh2 = sh.copy()
                    sh2[b] -= 1
                    d2h[:, a, b] += (ck * e[a] * sh[b]
                                     * np.prod(Vs ** sh2, axis=1) / L ** 2)
        from .metrics import ETA
        gam = self.chart.gamma(V)
        dgam = 2.0 * V @ ETA
        val = gam * hv
        grad = hv[:, None] * dgam + gam[:, None] * dh
        hess = (2.0 * ETA[None] * hv[:, None, None]
                + np.einsum("ma,mb->mab", dgam, dh)
                + np.einsum("ma,mb->mab", dh, dgam)
                + gam[:, None, None] * d2h)
        return val, grad, hess

    def derivatives(self, V):
        """Analytic value/gradient/Hessian of the full off-cone extension."""
        f, df, d2f = self.cone_part_derivatives(V)
        hv, dhv, d2hv = self.h_part_derivatives(V)
        return f + hv, df + dhv, d2f + d2hv

    def __call__(self, V):
        """Off-cone evaluator f_off(v) = f_cone(n(v), tau(v)) + Gamma(v) h(v).

        tau is the frame time component: it restricts to the affine parameter
        on the cone and keeps pure-time separations at their flat value.  The
        unit spatial direction has a fixed fallback on the time axis.
        """
        V = np.atleast_2d(np.asarray(V, dtype=float))
        tau = V[:, 0]
        w = np.linalg.norm(V[:, 1:], axis=1)
        normals = np.zeros((len(V), 3))
        ok = w > 1e-14
        normals[ok] = V[ok, 1:] / w[ok, None]
        normals[~ok] = np.array([0.0, 0.0, 1.0])
        vals = self.cone_value(normals, tau)
        if self.h_coeffs is not None:
            vals = vals + self.chart.gamma(V) * self.h_value(V)
        return vals

    def generator_points(self, tvals):
        """v = t (1, n_d) for all directions, shape (D, len(t), 4)."""
        k = np.concatenate([np.ones((len(self.directions), 1)), self.directions],
                           axis=1)
        return np.asarray(tvals)[None, :, None] * k[:, None, :]

    def copy_with_label(self, label):
        out = ConeFunctionTable(label, self.chart, self.directions, self.spec,
                                self.normalization_constant)
        out.sigma_t = self.sigma_t
        out.values = None if self.values is None else self.values.copy()
        out.sheet_coeffs = (None if self.sheet_coeffs is None
                            else self.sheet_coeffs.copy())
        out.alpha = self.alpha
        return out


@dataclass
class KSourceTable:
    """Assembled source of one level's transport equation on cone samples."""
    level: tuple
    t_values: np.ndarray                 # (Nt,) positive abscissae
    values: np.ndarray                   # (2, D, Nt) per sheet
    tip_value: float = np.nan            # max |K| at the first abscissa
    enforcement_residual: float = np.nan


def anchored_affine_rates(chart, directions, t_ref, t_reach=0.7, nsave=64):
    """Per-generator rescale fixing one affine parametrization per geodesic.

    Each null geodesic is anchored where the time function crosses t_ref and
    its affine rate is normalized against the observer there.  Both
    orderings of a point pair then share the parametrization of their common
    geodesic, which makes the lowest regularization function antisymmetric
    by construction.
    """
    metric = chart.metric
    y = chart.base
    D = len(directions)
    k_frame = np.concatenate([np.ones((D, 1)), directions], axis=1)
    k_chart = k_frame @ chart.frame.T
    phi0 = float(metric.time_function(y)) - t_ref
    if abs(phi0) < 1e-14 and getattr(metric, "flat_connection", False):
        return np.ones(D)
    ts = np.linspace(-t_reach, t_reach, 2 * nsave + 1)
    x0 = np.broadcast_to(y, (D, 4)).copy()
    _, traj_p = integrate_geodesics(metric, x0, t_reach * k_chart, nsave=nsave)
    _, traj_m = integrate_geodesics(metric, x0, -t_reach * k_chart, nsave=nsave)
    pos = np.concatenate([traj_m[::-1][:-1, :, :4], traj_p[:, :, :4]], axis=0)
    tf = metric.time_function(pos) - t_ref               # (2 nsave + 1, D)
    tstar = np.empty(D)
    for d in range(D):
        col = tf[:, d]
        if col[0] > 0 or col[-1] < 0:
            raise NotNull(
                "generator does not cross the anchor time slice in the patch")
        tstar[d] = np.interp(0.0, col, ts)
    # one Newton polish of the crossing parameter
    dt = 1e-5
    stacked = (np.concatenate([tstar, tstar + dt, tstar - dt])[:, None]
               * np.tile(k_chart, (3, 1)))
    ends = integrate_geodesics(metric, np.broadcast_to(y, (3 * D, 4)).copy(),
                               stacked)
    tq = metric.time_function(ends[:, :4])
    dphi = (tq[D:2 * D] - tq[2 * D:]) / (2 * dt)
    tstar = tstar - (tq[:D] - t_ref) / dphi
    # tangent and observer at the anchor point
    small = np.abs(tstar) < 1e-9
    scale = np.where(small, 1.0, tstar)
    ends = integrate_geodesics(metric, np.broadcast_to(y, (D, 4)).copy(),
                               scale[:, None] * k_chart)
    q = ends[:, :4]
    tangent = ends[:, 4:] / scale[:, None]
    q[small] = y
    tangent[small] = k_chart[small]
    u = metric.observer(q)
    gq = metric.g(q)
    rate = np.einsum("di,dij,dj->d", tangent, gq, u)
    if np.any(rate <= 0):
        raise NotNull("anchored tangent not future-directed")
    return 1.0 / rate


class ConeHierarchy:
    """All regularization-function tables of one base point."""

    def __init__(self, tables, spec=None, c=1.0, t_ref=None, brace1="bracket1"):
        self.tables = tables                 # TransportTables (chart, mu, X, Y)
        self.chart = tables.chart
        self.spec = spec or ConeSpec()
        self.c = float(c)
        self.t_ref = (float(tables.chart.base_time) if t_ref is None
                      else float(t_ref))
        self.brace1 = brace1
        self.directions = fibonacci_directions(self.spec.n_directions)
        self.bracket = {}
        self.brace = {}
        self.K = {}
        self._E = {}            # projected E per level, (S, 2D) at all stages
        self._Eproj = {}        # projection coefficients, (4, 2D)
        self._K_stage = {}      # K at all stage abscissae
        self._Kp = {}           # dK/dt (signed) at the solve rows
        self._f_st = {}         # ODE history at solve rows, (R, 2D)
        self._fp_st = {}        # df/dt (signed) at solve rows
        self._stage_t = None
        self._grid = None

    # -- stage machinery ----------------------------------------------------
    def _prepare_stages(self):
        sp = self.spec
        self._sigma_h = np.log(sp.t_max / sp.t_start) / sp.sigma_steps
        self._stage_t = sp.t_start * np.exp(
            0.5 * self._sigma_h * np.arange(2 * sp.sigma_steps + 1))
        k = np.concatenate([np.ones((len(self.directions), 1)), self.directions],
                           axis=1)
        self._targets = np.concatenate([k, -k], axis=0)   # future / past
        self._grid = StageGrid(self._targets, self._stage_t,
                               self.chart.spec.degree, self.chart.spec.l_fit)

    def _stage_eval(self, surrogate):
        """(S, 2D) values at t_j * (+-k_d)."""
        return self._grid.eval(surrogate)[:, :, 0]

    def _stage_points(self):
        return self._stage_t[:, None, None] * self._targets[None, :, :]

    def _sheet_stage_values(self, ftable):
        P = self._stage_points().reshape(-1, 4)
        return ftable(P).reshape(-1, 2 * len(self.directions))

    def _to_sheet_layout(self, stage_vals):
        """(S, 2D) -> (2, D, S) with the non-half stages kept by the caller."""
        D = len(self.directions)
        return np.stack([stage_vals[:, :D].T, stage_vals[:, D:].T])

    # -- level -1 ------------------------------------------------------------
    def solve_f_minus1(self):
        """f = c * alpha(n) * t: the anchored affine parameter along generators.

        Linear in t per generator by construction; vanishes at the tip; sign
        follows the time function through the future/past sheet split.
        """
        sp = self.spec
        tab = ConeFunctionTable(("bracket", -1), self.chart, self.directions,
                                sp, normalization_constant=self.c)
        tab.alpha = anchored_affine_rates(self.chart, self.directions, self.t_ref)
        tab.sigma_t = self._stage_t[::2]
        vals = self.c * tab.alpha[:, None] * tab.sigma_t[None, :]
        tab.values = np.stack([vals, -vals])
        tab.fit_sheets()
        self.bracket[-1] = tab
        return tab

    # -- gauge enforcement -----------------------------------------------------
    def _h_monomials(self, ftable, V):
        """Values and gradients of the h basis at points V (scaled box coords)."""
        L = self.chart.spec.l_fit
        Vs = np.atleast_2d(V) / L
        exps = ftable._h_exps
        vals = np.stack([np.prod(Vs ** e, axis=1) for e in exps], axis=1)
        grads = np.zeros((len(Vs), 4, len(exps)))
        for k, e in enumerate(exps):
            for a in range(4):
                if e[a] == 0:
                    continue
                shifted = np.array(e)
                shifted[a] -= 1
                grads[:, a, k] = e[a] * np.prod(Vs ** shifted, axis=1) / L
        return vals, grads

    def measure_E_fd(self, ftable, coeff, P):
        """E = 2<grad f, grad C> + (Delta f) C by finite differences at P.

        Diagnostic path: independent of the analytic feed used in the
        assembly, hence usable to cross-check it.
        """
        gradF = self.chart.fd_gradient(ftable, P, h=self.spec.fd_step)
        lapF = self.chart.laplace_beltrami(ftable, P, h=self.spec.fd_step)
        gradC = coeff.gradient(P)
        return (2.0 * self.chart.pair_gradients(gradF, gradC, P)
                + lapF * coeff(P))

    # -- solve-row helpers -------------------------------------------------
    def _solve_rows(self):
        """Points, signed parameters and generator tangents at non-half stages."""
        P = self._stage_points()[::2]                  # (R, 2D, 4)
        D = len(self.directions)
        sign = np.concatenate([np.ones(D), -np.ones(D)])
        t_signed = self._stage_t[::2][:, None] * sign[None, :]
        k = np.concatenate([np.ones((D, 1)), self.directions], axis=1)
        khat = np.concatenate([k, k], axis=0)          # dv/dt on both sheets
        return P, t_signed, khat, sign

    def _dir_deriv(self, surrogate):
        """d/dt of a fitted field along generators at the solve rows, (R, 2D)."""
        P, _, khat, _ = self._solve_rows()
        R = P.shape[0]
        g = surrogate.gradient(P.reshape(-1, 4))[:, :, 0].reshape(R, -1, 4)
        return np.einsum("rma,ma->rm", g, khat)

    def _fpp(self, label):
        """d^2 f/dt^2 at the solve rows from the differentiated transport ODE.

        4 t f' C = f B + K  ==>
        f'' = (f'(B - 4C - 4t C') + f B' + K') / (4 t C),
        with all ingredient derivatives analytic or produced by the previous
        levels' equations.  Exact at solver accuracy; no refit curvature.
        """
        kind, l = label
        if label == ("bracket", -1):
            return np.zeros_like(self._f_st[label])
        if kind == "brace" and l == 1:
            if self.brace1 == "zero":
                return np.zeros_like(self._f_st[label])
            return self._fpp(("bracket", 1))
        tt = self.tables
        _, t_signed, _, _ = self._solve_rows()
        rows = slice(0, len(self._stage_t), 2)
        if kind == "bracket":
            C = self._stage_eval(tt.X[l].surrogate)[rows]
            Cp = self._dir_deriv(tt.X[l].surrogate)
            S = self._stage_eval(tt.source_X[l - 1])[rows]
            Sp = self._dir_deriv(tt.source_X[l - 1])
            B = 4.0 * C + S / level_divisor(l)
            Bp = 4.0 * Cp + Sp / level_divisor(l)
        else:
            C = self._stage_eval(tt.Y[l].surrogate)[rows]
            Cp = self._dir_deriv(tt.Y[l].surrogate)
            SX = self._stage_eval(tt.source_X[l - 1])[rows]
            SXp = self._dir_deriv(tt.source_X[l - 1])
            SY = self._stage_eval(tt.source_Y[l - 1])[rows]
            SYp = self._dir_deriv(tt.source_Y[l - 1])
            Xl = self._stage_eval(tt.X[l].surrogate)[rows]
            Xlp = self._dir_deriv(tt.X[l].surrogate)
            B = 4.0 * C + 4.0 * Xl + SY / l - SX / l ** 2
            Bp = 4.0 * Cp + 4.0 * Xlp + SYp / l - SXp / l ** 2
        f = self._f_st[label]
        fp = self._fp_st[label]
        K = self._K_stage[label][rows]
        Kp = self._Kp[label]
        fpp = (fp * (B - 4.0 * C - 4.0 * t_signed * Cp) + f * Bp + Kp) \
            / (4.0 * t_signed * C)
        # the numerator is O(t) analytically but carries a flat noise floor,
        # so the quotient picks up 1/t noise; f'' is smooth along the
        # generator, so project it onto low-degree polynomials (clean rows)
        t = self._stage_t[::2]
        ok = t >= self.spec.t_clean
        basis = (t[:, None] / self.spec.t_max) ** np.arange(0, 4)[None, :]
        coef, *_ = np.linalg.lstsq(basis[ok], fpp[ok], rcond=None)
        return basis @ coef

    def _E_feed(self, ftable, coeff):
        """E = 2<grad f, grad C> + (Delta f) C at the solve rows.

        The cone part's derivatives are analytic from the sheet
        representation, except the generator-radial first and second
        derivatives which come from the transport ODE itself; the
        correction-field part is polynomial.  This keeps refit curvature
        noise out of the next level's source.
        """
        P, _, _, _ = self._solve_rows()
        Pf = P.reshape(-1, 4)
        f, df, d2f = ftable.cone_part_derivatives(Pf)
        label = ftable.label
        if label in self._fp_st:
            df[:, 0] = self._fp_st[label].reshape(-1)
            d2f[:, 0, 0] = self._fpp(label).reshape(-1)
        hv, dhv, d2hv = ftable.h_part_derivatives(Pf)
        df = df + dhv
        d2f = d2f + d2hv
        gi = self.chart.ghat_inv(Pf)
        b = self.chart.divergence_weights(Pf)
        lap = np.einsum("mab,mab->m", gi, d2f) + np.einsum("ma,ma->m", b, df)
        pairing = np.einsum("mab,ma,mb->m", gi, df, coeff.gradient(Pf))
        E = 2.0 * pairing + lap * coeff(Pf)
        return E.reshape(P.shape[0], -1)

    def _h_columns(self, ftable, coeff, P):
        """Exact on-cone E contribution of f -> f + Gamma * (basis monomial).

        On the cone Gamma = 0 and (grad Gamma)^a = 2 v^a exactly, so
        E_k = 4 M_k (v . dC) + (M_k DeltaGamma + 4 v . dM_k) C.
        """
        vals, grads = self._h_monomials(ftable, P)
        Cv = coeff(P)
        dC = coeff.gradient(P)
        vdotC = np.einsum("ma,ma->m", P, dC)
        vdotM = np.einsum("ma,mak->mk", P, grads)
        lg = self.chart.laplacian_gamma(P)
        return (4.0 * vals * vdotC[:, None]
                + (vals * lg[:, None] + 4.0 * vdotM) * Cv[:, None])

    def extend_off_cone(self, ftable, coeff):
        """Fit the correction field h so the measured E vanishes on the cone.

        E is affine in the h coefficients with exactly computable on-cone
        columns; a weighted least-squares fit over a window of cone samples
        minimizes it, emphasizing the tip where the solvability condition
        must hold.  The post-fit E, projected onto its smooth per-generator
        structure, is what feeds the next level's source.
        """
        sp = self.spec
        ftable.h_coeffs = None
        P, _, _, _ = self._solve_rows()
        Pf = P.reshape(-1, 4)
        E0 = self._E_feed(ftable, coeff).reshape(-1)
        cols = self._h_columns(ftable, coeff, Pf)
        tmag = np.abs(Pf[:, 0])
        sel = (tmag >= sp.enforce_window[0]) & (tmag <= sp.enforce_window[1])
        w = 1.0 / (0.02 + tmag[sel])
        sol, *_ = np.linalg.lstsq(cols[sel] * w[:, None], -E0[sel] * w,
                                  rcond=None)
        ftable.h_coeffs = sol
        E = E0 + cols @ sol
        resid = float(np.max(np.abs(E[sel])))
        ftable.enforcement_residual = resid
        scale = max(1.0, float(np.max(np.abs(coeff(Pf[sel])))))
        if resid > sp.enforce_tol * scale:
            raise EnforcementFailure(
                f"gauge enforcement stalled at {resid:.3e} for {ftable.label}",
                residual=resid, tolerance=sp.enforce_tol)
        E = E.reshape(P.shape[0], -1)
        # The post-enforcement E is smooth along each generator and vanishes
        # at the tip; projecting each generator's profile onto low-degree
        # polynomials through zero removes the 1/t-amplified tip noise before
        # the profile feeds the next level's source.
        t = self._stage_t[::2]
        rows = t >= sp.t_clean
        tau = (t / sp.t_max)[:, None] ** np.arange(1, 5)[None, :]
        sol_p, *_ = np.linalg.lstsq(tau[rows], E[rows], rcond=None)
        self._Eproj[ftable.label] = sol_p
        tau_all = (self._stage_t / sp.t_max)[:, None] ** np.arange(1, 5)[None, :]
        self._E[ftable.label] = tau_all @ sol_p
        return ftable

    def _Eproj_deriv(self, label):
        """d/dt (signed) of the projected E at the solve rows, (R, 2D)."""
        sp = self.spec
        sol_p = self._Eproj[label]
        _, _, _, sign = self._solve_rows()
        t = self._stage_t[::2]
        powers = np.arange(1, 5)
        dtau = powers[None, :] * (t[:, None] / sp.t_max) ** (powers - 1)[None, :] \
            / sp.t_max
        return (dtau @ sol_p) * sign[None, :]

    # -- K assembly ---------------------------------------------------------------
    def assemble_K(self, level):
        """Source of the level's transport equation at all stage points.

        Every term of the level's grouping that does not contain the unknown
        function; transport combinations of already-solved functions are
        eliminated through their own equations.
        """
        kind, l = level
        tt = self.tables
        rows = slice(0, len(self._stage_t), 2)
        if kind == "bracket":
            if (l - 1) not in self.bracket:
                raise MissingPrerequisite(f"bracket level {l - 1} not solved")
            d = level_divisor(l)
            E = self._E[("bracket", l - 1)]
            SX = self._stage_eval(tt.source_X[l - 1])
            fprev = self._sheet_stage_values(self.bracket[l - 1])
            K = -(E + fprev * SX) / d
            # d/dt of the source at the solve rows, for the next level's
            # second-derivative recursion
            Kp = -(self._Eproj_deriv(("bracket", l - 1))
                   + self._fp_st[("bracket", l - 1)] * SX[rows]
                   + self._f_st[("bracket", l - 1)]
                   * self._dir_deriv(tt.source_X[l - 1])) / d
        else:
            n = l - 2
            if (l - 1) not in self.brace:
                raise MissingPrerequisite(f"brace level {l - 1} not available")
            EY = self._E[("brace", l - 1)]
            EX = self._E[("bracket", l - 1)]
            SX = self._stage_eval(tt.source_X[l - 1])
            SY = self._stage_eval(tt.source_Y[l - 1])
            Xl = self._stage_eval(tt.X[l].surrogate)
            fbr = self._sheet_stage_values(self.bracket[l])
            fprevX = self._sheet_stage_values(self.bracket[l - 1])
            fprevY = self._sheet_stage_values(self.brace[l - 1])
            Kbr = self._K_stage[("bracket", l)]
            # the solved bracket level enters through its transport
            # combination 2(<grad Gamma, grad f> - 2 f) X = f S / l + K
            Tbr = fbr * SX / l + Kbr
            K = -((n + 1) * EY + EX
                  + (2 * n + 3) * Tbr
                  + 4 * (n + 1) * l * fbr * Xl
                  + (n + 1) * fprevY * SY
                  - (n + 1) * fbr * SX / l
                  + (fprevX - fbr) * SX) / ((n + 1) * l)
            SXr, SYr, Xlr = SX[rows], SY[rows], Xl[rows]
            SXp = self._dir_deriv(tt.source_X[l - 1])
            SYp = self._dir_deriv(tt.source_Y[l - 1])
            Xlp = self._dir_deriv(tt.X[l].surrogate)
            fbr_r = self._f_st[("bracket", l)]
            fbr_p = self._fp_st[("bracket", l)]
            fpX = self._f_st[("bracket", l - 1)]
            fpXp = self._fp_st[("bracket", l - 1)]
            fpY = self._f_st[("brace", l - 1)]
            fpYp = self._fp_st[("brace", l - 1)]
            Tbr_p = (fbr_p * SXr + fbr_r * SXp) / l + self._Kp[("bracket", l)]
            Kp = -((n + 1) * self._Eproj_deriv(("brace", l - 1))
                   + self._Eproj_deriv(("bracket", l - 1))
                   + (2 * n + 3) * Tbr_p
                   + 4 * (n + 1) * l * (fbr_p * Xlr + fbr_r * Xlp)
                   + (n + 1) * (fpYp * SYr + fpY * SYp)
                   - (n + 1) * (fbr_p * SXr + fbr_r * SXp) / l
                   + (fpXp - fbr_p) * SXr
                   + (fpX - fbr_r) * SXp) / ((n + 1) * l)
        self._K_stage[level] = K
        self._Kp[level] = Kp
        tab = KSourceTable(level=level, t_values=self._stage_t[::2].copy(),
                           values=self._to_sheet_layout(K[::2].copy()),
                           tip_value=float(np.max(np.abs(K[0]))))
        self.K[level] = tab
        return tab

    # -- level solves ----------------------------------------------------------------
    def solve_f_level(self, level):
        """Unique solution with f(0) = 0 of the level's cone transport ODE."""
        kind, l = level
        tt = self.tables
        sp = self.spec
        K = self._K_stage[level]
        if kind == "bracket":
            C = self._stage_eval(tt.X[l].surrogate)
            SX = self._stage_eval(tt.source_X[l - 1])
            Bc = 4.0 * C + SX / level_divisor(l)
        else:
            C = self._stage_eval(tt.Y[l].surrogate)
            SX = self._stage_eval(tt.source_X[l - 1])
            SY = self._stage_eval(tt.source_Y[l - 1])
            Xl = self._stage_eval(tt.X[l].surrogate)
            Bc = 4.0 * C + 4.0 * Xl + SY / l - SX / l ** 2
        ref = float(np.abs(C[0]).max())
        if ref < 1e-12 or np.min(np.abs(C)) < 0.05 * ref:
            j = np.unravel_index(int(np.argmin(np.abs(C))), C.shape)
            where = self._stage_points()[j[0], j[1]]
            raise CoefficientVanishes(
                f"coefficient multiplying {kind} level {l} vanishes along the "
                f"sampled cone (min |C| = {np.abs(C).min():.3e})", location=where)
        denom0 = 4.0 * C[0] - Bc[0]
        if np.any(np.abs(denom0) < 1e-12):
            raise OdeStepFailure("degenerate start denominator at the cone tip")
        F = K[0] / denom0
        h = self._sigma_h
        hist = [F.copy()]
        for k in range(sp.sigma_steps):
            j = 2 * k
            k1 = (F * Bc[j] + K[j]) / (4.0 * C[j]) * h
            k2 = ((F + 0.5 * k1) * Bc[j + 1] + K[j + 1]) / (4.0 * C[j + 1]) * h
            k3 = ((F + 0.5 * k2) * Bc[j + 1] + K[j + 1]) / (4.0 * C[j + 1]) * h
            k4 = ((F + k3) * Bc[j + 2] + K[j + 2]) / (4.0 * C[j + 2]) * h
            F = F + (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
            if not np.all(np.isfinite(F)):
                raise OdeStepFailure(f"cone transport lost finiteness at {level}")
            hist.append(F.copy())
        sol = np.stack(hist)                        # (nsteps+1, 2D)
        tab = ConeFunctionTable(level, self.chart, self.directions, sp)
        tab.sigma_t = self._stage_t[::2]
        tab.values = self._to_sheet_layout(sol)
        tab.fit_sheets()
        # generator-radial derivative from the equation itself, exact at
        # solver accuracy; consumed by the next level's source recursion
        _, t_signed, _, _ = self._solve_rows()
        rows = slice(0, len(self._stage_t), 2)
        self._f_st[level] = sol
        self._fp_st[level] = (sol * Bc[rows] + K[rows]) / (4.0 * t_signed
                                                           * C[rows])
        if kind == "bracket":
            self.bracket[l] = tab
        else:
            self.brace[l] = tab
        return tab

    # -- the full build -----------------------------------------------------------
    def build(self, max_level=2):
        self._prepare_stages()
        self.solve_f_minus1()
        tab = self.bracket[-1]
        _, t_signed, _, _ = self._solve_rows()
        alpha2 = np.concatenate([tab.alpha, tab.alpha])
        self._f_st[("bracket", -1)] = self.c * alpha2[None, :] * t_signed
        self._fp_st[("bracket", -1)] = (self.c * alpha2[None, :]
                                        * np.ones_like(t_signed))
        for l in range(0, max_level + 1):
            self.extend_off_cone(self.bracket[l - 1], self.tables.X[l - 1])
            self.assemble_K(("bracket", l))
            self.solve_f_level(("bracket", l))
        if max_level >= 2:
            if self.brace1 == "bracket1":
                self.brace[1] = self.bracket[1].copy_with_label(("brace", 1))
                self._f_st[("brace", 1)] = self._f_st[("bracket", 1)]
                self._fp_st[("brace", 1)] = self._fp_st[("bracket", 1)]
            elif self.brace1 == "zero":
                tab = self.bracket[1].copy_with_label(("brace", 1))
                tab.values = np.zeros_like(tab.values)
                tab.fit_sheets()
                self.brace[1] = tab
                self._f_st[("brace", 1)] = np.zeros_like(self._f_st[("bracket", 1)])
                self._fp_st[("brace", 1)] = np.zeros_like(self._f_st[("bracket", 1)])
            else:
                raise ValueError(f"unknown brace-1 choice {self.brace1!r}")
            for l in range(2, max_level + 1):
                self.extend_off_cone(self.brace[l - 1], self.tables.Y[l - 1])
                self.assemble_K(("brace", l))
                self.solve_f_level(("brace", l))
        return self

    # -- diagnostics ---------------------------------------------------------------
    def all_tables(self):
        out = {}
        for l, tab in sorted(self.bracket.items()):
            out[("bracket", l)] = tab
        for l, tab in sorted(self.brace.items()):
            out[("brace", l)] = tab
        return out


def check_antisymmetry(forward, reverse_map):
    """Max of |f(x, y) + f(y, x)| per level over independently solved pairs.

    forward: the ConeHierarchy at base y.  reverse_map: list of entries
    (hierarchy at base x_i, v_forward, v_reverse) where v_forward locates
    x_i in y's frame and v_reverse locates y in x_i's frame.
    """
    report = {}
    for label, tab in forward.all_tables().items():
        worst = 0.0
        for rev, v_fwd, v_rev in reverse_map:
            rtab = rev.all_tables().get(label)
            if rtab is None:
                continue
            a = float(tab(np.atleast_2d(v_fwd))[0])
            b = float(rtab(np.atleast_2d(v_rev))[0])
            worst = max(worst, abs(a + b))
        report[label] = worst
    return report
