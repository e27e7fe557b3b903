"""Coefficient hierarchy solved along geodesic pencils from a base point.

In the normal chart of the base point the transport equations become radial
ODEs: along a ray v(s) = s*vbar, the pairing <grad Gamma, grad F> equals
4s dF/ds, so every level solves

    4 s dF/ds = -(DeltaGamma(s vbar) + 4 (level-1)) F - Q(s vbar)

with the source Q built from the previous level's (Delta + mu) field.  The
point s=0 is a regular singular point; the diagonal value is the Frobenius
constraint and the first step is an implicit Euler step, after which the
integration proceeds by RK4, uniform in log s.
"""

from dataclasses import dataclass

import numpy as np

from .errors import (CoefficientVanishes, MissingPrerequisite, OdeStepFailure,
                     StencilTooNarrow)
from .normal_chart import fibonacci_directions
from .polyfit import StageGrid, fit_surrogate, halton_points


def level_divisor(level):
    """1, 1, 2, 3, ... : the 1/(n+1)-type divisor in the source terms."""
    return max(level, 1)


@dataclass
class MuProfile:
    """The smooth function replacing the squared mass in the wave equation."""
    provenance: str          # "constant" or "dirac"
    m: float
    metric: object = None

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.provenance == "constant":
            return np.full(x.shape[:-1], self.m ** 2)
        if self.provenance == "dirac":
            return self.m ** 2 - self.metric.scalar_curvature(x) / 4.0
        raise ValueError(f"unknown mu provenance {self.provenance!r}")

    def on_chart(self, chart, V):
        return self(chart.chart_point(V))


@dataclass
class PencilSpec:
    """Sampling controls for coefficient tables on one pencil."""
    n_directions: int = 32
    t_max: float = 0.45
    t_step: float = 0.005
    degree: int = 6
    n_box: int = 2048
    sigma_steps: int = 120
    t_start: float = 1e-3      # first implicit Euler step of the singular ODE
    fd_step: float = 1e-3      # Laplacian stencil width


class CoefficientTable:
    """Sampled values of one coefficient on a pencil, with its interpolant."""

    def __init__(self, kind, level, chart, nodes, values, surrogate, mu_provenance):
        self.kind = kind                  # "X" or "Y"
        self.level = int(level)
        self.chart = chart
        self.nodes = nodes                # (M, 4) frame coordinates
        self.values = values              # (M,)
        self.surrogate = surrogate
        self.mu_provenance = mu_provenance

    @property
    def label(self):
        return f"{self.kind}{self.level}"

    def __call__(self, V):
        return self.surrogate(np.atleast_2d(V))[:, 0]

    def gradient(self, V):
        return self.surrogate.gradient(np.atleast_2d(V))[:, :, 0]

    def laplacian(self, V, h=None):
        h = h or 1e-3
        return self.chart.laplace_beltrami(self.__call__, V, h=h)

    def diagonal_value(self):
        return float(self(np.zeros((1, 4)))[0])


def laplacian_of_coefficient(table, x, h=1e-3):
    """Laplace-Beltrami of the table's interpolant at a chart point x.

    Second-order centered differences in metric-weighted divergence form.
    Raises StencilTooNarrow when the stencil leaves the fitted domain.
    """
    V = table.chart.connect(np.atleast_2d(x), exact=False)
    if not np.all(table.chart.inside(V, margin=2 * h)):
        raise StencilTooNarrow("point too close to the pencil boundary")
    return float(table.laplacian(V, h=h)[0])


def rk4_log_transport(A, Q, f0, h):
    """Advance 4s F' = -A F - Q from the implicit-Euler start, RK4 in log s.

    A, Q: (2*nsteps+1, M) stage arrays at sigma_j = log(s0) + j h/2.
    """
    if not np.all(np.isfinite(A)) or not np.all(np.isfinite(Q)):
        raise OdeStepFailure("non-finite transport coefficients along a ray")
    # implicit Euler across the singular point: 4(F1 - F0) = -A1 F1 - Q1
    F = (4.0 * f0 - Q[0]) / (4.0 + A[0])
    nsteps = (A.shape[0] - 1) // 2
    for k in range(nsteps):
        j = 2 * k
        k1 = -(A[j] * F + Q[j]) / 4.0 * h
        k2 = -(A[j + 1] * (F + 0.5 * k1) + Q[j + 1]) / 4.0 * h
        k3 = -(A[j + 1] * (F + 0.5 * k2) + Q[j + 1]) / 4.0 * h
        k4 = -(A[j + 2] * (F + k3) + Q[j + 2]) / 4.0 * h
        F = F + (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
    if not np.all(np.isfinite(F)):
        raise OdeStepFailure("transport solution lost finiteness")
    return F


def radial_transport_solve(chart, targets, level_shift, source_fn, f0,
                           s0=1e-3, nsteps=120, stage_cache=None):
    """Integrate 4s F' = -(DeltaGamma + 4*level_shift) F - Q along rays.

    targets: (M, 4) ray endpoints (s=1).  source_fn maps points (K, 4) to Q
    values.  f0 is the shared diagonal value F(0).  Returns F at s=1.
    stage_cache, when given, carries (svals, P, lap_gamma) shared by levels.
    """
    T = np.atleast_2d(np.asarray(targets, dtype=float))
    M = T.shape[0]
    sig0 = np.log(s0)
    h = -sig0 / nsteps
    if stage_cache is None:
        svals = np.exp(sig0 + 0.5 * h * np.arange(2 * nsteps + 1))
        P = (svals[:, None, None] * T[None, :, :]).reshape(-1, 4)
        lapg = chart.laplacian_gamma(P).reshape(len(svals), M)
    else:
        svals, P, lapg = stage_cache
    A = lapg + 4.0 * level_shift
    Q = np.asarray(source_fn(P)).reshape(len(svals), M)
    return rk4_log_transport(A, Q, f0, h)


class TransportTables:
    """All coefficient tables of one scenario base point, built level by level."""

    def __init__(self, chart, mu, max_level, spec=None, y0_fn=None):
        self.chart = chart
        self.mu = mu
        self.max_level = int(max_level)
        self.spec = spec or PencilSpec()
        self.y0_fn = y0_fn                   # optional Y0(V) choice, default 0
        self.X = {}
        self.Y = {}
        self.source_X = {}                   # level -> surrogate of (Delta+mu) X_level
        self.source_Y = {}
        self.fit_residuals = {}
        self._nodes = None
        self._source_nodes = None
        self._stage_cache = None

    # -- sampling design ---------------------------------------------------
    def _build_nodes(self):
        sp = self.spec
        box = (halton_points(sp.n_box, skip=64) - 0.5) * 2 * self.chart.spec.l_fit
        dirs = fibonacci_directions(sp.n_directions)
        ts = np.linspace(-sp.t_max, sp.t_max, 25)
        cone = (ts[:, None, None] * np.concatenate(
            [np.ones((len(dirs), 1)), dirs], axis=1)[None, :, :]).reshape(-1, 4)
        spokes = []
        for a in range(4):
            for s in np.linspace(-0.9 * self.chart.spec.l_fit,
                                 0.9 * self.chart.spec.l_fit, 13):
                p = np.zeros(4)
                p[a] = s
                spokes.append(p)
        nodes = np.concatenate([box, cone, np.array(spokes)], axis=0)
        # drop exact origin duplicates; the ODE start handles s=0 itself
        keep = np.max(np.abs(nodes), axis=1) > 1e-8
        self._nodes = nodes[keep]
        margin = 2.5 * sp.fd_step
        inner = np.max(np.abs(self._nodes), axis=1) <= self.chart.spec.l_fit - margin
        self._source_nodes = self._nodes[inner]

    # -- source fields -----------------------------------------------------
    def _fit_source(self, table):
        """(Delta + mu) of a table, sampled by FD and fitted."""
        V = self._source_nodes
        lap = table.laplacian(V, h=self.spec.fd_step)
        muv = self.mu.on_chart(self.chart, V)
        vals = lap + muv * table(V)
        sur = fit_surrogate(V, vals, self.spec.degree, self.chart.spec.l_fit)
        self.fit_residuals[f"S{table.kind}{table.level}"] = float(np.max(sur.residual))
        return sur

    def source_at(self, kind, level, V):
        """(Delta + mu) of coefficient `kind`/`level` from the fitted field."""
        src = self.source_X if kind == "X" else self.source_Y
        if level not in src:
            raise MissingPrerequisite(f"source field for {kind}{level} not built")
        return src[level](np.atleast_2d(V))[:, 0]

    # -- diagonal conditions ------------------------------------------------
    def diagonal_values(self, n):
        """(X_n(y,y), Y_n(y,y)) from the coefficient equations at x = y.

        Requires the (Delta+mu) fields of level n-1.  Level -1 is the van
        Vleck normalization X_{-1}(y,y) = 1.
        """
        zero = np.zeros((1, 4))
        if n == -1:
            return 1.0, None
        if (n - 1) not in self.source_X:
            raise MissingPrerequisite(f"need (Delta+mu)X_{n-1} for level {n}")
        sx = float(self.source_X[n - 1](zero)[0, 0])
        if n == 0:
            y0 = 0.0 if self.y0_fn is None else float(self.y0_fn(zero)[0])
            return -sx / 4.0, y0
        if (n - 1) not in self.source_Y:
            raise MissingPrerequisite(f"need (Delta+mu)Y_{n-1} for level {n}")
        sy = float(self.source_Y[n - 1](zero)[0, 0])
        xd = -sx / (n * (4 * n + 4))
        yd = (-sy / n - 4.0 * xd + sx / n ** 2) / (4 * n + 4)
        return xd, yd

    # -- build --------------------------------------------------------------
    def _prepare_stages(self):
        """Stage grid and DeltaGamma along all rays, shared by all levels."""
        sp = self.spec
        sig0 = np.log(sp.t_start)
        self._sigma_h = -sig0 / sp.sigma_steps
        svals = np.exp(sig0 + 0.5 * self._sigma_h * np.arange(2 * sp.sigma_steps + 1))
        self._grid = StageGrid(self._nodes, svals, self.chart.spec.degree,
                               self.chart.spec.l_fit)
        self._lapg_stages = self.chart.laplacian_gamma_stages(self._grid)

    def build(self):
        sp = self.spec
        self._build_nodes()
        self._prepare_stages()
        V = self._nodes
        L = self.chart.spec.l_fit

        # X_{-1}: the van Vleck square root, normalized to 1 on the diagonal
        vals = self.chart.vleck(V)
        sur = fit_surrogate(V, vals, sp.degree, L)
        self.fit_residuals["X-1"] = float(np.max(sur.residual))
        self.X[-1] = CoefficientTable("X", -1, self.chart, V, vals, sur,
                                      self.mu.provenance)
        self.source_X[-1] = self._fit_source(self.X[-1])

        # Y_0 is the configured free choice (default identically zero)
        y0vals = np.zeros(len(V)) if self.y0_fn is None else np.asarray(self.y0_fn(V))
        sur = fit_surrogate(V, y0vals, sp.degree, L)
        self.Y[0] = CoefficientTable("Y", 0, self.chart, V, y0vals, sur,
                                     self.mu.provenance)
        self.source_Y[0] = self._fit_source(self.Y[0])

        for lev in range(0, self.max_level + 1):
            div = level_divisor(lev)
            xdiag, ydiag = self.diagonal_values(lev)

            Qx = self._grid.eval(self.source_X[lev - 1])[:, :, 0] / div
            xv = rk4_log_transport(self._lapg_stages + 4.0 * (lev - 1), Qx,
                                   xdiag, self._sigma_h)
            sur = fit_surrogate(V, xv, sp.degree, L)
            self.fit_residuals[f"X{lev}"] = float(np.max(sur.residual))
            self.X[lev] = CoefficientTable("X", lev, self.chart, V, xv, sur,
                                           self.mu.provenance)
            if lev < self.max_level:
                self.source_X[lev] = self._fit_source(self.X[lev])

            if lev >= 1:
                Qy = (self._grid.eval(self.source_Y[lev - 1])[:, :, 0] / lev
                      + 4.0 * self._grid.eval(self.X[lev].surrogate)[:, :, 0]
                      - self._grid.eval(self.source_X[lev - 1])[:, :, 0] / lev ** 2)
                yv = rk4_log_transport(self._lapg_stages + 4.0 * (lev - 1), Qy,
                                       ydiag, self._sigma_h)
                sur = fit_surrogate(V, yv, sp.degree, L)
                self.fit_residuals[f"Y{lev}"] = float(np.max(sur.residual))
                self.Y[lev] = CoefficientTable("Y", lev, self.chart, V, yv, sur,
                                               self.mu.provenance)
                if lev < self.max_level:
                    self.source_Y[lev] = self._fit_source(self.Y[lev])
        # sources at the top level are needed by the cone hierarchy
        if self.max_level not in self.source_X:
            self.source_X[self.max_level] = self._fit_source(self.X[self.max_level])
        if self.max_level not in self.source_Y:
            self.source_Y[self.max_level] = self._fit_source(self.Y[self.max_level])
        return self

    def coefficient(self, kind, level):
        tabs = self.X if kind == "X" else self.Y
        if level not in tabs:
            raise MissingPrerequisite(f"coefficient {kind}{level} not built")
        return tabs[level]

    def check_min_coefficient(self, kind, level, V, rel=0.05):
        """Guard against division by a (near-)vanishing coefficient."""
        tab = self.coefficient(kind, level)
        vals = tab(V)
        ref = abs(tab.diagonal_value())
        if ref == 0.0 or np.min(np.abs(vals)) < rel * ref:
            i = int(np.argmin(np.abs(vals)))
            raise CoefficientVanishes(
                f"{kind}{level} vanishes along the sampled cone "
                f"(|{kind}|={np.abs(vals).min():.3e} near v={V[i]})",
                location=V[i])
        return vals
