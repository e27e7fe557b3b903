"""Geodesic initial/boundary value solvers and pointwise world-function data.

Everything works on the chart of a MetricModel.  The boundary-value problem
is solved by shooting with a Newton iteration on the initial velocity; the
convex patch assumption makes the plain local Newton sufficient.  All heavy
paths are batched over point sets.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import (DegenerateStencil, NoConvergence, NotNull, OutOfChart,
                     SingularJacobian)

DEFAULT_NSTEPS = 128
NEWTON_TOL = 1e-10
NEWTON_MAX_ITER = 50
NULL_TOL = 1e-10


def _rhs(metric, state):
    x = state[..., :4]
    p = state[..., 4:]
    acc = metric.geodesic_acceleration(x, p)
    return np.concatenate([p, acc], axis=-1)


def integrate_geodesics(metric, x0, p0, nsteps=DEFAULT_NSTEPS, nsave=0):
    """RK4-integrate d^2x/dt^2 = -Gamma(x)[dx,dx] over t in [0, 1].

    x0, p0: (..., 4).  Returns the final state (..., 8); with nsave > 0 also
    a trajectory array (nsave+1, ..., 8) at uniform parameter values.
    """
    state = np.concatenate([np.asarray(x0, float), np.asarray(p0, float)], axis=-1)
    if getattr(metric, "flat_connection", False):
        if nsave:
            ts = np.linspace(0.0, 1.0, nsave + 1)
            traj = np.stack([np.concatenate([state[..., :4] + t * state[..., 4:],
                                             state[..., 4:]], axis=-1) for t in ts])
            return traj[-1], traj
        return np.concatenate([state[..., :4] + state[..., 4:], state[..., 4:]], axis=-1)
    h = 1.0 / nsteps
    save_every = nsteps // nsave if nsave else 0
    traj = [state.copy()] if nsave else None
    for k in range(nsteps):
        k1 = _rhs(metric, state)
        k2 = _rhs(metric, state + 0.5 * h * k1)
        k3 = _rhs(metric, state + 0.5 * h * k2)
        k4 = _rhs(metric, state + h * k3)
        state = state + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if nsave and (k + 1) % save_every == 0:
            traj.append(state.copy())
    if nsave:
        return state, np.stack(traj)
    return state


def exp_map(metric, y, velocities, nsteps=DEFAULT_NSTEPS):
    """Batched exponential map: chart points exp_y(v) for velocities (B, 4)."""
    v = np.atleast_2d(np.asarray(velocities, dtype=float))
    x0 = np.broadcast_to(np.asarray(y, float), v.shape).copy()
    out = integrate_geodesics(metric, x0, v, nsteps=nsteps)
    return out[..., :4]


def connect_batch(metric, y, targets, tol=NEWTON_TOL, max_iter=NEWTON_MAX_ITER,
                  nsteps=DEFAULT_NSTEPS, initial=None):
    """Shooting Newton for exp_y(v) = x over a batch of targets (B, 4).

    Returns (V, iterations, defects).  The Jacobian is taken by central
    finite differences in the velocity argument.
    """
    X = np.atleast_2d(np.asarray(targets, dtype=float))
    y = np.asarray(y, dtype=float)
    B = X.shape[0]
    V = (X - y).copy() if initial is None else np.atleast_2d(np.asarray(initial, float)).copy()
    iters = np.zeros(B, dtype=int)
    defects = np.full(B, np.inf)
    active = np.ones(B, dtype=bool)
    # perturbation directions: center, +/- e_a
    dirs = np.zeros((9, 4))
    for a in range(4):
        dirs[1 + 2 * a, a] = 1.0
        dirs[2 + 2 * a, a] = -1.0
    for it in range(max_iter):
        if not np.any(active):
            break
        Va = V[active]
        delta = 1e-6 * np.maximum(1.0, np.abs(Va).max(axis=1))[:, None, None]
        states = Va[:, None, :] + delta * dirs[None, :, :]
        ends = exp_map(metric, y, states.reshape(-1, 4), nsteps=nsteps).reshape(-1, 9, 4)
        r = ends[:, 0] - X[active]
        d = np.linalg.norm(r, axis=1)
        defects[active] = d
        iters[active] = it + 1
        done = d < tol
        J = np.empty((len(Va), 4, 4))
        for a in range(4):
            J[:, :, a] = (ends[:, 1 + 2 * a] - ends[:, 2 + 2 * a]) / (2 * delta[:, 0, 0][:, None])
        try:
            step = np.linalg.solve(J, r[..., None])[..., 0]
        except np.linalg.LinAlgError:
            raise SingularJacobian("exp-map Jacobian singular during shooting")
        Vnew = Va - step
        Vnew[done] = Va[done]
        V[active] = Vnew
        idx = np.where(active)[0]
        active[idx[done]] = False
    if np.any(active):
        # one final defect evaluation for reporting
        bad = np.where(active)[0]
        ends = exp_map(metric, y, V[bad], nsteps=nsteps)
        defects[bad] = np.linalg.norm(ends - X[bad], axis=1)
        if np.any(defects[bad] > tol):
            worst = float(defects[bad].max())
            raise NoConvergence(
                f"shooting Newton failed for {int((defects[bad] > tol).sum())} "
                f"target(s), worst defect {worst:.3e}",
                iterations=max_iter, defect=worst)
    return V, iters, defects


@dataclass
class GeodesicRecord:
    """A solved boundary-value geodesic with samples along [0, 1]."""
    base: np.ndarray
    target: np.ndarray
    initial_velocity: np.ndarray
    samples: list = field(repr=False)          # (t, position, tangent) triples
    causal_character: str = "unknown"
    newton_iterations: int = 0
    defect: float = np.nan


def causal_character(metric, y, v):
    g = metric.g(np.asarray(y, float))
    gamma = float(v @ g @ v)
    scale = 1.0 + float(v @ v)
    if abs(gamma) < 1e-9 * scale:
        return "null"
    return "timelike" if gamma > 0 else "spacelike"


def geodesic_connect(y, x, metric, tol=NEWTON_TOL, max_iter=NEWTON_MAX_ITER,
                     nsteps=DEFAULT_NSTEPS, nsave=16):
    """Solve the boundary-value geodesic from y to x inside the patch."""
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    metric.require_inside(y, "base")
    metric.require_inside(x, "target")
    if np.linalg.norm(x - y) > metric.patch_radius:
        raise OutOfChart("pair separation exceeds the configured convex patch")
    V, iters, defects = connect_batch(metric, y, x[None, :], tol=tol,
                                      max_iter=max_iter, nsteps=nsteps)
    v = V[0]
    _, traj = integrate_geodesics(metric, y, v, nsteps=nsteps, nsave=nsave)
    ts = np.linspace(0.0, 1.0, nsave + 1)
    samples = [(float(t), traj[i, :4].copy(), traj[i, 4:].copy())
               for i, t in enumerate(ts)]
    if not np.all(metric.contains(traj[:, :4])):
        raise OutOfChart("geodesic leaves the chart")
    return GeodesicRecord(base=y, target=x, initial_velocity=v, samples=samples,
                          causal_character=causal_character(metric, y, v),
                          newton_iterations=int(iters[0]), defect=float(defects[0]))


@dataclass
class WorldFunctionSample:
    gamma: float
    grad_gamma: np.ndarray      # vector (index raised) at x
    laplacian_gamma: float
    vleck: float


def _divergence_weights(metric, x):
    """b^k = (1/sqrt|g|) d_j(sqrt|g| g^{jk}) from the analytic dg."""
    g = metric.g(x)
    gi = metric.ginv(x)
    dg = metric.dg(x)
    term1 = -np.einsum("...ja,...jab,...bk->...k", gi, dg, gi)
    term2 = 0.5 * np.einsum("...jk,...ab,...jab->...k", gi, gi, dg)
    return term1 + term2


def world_function(y, x, metric, fd_step=1e-4, nsteps=DEFAULT_NSTEPS):
    """Squared geodesic distance with gradient, Laplacian and van Vleck factor.

    gamma > 0 timelike, < 0 spacelike.  grad_gamma = 2 * (tangent at x of the
    [0,1]-parametrized connecting geodesic).  The Laplacian is evaluated with
    a fourth-order stencil in the chart coordinates of x.
    """
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    rec = geodesic_connect(y, x, metric, nsteps=nsteps)
    gy = metric.g(y)
    gamma = float(rec.initial_velocity @ gy @ rec.initial_velocity)
    grad = 2.0 * rec.samples[-1][2]

    # fourth-order stencil for first and second chart derivatives of gamma
    h = fd_step
    offsets = []
    for a in range(4):
        for s in (1, 2, -1, -2):
            dx = np.zeros(4)
            dx[a] = s * h
            offsets.append(dx)
    stencil = x[None, :] + np.array(offsets)
    if not np.all(metric.contains(stencil)):
        raise DegenerateStencil("laplacian stencil leaves the chart")
    gi = metric.ginv(x)
    need_mixed = np.any(np.abs(gi - np.diag(np.diag(gi))) > 1e-13)
    mixed_offsets = []
    pair_list = []
    if need_mixed:
        for a in range(4):
            for b in range(a + 1, 4):
                if abs(gi[a, b]) < 1e-13:
                    continue
                pair_list.append((a, b))
                for sa in (1, 2, -1, -2):
                    for sb in (1, 2, -1, -2):
                        dx = np.zeros(4)
                        dx[a] = sa * h
                        dx[b] = sb * h
                        mixed_offsets.append(dx)
        if mixed_offsets:
            stencil = np.vstack([stencil, x[None, :] + np.array(mixed_offsets)])
    Vs, _, _ = connect_batch(metric, y, stencil, nsteps=nsteps)
    gammas = np.einsum("bi,ij,bj->b", Vs, gy, Vs)
    w1 = np.array([8.0, -1.0, -8.0, 1.0]) / (12 * h)      # +h, +2h, -h, -2h
    w2 = np.array([16.0, -1.0, 16.0, -1.0]) / (12 * h * h)
    bvec = _divergence_weights(metric, x)
    lap = 0.0
    for a in range(4):
        vals = gammas[4 * a: 4 * a + 4]
        d1 = w1 @ vals
        d2 = w2 @ vals - 30.0 / (12 * h * h) * gamma
        lap += gi[a, a] * d2 + bvec[a] * d1
    if pair_list:
        ofs = 16
        for (a, b) in pair_list:
            block = gammas[ofs: ofs + 16].reshape(4, 4)
            ofs += 16
            d2ab = w1 @ block @ w1
            lap += 2.0 * gi[a, b] * d2ab
    return WorldFunctionSample(gamma=gamma, grad_gamma=grad,
                               laplacian_gamma=float(lap),
                               vleck=van_vleck(y, x, metric, nsteps=nsteps))


def van_vleck(y, x, metric, fd_step=1e-5, nsteps=DEFAULT_NSTEPS):
    """Van Vleck-Morette square-root factor |det ghat(v)|^(-1/4).

    ghat is the metric pulled back to normal coordinates at y, evaluated by
    finite-differencing the exponential map in the velocity argument along
    an orthonormal frame.
    """
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    V, _, _ = connect_batch(metric, y, x[None, :], nsteps=nsteps)
    v = V[0]
    frame = metric.orthonormal_frame(y)
    d = fd_step * max(1.0, float(np.abs(v).max()))
    pert = np.concatenate([v[None, :] + d * frame.T, v[None, :] - d * frame.T])
    ends = exp_map(metric, y, pert, nsteps=nsteps)
    J = (ends[:4] - ends[4:]).T / (2 * d)   # columns: dx/dv^a
    gx = metric.g(x)
    ghat = J.T @ gx @ J
    det = np.linalg.det(ghat)
    if abs(det) < 1e-12:
        raise SingularJacobian("exp-map Jacobian near-singular (caustic?)")
    return float(abs(det) ** -0.25)


def project_null(metric, y, k):
    """Project k to the null cone at y and normalize g(k, u) = 1.

    u is the unit future observer; the projected direction is u + w/|w|
    with w the spatial part of k/g(k,u).
    """
    y = np.asarray(y, dtype=float)
    k = np.asarray(k, dtype=float)
    g = metric.g(y)
    u = metric.observer(y)
    alpha = float(k @ g @ u)
    if alpha <= 0:
        raise NotNull("direction is not future-pointing relative to the observer")
    w = k / alpha - u
    w2 = -float(w @ g @ w)
    if w2 <= 1e-24:
        raise NotNull("direction has no spatial part; cannot project to the cone")
    kproj = u + w / np.sqrt(w2)
    if abs(float(kproj @ g @ kproj)) > NULL_TOL:
        raise NotNull("projection failed to produce a null direction")
    return kproj


def null_cone_point(y, k, t, metric, nsteps=DEFAULT_NSTEPS):
    """Point at affine parameter t along the null geodesic from y with tangent k.

    k must be null within tolerance after projection; the normalization
    g(k, u) = 1 against the observer u fixes the parametrized family.
    """
    y = np.asarray(y, dtype=float)
    kproj = project_null(metric, y, k)
    x = exp_map(metric, y, (float(t) * kproj)[None, :], nsteps=nsteps)[0]
    if not metric.contains(x):
        raise OutOfChart("null geodesic left the chart")
    return x
