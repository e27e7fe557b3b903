"""Least-squares polynomial surrogates in up to four variables.

Smooth fields sampled on a pencil of geodesics (chart maps, pulled-back
metric components, transport coefficients) are represented as total-degree
polynomials fitted by ordinary least squares on scaled coordinates.  The
fit residual is kept with the surrogate so downstream users can audit the
interpolation error.
"""

import numpy as np


_EXPONENT_CACHE = {}
_RECURRENCE_CACHE = {}


def monomial_exponents(degree, ndim=4):
    """All exponent tuples with total degree <= degree, in a fixed order."""
    key = (degree, ndim)
    if key in _EXPONENT_CACHE:
        return _EXPONENT_CACHE[key]
    exps = []
    def rec(prefix, remaining, dims_left):
        if dims_left == 0:
            exps.append(tuple(prefix))
            return
        for e in range(remaining + 1):
            rec(prefix + [e], remaining - e, dims_left - 1)
    rec([], degree, ndim)
    exps.sort(key=lambda e: (sum(e), e))
    arr = np.array(exps, dtype=np.int64)
    arr.setflags(write=False)
    _EXPONENT_CACHE[key] = arr
    return arr


def _recurrence(exponents):
    """(parent index, axis) per term: monomial j = monomial parent * v_axis."""
    key = exponents.tobytes()
    if key in _RECURRENCE_CACHE:
        return _RECURRENCE_CACHE[key]
    index = {tuple(e): k for k, e in enumerate(exponents)}
    parents = np.zeros(len(exponents), dtype=np.int64)
    axes = np.zeros(len(exponents), dtype=np.int64)
    for j, e in enumerate(exponents):
        if sum(e) == 0:
            parents[j] = -1
            continue
        a = int(np.nonzero(e)[0][0])
        p = list(e)
        p[a] -= 1
        parents[j] = index[tuple(p)]
        axes[j] = a
    _RECURRENCE_CACHE[key] = (parents, axes)
    return parents, axes


def _design_matrix(points, exponents, scale):
    """Monomial design matrix (M, nterms), built by the parent recurrence."""
    pts = np.asarray(points, dtype=float) / scale
    M = pts.shape[0]
    parents, axes = _recurrence(exponents)
    out = np.empty((M, len(exponents)), order="F")
    for j in range(len(exponents)):
        if parents[j] < 0:
            out[:, j] = 1.0
        else:
            np.multiply(out[:, parents[j]], pts[:, axes[j]], out=out[:, j])
    return out


class PolySurrogate:
    """A fitted vector-valued polynomial p: R^ndim -> R^ncomp."""

    def __init__(self, exponents, coeffs, scale, residual=None):
        self.exponents = exponents          # (nterms, ndim)
        self.coeffs = np.asarray(coeffs)    # (nterms, ncomp)
        self.scale = float(scale)
        self.residual = residual            # max abs fit residual per component
        self.ndim = exponents.shape[1]
        self.ncomp = self.coeffs.shape[1]

    _CHUNK = 65536   # bound design-matrix memory for large point batches

    def __call__(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        M = pts.shape[0]
        out = np.empty((M, self.ncomp))
        for lo in range(0, M, self._CHUNK):
            hi = min(lo + self._CHUNK, M)
            A = _design_matrix(pts[lo:hi], self.exponents, self.scale)
            out[lo:hi] = A @ self.coeffs
        return out

    def gradient(self, points):
        """Gradient d p_c / d v_a, shape (M, ndim, ncomp)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        M = pts.shape[0]
        out = np.zeros((M, self.ndim, self.ncomp))
        for a in range(self.ndim):
            exps = self.exponents.copy()
            fac = exps[:, a].astype(float)
            keep = fac > 0
            if not np.any(keep):
                continue
            exps = exps[keep]
            exps[:, a] -= 1
            dcoef = self.coeffs[keep] * fac[keep][:, None] / self.scale
            for lo in range(0, M, self._CHUNK):
                hi = min(lo + self._CHUNK, M)
                A = _design_matrix(pts[lo:hi], exps, self.scale)
                out[lo:hi, a, :] = A @ dcoef
        return out

    def derivative_coeffs(self, axis):
        """Surrogate for the partial derivative along one axis."""
        exps = self.exponents.copy()
        fac = exps[:, axis].astype(float)
        keep = fac > 0
        exps = exps[keep]
        exps[:, axis] -= 1
        coeffs = self.coeffs[keep] * fac[keep][:, None] / self.scale
        return PolySurrogate(exps, coeffs, self.scale)

    def derivative_in_basis(self, axis):
        """Coefficients of d/dv_axis expressed in this surrogate's own basis.

        The basis is closed under differentiation (total degree drops by one),
        so the result is a (nterms, ncomp) array usable with the same design
        matrix.
        """
        index = {tuple(e): k for k, e in enumerate(self.exponents)}
        out = np.zeros_like(self.coeffs)
        for j, e in enumerate(self.exponents):
            if e[axis] == 0:
                continue
            tgt = list(e)
            tgt[axis] -= 1
            out[index[tuple(tgt)]] += e[axis] * self.coeffs[j] / self.scale
        return out


class StageGrid:
    """Evaluate same-basis surrogates on a tensor grid {s_i * T_m} cheaply.

    Monomials factorize under point scaling, (s v)^e = s^{|e|} v^e, so one
    design matrix at the targets T serves every stage scale s_i via a
    per-term column scaling.  All surrogates of one pipeline share a basis
    (same degree and box scale), which this exploits.
    """

    def __init__(self, targets, svals, degree, scale):
        self.targets = np.atleast_2d(np.asarray(targets, dtype=float))
        self.svals = np.asarray(svals, dtype=float)
        self.exponents = monomial_exponents(degree, self.targets.shape[1])
        self.scale = float(scale)
        self.A = _design_matrix(self.targets, self.exponents, scale)
        degs = self.exponents.sum(axis=1)
        self.spow = self.svals[:, None] ** degs[None, :]    # (S, nterms)

    def _check(self, surrogate):
        if (surrogate.exponents.shape != self.exponents.shape
                or not np.array_equal(surrogate.exponents, self.exponents)
                or surrogate.scale != self.scale):
            raise ValueError("surrogate basis does not match the stage grid")

    def eval_coeffs(self, coeffs):
        """(nterms, C) coefficients -> values (S, M, C)."""
        S = len(self.svals)
        M = self.A.shape[0]
        C = coeffs.shape[1]
        out = np.empty((S, M, C))
        for i in range(S):
            out[i] = self.A @ (self.spow[i][:, None] * coeffs)
        return out

    def eval(self, surrogate):
        self._check(surrogate)
        return self.eval_coeffs(surrogate.coeffs)


def fit_surrogate(points, values, degree, scale, weights=None, chunk=200_000):
    """Fit a PolySurrogate by least squares.

    points: (M, ndim), values: (M,) or (M, ncomp).  The design matrix is
    assembled in chunks to bound memory for large sample sets.
    """
    pts = np.asarray(points, dtype=float)
    vals = np.asarray(values, dtype=float)
    if vals.ndim == 1:
        vals = vals[:, None]
    exponents = monomial_exponents(degree, pts.shape[1])
    M = pts.shape[0]
    nterm = len(exponents)
    if M < nterm:
        raise ValueError(f"need at least {nterm} samples for degree {degree}, got {M}")
    # normal equations are too ill-conditioned; accumulate the full matrix
    # chunk-wise and run one lstsq
    A = np.empty((M, nterm))
    for lo in range(0, M, chunk):
        hi = min(lo + chunk, M)
        A[lo:hi] = _design_matrix(pts[lo:hi], exponents, scale)
    # rcond cutoff keeps near-null design directions from loading noise onto
    # high-order coefficients (their gradients would amplify it)
    if weights is not None:
        w = np.sqrt(np.asarray(weights, dtype=float))[:, None]
        coeffs, *_ = np.linalg.lstsq(A * w, vals * w, rcond=1e-10)
    else:
        coeffs, *_ = np.linalg.lstsq(A, vals, rcond=1e-10)
    resid = np.max(np.abs(A @ coeffs - vals), axis=0)
    return PolySurrogate(exponents, coeffs, scale, residual=resid)


def halton_points(n, ndim=4, skip=32):
    """Deterministic low-discrepancy points in [0, 1)^ndim (Halton sequence)."""
    primes = [2, 3, 5, 7, 11, 13][:ndim]
    out = np.empty((n, ndim))
    for a, base in enumerate(primes):
        idx = np.arange(skip, skip + n, dtype=np.int64)
        col = np.zeros(n)
        f = 1.0
        i = idx.copy()
        while np.any(i > 0):
            f /= base
            col += f * (i % base)
            i //= base
        out[:, a] = col
    return out
