"""RBF-kernel support vector machine trained with sequential minimal optimization.

Used to separate the scattered trajectory points of the two innermost lanes;
the zero level set of the decision function approximates the line dividing the
two directions of travel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInput, NotConverged

_EPS = 1e-12


@dataclass(frozen=True)
class SvmModel:
    """A trained RBF SVM: f(p) = sum_k coef_k * exp(-gamma ||p - sv_k||^2) + b."""

    support_points: np.ndarray   # (m, 2)
    dual_coefficients: np.ndarray  # (m,) alpha_k * y_k
    bias: float
    gamma: float
    c: float

    def decision_value(self, point) -> float:
        return float(decision_values(self, np.asarray(point, dtype=float)[None, :])[0])


def decision_values(model: SvmModel, points: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Vectorized decision function over an (n, 2) array of query points."""
    points = np.asarray(points, dtype=float)
    out = np.empty(len(points))
    sv = model.support_points
    for lo in range(0, len(points), chunk):
        q = points[lo:lo + chunk]
        d2 = ((q[:, None, :] - sv[None, :, :]) ** 2).sum(axis=2)
        out[lo:lo + chunk] = np.exp(-model.gamma * d2) @ model.dual_coefficients + model.bias
    return out


class _KernelCache:
    """On-demand RBF kernel rows with a bounded cache.

    Keeps memory bounded for large training sets; SMO only ever needs the two
    rows of the updated pair per step.
    """

    def __init__(self, points: np.ndarray, gamma: float, max_rows: int = 2048):
        self.points = points
        self.gamma = gamma
        self.sq = (points ** 2).sum(axis=1)
        self.max_rows = max_rows
        self._rows = {}

    def row(self, i: int) -> np.ndarray:
        r = self._rows.get(i)
        if r is None:
            d2 = self.sq[i] + self.sq - 2.0 * (self.points @ self.points[i])
            np.maximum(d2, 0.0, out=d2)
            r = np.exp(-self.gamma * d2)
            if len(self._rows) >= self.max_rows:
                self._rows.pop(next(iter(self._rows)))
            self._rows[i] = r
        return r


def fit_rbf_svm(points, labels, c: float = 10.0, gamma: float = 0.01,
                tol: float = 1e-6, max_iter: int = 200000, seed: int = 0) -> SvmModel:
    """Solve the soft-margin dual with Platt's SMO.

    ``tol`` bounds the admissible KKT violation; points with alpha > 0 become
    the support set of the returned model.
    """
    X = np.asarray(points, dtype=float)
    y = np.asarray(labels, dtype=float)
    if X.ndim != 2 or X.shape[1] != 2:
        raise ValueError("points must be (n, 2)")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise ValueError("labels must be +/-1")
    if len(np.unique(y)) < 2 or np.sum(y > 0) < 1 or np.sum(y < 0) < 1:
        raise DegenerateInput("need at least one point per class")
    n = len(X)
    rng = np.random.default_rng(seed)
    kern = _KernelCache(X, gamma)
    alpha = np.zeros(n)
    b = 0.0
    # error cache: E_i = f(x_i) - y_i, maintained incrementally
    errors = -y.copy()

    def take_step(i1, i2):
        nonlocal b, errors
        if i1 == i2:
            return False
        a1, a2 = alpha[i1], alpha[i2]
        y1, y2 = y[i1], y[i2]
        e1, e2 = errors[i1], errors[i2]
        s = y1 * y2
        if s > 0:
            lo, hi = max(0.0, a1 + a2 - c), min(c, a1 + a2)
        else:
            lo, hi = max(0.0, a2 - a1), min(c, c + a2 - a1)
        if hi - lo < _EPS:
            return False
        row1 = kern.row(i1)
        row2 = kern.row(i2)
        k11, k12, k22 = row1[i1], row1[i2], row2[i2]
        eta = k11 + k22 - 2.0 * k12
        if eta <= _EPS:
            # only happens for (near-)duplicate points under an RBF kernel
            return False
        a2_new = a2 + y2 * (e1 - e2) / eta
        a2_new = min(max(a2_new, lo), hi)
        if abs(a2_new - a2) < _EPS * (a2_new + a2 + _EPS):
            return False
        a1_new = a1 + s * (a2 - a2_new)
        d1 = y1 * (a1_new - a1)
        d2 = y2 * (a2_new - a2)
        # threshold chosen so a non-bound pivot lands exactly on its margin
        b1 = b - e1 - d1 * k11 - d2 * k12
        b2 = b - e2 - d1 * k12 - d2 * k22
        if 0.0 < a1_new < c:
            b_new = b1
        elif 0.0 < a2_new < c:
            b_new = b2
        else:
            b_new = 0.5 * (b1 + b2)
        alpha[i1], alpha[i2] = a1_new, a2_new
        errors += d1 * row1 + d2 * row2 + (b_new - b)
        b = b_new
        errors[i1] = decision_at(i1) - y[i1]
        errors[i2] = decision_at(i2) - y[i2]
        return True

    def decision_at(i):
        active = alpha > 0
        if not np.any(active):
            return b
        return float((alpha[active] * y[active]) @ kern.row(i)[active]) + b

    def examine(i2):
        y2, a2, e2 = y[i2], alpha[i2], errors[i2]
        r2 = e2 * y2
        if (r2 < -tol and a2 < c) or (r2 > tol and a2 > 0):
            non_bound = np.flatnonzero((alpha > 0) & (alpha < c))
            if len(non_bound) > 1:
                i1 = int(non_bound[np.argmax(np.abs(errors[non_bound] - e2))])
                if take_step(i1, i2):
                    return True
            for i1 in rng.permutation(non_bound):
                if take_step(int(i1), i2):
                    return True
            for i1 in rng.permutation(n):
                if take_step(int(i1), i2):
                    return True
        return False

    steps = 0
    examine_all = True
    while steps < max_iter:
        changed = 0
        if examine_all:
            idx = range(n)
        else:
            idx = np.flatnonzero((alpha > 0) & (alpha < c))
        for i2 in idx:
            changed += examine(int(i2))
            steps += 1
            if steps >= max_iter:
                break
        if examine_all:
            if changed == 0:
                break
            examine_all = False
        elif changed == 0:
            examine_all = True
    else:
        raise NotConverged(max_iter)

    support = alpha > 0
    return SvmModel(
        support_points=X[support].copy(),
        dual_coefficients=(alpha * y)[support].copy(),
        bias=float(b),
        gamma=gamma,
        c=c,
    )


def dual_objective(points, labels, alpha, gamma) -> float:
    """W(alpha) = sum(alpha) - 1/2 sum_ij alpha_i alpha_j y_i y_j K_ij."""
    X = np.asarray(points, dtype=float)
    y = np.asarray(labels, dtype=float)
    a = np.asarray(alpha, dtype=float)
    d2 = ((X[:, None, :] - X[None, :, :]) ** 2).sum(axis=2)
    K = np.exp(-gamma * d2)
    ay = a * y
    return float(a.sum() - 0.5 * ay @ K @ ay)


def model_dual_objective(model: SvmModel) -> float:
    """Dual objective restricted to the stored support set."""
    sv = model.support_points
    coef = model.dual_coefficients
    d2 = ((sv[:, None, :] - sv[None, :, :]) ** 2).sum(axis=2)
    K = np.exp(-model.gamma * d2)
    return float(np.abs(coef).sum() - 0.5 * coef @ K @ coef)
