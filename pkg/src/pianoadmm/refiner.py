"""Note-length refinement with binary states and strictly coupled gains.

The activity is split as ``A = B * G`` with ``B`` a binary Markov-state
tensor and ``G`` constant along every ``(l+1, n+1)`` diagonal. The augmented
Lagrangian of

    D(V, X1) + chi_Mb(X5) + chi_Tb(X6)
    s.t. X1 = P X2, X2 = X3 * X4, X3 = X5, X4 = X6

is minimized directly, one block of variables at a time, followed by dual
ascent on the four constraints.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.sparse.linalg import LinearOperator, cg

from . import prox
from .tensors import pattern_matrix

log = logging.getLogger(__name__)

CG_TOL = 1e-8
CG_MAXITER = 200
# K*L above which the X2 system is solved matrix-free instead of by Cholesky
DIRECT_SOLVE_LIMIT = 4096


class RefinerError(RuntimeError):
    """The inner linear solve of the X2 update failed."""


@dataclass
class RefineOptions:
    iters: int = 200
    rho: float = 1.0
    log_every: int = 1

    def __post_init__(self):
        if self.rho <= 0 or self.iters < 0:
            raise ValueError("need rho > 0 and iters >= 0")


@dataclass
class RefineReport:
    iterations: int
    residuals: list = field(default_factory=list)

    def to_dict(self):
        return {"iterations": self.iterations, "residuals": self.residuals}


def diagonal_ids(L, N):
    """``(L, N)`` array labelling each entry with its diagonal ``n - l``."""
    return np.arange(N)[None, :] - np.arange(L)[:, None]


def _diagonal_reduce(A, ufunc):
    K, L, N = A.shape
    ids = (diagonal_ids(L, N) + (L - 1)).ravel()
    n_diag = N + L - 1
    out = np.empty((K, L, N))
    for k in range(K):
        if ufunc is np.maximum:
            acc = np.full(n_diag, -np.inf)
            np.maximum.at(acc, ids, A[k].ravel())
        else:
            acc = np.bincount(ids, weights=A[k].ravel(), minlength=n_diag)
            acc = acc / np.bincount(ids, minlength=n_diag)
        out[k] = acc[ids].reshape(L, N)
    return out


def diagonal_max(A):
    """Replace every entry with the maximum over its diagonal."""
    return _diagonal_reduce(np.asarray(A, dtype=np.float64), np.maximum)


def diagonal_mean(A):
    """Replace every entry with the mean over the in-range part of its diagonal."""
    return _diagonal_reduce(np.asarray(A, dtype=np.float64), np.add)


def init_bg(A, a_m):
    """Binary support and diagonal-max gains from an activity tensor."""
    A = np.asarray(A, dtype=np.float64)
    B = (A > a_m).astype(np.float64)
    G = diagonal_max(A) if A.size else A.copy()
    return B, G


def project_gain(u, a_m):
    """Projection onto diagonal-constant tensors with values in {0} U [a_m, inf)."""
    return prox.prox_threshold(diagonal_mean(u), a_m)


def in_gain_set(G, a_m):
    G = np.asarray(G, dtype=np.float64)
    if G.size == 0:
        return True
    if np.any(diagonal_max(G) != G) or np.any(diagonal_max(-G) != -G):
        return False
    return bool(np.all((G == 0) | (G >= a_m)))


def in_binary_markov_set(B, mc):
    B = np.asarray(B, dtype=np.float64)
    if not np.all((B == 0) | (B == 1)):
        return False
    x, states = prox.binary_markov_project(B, mc)
    return bool(np.array_equal(x, B)
                and all(prox.is_valid_sequence(s, mc) for s in states))


def repair_binary(B0, G, mc):
    """Nearest valid binary tensor to ``B0``, indifferent where ``G`` is zero.

    Entries with zero gain do not affect ``B * G``, so they get the neutral
    target 1/2 and the state path is free to place its windows there.
    """
    target = np.where(G > 0, B0, 0.5)
    return prox.binary_markov_project(target, mc)[0]


def factor_update(X2, other, target, b2, b_self, rho):
    """Minimizer over one Hadamard factor with the other factor held fixed.

    For the ``X3`` update ``other = X4`` and ``target = X5``; for ``X4`` the
    roles are ``X3`` and ``X6``. The denominator ``other**2 + 1`` is >= 1.
    """
    return (b2 * other / rho + other * X2 - b_self / rho + target) / (other * other + 1.0)


class _GramSolver:
    """Solves ``(P^T P + I) X = R`` for all frames at once."""

    def __init__(self, Pm):
        self.Pm = Pm
        kl = Pm.shape[1]
        self.factor = None
        if kl <= DIRECT_SOLVE_LIMIT:
            self.factor = cho_factor(Pm.T @ Pm + np.eye(kl))

    def __call__(self, R, x0):
        if self.factor is not None:
            return cho_solve(self.factor, R)
        kl, N = R.shape
        Pm = self.Pm
        op = LinearOperator((kl * N, kl * N), dtype=np.float64,
                            matvec=lambda v: (Pm.T @ (Pm @ v.reshape(kl, N))
                                              + v.reshape(kl, N)).ravel())
        x, info = cg(op, R.ravel(), x0=x0.ravel(), rtol=CG_TOL, atol=0.0,
                     maxiter=CG_MAXITER)
        if info != 0:
            raise RefinerError("X2 conjugate-gradient solve did not converge "
                               "in %d iterations" % CG_MAXITER)
        return x.reshape(kl, N)


def refine(V, P, B0, G0, a_m, mc, opts=None):
    """Alternate the six block updates and the four dual ascents.

    Returns ``(B, G, report)`` with ``B = X5`` in the binary Markov set and
    ``G = X6`` diagonal-constant and thresholded.
    """
    opts = opts or RefineOptions()
    if not a_m > 0:
        raise ValueError("a_m must be positive")
    V = np.asarray(getattr(V, "data", V), dtype=np.float64)
    Pm = P.matrix if hasattr(P, "matrix") else pattern_matrix(P)
    B0 = np.asarray(B0, dtype=np.float64)
    G0 = np.asarray(G0, dtype=np.float64)
    K, L, N = B0.shape
    if G0.shape != B0.shape or Pm.shape[1] != K * L or V.shape != (Pm.shape[0], N):
        raise ValueError("inconsistent shapes for V, P, B0, G0")
    if mc.L != L:
        raise ValueError("Markov config L=%d, tensors L=%d" % (mc.L, L))
    rho = opts.rho
    kl = K * L

    def synth(X):
        return Pm @ X.reshape(kl, N)

    X6 = G0.copy() if in_gain_set(G0, a_m) else project_gain(G0, a_m)
    X5 = B0.copy() if in_binary_markov_set(B0, mc) else repair_binary(B0, X6, mc)
    X3, X4 = X5.copy(), X6.copy()
    X2 = X3 * X4
    X1 = synth(X2)
    b1 = np.zeros_like(X1)
    b2 = np.zeros_like(X2)
    b3 = np.zeros_like(X3)
    b4 = np.zeros_like(X4)
    gram = _GramSolver(Pm)
    report = RefineReport(0)

    for it in range(opts.iters):
        X1 = prox.prox_kl(V, synth(X2), b1, rho)
        rhs = Pm.T @ (X1 + b1 / rho) + (X3 * X4 - b2 / rho).reshape(kl, N)
        X2 = gram(rhs, X2.reshape(kl, N)).reshape(K, L, N)
        X3 = factor_update(X2, X4, X5, b2, b3, rho)
        X4 = factor_update(X2, X3, X6, b2, b4, rho)
        X5 = prox.binary_markov_project(X3 + b3 / rho, mc)[0]
        X6 = project_gain(X4 + b4 / rho, a_m)

        r1 = X1 - synth(X2)
        r2 = X2 - X3 * X4
        r3 = X3 - X5
        r4 = X4 - X6
        b1 += rho * r1
        b2 += rho * r2
        b3 += rho * r3
        b4 += rho * r4
        if not all(np.all(np.isfinite(b)) for b in (b1, b2, b3, b4)):
            raise RefinerError("non-finite values at refinement iteration %d" % it)
        report.iterations += 1
        if opts.log_every and (it % opts.log_every == 0 or it == opts.iters - 1):
            report.residuals.append({"iteration": it,
                                     "X1-PX2": float(np.linalg.norm(r1)),
                                     "X2-X3X4": float(np.linalg.norm(r2)),
                                     "X3-X5": float(np.linalg.norm(r3)),
                                     "X4-X6": float(np.linalg.norm(r4))})
    return X5, X6, report
