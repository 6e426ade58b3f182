"""Consensus-form ADMM over the activity tensor.

Every objective term ``f_i(C_i A)`` gets a local copy ``x_i`` of ``C_i A``;
the activity tensor ``A`` acts as the central collector. ``C_i`` is the
dictionary synthesis for the KL term, the diagonal difference operator for
the TDV term and the identity otherwise.

Two collector updates are available. ``"linearized"`` is the averaged
inexact-Uzawa step with step bound ``mu``. ``"exact"`` minimizes the
augmented Lagrangian over ``A`` with warm-started conjugate gradients and
uses per-term penalties ``rho * w_i``; the KL weight is per entry and
follows the local curvature ``1/V`` of the data term.

Duals are stored in scaled form ``u_i = beta_i / (rho * w_i)``.
"""

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg

from . import prox
from .tensors import (PatternDictionary, pattern_matrix, spectral_norm_estimate,
                      tdv, tdv_adjoint)

log = logging.getLogger(__name__)

KL, NONNEG, L1, TDV, MARKOV, THRESH = "KL", "NONNEG", "L1", "TDV", "MARKOV", "THRESH"
TERM_ORDER = (KL, NONNEG, L1, TDV, MARKOV, THRESH)
CONVEX_TERMS = frozenset((KL, NONNEG, L1, TDV))

RHO_TAU = 2.0
RHO_BALANCE = 10.0
RHO_RANGE = 1e4
DIVERGENCE_WINDOW = 20
# exact collector: penalty weights relative to rho, and the inner CG budget
KL_WEIGHT = 3.0
KL_FLOOR = 0.1
REG_WEIGHT = 6e-4
CG_TOL = 1e-10
CG_MAXITER = 200
CG_STALL = 1e-4
# largest K*L*K*L*N for which per-frame block inverses are formed
BLOCK_PRECOND_LIMIT = 2 ** 24


class DivergenceError(RuntimeError):
    """Non-finite values appeared during the iteration."""


@dataclass(frozen=True)
class ObjectiveSpec:
    terms: frozenset
    lambda1: float = 0.1
    lambda2: float = 0.4
    a_m: float = None
    markov: prox.MarkovConfig = None

    def __post_init__(self):
        terms = frozenset(self.terms)
        object.__setattr__(self, "terms", terms)
        unknown = terms - set(TERM_ORDER)
        if unknown:
            raise ValueError("unknown terms: %s" % sorted(unknown))
        if KL not in terms or NONNEG not in terms:
            raise ValueError("KL and NONNEG terms are always required")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("regularization weights must be non-negative")
        if THRESH in terms and not (self.a_m and self.a_m > 0):
            raise ValueError("THRESH term needs a_m > 0")
        if MARKOV in terms and self.markov is None:
            raise ValueError("MARKOV term needs a MarkovConfig")

    @property
    def ordered_terms(self):
        return [t for t in TERM_ORDER if t in self.terms]

    @property
    def is_convex(self):
        return self.terms <= CONVEX_TERMS

    def convex_part(self):
        return replace(self, terms=self.terms & CONVEX_TERMS)

    @classmethod
    def named(cls, name, lambda1=0.1, lambda2=0.4, a_m=None, markov=None):
        """One of the nested objectives ``h_b`` ... ``h_f`` by letter."""
        chain = {"b": (KL, NONNEG), "c": (L1,), "d": (TDV,), "e": (MARKOV,),
                 "f": (THRESH,)}
        letters = "bcdef"
        name = name[-1]
        if name not in letters:
            raise ValueError("objective must be one of h_b..h_f")
        terms = []
        for letter in letters[:letters.index(name) + 1]:
            terms.extend(chain[letter])
        return cls(frozenset(terms), lambda1, lambda2, a_m, markov)


@dataclass
class SolveOptions:
    iters: int = 300
    rho: float = 1.0
    mu_mode: str = "relaxed"
    relax: float = 0.2
    collector: str = "exact"
    kl_weight: float = KL_WEIGHT
    reg_weight: float = REG_WEIGHT
    seed: int = 0
    adaptive_rho: bool = True
    normalize: bool = True
    tol: float = None
    log_every: int = 1
    warm_start: np.ndarray = None

    def __post_init__(self):
        if self.mu_mode not in ("safe", "relaxed"):
            raise ValueError("mu_mode must be 'safe' or 'relaxed'")
        if self.collector not in ("exact", "linearized"):
            raise ValueError("collector must be 'exact' or 'linearized'")
        if self.kl_weight <= 0 or self.reg_weight <= 0:
            raise ValueError("penalty weights must be positive")
        if self.rho <= 0 or self.iters < 0:
            raise ValueError("need rho > 0 and iters >= 0")


@dataclass
class AdmmState:
    x: dict
    u: dict
    A: np.ndarray
    rho: float
    mu: float
    iteration: int = 0
    primal: list = field(default_factory=list)
    dual: list = field(default_factory=list)
    weights: dict = field(default_factory=dict)
    cache: dict = field(default_factory=dict, repr=False)

    def penalty(self, term):
        """Effective penalty ``rho * w_term`` (scalar or per entry)."""
        return self.rho * self.weights.get(term, 1.0)

    @property
    def beta(self):
        return {t: self.penalty(t) * u for t, u in self.u.items()}


@dataclass
class SolveReport:
    A: np.ndarray
    A_raw: np.ndarray
    primal: list
    dual: list
    iterations: int
    objective: list
    rho: list
    stages: list = field(default_factory=list)
    mu_mode: str = "relaxed"

    def to_dict(self):
        return {"iterations": self.iterations, "primal": self.primal,
                "dual": self.dual, "objective": self.objective, "rho": self.rho,
                "stages": self.stages, "mu_mode": self.mu_mode}

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)


class Operators:
    """The linear maps ``C_i`` and their adjoints for one problem size."""

    def __init__(self, P, shape):
        self.Pm = P.matrix if isinstance(P, PatternDictionary) else pattern_matrix(P)
        self.shape = tuple(shape)
        K, L, N = self.shape
        if self.Pm.shape[1] != K * L:
            raise ValueError("dictionary has %d patterns, activity has %d"
                             % (self.Pm.shape[1], K * L))
        self._norms = {}

    def synth(self, A):
        K, L, N = self.shape
        return self.Pm @ A.reshape(K * L, N)

    def synth_adj(self, X):
        K, L, N = self.shape
        return (self.Pm.T @ X).reshape(K, L, N)

    def apply(self, term, A):
        if term == KL:
            return self.synth(A)
        if term == TDV:
            return tdv(A)
        return A

    def adjoint(self, term, Y):
        if term == KL:
            return self.synth_adj(Y)
        if term == TDV:
            return tdv_adjoint(Y, self.shape)
        return Y

    def norm(self, term, seed=0):
        """Spectral norm of ``C_term`` (cached)."""
        if term not in self._norms:
            if term == KL:
                K, L, _ = self.shape
                Pm = self.Pm
                val = spectral_norm_estimate(
                    lambda a: Pm @ a.reshape(K * L, 1),
                    lambda y: (Pm.T @ y).reshape(K, L, 1),
                    (K, L, 1), iters=50, seed=seed)
            elif term == TDV:
                _, L, N = self.shape
                val = spectral_norm_estimate(
                    tdv, lambda d: tdv_adjoint(d, (1, L, N)), (1, L, N),
                    iters=50, seed=seed)
            else:
                val = 1.0
            self._norms[term] = val
        return self._norms[term]


def step_bound(ops, spec, rho, mode="relaxed", relax=0.2):
    """``mu`` for the linearized collector update."""
    cnorm = max(ops.norm(t) for t in spec.ordered_terms)
    factor = 1.0 if mode == "safe" else relax
    return factor * rho * cnorm ** 2


def x_update(term, state, ops, V, spec):
    A, rho = state.A, state.penalty(term)
    CA = ops.apply(term, A)
    if term == KL:
        return prox.prox_kl(V, CA, rho * state.u[term], rho)
    v = CA - state.u[term]
    if term == NONNEG:
        return prox.prox_nonneg(v)
    if term == L1:
        return prox.prox_l1(v, spec.lambda1 / rho)
    if term == TDV:
        return prox.prox_tdv(v, spec.lambda2 / rho)
    if term == MARKOV:
        return prox.markov_project(v, spec.markov)[0]
    if term == THRESH:
        return prox.prox_threshold(v, spec.a_m)
    raise ValueError(term)


def collector_update(state, spec, ops):
    """Averaged linearized step ``A - (rho/mu) C_i^T (C_i A - x_i - u_i)``."""
    if state.mu <= 0:
        raise ValueError("mu must be positive")
    terms = spec.ordered_terms
    step = np.zeros_like(state.A)
    for t in terms:
        r = ops.apply(t, state.A) - state.x[t] - state.u[t]
        step += ops.adjoint(t, r)
    return state.A - (state.rho / state.mu) * step / len(terms)


class CollectorSolveError(RuntimeError):
    """The inner conjugate-gradient solve did not converge."""


def _diag_tdv_gram(shape):
    """Diagonal of ``Delta^T Delta``: how many differences touch each entry."""
    K, L, N = shape
    d = np.zeros((K, L, N))
    d[:, :-1, :-1] += 1.0
    d[:, 1:, 1:] += 1.0
    return d


def _preconditioner(pen, terms, ops):
    """Per-frame block inverse of the collector system, or its diagonal.

    Each frame block is ``P^T R_n P`` plus the identity-like terms, with
    ``Delta^T Delta`` replaced by its diagonal. Large blocks fall back to
    Jacobi scaling.
    """
    K, L, N = ops.shape
    kl = K * L
    M = ops.Pm.shape[0]
    shift = np.zeros((K, L, N))
    for t in terms:
        if t == TDV:
            shift += pen[t] * _diag_tdv_gram(ops.shape)
        elif t != KL:
            shift += pen[t]
    w = np.broadcast_to(pen[KL], (M, N)) if KL in pen else np.zeros((M, N))
    if kl * kl * N <= BLOCK_PRECOND_LIMIT:
        Pm = ops.Pm
        blocks = np.einsum("mi,mn,mj->nij", Pm, w, Pm)
        idx = np.arange(kl)
        blocks[:, idx, idx] += shift.reshape(kl, N).T
        inv = np.linalg.inv(blocks)

        def apply(r):
            z = np.matmul(inv, r.reshape(kl, N).T[:, :, None])
            return z[:, :, 0].T.reshape(K, L, N)
        return apply
    diag = ((ops.Pm ** 2).T @ w).reshape(K, L, N) + shift
    diag = np.maximum(diag, 1e-300)
    return lambda r: r / diag


def exact_collector_update(state, spec, ops, tol=CG_TOL, maxiter=CG_MAXITER):
    """Minimize the augmented Lagrangian over ``A`` by preconditioned CG.

    Solves ``sum_i C_i^T R_i C_i A = sum_i C_i^T R_i (x_i + u_i)`` where
    ``R_i`` is the (diagonal) penalty of term ``i``, warm-started at the
    current collector and preconditioned per frame.
    """
    terms = spec.ordered_terms
    pen = {t: state.penalty(t) for t in terms}
    rhs = np.zeros_like(state.A)
    for t in terms:
        rhs += ops.adjoint(t, pen[t] * (state.x[t] + state.u[t]))

    def H(A):
        out = np.zeros_like(A)
        for t in terms:
            out += ops.adjoint(t, pen[t] * ops.apply(t, A))
        return out

    key = ("precond", state.rho)
    if state.cache.get("key") != key:
        state.cache = {"key": key, "apply": _preconditioner(pen, terms, ops)}
    precond = state.cache["apply"]

    bnorm = np.linalg.norm(rhs)
    if bnorm == 0:
        return np.zeros_like(state.A)
    shape = state.A.shape
    size = state.A.size
    Hop = LinearOperator((size, size), dtype=np.float64,
                         matvec=lambda v: H(v.reshape(shape)).ravel())
    Mop = LinearOperator((size, size), dtype=np.float64,
                         matvec=lambda v: precond(v.reshape(shape)).ravel())
    a, _ = cg(Hop, rhs.ravel(), x0=state.A.ravel(), rtol=tol, atol=0.0,
              maxiter=maxiter, M=Mop)
    A = a.reshape(shape)
    rel = np.linalg.norm(rhs - H(A)) / bnorm
    if not rel <= CG_STALL:
        raise CollectorSolveError("collector CG stalled at relative residual %.2e"
                                  % rel)
    return A


def dual_update(state, spec, ops, A_new):
    """Dual ascent; returns ``(primal_norm, dual_norm)`` for this iteration."""
    pr = 0.0
    du = 0.0
    dA = A_new - state.A
    for t in spec.ordered_terms:
        CA = ops.apply(t, A_new)
        r = state.x[t] - CA
        state.u[t] = state.u[t] + r
        pr += float(np.vdot(r, r))
        d = state.penalty(t) * ops.apply(t, dA)
        du += float(np.vdot(d, d))
    return np.sqrt(pr), np.sqrt(du)


def adapt_rho(state, primal_norm, dual_norm, rho0, tau=RHO_TAU,
              balance=RHO_BALANCE):
    """Residual balancing; rescales the scaled duals when ``rho`` changes."""
    old = state.rho
    new = old
    if primal_norm > balance * dual_norm:
        new = old * tau
    elif dual_norm > balance * primal_norm:
        new = old / tau
    new = min(max(new, rho0 / RHO_RANGE), rho0 * RHO_RANGE)
    if new != old:
        for t in state.u:
            state.u[t] = state.u[t] * (old / new)
        state.mu *= new / old
        state.rho = new
    return state.rho


def kl_divergence(V, Q, floor=1e-300):
    """Generalized KL divergence ``sum V log(V/Q) - V + Q``."""
    V = np.asarray(V)
    Q = np.maximum(np.asarray(Q), floor)
    pos = V > 0
    out = np.sum(Q) - np.sum(V)
    out += np.sum(V[pos] * np.log(V[pos] / Q[pos]))
    return float(out)


def objective_terms(V, A, ops, spec):
    """Finite part of the objective evaluated at ``max(A, 0)``."""
    Ap = np.maximum(A, 0.0)
    vals = {KL: kl_divergence(V, ops.synth(Ap))}
    if L1 in spec.terms:
        vals[L1] = spec.lambda1 * float(np.abs(Ap).sum())
    if TDV in spec.terms:
        vals[TDV] = spec.lambda2 * float(np.abs(tdv(Ap)).sum())
    vals["total"] = sum(vals.values())
    return vals


def objective(V, A, P, spec):
    ops = Operators(P, np.shape(A))
    return objective_terms(V, A, ops, spec)["total"]


def initial_activity(V, P, shape, seed):
    K, L, N = shape
    Pd = np.asarray(getattr(P, "data", P))
    scale = float(np.mean(V)) / (K * L * max(float(np.mean(Pd)), 1e-300))
    rng = np.random.default_rng(seed)
    return rng.uniform(0.0, max(scale, 0.0), size=shape)


def feasible_readout(A, spec):
    """Map the collector onto the constraint sets of the non-convex terms."""
    out = np.maximum(A, 0.0)
    if MARKOV in spec.terms:
        out = prox.markov_project(out, spec.markov)[0]
    if THRESH in spec.terms:
        out = prox.prox_threshold(out, spec.a_m)
    return out


def penalty_weights(V, terms, opts):
    """Per-term penalty weights for the exact collector.

    The KL weight tracks the curvature ``1/V`` of the data term, floored at
    a fraction of the mean so silent bins do not dominate; the remaining
    terms share one weight on the same ``1/V`` scale.
    """
    vmean = float(np.mean(V)) if V.size else 0.0
    if not vmean > 0:
        vmean = 1.0
    weights = {}
    for t in terms:
        if t == KL:
            weights[t] = opts.kl_weight / np.maximum(V, KL_FLOOR * vmean)
        else:
            weights[t] = opts.reg_weight / vmean
    return weights


def _check_finite(arr, what, it):
    if not np.all(np.isfinite(arr)):
        raise DivergenceError("non-finite %s at iteration %d" % (what, it))


def solve(V, P, spec, opts=None, shape=None):
    """Run the consensus ADMM loop for ``opts.iters`` iterations.

    ``V`` is a spectrogram (or its data), ``P`` a pattern dictionary. With
    ``opts.normalize`` the activity is rescaled internally so the synthesis
    operator has unit norm; the objective and its minimizers are unchanged.
    """
    opts = opts or SolveOptions()
    V = np.asarray(getattr(V, "data", V), dtype=np.float64)
    Pd = np.asarray(getattr(P, "data", P), dtype=np.float64)
    M, L, K = Pd.shape
    if V.shape[0] != M:
        raise ValueError("spectrogram has %d bins, dictionary %d" % (V.shape[0], M))
    N = V.shape[1]
    if not np.all(np.isfinite(V)) or np.any(V < 0):
        raise ValueError("spectrogram must be finite and non-negative")
    shape = (K, L, N)
    if spec.markov is not None and spec.markov.L != L:
        raise ValueError("Markov config L=%d, dictionary L=%d" % (spec.markov.L, L))

    ops0 = Operators(Pd, shape)
    scale = ops0.norm(KL) if opts.normalize else 1.0
    if not scale > 0:
        scale = 1.0
    ops = Operators(Pd / scale, shape)
    ops._norms[KL] = ops0.norm(KL) / scale
    inner = replace(spec, lambda1=spec.lambda1 / scale, lambda2=spec.lambda2 / scale,
                    a_m=None if spec.a_m is None else spec.a_m * scale)
    if TDV in spec.terms and (L < 2 or N < 2):
        raise ValueError("TDV term needs L >= 2 and N >= 2")

    if opts.warm_start is not None:
        A = np.array(opts.warm_start, dtype=np.float64)
        if A.shape != shape:
            raise ValueError("warm start shape %r, expected %r" % (A.shape, shape))
    else:
        A = initial_activity(V, Pd, shape, opts.seed)
    A = A * scale

    terms = inner.ordered_terms
    rho = opts.rho
    state = AdmmState(x={t: ops.apply(t, A) for t in terms},
                      u={t: np.zeros_like(ops.apply(t, A)) for t in terms},
                      A=A, rho=rho, mu=1.0)
    if opts.collector == "exact":
        state.weights = penalty_weights(V, terms, opts)
    mode = opts.mu_mode
    state.mu = step_bound(ops, inner, rho, mode, opts.relax)
    vnorm = float(np.linalg.norm(V))
    objective_log = []
    rho_log = []
    growth = 0
    last_res = np.inf

    for it in range(opts.iters):
        for t in terms:
            state.x[t] = x_update(t, state, ops, V, inner)
        if opts.collector == "exact":
            A_new = exact_collector_update(state, inner, ops)
        else:
            A_new = collector_update(state, inner, ops)
        _check_finite(A_new, "activity", it)
        pr, du = dual_update(state, inner, ops, A_new)
        state.A = A_new
        state.iteration += 1
        state.primal.append(pr)
        state.dual.append(du)
        rho_log.append(state.rho)
        if not (np.isfinite(pr) and np.isfinite(du)):
            raise DivergenceError("non-finite residual at iteration %d" % it)
        if opts.log_every and (it % opts.log_every == 0 or it == opts.iters - 1):
            vals = objective_terms(V, state.A / scale, ops0, spec)
            vals["iteration"] = it
            objective_log.append(vals)

        res = max(pr, du)
        if mode == "relaxed" and opts.collector == "linearized":
            growth = growth + 1 if res > last_res else 0
            if growth >= DIVERGENCE_WINDOW:
                log.info("residual grew for %d iterations; switching to safe mu",
                         DIVERGENCE_WINDOW)
                mode = "safe"
                state.mu = step_bound(ops, inner, state.rho, mode)
                growth = 0
        last_res = res
        if opts.adaptive_rho:
            adapt_rho(state, pr, du, opts.rho)
            state.mu = step_bound(ops, inner, state.rho, mode, opts.relax)
        if opts.tol is not None and res < opts.tol * vnorm:
            break

    A_raw = state.A / scale
    return SolveReport(A=feasible_readout(A_raw, spec), A_raw=A_raw,
                       primal=state.primal, dual=state.dual,
                       iterations=state.iteration, objective=objective_log,
                       rho=rho_log, stages=[state.iteration],
                       mu_mode=mode if opts.collector == "linearized" else "exact")


def two_stage_solve(V, P, spec_full, opts=None, stage1_iters=None):
    """Convex warm-up on ``h_d`` followed by the full (non-convex) objective."""
    opts = opts or SolveOptions()
    if spec_full.is_convex:
        return solve(V, P, spec_full, opts)
    first = replace(opts, iters=opts.iters if stage1_iters is None else stage1_iters)
    rep1 = solve(V, P, spec_full.convex_part(), first)
    second = replace(opts, warm_start=rep1.A_raw)
    rep2 = solve(V, P, spec_full, second)
    return SolveReport(A=rep2.A, A_raw=rep2.A_raw,
                       primal=rep1.primal + rep2.primal,
                       dual=rep1.dual + rep2.dual,
                       iterations=rep1.iterations + rep2.iterations,
                       objective=rep1.objective + rep2.objective,
                       rho=rep1.rho + rep2.rho,
                       stages=[rep1.iterations, rep2.iterations],
                       mu_mode=rep2.mu_mode)
