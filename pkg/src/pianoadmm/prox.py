"""Minimizers for the individual objective terms.

Each function solves ``argmin_x f(x) + (rho/2) ||x - v||^2`` for one term,
with ``v`` already formed by the caller (``C_i A - beta_i / rho``), except
:func:`prox_kl`, which takes the model spectrogram and dual directly.
"""

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MarkovConfig:
    """Template-progression constraints for one key.

    ``min_length`` is the minimum note length L_M in frames, ``overlap`` the
    number of extra templates allowed active alongside the current state
    (ceil(window / hop) for an STFT front end), ``L`` the templates per key.
    """

    min_length: int
    overlap: int
    L: int

    def __post_init__(self):
        if not 1 <= self.min_length <= self.L:
            raise ValueError("need 1 <= min_length <= L")
        if self.overlap < 0:
            raise ValueError("overlap must be >= 0")

    @classmethod
    def from_frontend(cls, min_length, window, hop, L):
        return cls(min_length, int(math.ceil(window / hop)), L)

    @property
    def return_states(self):
        """0-based indices of states that may be followed by state 0."""
        return np.array([0] + list(range(self.min_length - 1, self.L)))


def prox_kl(V, q, beta, rho):
    """Closed-form KL data-term update.

    Solves ``d(V, x) + <beta, x - q> + rho/2 ||x - q||^2`` entrywise.
    """
    rho = np.asarray(rho, dtype=np.float64)
    if np.any(rho <= 0):
        raise ValueError("rho must be positive")
    V = np.asarray(V, dtype=np.float64)
    if np.any(V < 0):
        raise ValueError("V must be non-negative")
    b = rho * np.asarray(q) - np.asarray(beta) - 1.0
    x = (b + np.sqrt(b * b + 4.0 * rho * V)) / (2.0 * rho)
    # for V == 0 the root is max(b, 0)/rho; cancellation can leave -0 noise
    return np.maximum(x, 0.0)


def prox_nonneg(v):
    return np.maximum(v, 0.0)


def prox_l1(v, t):
    """Soft thresholding ``sign(v) * max(|v| - t, 0)``."""
    if t < 0:
        raise ValueError("threshold must be non-negative")
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def prox_tdv(v, t):
    """Soft thresholding applied to diagonal differences."""
    return prox_l1(v, t)


def prox_threshold(v, a_m):
    """Projection onto ``{0} U [a_m, inf)`` entrywise."""
    if a_m <= 0:
        raise ValueError("a_m must be positive")
    v = np.asarray(v, dtype=np.float64)
    out = np.where(v > a_m, v, 0.0)
    out[(v >= 0.5 * a_m) & (v <= a_m)] = a_m
    return out


# -- Markov-state projection --------------------------------------------------

def _window_sums(sq, overlap):
    """``out[..., l, n] = sum_{j=0}^{overlap} sq[..., l + j, n]`` (clipped at L)."""
    out = sq.copy()
    L = sq.shape[-2]
    for j in range(1, min(overlap, L - 1) + 1):
        out[..., :L - j, :] += sq[..., j:, :]
    return out


def markov_cost_matrix(v, mc):
    """Squared energy outside each state's active window.

    ``v`` is ``(L, N)`` for one key, or ``(K, L, N)`` for all keys at once.
    """
    v = np.asarray(v, dtype=np.float64)
    sq = v * v
    total = sq.sum(axis=-2, keepdims=True)
    cost = total - _window_sums(sq, mc.overlap)
    return np.maximum(cost, 0.0)


def binary_markov_cost_matrix(v, mc):
    """Cost of encoding each state with ones on its window and zeros elsewhere."""
    v = np.asarray(v, dtype=np.float64)
    sq = v * v
    total = sq.sum(axis=-2, keepdims=True)
    return total + _window_sums(1.0 - 2.0 * v, mc.overlap)


def markov_dp(cost, mc):
    """Minimum-cost valid state path for each key.

    ``cost`` is ``(K, L, N)``. Returns ``(states, total)`` with 0-based states
    of shape ``(K, N)`` and the minimal path cost per key. Ties go to the
    smallest state, both for the return-to-first transition and at the
    final frame.
    """
    cost = np.asarray(cost, dtype=np.float64)
    K, L, N = cost.shape
    states = np.zeros((K, N), dtype=np.int64)
    if N == 0:
        return states, np.zeros(K)
    S = mc.return_states
    D = cost[:, :, 0].copy()
    back = np.zeros((K, N), dtype=np.int64)  # predecessor of state 0
    rows = np.arange(K)
    for n in range(1, N):
        sub = D[:, S]
        j = np.argmin(sub, axis=1)
        back[:, n] = S[j]
        best = sub[rows, j]
        new = np.empty_like(D)
        new[:, 0] = cost[:, 0, n] + best
        new[:, 1:] = cost[:, 1:, n] + D[:, :-1]
        D = new
    last = np.argmin(D, axis=1)
    total = D[rows, last]
    states[:, N - 1] = last
    for n in range(N - 1, 0, -1):
        cur = states[:, n]
        states[:, n - 1] = np.where(cur == 0, back[:, n], cur - 1)
    return states, total


def window_mask(states, mc):
    """Boolean ``(K, L, N)`` mask of each frame's active template window."""
    K, N = states.shape
    ell = np.arange(mc.L)[None, :, None]
    s = states[:, None, :]
    return (ell >= s) & (ell <= s + mc.overlap)


def markov_project(v, mc):
    """Euclidean projection onto the Markov-state set.

    Returns ``(x, states)``: ``x`` keeps ``v`` on the active window of the
    optimal path and is zero elsewhere; ``states`` are 0-based, ``(K, N)``.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 2:
        x, states = markov_project(v[None], mc)
        return x[0], states[0]
    if v.shape[1] != mc.L:
        raise ValueError("v has L=%d, config has L=%d" % (v.shape[1], mc.L))
    states, _ = markov_dp(markov_cost_matrix(v, mc), mc)
    return np.where(window_mask(states, mc), v, 0.0), states


def binary_markov_project(v, mc):
    """Nearest binary tensor whose windows are all ones on a valid path."""
    v = np.asarray(v, dtype=np.float64)
    states, _ = markov_dp(binary_markov_cost_matrix(v, mc), mc)
    return window_mask(states, mc).astype(np.float64), states


def is_valid_sequence(states, mc):
    """Check a 0-based state path against the left-to-right topology."""
    states = np.asarray(states)
    if np.any(states < 0) or np.any(states >= mc.L):
        return False
    S = set(int(s) for s in mc.return_states)
    for a, b in zip(states[:-1], states[1:]):
        if b == a + 1:
            continue
        if b == 0 and int(a) in S:
            continue
        return False
    return True


def in_markov_set(A, mc, atol=0.0):
    """Membership in the Markov-state set, decided by projection idempotence."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim == 2:
        A = A[None]
    x, _ = markov_project(A, mc)
    return bool(np.max(np.abs(x - A), initial=0.0) <= atol)
