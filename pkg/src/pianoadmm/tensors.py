"""Core tensors and the linear operators shared by every solver stage.

Shapes follow one convention throughout the package:

* spectrogram ``V``: ``(M, N)``
* pattern dictionary ``P``: ``(M, L, K)``
* activity ``A``: ``(K, L, N)`` with the frame index ``n`` innermost

All arithmetic is float64.
"""

import json
from dataclasses import dataclass, field

import numpy as np


class DimensionError(ValueError):
    """Raised when tensor shapes do not line up."""


@dataclass
class Spectrogram:
    """Non-negative log-frequency magnitude spectrogram (linear magnitude)."""

    data: np.ndarray
    sample_rate: float
    hop: int
    window: int
    freq_map: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        self.freq_map = np.asarray(self.freq_map, dtype=np.float64)
        if self.data.ndim != 2:
            raise DimensionError("spectrogram data must be 2-D")
        if np.any(self.data < 0):
            raise ValueError("spectrogram entries must be non-negative")
        if len(self.freq_map) != self.data.shape[0]:
            raise DimensionError("freq_map length must equal number of rows")
        if len(self.freq_map) > 1 and np.any(np.diff(self.freq_map) <= 0):
            raise ValueError("freq_map must be strictly increasing")
        if self.hop < 1 or self.window < self.hop:
            raise ValueError("need hop >= 1 and window >= hop")

    @property
    def hop_seconds(self):
        return self.hop / float(self.sample_rate)

    @property
    def shape(self):
        return self.data.shape


@dataclass
class PatternDictionary:
    """Unnormalized spectro-temporal note patterns, one per key."""

    data: np.ndarray
    pitch_map: list
    sample_rate: float = 22050.0
    hop: int = 256
    window: int = 1024
    freq_map: np.ndarray = None
    _matrix: np.ndarray = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        self.pitch_map = [int(p) for p in self.pitch_map]
        if self.data.ndim != 3:
            raise DimensionError("pattern dictionary must be 3-D (M, L, K)")
        if np.any(self.data < 0):
            raise ValueError("pattern entries must be non-negative")
        if len(self.pitch_map) != self.data.shape[2]:
            raise DimensionError("pitch_map length must equal K")
        if len(set(self.pitch_map)) != len(self.pitch_map):
            raise ValueError("pitches in pitch_map must be distinct")

    @property
    def M(self):
        return self.data.shape[0]

    @property
    def L(self):
        return self.data.shape[1]

    @property
    def K(self):
        return self.data.shape[2]

    @property
    def matrix(self):
        """``(M, K*L)`` matrix whose column ``k*L + l`` is ``P[:, l, k]``."""
        if self._matrix is None:
            self._matrix = pattern_matrix(self.data)
        return self._matrix


@dataclass
class ActivityTensor:
    data: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise DimensionError("activity tensor must be 3-D (K, L, N)")

    @property
    def shape(self):
        return self.data.shape


def _array(x):
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def pattern_matrix(P):
    """Reshape an ``(M, L, K)`` dictionary into an ``(M, K*L)`` matrix."""
    P = _array(P)
    M, L, K = P.shape
    return np.ascontiguousarray(P.transpose(0, 2, 1).reshape(M, K * L))


def synthesize(P, A):
    """Model spectrogram ``sum_k sum_l P[m, l, k] * A[k, l, n]``."""
    Pm = P.matrix if isinstance(P, PatternDictionary) else pattern_matrix(P)
    A = _array(A)
    if A.ndim != 3:
        raise DimensionError("activity must be 3-D")
    K, L, N = A.shape
    if Pm.shape[1] != K * L:
        raise DimensionError(
            "dictionary has %d patterns, activity has %d" % (Pm.shape[1], K * L))
    return Pm @ A.reshape(K * L, N)


def adjoint_synthesize(P, X):
    """Adjoint of :func:`synthesize`: ``out[k, l, n] = sum_m P[m, l, k] X[m, n]``."""
    Pd = _array(P)
    Pm = P.matrix if isinstance(P, PatternDictionary) else pattern_matrix(Pd)
    X = _array(X)
    M, L, K = Pd.shape
    if X.ndim != 2 or X.shape[0] != M:
        raise DimensionError("X must have %d rows" % M)
    return (Pm.T @ X).reshape(K, L, X.shape[1])


def tdv(A):
    """Diagonal difference ``A[k, l, n] - A[k, l+1, n+1]``."""
    A = _array(A)
    if A.ndim != 3:
        raise DimensionError("activity must be 3-D")
    if A.shape[1] < 2 or A.shape[2] < 2:
        raise DimensionError("tdv needs L >= 2 and N >= 2")
    return A[:, :-1, :-1] - A[:, 1:, 1:]


def tdv_adjoint(D, shape=None):
    """Adjoint of :func:`tdv`; ``shape`` defaults to ``D.shape + (0, 1, 1)``."""
    D = _array(D)
    if D.ndim != 3:
        raise DimensionError("difference tensor must be 3-D")
    K, L1, N1 = D.shape
    if shape is None:
        shape = (K, L1 + 1, N1 + 1)
    if tuple(shape) != (K, L1 + 1, N1 + 1):
        raise DimensionError("shape %r does not match D %r" % (shape, D.shape))
    out = np.zeros(shape)
    out[:, :-1, :-1] += D
    out[:, 1:, 1:] -= D
    return out


def spectral_norm_estimate(op_apply, op_adjoint, shape, iters=50, seed=0):
    """Largest singular value of a linear operator by power iteration.

    Iterates ``x <- C^T C x`` from a seeded Gaussian start and returns
    ``||C x|| / ||x||`` for the final iterate. Returns 0 for a zero operator.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(iters):
        y = op_apply(x)
        est = float(np.linalg.norm(y))
        if est == 0.0:
            return 0.0
        z = op_adjoint(y)
        nz = np.linalg.norm(z)
        if nz == 0.0:
            return 0.0
        x = z / nz
    return float(np.linalg.norm(op_apply(x)))


def flatten(A):
    """Stack the slices ``A[k]`` vertically into a ``(K*L, N)`` matrix."""
    A = _array(A)
    K, L, N = A.shape
    return A.reshape(K * L, N).copy()


def unflatten(F, K, L):
    F = _array(F)
    if F.shape[0] != K * L:
        raise DimensionError("expected %d rows, got %d" % (K * L, F.shape[0]))
    return F.reshape(K, L, F.shape[1]).copy()


# -- container files --------------------------------------------------------

def save_tensor(path, array, role, extra=None):
    """Write ``array`` as a JSON header line followed by little-endian f64."""
    array = np.ascontiguousarray(array, dtype="<f8")
    header = {"dims": list(array.shape), "dtype": "f64",
              "order": "n-innermost", "role": role}
    if extra:
        header.update(extra)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(array.tobytes(order="C"))


def load_tensor(path):
    """Read a container file; returns ``(array, header)``."""
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as err:
            raise ValueError("not a tensor container: %s" % path) from err
        if header.get("dtype") != "f64":
            raise ValueError("unsupported dtype %r" % header.get("dtype"))
        dims = [int(d) for d in header["dims"]]
        raw = fh.read()
    count = int(np.prod(dims)) if dims else 1
    if len(raw) != 8 * count:
        raise ValueError("container payload has %d bytes, expected %d"
                         % (len(raw), 8 * count))
    data = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)
    return data, header
