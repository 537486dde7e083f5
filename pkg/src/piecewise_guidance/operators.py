"""Linear degradation operators ``y = C x + z``.

Vectors are flattened images in ``(height, width, channels)`` row-major
order.  Every operator accepts a trailing feature axis, so ``apply`` maps
``(..., n) -> (..., m)`` and ``apply_transpose`` the reverse.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import linalg

__all__ = [
    "GramStructure",
    "LinearOperator",
    "MaskOperator",
    "AvgPoolOperator",
    "DenseOperator",
    "Measurement",
    "make_center_mask",
    "make_random_mask",
    "make_avgpool_sr",
    "make_dense",
    "load_dense_matrix",
    "apply",
    "apply_transpose",
    "solve_gram",
]


@dataclass(frozen=True)
class GramStructure:
    """Known form of ``C C^T``.

    ``kind`` is ``"identity"`` (``value`` is the scalar gamma),
    ``"diagonal"`` (``value`` is the diagonal) or ``"general"`` (``value``
    is the full ``m x m`` matrix).
    """

    kind: str
    value: object


class LinearOperator:
    kind: str = "abstract"

    def __init__(self, m: int, n: int):
        if not 0 < m <= n:
            raise ValueError(f"operator shape must satisfy 0 < m <= n, got ({m}, {n})")
        self.shape = (int(m), int(n))

    @property
    def m(self) -> int:
        return self.shape[0]

    @property
    def n(self) -> int:
        return self.shape[1]

    @property
    def gram(self) -> GramStructure:
        raise NotImplementedError

    def _check(self, x, size, what):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 0 or x.shape[-1] != size:
            raise ValueError(f"{what} expects trailing dimension {size}, got shape {x.shape}")
        return x

    def apply(self, x):
        x = self._check(x, self.n, "apply")
        return self._apply(x)

    def apply_transpose(self, v):
        v = self._check(v, self.m, "apply_transpose")
        return self._apply_transpose(v)

    def to_dense(self) -> np.ndarray:
        """Materialise ``C`` as an ``(m, n)`` array.  Small sizes only."""
        return self._apply(np.eye(self.n)).T.copy()

    def __repr__(self):
        return f"{type(self).__name__}(kind={self.kind!r}, shape={self.shape})"


class MaskOperator(LinearOperator):
    """Row selector keeping the entries listed in ``keep`` (sorted)."""

    def __init__(self, keep, n: int, kind: str = "mask"):
        keep = np.asarray(keep, dtype=np.intp)
        if keep.ndim != 1 or np.any(np.diff(keep) <= 0):
            raise ValueError("keep indices must be strictly increasing")
        if keep.size and (keep[0] < 0 or keep[-1] >= n):
            raise ValueError("keep indices out of range")
        super().__init__(keep.size, n)
        keep.setflags(write=False)
        self.keep = keep
        self.kind = kind

    @property
    def gram(self) -> GramStructure:
        return GramStructure("identity", 1.0)

    def _apply(self, x):
        return x[..., self.keep]

    def _apply_transpose(self, v):
        out = np.zeros(v.shape[:-1] + (self.n,), dtype=np.float64)
        out[..., self.keep] = v
        return out


class AvgPoolOperator(LinearOperator):
    """Per-channel mean over non-overlapping ``factor x factor`` blocks."""

    kind = "avgpool-sr"

    def __init__(self, height: int, width: int, channels: int, factor: int):
        if factor < 1 or height % factor or width % factor:
            raise ValueError(
                f"pool factor {factor} must divide height {height} and width {width}")
        self.image_shape = (height, width, channels)
        self.factor = int(factor)
        self._out_shape = (height // factor, width // factor, channels)
        super().__init__(int(np.prod(self._out_shape)), height * width * channels)

    @property
    def gram(self) -> GramStructure:
        return GramStructure("identity", 1.0 / self.factor ** 2)

    def _apply(self, x):
        h, w, c = self.image_shape
        s = self.factor
        lead = x.shape[:-1]
        blocks = x.reshape(lead + (h // s, s, w // s, s, c))
        return blocks.mean(axis=(-4, -2)).reshape(lead + (self.m,))

    def _apply_transpose(self, v):
        s = self.factor
        lead = v.shape[:-1]
        img = v.reshape(lead + self._out_shape) / s ** 2
        img = np.repeat(np.repeat(img, s, axis=-3), s, axis=-2)
        return img.reshape(lead + (self.n,))


class DenseOperator(LinearOperator):
    """Explicit matrix; the Gram structure is detected at construction."""

    kind = "dense"

    def __init__(self, matrix, tol: float = 1e-12):
        matrix = np.array(matrix, dtype=np.float64)
        if matrix.ndim != 2:
            raise ValueError("dense operator needs a 2-D matrix")
        super().__init__(*matrix.shape)
        matrix.setflags(write=False)
        self.matrix = matrix
        G = matrix @ matrix.T
        d = np.diag(G).copy()
        scale = max(float(np.max(np.abs(G))), 1.0)
        if np.max(np.abs(G - np.diag(d))) <= tol * scale:
            if np.max(np.abs(d - d[0])) <= tol * scale:
                self._gram = GramStructure("identity", float(d[0]))
            else:
                self._gram = GramStructure("diagonal", d)
        else:
            self._gram = GramStructure("general", G)

    @property
    def gram(self) -> GramStructure:
        return self._gram

    def _apply(self, x):
        return x @ self.matrix.T

    def _apply_transpose(self, v):
        return v @ self.matrix

    def to_dense(self):
        return np.array(self.matrix)


@dataclass(frozen=True)
class Measurement:
    y: np.ndarray
    sigma_z: float

    def __post_init__(self):
        y = np.array(self.y, dtype=np.float64)
        if y.ndim != 1:
            raise ValueError("measurement y must be a vector")
        if not self.sigma_z >= 0.0:
            raise ValueError(f"sigma_z must be non-negative, got {self.sigma_z}")
        y.setflags(write=False)
        object.__setattr__(self, "y", y)


def make_center_mask(height: int, width: int, channels: int,
                     box_height: int, box_width: int) -> MaskOperator:
    """Keep every pixel outside a centred ``box_height x box_width`` hole."""
    if not (0 <= box_height <= height and 0 <= box_width <= width):
        raise ValueError(
            f"box {box_height}x{box_width} does not fit in {height}x{width}")
    top = (height - box_height) // 2
    left = (width - box_width) // 2
    hole = np.zeros((height, width, channels), dtype=bool)
    hole[top:top + box_height, left:left + box_width, :] = True
    op = MaskOperator(np.flatnonzero(~hole.ravel()), hole.size, kind="center-mask")
    op.image_shape = (height, width, channels)
    return op


def make_random_mask(height: int, width: int, channels: int,
                     drop_fraction: float, seed: int) -> MaskOperator:
    """Remove ``round(drop_fraction * height * width)`` pixel locations.

    A dropped location loses all of its channels.  The permutation comes
    from a Philox generator keyed on ``seed`` so masks match across
    platforms.
    """
    if not 0.0 <= drop_fraction < 1.0:
        raise ValueError(f"drop_fraction must lie in [0, 1), got {drop_fraction}")
    npix = height * width
    n_drop = int(round(drop_fraction * npix))
    rng = np.random.Generator(np.random.Philox(seed))
    dropped = np.zeros(npix, dtype=bool)
    dropped[rng.permutation(npix)[:n_drop]] = True
    dropped = np.repeat(dropped, channels)
    op = MaskOperator(np.flatnonzero(~dropped), npix * channels, kind="random-mask")
    op.image_shape = (height, width, channels)
    return op


def make_avgpool_sr(height: int, width: int, channels: int, factor: int) -> AvgPoolOperator:
    return AvgPoolOperator(height, width, channels, factor)


def make_dense(matrix) -> DenseOperator:
    return DenseOperator(matrix)


def load_dense_matrix(path) -> DenseOperator:
    """Read rows of whitespace-separated reals into a dense operator."""
    return DenseOperator(np.loadtxt(Path(path), dtype=np.float64, ndmin=2))


def apply(op: LinearOperator, x):
    return op.apply(x)


def apply_transpose(op: LinearOperator, v):
    return op.apply_transpose(v)


def solve_gram(op: LinearOperator, r_t: float, sigma_z: float, v):
    """Solve ``(r_t^2 C C^T + sigma_z^2 I) u = v`` using the operator's Gram structure."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 0 or v.shape[-1] != op.m:
        raise ValueError(f"solve_gram expects trailing dimension {op.m}, got {v.shape}")
    r2, s2 = float(r_t) ** 2, float(sigma_z) ** 2
    g = op.gram
    if g.kind == "identity":
        denom = r2 * g.value + s2
        if denom == 0.0:
            raise ZeroDivisionError("r_t^2 * gamma + sigma_z^2 is zero; gram system is singular")
        return v / denom
    if g.kind == "diagonal":
        denom = r2 * g.value + s2
        if np.any(denom == 0.0):
            raise ZeroDivisionError("gram system has a zero diagonal entry")
        return v / denom
    A = r2 * g.value + s2 * np.eye(op.m)
    try:
        cho = linalg.cho_factor(A)
    except linalg.LinAlgError as exc:
        raise ZeroDivisionError("gram system is not positive definite") from exc
    return linalg.cho_solve(cho, v.T).T
