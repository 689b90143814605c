"""Polynomial illumination basis over a template patch.

Illumination change across the patch is modeled as the template multiplied
pixel-wise by low-order Legendre polynomial surfaces. Basis image 0 is
constant; odd-numbered basis images vary along the row axis, even-numbered
ones along the column axis, with polynomial order growing every two images.
An order-``d`` basis therefore has ``2 d + 1`` members, and the dictionary
matrix stacks ``vec(template * basis_k)`` as columns (row-major ``vec``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import fileio
from .models import SupportSet

__all__ = [
    "TemplatePatch",
    "Dictionary",
    "SupportTrace",
    "legendre_eval",
    "build_basis_image",
    "build_dictionary",
    "ml_coeff_fit",
    "energy_support",
    "support_trace",
    "save_dictionary",
    "load_dictionary",
]


def legendre_eval(k: int, x):
    """Evaluate the (unnormalized) Legendre polynomial of order ``k`` on [-1, 1].

    Uses the three-term recurrence (k+1) p_{k+1} = (2k+1) x p_k - k p_{k-1}.
    ``x`` may be a scalar or an array; values outside [-1, 1] are a domain
    error.
    """
    if k < 0:
        raise ValueError("polynomial order must be nonnegative")
    arr = np.asarray(x, dtype=float)
    if np.any(np.abs(arr) > 1.0):
        raise ValueError("legendre_eval is defined on [-1, 1]")
    p_prev = np.ones_like(arr)
    if k == 0:
        return p_prev if arr.ndim else float(p_prev)
    p_cur = arr.copy()
    for n in range(1, k):
        p_next = ((2 * n + 1) * arr * p_cur - n * p_prev) / (n + 1)
        p_prev, p_cur = p_cur, p_next
    return p_cur if arr.ndim else float(p_cur)


def _axis_coords(n: int) -> np.ndarray:
    # maps pixel index 0..n-1 onto [-1, 1]
    return 2.0 * np.arange(n) / (n - 1) - 1.0


def build_basis_image(k: int, height: int, width: int) -> np.ndarray:
    """Basis image ``k`` on an ``height x width`` grid.

    k = 0 is all ones; odd k varies along rows with order (k+1)/2; even
    k >= 2 varies along columns with order k/2.
    """
    if k < 0:
        raise ValueError("basis index must be nonnegative")
    if height < 2 or width < 2:
        raise ValueError("basis images need at least a 2 x 2 grid")
    if k == 0:
        return np.ones((height, width))
    if k % 2 == 1:
        col = legendre_eval((k + 1) // 2, _axis_coords(height))
        return np.repeat(col[:, None], width, axis=1)
    row = legendre_eval(k // 2, _axis_coords(width))
    return np.repeat(row[None, :], height, axis=0)


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=float)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class TemplatePatch:
    """Template pixels with their frame coordinates.

    ``pixels`` is the row-major flattening of the patch; ``coord_i`` /
    ``coord_j`` give each pixel's row / column position in the frame the
    patch was cut from, so the patch stays anchored when motion is applied.
    """

    pixels: np.ndarray
    height: int
    width: int
    coord_i: np.ndarray
    coord_j: np.ndarray

    def __post_init__(self):
        n_l = self.height * self.width
        for name in ("pixels", "coord_i", "coord_j"):
            arr = _freeze(getattr(self, name))
            if arr.shape != (n_l,):
                raise ValueError(f"{name} must have length height * width = {n_l}")
            object.__setattr__(self, name, arr)

    @classmethod
    def from_image(cls, image, origin: tuple[int, int] = (0, 0)) -> "TemplatePatch":
        image = np.asarray(image, dtype=float)
        if image.ndim != 2:
            raise ValueError("template image must be 2-D")
        h, w = image.shape
        ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        return cls(
            pixels=image.ravel(),
            height=h,
            width=w,
            coord_i=(ii.ravel() + origin[0]).astype(float),
            coord_j=(jj.ravel() + origin[1]).astype(float),
        )

    def with_origin(self, origin_i: int, origin_j: int) -> "TemplatePatch":
        return TemplatePatch.from_image(self.image(), (origin_i, origin_j))

    def image(self) -> np.ndarray:
        return self.pixels.reshape(self.height, self.width)

    @property
    def n_pixels(self) -> int:
        return self.height * self.width

    @property
    def centroid_i(self) -> float:
        return float(np.mean(self.coord_i))

    @property
    def centroid_j(self) -> float:
        return float(np.mean(self.coord_j))


@dataclass(frozen=True, eq=False)
class Dictionary:
    """Column dictionary mapping coefficient vectors to patch illumination."""

    matrix: np.ndarray
    order: int
    kind: str = "legendre"

    def __post_init__(self):
        matrix = _freeze(self.matrix)
        if matrix.ndim != 2:
            raise ValueError("dictionary matrix must be 2-D")
        if self.kind == "legendre" and matrix.shape[1] != 2 * self.order + 1:
            raise ValueError("legendre dictionary must have 2 * order + 1 columns")
        object.__setattr__(self, "matrix", matrix)

    @property
    def n_pixels(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_lambda(self) -> int:
        return self.matrix.shape[1]

    @cached_property
    def gram(self) -> np.ndarray:
        return _freeze(self.matrix.T @ self.matrix)


def build_dictionary(template: TemplatePatch, d: int) -> Dictionary:
    """Dictionary with columns vec(template * basis_k), k = 0 .. 2 d."""
    if d < 0:
        raise ValueError("dictionary order must be nonnegative")
    h, w = template.height, template.width
    cols = [
        (template.image() * build_basis_image(k, h, w)).ravel()
        for k in range(2 * d + 1)
    ]
    return Dictionary(matrix=np.column_stack(cols), order=d, kind="legendre")


def ml_coeff_fit(patch: np.ndarray, template: TemplatePatch, dictionary: Dictionary) -> np.ndarray:
    """Least-squares coefficients explaining ``patch - template``.

    Solved through an orthogonal factorization rather than normal equations.
    Raises ``numpy.linalg.LinAlgError`` when the dictionary is rank
    deficient, reporting its condition number.
    """
    patch = np.asarray(patch, dtype=float)
    if patch.shape != (template.n_pixels,):
        raise ValueError("patch must be a flat vector matching the template size")
    target = patch - template.pixels
    coeffs, _, rank, sv = np.linalg.lstsq(dictionary.matrix, target, rcond=None)
    if rank < dictionary.n_lambda:
        cond = math.inf if sv[-1] == 0.0 else float(sv[0] / sv[-1])
        raise np.linalg.LinAlgError(
            f"dictionary is rank deficient (rank {rank} < {dictionary.n_lambda}, "
            f"condition number {cond})"
        )
    return coeffs


def energy_support(coeffs: np.ndarray, fraction: float) -> tuple[SupportSet, float]:
    """Smallest-magnitude-greedy support capturing ``fraction`` of the energy.

    Indices are taken in decreasing magnitude order (ties broken toward the
    lower index) until the captured squared mass reaches
    ``fraction * ||coeffs||^2``. Returns the support and the magnitude of the
    smallest included coefficient; the zero vector gives an empty support and
    threshold 0.0.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    coeffs = np.asarray(coeffs, dtype=float)
    mags = np.abs(coeffs)
    total = float(np.sum(mags * mags))
    if total == 0.0:
        return SupportSet((), coeffs.size), 0.0
    order = np.argsort(-mags, kind="stable")
    cum = np.cumsum(mags[order] ** 2)
    k = int(np.searchsorted(cum, fraction * total, side="left")) + 1
    k = min(k, coeffs.size)
    picked = order[:k]
    alpha = float(mags[picked[-1]])
    return SupportSet.from_indices(picked, coeffs.size), alpha


@dataclass
class SupportTrace:
    """Per-frame support statistics of a coefficient sequence.

    ``add_frac`` / ``del_frac`` are NaN on the first frame (no predecessor);
    frames whose support is empty report 0.0 ratios and set ``zero_support``.
    """

    supports: list
    alphas: np.ndarray
    supp_frac: np.ndarray
    add_frac: np.ndarray
    del_frac: np.ndarray
    zero_support: np.ndarray
    n_lambda: int = field(default=0)

    def write_csv(self, path) -> None:
        def cell(x) -> str:
            return "" if math.isnan(x) else fileio.fmt_float(x)

        with open(path, "w") as fh:
            fh.write("frame,supp_frac,add_frac,del_frac,alpha\n")
            for t in range(len(self.supports)):
                fh.write(
                    f"{t},{fileio.fmt_float(self.supp_frac[t])},"
                    f"{cell(self.add_frac[t])},{cell(self.del_frac[t])},"
                    f"{fileio.fmt_float(self.alphas[t])}\n"
                )

    def membership_matrix(self) -> np.ndarray:
        out = np.zeros((len(self.supports), self.n_lambda), dtype=int)
        for t, supp in enumerate(self.supports):
            out[t, supp.as_array()] = 1
        return out


def support_trace(coeff_sequence: np.ndarray, fraction: float = 0.99) -> SupportTrace:
    """Energy supports and change ratios along a coefficient sequence."""
    seq = np.atleast_2d(np.asarray(coeff_sequence, dtype=float))
    n_frames, n_lambda = seq.shape
    supports = []
    alphas = np.zeros(n_frames)
    supp_frac = np.zeros(n_frames)
    add_frac = np.full(n_frames, np.nan)
    del_frac = np.full(n_frames, np.nan)
    zero = np.zeros(n_frames, dtype=bool)
    for t in range(n_frames):
        supp, alpha = energy_support(seq[t], fraction)
        supports.append(supp)
        alphas[t] = alpha
        supp_frac[t] = len(supp) / n_lambda
        zero[t] = len(supp) == 0
        if t == 0:
            continue
        if len(supp) == 0:
            add_frac[t] = 0.0
            del_frac[t] = 0.0
        else:
            prev = supports[t - 1]
            add_frac[t] = len(supp.difference(prev)) / len(supp)
            del_frac[t] = len(prev.difference(supp)) / len(supp)
    return SupportTrace(
        supports=supports,
        alphas=alphas,
        supp_frac=supp_frac,
        add_frac=add_frac,
        del_frac=del_frac,
        zero_support=zero,
        n_lambda=n_lambda,
    )


def save_dictionary(dictionary: Dictionary, path) -> None:
    """Write the dictionary matrix under its (n_pixels, n_lambda, order) header."""
    fileio.save_matrix(
        path, dictionary.matrix, (dictionary.n_pixels, dictionary.n_lambda, dictionary.order)
    )


def load_dictionary(path) -> Dictionary:
    """Read a dictionary file, checking the header against the matrix shape."""
    matrix, (n_pixels, n_lambda, order) = fileio.load_matrix(path)
    if matrix.shape != (n_pixels, n_lambda):
        raise ValueError(
            f"dictionary header ({n_pixels}, {n_lambda}) does not match matrix "
            f"shape {matrix.shape}"
        )
    kind = "legendre" if n_lambda == 2 * order + 1 else "custom"
    return Dictionary(matrix=matrix, order=order, kind=kind)
