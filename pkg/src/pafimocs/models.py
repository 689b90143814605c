"""State types and transition kernels for the tracked system.

The state at each step has three blocks: a motion vector (translation pair
plus scale), a support set over the coefficient axis, and a sparse
coefficient vector that is exactly zero off that support. All three blocks
evolve by simple Markov kernels:

* support: each index outside the previous support enters independently with
  probability ``p_a``; each index inside leaves with probability ``p_r``;
* coefficients: Gaussian random walk with per-coordinate variance
  ``sigma_l_sq`` on the current support, hard zeros elsewhere;
* motion: Gaussian random walk with diagonal covariance ``sigma_u``.

Transition log-densities are normalized (they include the Gaussian dimension
constants) and use ``-inf`` as the zero-probability sentinel. Components with
zero variance are treated as degenerate point masses: their log-density
contribution is 0.0 when the deviation is within ``ZERO_VAR_ATOL`` of zero
and ``-inf`` otherwise, which keeps noise-free configurations usable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import fileio

__all__ = [
    "NEG_INF",
    "ZERO_VAR_ATOL",
    "SupportSet",
    "MotionState",
    "FullState",
    "ModelParams",
    "derive_pr_stationary",
    "sample_support_transition",
    "stp_support_log",
    "sample_coeff_transition",
    "stp_coeffs_log",
    "sample_motion_transition",
    "stp_motion_log",
    "diag_gaussian_log_density",
]

NEG_INF = float("-inf")

# Absolute slack allowed around a zero-variance (point mass) component before
# its log-density snaps to -inf. Covers float rounding in rendered pixels.
ZERO_VAR_ATOL = 1e-6

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class SupportSet:
    """Sorted set of active indices inside an ambient axis of fixed size."""

    indices: tuple[int, ...]
    ambient_size: int

    def __post_init__(self):
        if self.ambient_size < 1:
            raise ValueError("ambient_size must be >= 1")
        prev = -1
        for idx in self.indices:
            if idx <= prev:
                raise ValueError("indices must be strictly increasing")
            if not 0 <= idx < self.ambient_size:
                raise ValueError(f"index {idx} outside [0, {self.ambient_size})")
            prev = idx

    @classmethod
    def from_indices(cls, indices, ambient_size: int) -> "SupportSet":
        return cls(tuple(sorted(set(int(i) for i in indices))), ambient_size)

    def __len__(self) -> int:
        return len(self.indices)

    def __contains__(self, idx) -> bool:
        return idx in self.indices

    def as_array(self) -> np.ndarray:
        return np.array(self.indices, dtype=np.intp)

    def mask(self) -> np.ndarray:
        m = np.zeros(self.ambient_size, dtype=bool)
        if self.indices:
            m[np.array(self.indices, dtype=np.intp)] = True
        return m

    def complement(self) -> "SupportSet":
        inside = set(self.indices)
        return SupportSet(
            tuple(i for i in range(self.ambient_size) if i not in inside),
            self.ambient_size,
        )

    def union(self, other: "SupportSet") -> "SupportSet":
        self._check_ambient(other)
        return SupportSet.from_indices(set(self.indices) | set(other.indices), self.ambient_size)

    def difference(self, other: "SupportSet") -> "SupportSet":
        self._check_ambient(other)
        return SupportSet.from_indices(set(self.indices) - set(other.indices), self.ambient_size)

    def _check_ambient(self, other: "SupportSet") -> None:
        if self.ambient_size != other.ambient_size:
            raise ValueError("support sets live in different ambient sizes")


@dataclass(frozen=True)
class MotionState:
    """Translation pair plus scale; the geometric part of the state."""

    u_x: float
    u_y: float
    s: float

    def as_array(self) -> np.ndarray:
        return np.array([self.u_x, self.u_y, self.s], dtype=float)

    @classmethod
    def from_array(cls, arr) -> "MotionState":
        u_x, u_y, s = (float(v) for v in arr)
        return cls(u_x, u_y, s)


@dataclass(frozen=True, eq=False)
class FullState:
    """One complete state: motion block, support set, coefficient vector."""

    motion: MotionState
    support: SupportSet
    coeffs: np.ndarray

    def __post_init__(self):
        coeffs = np.asarray(self.coeffs, dtype=float)
        if coeffs.shape != (self.support.ambient_size,):
            raise ValueError(
                f"coeffs shape {coeffs.shape} does not match ambient size "
                f"{self.support.ambient_size}"
            )
        object.__setattr__(self, "coeffs", coeffs)


# Config file keys; the diagonal motion covariance is flattened to three keys.
_PARAM_KEYS = (
    "n_lambda",
    "s_expected",
    "p_a",
    "p_r",
    "sigma_l_sq",
    "sigma_u_xx",
    "sigma_u_yy",
    "sigma_u_ss",
    "sigma_o_sq",
)


@dataclass(frozen=True)
class ModelParams:
    """Model constants shared by simulation, likelihoods, and trackers.

    ``sigma_u`` holds the three diagonal entries of the motion walk
    covariance (x translation, y translation, scale).
    """

    n_lambda: int
    s_expected: int
    p_a: float
    p_r: float
    sigma_l_sq: float
    sigma_u: tuple[float, float, float]
    sigma_o_sq: float
    pixel_max: float = 255.0

    def __post_init__(self):
        if self.n_lambda < 1:
            raise ValueError("n_lambda must be >= 1")
        if not 1 <= self.s_expected <= self.n_lambda:
            raise ValueError("s_expected must lie in [1, n_lambda]")
        if not 0.0 <= self.p_a < 0.5:
            raise ValueError("p_a must lie in [0, 0.5)")
        if not 0.0 <= self.p_r < 0.5:
            raise ValueError("p_r must lie in [0, 0.5)")
        if self.sigma_l_sq < 0.0 or self.sigma_o_sq < 0.0:
            raise ValueError("variances must be nonnegative")
        sigma_u = tuple(float(v) for v in self.sigma_u)
        if len(sigma_u) != 3 or any(v < 0.0 for v in sigma_u):
            raise ValueError("sigma_u must be three nonnegative diagonal entries")
        object.__setattr__(self, "sigma_u", sigma_u)
        if self.pixel_max <= 0.0:
            raise ValueError("pixel_max must be positive")

    def to_config(self) -> dict:
        return {
            "n_lambda": self.n_lambda,
            "s_expected": self.s_expected,
            "p_a": float(self.p_a),
            "p_r": float(self.p_r),
            "sigma_l_sq": float(self.sigma_l_sq),
            "sigma_u_xx": self.sigma_u[0],
            "sigma_u_yy": self.sigma_u[1],
            "sigma_u_ss": self.sigma_u[2],
            "sigma_o_sq": float(self.sigma_o_sq),
        }

    @classmethod
    def from_config(cls, mapping: dict) -> "ModelParams":
        missing = [k for k in _PARAM_KEYS if k not in mapping]
        if missing:
            raise ValueError(f"config missing keys: {', '.join(missing)}")
        return cls(
            n_lambda=int(mapping["n_lambda"]),
            s_expected=int(mapping["s_expected"]),
            p_a=float(mapping["p_a"]),
            p_r=float(mapping["p_r"]),
            sigma_l_sq=float(mapping["sigma_l_sq"]),
            sigma_u=(
                float(mapping["sigma_u_xx"]),
                float(mapping["sigma_u_yy"]),
                float(mapping["sigma_u_ss"]),
            ),
            sigma_o_sq=float(mapping["sigma_o_sq"]),
        )

    def save(self, path) -> None:
        fileio.write_kv(path, self.to_config())

    @classmethod
    def load(cls, path) -> "ModelParams":
        return cls.from_config(fileio.read_kv(path))


def derive_pr_stationary(p_a: float, s: int, n_lambda: int) -> float:
    """Removal probability that balances expected additions and removals.

    With ``s`` active indices expected, additions arrive at rate
    ``(n_lambda - s) * p_a`` and removals at rate ``s * p_r``; equating the
    two gives ``p_r = (n_lambda - s) / s * p_a``.
    """
    if s <= 0 or s > n_lambda:
        raise ValueError("s must lie in [1, n_lambda]")
    if p_a < 0.0:
        raise ValueError("p_a must be nonnegative")
    p_r = (n_lambda - s) / s * p_a
    if p_r >= 1.0:
        raise ValueError(f"stationary removal probability {p_r} is not a probability")
    return p_r


def sample_support_transition(prev: SupportSet, params: ModelParams, rng) -> SupportSet:
    """Draw the next support: Bernoulli additions then Bernoulli removals.

    Draw order is fixed: one uniform per complement index (ascending) decides
    additions, then one uniform per support index (ascending) decides
    removals. Callers relying on reproducibility get identical streams for
    identical inputs.
    """
    if prev.ambient_size != params.n_lambda:
        raise ValueError("support ambient size does not match params.n_lambda")
    inside = prev.as_array()
    comp = np.flatnonzero(~prev.mask())
    adds = comp[rng.random(comp.size) < params.p_a]
    keeps = inside[rng.random(inside.size) >= params.p_r]
    merged = np.sort(np.concatenate([keeps, adds]))
    return SupportSet(tuple(int(i) for i in merged), params.n_lambda)


def _count_log(count: int, p: float) -> float:
    # count * log(p) with the 0 * log(0) = 0 convention
    if count == 0:
        return 0.0
    if p == 0.0:
        return NEG_INF
    return count * math.log(p)


def stp_support_log(new: SupportSet, prev: SupportSet, params: ModelParams) -> float:
    """Log transition probability of one support move under the add/remove model."""
    if new.ambient_size != prev.ambient_size:
        raise ValueError("support sets live in different ambient sizes")
    if new.ambient_size != params.n_lambda:
        raise ValueError("support ambient size does not match params.n_lambda")
    added = set(new.indices) - set(prev.indices)
    removed = set(prev.indices) - set(new.indices)
    n_comp = params.n_lambda - len(prev)
    total = (
        _count_log(len(added), params.p_a)
        + _count_log(n_comp - len(added), 1.0 - params.p_a)
        + _count_log(len(removed), params.p_r)
        + _count_log(len(prev) - len(removed), 1.0 - params.p_r)
    )
    return total


def diag_gaussian_log_density(dev, var) -> float:
    """Normalized log-density of a diagonal Gaussian evaluated at ``dev``.

    ``var`` broadcasts against ``dev``. Zero-variance components are point
    masses: they contribute 0.0 when ``|dev| <= ZERO_VAR_ATOL`` else ``-inf``.
    """
    dev = np.atleast_1d(np.asarray(dev, dtype=float))
    var = np.broadcast_to(np.asarray(var, dtype=float), dev.shape)
    if np.any(var < 0.0):
        raise ValueError("variances must be nonnegative")
    degenerate = var == 0.0
    if np.any(degenerate):
        if np.any(np.abs(dev[degenerate]) > ZERO_VAR_ATOL):
            return NEG_INF
    live = ~degenerate
    if not np.any(live):
        return 0.0
    v = var[live]
    d = dev[live]
    return float(-0.5 * np.sum(np.log(2.0 * np.pi * v) + d * d / v))


def sample_coeff_transition(
    prev: np.ndarray, new_support: SupportSet, params: ModelParams, rng
) -> np.ndarray:
    """Random-walk the coefficients on ``new_support``; exact zeros elsewhere."""
    prev = np.asarray(prev, dtype=float)
    if prev.shape != (params.n_lambda,):
        raise ValueError("prev coefficient vector has wrong length")
    if new_support.ambient_size != params.n_lambda:
        raise ValueError("support ambient size does not match params.n_lambda")
    new = np.zeros(params.n_lambda)
    idx = new_support.as_array()
    noise = rng.normal(0.0, math.sqrt(params.sigma_l_sq), idx.size)
    new[idx] = prev[idx] + noise
    return new


def stp_coeffs_log(
    new: np.ndarray, prev: np.ndarray, support: SupportSet, params: ModelParams
) -> float:
    """Log transition density of the on-support coefficient random walk.

    ``new`` must be exactly zero off ``support``; both vectors have length
    ``n_lambda``. Empty support gives 0.0 (the move is the deterministic
    all-zero vector).
    """
    new = np.asarray(new, dtype=float)
    prev = np.asarray(prev, dtype=float)
    if new.shape != (params.n_lambda,) or prev.shape != (params.n_lambda,):
        raise ValueError("coefficient vectors have wrong length")
    if support.ambient_size != params.n_lambda:
        raise ValueError("support ambient size does not match params.n_lambda")
    off = ~support.mask()
    if np.any(new[off] != 0.0):
        raise ValueError("new coefficients must be exactly zero off the support")
    if len(support) == 0:
        return 0.0
    idx = support.as_array()
    return diag_gaussian_log_density(new[idx] - prev[idx], params.sigma_l_sq)


def sample_motion_transition(prev: MotionState, params: ModelParams, rng) -> MotionState:
    """Random-walk the motion block with the diagonal covariance ``sigma_u``."""
    scale = np.sqrt(np.array(params.sigma_u, dtype=float))
    return MotionState.from_array(prev.as_array() + rng.normal(0.0, scale))


def stp_motion_log(new: MotionState, prev: MotionState, params: ModelParams) -> float:
    """Log transition density of the motion random walk."""
    return diag_gaussian_log_density(
        new.as_array() - prev.as_array(), np.array(params.sigma_u, dtype=float)
    )
