"""Dense float64 array helpers shared by every model component.

Vectors are 1-D numpy arrays, matrices are row-major 2-D arrays, both
float64. Public entry points validate shape and finiteness; hot paths inside
the package call numpy directly once operands have crossed a validated
boundary. The finite-difference helpers at the bottom are the oracle used to
verify every hand-written gradient in the package.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Mapping

import numpy as np

__all__ = [
    "ShapeError",
    "GradientProbeError",
    "as_vector",
    "as_matrix",
    "affine",
    "tanh_map",
    "sigmoid_map",
    "stable_sigmoid",
    "l2sq",
    "finite_diff_grad",
    "finite_diff_tensor_grads",
    "relative_gap",
]


class ShapeError(ValueError):
    """Operand dimensions do not line up."""


class GradientProbeError(ValueError):
    """A finite-difference probe produced a non-finite loss value."""


def as_vector(x, name: str = "vector") -> np.ndarray:
    """Coerce to a finite 1-D float64 array of positive length."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"{name}: expected 1-D, got ndim={arr.ndim}")
    if arr.size == 0:
        raise ShapeError(f"{name}: length must be positive")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name}: contains non-finite values")
    return arr


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite 2-D float64 array with positive dimensions."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name}: expected 2-D, got ndim={arr.ndim}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ShapeError(f"{name}: dimensions must be positive, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name}: contains non-finite values")
    return arr


def affine(w, x, b) -> np.ndarray:
    """Return w @ x + b after checking that the shapes agree."""
    w = as_matrix(w, "affine weight")
    x = as_vector(x, "affine input")
    b = as_vector(b, "affine bias")
    if w.shape[1] != x.size:
        raise ShapeError(
            f"affine: weight has {w.shape[1]} columns but input has length {x.size}"
        )
    if w.shape[0] != b.size:
        raise ShapeError(
            f"affine: weight has {w.shape[0]} rows but bias has length {b.size}"
        )
    return w @ x + b


def tanh_map(x) -> np.ndarray:
    """Elementwise tanh of a vector."""
    return np.tanh(as_vector(x, "tanh input"))


def stable_sigmoid(arr: np.ndarray) -> np.ndarray:
    """Elementwise logistic function, branching on sign so exp never overflows."""
    arr = np.asarray(arr, dtype=np.float64)
    out = np.empty_like(arr)
    pos = arr >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    ex = np.exp(arr[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_map(x) -> np.ndarray:
    """Elementwise logistic function of a vector."""
    return stable_sigmoid(as_vector(x, "sigmoid input"))


def l2sq(a, b) -> float:
    """Squared euclidean distance between two equal-length vectors."""
    a = as_vector(a, "l2sq left")
    b = as_vector(b, "l2sq right")
    if a.size != b.size:
        raise ShapeError(f"l2sq: lengths differ, {a.size} vs {b.size}")
    d = a - b
    return float(d @ d)


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x, eps: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function at x.

    Probes f coordinate by coordinate at x +/- eps. Raises
    GradientProbeError if any probe returns a non-finite value, so a
    silently exploding loss cannot masquerade as a huge gradient.
    """
    x = as_vector(x, "finite_diff_grad input")
    if not (eps > 0.0 and math.isfinite(eps)):
        raise ValueError(f"eps must be a positive finite float, got {eps}")
    grad = np.empty_like(x)
    for i in range(x.size):
        hi = x.copy()
        hi[i] += eps
        lo = x.copy()
        lo[i] -= eps
        f_hi = float(f(hi))
        f_lo = float(f(lo))
        if not (math.isfinite(f_hi) and math.isfinite(f_lo)):
            raise GradientProbeError(
                f"non-finite probe at coordinate {i}: f(+eps)={f_hi}, f(-eps)={f_lo}"
            )
        grad[i] = (f_hi - f_lo) / (2.0 * eps)
    return grad


def finite_diff_tensor_grads(
    loss_fn: Callable[[], float],
    tensors: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> dict[str, np.ndarray]:
    """Central-difference gradients for a dict of named tensors.

    loss_fn takes no arguments and reads the tensors in place; each entry is
    perturbed, probed, and restored. When coords is given, only that many
    randomly chosen coordinates per tensor are probed (the rest stay NaN in
    the result) which keeps large-table checks affordable.
    """
    if not (eps > 0.0 and math.isfinite(eps)):
        raise ValueError(f"eps must be a positive finite float, got {eps}")
    out: dict[str, np.ndarray] = {}
    for name, tensor in tensors.items():
        flat = tensor.reshape(-1)
        grad = np.full(flat.size, np.nan)
        if coords is None or coords >= flat.size:
            picked = range(flat.size)
        else:
            if rng is None:
                raise ValueError("coords sampling requires an rng")
            picked = sorted(rng.choice(flat.size, size=coords, replace=False))
        for i in picked:
            orig = flat[i]
            flat[i] = orig + eps
            f_hi = float(loss_fn())
            flat[i] = orig - eps
            f_lo = float(loss_fn())
            flat[i] = orig
            if not (math.isfinite(f_hi) and math.isfinite(f_lo)):
                raise GradientProbeError(
                    f"non-finite probe at {name}[{i}]: f(+eps)={f_hi}, f(-eps)={f_lo}"
                )
            grad[i] = (f_hi - f_lo) / (2.0 * eps)
        out[name] = grad.reshape(tensor.shape)
    return out


def relative_gap(analytic, numeric, floor: float = 1e-3) -> float:
    """Worst-case relative disagreement between two gradients.

    Elementwise |a - n| / max(|a|, |n|, floor), reduced with max. The floor
    keeps finite-difference noise near zero from registering as a relative
    error. NaN entries in either argument are ignored (used with sampled
    coordinate checks).
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ShapeError(f"relative_gap: shapes differ, {a.shape} vs {n.shape}")
    mask = ~(np.isnan(a) | np.isnan(n))
    if not mask.any():
        return 0.0
    a = a[mask]
    n = n[mask]
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))
