"""Argument checks shared by the estimators and the config parser."""

from __future__ import annotations

import math
import numbers

import numpy as np


def check_positive(name, value, allow_inf=False):
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise TypeError(f"{name} must be a real number, got {value!r}") from None
    if math.isnan(v) or v <= 0 or (math.isinf(v) and not allow_inf):
        raise ValueError(f"{name} must be positive and finite, got {value!r}")
    return v


def check_int(name, value, minimum=None):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        else:
            raise TypeError(f"{name} must be an integer, got {value!r}")
    value = int(value)
    if minimum is not None and value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return value


def check_seed(name, value):
    value = check_int(name, value, minimum=0)
    if value >= 2 ** 64:
        raise ValueError(f"{name} must fit in 64 bits, got {value}")
    return value


def check_axes(name, axes, m=None):
    """Validate grid axes given as ``[(min, max, count), ...]``."""
    try:
        axes = [(float(lo), float(hi), int(c)) for lo, hi, c in axes]
    except (TypeError, ValueError):
        raise TypeError(f"{name} must be a sequence of (min, max, count) triples") from None
    if m is not None and len(axes) != m:
        raise ValueError(f"{name} has {len(axes)} axes, expected {m}")
    for d, (lo, hi, c) in enumerate(axes):
        if not (math.isfinite(lo) and math.isfinite(hi) and hi > lo):
            raise ValueError(f"{name}: axis {d} needs finite min < max")
        if c < 2:
            raise ValueError(f"{name}: axis {d} needs count >= 2")
    return axes


def check_points(X, m):
    """Query points as a float array of shape ``(k, m)``."""
    from sklearn.utils import check_array

    X = check_array(X, dtype=float, ensure_2d=True)
    if X.shape[1] != m:
        raise ValueError(f"expected points with {m} coordinates, got {X.shape[1]}")
    return X
