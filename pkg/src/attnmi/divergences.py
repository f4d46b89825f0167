"""Distances between probability vectors (natural log units)."""

from __future__ import annotations

import numpy as np

from .errors import InvalidInputError, ShapeError

KL_INFINITY = 1e6  # reported in place of +inf; see ``kl(..., return_flag=True)``
_NORM_TOL = 1e-6


def _check_pair(p, q, name: str):
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ShapeError(f"{name}: length mismatch {p.shape} vs {q.shape}")
    for v in (p, q):
        if np.any(v < 0) or np.any(np.abs(v.sum(axis=-1) - 1.0) > _NORM_TOL):
            raise InvalidInputError(f"{name}: inputs must be normalised probability vectors")
    return p, q


def tvd(p, q) -> float:
    """Total variation distance ``0.5 * sum |p - q|``."""
    p, q = _check_pair(p, q, "tvd")
    return float(0.5 * np.abs(p - q).sum())


def kl(p, q, return_flag: bool = False):
    """``sum p log(p / q)`` with ``0 log 0 = 0``.

    When ``q_i = 0 < p_i`` the divergence is infinite; :data:`KL_INFINITY` is
    returned instead, and ``return_flag=True`` yields ``(value, infinite)``.
    """
    p, q = _check_pair(p, q, "kl")
    support = p > 0
    infinite = bool(np.any(support & (q <= 0)))
    if infinite:
        value = KL_INFINITY
    else:
        value = float(np.sum(p[support] * (np.log(p[support]) - np.log(q[support]))))
        value = max(value, 0.0)
    return (value, infinite) if return_flag else value


def jsd(p, q) -> float:
    """Jensen-Shannon divergence in nats; lies in ``[0, log 2]``."""
    p, q = _check_pair(p, q, "jsd")
    m = 0.5 * (p + q)
    value = 0.5 * kl(p, m) + 0.5 * kl(q, m)
    return float(min(max(value, 0.0), np.log(2.0)))


def rowwise(fn, P: np.ndarray, Q: np.ndarray, masks: np.ndarray | None = None) -> np.ndarray:
    """Apply a divergence to paired rows, optionally restricted to masked positions."""
    out = np.empty(len(P))
    for i in range(len(P)):
        p, q = P[i], Q[i]
        if masks is not None:
            p, q = p[masks[i]], q[masks[i]]
        out[i] = fn(p, q)
    return out
