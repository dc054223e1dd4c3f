"""Sigmoid-smoothed row-wise ranks and their gradient.

For a square score matrix M the smooth rank of entry (i, j) is

    R(i, j) = 1 + sum_k sigmoid((m_ij - m_ik) / tau)

The sum runs over every k including k = j, which contributes exactly 0.5.
Larger scores get larger rank values.

Evaluating all n^3 sigmoids is wasteful at small tau: once |m_ij - m_ik|
exceeds 40 tau the sigmoid is exactly 0 or 1 in double precision, and exact
ties contribute exactly 0.5. Each row is therefore sorted, saturated terms
are counted, ties are handled in closed form and sigmoids are evaluated only
inside the remaining window. The result equals the direct sum up to
floating-point summation order.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ValueError("non-positive temperature")


def smooth_sigmoid(x, tau: float):
    """Temperature sigmoid 1 / (1 + exp(-x / tau)); saturates instead of overflowing."""
    _check_tau(tau)
    out = expit(np.asarray(x, dtype=np.float64) / tau)
    return float(out) if np.ndim(out) == 0 else out


# beyond this many temperatures the sigmoid is exactly 0 or 1 in float64
_SATURATION = 40.0


def _sigmoid(d: np.ndarray, tau: float) -> np.ndarray:
    """sigmoid(d / tau) in place via (1 + tanh(d / 2 tau)) / 2, which vectorises well."""
    d /= 2.0 * tau
    np.tanh(d, out=d)
    d *= 0.5
    d += 0.5
    return d


def _as_matrix(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-d score matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("score matrix has non-finite entries")
    return m


def _window(v: np.ndarray, start: np.ndarray, stop: np.ndarray, tau: float):
    """Sigmoids of v[i, j] - v[i, k] for k in [start_ij, stop_ij), as a flat ragged list.

    Returns the sigmoids, the flat index of each (i, j) and the flat index of each (i, k).
    """
    r, p = v.shape
    widths = (stop - start).ravel()
    entry = np.repeat(np.arange(r * p), widths)
    first = np.cumsum(widths) - widths
    other = entry - entry % p + start.ravel()[entry] + (np.arange(entry.size) - first[entry])
    flat = v.ravel()
    return _sigmoid(flat[entry] - flat[other], tau), entry, other


class _SortedRows:
    """Row-sorted view of a score matrix with the saturation windows of every entry."""

    def __init__(self, m: np.ndarray, tau: float):
        self.tau = tau
        self.order = np.argsort(m, axis=1, kind="stable")
        v = np.take_along_axis(m, self.order, axis=1)
        w = _SATURATION * tau
        bounds = np.empty((4,) + v.shape, dtype=np.int64)
        for i, row in enumerate(v):
            bounds[0, i] = np.searchsorted(row, row - w, side="left")
            bounds[1, i] = np.searchsorted(row, row, side="left")
            bounds[2, i] = np.searchsorted(row, row, side="right")
            bounds[3, i] = np.searchsorted(row, row + w, side="right")
        self.lo, self.eq_lo, self.eq_hi, self.hi = bounds
        s_lo, e_lo, o_lo = _window(v, self.lo, self.eq_lo, tau)
        s_hi, e_hi, o_hi = _window(v, self.eq_hi, self.hi, tau)
        self.s = np.concatenate([s_lo, s_hi])
        self.entry = np.concatenate([e_lo, e_hi])
        self.other = np.concatenate([o_lo, o_hi])
        ranks = 1.0 + self.lo + 0.5 * (self.eq_hi - self.eq_lo)
        ranks += np.bincount(self.entry, weights=self.s, minlength=v.size).reshape(v.shape)
        self.ranks = self._unsort(ranks)

    def _unsort(self, x: np.ndarray) -> np.ndarray:
        out = np.empty_like(x)
        np.put_along_axis(out, self.order, x, axis=1)
        return out

    def vjp(self, upstream) -> np.ndarray:
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != self.order.shape:
            raise ValueError(f"upstream shape {upstream.shape} does not match {self.order.shape}")
        r, p = self.order.shape
        u = np.take_along_axis(upstream, self.order, axis=1)
        deriv = (1.0 - self.s) * self.s / self.tau * u.ravel()[self.entry]
        # d R_ij / d m_ij = sum_k deriv_ijk ; d R_ij / d m_ik = -deriv_ijk
        grad = np.zeros(r * p)
        grad += np.bincount(self.entry, weights=deriv, minlength=r * p)
        grad -= np.bincount(self.other, weights=deriv, minlength=r * p)
        # a tie group G of size g: sum over pairs of 0.25 / tau gives (g u_j - sum_G u) / (4 tau)
        csum = np.zeros((r, p + 1))
        np.cumsum(u, axis=1, out=csum[:, 1:])
        rows = np.arange(r)[:, None]
        group = csum[rows, self.eq_hi] - csum[rows, self.eq_lo]
        grad += (((self.eq_hi - self.eq_lo) * u - group) * (0.25 / self.tau)).ravel()
        return self._unsort(grad.reshape(r, p))


def rank_matrix(m, tau: float) -> np.ndarray:
    m = _as_matrix(m)
    _check_tau(tau)
    return _SortedRows(m, tau).ranks


def rank_matrix_grad(m, tau: float, upstream) -> np.ndarray:
    """Gradient of sum(upstream * rank_matrix(m, tau)) with respect to m."""
    m = _as_matrix(m)
    _check_tau(tau)
    return _SortedRows(m, tau).vjp(upstream)


def rank_matrix_vjp(m, tau: float):
    """Rank matrix plus a closure mapping an upstream gradient to d/dm.

    The closure reuses the sorted windows of the forward pass.
    """
    m = _as_matrix(m)
    _check_tau(tau)
    rows = _SortedRows(m, tau)
    return rows.ranks, rows.vjp


def hard_rank(m) -> np.ndarray:
    """Indicator-function limit: 1.5 + number of strictly smaller entries in the row."""
    m = np.asarray(m, dtype=np.float64)
    return 1.5 + (m[:, :, None] > m[:, None, :]).sum(axis=2)
