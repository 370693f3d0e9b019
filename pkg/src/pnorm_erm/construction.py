"""Explicit nonzero normal vector to the span of fewer than d points."""

from __future__ import annotations

import numpy as np

from pnorm_erm.errors import DomainError


def orthogonal_complement(points, basis=None, rtol=1e-8):
    """Return ``(I - A^+ A) b_k`` for the first basis vector ``b_k`` with a nonzero projection.

    ``points`` is an ``m x d`` array (``1 <= m <= d - 1``; ``m = 0`` is accepted
    and returns ``b_1``).  ``basis`` is a ``d x d`` array whose rows form an
    ordered basis, the standard basis by default.  A projection counts as
    nonzero when its norm exceeds ``rtol * |b_k|``.
    """
    pts = np.asarray(points, dtype=float)
    if basis is not None:
        basis = np.asarray(basis, dtype=float)
        d = basis.shape[1]
    else:
        if pts.ndim != 2:
            raise DomainError("points must be an m x d array")
        d = pts.shape[1]
        basis = np.eye(d)
    pts = pts.reshape(-1, d)
    m = pts.shape[0]
    if m > d - 1:
        raise DomainError(f"need at most d - 1 = {d - 1} points, got {m}")
    if m == 0:
        return basis[0].copy()
    proj = np.eye(d) - np.linalg.pinv(pts) @ pts
    for b in basis:
        v = proj @ b
        if np.linalg.norm(v) > rtol * np.linalg.norm(b):
            return v
    # cannot happen for a genuine basis: the kernel of A is nontrivial
    raise DomainError("basis does not span R^d")
