from __future__ import annotations

import itertools

import numpy as np

from .errors import ContractViolation, DegenerateGeometryError

_NEIGHBOR_OFFSETS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)
_EMPTY_PAIRS = np.zeros((0, 2), dtype=np.int64)


class SpatialHashGrid:
    """Uniform grid keyed by integer cell coordinates.

    Radius queries are exact for any radius up to ``cell_size``.
    """

    def __init__(self, cell_size: float):
        if not cell_size > 0:
            raise ContractViolation(f"cell_size must be positive, got {cell_size}")
        self.cell_size = float(cell_size)
        self.cells: dict[tuple[int, int, int], np.ndarray] = {}
        self.positions = np.zeros((0, 3))

    def build(self, positions: np.ndarray) -> "SpatialHashGrid":
        self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        self.cells = {}
        if len(self.positions) == 0:
            return self
        keys = np.floor(self.positions / self.cell_size).astype(np.int64)
        order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
        sorted_keys = keys[order]
        bounds = np.flatnonzero(np.any(np.diff(sorted_keys, axis=0) != 0, axis=1)) + 1
        for chunk in np.split(order, bounds):
            self.cells[tuple(int(v) for v in keys[chunk[0]])] = np.sort(chunk)
        return self

    def candidates(self, cell: tuple[int, int, int]) -> np.ndarray:
        found = [
            self.cells[key]
            for key in (tuple(int(v) for v in np.add(cell, off)) for off in _NEIGHBOR_OFFSETS)
            if key in self.cells
        ]
        return np.concatenate(found) if found else np.zeros(0, dtype=np.int64)

    def query_pairs(self, radius: float) -> np.ndarray:
        """All ordered (sender, receiver) pairs with distance <= radius, sorted by (receiver, sender)."""
        if radius > self.cell_size * (1.0 + 1e-12):
            raise ContractViolation(f"query radius {radius} exceeds cell size {self.cell_size}")
        r2 = radius * radius
        senders, receivers = [], []
        for cell, members in self.cells.items():
            cand = self.candidates(cell)
            diff = self.positions[members][:, None, :] - self.positions[cand][None, :, :]
            d2 = np.sum(diff * diff, axis=-1)
            hit = (d2 <= r2) & (members[:, None] != cand[None, :])
            ri, si = np.nonzero(hit)
            receivers.append(members[ri])
            senders.append(cand[si])
        if not senders:
            return _EMPTY_PAIRS.copy()
        s = np.concatenate(senders)
        r = np.concatenate(receivers)
        order = np.lexsort((s, r))
        return np.stack([s[order], r[order]], axis=1).astype(np.int64)


def neighbor_pairs(positions: np.ndarray, radius: float) -> np.ndarray:
    """Directed neighbor pairs as an [E, 2] array of (sender, receiver)."""
    if not radius > 0:
        raise ContractViolation(f"radius must be positive, got {radius}")
    return SpatialHashGrid(radius).build(positions).query_pairs(radius)


def shape_match(current: np.ndarray, rest: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rigid transform (R, t) with ``R @ rest_k + t ~ current_k``.

    Kabsch: SVD of the cross-covariance with a determinant correction so R is
    a proper rotation.
    """
    current = np.asarray(current, dtype=np.float64)
    rest = np.asarray(rest, dtype=np.float64)
    if current.shape != rest.shape or rest.ndim != 2 or rest.shape[1] != 3:
        raise ContractViolation(f"shape_match shape mismatch {current.shape} vs {rest.shape}")
    if rest.shape[0] < 3:
        raise DegenerateGeometryError(f"shape_match needs >= 3 points, got {rest.shape[0]}")
    rest_c = rest.mean(axis=0)
    cur_c = current.mean(axis=0)
    a = rest - rest_c
    b = current - cur_c
    sv = np.linalg.svd(a, compute_uv=False)
    if sv[0] <= 0 or sv[1] <= 1e-9 * sv[0]:
        raise DegenerateGeometryError("rest shape is collinear or collapsed")
    u, _, vt = np.linalg.svd(a.T @ b)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return rot, cur_c - rot @ rest_c


def project_rigid(current: np.ndarray, rest: np.ndarray) -> np.ndarray:
    """Replace ``current`` by the rest shape under its best-fit rigid transform."""
    rot, trans = shape_match(current, rest)
    return rest @ rot.T + trans


def pairwise_distances(points: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - points[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))
