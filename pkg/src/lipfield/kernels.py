"""Loop-heavy geometry kernels with a numba path and a pure-numpy path.

The numba path is used when numba imports and ``LIPFIELD_NUMBA`` is not
``"0"``. Both paths are always importable through ``NUMPY_KERNELS`` and
``NUMBA_KERNELS`` so they can be compared against each other.
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and os.environ.get("LIPFIELD_NUMBA", "1") != "0"

_CHUNK = 2048

# Marching squares. Corners of cell (i, j): c0=(i,j) c1=(i+1,j) c2=(i+1,j+1)
# c3=(i,j+1); edges e0=c0c1 e1=c1c2 e2=c2c3 e3=c3c0. Case bit k is set when
# corner k lies strictly above the iso value. Rows are edge pairs; saddle
# cases 5 and 10 list (center below, center above) variants in slots 0-1/2-3.
_NONE = (-1, -1)
MS_TABLE = np.array([
    [_NONE, _NONE, _NONE, _NONE],      # 0000
    [(3, 0), _NONE, _NONE, _NONE],     # 0001
    [(0, 1), _NONE, _NONE, _NONE],     # 0010
    [(3, 1), _NONE, _NONE, _NONE],     # 0011
    [(1, 2), _NONE, _NONE, _NONE],     # 0100
    [(3, 0), (1, 2), (0, 1), (2, 3)],  # 0101 saddle
    [(0, 2), _NONE, _NONE, _NONE],     # 0110
    [(3, 2), _NONE, _NONE, _NONE],     # 0111
    [(2, 3), _NONE, _NONE, _NONE],     # 1000
    [(2, 0), _NONE, _NONE, _NONE],     # 1001
    [(0, 1), (2, 3), (3, 0), (1, 2)],  # 1010 saddle
    [(2, 1), _NONE, _NONE, _NONE],     # 1011
    [(1, 3), _NONE, _NONE, _NONE],     # 1100
    [(1, 0), _NONE, _NONE, _NONE],     # 1101
    [(0, 3), _NONE, _NONE, _NONE],     # 1110
    [_NONE, _NONE, _NONE, _NONE],      # 1111
], dtype=np.int64)


# ---------------------------------------------------------------- numpy path

def polygon_sdf_numpy(points, verts):
    p = points[:, None, :]
    a = verts[None, :, :]
    b = np.roll(verts, -1, axis=0)[None, :, :]
    ab = b - a
    ap = p - a
    denom = (ab * ab).sum(-1)
    h = np.clip((ap * ab).sum(-1) / np.where(denom > 0, denom, 1.0), 0.0, 1.0)
    d = ap - ab * h[..., None]
    dist = np.sqrt((d * d).sum(-1).min(axis=1))
    py = p[..., 1]
    ay, by = a[..., 1], b[..., 1]
    straddle = (ay > py) != (by > py)
    with np.errstate(divide="ignore", invalid="ignore"):
        xcross = a[..., 0] + (py - ay) * ab[..., 0] / (by - ay)
    crossings = (straddle & (p[..., 0] < xcross)).sum(axis=1)
    return np.where(crossings % 2 == 1, -dist, dist)


def min_dists_numpy(a, b):
    out = np.empty(a.shape[0])
    for s in range(0, a.shape[0], _CHUNK):
        blk = a[s:s + _CHUNK]
        d2 = ((blk[:, None, :] - b[None, :, :]) ** 2).sum(-1)
        out[s:s + _CHUNK] = np.sqrt(d2.min(axis=1))
    return out


def edt_sq_numpy(mask):
    """Squared distance from every pixel to the nearest True pixel (brute force)."""
    feat = np.argwhere(mask).astype(np.float64)
    out = np.full(mask.shape, np.inf)
    if feat.size == 0:
        return out
    idx = np.indices(mask.shape).reshape(2, -1).T.astype(np.float64)
    flat = out.reshape(-1)
    for s in range(0, idx.shape[0], _CHUNK):
        blk = idx[s:s + _CHUNK]
        flat[s:s + _CHUNK] = ((blk[:, None, :] - feat[None, :, :]) ** 2).sum(-1).min(axis=1)
    return out


def _edge_geometry(grid, iso, ci, cj, edge):
    """Edge id and crossing point (index coords) for arrays of cells."""
    ny = grid.shape[1]
    if edge == 0:
        i0, j0, i1, j1 = ci, cj, ci + 1, cj
    elif edge == 1:
        i0, j0, i1, j1 = ci + 1, cj, ci + 1, cj + 1
    elif edge == 2:
        i0, j0, i1, j1 = ci, cj + 1, ci + 1, cj + 1
    else:
        i0, j0, i1, j1 = ci, cj, ci, cj + 1
    v0, v1 = grid[i0, j0], grid[i1, j1]
    s = (iso - v0) / (v1 - v0)
    horizontal = edge in (0, 2)
    eid = 2 * (i0 * ny + j0) + (0 if horizontal else 1)
    pts = np.stack([i0 + s * (i1 - i0), j0 + s * (j1 - j0)], axis=-1)
    return eid, pts


def march_cells_numpy(grid, iso):
    nx, ny = grid.shape
    above = grid > iso
    case = (above[:-1, :-1].astype(np.int64) | (above[1:, :-1] << 1)
            | (above[1:, 1:] << 2) | (above[:-1, 1:] << 3))
    center = 0.25 * (grid[:-1, :-1] + grid[1:, :-1] + grid[1:, 1:] + grid[:-1, 1:])
    parts = []
    for c in range(1, 15):
        ci, cj = np.nonzero(case == c)
        if ci.size == 0:
            continue
        cell = ci * (ny - 1) + cj
        if c in (5, 10):
            hi = center[ci, cj] > iso
            slots = [(0, ~hi), (1, ~hi), (2, hi), (3, hi)]
        else:
            slots = [(0, np.ones(ci.size, dtype=bool))]
        for slot, sel in slots:
            if not sel.any():
                continue
            ea, eb = MS_TABLE[c, slot]
            ida, pa = _edge_geometry(grid, iso, ci[sel], cj[sel], ea)
            idb, pb = _edge_geometry(grid, iso, ci[sel], cj[sel], eb)
            parts.append((cell[sel], np.full(sel.sum(), slot % 2),
                          np.stack([ida, idb], axis=1), np.stack([pa, pb], axis=1)))
    if not parts:
        return np.zeros((0, 2), np.int64), np.zeros((0, 2, 2))
    cells = np.concatenate([p[0] for p in parts])
    sub = np.concatenate([p[1] for p in parts])
    order = np.lexsort((sub, cells))
    ids = np.concatenate([p[2] for p in parts])[order]
    pts = np.concatenate([p[3] for p in parts])[order]
    return ids, pts


NUMPY_KERNELS = {
    "polygon_sdf": polygon_sdf_numpy,
    "min_dists": min_dists_numpy,
    "edt_sq": edt_sq_numpy,
    "march_cells": march_cells_numpy,
}


# ---------------------------------------------------------------- numba path

def _build_numba_kernels():
    njit = numba.njit(cache=True)

    @njit
    def polygon_sdf(points, verts):
        n, m = points.shape[0], verts.shape[0]
        out = np.empty(n)
        for k in range(n):
            px, py = points[k, 0], points[k, 1]
            best = np.inf
            inside = False
            for e in range(m):
                ax, ay = verts[e, 0], verts[e, 1]
                bx, by = verts[(e + 1) % m, 0], verts[(e + 1) % m, 1]
                abx, aby = bx - ax, by - ay
                apx, apy = px - ax, py - ay
                den = abx * abx + aby * aby
                h = (apx * abx + apy * aby) / den if den > 0 else 0.0
                h = min(max(h, 0.0), 1.0)
                dx, dy = apx - abx * h, apy - aby * h
                d2 = dx * dx + dy * dy
                if d2 < best:
                    best = d2
                if (ay > py) != (by > py):
                    if px < ax + (py - ay) * abx / (by - ay):
                        inside = not inside
            out[k] = -np.sqrt(best) if inside else np.sqrt(best)
        return out

    @njit
    def min_dists(a, b):
        out = np.empty(a.shape[0])
        d = a.shape[1]
        for i in range(a.shape[0]):
            best = np.inf
            for j in range(b.shape[0]):
                s = 0.0
                for k in range(d):
                    t = a[i, k] - b[j, k]
                    s += t * t
                if s < best:
                    best = s
            out[i] = np.sqrt(best)
        return out

    @njit
    def _edt_1d(f, out, v, z):
        # lower envelope of parabolas (Felzenszwalb & Huttenlocher)
        n = f.shape[0]
        k = -1
        for q in range(n):
            if f[q] == np.inf:
                continue
            if k < 0:
                k = 0
                v[0] = q
                z[0] = -np.inf
                z[1] = np.inf
                continue
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
            while s <= z[k]:
                k -= 1
                s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
            k += 1
            v[k] = q
            z[k] = s
            z[k + 1] = np.inf
        if k < 0:
            for q in range(n):
                out[q] = np.inf
            return
        k = 0
        for q in range(n):
            while z[k + 1] < q:
                k += 1
            out[q] = (q - v[k]) * (q - v[k]) + f[v[k]]

    @njit
    def edt_sq(mask):
        nr, nc = mask.shape
        g = np.empty((nr, nc))
        n = max(nr, nc)
        v = np.empty(n, np.int64)
        z = np.empty(n + 1)
        buf = np.empty(n)
        col = np.empty(nr)
        for c in range(nc):
            for r in range(nr):
                col[r] = 0.0 if mask[r, c] else np.inf
            _edt_1d(col, buf[:nr], v, z)
            for r in range(nr):
                g[r, c] = buf[r]
        out = np.empty((nr, nc))
        for r in range(nr):
            _edt_1d(g[r].copy(), buf[:nc], v, z)
            for c in range(nc):
                out[r, c] = buf[c]
        return out

    @njit
    def _edge(grid, iso, i, j, edge, ny):
        if edge == 0:
            i0, j0, i1, j1 = i, j, i + 1, j
        elif edge == 1:
            i0, j0, i1, j1 = i + 1, j, i + 1, j + 1
        elif edge == 2:
            i0, j0, i1, j1 = i, j + 1, i + 1, j + 1
        else:
            i0, j0, i1, j1 = i, j, i, j + 1
        v0, v1 = grid[i0, j0], grid[i1, j1]
        s = (iso - v0) / (v1 - v0)
        eid = 2 * (i0 * ny + j0) + (0 if (edge == 0 or edge == 2) else 1)
        return eid, i0 + s * (i1 - i0), j0 + s * (j1 - j0)

    @njit
    def march_cells(grid, iso, table):
        nx, ny = grid.shape
        cap = 2 * (nx - 1) * (ny - 1)
        ids = np.empty((cap, 2), np.int64)
        pts = np.empty((cap, 2, 2))
        k = 0
        for i in range(nx - 1):
            for j in range(ny - 1):
                c = 0
                if grid[i, j] > iso:
                    c |= 1
                if grid[i + 1, j] > iso:
                    c |= 2
                if grid[i + 1, j + 1] > iso:
                    c |= 4
                if grid[i, j + 1] > iso:
                    c |= 8
                if c == 0 or c == 15:
                    continue
                if c == 5 or c == 10:
                    center = 0.25 * (grid[i, j] + grid[i + 1, j]
                                     + grid[i + 1, j + 1] + grid[i, j + 1])
                    first = 2 if center > iso else 0
                    nseg = 2
                else:
                    first = 0
                    nseg = 1
                for s in range(first, first + nseg):
                    for end in range(2):
                        eid, x, y = _edge(grid, iso, i, j, table[c, s, end], ny)
                        ids[k, end] = eid
                        pts[k, end, 0] = x
                        pts[k, end, 1] = y
                    k += 1
        return ids[:k].copy(), pts[:k].copy()

    def march(grid, iso):
        return march_cells(grid, float(iso), MS_TABLE)

    return {
        "polygon_sdf": polygon_sdf,
        "min_dists": min_dists,
        "edt_sq": edt_sq,
        "march_cells": march,
    }


NUMBA_KERNELS = _build_numba_kernels() if HAVE_NUMBA else {}
_ACTIVE = NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS


def polygon_sdf(points: np.ndarray, verts: np.ndarray) -> np.ndarray:
    """Exact signed distance to a closed polygon, negative inside (even-odd)."""
    return _ACTIVE["polygon_sdf"](np.ascontiguousarray(points, np.float64),
                                  np.ascontiguousarray(verts, np.float64))


def min_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """For every row of ``a``, Euclidean distance to its nearest row of ``b``."""
    return _ACTIVE["min_dists"](np.ascontiguousarray(a, np.float64),
                                np.ascontiguousarray(b, np.float64))


def edt_sq(mask: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distance transform to the True pixels of ``mask``."""
    return _ACTIVE["edt_sq"](np.ascontiguousarray(mask, dtype=np.bool_))


def march_cells(grid: np.ndarray, iso: float):
    """Marching-squares segments as (edge id pairs, endpoint pairs in index coords)."""
    return _ACTIVE["march_cells"](np.ascontiguousarray(grid, np.float64), float(iso))
