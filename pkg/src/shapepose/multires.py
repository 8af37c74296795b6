"""Quadric-error-metric decimation and the sparse restrict/prolong operators between levels."""

from __future__ import annotations

import hashlib
import heapq
import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh, MeshError, is_manifold

BOUNDARY_WEIGHT = 1e3
SINGULAR_COND = 1e12


class DecimationStall(MeshError):
    pass


def face_quadrics(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Per-vertex sum of plane quadrics p p^T of incident faces, (N, 4, 4)."""
    a, b, c = vertices[faces[:, 0]], vertices[faces[:, 1]], vertices[faces[:, 2]]
    n = np.cross(b - a, c - a)
    norm = np.linalg.norm(n, axis=1)
    ok = norm > 1e-300
    n[ok] /= norm[ok, None]
    n[~ok] = 0.0
    p = np.concatenate([n, -np.einsum("ij,ij->i", n, a)[:, None]], axis=1)
    K = p[:, :, None] * p[:, None, :]
    Q = np.zeros((len(vertices), 4, 4))
    for k in range(3):
        np.add.at(Q, faces[:, k], K)
    return Q


def boundary_quadrics(vertices: np.ndarray, faces: np.ndarray, weight: float = BOUNDARY_WEIGHT) -> np.ndarray:
    """Penalty planes through each boundary edge, perpendicular to its face."""
    Q = np.zeros((len(vertices), 4, 4))
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    fid = np.tile(np.arange(len(faces)), 3)
    key = np.sort(e, axis=1)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    bnd = counts[inv.ravel()] == 1
    for (i, j), f in zip(e[bnd], fid[bnd]):
        a, b, c = vertices[faces[f]]
        fn = np.cross(b - a, c - a)
        d = vertices[j] - vertices[i]
        n = np.cross(d, fn)
        nn = np.linalg.norm(n)
        if nn < 1e-300:
            continue
        n /= nn
        p = np.append(n, -n @ vertices[i])
        K = weight * np.outer(p, p)
        Q[i] += K
        Q[j] += K
    return Q


def quadric_error(Q: np.ndarray, point: np.ndarray) -> float:
    h = np.append(point, 1.0)
    return float(max(h @ Q @ h, 0.0))


def edge_collapse_cost(Qa: np.ndarray, Qb: np.ndarray, va, vb) -> tuple[float, np.ndarray]:
    """Cost and optimal placement for collapsing edge (a, b) under Q = Qa + Qb.

    Falls back to the cheapest of {midpoint, va, vb} (midpoint wins ties) when the
    3x3 block is singular.
    """
    Q = Qa + Qb
    A, bvec = Q[:3, :3], Q[:3, 3]
    va, vb = np.asarray(va, float), np.asarray(vb, float)
    if np.linalg.cond(A) <= SINGULAR_COND:
        p = np.linalg.solve(A, -bvec)
        return quadric_error(Q, p), p
    best = None
    for cand in ((va + vb) / 2, va, vb):
        c = quadric_error(Q, cand)
        if best is None or c < best[0]:
            best = (c, cand)
    return best[0], best[1]


def _face_normal(p0, p1, p2):
    return np.cross(p1 - p0, p2 - p0)


def decimate(mesh: Mesh, target: int, boundary_weight: float = BOUNDARY_WEIGHT):
    """Collapse edges in increasing QEM cost until ``target`` vertices remain.

    Returns (coarse Mesh, kept fine-vertex indices in coarse order).
    """
    V = mesh.vertices.copy()
    faces = [list(f) for f in mesh.faces.tolist()]
    n = len(V)
    if target < 4:
        raise ValueError("cannot decimate below 4 vertices")
    Q = face_quadrics(V, mesh.faces) + boundary_quadrics(V, mesh.faces, boundary_weight)
    alive = np.ones(n, dtype=bool)
    face_alive = [True] * len(faces)
    vfaces: list[set[int]] = [set() for _ in range(n)]
    for fi, f in enumerate(faces):
        for v in f:
            vfaces[v].add(fi)
    version = [0] * n

    def neighbours(v):
        out = set()
        for fi in vfaces[v]:
            out.update(faces[fi])
        out.discard(v)
        return out

    def edge_faces(a, b):
        return [fi for fi in vfaces[a] if b in faces[fi]]

    def is_boundary_vertex(v):
        return any(len(edge_faces(v, u)) == 1 for u in neighbours(v))

    heap: list = []
    counter = itertools.count()

    def push(a, b):
        if a > b:
            a, b = b, a
        cost, pos = edge_collapse_cost(Q[a], Q[b], V[a], V[b])
        heapq.heappush(heap, (cost, a, b, version[a], version[b], next(counter), pos))

    for a in range(n):
        for b in sorted(neighbours(a)):
            if a < b:
                push(a, b)

    count = n
    while count > target:
        if not heap:
            raise DecimationStall(f"no legal collapse left at {count} vertices (target {target})")
        cost, a, b, va_, vb_, _, pos = heapq.heappop(heap)
        if not (alive[a] and alive[b]) or version[a] != va_ or version[b] != vb_:
            continue
        shared = edge_faces(a, b)
        if not shared:
            continue
        common = neighbours(a) & neighbours(b)
        if len(common) != len(shared):
            continue  # link condition
        if len(shared) == 2 and is_boundary_vertex(a) and is_boundary_vertex(b):
            continue  # would pinch two boundary loops together
        # survivor: endpoint nearer the new position, lower index on ties
        da, db = np.sum((V[a] - pos) ** 2), np.sum((V[b] - pos) ** 2)
        s, r = (a, b) if da <= db else (b, a)
        ok = True
        for v in (a, b):
            for fi in vfaces[v]:
                if fi in shared:
                    continue
                f = faces[fi]
                old = _face_normal(*V[f])
                newp = [pos if u in (a, b) else V[u] for u in f]
                new = _face_normal(*newp)
                if np.linalg.norm(new) < 1e-12 * max(np.linalg.norm(old), 1e-300) or old @ new <= 0:
                    ok = False
                    break
            if not ok:
                break
        if not ok:
            continue
        # apply the collapse
        for fi in shared:
            face_alive[fi] = False
            for u in faces[fi]:
                vfaces[u].discard(fi)
        for fi in list(vfaces[r]):
            faces[fi] = [s if u == r else u for u in faces[fi]]
            vfaces[s].add(fi)
        vfaces[r] = set()
        alive[r] = False
        V[s] = pos
        Q[s] = Q[a] + Q[b]
        count -= 1
        touched = {s} | neighbours(s)
        for u in touched:
            version[u] += 1
        for u in sorted(touched):
            for w in sorted(neighbours(u)):
                push(u, w)

    kept = np.nonzero(alive)[0]
    remap = -np.ones(n, dtype=np.int64)
    remap[kept] = np.arange(len(kept))
    new_faces = np.array([[remap[u] for u in f] for f, al in zip(faces, face_alive) if al], dtype=np.int64)
    coarse = Mesh(V[kept], new_faces)
    if not is_manifold(coarse.faces):
        raise MeshError("decimation produced a non-manifold mesh")
    return coarse, kept


def closest_barycentric(points: np.ndarray, tri: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Barycentric coordinates of the closest point on each triangle, and squared distance.

    ``points`` (P, 3), ``tri`` (T, 3, 3) -> bary (P, T, 3), dist2 (P, T).
    Follows the region classification of Ericson, Real-Time Collision Detection 5.1.5.
    """
    p = points[:, None, :]
    a, b, c = tri[None, :, 0], tri[None, :, 1], tri[None, :, 2]
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.sum(ab * ap, -1)
    d2 = np.sum(ac * ap, -1)
    bp = p - b
    d3 = np.sum(ab * bp, -1)
    d4 = np.sum(ac * bp, -1)
    cp = p - c
    d5 = np.sum(ab * cp, -1)
    d6 = np.sum(ac * cp, -1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    shape = d1.shape
    u = np.zeros(shape)
    v = np.zeros(shape)
    w = np.zeros(shape)
    done = np.zeros(shape, dtype=bool)

    def assign(mask, uu, vv, ww):
        m = mask & ~done
        u[m], v[m], w[m] = uu[m] if np.ndim(uu) else uu, vv[m] if np.ndim(vv) else vv, ww[m] if np.ndim(ww) else ww
        done[m] = True

    with np.errstate(divide="ignore", invalid="ignore"):
        assign((d1 <= 0) & (d2 <= 0), 1.0, 0.0, 0.0)
        assign((d3 >= 0) & (d4 <= d3), 0.0, 1.0, 0.0)
        t = d1 / (d1 - d3)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), 1 - t, t, np.zeros(shape))
        assign((d6 >= 0) & (d5 <= d6), 0.0, 0.0, 1.0)
        t = d2 / (d2 - d6)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), 1 - t, np.zeros(shape), t)
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), np.zeros(shape), 1 - t, t)
        denom = va + vb + vc
        vv, ww = vb / denom, vc / denom
        assign(np.ones(shape, dtype=bool), 1 - vv - ww, vv, ww)
    bary = np.stack([u, v, w], -1)
    bary = np.clip(np.nan_to_num(bary), 0.0, 1.0)
    bary /= bary.sum(-1, keepdims=True)
    q = bary[..., 0:1] * a + bary[..., 1:2] * b + bary[..., 2:3] * c
    return bary, np.sum((p - q) ** 2, -1)


def upsampling_matrix(fine: np.ndarray, coarse: Mesh) -> sp.csr_matrix:
    """Row-stochastic (N_fine x N_coarse) barycentric projection onto the nearest coarse triangle."""
    tri = coarse.vertices[coarse.faces]
    rows, cols, vals = [], [], []
    for start in range(0, len(fine), 256):
        pts = fine[start:start + 256]
        bary, d2 = closest_barycentric(pts, tri)
        best = np.argmin(d2, axis=1)  # first minimum: lowest face index on ties
        bw = bary[np.arange(len(pts)), best]
        for k in range(3):
            rows.append(np.arange(start, start + len(pts)))
            cols.append(coarse.faces[best, k])
            vals.append(bw[:, k])
    M = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(len(fine), coarse.num_vertices)).tocsr()
    M.eliminate_zeros()
    return M


def selection_matrix(kept: np.ndarray, num_fine: int) -> sp.csr_matrix:
    k = len(kept)
    return sp.csr_matrix((np.ones(k), (np.arange(k), kept)), shape=(k, num_fine))


@dataclass(frozen=True, eq=False)
class MeshHierarchy:
    levels: list  # Mesh per level, fine to coarse
    down_ops: list  # csr (N_{k+1}, N_k)
    up_ops: list  # csr (N_k, N_{k+1})
    factor: float = 4.0

    @property
    def sizes(self) -> list[int]:
        return [m.num_vertices for m in self.levels]

    def __len__(self):
        return len(self.levels)


def build_hierarchy(template: Mesh, num_levels: int = 4, factor: float = 4.0) -> MeshHierarchy:
    if factor <= 1:
        raise ValueError(f"factor must be > 1, got {factor}")
    if num_levels < 1:
        raise ValueError("num_levels must be >= 1")
    if not is_manifold(template.faces):
        raise MeshError("template must be manifold")
    levels, downs, ups = [template], [], []
    for k in range(1, num_levels):
        fine = levels[-1]
        target = int(round(fine.num_vertices / factor))
        try:
            coarse, kept = decimate(fine, target)
        except DecimationStall as exc:
            raise DecimationStall(f"level {k}: {exc}") from exc
        levels.append(coarse)
        downs.append(selection_matrix(kept, fine.num_vertices))
        ups.append(upsampling_matrix(fine.vertices, coarse))
    return MeshHierarchy(levels, downs, ups, factor)


def restrict(features: np.ndarray, hierarchy: MeshHierarchy, k: int) -> np.ndarray:
    return _apply(hierarchy.down_ops[k], features)


def prolong(features: np.ndarray, hierarchy: MeshHierarchy, k: int) -> np.ndarray:
    return _apply(hierarchy.up_ops[k], features)


def _apply(M: sp.spmatrix, x: np.ndarray) -> np.ndarray:
    """M applied along the vertex axis of (N, C) or (B, N, C) features."""
    x = np.asarray(x)
    if x.ndim == 1:
        x = x[:, None]
        squeeze = True
    else:
        squeeze = False
    axis = 0 if x.ndim == 2 else 1
    if x.shape[axis] != M.shape[1]:
        raise ValueError(f"feature rows {x.shape[axis]} do not match operator columns {M.shape[1]}")
    if x.ndim == 2:
        out = M @ x
    else:
        b, n, c = x.shape
        out = (M @ x.transpose(1, 0, 2).reshape(n, b * c)).reshape(M.shape[0], b, c).transpose(1, 0, 2)
    return out[:, 0] if squeeze else out


def hierarchy_key(template: Mesh, num_levels: int, factor: float) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(template.vertices).tobytes())
    h.update(np.ascontiguousarray(template.faces).tobytes())
    h.update(json.dumps({"num_levels": num_levels, "factor": float(factor)}).encode())
    return h.hexdigest()[:16]


HIERARCHY_FORMAT = 1


def hierarchy_arrays(h: MeshHierarchy, prefix: str = "") -> dict:
    out = {f"{prefix}format": np.array(HIERARCHY_FORMAT),
           f"{prefix}sizes": np.array(h.sizes), f"{prefix}factor": np.array(h.factor)}
    for k, m in enumerate(h.levels):
        out[f"{prefix}level{k}_vertices"] = m.vertices
        out[f"{prefix}level{k}_faces"] = m.faces
    for name, ops in (("down", h.down_ops), ("up", h.up_ops)):
        for k, M in enumerate(ops):
            c = M.tocoo()
            out[f"{prefix}{name}{k}_rows"] = c.row.astype(np.int64)
            out[f"{prefix}{name}{k}_cols"] = c.col.astype(np.int64)
            out[f"{prefix}{name}{k}_vals"] = c.data
            out[f"{prefix}{name}{k}_shape"] = np.array(M.shape)
    return out


def hierarchy_from_arrays(d, prefix: str = "") -> MeshHierarchy:
    if int(d[f"{prefix}format"]) != HIERARCHY_FORMAT:
        raise ValueError("unsupported hierarchy format version")
    sizes = d[f"{prefix}sizes"]
    levels = [Mesh(d[f"{prefix}level{k}_vertices"], d[f"{prefix}level{k}_faces"]) for k in range(len(sizes))]

    def op(name, k):
        shape = tuple(int(s) for s in d[f"{prefix}{name}{k}_shape"])
        return sp.csr_matrix((d[f"{prefix}{name}{k}_vals"],
                              (d[f"{prefix}{name}{k}_rows"], d[f"{prefix}{name}{k}_cols"])), shape=shape)

    n = len(sizes) - 1
    return MeshHierarchy(levels, [op("down", k) for k in range(n)], [op("up", k) for k in range(n)],
                         float(d[f"{prefix}factor"]))


def save_hierarchy(h: MeshHierarchy, path) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, **hierarchy_arrays(h))


def load_hierarchy(path) -> MeshHierarchy:
    with np.load(path) as d:
        return hierarchy_from_arrays(d)


def cached_hierarchy(template: Mesh, num_levels: int, factor: float, cache_dir) -> MeshHierarchy:
    """Load a hierarchy from ``cache_dir`` keyed by template hash + parameters, building on a miss."""
    cache_dir = Path(cache_dir)
    path = cache_dir / f"hierarchy-{hierarchy_key(template, num_levels, factor)}.npz"
    if path.exists():
        return load_hierarchy(path)
    h = build_hierarchy(template, num_levels, factor)
    cache_dir.mkdir(parents=True, exist_ok=True)
    save_hierarchy(h, path)
    return h
