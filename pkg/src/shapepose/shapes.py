"""Small procedural meshes: platonic solids, subdivided spheres, grids, tubes."""

from __future__ import annotations

import numpy as np

from .mesh import Mesh


def tetrahedron() -> Mesh:
    v = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float)
    f = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    return Mesh(v, f)


def cube() -> Mesh:
    """Unit cube [0, 1]^3, two outward-facing triangles per side."""
    v = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    f = []
    for a, b, c, d in quads:
        f += [(a, b, c), (a, c, d)]
    return Mesh(v, np.array(f))


def icosahedron() -> Mesh:
    t = (1 + 5 ** 0.5) / 2
    v = np.array([[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
                  [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
                  [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], dtype=float)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
                  [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
                  [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
                  [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    return Mesh(v, f)


def icosphere(subdivisions: int = 3) -> Mesh:
    """Loop-style midpoint subdivision of the icosahedron projected to the unit sphere.

    Vertex counts: 12, 42, 162, 642, ...
    """
    m = icosahedron()
    v, f = [tuple(x) for x in m.vertices], m.faces.tolist()
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                p = (np.array(v[a]) + np.array(v[b])) / 2
                v.append(tuple(p / np.linalg.norm(p)))
                cache[key] = len(v) - 1
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        f = nf
    return Mesh(np.array(v), np.array(f))


def grid(nx: int = 10, ny: int = 10, spacing: float = 1.0) -> Mesh:
    """Planar nx-by-ny vertex grid in z=0, each quad split along its (i,j)-(i+1,j+1) diagonal."""
    xs, ys = np.meshgrid(np.arange(nx) * spacing, np.arange(ny) * spacing, indexing="ij")
    v = np.stack([xs.ravel(), ys.ravel(), np.zeros(nx * ny)], axis=1)
    idx = np.arange(nx * ny).reshape(nx, ny)
    f = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            a, b, c, d = idx[i, j], idx[i + 1, j], idx[i + 1, j + 1], idx[i, j + 1]
            f += [(a, b, c), (a, c, d)]
    return Mesh(v, np.array(f))


def capped_cylinder(rings: int = 12, segments: int = 12, length: float = 4.0, radius: float = 0.5) -> Mesh:
    """Closed tube along x with a pole vertex at each end."""
    xs = np.linspace(-length / 2, length / 2, rings)
    phi = 2 * np.pi * np.arange(segments) / segments
    v = [[x, radius * np.cos(p), radius * np.sin(p)] for x in xs for p in phi]
    v += [[-length / 2 - radius, 0, 0], [length / 2 + radius, 0, 0]]
    f = []
    for r in range(rings - 1):
        for s in range(segments):
            a = r * segments + s
            b = r * segments + (s + 1) % segments
            c, d = a + segments, b + segments
            f += [(a, b, d), (a, d, c)]
    s0, s1 = rings * segments, rings * segments + 1
    last = (rings - 1) * segments
    for s in range(segments):
        f.append((s0, (s + 1) % segments, s))
        f.append((s1, last + s, last + (s + 1) % segments))
    return Mesh(np.array(v, dtype=float), np.array(f))


def bend_about_z(vertices: np.ndarray, angle: float, pivot_x: float = 0.0) -> np.ndarray:
    """Rotate the part with x > pivot_x about the z axis through (pivot_x, 0, 0)."""
    out = vertices.copy()
    c, s = np.cos(angle), np.sin(angle)
    sel = vertices[:, 0] > pivot_x
    x, y = vertices[sel, 0] - pivot_x, vertices[sel, 1]
    out[sel, 0] = pivot_x + c * x - s * y
    out[sel, 1] = s * x + c * y
    return out
