"""Registered triangle meshes, topology queries and pose-invariant augmentation."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np


class MeshError(ValueError):
    pass


class TopologyMismatch(MeshError):
    pass


def topology_token(faces: np.ndarray, num_vertices: int) -> str:
    """Stable hash identifying a connectivity class (faces + vertex count)."""
    h = hashlib.sha1()
    h.update(np.int64(num_vertices).tobytes())
    h.update(np.ascontiguousarray(faces, dtype=np.int64).tobytes())
    return h.hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray
    topology_id: str = ""
    units: str = "dimensionless"

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64)
        f = np.array(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must have shape (N, 3), got {v.shape}")
        if f.size == 0:
            f = f.reshape(0, 3)
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshError(f"non-triangle face: faces have shape {f.shape}")
        n = len(v)
        if f.size and (f.min() < 0 or f.max() >= n):
            bad = np.nonzero((f < 0) | (f >= n))[0]
            raise MeshError(f"face index out of range in faces {bad[:10].tolist()} (N={n})")
        degenerate = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        if degenerate.any():
            raise MeshError(f"degenerate faces {np.nonzero(degenerate)[0][:10].tolist()}")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if not self.topology_id:
            object.__setattr__(self, "topology_id", topology_token(f, n))

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices) -> "Mesh":
        """Same connectivity, new positions."""
        vertices = np.asarray(vertices, dtype=np.float64)
        if vertices.shape != self.vertices.shape:
            raise TopologyMismatch(
                f"vertex array shape {vertices.shape} does not match {self.vertices.shape}")
        return Mesh(vertices, self.faces, self.topology_id, self.units)

    def centroid(self) -> np.ndarray:
        return self.vertices.mean(axis=0)

    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))

    def check_same_topology(self, other: "Mesh") -> None:
        if self.topology_id != other.topology_id:
            raise TopologyMismatch(
                f"topology {other.topology_id} does not match {self.topology_id}")


def center(mesh: Mesh) -> Mesh:
    return mesh.with_vertices(mesh.vertices - mesh.vertices.mean(axis=0))


def edges_of(faces: np.ndarray) -> np.ndarray:
    """Unique undirected edges as sorted (a < b) pairs, lexicographically ordered."""
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


@dataclass(frozen=True, eq=False)
class Adjacency:
    """One-ring neighbourhoods, ordered counterclockwise about the outward normal.

    ``one_ring[i]`` starts at the lowest-index neighbour for closed fans and at
    the first boundary neighbour for open fans.
    """

    one_ring: tuple
    edges: np.ndarray  # (E, 2) unique undirected edges, a < b
    boundary_vertices: np.ndarray = field(repr=False)

    @property
    def num_vertices(self) -> int:
        return len(self.one_ring)

    def degrees(self) -> np.ndarray:
        return np.array([len(r) for r in self.one_ring])

    def directed_edges(self) -> tuple[np.ndarray, np.ndarray]:
        """(i, j) for every j in N(i), grouped by i."""
        src = np.concatenate([np.full(len(r), i) for i, r in enumerate(self.one_ring)])
        dst = np.concatenate([np.asarray(r, dtype=np.int64) for r in self.one_ring])
        return src.astype(np.int64), dst

    def incident_edges(self, vertices: np.ndarray) -> list[np.ndarray]:
        """Per-vertex edge vectors v_j - v_i in one-ring order."""
        return [vertices[list(r)] - vertices[i] for i, r in enumerate(self.one_ring)]


def _order_fan(i: int, pairs: list[tuple[int, int]]) -> list[int]:
    nxt: dict[int, int] = {}
    prev: dict[int, int] = {}
    for a, b in pairs:
        nxt[a] = b
        prev[b] = a
    neighbours = sorted(set(nxt) | set(prev))
    ring: list[int] = []
    seen: set[int] = set()
    # open fans first, from their boundary start, then closed loops from the lowest index
    starts = [n for n in neighbours if n not in prev] + neighbours
    for s in starts:
        if s in seen:
            continue
        cur = s
        while cur is not None and cur not in seen:
            ring.append(cur)
            seen.add(cur)
            cur = nxt.get(cur)
    return ring


def build_adjacency(mesh: Mesh) -> Adjacency:
    faces = mesh.faces
    n = mesh.num_vertices
    e = np.sort(np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]), axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    if (counts > 2).any():
        bad = uniq[counts > 2]
        raise MeshError(f"non-manifold edges shared by >2 faces: {bad.tolist()}")
    boundary = np.unique(uniq[counts == 1]) if (counts == 1).any() else np.zeros(0, np.int64)

    fans: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    for a, b, c in faces.tolist():
        fans[a].append((b, c))
        fans[b].append((c, a))
        fans[c].append((a, b))
    rings = tuple(tuple(_order_fan(i, fans[i])) for i in range(n))
    return Adjacency(rings, uniq, boundary)


def is_manifold(faces: np.ndarray) -> bool:
    e = np.sort(np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]), axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return bool((counts <= 2).all())


def augment(mesh: Mesh, seed, scale_range=(0.9, 1.1), noise_amplitude: float | None = None,
            recenter: bool = True) -> Mesh:
    """Random uniform scaling plus per-vertex uniform noise.

    ``noise_amplitude=None`` uses 0.5% of the bounding-box diagonal. With
    ``recenter`` the output centroid is moved back to the input centroid, so a
    centred mesh stays centred.
    """
    out = augment_array(mesh.vertices[None], seed, scale_range, noise_amplitude, recenter)[0]
    return mesh.with_vertices(out)


def augment_array(vertices: np.ndarray, seed, scale_range=(0.9, 1.1),
                  noise_amplitude: float | None = None, recenter: bool = True) -> np.ndarray:
    """Batched form of :func:`augment` over a (B, N, 3) array; one scale per mesh."""
    lo, hi = float(scale_range[0]), float(scale_range[1])
    if not (0 < lo <= hi) or not np.isfinite(hi):
        raise ValueError(f"invalid scale_range {scale_range}")
    vertices = np.asarray(vertices, dtype=np.float64)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    b = vertices.shape[0]
    if noise_amplitude is None:
        diag = np.linalg.norm(vertices.max(1) - vertices.min(1), axis=-1)
        amp = 0.005 * diag
    else:
        if noise_amplitude < 0:
            raise ValueError(f"noise_amplitude must be >= 0, got {noise_amplitude}")
        amp = np.full(b, float(noise_amplitude))
    s = rng.uniform(lo, hi, size=b)
    u = rng.uniform(-1.0, 1.0, size=vertices.shape) * amp[:, None, None]
    out = s[:, None, None] * vertices + u
    if recenter:
        out = out - out.mean(axis=1, keepdims=True) + vertices.mean(axis=1, keepdims=True)
    return out
