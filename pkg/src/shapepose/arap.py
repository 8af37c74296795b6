"""As-rigid-as-possible deformation toward anchor positions.

Local step: per-cell rotation fit by SVD of the edge covariance (Kabsch/Arun,
determinant corrected). Global step: the Laplacian system with hard anchor rows,
factored by a banded Cholesky after reverse Cuthill-McKee reordering. The
ordering and bandwidth depend only on connectivity and are cached per topology.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components, reverse_cuthill_mckee

from .mesh import Adjacency, Mesh, TopologyMismatch, build_adjacency


class ArapError(RuntimeError):
    pass


class DegenerateCell(ArapError):
    pass


def fit_rotation(edges, deformed_edges, weights=None) -> np.ndarray:
    """Rotation R minimising sum_j w_j |e~_j - R e_j|^2 for one cell."""
    e = np.asarray(edges, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(deformed_edges, dtype=np.float64).reshape(-1, 3)
    if e.shape != d.shape:
        raise ValueError(f"edge sets differ in shape: {e.shape} vs {d.shape}")
    w = np.ones(len(e)) if weights is None else np.asarray(weights, dtype=np.float64)
    if (w <= 0).any():
        raise ValueError("weights must be positive")
    if not np.any(e) or not np.any(d):
        raise DegenerateCell("degenerate cell: all-zero edge set")
    S = (w[:, None] * e).T @ d
    return _rotations_from_covariance(S[None])[0]


def _rotations_from_covariance(S: np.ndarray) -> np.ndarray:
    # S = U diag(s) Vt  ->  R = V U^T, flipping V's smallest-singular column if det < 0
    U, _, Vt = np.linalg.svd(S)
    R = np.swapaxes(Vt, -1, -2) @ np.swapaxes(U, -1, -2)
    neg = np.linalg.det(R) < 0
    if neg.any():
        Vt = Vt.copy()
        Vt[neg, 2, :] *= -1
        R[neg] = np.swapaxes(Vt[neg], -1, -2) @ np.swapaxes(U[neg], -1, -2)
    return R


@dataclass(frozen=True, eq=False)
class _Structure:
    """Connectivity-only data shared by every problem on one topology."""

    num_vertices: int
    src: np.ndarray  # directed edges i -> j, j in N(i)
    dst: np.ndarray
    undirected: np.ndarray  # (E, 2)
    gather: sp.csr_matrix  # (N, 2E) sums directed-edge rows into their source vertex
    perm: np.ndarray  # RCM ordering
    iperm: np.ndarray
    bandwidth: int
    components: np.ndarray
    num_components: int


_STRUCTURES: dict[str, _Structure] = {}


def _structure(mesh: Mesh, adjacency: Adjacency | None = None) -> _Structure:
    cached = _STRUCTURES.get(mesh.topology_id)
    if cached is not None:
        return cached
    adj = adjacency if adjacency is not None else build_adjacency(mesh)
    n = mesh.num_vertices
    src, dst = adj.directed_edges()
    gather = sp.csr_matrix((np.ones(len(src)), (src, np.arange(len(src)))), shape=(n, len(src)))
    pattern = sp.csr_matrix((np.ones(len(src)), (src, dst)), shape=(n, n)) + sp.identity(n, format="csr")
    perm = np.asarray(reverse_cuthill_mckee(pattern.tocsr(), symmetric_mode=True), dtype=np.int64)
    iperm = np.empty_like(perm)
    iperm[perm] = np.arange(n)
    bw = int(np.abs(iperm[src] - iperm[dst]).max()) if len(src) else 0
    ncomp, labels = connected_components(pattern, directed=False)
    st = _Structure(n, src, dst, adj.edges, gather, perm, iperm, bw, labels, ncomp)
    _STRUCTURES[mesh.topology_id] = st
    return st


def uniform_weights(mesh: Mesh, adjacency: Adjacency | None = None) -> np.ndarray:
    st = _structure(mesh, adjacency)
    return np.ones(len(st.src))


def cotangent_weights(mesh: Mesh, adjacency: Adjacency | None = None, floor: float = 1e-6) -> np.ndarray:
    """Per-directed-edge 0.5 (cot a + cot b), floored so every weight stays positive."""
    st = _structure(mesh, adjacency)
    v, f = mesh.vertices, mesh.faces
    acc: dict[tuple[int, int], float] = {}
    for k in range(3):
        i, j, o = f[:, k], f[:, (k + 1) % 3], f[:, (k + 2) % 3]
        a, b = v[i] - v[o], v[j] - v[o]
        cot = np.einsum("ij,ij->i", a, b) / np.maximum(np.linalg.norm(np.cross(a, b), axis=1), 1e-300)
        for x, y, c in zip(i.tolist(), j.tolist(), cot.tolist()):
            key = (min(x, y), max(x, y))
            acc[key] = acc.get(key, 0.0) + 0.5 * c
    return np.array([max(acc[(min(a, b), max(a, b))], floor) for a, b in zip(st.src, st.dst)])


@dataclass(frozen=True, eq=False)
class ArapProblem:
    source: Mesh
    adjacency: Adjacency
    weights: np.ndarray  # per directed edge, aligned with adjacency.directed_edges()
    anchor_indices: np.ndarray
    anchor_positions: np.ndarray
    anchor_fraction: float = 0.05

    def __post_init__(self):
        idx = np.asarray(self.anchor_indices, dtype=np.int64)
        pos = np.asarray(self.anchor_positions, dtype=np.float64).reshape(-1, 3)
        if len(idx) == 0:
            raise ArapError("at least one anchor vertex is required")
        if len(idx) != len(pos):
            raise ValueError("anchor indices and positions differ in length")
        if len(np.unique(idx)) != len(idx):
            raise ValueError("duplicate anchor indices")
        w = np.asarray(self.weights, dtype=np.float64)
        if (w <= 0).any():
            raise ValueError("ARAP weights must be positive")
        object.__setattr__(self, "anchor_indices", idx)
        object.__setattr__(self, "anchor_positions", pos)
        object.__setattr__(self, "weights", w)

    @property
    def structure(self) -> _Structure:
        return _structure(self.source, self.adjacency)

    @classmethod
    def create(cls, source: Mesh, anchor_indices, anchor_positions, weighting: str = "uniform",
               adjacency: Adjacency | None = None, anchor_fraction: float = 0.05) -> "ArapProblem":
        adj = adjacency if adjacency is not None else _adjacency(source)
        if weighting == "uniform":
            w = uniform_weights(source, adj)
        elif weighting == "cotangent":
            w = cotangent_weights(source, adj)
        else:
            raise ValueError(f"unknown weighting {weighting!r}")
        return cls(source, adj, w, anchor_indices, anchor_positions, anchor_fraction)


_ADJ: dict[str, Adjacency] = {}


def _adjacency(mesh: Mesh) -> Adjacency:
    adj = _ADJ.get(mesh.topology_id)
    if adj is None:
        adj = _ADJ[mesh.topology_id] = build_adjacency(mesh)
    return adj


def fit_rotations(problem: ArapProblem, deformed: np.ndarray) -> np.ndarray:
    """Optimal rotation for every cell given current deformed positions, (N, 3, 3)."""
    st = problem.structure
    v = problem.source.vertices
    e = v[st.dst] - v[st.src]
    d = deformed[st.dst] - deformed[st.src]
    outer = (problem.weights[:, None, None] * e[:, :, None] * d[:, None, :]).reshape(-1, 9)
    S = (st.gather @ outer).reshape(-1, 3, 3)
    return _rotations_from_covariance(S)


def arap_energy(problem: ArapProblem, deformed, rotations: np.ndarray) -> float:
    """Sum over cells of sum_j w_ij |e~_ij - R_i e_ij|^2."""
    if isinstance(deformed, Mesh):
        problem.source.check_same_topology(deformed)
        deformed = deformed.vertices
    deformed = np.asarray(deformed, dtype=np.float64)
    if deformed.shape != problem.source.vertices.shape:
        raise TopologyMismatch(f"deformed shape {deformed.shape} != {problem.source.vertices.shape}")
    st = problem.structure
    v = problem.source.vertices
    e = v[st.dst] - v[st.src]
    d = deformed[st.dst] - deformed[st.src]
    r = d - np.einsum("kab,kb->ka", rotations[st.src], e)
    return float(np.sum(problem.weights * np.einsum("ka,ka->k", r, r)))


def _banded_system(problem: ArapProblem):
    """Upper-banded storage of the permuted Laplacian with anchor rows/cols replaced by identity."""
    st = problem.structure
    n, u = st.num_vertices, st.bandwidth
    ab = np.zeros((u + 1, n))
    pi, pj = st.iperm[st.src], st.iperm[st.dst]
    upper = pi < pj
    # off-diagonal: A[i, j] = -w_ij (each undirected edge appears once with pi < pj)
    np.add.at(ab, (u + pi[upper] - pj[upper], pj[upper]), -problem.weights[upper])
    np.add.at(ab, (np.full(len(pi), u), pi), problem.weights)
    pa = st.iperm[problem.anchor_indices]
    ab[:, pa] = 0.0
    k = np.arange(1, u + 1)
    cols = pa[:, None] + k[None, :]
    rows = np.broadcast_to(u - k, cols.shape)
    ok = cols < n
    ab[rows[ok], cols[ok]] = 0.0
    ab[u, pa] = 1.0
    return ab


def _rhs(problem: ArapProblem, rotations: np.ndarray) -> np.ndarray:
    st = problem.structure
    v = problem.source.vertices
    rsum = rotations[st.src] + rotations[st.dst]
    terms = 0.5 * problem.weights[:, None] * np.einsum("kab,kb->ka", rsum, v[st.src] - v[st.dst])
    return st.gather @ terms


def _laplacian(problem: ArapProblem) -> sp.csr_matrix:
    st = problem.structure
    n = st.num_vertices
    W = sp.csr_matrix((problem.weights, (st.src, st.dst)), shape=(n, n))
    return sp.diags(np.asarray(W.sum(axis=1)).ravel()) - W


def _check_anchored_components(problem: ArapProblem) -> None:
    st = problem.structure
    anchored = np.zeros(st.num_components, dtype=bool)
    anchored[st.components[problem.anchor_indices]] = True
    if not anchored.all():
        c = int(np.nonzero(~anchored)[0][0])
        members = np.nonzero(st.components == c)[0]
        raise ArapError(
            f"singular ARAP system: connected component {c} (vertices {members[:8].tolist()}"
            f"{'...' if len(members) > 8 else ''}, {len(members)} total) has no anchor")


def solve_positions(problem: ArapProblem, rotations: np.ndarray, rtol: float = 1e-8) -> Mesh:
    """Global step: solve the Laplacian system with anchors fixed exactly."""
    _check_anchored_components(problem)
    st = problem.structure
    a = problem.anchor_indices
    xa = problem.anchor_positions
    b = _rhs(problem, rotations)
    L = _laplacian(problem)
    free = np.ones(st.num_vertices, dtype=bool)
    free[a] = False
    rhs = b - L[:, a] @ xa
    rhs[a] = xa
    ab = _banded_system(problem)
    try:
        cb = scipy.linalg.cholesky_banded(ab, lower=False, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise ArapError(f"ARAP system is not positive definite: {exc}") from exc
    x = np.empty_like(rhs)
    x[st.perm] = scipy.linalg.cho_solve_banded((cb, False), rhs[st.perm], check_finite=False)
    x[a] = xa
    # residual of the reduced (free-vertex) system
    Lff = L[free][:, free]
    r = Lff @ x[free] - rhs[free]
    denom = max(np.linalg.norm(rhs[free]), 1e-300)
    if free.any() and np.linalg.norm(r) > rtol * denom:
        raise ArapError(f"ARAP solve residual {np.linalg.norm(r) / denom:.3e} exceeds {rtol}")
    return problem.source.with_vertices(x)


def select_anchors(num_vertices: int, anchor_fraction: float, seed) -> np.ndarray:
    if not 0 < anchor_fraction <= 1:
        raise ValueError(f"anchor_fraction must be in (0, 1], got {anchor_fraction}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    k = max(1, math.ceil(anchor_fraction * num_vertices - 1e-9))
    return np.sort(rng.choice(num_vertices, size=k, replace=False))


@dataclass
class ArapResult:
    mesh: Mesh
    anchors: np.ndarray
    energies: list  # energy with best-fit rotations before the first and after each alternation


def arap_deform(source: Mesh, target_guess: Mesh, anchor_fraction: float = 0.05,
                iterations: int = 1, seed=0, weighting: str = "uniform",
                return_details: bool = False):
    """Deform ``source`` so a random anchor subset lands on ``target_guess``.

    ``target_guess`` also serves as the initial guess. Each iteration fits all
    cell rotations, then solves for positions.
    """
    source.check_same_topology(target_guess)
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    anchors = select_anchors(source.num_vertices, anchor_fraction, seed)
    problem = ArapProblem.create(source, anchors, target_guess.vertices[anchors], weighting,
                                 anchor_fraction=anchor_fraction)
    current = target_guess.vertices.copy()
    energies = []
    if return_details:
        energies.append(arap_energy(problem, current, fit_rotations(problem, current)))
    for _ in range(iterations):
        R = fit_rotations(problem, current)
        current = solve_positions(problem, R).vertices
        if return_details:
            energies.append(arap_energy(problem, current, fit_rotations(problem, current)))
    out = target_guess.with_vertices(current)
    if return_details:
        return ArapResult(out, anchors, energies)
    return out


def arap_deform_batch(template: Mesh, sources: np.ndarray, targets: np.ndarray,
                      anchor_fraction: float, seeds, iterations: int = 1) -> np.ndarray:
    """Array form of :func:`arap_deform` over (B, N, 3) stacks sharing ``template``'s faces."""
    out = np.empty_like(targets)
    for b in range(len(sources)):
        src = Mesh(sources[b], template.faces, template.topology_id)
        tgt = Mesh(targets[b], template.faces, template.topology_id)
        out[b] = arap_deform(src, tgt, anchor_fraction, iterations, seeds[b]).vertices
    return out

