"""Spiral neighbourhood sequences and the spiral convolution."""

from __future__ import annotations

import numpy as np

from .mesh import Adjacency, Mesh, MeshError, build_adjacency
from .nn import RowGather, Tensor, gather_rows

PAD = -1


def build_spirals(template: Mesh, adjacency: Adjacency | None, length: int) -> np.ndarray:
    """(N, length) spiral index table; PAD (-1) fills spirals that run out of vertices.

    Each spiral is the vertex itself, its one-ring in counterclockwise order, then
    successive rings, each ring walked in the order its parents were visited.
    """
    if length < 1:
        raise ValueError("spiral length must be >= 1")
    adj = adjacency if adjacency is not None else build_adjacency(template)
    rings = adj.one_ring
    out = np.full((len(rings), length), PAD, dtype=np.int64)
    for i in range(len(rings)):
        if not rings[i]:
            raise MeshError(f"isolated vertex {i} has no spiral")
        seq = [i]
        seen = {i}
        frontier = [i]
        while len(seq) < length and frontier:
            nxt = []
            for u in frontier:
                for w in rings[u]:
                    if w not in seen:
                        seen.add(w)
                        nxt.append(w)
            seq.extend(nxt)
            frontier = nxt
        seq = seq[:length]
        out[i, : len(seq)] = seq
    return out


def spiral_conv(features, spirals, weights, bias=None) -> Tensor:
    """Gather each vertex's spiral (L rows of C), concatenate, apply (L*C, C') weights plus bias."""
    if not isinstance(spirals, RowGather):
        spirals = RowGather(spirals, features.shape[-2])
    out = gather_rows(features, spirals) @ weights
    if bias is not None:
        out = out + bias
    return out


def spiral_conv_reference(features: np.ndarray, spirals: np.ndarray, weights: np.ndarray,
                          bias: np.ndarray | None = None) -> np.ndarray:
    """Explicit per-vertex loop of the same operation, for checking."""
    n, c = features.shape
    length = spirals.shape[1]
    out = np.zeros((spirals.shape[0], weights.shape[1]))
    for i in range(spirals.shape[0]):
        row = np.zeros(length * c)
        for k in range(length):
            j = spirals[i, k]
            if j >= 0:
                row[k * c:(k + 1) * c] = features[j]
        out[i] = row @ weights
        if bias is not None:
            out[i] += bias
    return out
