"""Procedural capsule creature with known shape and pose factors.

One connected, closed triangle mesh: a tapered torso tube along x with four
limb tubes grafted into holes on its underside. Every limb has a hip and a
knee, both bending about a fixed axis tangent to the torso at the hip.

shape (8): torso length, torso radius, front upper/lower limb length,
           hind upper/lower limb length, front limb radius, hind limb radius
pose  (8): (hip, knee) angle in radians for front-left, front-right,
           hind-left, hind-right
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.optimize import least_squares

from ..mesh import Mesh

SHAPE_NAMES = ("torso_length", "torso_radius", "front_upper", "front_lower",
               "hind_upper", "hind_lower", "front_radius", "hind_radius")
POSE_NAMES = ("fl_hip", "fl_knee", "fr_hip", "fr_knee", "hl_hip", "hl_knee", "hr_hip", "hr_knee")

SHAPE_LOW = np.array([2.4, 0.45, 0.6, 0.6, 0.6, 0.6, 0.12, 0.12])
SHAPE_HIGH = np.array([3.6, 0.75, 1.1, 1.1, 1.1, 1.1, 0.22, 0.22])
POSE_LOW = np.array([-0.7, 0.0] * 4)
POSE_HIGH = np.array([0.7, 1.2] * 4)


@dataclass(frozen=True)
class OracleFactors:
    shape_params: np.ndarray
    pose_params: np.ndarray


def _rotate(v: np.ndarray, axis: np.ndarray, angle) -> np.ndarray:
    """Rodrigues rotation of vectors ``v`` (..., 3) about unit ``axis``."""
    c, s = np.cos(angle), np.sin(angle)
    return v * c + np.cross(axis, v) * s + np.outer(v @ axis, axis).reshape(v.shape) * (1 - c)


class CapsuleCreature:
    def __init__(self, rings: int = 20, segments: int = 16, upper_rings: int = 4, lower_rings: int = 4):
        self.rings = rings
        self.segments = segments
        self.upper_rings = upper_rings
        self.lower_rings = lower_rings
        seg = segments
        # hole centres as (ring, segment); limb order fl, fr, hl, hr
        left, right = int(round(seg * 14 / 16)) % seg, int(round(seg * 10 / 16)) % seg
        front, hind = int(round(rings * 0.2)), int(round(rings * 0.75))
        self.holes = [(front, left), (front, right), (hind, left), (hind, right)]
        self._build_topology()

    # topology -----------------------------------------------------------------

    def _build_topology(self):
        R, K = self.rings, self.segments
        removed = {(r, s) for r, s in self.holes}
        hole_quads = set()
        for r, s in self.holes:
            for dr in (-1, 0):
                for ds in (-1, 0):
                    hole_quads.add((r + dr, (s + ds) % K))
        index = {}
        torso = []  # (ring, segment)
        for r in range(R):
            for s in range(K):
                if (r, s) in removed:
                    continue
                index[(r, s)] = len(torso)
                torso.append((r, s))
        self._torso_rs = np.array(torso)
        n = len(torso)
        self._pole0, self._pole1 = n, n + 1
        n += 2
        faces = []
        for r in range(R - 1):
            for s in range(K):
                if (r, s) in hole_quads:
                    continue
                a, b = index[(r, s)], index[(r, (s + 1) % K)]
                c, d = index[(r + 1, s)], index[(r + 1, (s + 1) % K)]
                faces += [(a, b, d), (a, d, c)]
        for s in range(K):
            faces.append((self._pole0, index[(0, (s + 1) % K)], index[(0, s)]))
            faces.append((self._pole1, index[(R - 1, s)], index[(R - 1, (s + 1) % K)]))

        # limbs: each ring has 8 vertices matching the hole loop
        loop_offsets = [(-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1)]
        self._psi = np.array([np.arctan2(ds, dr) for dr, ds in loop_offsets])
        m = self.upper_rings + self.lower_rings
        self._limb_base = []
        for r, s in self.holes:
            loop = [index[(r + dr, (s + ds) % K)] for dr, ds in loop_offsets]
            base = n
            self._limb_base.append(base)
            rings_idx = [loop] + [[base + j * 8 + k for k in range(8)] for j in range(m)]
            pole = base + m * 8
            n = pole + 1
            limb_faces = []
            for j in range(m):
                lo, hi = rings_idx[j], rings_idx[j + 1]
                for k in range(8):
                    a, b, c, d = lo[k], lo[(k + 1) % 8], hi[k], hi[(k + 1) % 8]
                    limb_faces += [(a, b, d), (a, d, c)]
            last = rings_idx[-1]
            for k in range(8):
                limb_faces.append((pole, last[k], last[(k + 1) % 8]))
            faces += limb_faces
        self.num_vertices = n
        faces = np.array(faces, dtype=np.int64)
        self.faces = _orient_consistently(faces, n)

    # geometry -----------------------------------------------------------------

    def _profile(self, u):
        return 1.0 - 0.5 * u ** 6

    def render(self, shape_params, pose_params, center: bool = True) -> np.ndarray:
        """Vertex positions (N, 3) for the given factors."""
        sp_ = np.asarray(shape_params, dtype=np.float64)
        pp = np.asarray(pose_params, dtype=np.float64)
        lt, rt, fu, fl, hu, hl, fr, hr = sp_
        R, K = self.rings, self.segments
        V = np.zeros((self.num_vertices, 3))
        r, s = self._torso_rs[:, 0], self._torso_rs[:, 1]
        u = -1 + 2 * r / (R - 1)
        phi = 2 * np.pi * s / K
        rad = rt * self._profile(u)
        V[: len(r)] = np.stack([u * lt / 2, rad * np.cos(phi), rad * np.sin(phi)], axis=1)
        cap = rt * self._profile(1.0)
        V[self._pole0] = [-lt / 2 - cap, 0, 0]
        V[self._pole1] = [lt / 2 + cap, 0, 0]
        limbs = [(fu, fl, fr), (fu, fl, fr), (hu, hl, hr), (hu, hl, hr)]
        m = self.upper_rings + self.lower_rings
        for li, ((hr_, hs_), (up, lo, lr), base) in enumerate(zip(self.holes, limbs, self._limb_base)):
            hip_a, knee_a = pp[2 * li], pp[2 * li + 1]
            uc = -1 + 2 * hr_ / (R - 1)
            pc = 2 * np.pi * hs_ / K
            normal = np.array([0.0, np.cos(pc), np.sin(pc)])
            axis = np.array([0.0, -np.sin(pc), np.cos(pc)])
            hip = np.array([uc * lt / 2, 0, 0]) + rt * self._profile(uc) * normal
            d_up = _rotate(normal, axis, hip_a)
            d_lo = _rotate(normal, axis, hip_a + knee_a)
            knee = hip + up * d_up
            for j in range(1, m + 1):
                if j < self.upper_rings:
                    c = hip + up * j / self.upper_rings * d_up
                    d = d_up
                elif j == self.upper_rings:
                    c = knee
                    d = _rotate(normal, axis, hip_a + knee_a / 2)
                else:
                    c = knee + lo * (j - self.upper_rings) / self.lower_rings * d_lo
                    d = d_lo
                b = np.cross(d, axis)
                ring = c + lr * (np.cos(self._psi)[:, None] * b + np.sin(self._psi)[:, None] * axis)
                V[base + (j - 1) * 8: base + j * 8] = ring
            foot = knee + lo * d_lo
            V[base + m * 8] = foot + lr * d_lo
        if center:
            V -= V.mean(axis=0)
        return V

    @cached_property
    def template(self) -> Mesh:
        mid_shape = (SHAPE_LOW + SHAPE_HIGH) / 2
        return Mesh(self.render(mid_shape, np.zeros(8)), self.faces)

    def mesh(self, shape_params, pose_params) -> Mesh:
        t = self.template
        return Mesh(self.render(shape_params, pose_params), t.faces, t.topology_id)

    # inversion ----------------------------------------------------------------

    def fit(self, vertices: np.ndarray, shape0=None, pose0=None, fix_pose=None, tol: float = 1e-12):
        """Least-squares (shape, pose) whose centred render best matches ``vertices``.

        Parameters are optimised in units normalised by their sampling ranges.
        With ``fix_pose`` only the shape is fitted.
        """
        target = np.asarray(vertices, dtype=np.float64)
        target = target - target.mean(axis=0)
        s_lo, s_sc = SHAPE_LOW, SHAPE_HIGH - SHAPE_LOW
        p_lo, p_sc = POSE_LOW, POSE_HIGH - POSE_LOW
        s0 = (SHAPE_LOW + SHAPE_HIGH) / 2 if shape0 is None else np.asarray(shape0, float)
        p0 = np.zeros(8) if pose0 is None else np.asarray(pose0, float)
        if fix_pose is not None:
            pose = np.asarray(fix_pose, float)

            def res(z):
                return (self.render(s_lo + z * s_sc, pose) - target).ravel()

            sol = least_squares(res, (s0 - s_lo) / s_sc, xtol=tol, ftol=tol, gtol=tol, method="lm")
            return s_lo + sol.x * s_sc, pose

        def res(z):
            return (self.render(s_lo + z[:8] * s_sc, p_lo + z[8:] * p_sc) - target).ravel()

        z0 = np.concatenate([(s0 - s_lo) / s_sc, (p0 - p_lo) / p_sc])
        sol = least_squares(res, z0, xtol=tol, ftol=tol, gtol=tol, method="lm")
        return s_lo + sol.x[:8] * s_sc, p_lo + sol.x[8:] * p_sc


def _orient_consistently(faces: np.ndarray, n: int) -> np.ndarray:
    """Flip limb patches whose winding disagrees with the torso across shared edges."""
    faces = faces.copy()
    # breadth-first propagation of orientation over face adjacency
    from collections import defaultdict, deque
    edge_faces = defaultdict(list)
    for fi, (a, b, c) in enumerate(faces.tolist()):
        for x, y in ((a, b), (b, c), (c, a)):
            edge_faces[(min(x, y), max(x, y))].append(fi)
    seen = np.zeros(len(faces), dtype=bool)
    seen[0] = True
    q = deque([0])
    while q:
        fi = q.popleft()
        f = faces[fi].tolist()
        for x, y in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            for gj in edge_faces[(min(x, y), max(x, y))]:
                if seen[gj]:
                    continue
                g = faces[gj].tolist()
                directed = {(g[0], g[1]), (g[1], g[2]), (g[2], g[0])}
                if (x, y) in directed:  # same direction: inconsistent
                    faces[gj] = faces[gj][::-1]
                seen[gj] = True
                q.append(gj)
    return faces


def shape_spread(shapes: np.ndarray) -> float:
    """Mean pairwise Euclidean distance between subjects' range-normalised shape vectors."""
    z = (np.asarray(shapes) - SHAPE_LOW) / (SHAPE_HIGH - SHAPE_LOW)
    d = np.linalg.norm(z[:, None] - z[None], axis=-1)
    k = len(z)
    return float(d.sum() / (k * (k - 1))) if k > 1 else 0.0


def pose_spread(poses: np.ndarray) -> float:
    z = (np.asarray(poses) - POSE_LOW) / (POSE_HIGH - POSE_LOW)
    d = np.linalg.norm(z[:, None] - z[None], axis=-1)
    k = len(z)
    return float(d.sum() / (k * (k - 1))) if k > 1 else 0.0


def normalized_shape(shapes) -> np.ndarray:
    return (np.asarray(shapes) - SHAPE_LOW) / (SHAPE_HIGH - SHAPE_LOW)


def normalized_pose(poses) -> np.ndarray:
    return (np.asarray(poses) - POSE_LOW) / (POSE_HIGH - POSE_LOW)


def joint_quaternions(poses: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) per joint angle about its fixed axis, flattened per mesh."""
    creature_axes = _joint_axes()
    poses = np.atleast_2d(poses)
    half = poses / 2
    q = np.concatenate([np.cos(half)[..., None], np.sin(half)[..., None] * creature_axes[None]], axis=-1)
    return q.reshape(len(poses), -1)


def _joint_axes(segments: int = 16) -> np.ndarray:
    left, right = 14 * 2 * np.pi / 16, 10 * 2 * np.pi / 16
    axes = []
    for pc in (left, right, left, right):
        ax = np.array([0.0, -np.sin(pc), np.cos(pc)])
        axes += [ax, ax]
    return np.array(axes)
