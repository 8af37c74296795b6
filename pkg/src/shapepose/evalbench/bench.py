"""Synthetic dataset generation and the evaluation protocols.

Pose transfer, code retrieval and latent interpolation are scored against the
capsule creature, which can render any (shape, pose) pair exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import nn
from ..mesh import Mesh
from ..meshio import DatasetIndex, save_mesh
from ..model import DisentangleModel
from .oracle import (
    POSE_HIGH, POSE_LOW, SHAPE_HIGH, SHAPE_LOW, CapsuleCreature, OracleFactors, joint_quaternions,
    normalized_pose, normalized_shape, pose_spread, shape_spread,
)


@dataclass
class SyntheticDataset:
    """Training meshes plus held-out poses of the same subjects, with their factors.

    ``vertices``/``subjects``/``mesh_ids``/``factors`` cover training meshes
    followed by held-out ones; ``train_mask`` tells them apart.
    """

    creature: CapsuleCreature
    shapes: np.ndarray  # (S, 8)
    mesh_ids: list
    subjects: list  # subject index per mesh
    poses: np.ndarray  # (M, 8)
    vertices: np.ndarray  # (M, N, 3), centred
    train_mask: np.ndarray
    seed: int = 0
    _lookup: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._lookup = {m: i for i, m in enumerate(self.mesh_ids)}

    @property
    def template(self) -> Mesh:
        return self.creature.template

    def index_of(self, mesh_id) -> int:
        if isinstance(mesh_id, (int, np.integer)):
            return int(mesh_id)
        try:
            return self._lookup[mesh_id]
        except KeyError:
            raise KeyError(f"unknown mesh id {mesh_id!r}") from None

    def factors(self, mesh_id) -> OracleFactors:
        i = self.index_of(mesh_id)
        return OracleFactors(self.shapes[self.subjects[i]], self.poses[i])

    def shape_of(self, idx) -> np.ndarray:
        return self.shapes[np.asarray(self.subjects)[np.asarray(idx)]]

    def render(self, subject: int, pose) -> np.ndarray:
        return self.creature.render(self.shapes[subject], pose)

    def train_indices(self) -> np.ndarray:
        return np.nonzero(self.train_mask)[0]

    def heldout_indices(self) -> np.ndarray:
        return np.nonzero(~self.train_mask)[0]

    def training_data(self):
        from ..disentangle import TrainingData
        idx = self.train_indices()
        return TrainingData(self.template, self.vertices[idx], [f"s{self.subjects[i]:03d}" for i in idx],
                            [self.mesh_ids[i] for i in idx])

    def factor_table(self) -> dict:
        return {
            "shape_names": list(_names()[0]), "pose_names": list(_names()[1]),
            "seed": self.seed, "order": list(self.mesh_ids),
            "creature": {"rings": self.creature.rings, "segments": self.creature.segments,
                         "upper_rings": self.creature.upper_rings, "lower_rings": self.creature.lower_rings},
            "meshes": {m: {"subject": f"s{self.subjects[i]:03d}", "train": bool(self.train_mask[i]),
                           "shape": self.shapes[self.subjects[i]].tolist(), "pose": self.poses[i].tolist()}
                       for i, m in enumerate(self.mesh_ids)},
        }

    def write(self, out_dir, binary: bool = True) -> DatasetIndex:
        """Write PLY meshes, ``index.json`` (training meshes) and ``factors.json`` (all meshes)."""
        out = Path(out_dir)
        (out / "meshes").mkdir(parents=True, exist_ok=True)
        save_mesh(self.template, out / "template.ply", binary)
        subjects: dict = {}
        for i, m in enumerate(self.mesh_ids):
            save_mesh(self.template.with_vertices(self.vertices[i]), out / "meshes" / f"{m}.ply", binary)
            if self.train_mask[i]:
                subjects.setdefault(f"s{self.subjects[i]:03d}", []).append(f"meshes/{m}.ply")
        index = DatasetIndex("template.ply", subjects, root=out)
        index.save(out / "index.json")
        with open(out / "factors.json", "w") as fh:
            json.dump(self.factor_table(), fh, indent=1, sort_keys=True)
            fh.write("\n")
        return index

    @classmethod
    def read(cls, directory) -> "SyntheticDataset":
        """Rebuild from ``factors.json`` by re-rendering (the generator is deterministic)."""
        directory = Path(directory)
        with open(directory / "factors.json") as fh:
            doc = json.load(fh)
        creature = CapsuleCreature(**doc["creature"])
        ids = doc.get("order") or list(doc["meshes"])
        subj_names = sorted({doc["meshes"][m]["subject"] for m in ids})
        shapes = np.array([next(doc["meshes"][m]["shape"] for m in ids if doc["meshes"][m]["subject"] == s)
                           for s in subj_names])
        subjects = [subj_names.index(doc["meshes"][m]["subject"]) for m in ids]
        poses = np.array([doc["meshes"][m]["pose"] for m in ids])
        verts = np.stack([creature.render(shapes[s], p) for s, p in zip(subjects, poses)])
        mask = np.array([doc["meshes"][m]["train"] for m in ids])
        return cls(creature, shapes, ids, subjects, poses, verts, mask, doc.get("seed", 0))


def _names():
    from .oracle import POSE_NAMES, SHAPE_NAMES
    return SHAPE_NAMES, POSE_NAMES


def generate_dataset(num_subjects: int, poses_per_subject: int, seed: int = 0, heldout_per_subject: int = 0,
                     creature: CapsuleCreature | None = None) -> SyntheticDataset:
    """Subjects with uniformly sampled shape factors, each rendered in uniformly sampled poses.

    Held-out poses are extra meshes of the same subjects, excluded from training.
    """
    if num_subjects < 2 or poses_per_subject < 2:
        raise ValueError("need at least 2 subjects and 2 poses per subject")
    creature = creature or CapsuleCreature()
    rng = np.random.default_rng(seed)
    shapes = rng.uniform(SHAPE_LOW, SHAPE_HIGH, size=(num_subjects, 8))
    per = poses_per_subject + heldout_per_subject
    poses = rng.uniform(POSE_LOW, POSE_HIGH, size=(num_subjects, per, 8))
    ids, subjects, pose_rows, verts, mask = [], [], [], [], []
    for train in (True, False):
        rng_range = range(poses_per_subject) if train else range(poses_per_subject, per)
        for s in range(num_subjects):
            for j in rng_range:
                ids.append(f"s{s:03d}_{'p' if train else 'h'}{j:03d}")
                subjects.append(s)
                pose_rows.append(poses[s, j])
                verts.append(creature.render(shapes[s], poses[s, j]))
                mask.append(train)
    return SyntheticDataset(creature, shapes, ids, subjects, np.array(pose_rows), np.stack(verts),
                            np.array(mask), seed)


# codes ---------------------------------------------------------------------


def encode_all(model: DisentangleModel, vertices: np.ndarray, batch: int = 64) -> tuple[np.ndarray, np.ndarray]:
    betas, thetas = [], []
    with nn.no_grad():
        for i in range(0, len(vertices), batch):
            b, t = model.encode(vertices[i:i + batch])
            betas.append(b.data)
            thetas.append(t.data)
    return np.concatenate(betas).astype(np.float64), np.concatenate(thetas).astype(np.float64)


def decode_all(model: DisentangleModel, betas, thetas, batch: int = 64) -> np.ndarray:
    outs = []
    with nn.no_grad():
        for i in range(0, len(betas), batch):
            outs.append(model.decode(np.asarray(betas[i:i + batch]), np.asarray(thetas[i:i + batch])).data)
    return np.concatenate(outs).astype(np.float64)


def centred_vertex_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Mean per-vertex distance after moving both centroids to the origin; works on (..., N, 3)."""
    a = a - a.mean(axis=-2, keepdims=True)
    b = b - b.mean(axis=-2, keepdims=True)
    return np.linalg.norm(a - b, axis=-1).mean(axis=-1)


# pose transfer -------------------------------------------------------------


def pose_transfer_error(model: DisentangleModel, shape_src, pose_src, oracle: SyntheticDataset) -> float:
    """Vertex error of decode(shape(shape_src), pose(pose_src)) against the oracle's rendering."""
    return float(pose_transfer_errors(model, [(shape_src, pose_src)], oracle)[0])


def pose_transfer_errors(model: DisentangleModel, pairs, oracle: SyntheticDataset) -> np.ndarray:
    idx = np.array([[oracle.index_of(a), oracle.index_of(b)] for a, b in pairs])
    for i in np.unique(idx):
        if oracle.vertices[i].shape[0] != model.template.num_vertices:
            raise ValueError("dataset topology does not match model template")
    beta, _ = encode_all(model, oracle.vertices[idx[:, 0]])
    _, theta = encode_all(model, oracle.vertices[idx[:, 1]])
    pred = decode_all(model, beta, theta)
    gt = np.stack([oracle.render(oracle.subjects[a], oracle.poses[b]) for a, b in idx])
    return centred_vertex_error(pred, gt)


def transfer_pairs(oracle: SyntheticDataset, count: int, seed: int = 0) -> list[tuple[int, int]]:
    """(shape source, pose source) pairs: a training mesh and a held-out pose of another subject."""
    held = oracle.heldout_indices()
    train = oracle.train_indices()
    if len(held) == 0:
        raise ValueError("dataset has no held-out poses")
    rng = np.random.default_rng(seed)
    subj = np.asarray(oracle.subjects)
    pairs = []
    for _ in range(count):
        b = int(held[rng.integers(len(held))])
        cands = train[subj[train] != subj[b]]
        pairs.append((int(cands[rng.integers(len(cands))]), b))
    return pairs


# retrieval -----------------------------------------------------------------


@dataclass(frozen=True)
class RetrievalResult:
    query: str
    neighbor: str
    E_shape: float
    E_pose: float


@dataclass
class PCA:
    mean: np.ndarray
    components: np.ndarray  # (k, D)

    @classmethod
    def fit(cls, codes: np.ndarray, dims: int) -> "PCA":
        if not 1 <= dims <= codes.shape[1]:
            raise ValueError(f"pca dims must be in [1, {codes.shape[1]}], got {dims}")
        mean = codes.mean(axis=0)
        _, _, vt = np.linalg.svd(codes - mean, full_matrices=True)
        return cls(mean, vt[:dims])

    def project(self, codes: np.ndarray) -> np.ndarray:
        return (codes - self.mean) @ self.components.T


def shape_error(a, b) -> float:
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)))


def pose_error(a, b) -> float:
    return float(np.linalg.norm(joint_quaternions(a) - joint_quaternions(b)))


def retrieve(model: DisentangleModel, query, gallery, code: str, oracle: SyntheticDataset,
             pca_dims: int | None = None, codes: dict | None = None, pca: PCA | None = None) -> RetrievalResult:
    """Nearest gallery mesh to ``query`` by Euclidean distance between the chosen codes.

    ``codes`` may hold precomputed {"shape": (M, ds), "pose": (M, dp)} arrays over
    the dataset ordering. With ``pca_dims`` the codes are projected onto
    principal axes fitted on training meshes (or the supplied ``pca``).
    """
    if code not in ("shape", "pose"):
        raise ValueError(f"code must be 'shape' or 'pose', got {code!r}")
    g = [oracle.index_of(m) for m in gallery]
    if not g:
        raise ValueError("empty gallery")
    q = oracle.index_of(query)
    if codes is None:
        codes = dataset_codes(model, oracle)
    z = codes[code]
    if pca_dims is not None:
        pca = pca or PCA.fit(z[oracle.train_indices()], pca_dims)
        z = pca.project(z)
    d = np.linalg.norm(z[g] - z[q], axis=1)
    n = g[int(np.argmin(d))]
    return RetrievalResult(oracle.mesh_ids[q], oracle.mesh_ids[n],
                           shape_error(oracle.shape_of(q), oracle.shape_of(n)),
                           pose_error(oracle.poses[q], oracle.poses[n]))


def dataset_codes(model: DisentangleModel, oracle: SyntheticDataset) -> dict:
    beta, theta = encode_all(model, oracle.vertices)
    return {"shape": beta, "pose": theta}


def retrieval_table(model: DisentangleModel, oracle: SyntheticDataset, queries=None,
                    pca_dims: dict | None = None) -> dict:
    """Mean E_shape / E_pose when retrieving with each code.

    Queries default to the held-out meshes; the gallery is the training set.
    ``pca_dims`` optionally maps code name to a PCA dimension.
    """
    codes = dataset_codes(model, oracle)
    queries = oracle.heldout_indices() if queries is None else [oracle.index_of(q) for q in queries]
    gallery = [i for i in oracle.train_indices()]
    table = {}
    for code in ("shape", "pose"):
        dims = (pca_dims or {}).get(code)
        pca = PCA.fit(codes[code][oracle.train_indices()], dims) if dims else None
        res = [retrieve(model, q, [i for i in gallery if i != q], code, oracle, dims, codes, pca)
               for q in queries]
        table[code] = {"E_shape": float(np.mean([r.E_shape for r in res])),
                       "E_pose": float(np.mean([r.E_pose for r in res]))}
    return table


# interpolation -------------------------------------------------------------


def interpolate(model: DisentangleModel, source, target, component: str, steps: int,
                oracle: SyntheticDataset | None = None) -> list[Mesh]:
    """Decode ``steps`` uniform blends of one code from source to target, the other held at the source's.

    ``source`` and ``target`` are mesh ids (with ``oracle``) or Mesh objects.
    """
    if steps < 2:
        raise ValueError("steps must be >= 2")
    if component not in ("shape", "pose"):
        raise ValueError(f"component must be 'shape' or 'pose', got {component!r}")

    def verts(m):
        if isinstance(m, Mesh):
            return m.vertices
        if oracle is None:
            raise ValueError("mesh ids need an oracle dataset")
        return oracle.vertices[oracle.index_of(m)]

    beta, theta = encode_all(model, np.stack([verts(source), verts(target)]))
    s = np.linspace(0.0, 1.0, steps)[:, None]
    if component == "shape":
        b = (1 - s) * beta[0] + s * beta[1]
        t = np.repeat(theta[:1], steps, axis=0)
    else:
        b = np.repeat(beta[:1], steps, axis=0)
        t = (1 - s) * theta[0] + s * theta[1]
    out = decode_all(model, b, t)
    return [model.template.with_vertices(v) for v in out]


def interpolation_drift(model: DisentangleModel, oracle: SyntheticDataset, pairs, component: str,
                        steps: int = 6) -> np.ndarray:
    """Per sequence: largest change of the oracle-fitted held factor relative to step 0.

    Pose interpolation measures shape drift (normalised by the subjects' shape
    spread); shape interpolation measures pose drift (normalised by pose spread).
    """
    creature = oracle.creature
    train = oracle.train_indices()
    s_spread = shape_spread(oracle.shapes)
    p_spread = pose_spread(oracle.poses[train])
    drifts = []
    for a, b in pairs:
        seq = interpolate(model, a, b, component, steps, oracle)
        ia = oracle.index_of(a)
        s0, p0 = oracle.shape_of(ia), oracle.poses[ia]
        fits = [creature.fit(m.vertices, s0, p0, tol=1e-8) for m in seq]
        if component == "pose":
            z = normalized_shape([f[0] for f in fits])
            drifts.append(np.max(np.linalg.norm(z - z[0], axis=1)) / s_spread)
        else:
            z = normalized_pose([f[1] for f in fits])
            drifts.append(np.max(np.linalg.norm(z - z[0], axis=1)) / p_spread)
    return np.array(drifts)


def interpolation_pairs(oracle: SyntheticDataset, count: int, seed: int = 0) -> list[tuple[int, int]]:
    """Pairs of training meshes from different subjects."""
    rng = np.random.default_rng(seed)
    train = oracle.train_indices()
    subj = np.asarray(oracle.subjects)
    pairs = []
    while len(pairs) < count:
        a, b = rng.choice(train, size=2, replace=False)
        if subj[a] != subj[b]:
            pairs.append((int(a), int(b)))
    return pairs


# report --------------------------------------------------------------------


def benchmark(model: DisentangleModel, oracle: SyntheticDataset, num_pairs: int = 100, num_interp: int = 20,
              interp_steps: int = 6, seed: int = 0, pca_dims: dict | None = None) -> dict:
    pairs = transfer_pairs(oracle, num_pairs, seed)
    errs = pose_transfer_errors(model, pairs, oracle)
    ipairs = interpolation_pairs(oracle, num_interp, seed)
    pose_drift = interpolation_drift(model, oracle, ipairs, "pose", interp_steps)
    shape_drift = interpolation_drift(model, oracle, ipairs, "shape", interp_steps)
    return {
        "pose_transfer": {
            "mean": float(errs.mean()), "median": float(np.median(errs)),
            "per_pair": [{"shape_src": oracle.mesh_ids[a], "pose_src": oracle.mesh_ids[b], "error": float(e)}
                         for (a, b), e in zip(pairs, errs)],
        },
        "retrieval": retrieval_table(model, oracle, pca_dims=pca_dims),
        "interpolation": {
            "pose_interpolation_shape_drift": pose_drift.tolist(),
            "shape_interpolation_pose_drift": shape_drift.tolist(),
            "mean_shape_drift": float(pose_drift.mean()),
            "mean_pose_drift": float(shape_drift.mean()),
        },
    }
