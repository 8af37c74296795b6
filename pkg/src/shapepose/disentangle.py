"""Training of the dual-branch model with cross- and self-consistency losses.

A step samples B triplets (x1, x2 from one subject, xt from another) and
minimises ``lambda_c * L_C + lambda_s * L_S``:

* L_C reconstructs x1 from the shape code of x2 and the pose code of an
  augmented x1.
* L_S first decodes a proxy with xt's shape code and x1's pose code (no
  gradient), lets ARAP pull xt onto that proxy, then reconstructs x1 from the
  shape code of x2 and the pose code of the augmented, deformed proxy.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, nn
from .arap import ArapError, arap_deform_batch
from .mesh import Mesh, augment_array
from .meshio import DatasetIndex
from .model import DisentangleModel, ModelConfig
from .multires import MeshHierarchy, build_hierarchy

log = logging.getLogger(__name__)

METRICS_FIELDS = ("step", "L_C", "L_S", "total", "lr")


class AblationMode(str, enum.Enum):
    FULL = "full"
    NO_ARAP = "no_arap"
    NO_SELF_CONSISTENCY = "no_self_consistency"
    # plain reconstruction of x1, used for the entangled baseline
    RECONSTRUCTION = "reconstruction"

    @classmethod
    def parse(cls, value) -> "AblationMode":
        if isinstance(value, cls):
            return value
        v = str(value).replace("-", "_")
        aliases = {"no_self": "no_self_consistency", "baseline": "reconstruction"}
        return cls(aliases.get(v, v))


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, checkpoint: str | None):
        super().__init__(f"{message}; last good checkpoint: {checkpoint}")
        self.checkpoint = checkpoint


# data ----------------------------------------------------------------------


@dataclass
class TrainingData:
    """All training meshes as one (M, N, 3) array with a subject label per mesh."""

    template: Mesh
    vertices: np.ndarray
    subjects: list
    mesh_ids: list = field(default_factory=list)

    def __post_init__(self):
        if self.vertices.ndim != 3 or self.vertices.shape[1:] != (self.template.num_vertices, 3):
            raise ValueError(f"vertices {self.vertices.shape} do not match template")
        if len(self.subjects) != len(self.vertices):
            raise ValueError("one subject label per mesh required")
        if not self.mesh_ids:
            self.mesh_ids = [str(i) for i in range(len(self.vertices))]

    @classmethod
    def from_index(cls, index: DatasetIndex) -> "TrainingData":
        template, verts, sids, mids = index.load_all(center_meshes=True)
        return cls(template, verts, sids, mids)


@dataclass(frozen=True)
class TrainingTriplet:
    x1: int
    x2: int
    xt: int
    subject: str
    other_subject: str


def _subject_groups(labels) -> dict:
    if isinstance(labels, DatasetIndex):
        labels = [sid for _, sid, _ in labels.records]
    elif isinstance(labels, TrainingData):
        labels = labels.subjects
    groups: dict = {}
    for i, s in enumerate(labels):
        groups.setdefault(s, []).append(i)
    return groups


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_triplet(index, seed) -> TrainingTriplet:
    """Draw uniformly from all ordered triplets (x1, x2 != x1 same subject, xt other subject).

    ``index`` is a DatasetIndex, TrainingData or a per-mesh subject label list;
    returned fields are positions in that mesh ordering.
    """
    groups = _subject_groups(index)
    if len(groups) < 2:
        raise ValueError("triplet sampling needs at least two subjects")
    subjects = list(groups)
    total = sum(len(g) for g in groups.values())
    counts = np.array([len(groups[s]) * (len(groups[s]) - 1) * (total - len(groups[s])) for s in subjects],
                      dtype=float)
    if counts.sum() == 0:
        raise ValueError("no subject has two meshes")
    rng = _rng(seed)
    s = subjects[rng.choice(len(subjects), p=counts / counts.sum())]
    own = groups[s]
    i, j = rng.choice(len(own), size=2, replace=False)
    others = [k for t in subjects if t != s for k in groups[t]]
    xt = others[rng.integers(len(others))]
    labels = {k: t for t in subjects for k in groups[t]}
    return TrainingTriplet(own[i], own[j], xt, s, labels[xt])


# losses --------------------------------------------------------------------


def _as_batch(x) -> np.ndarray:
    x = np.asarray(getattr(x, "vertices", x), dtype=np.float64)
    return x[None] if x.ndim == 2 else x


def _mean_vertex_l1(out: nn.Tensor, target: np.ndarray) -> nn.Tensor:
    b, n = target.shape[:2]
    return nn.l1_loss(out, nn.Tensor(np.asarray(target, dtype=out.data.dtype))) * (1.0 / (b * n))


def cross_consistency_loss(x1, x2, model: DisentangleModel, transform=None, beta2=None) -> nn.Tensor:
    """Mean-per-vertex L1 of decode(shape(x2), pose(T(x1))) against x1.

    ``transform`` maps a (B, N, 3) array to an augmented copy; None means identity.
    ``beta2`` reuses an already computed shape code of x2.
    """
    x1, x2 = _as_batch(x1), _as_batch(x2)
    pose_in = transform(x1) if transform is not None else x1
    if beta2 is None:
        beta2 = model.shape_code(x2)
    out = model.decode(beta2, model.pose_code(pose_in))
    return _mean_vertex_l1(out, x1)


@dataclass
class ArapSettings:
    anchor_fraction: float = 0.05
    iterations: int = 1


def make_proxy(x1, xt, model: DisentangleModel, ablation, arap: ArapSettings | None = None,
               arap_seeds=None, triplet_ids=None) -> np.ndarray:
    """Constant proxy for the self-consistency loss: xt's shape with x1's pose.

    Decoded without gradient; for the full objective xt is then ARAP-deformed
    onto the decoded proxy.
    """
    ablation = AblationMode.parse(ablation)
    x1, xt = _as_batch(x1), _as_batch(xt)
    with nn.no_grad():
        proxy = model.decode(model.shape_code(xt), model.pose_code(x1)).data.astype(np.float64)
    if ablation is not AblationMode.FULL:
        return proxy
    arap = arap or ArapSettings()
    seeds = list(range(len(xt))) if arap_seeds is None else list(arap_seeds)
    try:
        return arap_deform_batch(model.template, xt, proxy, arap.anchor_fraction, seeds, arap.iterations)
    except ArapError as exc:
        raise ArapError(f"ARAP failed for triplets {triplet_ids} (seeds {seeds}): {exc}") from exc


def self_consistency_loss(x1, x2, xt, model: DisentangleModel, ablation="full", arap: ArapSettings | None = None,
                          transform=None, beta2=None, arap_seeds=None, triplet_ids=None) -> nn.Tensor:
    """Mean-per-vertex L1 of decode(shape(x2), pose(T(proxy'))) against x1.

    Returns a constant zero without touching ARAP for the no-self-consistency
    ablation; ``no_arap`` feeds the decoded proxy in directly.
    """
    ablation = AblationMode.parse(ablation)
    if ablation in (AblationMode.NO_SELF_CONSISTENCY, AblationMode.RECONSTRUCTION):
        return nn.Tensor(np.zeros(()))
    x1, x2, xt = _as_batch(x1), _as_batch(x2), _as_batch(xt)
    proxy = make_proxy(x1, xt, model, ablation, arap, arap_seeds, triplet_ids)
    pose_in = transform(proxy) if transform is not None else proxy
    if beta2 is None:
        beta2 = model.shape_code(x2)
    out = model.decode(beta2, model.pose_code(pose_in))
    return _mean_vertex_l1(out, x1)


def reconstruction_loss(x, model: DisentangleModel) -> nn.Tensor:
    x = _as_batch(x)
    return _mean_vertex_l1(model.reconstruct(x), x)


@dataclass
class LossReport:
    step: int
    L_C: float
    L_S: float
    total: float
    lr: float
    lambda_c: float = 0.5
    lambda_s: float = 0.5

    def row(self) -> list[str]:
        return [str(self.step), repr(self.L_C), repr(self.L_S), repr(self.total), repr(self.lr)]


# training ------------------------------------------------------------------


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 16
    seed: int = 0
    lr_max: float = 1e-3
    lr_min: float = 1e-6
    lambda_c: float = 0.5
    lambda_s: float = 0.5
    anchor_fraction: float = 0.05
    arap_iterations: int = 1
    augment_scale: tuple = (0.9, 1.1)
    augment_noise: float | None = None  # None: 0.5% of each mesh's bounding-box diagonal
    checkpoint_every: int = 500
    log_every: int = 100
    ablation: str = "full"
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        self.augment_scale = tuple(float(v) for v in self.augment_scale)
        self.ablation = AblationMode.parse(self.ablation).value
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")

    def to_json(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_json()
        d["augment_scale"] = list(self.augment_scale)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainResult:
    model: DisentangleModel
    reports: list
    checkpoint: Path | None
    metrics_path: Path | None


def _step_plan(cfg: TrainConfig, data: TrainingData, step: int, groups: dict):
    """All randomness of one step, drawn from a generator keyed by (seed, step)."""
    rng = np.random.default_rng([cfg.seed, step])
    triplets = [sample_triplet(data.subjects, rng) for _ in range(cfg.batch_size)]
    aug_seeds = rng.integers(0, 2**63 - 1, size=2)
    arap_seeds = rng.integers(0, 2**63 - 1, size=cfg.batch_size)
    return triplets, aug_seeds, arap_seeds


def _augmenter(cfg: TrainConfig, seed):
    def apply(x):
        return augment_array(x, np.random.default_rng(int(seed)), cfg.augment_scale, cfg.augment_noise)
    return apply


def training_step(model: DisentangleModel, data: TrainingData, cfg: TrainConfig, step: int,
                  groups: dict | None = None):
    """Forward and backward for one step; returns (L_C, L_S, total) and leaves .grad on params."""
    ablation = AblationMode.parse(cfg.ablation)
    groups = groups if groups is not None else _subject_groups(data.subjects)
    triplets, aug_seeds, arap_seeds = _step_plan(cfg, data, step, groups)
    v = data.vertices
    x1 = v[[t.x1 for t in triplets]]
    x2 = v[[t.x2 for t in triplets]]
    xt = v[[t.xt for t in triplets]]
    for p in model.params.values():
        p.zero_grad()
    with nn.Tape() as tape:
        if ablation is AblationMode.RECONSTRUCTION:
            lc = reconstruction_loss(x1, model)
            ls = nn.Tensor(np.zeros(()))
        else:
            beta2 = model.shape_code(x2)
            lc = cross_consistency_loss(x1, x2, model, _augmenter(cfg, aug_seeds[0]), beta2=beta2)
            ids = [(t.x1, t.x2, t.xt) for t in triplets]
            ls = self_consistency_loss(x1, x2, xt, model, ablation,
                                       ArapSettings(cfg.anchor_fraction, cfg.arap_iterations),
                                       _augmenter(cfg, aug_seeds[1]), beta2=beta2,
                                       arap_seeds=arap_seeds, triplet_ids=ids)
        lam_s = 0.0 if ablation is AblationMode.NO_SELF_CONSISTENCY else cfg.lambda_s
        total = lc * cfg.lambda_c + ls * lam_s if lam_s else lc * cfg.lambda_c
    tape.backward(total)
    return float(lc.item()), float(ls.item()), float(total.item())


def _config_doc(cfg: TrainConfig) -> dict:
    return {"train": cfg.to_json(), "version": __version__}


def _read_metrics(path: Path, upto: int) -> list[list[str]]:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return [r for r in rows[1:] if int(r[0]) <= upto]


def train(data: TrainingData, config: TrainConfig, out_dir=None, hierarchy: MeshHierarchy | None = None,
          resume: str | Path | None = None, stop_at: int | None = None, manifest: dict | None = None,
          progress=None) -> TrainResult:
    """Run ``config.steps`` optimisation steps (or up to ``stop_at``).

    Writes ``manifest.json``, ``metrics.csv`` and ``checkpoint.npz`` into
    ``out_dir`` when given. ``resume`` continues from a checkpoint written by a
    run with the same config; the result matches an uninterrupted run.
    """
    cfg = config
    out = Path(out_dir) if out_dir is not None else None
    doc = _config_doc(cfg)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        man = {"command": "train", "config": doc, "seed": cfg.seed, "ablation": cfg.ablation,
               "tool_version": __version__, **(manifest or {})}
        with open(out / "manifest.json", "w") as fh:
            json.dump(man, fh, indent=2, sort_keys=True)
            fh.write("\n")

    start = 0
    state = nn.OptimizerState(lr_max=cfg.lr_max, lr_min=cfg.lr_min, period=cfg.steps)
    if resume is not None:
        ck = nn.load_checkpoint(resume)
        if ck["header"]["config_hash"] != nn.config_hash(doc):
            raise ValueError(f"checkpoint {resume} was written with a different configuration")
        model = DisentangleModel.from_arrays(ck["extra"], ck["params"])
        state = ck["optimizer"]
        start = int(ck["header"]["step"])
    else:
        if hierarchy is None:
            hierarchy = build_hierarchy(data.template, num_levels=len(cfg.model.channels))
        model = DisentangleModel.create(cfg.model, hierarchy)
    data.template.check_same_topology(model.template)

    metrics_path = out / "metrics.csv" if out is not None else None
    rows = _read_metrics(metrics_path, start) if (metrics_path is not None and resume is not None) else []
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_FIELDS)
        writer.writerows(rows)
    ckpt_path = out / "checkpoint.npz" if out is not None else None
    last_good = str(resume) if resume is not None else None
    extra = model.state_arrays()
    groups = _subject_groups(data.subjects)
    reports = []
    end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)

    def save(step):
        nonlocal last_good
        if ckpt_path is not None:
            nn.save_checkpoint(ckpt_path, model.params, state, step, doc, extra,
                               meta={"ablation": cfg.ablation, **(manifest or {})})
            last_good = str(ckpt_path)

    try:
        for step in range(start, end):
            lr = nn.cosine_lr(step, state)
            lc, ls, total = training_step(model, data, cfg, step, groups)
            if not np.isfinite(total):
                raise TrainingDiverged(f"non-finite loss at step {step + 1}", last_good)
            try:
                nn.adam_step(state, model.params, lr=lr)
            except nn.NonFiniteGradient as exc:
                raise TrainingDiverged(f"{exc} at step {step + 1}", last_good) from None
            rep = LossReport(step + 1, lc, ls, total, lr, cfg.lambda_c, cfg.lambda_s)
            reports.append(rep)
            if metrics_path is not None:
                writer.writerow(rep.row())
            if progress is not None and ((step + 1) % cfg.log_every == 0 or step + 1 == end):
                progress(rep)
            if (step + 1) % cfg.checkpoint_every == 0 or step + 1 == end:
                if metrics_path is not None:
                    fh.flush()
                save(step + 1)
    finally:
        if metrics_path is not None:
            fh.close()
    return TrainResult(model, reports, ckpt_path, metrics_path)


def load_model(path) -> DisentangleModel:
    ck = nn.load_checkpoint(path)
    return DisentangleModel.from_arrays(ck["extra"], ck["params"])


def metrics_text(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_FIELDS)
    for r in reports:
        w.writerow(r.row())
    return buf.getvalue()
