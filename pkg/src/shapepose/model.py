"""Dual-branch spiral mesh autoencoder.

Two encoder branches with disjoint weights map a mesh to a shape code and a pose
code; one decoder maps the concatenated codes back to vertex positions. Each
encoder branch is four spiral convolutions with downsampling between them and a
dense layer to the code. The decoder mirrors it with upsampling.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .mesh import Mesh, TopologyMismatch, build_adjacency
from .multires import MeshHierarchy, hierarchy_arrays, hierarchy_from_arrays
from .nn import RowGather, SparseOperator, Tensor, concat, leaky_relu, reshape, sparse_matmul
from .spiral import build_spirals, spiral_conv

CONFIG_SCHEMA_VERSION = 1


@dataclass
class ModelConfig:
    latent_shape_dim: int = 16
    latent_pose_dim: int = 112
    channels: tuple = (16, 32, 64, 128)
    spiral_lengths: tuple = (10, 9, 8, 7)
    negative_slope: float = 0.02
    entangled: bool = False  # single encoder, code split positionally into (shape, pose)
    init_seed: int = 0
    dtype: str = "float64"  # "float32" roughly halves training time

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.spiral_lengths = tuple(int(c) for c in self.spiral_lengths)
        if self.latent_shape_dim < 1 or self.latent_pose_dim < 1:
            raise ValueError("latent dims must be >= 1")
        if len(self.channels) != len(self.spiral_lengths):
            raise ValueError("channels and spiral_lengths must have one entry per level")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def latent_dim(self) -> int:
        return self.latent_shape_dim + self.latent_pose_dim

    def to_json(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["spiral_lengths"] = list(self.spiral_lengths)
        return d


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


@dataclass(eq=False)
class DisentangleModel:
    config: ModelConfig
    hierarchy: MeshHierarchy
    spirals: list  # (N_k, L_k) index tables
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.hierarchy.levels) != len(self.config.channels):
            raise ValueError(
                f"hierarchy has {len(self.hierarchy.levels)} levels, config expects {len(self.config.channels)}")
        self._gathers = [RowGather(s, m.num_vertices) for s, m in zip(self.spirals, self.hierarchy.levels)]
        self._down = [SparseOperator(M) for M in self.hierarchy.down_ops]
        self._up = [SparseOperator(M) for M in self.hierarchy.up_ops]
        if not self.params:
            self.params = self._init_params()

    @classmethod
    def create(cls, config: ModelConfig, hierarchy: MeshHierarchy) -> "DisentangleModel":
        spirals = [build_spirals(m, build_adjacency(m), L)
                   for m, L in zip(hierarchy.levels, config.spiral_lengths)]
        return cls(config, hierarchy, spirals)

    @property
    def template(self) -> Mesh:
        return self.hierarchy.levels[0]

    @property
    def branches(self) -> tuple:
        return ("enc",) if self.config.entangled else ("shape", "pose")

    def _init_params(self) -> dict:
        cfg = self.config
        rng = np.random.default_rng(cfg.init_seed)
        sizes = self.hierarchy.sizes
        ch = cfg.channels
        p = {}

        dt = np.dtype(cfg.dtype)

        def add(name, fan_in, fan_out, shape):
            p[name] = Tensor(_glorot(rng, fan_in, fan_out, shape).astype(dt), requires_grad=True, name=name)

        def zeros(name, shape):
            p[name] = Tensor(np.zeros(shape, dtype=dt), requires_grad=True, name=name)

        outs = {"enc": cfg.latent_dim, "shape": cfg.latent_shape_dim, "pose": cfg.latent_pose_dim}
        for br in self.branches:
            cin = 3
            for k, (c, L) in enumerate(zip(ch, cfg.spiral_lengths)):
                add(f"{br}.conv{k}.w", L * cin, c, (L * cin, c))
                zeros(f"{br}.conv{k}.b", (c,))
                cin = c
            flat = sizes[-1] * ch[-1]
            add(f"{br}.fc.w", flat, outs[br], (flat, outs[br]))
            zeros(f"{br}.fc.b", (outs[br],))
        flat = sizes[-1] * ch[-1]
        add("dec.fc.w", cfg.latent_dim, flat, (cfg.latent_dim, flat))
        zeros("dec.fc.b", (flat,))
        nlev = len(ch)
        for k in range(nlev - 1, 0, -1):
            L = cfg.spiral_lengths[k - 1]
            add(f"dec.conv{k - 1}.w", L * ch[k], ch[k - 1], (L * ch[k], ch[k - 1]))
            zeros(f"dec.conv{k - 1}.b", (ch[k - 1],))
        L = cfg.spiral_lengths[0]
        add("dec.out.w", L * ch[0], 3, (L * ch[0], 3))
        zeros("dec.out.b", (3,))
        return p

    def branch_params(self, branch: str) -> dict:
        return {k: v for k, v in self.params.items() if k.startswith(branch + ".")}

    # forward ------------------------------------------------------------------

    def _as_tensor(self, x) -> Tensor:
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(x, dtype=self.config.dtype))

    def _check_input(self, x) -> Tensor:
        x = self._as_tensor(x)
        n = self.template.num_vertices
        if x.ndim == 2:
            x = reshape(x, (1,) + x.shape)
        if x.ndim != 3 or x.shape[1:] != (n, 3):
            raise TopologyMismatch(f"input of shape {x.shape} does not match template with {n} vertices")
        return x

    def _encode_branch(self, br: str, x: Tensor) -> Tensor:
        p, slope = self.params, self.config.negative_slope
        h = self._check_input(x)
        nlev = len(self.config.channels)
        for k in range(nlev):
            h = leaky_relu(spiral_conv(h, self._gathers[k], p[f"{br}.conv{k}.w"], p[f"{br}.conv{k}.b"]), slope)
            if k < nlev - 1:
                h = sparse_matmul(self._down[k], h)
        h = reshape(h, (h.shape[0], -1))
        return h @ p[f"{br}.fc.w"] + p[f"{br}.fc.b"]

    def shape_code(self, x) -> Tensor:
        if self.config.entangled:
            return self._encode_branch("enc", x)[:, : self.config.latent_shape_dim]
        return self._encode_branch("shape", x)

    def pose_code(self, x) -> Tensor:
        if self.config.entangled:
            return self._encode_branch("enc", x)[:, self.config.latent_shape_dim:]
        return self._encode_branch("pose", x)

    def encode(self, x) -> tuple[Tensor, Tensor]:
        if self.config.entangled:
            z = self._encode_branch("enc", x)
            d = self.config.latent_shape_dim
            return z[:, :d], z[:, d:]
        return self.shape_code(x), self.pose_code(x)

    def decode(self, beta, theta) -> Tensor:
        cfg, p, slope = self.config, self.params, self.config.negative_slope
        beta = beta if isinstance(beta, Tensor) else self._as_tensor(np.atleast_2d(beta))
        theta = theta if isinstance(theta, Tensor) else self._as_tensor(np.atleast_2d(theta))
        if beta.shape[-1] != cfg.latent_shape_dim or theta.shape[-1] != cfg.latent_pose_dim:
            raise ValueError(
                f"code lengths ({beta.shape[-1]}, {theta.shape[-1]}) do not match "
                f"config ({cfg.latent_shape_dim}, {cfg.latent_pose_dim})")
        z = concat([beta, theta], axis=-1)
        sizes = self.hierarchy.sizes
        nlev = len(cfg.channels)
        h = z @ p["dec.fc.w"] + p["dec.fc.b"]
        h = reshape(h, (z.shape[0], sizes[-1], cfg.channels[-1]))
        for k in range(nlev - 1, 0, -1):
            h = sparse_matmul(self._up[k - 1], h)
            h = leaky_relu(spiral_conv(h, self._gathers[k - 1], p[f"dec.conv{k - 1}.w"], p[f"dec.conv{k - 1}.b"]), slope)
        return spiral_conv(h, self._gathers[0], p["dec.out.w"], p["dec.out.b"])

    def reconstruct(self, x) -> Tensor:
        b, t = self.encode(x)
        return self.decode(b, t)

    # persistence --------------------------------------------------------------

    def state_arrays(self) -> dict:
        """Topology data (hierarchy, spirals, config) for embedding in a checkpoint."""
        out = hierarchy_arrays(self.hierarchy, prefix="hier.")
        for k, s in enumerate(self.spirals):
            out[f"spiral{k}"] = s
        out["model_config"] = np.frombuffer(json.dumps(self.config.to_json(), sort_keys=True).encode(), np.uint8)
        out["template_id"] = np.frombuffer(self.template.topology_id.encode(), np.uint8)
        return out

    @classmethod
    def from_arrays(cls, extra: dict, params: dict | None = None) -> "DisentangleModel":
        cfg = ModelConfig(**json.loads(bytes(extra["model_config"]).decode()))
        hier = hierarchy_from_arrays(extra, prefix="hier.")
        spirals = [extra[f"spiral{k}"] for k in range(len(hier.levels))]
        model = cls(cfg, hier, spirals)
        if params is not None:
            for k, v in params.items():
                if k not in model.params or model.params[k].shape != v.shape:
                    raise ValueError(f"parameter {k!r} does not fit the model")
                model.params[k].data = np.asarray(v, dtype=cfg.dtype).copy()
        stored = bytes(extra["template_id"]).decode()
        if stored != model.template.topology_id:
            raise TopologyMismatch(f"checkpoint template {stored} != rebuilt {model.template.topology_id}")
        return model


def encode(mesh: Mesh, model: DisentangleModel) -> tuple[np.ndarray, np.ndarray]:
    model.template.check_same_topology(mesh) if mesh.topology_id else None
    with nn.no_grad():
        b, t = model.encode(mesh.vertices[None])
    return b.data[0].copy(), t.data[0].copy()


def decode(beta, theta, model: DisentangleModel) -> Mesh:
    with nn.no_grad():
        out = model.decode(np.atleast_2d(beta), np.atleast_2d(theta))
    return model.template.with_vertices(out.data[0])
