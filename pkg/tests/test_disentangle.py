import csv
import itertools

import numpy as np
import pytest
from scipy.stats import chisquare

from conftest import toy_template
from shapepose import nn
from shapepose import disentangle as dis
from shapepose.disentangle import (
    AblationMode, ArapSettings, LossReport, TrainConfig, TrainingData, TrainingDiverged, cross_consistency_loss,
    make_proxy, sample_triplet, self_consistency_loss, train,
)
from shapepose.model import DisentangleModel, ModelConfig
from shapepose.multires import build_hierarchy


def _enumerate(labels):
    out = []
    for i, j, k in itertools.product(range(len(labels)), repeat=3):
        if i != j and labels[i] == labels[j] and labels[k] != labels[i]:
            out.append((i, j, k))
    return out


def test_triplet_uniform_two_by_two():
    labels = ["a", "a", "b", "b"]
    valid = _enumerate(labels)
    assert len(valid) == 8
    rng = np.random.default_rng(0)
    counts = dict.fromkeys(valid, 0)
    n = 10_000
    for _ in range(n):
        t = sample_triplet(labels, rng)
        counts[(t.x1, t.x2, t.xt)] += 1
    obs = np.array(list(counts.values()))
    p = 1 / 8
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(obs - n * p) <= 3 * sigma)
    assert chisquare(obs).pvalue > 1e-3


def test_triplet_uniform_unequal_groups():
    labels = ["a"] * 2 + ["b"] * 3 + ["c"] * 4
    valid = _enumerate(labels)
    rng = np.random.default_rng(1)
    counts = dict.fromkeys(valid, 0)
    n = 40_000
    for _ in range(n):
        t = sample_triplet(labels, rng)
        key = (t.x1, t.x2, t.xt)
        assert key in counts
        assert t.subject == labels[t.x1] == labels[t.x2] != t.other_subject == labels[t.xt]
        counts[key] += 1
    assert chisquare(np.array(list(counts.values()))).pvalue > 1e-3


def test_triplet_determinism_and_errors():
    labels = ["a", "a", "b", "b", "b"]
    assert sample_triplet(labels, 42) == sample_triplet(labels, 42)
    with pytest.raises(ValueError):
        sample_triplet(["a", "a", "a"], 0)


def test_ablation_parsing():
    assert AblationMode.parse("no-arap") is AblationMode.NO_ARAP
    assert AblationMode.parse("no-self") is AblationMode.NO_SELF_CONSISTENCY
    assert AblationMode.parse("full") is AblationMode.FULL
    with pytest.raises(ValueError):
        AblationMode.parse("bogus")


class AverageStub:
    """Codes are the flattened mesh; the decoder averages the two inputs."""

    def __init__(self, template):
        self.template = template

    def shape_code(self, x):
        return nn.reshape(x if isinstance(x, nn.Tensor) else nn.Tensor(x), (len(x), -1))

    pose_code = shape_code

    def decode(self, b, t):
        n = self.template.num_vertices
        return nn.reshape((b + t) * 0.5, (b.shape[0], n, 3))


def test_cross_loss_hand_value():
    from shapepose.mesh import Mesh
    tpl = Mesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]]), [[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    x1 = np.zeros((4, 3))
    x2 = x1.copy()
    x2[0] = [2, 0, 0]
    x2[3] = [0, -4, 1]
    # decode = (x2 + x1) / 2, so |out - x1| sums to (2 + 4 + 1) / 2 over 4 vertices
    val = cross_consistency_loss(x1, x2, AverageStub(tpl)).item()
    assert val == pytest.approx(0.875, abs=1e-15)


@pytest.fixture(scope="module")
def toy_setup():
    m = toy_template()
    h = build_hierarchy(m, 3, 2.0)
    cfg = ModelConfig(latent_shape_dim=2, latent_pose_dim=3, channels=(3, 4, 5), spiral_lengths=(5, 4, 3))
    rng = np.random.default_rng(0)
    verts = np.stack([m.vertices * s + rng.normal(scale=0.02, size=m.vertices.shape)
                      for s in (1.0, 1.0, 1.2, 1.2, 0.8, 0.8)])
    verts -= verts.mean(axis=1, keepdims=True)
    data = TrainingData(m, verts, ["a", "a", "b", "b", "c", "c"])
    return m, h, cfg, data


def test_cross_loss_degenerate_swap_is_reconstruction(toy_setup):
    m, h, cfg, data = toy_setup
    model = DisentangleModel.create(cfg, h)
    x = data.vertices[:2]
    lc = cross_consistency_loss(x, x, model).item()
    with nn.no_grad():
        rec = np.abs(model.reconstruct(x).data - x).sum() / (2 * 20)
    assert lc == pytest.approx(rec, rel=1e-12)
    assert lc >= 0


def test_self_loss_no_self_skips_arap(toy_setup, monkeypatch):
    m, h, cfg, data = toy_setup
    model = DisentangleModel.create(cfg, h)

    def boom(*a, **k):
        raise AssertionError("ARAP must not run")

    monkeypatch.setattr(dis, "arap_deform_batch", boom)
    v = data.vertices
    assert self_consistency_loss(v[:1], v[1:2], v[2:3], model, "no_self_consistency").item() == 0.0
    with pytest.raises(AssertionError):
        self_consistency_loss(v[:1], v[1:2], v[2:3], model, "full")


def test_self_loss_no_arap_uses_decoded_proxy(toy_setup):
    m, h, cfg, data = toy_setup
    model = DisentangleModel.create(cfg, h)
    v = data.vertices
    x1, x2, xt = v[[0]], v[[1]], v[[2]]
    with nn.no_grad():
        proxy = model.decode(model.shape_code(xt), model.pose_code(x1)).data
        manual = np.abs(model.decode(model.shape_code(x2), model.pose_code(proxy)).data - x1).sum() / 20
    assert self_consistency_loss(x1, x2, xt, model, "no_arap").item() == pytest.approx(manual, rel=1e-12)
    np.testing.assert_array_equal(make_proxy(x1, xt, model, "no_arap"), proxy)


def test_full_proxy_is_arap_of_xt(toy_setup):
    from shapepose.arap import arap_deform
    m, h, cfg, data = toy_setup
    model = DisentangleModel.create(cfg, h)
    v = data.vertices
    proxy = make_proxy(v[[0]], v[[2]], model, "no_arap")
    full = make_proxy(v[[0]], v[[2]], model, "full", ArapSettings(0.1, 1), arap_seeds=[5])
    ref = arap_deform(m.with_vertices(v[2]), m.with_vertices(proxy[0]), 0.1, 1, 5).vertices
    np.testing.assert_array_equal(full[0], ref)


def test_no_gradient_through_proxy(toy_setup):
    """Gradients equal those of the same loss with the proxy supplied as a constant array."""
    m, h, cfg, data = toy_setup
    model = DisentangleModel.create(cfg, h)
    v = data.vertices
    x1, x2, xt = v[[0, 2]], v[[1, 3]], v[[4, 5]]
    seeds = [1, 2]

    def grads(fn):
        for p in model.params.values():
            p.zero_grad()
        with nn.Tape() as tape:
            loss = fn()
        tape.backward(loss)
        return {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in model.params.items()}

    proxy = make_proxy(x1, xt, model, "full", arap_seeds=seeds)
    g_loss = grads(lambda: self_consistency_loss(x1, x2, xt, model, "full", arap_seeds=seeds))

    def constant_path():
        out = model.decode(model.shape_code(x2), model.pose_code(proxy))
        return nn.l1_loss(out, nn.Tensor(x1)) * (1.0 / (2 * 20))

    g_const = grads(constant_path)
    for k in g_loss:
        np.testing.assert_array_equal(g_loss[k], g_const[k], err_msg=k)
    # the proxy depends on the shape branch through xt, yet xt contributes nothing here
    x_other = v[[2, 3]]
    g_swapped = grads(lambda: self_consistency_loss(x1, x2, x_other, model, "no_arap"))
    assert any(np.any(g_swapped[k] != 0) for k in g_swapped)


class OracleStub:
    """Exact factor encoder/decoder backed by the capsule creature."""

    def __init__(self, creature, factors):
        self.creature = creature
        self.template = creature.template
        self.factors = factors  # list of (shape, pose, vertices)

    def _lookup(self, x, which):
        x = x.data if isinstance(x, nn.Tensor) else np.asarray(x)
        rows = []
        for v in x:
            i = int(np.argmin([np.abs(v - f[2]).max() for f in self.factors]))
            rows.append(self.factors[i][which])
        return nn.Tensor(np.array(rows))

    def shape_code(self, x):
        return self._lookup(x, 0)

    def pose_code(self, x):
        return self._lookup(x, 1)

    def decode(self, b, t):
        return nn.Tensor(np.stack([self.creature.render(s, p) for s, p in zip(b.data, t.data)]))


def test_perfect_stub_has_zero_self_loss(creature):
    rng = np.random.default_rng(4)
    from shapepose.evalbench.oracle import POSE_HIGH, POSE_LOW, SHAPE_HIGH, SHAPE_LOW
    sa, sb = rng.uniform(SHAPE_LOW, SHAPE_HIGH, size=(2, 8))
    p1, p2, pt = rng.uniform(POSE_LOW, POSE_HIGH, size=(3, 8))
    factors = [(s, p, creature.render(s, p)) for s, p in ((sa, p1), (sa, p2), (sb, pt), (sb, p1))]
    stub = OracleStub(creature, factors)
    x1, x2, xt = (factors[i][2][None] for i in range(3))
    ls = self_consistency_loss(x1, x2, xt, stub, "no_arap").item()
    assert ls < 1e-8
    assert cross_consistency_loss(x1, x2, stub).item() < 1e-8


def test_loss_report_row_and_total():
    r = LossReport(3, 0.1, 0.2, 0.5 * 0.1 + 0.5 * 0.2, 1e-3)
    assert r.row() == ["3", "0.1", "0.2", repr(0.15000000000000002), "0.001"]
    assert abs(r.total - (r.lambda_c * r.L_C + r.lambda_s * r.L_S)) < 1e-12


def _cfg(**kw):
    base = dict(steps=6, batch_size=2, seed=3, checkpoint_every=3, log_every=1,
                model=ModelConfig(latent_shape_dim=2, latent_pose_dim=3, channels=(3, 4, 5),
                                  spiral_lengths=(5, 4, 3)))
    base.update(kw)
    return TrainConfig(**base)


def test_train_reports_and_total_identity(toy_setup, tmp_path):
    m, h, _, data = toy_setup
    res = train(data, _cfg(), tmp_path, hierarchy=h)
    assert len(res.reports) == 6
    for r in res.reports:
        assert (r.lambda_c, r.lambda_s) == (0.5, 0.5)
        assert abs(r.total - (0.5 * r.L_C + 0.5 * r.L_S)) <= 1e-12
    rows = list(csv.reader(open(res.metrics_path)))
    assert rows[0] == ["step", "L_C", "L_S", "total", "lr"]
    assert [int(r[0]) for r in rows[1:]] == list(range(1, 7))
    assert float(rows[1][4]) == pytest.approx(1e-3)
    assert (tmp_path / "manifest.json").exists()


def test_train_is_deterministic_and_resumable(toy_setup, tmp_path):
    m, h, _, data = toy_setup
    a = train(data, _cfg(), tmp_path / "a", hierarchy=h)
    b = train(data, _cfg(), tmp_path / "b", hierarchy=h)
    assert a.metrics_path.read_bytes() == b.metrics_path.read_bytes()
    # interrupted after 3 steps, then resumed from the step-3 checkpoint
    train(data, _cfg(), tmp_path / "c", hierarchy=h, stop_at=3)
    c = train(data, _cfg(), tmp_path / "c", resume=tmp_path / "c" / "checkpoint.npz")
    assert c.metrics_path.read_bytes() == a.metrics_path.read_bytes()
    for k in a.model.params:
        assert a.model.params[k].data.tobytes() == c.model.params[k].data.tobytes()


def test_resume_rejects_other_config(toy_setup, tmp_path):
    m, h, _, data = toy_setup
    train(data, _cfg(), tmp_path, hierarchy=h, stop_at=3)
    with pytest.raises(ValueError, match="different configuration"):
        train(data, _cfg(seed=99), tmp_path / "x", resume=tmp_path / "checkpoint.npz")


def test_no_self_and_reconstruction_modes(toy_setup):
    m, h, _, data = toy_setup
    r = train(data, _cfg(ablation="no-self"), hierarchy=h)
    assert all(x.L_S == 0.0 and x.lambda_s == 0.5 for x in r.reports)
    ent = _cfg(ablation="reconstruction", model=ModelConfig(latent_shape_dim=2, latent_pose_dim=3,
               channels=(3, 4, 5), spiral_lengths=(5, 4, 3), entangled=True))
    r = train(data, ent, hierarchy=h)
    assert all(x.L_S == 0.0 for x in r.reports)


def test_nan_aborts_with_last_good_checkpoint(toy_setup, tmp_path, monkeypatch):
    m, h, _, data = toy_setup
    real = dis.training_step

    def flaky(model, d, cfg, step, groups=None):
        out = real(model, d, cfg, step, groups)
        return (float("nan"),) * 3 if step == 4 else out

    monkeypatch.setattr(dis, "training_step", flaky)
    with pytest.raises(TrainingDiverged) as exc:
        train(data, _cfg(), tmp_path, hierarchy=h)
    assert exc.value.checkpoint == str(tmp_path / "checkpoint.npz")
    assert nn.load_checkpoint(exc.value.checkpoint)["header"]["step"] == 3


def test_config_json_round_trip():
    cfg = _cfg(ablation="no-arap")
    back = TrainConfig.from_json(cfg.to_json())
    assert back.to_json() == cfg.to_json()
    assert back.ablation == "no_arap"


def test_float32_model_trains_in_float32(toy_setup, tmp_path):
    m, h, _, data = toy_setup
    mc = ModelConfig(latent_shape_dim=2, latent_pose_dim=3, channels=(3, 4, 5),
                     spiral_lengths=(5, 4, 3), dtype="float32")
    single = train(data, _cfg(), hierarchy=h)
    half = train(data, _cfg(model=mc), tmp_path, hierarchy=h)
    assert {p.data.dtype for p in half.model.params.values()} == {np.dtype(np.float32)}
    # same init and triplets, so the first losses agree to single precision
    assert half.reports[0].L_C == pytest.approx(single.reports[0].L_C, rel=1e-4)
    assert half.reports[0].L_S == pytest.approx(single.reports[0].L_S, rel=1e-4)
    resumed = dis.load_model(tmp_path / "checkpoint.npz")
    assert resumed.params[next(iter(resumed.params))].data.dtype == np.float32


def test_model_config_rejects_other_dtypes():
    with pytest.raises(ValueError):
        ModelConfig(dtype="float16")
