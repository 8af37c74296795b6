import json

import numpy as np
import pytest

from shapepose.mesh import MeshError, TopologyMismatch
from shapepose.meshio import DatasetIndex, ParseError, dataset_hash, load_mesh, save_mesh
from shapepose.shapes import icosphere, tetrahedron


def test_obj_unit_square(tmp_path):
    p = tmp_path / "sq.obj"
    p.write_text("# square\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3\nf 1/1 3/3 4/4\n")
    m = load_mesh(p)
    assert (m.num_vertices, m.num_faces) == (4, 2)
    np.testing.assert_array_equal(m.faces, [[0, 1, 2], [0, 2, 3]])


def test_obj_negative_indices(tmp_path):
    p = tmp_path / "neg.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3 -2 -1\n")
    np.testing.assert_array_equal(load_mesh(p).faces, [[0, 1, 2]])


def test_obj_quad_rejected(tmp_path):
    p = tmp_path / "quad.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    with pytest.raises(ParseError, match="non-triangle face"):
        load_mesh(p)


def test_obj_index_out_of_range(tmp_path):
    p = tmp_path / "bad.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nf 1 2 9\n")
    with pytest.raises(MeshError, match="out of range"):
        load_mesh(p)


def test_ply_quad_rejected(tmp_path):
    p = tmp_path / "quad.ply"
    p.write_text("ply\nformat ascii 1.0\nelement vertex 4\nproperty float x\nproperty float y\n"
                 "property float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n"
                 "0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n")
    with pytest.raises(ParseError, match="non-triangle face"):
        load_mesh(p)


def test_unknown_format(tmp_path):
    with pytest.raises(ParseError):
        load_mesh(tmp_path / "x.stl")


def _noisy_sphere():
    m = icosphere(2)
    return m.with_vertices(m.vertices + np.random.default_rng(0).normal(scale=1e-3, size=m.vertices.shape) / 3)


def test_binary_ply_round_trip_bit_exact(tmp_path):
    m = _noisy_sphere()
    save_mesh(m, tmp_path / "m.ply", binary=True)
    out = load_mesh(tmp_path / "m.ply", expected_topology=m.topology_id)
    np.testing.assert_array_equal(out.vertices, m.vertices)
    np.testing.assert_array_equal(out.faces, m.faces)


@pytest.mark.parametrize("name, kwargs", [("m.ply", {"binary": False}), ("m.obj", {})])
def test_ascii_round_trip(tmp_path, name, kwargs):
    m = _noisy_sphere()
    save_mesh(m, tmp_path / name, **kwargs)
    out = load_mesh(tmp_path / name)
    np.testing.assert_allclose(out.vertices, m.vertices, atol=1e-6)
    np.testing.assert_array_equal(out.faces, m.faces)


def test_big_endian_and_float32_ply(tmp_path):
    m = tetrahedron()
    header = ("ply\nformat binary_big_endian 1.0\ncomment test\nelement vertex 4\nproperty float x\n"
              "property float y\nproperty float z\nelement face 4\n"
              "property list uchar uint vertex_indices\nend_header\n").encode()
    body = m.vertices.astype(">f4").tobytes()
    rec = np.zeros(4, dtype=[("k", "u1"), ("idx", ">u4", (3,))])
    rec["k"], rec["idx"] = 3, m.faces
    (tmp_path / "be.ply").write_bytes(header + body + rec.tobytes())
    out = load_mesh(tmp_path / "be.ply")
    np.testing.assert_array_equal(out.vertices, m.vertices)
    np.testing.assert_array_equal(out.faces, m.faces)


def test_topology_mismatch(tmp_path):
    save_mesh(tetrahedron(), tmp_path / "t.ply")
    with pytest.raises(TopologyMismatch):
        load_mesh(tmp_path / "t.ply", expected_topology="0" * 16)


def test_oracle_ply_vertex_count(tmp_path, creature):
    save_mesh(creature.template, tmp_path / "c.ply")
    assert load_mesh(tmp_path / "c.ply").num_vertices == 578


def _index(tmp_path):
    t = tetrahedron()
    save_mesh(t, tmp_path / "template.ply")
    subjects = {}
    for s in range(2):
        for j in range(2):
            name = f"s{s}_{j}.ply"
            save_mesh(t.with_vertices(t.vertices * (1 + s + j / 10)), tmp_path / name)
            subjects.setdefault(f"s{s}", []).append(name)
    idx = DatasetIndex("template.ply", subjects, root=tmp_path)
    idx.save(tmp_path / "index.json")
    return idx


def test_dataset_index_round_trip(tmp_path):
    idx = _index(tmp_path)
    doc = json.loads((tmp_path / "index.json").read_text())
    assert set(doc) == {"topology", "subjects"}
    assert doc["subjects"][0] == {"id": "s0", "meshes": ["s0_0.ply", "s0_1.ply"]}
    back = DatasetIndex.load(tmp_path / "index.json")
    assert back.subjects == idx.subjects
    template, verts, sids, mids = back.load_all()
    assert verts.shape == (4, 4, 3)
    assert sids == ["s0", "s0", "s1", "s1"]
    assert np.abs(verts.mean(axis=1)).max() < 1e-12
    assert dataset_hash(back) == dataset_hash(idx)


def test_dataset_hash_tracks_file_contents(tmp_path):
    idx = _index(tmp_path)
    h0 = dataset_hash(idx)
    t = tetrahedron()
    save_mesh(t.with_vertices(t.vertices * 5), tmp_path / "s0_0.ply")
    assert dataset_hash(idx) != h0


def test_subject_needs_two_meshes():
    with pytest.raises(MeshError, match="at least 2"):
        DatasetIndex("t.ply", {"a": ["x.ply"]})


def test_mixed_topology_rejected(tmp_path):
    idx = _index(tmp_path)
    save_mesh(icosphere(1), tmp_path / "s1_1.ply")
    with pytest.raises(TopologyMismatch):
        idx.load_all()
