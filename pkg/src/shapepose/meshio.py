"""OBJ / PLY readers and writers and the JSON dataset manifest."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mesh import Mesh, MeshError, TopologyMismatch


class ParseError(MeshError):
    pass


def load_mesh(path, expected_topology: str | None = None) -> Mesh:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        vertices, faces = _read_obj(path)
    elif suffix == ".ply":
        vertices, faces = _read_ply(path)
    else:
        raise ParseError(f"{path}: unsupported mesh format {suffix!r}")
    mesh = Mesh(vertices, faces)
    if expected_topology is not None and mesh.topology_id != expected_topology:
        raise TopologyMismatch(
            f"{path}: topology {mesh.topology_id} does not match expected {expected_topology}")
    return mesh


def save_mesh(mesh: Mesh, path, binary: bool = True) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        _write_obj(mesh, path)
    elif suffix == ".ply":
        _write_ply(mesh, path, binary=binary)
    else:
        raise ParseError(f"{path}: unsupported mesh format {suffix!r}")


def _read_obj(path: Path):
    vertices, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                try:
                    vertices.append([float(x) for x in parts[1:4]])
                except ValueError as exc:
                    raise ParseError(f"{path}:{lineno}: bad vertex record") from exc
                if len(vertices[-1]) != 3:
                    raise ParseError(f"{path}:{lineno}: vertex needs 3 coordinates")
            elif parts[0] == "f":
                idx = parts[1:]
                if len(idx) != 3:
                    raise ParseError(f"{path}:{lineno}: non-triangle face with {len(idx)} vertices")
                try:
                    tri = [int(tok.split("/")[0]) for tok in idx]
                except ValueError as exc:
                    raise ParseError(f"{path}:{lineno}: bad face record") from exc
                n = len(vertices)
                # negative OBJ indices are relative to the current vertex count
                faces.append([t - 1 if t > 0 else n + t for t in tri])
    return np.array(vertices, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def _write_obj(mesh: Mesh, path: Path) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write("v {!r} {!r} {!r}\n".format(*map(float, v)))
        for f in mesh.faces + 1:
            fh.write(f"f {f[0]} {f[1]} {f[2]}\n")


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_ply_header(fh, path):
    if fh.readline().strip() != b"ply":
        raise ParseError(f"{path}: missing ply magic")
    fmt = None
    elements = []
    while True:
        line = fh.readline()
        if not line:
            raise ParseError(f"{path}: unterminated header")
        parts = line.decode("ascii", "replace").split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append({"name": parts[1], "count": int(parts[2]), "props": []})
        elif parts[0] == "property":
            if not elements:
                raise ParseError(f"{path}: property before element")
            if parts[1] == "list":
                elements[-1]["props"].append((parts[4], "list", parts[2], parts[3]))
            else:
                elements[-1]["props"].append((parts[2], parts[1]))
        elif parts[0] == "end_header":
            break
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise ParseError(f"{path}: unsupported ply format {fmt!r}")
    return fmt, elements


def _read_ply(path: Path):
    with open(path, "rb") as fh:
        fmt, elements = _parse_ply_header(fh, path)
        body = fh.read()
    vertices = faces = None
    if fmt == "ascii":
        tokens = body.split()
        pos = 0
        for el in elements:
            rows = []
            for _ in range(el["count"]):
                row = []
                for prop in el["props"]:
                    if prop[1] == "list":
                        k = int(tokens[pos])
                        pos += 1
                        row.append([int(t) for t in tokens[pos:pos + k]])
                        pos += k
                    else:
                        row.append(float(tokens[pos]))
                        pos += 1
                rows.append(row)
            vertices, faces = _collect(el, rows, vertices, faces, path)
    else:
        endian = "<" if fmt == "binary_little_endian" else ">"
        offset = 0
        for el in elements:
            has_list = any(p[1] == "list" for p in el["props"])
            if not has_list:
                dt = np.dtype([(p[0], endian + _PLY_TYPES[p[1]]) for p in el["props"]])
                arr = np.frombuffer(body, dtype=dt, count=el["count"], offset=offset)
                offset += dt.itemsize * el["count"]
                if el["name"] == "vertex":
                    vertices = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64)
                continue
            props = el["props"]
            if len(props) == 1 and el["name"] == "face":
                ct = np.dtype(endian + _PLY_TYPES[props[0][2]])
                it = np.dtype(endian + _PLY_TYPES[props[0][3]])
                dt = np.dtype([("k", ct), ("idx", it, (3,))])
                if len(body) >= offset + dt.itemsize * el["count"]:
                    arr = np.frombuffer(body, dtype=dt, count=el["count"], offset=offset)
                    if (arr["k"] == 3).all():
                        faces = arr["idx"].astype(np.int64)
                        offset += dt.itemsize * el["count"]
                        continue
            rows = []
            for _ in range(el["count"]):
                row = []
                for prop in el["props"]:
                    if prop[1] == "list":
                        ct = np.dtype(endian + _PLY_TYPES[prop[2]])
                        it = np.dtype(endian + _PLY_TYPES[prop[3]])
                        k = int(np.frombuffer(body, ct, 1, offset)[0])
                        offset += ct.itemsize
                        row.append(np.frombuffer(body, it, k, offset).tolist())
                        offset += it.itemsize * k
                    else:
                        t = np.dtype(endian + _PLY_TYPES[prop[1]])
                        row.append(float(np.frombuffer(body, t, 1, offset)[0]))
                        offset += t.itemsize
                rows.append(row)
            vertices, faces = _collect(el, rows, vertices, faces, path)
    if vertices is None:
        raise ParseError(f"{path}: no vertex element")
    if faces is None:
        faces = np.zeros((0, 3), np.int64)
    return vertices, faces


def _collect(el, rows, vertices, faces, path):
    names = [p[0] for p in el["props"]]
    if el["name"] == "vertex":
        try:
            cols = [names.index(c) for c in "xyz"]
        except ValueError as exc:
            raise ParseError(f"{path}: vertex element lacks x/y/z") from exc
        vertices = np.array([[r[c] for c in cols] for r in rows], dtype=np.float64).reshape(-1, 3)
    elif el["name"] == "face":
        li = next((k for k, p in enumerate(el["props"]) if p[1] == "list"), None)
        if li is None:
            raise ParseError(f"{path}: face element lacks an index list")
        for r in rows:
            if len(r[li]) != 3:
                raise ParseError(f"{path}: non-triangle face with {len(r[li])} vertices")
        faces = np.array([r[li] for r in rows], dtype=np.int64).reshape(-1, 3)
    return vertices, faces


def _write_ply(mesh: Mesh, path: Path, binary: bool = True) -> None:
    n, f = mesh.num_vertices, mesh.num_faces
    vtype = "double"
    header = (
        "ply\n"
        f"format {'binary_little_endian' if binary else 'ascii'} 1.0\n"
        f"element vertex {n}\n"
        f"property {vtype} x\nproperty {vtype} y\nproperty {vtype} z\n"
        f"element face {f}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(mesh.vertices, dtype="<f8").tobytes())
            rec = np.zeros(f, dtype=[("k", "u1"), ("idx", "<i4", (3,))])
            rec["k"] = 3
            rec["idx"] = mesh.faces
            fh.write(rec.tobytes())
        else:
            lines = ["{!r} {!r} {!r}".format(*map(float, v)) for v in mesh.vertices]
            lines += [f"3 {a} {b} {c}" for a, b, c in mesh.faces.tolist()]
            fh.write(("\n".join(lines) + "\n").encode("ascii"))


@dataclass
class DatasetIndex:
    """Subjects and their registered meshes, all sharing one template topology."""

    topology: str
    subjects: dict[str, list[str]] = field(default_factory=dict)
    root: Path = Path(".")

    def __post_init__(self):
        for sid, meshes in self.subjects.items():
            if len(meshes) < 2:
                raise MeshError(f"subject {sid!r} has {len(meshes)} mesh(es); at least 2 are required")

    @property
    def records(self) -> list[tuple[str, str, Path]]:
        return [(m, sid, self.resolve(m)) for sid, ms in self.subjects.items() for m in ms]

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.root / p

    def load_all(self, center_meshes: bool = True):
        """Load every mesh; returns (template Mesh, vertices (M, N, 3), subject ids, mesh ids)."""
        from .mesh import center
        template = load_mesh(self.resolve(self.topology))
        arrays, sids, mids = [], [], []
        for mid, sid, path in self.records:
            m = load_mesh(path, expected_topology=template.topology_id)
            if center_meshes:
                m = center(m)
            arrays.append(m.vertices)
            sids.append(sid)
            mids.append(mid)
        return template, np.stack(arrays), sids, mids

    def to_json(self) -> dict:
        return {"topology": str(self.topology),
                "subjects": [{"id": s, "meshes": list(m)} for s, m in self.subjects.items()]}

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "DatasetIndex":
        path = Path(path)
        with open(path) as fh:
            doc = json.load(fh)
        subjects = {str(s["id"]): [str(m) for m in s["meshes"]] for s in doc["subjects"]}
        return cls(doc["topology"], subjects, root=path.parent)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def dataset_hash(index: DatasetIndex) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(index.to_json(), sort_keys=True).encode())
    for _, _, path in sorted(index.records):
        h.update(file_sha256(path).encode())
    return h.hexdigest()[:16]


__all__ = ["load_mesh", "save_mesh", "DatasetIndex", "ParseError", "dataset_hash", "file_sha256"]
