"""OBJ / PLY mesh and cloud files, PFM and 16-bit PNG depth images."""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from .geometry import PointCloud, TriangleMesh

log = logging.getLogger(__name__)

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _drop_degenerate(vertices, faces):
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(faces) == 0:
        return faces, 0
    tri = vertices[faces]
    area2 = np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    repeated = (faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])
    keep = ~repeated & (area2 > 0)
    return faces[keep], int((~keep).sum())


def read_mesh(path, return_dropped=False):
    """Load an OBJ or PLY mesh; zero-area faces are dropped and counted."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        verts, faces = _read_obj(path)
    elif suffix == ".ply":
        verts, faces, _ = _read_ply(path)
    else:
        raise ValueError(f"unsupported mesh format: {suffix}")
    faces, dropped = _drop_degenerate(verts, faces)
    if dropped:
        log.info("%s: dropped %d degenerate faces", path.name, dropped)
    mesh = TriangleMesh(verts, faces)
    return (mesh, dropped) if return_dropped else mesh


def write_mesh(path, mesh: TriangleMesh, binary=True):
    path = Path(path)
    if path.suffix.lower() == ".obj":
        with open(path, "w") as fh:
            for v in mesh.vertices:
                fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
            for f in mesh.faces + 1:
                fh.write(f"f {f[0]} {f[1]} {f[2]}\n")
    elif path.suffix.lower() == ".ply":
        _write_ply(path, mesh.vertices, mesh.faces, None, binary)
    else:
        raise ValueError(f"unsupported mesh format: {path.suffix}")


def read_cloud(path) -> PointCloud:
    verts, _, normals = _read_ply(Path(path))
    if normals is not None:
        norm = np.linalg.norm(normals, axis=1, keepdims=True)
        normals = normals / np.where(norm > 0, norm, 1.0)
    return PointCloud(verts, normals)


def write_cloud(path, cloud: PointCloud, binary=True):
    _write_ply(Path(path), cloud.points, None, cloud.normals, binary)


def _read_obj(path):
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = []
                for tok in parts[1:]:
                    i = int(tok.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                # fan-triangulate polygons
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
    return np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def _read_ply(path):
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise ValueError(f"{path}: not a PLY file")
        fmt = None
        elements = []
        while True:
            line = fh.readline()
            if not line:
                raise ValueError(f"{path}: truncated header")
            tok = line.decode("ascii").split()
            if not tok:
                continue
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                elements.append([tok[1], int(tok[2]), []])
            elif tok[0] == "property":
                elements[-1][2].append(tok[1:])
            elif tok[0] == "end_header":
                break
        if fmt not in ("ascii", "binary_little_endian"):
            raise ValueError(f"{path}: unsupported PLY format {fmt}")
        data = {}
        if fmt == "ascii":
            rest = fh.read().decode("ascii").split()
            pos = 0
            for name, count, props in elements:
                rows = []
                for _ in range(count):
                    row = []
                    for prop in props:
                        if prop[0] == "list":
                            n = int(rest[pos])
                            row.append([float(x) for x in rest[pos + 1 : pos + 1 + n]])
                            pos += 1 + n
                        else:
                            row.append(float(rest[pos]))
                            pos += 1
                    rows.append(row)
                data[name] = (props, rows)
        else:
            buf = fh.read()
            pos = 0
            for name, count, props in elements:
                if all(p[0] != "list" for p in props):
                    dt = np.dtype([(p[1], "<" + _PLY_TYPES[p[0]]) for p in props])
                    arr = np.frombuffer(buf, dtype=dt, count=count, offset=pos)
                    pos += dt.itemsize * count
                    rows = [[arr[p[1]][i] for p in props] for i in range(count)] if name != "vertex" else arr
                    data[name] = (props, rows)
                    continue
                rows = []
                for _ in range(count):
                    row = []
                    for prop in props:
                        if prop[0] == "list":
                            ct = np.dtype("<" + _PLY_TYPES[prop[1]])
                            it = np.dtype("<" + _PLY_TYPES[prop[2]])
                            n = int(np.frombuffer(buf, ct, 1, pos)[0])
                            pos += ct.itemsize
                            row.append(np.frombuffer(buf, it, n, pos).tolist())
                            pos += it.itemsize * n
                        else:
                            t = np.dtype("<" + _PLY_TYPES[prop[0]])
                            row.append(np.frombuffer(buf, t, 1, pos)[0])
                            pos += t.itemsize
                    rows.append(row)
                data[name] = (props, rows)

    props, rows = data.get("vertex", ([], []))
    names = [p[-1] for p in props]

    def column(n):
        if isinstance(rows, np.ndarray):
            return np.asarray(rows[n], dtype=np.float64)
        return np.array([r[names.index(n)] for r in rows], dtype=np.float64)

    verts = np.stack([column("x"), column("y"), column("z")], axis=1) if len(rows) else np.zeros((0, 3))
    normals = None
    if all(n in names for n in ("nx", "ny", "nz")) and len(rows):
        normals = np.stack([column("nx"), column("ny"), column("nz")], axis=1)
    faces = []
    if "face" in data:
        fprops, frows = data["face"]
        li = [i for i, p in enumerate(fprops) if p[0] == "list"][0]
        for r in frows:
            idx = [int(x) for x in r[li]]
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
    return verts, np.array(faces, dtype=np.int64).reshape(-1, 3), normals


def _write_ply(path, verts, faces, normals, binary):
    verts = np.asarray(verts, dtype=np.float64)
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0", f"element vertex {len(verts)}"]
    header += [f"property double {c}" for c in "xyz"]
    if normals is not None:
        header += [f"property double n{c}" for c in "xyz"]
    if faces is not None:
        header += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    header.append("end_header")
    cols = verts if normals is None else np.hstack([verts, normals])
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(cols, dtype="<f8").tobytes())
            if faces is not None:
                rec = np.zeros(len(faces), dtype=[("n", "u1"), ("i", "<i4", (3,))])
                rec["n"] = 3
                rec["i"] = faces
                fh.write(rec.tobytes())
        else:
            for row in cols:
                fh.write((" ".join(f"{x:.17g}" for x in row) + "\n").encode("ascii"))
            if faces is not None:
                for f in faces:
                    fh.write(f"3 {f[0]} {f[1]} {f[2]}\n".encode("ascii"))


# depth images -------------------------------------------------------------------


def write_pfm(path, image):
    """Single-channel little-endian PFM, rows stored bottom-to-top."""
    img = np.asarray(image, dtype="<f4")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.flipud(img).tobytes())


def read_pfm(path):
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"Pf":
            raise ValueError("only single-channel PFM is supported")
        w, h = (int(x) for x in fh.readline().split())
        scale = float(fh.readline())
        dt = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(w * h * 4), dtype=dt).reshape(h, w)
    return np.flipud(data).astype(np.float64)


def write_png16_mm(path, depth_m):
    from PIL import Image

    mm = np.clip(np.round(np.asarray(depth_m) * 1000.0), 0, 65535).astype("<u2")
    Image.fromarray(mm).save(path)


def read_png16_mm(path):
    from PIL import Image

    return np.asarray(Image.open(path), dtype=np.float64) / 1000.0


def write_mask_png(path, mask):
    from PIL import Image

    Image.fromarray(np.where(np.asarray(mask), 255, 0).astype(np.uint8)).save(path)
