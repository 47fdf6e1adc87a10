"""File formats: PLY point clouds/meshes, Gaussian checkpoints, OBJ, PFM, PNG.

All binary output is little-endian. Stage boundaries in the pipeline are
files in these formats, never in-memory handoffs.
"""

from __future__ import annotations

import os

import numpy as np
from PIL import Image

from .core import (CameraModel, DensePointCloud, GaussianCloud, InvalidInputError,
                   TriangleMesh)

# De facto splatting-checkpoint color convention: the stored DC feature f
# relates to RGB by color = 0.5 + SH_C0 * f, so third-party viewers
# display the expected colors.
SH_C0 = 0.28209479177387814

_PLY_DTYPES = {
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
    "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
    "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
}


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

def _read_ply_header(fh):
    magic = fh.readline().strip()
    if magic != b"ply":
        raise InvalidInputError("not a PLY file")
    fmt = None
    elements = []  # (name, count, [(prop_name, dtype) or ('list', idx_t, val_t, name)])
    while True:
        line = fh.readline()
        if not line:
            raise InvalidInputError("unexpected end of PLY header")
        tokens = line.decode("ascii").strip().split()
        if not tokens:
            continue
        if tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element":
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if tokens[1] == "list":
                elements[-1][2].append(("list", tokens[2], tokens[3], tokens[4]))
            else:
                elements[-1][2].append((tokens[2], tokens[1]))
        elif tokens[0] == "end_header":
            break
    if fmt not in ("ascii", "binary_little_endian"):
        raise InvalidInputError(f"unsupported PLY format: {fmt}")
    return fmt, elements


def read_ply(path):
    """Read a PLY file into {element_name: {property: array}}.

    Supports ascii and binary_little_endian, scalar properties and a
    single list property per element (face vertex indices).
    """
    with open(path, "rb") as fh:
        fmt, elements = _read_ply_header(fh)
        out = {}
        for name, count, props in elements:
            has_list = any(p[0] == "list" for p in props)
            if not has_list:
                dtype = np.dtype([(p[0], _PLY_DTYPES[p[1]]) for p in props])
                if fmt == "ascii":
                    rows = [fh.readline().split() for _ in range(count)]
                    arr = np.zeros(count, dtype=dtype)
                    for j, p in enumerate(props):
                        arr[p[0]] = np.array([r[j] for r in rows], dtype=dtype[j])
                else:
                    arr = np.frombuffer(fh.read(dtype.itemsize * count), dtype=dtype,
                                        count=count)
                out[name] = {p[0]: np.ascontiguousarray(arr[p[0]]) for p in props}
            else:
                if len(props) != 1:
                    raise InvalidInputError("mixed list/scalar PLY elements unsupported")
                _, idx_t, val_t, pname = props[0]
                lists = []
                if fmt == "ascii":
                    for _ in range(count):
                        vals = fh.readline().split()
                        n = int(vals[0])
                        lists.append([int(v) for v in vals[1:1 + n]])
                else:
                    idx_dt = np.dtype(_PLY_DTYPES[idx_t])
                    val_dt = np.dtype(_PLY_DTYPES[val_t])
                    for _ in range(count):
                        n = int(np.frombuffer(fh.read(idx_dt.itemsize), idx_dt)[0])
                        lists.append(np.frombuffer(fh.read(val_dt.itemsize * n),
                                                   val_dt, count=n).astype(np.int64))
                out[name] = {pname: lists}
        return out


def _write_ply_header(fh, elements, comments=()):
    fh.write(b"ply\nformat binary_little_endian 1.0\n")
    for c in comments:
        fh.write(f"comment {c}\n".encode("ascii"))
    for name, count, props in elements:
        fh.write(f"element {name} {count}\n".encode("ascii"))
        for p in props:
            fh.write(f"property {p}\n".encode("ascii"))
    fh.write(b"end_header\n")


def write_point_cloud_ply(cloud: DensePointCloud, path) -> None:
    """Dense oriented point cloud as binary PLY: x y z nx ny nz."""
    props = [f"float {n}" for n in ("x", "y", "z", "nx", "ny", "nz")]
    data = np.hstack([cloud.positions, cloud.normals]).astype("<f4")
    with open(path, "wb") as fh:
        _write_ply_header(fh, [("vertex", len(cloud), props)])
        fh.write(data.tobytes())


def read_point_cloud_ply(path) -> DensePointCloud:
    elems = read_ply(path)
    if "vertex" not in elems:
        raise InvalidInputError(f"{path}: PLY has no vertex element")
    v = elems["vertex"]
    pos = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    if not all(k in v for k in ("nx", "ny", "nz")):
        raise InvalidInputError(f"{path}: point cloud PLY lacks normals")
    nrm = np.stack([v["nx"], v["ny"], v["nz"]], axis=1).astype(np.float64)
    lens = np.linalg.norm(nrm, axis=1)
    lens[lens == 0] = 1.0
    return DensePointCloud(pos, nrm / lens[:, None])


GAUSSIAN_PLY_PROPS = ("x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
                      "scale_0", "scale_1", "scale_2",
                      "rot_0", "rot_1", "rot_2", "rot_3")


def write_gaussian_ply(cloud: GaussianCloud, path) -> None:
    """Gaussian checkpoint as binary PLY, splatting-viewer compatible.

    Stores log-scales, the opacity logit and the (w,x,y,z) quaternion
    verbatim; colors are converted to DC features.
    """
    f_dc = (cloud.colors - 0.5) / SH_C0
    data = np.hstack([
        cloud.positions, f_dc, cloud.opacity_logits[:, None],
        cloud.log_scales, cloud.rotations,
    ]).astype("<f4")
    props = [f"float {n}" for n in GAUSSIAN_PLY_PROPS]
    with open(path, "wb") as fh:
        _write_ply_header(fh, [("vertex", len(cloud), props)])
        fh.write(data.tobytes())


def read_gaussian_ply(path) -> GaussianCloud:
    elems = read_ply(path)
    v = elems.get("vertex")
    if v is None or not all(k in v for k in GAUSSIAN_PLY_PROPS):
        raise InvalidInputError(f"{path}: not a Gaussian checkpoint PLY")
    cols = {k: np.asarray(v[k], dtype=np.float64) for k in GAUSSIAN_PLY_PROPS}
    colors = np.clip(0.5 + SH_C0 * np.stack(
        [cols["f_dc_0"], cols["f_dc_1"], cols["f_dc_2"]], axis=1), 0.0, 1.0)
    return GaussianCloud(
        np.stack([cols["x"], cols["y"], cols["z"]], axis=1),
        np.stack([cols[f"rot_{i}"] for i in range(4)], axis=1),
        np.stack([cols[f"scale_{i}"] for i in range(3)], axis=1),
        cols["opacity"], colors)


def write_mesh_ply(mesh: TriangleMesh, path) -> None:
    vprops = [f"float {n}" for n in ("x", "y", "z")]
    fprops = ["list uchar int vertex_indices"]
    with open(path, "wb") as fh:
        _write_ply_header(fh, [("vertex", mesh.n_vertices, vprops),
                               ("face", mesh.n_faces, fprops)])
        fh.write(mesh.vertices.astype("<f4").tobytes())
        counts = np.full((mesh.n_faces, 1), 3, dtype="u1")
        faces = mesh.faces.astype("<i4")
        rows = b"".join(c.tobytes() + f.tobytes() for c, f in zip(counts, faces))
        fh.write(rows)


def read_mesh_ply(path) -> TriangleMesh:
    elems = read_ply(path)
    v = elems.get("vertex")
    if v is None:
        raise InvalidInputError(f"{path}: PLY has no vertex element")
    verts = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    faces = elems.get("face", {}).get("vertex_indices", [])
    tri = [f for f in faces if len(f) == 3]
    return TriangleMesh(verts, np.array(tri, dtype=np.int64).reshape(-1, 3))


# ---------------------------------------------------------------------------
# OBJ
# ---------------------------------------------------------------------------

def write_mesh_obj(mesh: TriangleMesh, path) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def read_mesh_obj(path) -> TriangleMesh:
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            t = line.split()
            if not t:
                continue
            if t[0] == "v":
                verts.append([float(t[1]), float(t[2]), float(t[3])])
            elif t[0] == "f":
                idx = [int(tok.split("/")[0]) - 1 for tok in t[1:]]
                for k in range(1, len(idx) - 1):  # fan-triangulate polygons
                    faces.append([idx[0], idx[k], idx[k + 1]])
    return TriangleMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                        np.array(faces, dtype=np.int64).reshape(-1, 3))


def read_mesh(path) -> TriangleMesh:
    path = str(path)
    if path.endswith(".obj"):
        return read_mesh_obj(path)
    return read_mesh_ply(path)


def write_mesh(mesh: TriangleMesh, path) -> None:
    path = str(path)
    if path.endswith(".obj"):
        write_mesh_obj(mesh, path)
    else:
        write_mesh_ply(mesh, path)


# ---------------------------------------------------------------------------
# PFM (32-bit float maps; little-endian, bottom-up scanlines)
# ---------------------------------------------------------------------------

def write_pfm(image: np.ndarray, path) -> None:
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        header = b"Pf\n"
    elif img.ndim == 3 and img.shape[2] == 3:
        header = b"PF\n"
    else:
        raise InvalidInputError("PFM supports HxW or HxWx3 images")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(f"{img.shape[1]} {img.shape[0]}\n".encode("ascii"))
        fh.write(b"-1.0\n")
        fh.write(np.flipud(img).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind not in (b"PF", b"Pf"):
            raise InvalidInputError(f"{path}: not a PFM file")
        w, h = (int(x) for x in fh.readline().split())
        scale = float(fh.readline())
        channels = 3 if kind == b"PF" else 1
        dt = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(w * h * channels * 4), dtype=dt)
        img = data.reshape(h, w, channels) if channels == 3 else data.reshape(h, w)
        return np.flipud(img).astype(np.float32).copy()


# ---------------------------------------------------------------------------
# PNG (8-bit; float arrays in [0,1] on the API side)
# ---------------------------------------------------------------------------

def write_png(image: np.ndarray, path) -> None:
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.round(img * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path)


def read_png(path) -> np.ndarray:
    img = Image.open(path)
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


# ---------------------------------------------------------------------------
# Camera list: one line per view,
# "id fx fy cx cy qw qx qy qz tx ty tz width height"
# ---------------------------------------------------------------------------

def write_cameras_txt(cameras: dict[int, CameraModel], path) -> None:
    with open(path, "w") as fh:
        for vid in sorted(cameras):
            c = cameras[vid]
            vals = [c.fx, c.fy, c.cx, c.cy, *c.rotation, *c.translation]
            txt = " ".join(repr(float(v)) for v in vals)
            fh.write(f"{vid} {txt} {c.width} {c.height}\n")


def read_cameras_txt(path) -> dict[int, CameraModel]:
    if not os.path.exists(path):
        raise InvalidInputError(f"camera file not found: {path}")
    cams = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            t = line.split()
            if not t or t[0].startswith("#"):
                continue
            if len(t) != 14:
                raise InvalidInputError(f"{path}:{lineno}: expected 14 fields, got {len(t)}")
            vid = int(t[0])
            vals = [float(x) for x in t[1:12]]
            cams[vid] = CameraModel(vals[0], vals[1], vals[2], vals[3],
                                    np.array(vals[4:8]), np.array(vals[8:11]),
                                    int(t[12]), int(t[13]))
    if not cams:
        raise InvalidInputError(f"{path}: no cameras parsed")
    return cams
