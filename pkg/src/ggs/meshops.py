"""Structural mesh operations shared by extraction, denoising, and metrics."""

from __future__ import annotations

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .core import InvalidInputError, TriangleMesh


def compact_mesh(vertices: np.ndarray, faces: np.ndarray) -> TriangleMesh:
    """Drop unreferenced vertices and remap face indices."""
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(faces) == 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    used = np.unique(faces)
    remap = np.full(len(vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriangleMesh(np.asarray(vertices)[used], remap[faces])


def face_components(mesh: TriangleMesh) -> np.ndarray:
    """Connected-component label per face (faces connected via shared vertices)."""
    if mesh.n_faces == 0:
        return np.zeros(0, dtype=np.int64)
    f = mesh.faces
    rows = np.concatenate([f[:, 0], f[:, 1], f[:, 2]])
    cols = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
    adj = coo_matrix((np.ones(len(rows)), (rows, cols)),
                     shape=(mesh.n_vertices, mesh.n_vertices))
    _, vlabel = connected_components(adj, directed=False)
    return vlabel[f[:, 0]]


def remove_small_components(mesh: TriangleMesh, min_frac: float = 0.005) -> TriangleMesh:
    """Drop components with fewer faces than min_frac of the largest one."""
    if mesh.n_faces == 0:
        return mesh
    labels = face_components(mesh)
    counts = np.bincount(labels)
    keep_labels = counts >= min_frac * counts.max()
    keep = keep_labels[labels]
    return compact_mesh(mesh.vertices, mesh.faces[keep])


def _edge_keys(faces: np.ndarray) -> np.ndarray:
    """All directed edges as sorted (min,max) pairs, (3F, 2)."""
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    return np.sort(e, axis=1)


def boundary_edges(mesh: TriangleMesh) -> np.ndarray:
    """Edges incident to exactly one face, (B,2) vertex index pairs."""
    if mesh.n_faces == 0:
        return np.zeros((0, 2), dtype=np.int64)
    edges = _edge_keys(mesh.faces)
    uniq, counts = np.unique(edges, axis=0, return_counts=True)
    return uniq[counts == 1]


def boundary_loop_count(mesh: TriangleMesh) -> int:
    """Number of boundary loops (connected components of boundary edges)."""
    be = boundary_edges(mesh)
    if len(be) == 0:
        return 0
    verts = np.unique(be)
    remap = {v: i for i, v in enumerate(verts)}
    rows = np.array([remap[v] for v in be[:, 0]])
    cols = np.array([remap[v] for v in be[:, 1]])
    adj = coo_matrix((np.ones(len(rows)), (rows, cols)),
                     shape=(len(verts), len(verts)))
    n, _ = connected_components(adj, directed=False)
    return int(n)


def edge_count(mesh: TriangleMesh) -> int:
    """Unique undirected edges (for Euler characteristic checks)."""
    if mesh.n_faces == 0:
        return 0
    return len(np.unique(_edge_keys(mesh.faces), axis=0))


def face_areas(mesh: TriangleMesh) -> np.ndarray:
    v = mesh.vertices
    f = mesh.faces
    cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    return 0.5 * np.linalg.norm(cross, axis=1)


def sample_surface(mesh: TriangleMesh, n: int, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform surface samples, (n,3)."""
    if mesh.n_faces == 0:
        raise InvalidInputError("cannot sample an empty mesh")
    areas = face_areas(mesh)
    total = areas.sum()
    if total <= 0:
        raise InvalidInputError("mesh has zero total area")
    rng = np.random.default_rng(seed)
    fi = rng.choice(mesh.n_faces, size=n, p=areas / total)
    r1 = np.sqrt(rng.uniform(size=n))
    r2 = rng.uniform(size=n)
    a = mesh.vertices[mesh.faces[fi, 0]]
    b = mesh.vertices[mesh.faces[fi, 1]]
    c = mesh.vertices[mesh.faces[fi, 2]]
    return (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c
