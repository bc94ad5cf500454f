"""Triangular surface meshes: storage, validation, file I/O and vertex normals."""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components


class MeshError(ValueError):
    """Raised for unparsable or structurally invalid meshes."""


@dataclass(frozen=True, eq=False)
class Mesh:
    """Triangle mesh with float64 vertices (mm) and int64 CCW faces.

    Arrays are copied and made read-only on construction. Index range and
    degenerate faces are checked here; connectivity is checked by
    :meth:`validate` since some callers build meshes incrementally.
    """

    vertices: np.ndarray
    faces: np.ndarray
    name: str = ""

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64, copy=True)
        f = np.array(self.faces, dtype=np.int64, copy=True)
        if f.size == 0:
            f = f.reshape(0, 3)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must be n x 3, got shape {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshError(f"faces must be m x 3, got shape {f.shape}")
        if not np.all(np.isfinite(v)):
            raise MeshError("vertices contain non-finite coordinates")
        n = v.shape[0]
        if f.size:
            bad = np.flatnonzero((f < 0).any(axis=1) | (f >= n).any(axis=1))
            if bad.size:
                raise MeshError(
                    f"face {bad[0]} has vertex index out of range [0, {n}): {f[bad[0]].tolist()}"
                )
            degenerate = np.flatnonzero(
                (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
            )
            if degenerate.size:
                raise MeshError(f"face {degenerate[0]} is degenerate: {f[degenerate[0]].tolist()}")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    @cached_property
    def edges(self) -> np.ndarray:
        """Undirected edges as a sorted (E, 2) array with ``i < j`` per row."""
        f = self.faces
        pairs = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        pairs.sort(axis=1)
        edges = np.unique(pairs, axis=0) if len(pairs) else pairs.reshape(0, 2)
        edges.setflags(write=False)
        return edges

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    def directed_edges(self) -> np.ndarray:
        """Both orientations of every undirected edge, (2E, 2)."""
        e = self.edges
        return np.concatenate([e, e[:, ::-1]])

    def mean_edge_length(self) -> float:
        e = self.edges
        return float(np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1).mean())

    def validate(self) -> "Mesh":
        """Check that the mesh forms a single connected component."""
        n = self.n_vertices
        if n == 0:
            raise MeshError("mesh has no vertices")
        used = np.zeros(n, dtype=bool)
        used[self.faces.ravel()] = True
        if n > 1 and not used.all():
            raise MeshError(f"vertex {int(np.flatnonzero(~used)[0])} belongs to no face")
        if n > 1:
            e = self.edges
            adj = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
            n_comp, _ = connected_components(adj, directed=False)
            if n_comp != 1:
                raise MeshError(f"mesh is disconnected ({n_comp} components)")
        return self

    def with_vertices(self, vertices: np.ndarray) -> "Mesh":
        """Same topology, new coordinates."""
        return Mesh(vertices, self.faces, self.name)

    def to_dict(self) -> dict:
        return {
            "vertices": self.vertices.tolist(),
            "faces": self.faces.tolist(),
            "name": self.name,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Mesh":
        try:
            return cls(data["vertices"], data["faces"], str(data.get("name", "")))
        except KeyError as exc:
            raise MeshError(f"mesh JSON missing key {exc.args[0]!r}") from None


# -- file I/O ---------------------------------------------------------------

def _infer_format(path: Path, format: str | None) -> str:
    if format is not None:
        fmt = format.lower()
    else:
        fmt = path.suffix.lower().lstrip(".")
    if fmt not in ("off", "json"):
        raise MeshError(f"unsupported mesh format {fmt!r} for {path}")
    return fmt


def _parse_off(text: str, source: str) -> Mesh:
    lines = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            lines.append(line)
    if not lines:
        raise MeshError(f"{source}: empty OFF file")
    header = lines[0]
    if not header.startswith("OFF"):
        raise MeshError(f"{source}: missing OFF header")
    rest = header[3:].split()
    body = lines[1:]
    if not rest:
        if not body:
            raise MeshError(f"{source}: missing OFF counts line")
        rest, body = body[0].split(), body[1:]
    try:
        n_v, n_f = int(rest[0]), int(rest[1])
    except (IndexError, ValueError):
        raise MeshError(f"{source}: malformed OFF counts line") from None
    if len(body) < n_v + n_f:
        raise MeshError(f"{source}: expected {n_v} vertices and {n_f} faces, file is truncated")
    try:
        vertices = [[float(x) for x in body[i].split()[:3]] for i in range(n_v)]
        faces = []
        for i in range(n_v, n_v + n_f):
            tok = [int(x) for x in body[i].split()]
            if tok[0] != 3 or len(tok) < 4:
                raise MeshError(f"{source}: face {i - n_v} is not a triangle")
            faces.append(tok[1:4])
    except ValueError:
        raise MeshError(f"{source}: non-numeric token in OFF body") from None
    if any(len(v) != 3 for v in vertices):
        raise MeshError(f"{source}: vertex line with fewer than 3 coordinates")
    return Mesh(np.array(vertices).reshape(-1, 3), np.array(faces).reshape(-1, 3), Path(source).stem)


def load_mesh(path, format: str | None = None) -> Mesh:
    """Read an OFF or JSON mesh and validate it.

    ``format`` defaults to the file suffix.
    """
    path = Path(path)
    fmt = _infer_format(path, format)
    try:
        text = path.read_text()
    except OSError as exc:
        raise MeshError(f"cannot read {path}: {exc}") from None
    if fmt == "off":
        mesh = _parse_off(text, str(path))
    else:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise MeshError(f"{path}: invalid JSON ({exc})") from None
        mesh = Mesh.from_dict(data)
    try:
        return mesh.validate()
    except MeshError as exc:
        raise MeshError(f"{path}: {exc}") from None


def save_mesh(mesh: Mesh, path, format: str | None = None) -> Path:
    path = Path(path)
    fmt = _infer_format(path, format)
    if fmt == "json":
        path.write_text(json.dumps(mesh.to_dict()))
    else:
        out = [f"OFF\n{mesh.n_vertices} {mesh.n_faces} {mesh.n_edges}\n"]
        out.extend(f"{x!r} {y!r} {z!r}\n" for x, y, z in mesh.vertices.tolist())
        out.extend(f"3 {a} {b} {c}\n" for a, b, c in mesh.faces.tolist())
        path.write_text("".join(out))
    return path


# -- normals -----------------------------------------------------------------

def face_normals(mesh: Mesh) -> np.ndarray:
    """Unnormalized face normals; their length is twice the face area."""
    v = mesh.vertices
    f = mesh.faces
    return np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])


def vertex_normals(mesh: Mesh) -> np.ndarray:
    """Area-weighted unit vertex normals, globally oriented outward.

    The orientation is flipped as a whole when the normals point, on
    average, towards the centroid. Raises ``MeshError`` when a vertex has
    no incident face or its incident face normals cancel out.
    """
    fn = face_normals(mesh)
    acc = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(acc, mesh.faces[:, k], fn)
    norms = np.linalg.norm(acc, axis=1)
    scale = max(mesh.mean_edge_length() ** 2, np.finfo(float).tiny) if mesh.n_faces else 1.0
    bad = np.flatnonzero(norms <= 1e-12 * scale)
    if bad.size:
        raise MeshError(f"zero-magnitude normal at vertex {int(bad[0])}")
    normals = acc / norms[:, None]

    radial = mesh.vertices - mesh.vertices.mean(axis=0)
    rnorm = np.linalg.norm(radial, axis=1)
    keep = rnorm > 0
    alignment = np.sum(normals[keep] * radial[keep], axis=1) / rnorm[keep]
    if keep.any() and alignment.mean() < 0:
        normals = -normals
    return normals
