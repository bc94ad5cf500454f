"""Subject containers, on-disk archives, and the register + FPFH preprocessing stage."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .features import compute_fpfh, default_radius
from .gnn import normalized_adjacency
from .mesh import Mesh, MeshError, load_mesh, save_mesh, vertex_normals
from .registration import RigidTransform, register_dataset, save_transforms

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


class ArchiveError(RuntimeError):
    """Missing or inconsistent on-disk artifact."""


@dataclass
class SubjectSample:
    subject_id: str
    site: str
    label: int
    split: str
    meshes: list[Mesh]
    features: list[np.ndarray] | None = None
    radii: list[float] | None = None
    adjacency: list | None = field(default=None, repr=False)

    @property
    def n_structures(self) -> int:
        return len(self.meshes)

    @property
    def graphs(self) -> list[tuple]:
        if self.features is None or self.adjacency is None:
            raise ArchiveError(f"subject {self.subject_id} has no node features; run preprocessing first")
        return list(zip(self.adjacency, self.features))


def attach_adjacency(samples: Sequence[SubjectSample]) -> None:
    """Share one normalized adjacency per distinct structure topology."""
    cache: dict[tuple[int, bytes], object] = {}
    for s in samples:
        adj = []
        for m in s.meshes:
            key = (m.n_vertices, m.faces.tobytes())
            if key not in cache:
                cache[key] = normalized_adjacency(m)
            adj.append(cache[key])
        s.adjacency = adj


def split_samples(samples: Iterable[SubjectSample]) -> dict[str, list[SubjectSample]]:
    out: dict[str, list[SubjectSample]] = {k: [] for k in SPLITS}
    for s in samples:
        out.setdefault(s.split, []).append(s)
    return out


# -- preprocessing -----------------------------------------------------------

def resolve_radius(mesh: Mesh, radius: float | str | None) -> float:
    if radius is None or radius == "auto":
        return default_radius(mesh)
    return float(radius)


def compute_subject_features(sample: SubjectSample, radius: float | str | None = "auto") -> SubjectSample:
    """Fill ``features`` and ``radii`` for every structure of one subject.

    ``radius=None`` reuses the subject's stored radii when it has them.
    """
    if radius is None and sample.radii is not None:
        radii = sample.radii
    else:
        radii = [resolve_radius(m, radius) for m in sample.meshes]
    feats = [compute_fpfh(m, vertex_normals(m), r) for m, r in zip(sample.meshes, radii)]
    return replace(sample, features=feats, radii=list(radii))


def register_samples(
    samples: Sequence[SubjectSample], reference: int = 0
) -> tuple[list[SubjectSample], dict[str, list[RigidTransform]]]:
    """Rigidly align each structure across subjects to the reference subject."""
    if not samples:
        return [], {}
    n_struct = samples[0].n_structures
    aligned_meshes: list[list[Mesh]] = [[] for _ in samples]
    transforms: dict[str, list[RigidTransform]] = {s.subject_id: [] for s in samples}
    for k in range(n_struct):
        meshes = [s.meshes[k] for s in samples]
        aligned, xfs = register_dataset(meshes, reference)
        for i, (m, xf) in enumerate(zip(aligned, xfs)):
            aligned_meshes[i].append(m)
            transforms[samples[i].subject_id].append(xf)
    out = [replace(s, meshes=aligned_meshes[i], features=None) for i, s in enumerate(samples)]
    return out, transforms


def preprocess(
    samples: Sequence[SubjectSample],
    register: bool,
    radius: float | str | None = "auto",
    reference: int = 0,
) -> tuple[list[SubjectSample], dict | None]:
    transforms = None
    if register:
        samples, transforms = register_samples(samples, reference)
    out = [compute_subject_features(s, radius) for s in samples]
    attach_adjacency(out)
    return out, transforms


# -- dataset archive ---------------------------------------------------------

def _struct_name(k: int) -> str:
    return f"s{k:02d}"


def save_dataset_archive(samples: Sequence[SubjectSample], directory, metadata: dict | None = None) -> Path:
    """Write JSON meshes plus ``manifest.csv`` (and ``dataset.json`` metadata)."""
    directory = Path(directory)
    (directory / "meshes").mkdir(parents=True, exist_ok=True)
    n_struct = samples[0].n_structures if samples else 0
    rows = []
    for s in samples:
        sub = directory / "meshes" / s.subject_id
        sub.mkdir(exist_ok=True)
        paths = []
        for k, m in enumerate(s.meshes):
            rel = Path("meshes") / s.subject_id / f"{_struct_name(k)}.json"
            save_mesh(m, directory / rel)
            paths.append(rel.as_posix())
        rows.append([s.subject_id, s.site, s.label, s.split, *paths])
    with (directory / "manifest.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "site", "label", "split", *[_struct_name(k) for k in range(n_struct)]])
        w.writerows(rows)
    meta = dict(metadata or {})
    meta["n_structures"] = n_struct
    meta["n_subjects"] = len(samples)
    (directory / "dataset.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return directory


def _read_manifest(path: Path) -> tuple[list[str], list[list[str]]]:
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ArchiveError(f"{path} is empty")
    return rows[0], rows[1:]


def load_dataset_archive(directory) -> list[SubjectSample]:
    directory = Path(directory)
    manifest = directory / "manifest.csv"
    if not manifest.exists():
        raise ArchiveError(f"no dataset manifest at {manifest}; run `generate` first")
    header, rows = _read_manifest(manifest)
    samples = []
    for row in rows:
        sid, site, label, split, *paths = row
        try:
            meshes = [load_mesh(directory / p) for p in paths]
        except MeshError as exc:
            raise ArchiveError(f"subject {sid}: {exc}") from None
        samples.append(SubjectSample(sid, site, int(label), split, meshes))
    return samples


def load_dataset_metadata(directory) -> dict:
    path = Path(directory) / "dataset.json"
    return json.loads(path.read_text()) if path.exists() else {}


# -- features archive --------------------------------------------------------

def save_features_archive(
    samples: Sequence[SubjectSample],
    directory,
    metadata: dict,
    transforms: dict | None = None,
) -> Path:
    """Persist preprocessed meshes and FPFH matrices as ``.npy`` per subject-structure."""
    directory = Path(directory)
    (directory / "subjects").mkdir(parents=True, exist_ok=True)
    rows = []
    for s in samples:
        sub = directory / "subjects" / s.subject_id
        sub.mkdir(exist_ok=True)
        for k, (m, f) in enumerate(zip(s.meshes, s.features)):
            np.save(sub / f"{_struct_name(k)}_vertices.npy", m.vertices)
            np.save(sub / f"{_struct_name(k)}_faces.npy", m.faces)
            np.save(sub / f"{_struct_name(k)}_features.npy", f)
        rows.append([s.subject_id, s.site, s.label, s.split, *[repr(float(r)) for r in s.radii]])
    n_struct = samples[0].n_structures if samples else 0
    with (directory / "manifest.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "site", "label", "split", *[f"radius_{_struct_name(k)}" for k in range(n_struct)]])
        w.writerows(rows)
    meta = dict(metadata)
    meta["n_structures"] = n_struct
    (directory / "features.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    tpath = directory / "transforms.json"
    if transforms is not None:
        save_transforms(transforms, tpath)
    elif tpath.exists():
        tpath.unlink()
    return directory


def load_features_archive(directory) -> tuple[list[SubjectSample], dict]:
    directory = Path(directory)
    meta_path = directory / "features.json"
    if not meta_path.exists():
        raise ArchiveError(f"no features archive at {directory}; run `preprocess` first")
    meta = json.loads(meta_path.read_text())
    _, rows = _read_manifest(directory / "manifest.csv")
    samples = []
    for row in rows:
        sid, site, label, split, *radii = row
        sub = directory / "subjects" / sid
        meshes, feats = [], []
        for k in range(len(radii)):
            v = np.load(sub / f"{_struct_name(k)}_vertices.npy")
            f = np.load(sub / f"{_struct_name(k)}_faces.npy")
            meshes.append(Mesh(v, f))
            feats.append(np.load(sub / f"{_struct_name(k)}_features.npy"))
        samples.append(SubjectSample(sid, site, int(label), split, meshes, feats, [float(r) for r in radii]))
    attach_adjacency(samples)
    return samples, meta
