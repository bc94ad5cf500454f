"""Synthetic multi-structure, multi-site mesh cohorts.

Every structure starts from a subdivided icosahedron deformed into a fixed
structure-specific shape. Class-1 subjects get an anisotropic stretch along
a structure-specific axis, every subject gets i.i.d. vertex noise, and each
site applies one rigid transform to all of its subjects.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import SPLITS, SubjectSample
from .mesh import Mesh
from .registration import RigidTransform, axis_angle_rotation, random_rotation

MAX_LEVEL = 5


class SpecError(ValueError):
    pass


_PHI = (1.0 + np.sqrt(5.0)) / 2.0
_ICO_VERTICES = np.array(
    [
        [-1, _PHI, 0], [1, _PHI, 0], [-1, -_PHI, 0], [1, -_PHI, 0],
        [0, -1, _PHI], [0, 1, _PHI], [0, -1, -_PHI], [0, 1, -_PHI],
        [_PHI, 0, -1], [_PHI, 0, 1], [-_PHI, 0, -1], [-_PHI, 0, 1],
    ]
)
_ICO_FACES = np.array(
    [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ]
)


def icosphere(level: int) -> Mesh:
    """Unit icosphere with ``10 * 4**level + 2`` vertices and outward CCW faces."""
    if not 0 <= level <= MAX_LEVEL:
        raise SpecError(f"icosphere level must be in [0, {MAX_LEVEL}], got {level}")
    verts = [tuple(v) for v in _ICO_VERTICES / np.linalg.norm(_ICO_VERTICES, axis=1, keepdims=True)]
    faces = _ICO_FACES.tolist()
    for _ in range(level):
        midpoint: dict[tuple[int, int], int] = {}

        def mid(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key not in midpoint:
                p = (np.asarray(verts[a]) + np.asarray(verts[b])) / 2.0
                verts.append(tuple(p / np.linalg.norm(p)))
                midpoint[key] = len(verts) - 1
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new_faces
    return Mesh(np.array(verts), np.array(faces), f"icosphere{level}")


@dataclass
class SiteSpec:
    """Rigid pose of one acquisition site.

    ``offset_mm`` is the translation magnitude (random direction);
    rotation angle is drawn uniformly from ``[-rotation_range, rotation_range]``
    about a random axis. ``subjects`` overrides the per-split counts, e.g.
    ``{"test": 40}`` for a held-out site.
    """

    name: str = ""
    offset_mm: float = 0.0
    rotation_range: float = 0.0
    scale: float = 1.0
    subjects: dict[str, int] | None = None


@dataclass
class SynthSpec:
    n_structures: int = 15
    subjects_per_site: dict[str, int] = field(default_factory=lambda: {"train": 60, "val": 20, "test": 20})
    sites: list[SiteSpec] = field(default_factory=lambda: [SiteSpec("siteA"), SiteSpec("siteB", offset_mm=30.0, rotation_range=0.5)])
    class_effect: float = 1.05
    vertex_noise_sd: float = 0.05
    subject_shape_sd: float = 0.0
    icosphere_level: int = 3
    structure_size_mm: tuple[float, float] = (4.0, 9.0)
    seed: int = 0

    def __post_init__(self):
        self.sites = [s if isinstance(s, SiteSpec) else SiteSpec(**s) for s in self.sites]
        for i, s in enumerate(self.sites):
            if not s.name:
                s.name = f"site{i}"
        self.structure_size_mm = tuple(self.structure_size_mm)
        self.validate()

    def validate(self) -> None:
        if self.n_structures < 1:
            raise SpecError("n_structures must be >= 1")
        if self.class_effect <= 0:
            raise SpecError("class_effect must be positive")
        if self.vertex_noise_sd < 0 or self.subject_shape_sd < 0:
            raise SpecError("vertex_noise_sd and subject_shape_sd must be non-negative")
        if not 0 <= self.icosphere_level <= MAX_LEVEL:
            raise SpecError(f"icosphere_level must be in [0, {MAX_LEVEL}]")
        if not self.sites:
            raise SpecError("at least one site is required")
        names = [s.name for s in self.sites]
        if len(set(names)) != len(names):
            raise SpecError(f"duplicate site names: {names}")
        for split in self.subjects_per_site:
            if split not in SPLITS:
                raise SpecError(f"unknown split {split!r} in subjects_per_site")
        for s in self.sites:
            if s.offset_mm < 0 or s.rotation_range < 0 or s.scale <= 0:
                raise SpecError(f"site {s.name}: offset/rotation must be >= 0 and scale > 0")

    def counts(self, site: SiteSpec) -> dict[str, int]:
        counts = site.subjects if site.subjects is not None else self.subjects_per_site
        return {k: int(counts.get(k, 0)) for k in SPLITS}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        allowed = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - allowed)
        if unknown:
            raise SpecError(f"unknown spec key {unknown[0]!r}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise SpecError(str(exc)) from None

    @classmethod
    def from_file(cls, path) -> "SynthSpec":
        path = Path(path)
        text = path.read_text()
        try:
            if path.suffix.lower() == ".toml":
                import tomli

                data = tomli.loads(text)
            else:
                data = json.loads(text)
        except Exception as exc:
            raise SpecError(f"{path}: cannot parse ({exc})") from None
        try:
            return cls.from_dict(data)
        except SpecError as exc:
            raise SpecError(f"{path}: {exc}") from None


# -- geometry ------------------------------------------------------------------

@dataclass(frozen=True)
class StructureTemplate:
    vertices: np.ndarray
    faces: np.ndarray
    centre: np.ndarray
    class_axis: np.ndarray


def _structure_templates(spec: SynthSpec) -> list[StructureTemplate]:
    base = icosphere(spec.icosphere_level)
    lo, hi = spec.structure_size_mm
    templates = []
    for k in range(spec.n_structures):
        rng = np.random.default_rng([spec.seed, 0, k])
        dirs = base.vertices
        radius = np.ones(len(dirs))
        for _ in range(3):
            c = rng.standard_normal(3)
            c /= np.linalg.norm(c)
            amp = rng.uniform(-0.15, 0.25)
            radius += amp * np.exp(-np.sum((dirs - c) ** 2, axis=1) / 0.5)
        semi_axes = rng.uniform(lo, hi, size=3)
        shape = dirs * radius[:, None] * semi_axes
        rot = random_rotation(rng)
        centre = rng.uniform(-30.0, 30.0, size=3)
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        templates.append(StructureTemplate(shape @ rot.T + centre, base.faces, centre, axis))
    return templates


def site_transform(spec: SynthSpec, site_index: int) -> RigidTransform:
    site = spec.sites[site_index]
    rng = np.random.default_rng([spec.seed, 2, site_index])
    axis = rng.standard_normal(3)
    angle = rng.uniform(-site.rotation_range, site.rotation_range)
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    return RigidTransform(axis_angle_rotation(axis, angle), site.offset_mm * direction)


def _subject_meshes(
    spec: SynthSpec, templates: list[StructureTemplate], label: int, site_index: int, rng: np.random.Generator
) -> list[Mesh]:
    xf = site_transform(spec, site_index)
    scale = spec.sites[site_index].scale
    meshes = []
    for k, t in enumerate(templates):
        v = t.vertices
        if spec.subject_shape_sd > 0:
            # Class-independent anatomical variation: random stretch about the centre.
            axis = rng.standard_normal(3)
            axis /= np.linalg.norm(axis)
            factor = 1.0 + spec.subject_shape_sd * rng.standard_normal()
            stretch = np.eye(3) + (factor - 1.0) * np.outer(axis, axis)
            v = t.centre + (v - t.centre) @ stretch.T
        if label == 1 and spec.class_effect != 1.0:
            rel = v - t.centre
            stretch = np.eye(3) + (spec.class_effect - 1.0) * np.outer(t.class_axis, t.class_axis)
            v = t.centre + rel @ stretch.T
        if spec.vertex_noise_sd > 0:
            v = v + rng.normal(0.0, spec.vertex_noise_sd, size=v.shape)
        if scale != 1.0:
            v = v * scale
        meshes.append(Mesh(xf.apply(v), t.faces, f"structure{k}"))
    return meshes


def generate_dataset(spec: SynthSpec) -> list[SubjectSample]:
    """All subjects of all sites and splits, ordered by split, site, index.

    Each subject draws from its own counter-based RNG stream, so the output
    does not depend on generation order.
    """
    templates = _structure_templates(spec)
    samples = []
    for split_index, split in enumerate(SPLITS):
        for site_index, site in enumerate(spec.sites):
            n = spec.counts(site)[split]
            for i in range(n):
                rng = np.random.default_rng([spec.seed, 1, site_index, split_index, i])
                label = i % 2
                meshes = _subject_meshes(spec, templates, label, site_index, rng)
                sid = f"{site.name}-{split}-{i:04d}"
                samples.append(SubjectSample(sid, site.name, label, split, meshes))
    return samples


def generation_metadata(spec: SynthSpec) -> dict:
    return {
        "spec": spec.to_dict(),
        "site_transforms": {s.name: site_transform(spec, i).to_dict() for i, s in enumerate(spec.sites)},
    }
