"""Closed-form rigid alignment (Umeyama, scale fixed to 1) of index-corresponded meshes."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .mesh import Mesh


class RegistrationError(ValueError):
    pass


@dataclass(frozen=True)
class RigidTransform:
    """``x -> rotation @ x + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        r_inv = self.rotation.T
        return RigidTransform(r_inv, -r_inv @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "RigidTransform":
        return cls(data["rotation"], data["translation"])


def umeyama_rigid(source: np.ndarray, target: np.ndarray) -> RigidTransform:
    """Least-squares proper rigid transform mapping ``source`` onto ``target``.

    Both inputs are (n, 3) and row-corresponded. The sign-correction matrix
    keeps ``det(R) = +1``, so reflections are never returned.
    """
    src = np.asarray(source, dtype=np.float64)
    dst = np.asarray(target, dtype=np.float64)
    if src.ndim != 2 or src.shape[1] != 3 or src.shape != dst.shape:
        raise RegistrationError(
            f"source and target must be matching n x 3 arrays, got {src.shape} and {dst.shape}"
        )
    n = src.shape[0]
    if n < 3:
        raise RegistrationError(f"need at least 3 corresponded points, got {n}")

    mu_s = src.mean(axis=0)
    mu_t = dst.mean(axis=0)
    cov = (dst - mu_t).T @ (src - mu_s) / n
    u, d, vt = np.linalg.svd(cov)
    if d[0] == 0 or d[1] <= 1e-12 * d[0]:
        raise RegistrationError("degenerate configuration: cross-covariance rank < 2")

    s = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2] = -1.0
    rotation = (u * s) @ vt
    return RigidTransform(rotation, mu_t - rotation @ mu_s)


def apply_transform(mesh: Mesh, xf: RigidTransform) -> Mesh:
    return mesh.with_vertices(xf.apply(mesh.vertices))


def register_dataset(
    meshes: Sequence[Mesh], reference: int | Mesh = 0
) -> tuple[list[Mesh], list[RigidTransform]]:
    """Align every mesh of one structure to a reference mesh.

    ``reference`` is either an index into ``meshes`` or an explicit mesh.
    The reference subject gets the exact identity transform.
    """
    if isinstance(reference, Mesh):
        ref_mesh, ref_index = reference, None
    else:
        if not 0 <= reference < len(meshes):
            raise RegistrationError(f"reference index {reference} out of range for {len(meshes)} meshes")
        ref_mesh, ref_index = meshes[reference], reference
    n = ref_mesh.n_vertices
    for i, m in enumerate(meshes):
        if m.n_vertices != n:
            raise RegistrationError(
                f"mesh {i} has {m.n_vertices} vertices, reference has {n}; meshes must be index-corresponded"
            )

    aligned, transforms = [], []
    for i, m in enumerate(meshes):
        if i == ref_index:
            xf = RigidTransform.identity()
            aligned.append(m)
        else:
            xf = umeyama_rigid(m.vertices, ref_mesh.vertices)
            aligned.append(apply_transform(m, xf))
        transforms.append(xf)
    return aligned, transforms


def save_transforms(transforms: dict, path) -> Path:
    """Write ``{key: RigidTransform}`` (nested dicts allowed) as JSON."""

    def encode(obj):
        if isinstance(obj, RigidTransform):
            return obj.to_dict()
        if isinstance(obj, dict):
            return {str(k): encode(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [encode(v) for v in obj]
        return obj

    path = Path(path)
    path.write_text(json.dumps(encode(transforms), indent=1, sort_keys=True))
    return path


def load_transforms(path) -> dict:
    def decode(obj):
        if isinstance(obj, dict) and set(obj) == {"rotation", "translation"}:
            return RigidTransform.from_dict(obj)
        if isinstance(obj, dict):
            return {k: decode(v) for k, v in obj.items()}
        if isinstance(obj, list):
            return [decode(v) for v in obj]
        return obj

    return decode(json.loads(Path(path).read_text()))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform proper rotation from a normalized Gaussian quaternion."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def axis_angle_rotation(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation about ``axis`` (normalized internally)."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    k = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)
