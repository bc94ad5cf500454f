"""Fast Point Feature Histograms (FPFH) as 33-wide per-vertex node features.

Each vertex gets three 11-bin histograms of the Darboux-frame angles
(alpha, phi, theta) to its radius neighbours. The simplified histograms
(SPFH) are percentage-normalized per angle; the final FPFH row adds the
inverse-distance weighted mean of the neighbours' SPFH rows.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .mesh import Mesh, vertex_normals

N_BINS = 11
N_FEATURES = 3 * N_BINS
DEFAULT_RADIUS_FACTOR = 2.5

# Below this |u x d| the frame is undefined (normal parallel to the pair line).
_FRAME_EPS = 1e-12


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class DarbouxAngles:
    alpha: float
    phi: float
    theta: float
    d: float


def _pair_features(ps, ns, pt, nt):
    """Vectorized Darboux angles for arrays of point pairs, each (k, 3).

    Applies the source/target ordering rule per pair and returns
    ``(alpha, phi, theta, d)`` as 1-D arrays.
    """
    dp = pt - ps
    d = np.linalg.norm(dp, axis=1)
    if np.any(d == 0):
        raise FeatureError("coincident points in pair features")
    dhat = dp / d[:, None]

    cos_s = np.abs(np.einsum("ij,ij->i", ns, dhat))
    cos_t = np.abs(np.einsum("ij,ij->i", nt, dhat))
    # The source is the end whose normal makes the smaller angle with the line.
    swap = cos_t > cos_s
    u = np.where(swap[:, None], nt, ns)
    n_other = np.where(swap[:, None], ns, nt)
    dhat = np.where(swap[:, None], -dhat, dhat)

    v = np.cross(u, dhat)
    vnorm = np.linalg.norm(v, axis=1)
    ok = vnorm > _FRAME_EPS
    v = np.where(ok[:, None], v / np.where(ok, vnorm, 1.0)[:, None], 0.0)
    w = np.cross(u, v)

    alpha = np.einsum("ij,ij->i", v, n_other)
    phi = np.einsum("ij,ij->i", u, dhat)
    theta = np.arctan2(np.einsum("ij,ij->i", w, n_other), np.einsum("ij,ij->i", u, n_other))
    return np.clip(alpha, -1.0, 1.0), np.clip(phi, -1.0, 1.0), theta, d


def darboux_angles(p_s, n_s, p_t, n_t) -> DarbouxAngles:
    """Darboux-frame angles between two oriented points.

    ``u = n_s``, ``v = u x (p_t - p_s)/d`` (normalized), ``w = u x v``;
    ``alpha = v.n_t``, ``phi = u.(p_t - p_s)/d``, ``theta = atan2(w.n_t, u.n_t)``.
    The pair is reordered first so the source normal makes the smaller
    angle with the connecting line, which makes the result symmetric in
    the two points.
    """
    args = [np.asarray(a, dtype=np.float64).reshape(1, 3) for a in (p_s, n_s, p_t, n_t)]
    alpha, phi, theta, d = _pair_features(*args)
    return DarbouxAngles(float(alpha[0]), float(phi[0]), float(theta[0]), float(d[0]))


def bin_index(values: np.ndarray, lo: float, hi: float, n_bins: int = N_BINS) -> np.ndarray:
    """Equal-width bins over [lo, hi]; values at ``hi`` go in the last bin."""
    idx = np.floor((np.asarray(values) - lo) * (n_bins / (hi - lo))).astype(np.int64)
    return np.clip(idx, 0, n_bins - 1)


def default_radius(mesh: Mesh, factor: float = DEFAULT_RADIUS_FACTOR) -> float:
    return factor * mesh.mean_edge_length()


def radius_pairs(points: np.ndarray, radius: float) -> np.ndarray:
    """Sorted (P, 2) array of undirected pairs ``i < j`` within ``radius``."""
    tree = cKDTree(points)
    pairs = tree.query_pairs(radius, output_type="ndarray")
    if len(pairs) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    pairs = np.sort(pairs.astype(np.int64), axis=1)
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    return pairs[order]


def compute_spfh(points: np.ndarray, normals: np.ndarray, pairs: np.ndarray) -> np.ndarray:
    """Per-point SPFH, (n, 33), each 11-bin block summing to 100."""
    n = points.shape[0]
    i, j = pairs[:, 0], pairs[:, 1]
    alpha, phi, theta, _ = _pair_features(points[i], normals[i], points[j], normals[j])
    bins = (
        bin_index(alpha, -1.0, 1.0),
        bin_index(phi, -1.0, 1.0) + N_BINS,
        bin_index(theta, -np.pi, np.pi) + 2 * N_BINS,
    )
    hist = np.zeros(n * N_FEATURES)
    # Pair features are symmetric under the ordering rule: credit both ends.
    for b in bins:
        hist += np.bincount(i * N_FEATURES + b, minlength=n * N_FEATURES)
        hist += np.bincount(j * N_FEATURES + b, minlength=n * N_FEATURES)
    hist = hist.reshape(n, N_FEATURES)
    counts = np.bincount(np.concatenate([i, j]), minlength=n).astype(np.float64)
    return hist * (100.0 / counts)[:, None]


def compute_fpfh(mesh: Mesh, normals: np.ndarray, radius: float | None = None) -> np.ndarray:
    """FPFH node features for every vertex of ``mesh``, shape (n, 33).

    ``radius`` is the Euclidean neighbourhood radius in mm; when omitted it
    defaults to 2.5x the mean edge length. Every vertex needs at least one
    neighbour inside the radius.
    """
    points = mesh.vertices
    normals = np.asarray(normals, dtype=np.float64)
    if normals.shape != points.shape:
        raise FeatureError(f"normals shape {normals.shape} does not match vertices {points.shape}")
    if radius is None:
        radius = default_radius(mesh)
    if not radius > 0:
        raise FeatureError(f"radius must be positive, got {radius}")
    n = points.shape[0]

    pairs = radius_pairs(points, radius)
    if len(pairs):
        d = np.linalg.norm(points[pairs[:, 0]] - points[pairs[:, 1]], axis=1)
        dup = np.flatnonzero(d == 0)
        if dup.size:
            a, b = pairs[dup[0]]
            raise FeatureError(f"vertices {a} and {b} share the same position")
    else:
        d = np.zeros(0)
    counts = np.bincount(pairs.ravel(), minlength=n)
    isolated = np.flatnonzero(counts == 0)
    if isolated.size:
        shown = ", ".join(map(str, isolated[:10].tolist()))
        raise FeatureError(
            f"{isolated.size} vertices have no neighbour within radius {radius:g}: {shown}"
        )

    spfh = compute_spfh(points, normals, pairs)

    i, j = pairs[:, 0], pairs[:, 1]
    inv_d = 1.0 / d
    weighted = np.zeros_like(spfh)
    # Fixed-order scatter keeps the reduction deterministic.
    np.add.at(weighted, i, spfh[j] * inv_d[:, None])
    np.add.at(weighted, j, spfh[i] * inv_d[:, None])
    return spfh + weighted / counts[:, None]


def mesh_fpfh(mesh: Mesh, radius: float | None = None) -> np.ndarray:
    """Normals followed by FPFH, the usual entry point for a single mesh."""
    return compute_fpfh(mesh, vertex_normals(mesh), radius)


def save_features_csv(features: np.ndarray, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"{name}{k}" for name in ("alpha", "phi", "theta") for k in range(N_BINS)])
        for row in np.asarray(features).tolist():
            writer.writerow([repr(x) for x in row])
    return path


def load_features_csv(path) -> np.ndarray:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    data = np.array([[float(x) for x in r] for r in rows[1:]], dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != N_FEATURES:
        raise FeatureError(f"{path}: expected {N_FEATURES} columns, got shape {data.shape}")
    return data
