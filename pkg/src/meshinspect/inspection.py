"""Layer-wise embedding extraction, PCA projection and separability scores."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .gnn import ModelParams, forward

LAYERS = ("gcn", "fc1", "fc2")
GROUPINGS = ("label", "site")


class InspectionError(ValueError):
    pass


@dataclass(frozen=True)
class EmbeddingRecord:
    subject_id: str
    site: str
    label: int
    gcn_embedding: np.ndarray
    fc1_embedding: np.ndarray
    fc2_embedding: np.ndarray

    def layer(self, name: str) -> np.ndarray:
        if name not in LAYERS:
            raise InspectionError(f"unknown layer {name!r}; expected one of {LAYERS}")
        return getattr(self, f"{name}_embedding")


def extract_embeddings(params: ModelParams, samples: Sequence) -> list[EmbeddingRecord]:
    """One record per sample: GCN stack, FC1 activation and FC2 logits."""
    records = []
    for s in samples:
        if s.n_structures != params.config.n_structures:
            raise InspectionError(
                f"subject {s.subject_id} has {s.n_structures} structures, model expects {params.config.n_structures}"
            )
        tr = forward(s, params)
        records.append(EmbeddingRecord(s.subject_id, s.site, s.label, tr.gcn_embedding, tr.fc1, tr.logits))
    return records


# -- PCA -----------------------------------------------------------------------

@dataclass(frozen=True)
class PCAModel:
    mean: np.ndarray
    components: np.ndarray          # (k, d), orthonormal rows
    explained_variance: np.ndarray  # fractions of total variance, (k,)


def fit_pca(X, k: int) -> PCAModel:
    """Principal axes from the eigendecomposition of the sample covariance.

    Each component is sign-fixed so its largest-magnitude loading is positive.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise InspectionError("PCA input must be a 2-D matrix")
    m, d = X.shape
    if m < 2:
        raise InspectionError("PCA needs at least two samples")
    if not 1 <= k <= min(m, d):
        raise InspectionError(f"k={k} out of range [1, {min(m, d)}]")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / (m - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    comps = evecs[:, :k].T.copy()
    pivot = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(k), pivot])
    comps *= np.where(signs == 0, 1.0, signs)[:, None]
    total = evals.sum()
    frac = evals[:k] / total if total > 0 else np.zeros(k)
    return PCAModel(mean, comps, frac)


def project(model: PCAModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.mean.shape[0]:
        raise InspectionError(f"expected {model.mean.shape[0]} columns, got shape {X.shape}")
    return (X - model.mean) @ model.components.T


# -- separability ----------------------------------------------------------------

def silhouette_score(X, groups) -> float:
    """Mean Euclidean silhouette ``(b - a) / max(a, b)`` over all points.

    Points in singleton groups score 0, as is conventional.
    """
    X = np.asarray(X, dtype=np.float64)
    groups = np.asarray(groups)
    names, inverse = np.unique(groups, return_inverse=True)
    if len(names) < 2:
        raise InspectionError("silhouette needs at least two groups")
    D = cdist(X, X)
    sizes = np.bincount(inverse)
    # Sum of distances from every point to each group.
    sums = np.stack([D[:, inverse == g].sum(axis=1) for g in range(len(names))], axis=1)
    own = inverse
    a_den = sizes[own] - 1
    a = np.where(a_den > 0, sums[np.arange(len(X)), own] / np.maximum(a_den, 1), 0.0)
    means = sums / sizes[None, :]
    means[np.arange(len(X)), own] = np.inf
    b = means.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where((a_den > 0) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(s.mean())


def cap_groups(keys: Sequence, cap: int, seed: int) -> np.ndarray:
    """Sorted indices keeping at most ``cap`` members per group, chosen by seeded sampling."""
    keys = np.asarray([str(k) for k in keys])
    keep = []
    for g, name in enumerate(sorted(set(keys.tolist()))):
        members = np.flatnonzero(keys == name)
        if len(members) > cap:
            rng = np.random.default_rng([seed, g])
            members = np.sort(rng.choice(members, size=cap, replace=False))
        keep.append(members)
    return np.sort(np.concatenate(keep))


@dataclass
class SeparabilityReport:
    layer: str
    grouping: str
    silhouette_2d: float
    silhouette_full: float
    explained_variance: list[float]
    rows: list[tuple]  # (subject_id, site, label, layer, pc1, pc2)

    def to_json(self) -> dict:
        return {
            "layer": self.layer,
            "grouping": self.grouping,
            "silhouette_2d": self.silhouette_2d,
            "silhouette_full": self.silhouette_full,
            "explained_variance": self.explained_variance,
        }

    def write(self, directory, stem: str | None = None, svg: bool = False) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        stem = stem or f"{self.layer}_{self.grouping}"
        csv_path = directory / f"scatter_{stem}.csv"
        with csv_path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["subject_id", "site", "label", "layer", "pc1", "pc2"])
            for sid, site, label, layer, x, y in self.rows:
                w.writerow([sid, site, label, layer, repr(float(x)), repr(float(y))])
        json_path = directory / f"report_{stem}.json"
        json_path.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))
        out = [csv_path, json_path]
        if svg:
            out.append(render_scatter_svg(self, directory / f"scatter_{stem}.svg"))
        return out


def separability_report(
    records: Sequence[EmbeddingRecord],
    layer: str,
    grouping: str,
    sample_cap: int = 500,
    seed: int = 0,
) -> SeparabilityReport:
    """Silhouette of ``grouping`` classes in one layer's embedding space.

    Each group is capped at ``sample_cap`` members first. The 2-D score uses
    a PCA fitted on the pooled capped sample, except for ``fc2`` whose raw
    2-D logits are used directly.
    """
    if grouping not in GROUPINGS:
        raise InspectionError(f"unknown grouping {grouping!r}; expected one of {GROUPINGS}")
    keys = [r.label if grouping == "label" else r.site for r in records]
    counts: dict = {}
    for k in keys:
        counts[k] = counts.get(k, 0) + 1
    if len(counts) < 2:
        raise InspectionError(f"grouping {grouping!r} has fewer than 2 groups")
    if min(counts.values()) < 2:
        raise InspectionError(f"every {grouping} group needs at least 2 members")

    idx = cap_groups(keys, sample_cap, seed)
    chosen = [records[i] for i in idx]
    groups = [str(keys[i]) for i in idx]
    X = np.stack([r.layer(layer) for r in chosen])

    if layer == "fc2":
        coords = X[:, :2]
        total = X.var(axis=0, ddof=1).sum()
        ev = (X.var(axis=0, ddof=1) / total).tolist() if total > 0 else [0.0, 0.0]
    else:
        model = fit_pca(X, min(2, *X.shape))
        coords = project(model, X)
        if coords.shape[1] < 2:
            coords = np.pad(coords, ((0, 0), (0, 2 - coords.shape[1])))
        ev = model.explained_variance.tolist()

    rows = [(r.subject_id, r.site, r.label, layer, c[0], c[1]) for r, c in zip(chosen, coords)]
    return SeparabilityReport(
        layer,
        grouping,
        silhouette_score(coords, groups),
        silhouette_score(X, groups),
        ev,
        rows,
    )


def render_scatter_svg(report: SeparabilityReport, path) -> Path:
    """Scatter plot of the 2-D coordinates coloured by group."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    fig, ax = plt.subplots(figsize=(4, 4))
    key_index = 2 if report.grouping == "label" else 1
    groups = sorted({str(r[key_index]) for r in report.rows})
    for g in groups:
        pts = np.array([(r[4], r[5]) for r in report.rows if str(r[key_index]) == g])
        ax.scatter(pts[:, 0], pts[:, 1], s=6, alpha=0.6, label=g)
    ax.set_title(f"{report.layer} by {report.grouping}")
    ax.legend(fontsize=7)
    fig.tight_layout()
    with matplotlib.rc_context({"svg.hashsalt": "meshinspect"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path
