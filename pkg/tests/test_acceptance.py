"""Acceptance criteria, one test each.

Every test prints a single ``ACCEPTANCE <n> PASS|FAIL`` line with the
measured numbers, so the verdicts are visible in ``pytest -v`` output even
when capture is on. Criteria 6-8 share one run of the full four-variant
grid on a 200-subject, 2-site, 5-structure synthetic cohort plus a
40-subject held-out test site.
"""

from __future__ import annotations

import time
from pathlib import Path

import numpy as np
import pytest

from meshinspect.cli import MANIFEST_NAME, main
from meshinspect.dataset import load_features_archive
from meshinspect.evaluation import positive_scores, roc_auc
from meshinspect.features import compute_fpfh
from meshinspect.gnn import (
    NON_SHARED,
    SHARED,
    ModelConfig,
    cross_entropy,
    forward,
    init_params,
    load_checkpoint,
    loss_and_gradients,
    normalized_adjacency,
    parameter_count,
)
from meshinspect.inspection import extract_embeddings, separability_report
from meshinspect.mesh import vertex_normals
from meshinspect.registration import random_rotation, umeyama_rigid
from meshinspect.synthgen import icosphere


@pytest.fixture
def report(capsys):
    def emit(number, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\nACCEPTANCE {number} {'PASS' if ok else 'FAIL'}: {detail}")

    return emit


# -- 1. registration recovery --------------------------------------------------

def test_criterion_1_registration_recovery(report):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    source = icosphere(2).vertices * [9.0, 6.0, 4.0]
    worst_rot = worst_rms = 0.0
    for _ in range(100):
        R = random_rotation(rng)
        t = rng.uniform(-100, 100, size=3)
        target = source @ R.T + t
        xf = umeyama_rigid(source, target)
        worst_rot = max(worst_rot, float(np.linalg.norm(xf.rotation - R)))
        resid = xf.apply(source) - target
        worst_rms = max(worst_rms, float(np.sqrt(np.mean(np.sum(resid**2, axis=1)))))
    elapsed = time.perf_counter() - start
    ok = worst_rot < 1e-6 and worst_rms < 1e-9 and elapsed < 5
    report(1, ok, f"max rotation Frobenius err {worst_rot:.2e}, max residual RMS {worst_rms:.2e}, {elapsed:.2f}s")
    assert ok


# -- 2. FPFH pose invariance ---------------------------------------------------

def test_criterion_2_fpfh_pose_invariance(report):
    start = time.perf_counter()
    mesh = icosphere(3)
    radius = 2.5 * mesh.mean_edge_length()
    base = compute_fpfh(mesh, vertex_normals(mesh), radius)
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(20):
        moved = mesh.with_vertices(mesh.vertices @ random_rotation(rng).T + rng.uniform(-50, 50, size=3))
        feats = compute_fpfh(moved, vertex_normals(moved), radius)
        worst = max(worst, float(np.abs(feats - base).max()))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-6 and elapsed < 30
    report(2, ok, f"max feature deviation {worst:.2e} over 20 poses, {elapsed:.2f}s")
    assert ok


# -- 3. gradient correctness ---------------------------------------------------

def _fd_worst_rel_error(mode: str, seed: int, step: float = 1e-5) -> float:
    """Worst per-array ||analytic - central FD|| / max(||analytic||, ||FD||)."""
    rng = np.random.default_rng([seed, 3])
    mesh = icosphere(0)  # 12 vertices
    graphs = []
    for _ in range(2):
        m = mesh.with_vertices(mesh.vertices * rng.uniform(0.5, 2.0, size=3))
        graphs.append((normalized_adjacency(m), np.abs(rng.normal(size=(12, 33)))))
    params = init_params(ModelConfig(n_structures=2, mode=mode), seed)
    params.arrays["fc1.b"] = rng.normal(scale=0.1, size=params.arrays["fc1.b"].shape)
    params.arrays["fc2.b"] = rng.normal(scale=0.1, size=params.arrays["fc2.b"].shape)
    label = seed % 2
    _, grads = loss_and_gradients(forward(graphs, params), label, params)
    worst = 0.0
    for name, arr in params.arrays.items():
        flat, g = arr.reshape(-1), grads.arrays[name].reshape(-1)
        fd = np.empty_like(g)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = cross_entropy(forward(graphs, params).logits, label)
            flat[i] = orig - step
            down = cross_entropy(forward(graphs, params).logits, label)
            flat[i] = orig
            fd[i] = (up - down) / (2 * step)
        scale = max(np.linalg.norm(g), np.linalg.norm(fd))
        if scale > 0:
            worst = max(worst, float(np.linalg.norm(g - fd) / scale))
    return worst


def test_criterion_3_gradient_correctness(report):
    start = time.perf_counter()
    worst = {mode: max(_fd_worst_rel_error(mode, seed) for seed in range(10)) for mode in (SHARED, NON_SHARED)}
    elapsed = time.perf_counter() - start
    ok = all(v < 1e-4 for v in worst.values()) and elapsed < 60
    report(3, ok, f"worst rel err shared {worst[SHARED]:.2e}, non-shared {worst[NON_SHARED]:.2e}, {elapsed:.1f}s")
    assert ok


# -- 4. AUC oracle -------------------------------------------------------------

def _pairwise_auc(scores, labels) -> float:
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return float(wins / (pos.size * neg.size))


def test_criterion_4_auc_oracle(report):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 301))
        labels = rng.integers(0, 2, size=n)
        labels[:2] = [0, 1]
        scores = rng.normal(size=n).round(int(rng.integers(0, 3)))  # coarse rounding forces ties
        worst = max(worst, abs(roc_auc(scores, labels).auc - _pairwise_auc(scores, labels)))
    ok = worst <= 1e-12
    report(4, ok, f"max |roc_auc - pairwise| {worst:.1e} over 50 instances")
    assert ok


# -- 5. parameter efficiency ---------------------------------------------------

def test_criterion_5_parameter_efficiency(report):
    shared = ModelConfig(n_structures=15, mode=SHARED)
    non_shared = ModelConfig(n_structures=15, mode=NON_SHARED)
    g_s, g_n = parameter_count(shared, "gcn"), parameter_count(non_shared, "gcn")
    h_s, h_n = parameter_count(shared, "head"), parameter_count(non_shared, "head")
    ok = g_n == 15 * g_s and h_s == h_n
    report(5, ok, f"GCN params shared {g_s}, non-shared {g_n} (ratio {g_n / g_s:g}); head {h_s} vs {h_n}")
    assert ok


# -- 6-8. synthetic reproduction -----------------------------------------------

GRID_CONFIG = """
[synth]
n_structures = 5
icosphere_level = 2
subjects_per_site = {train = 60, val = 20, test = 20}
class_effect = 1.05
vertex_noise_sd = 0.05
seed = 0

[[synth.sites]]
name = "siteA"

[[synth.sites]]
name = "siteB"
offset_mm = 30.0
rotation_range = 0.5

[[synth.sites]]
name = "heldout"
offset_mm = 45.0
rotation_range = 0.8
subjects = {test = 40}

[train]
epochs = 20
seed = 0
"""
TRAIN_SITES = ("siteA", "siteB")
HELDOUT = "heldout"


class GridResult:
    def __init__(self, root: Path, elapsed: float):
        self.root = root
        self.elapsed = elapsed
        self.metrics: dict[tuple[str, bool], dict] = {}
        for register in (True, False):
            tag = "registered" if register else "unregistered"
            samples, _ = load_features_archive(root / f"features-{tag}")
            test = [s for s in samples if s.split == "test"]
            in_sites = [s for s in test if s.site in TRAIN_SITES]
            heldout = [s for s in test if s.site == HELDOUT]
            for mode in (SHARED, NON_SHARED):
                params, _ = load_checkpoint(root / "runs" / f"{mode}-{tag}" / "checkpoint")
                records = extract_embeddings(params, in_sites)
                label_rep = separability_report(records, "gcn", "label")
                site_rep = separability_report(records, "gcn", "site")
                self.metrics[(mode, register)] = {
                    "auc": self._auc(params, in_sites),
                    "heldout_auc": self._auc(params, heldout),
                    "gcn_label": label_rep.silhouette_2d,
                    "gcn_label_full": label_rep.silhouette_full,
                    "gcn_site": site_rep.silhouette_2d,
                    "gcn_site_full": site_rep.silhouette_full,
                }

    @staticmethod
    def _auc(params, samples) -> float:
        logits = np.stack([forward(s, params).logits for s in samples])
        return roc_auc(positive_scores(logits), [s.label for s in samples]).auc


@pytest.fixture(scope="module")
def grid(tmp_path_factory) -> GridResult:
    root = tmp_path_factory.mktemp("grid")
    cfg = root / "grid.toml"
    cfg.write_text(GRID_CONFIG)
    start = time.perf_counter()
    assert main(["run-all", "--config", str(cfg), "--out", str(root / "out")]) == 0
    return GridResult(root / "out", time.perf_counter() - start)


def test_criterion_6_shared_gcn_embeddings_non_discriminative(grid, report):
    s, n = grid.metrics[(SHARED, True)], grid.metrics[(NON_SHARED, True)]
    gap = n["gcn_label"] - s["gcn_label"]
    ok = gap >= 0.15 and s["auc"] >= 0.90 and n["auc"] >= 0.90 and grid.elapsed < 600
    report(
        6, ok,
        f"registered GCN label silhouette non-shared {n['gcn_label']:.3f} vs shared {s['gcn_label']:.3f} "
        f"(gap {gap:+.3f}, need >= 0.15); full-dim {n['gcn_label_full']:.3f} vs {s['gcn_label_full']:.3f}; "
        f"test AUC shared {s['auc']:.3f}, non-shared {n['auc']:.3f}; grid runtime {grid.elapsed:.0f}s",
    )
    assert ok


def test_criterion_7_site_encoding_and_registration(grid, report):
    parts, ok = [], True
    for mode in (SHARED, NON_SHARED):
        off, on = grid.metrics[(mode, False)], grid.metrics[(mode, True)]
        unreg_ok = off["gcn_site"] >= 0.5 and off["gcn_site"] > off["gcn_label"]
        reg_ok = on["gcn_site"] <= 0.1
        ok = ok and unreg_ok and reg_ok
        parts.append(
            f"{mode}: unregistered site {off['gcn_site']:.3f} / label {off['gcn_label']:.3f} "
            f"[{'ok' if unreg_ok else 'miss'}], registered site {on['gcn_site']:.3f} [{'ok' if reg_ok else 'miss'}]"
        )
    report(7, ok, "; ".join(parts))
    assert ok


def test_criterion_8_generalization_gap_direction(grid, report):
    parts, ok = [], True
    for mode in (SHARED, NON_SHARED):
        on, off = grid.metrics[(mode, True)]["heldout_auc"], grid.metrics[(mode, False)]["heldout_auc"]
        ok = ok and on - off >= 0.05
        parts.append(f"{mode}: held-out AUC registered {on:.3f}, unregistered {off:.3f} (diff {on - off:+.3f})")
    report(8, ok, "; ".join(parts) + "; need diff >= 0.05")
    assert ok


# -- 9. determinism ------------------------------------------------------------

TINY_GRID = """
[synth]
n_structures = 2
icosphere_level = 1
subjects_per_site = {train = 8, val = 4, test = 4}
seed = 5

[train]
epochs = 3
"""


def test_criterion_9_run_all_deterministic(tmp_path, report):
    cfg = tmp_path / "tiny.toml"
    cfg.write_text(TINY_GRID)
    for name in ("a", "b"):
        assert main(["run-all", "--config", str(cfg), "--out", str(tmp_path / name)]) == 0

    def artifacts(root: Path) -> dict[str, bytes]:
        return {
            p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != MANIFEST_NAME
        }

    a, b = artifacts(tmp_path / "a"), artifacts(tmp_path / "b")
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    n_text = sum(k.endswith((".csv", ".json")) for k in a)
    ok = not differing and n_text > 0
    report(9, ok, f"{len(a)} artifacts ({n_text} CSV/JSON) compared, {len(differing)} differ {differing[:3]}")
    assert ok
