"""Multi-graph GCN classifier with hand-written backpropagation.

Each structure graph passes through three GCN layers (no bias, ReLU) and a
global mean pool. The pooled vectors are stacked in structure order and fed
to a two-layer head (FC1 with ReLU, FC2 logits). In ``shared`` mode one GCN
weight set serves every structure; in ``non-shared`` mode structure ``i``
has its own set.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh

SHARED = "shared"
NON_SHARED = "non-shared"
MODES = (SHARED, NON_SHARED)
N_GCN_LAYERS = 3


class ModelError(ValueError):
    pass


# -- graph operators --------------------------------------------------------

def normalized_adjacency_from_edges(n: int, edges: np.ndarray) -> sp.csr_matrix:
    """``D^-1/2 (A + I) D^-1/2`` for ``n`` nodes and undirected ``edges`` (E, 2)."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    rows = np.concatenate([edges[:, 0], edges[:, 1], np.arange(n)])
    cols = np.concatenate([edges[:, 1], edges[:, 0], np.arange(n)])
    a_hat = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    a_hat.sum_duplicates()
    a_hat.data[:] = 1.0
    deg = np.asarray(a_hat.sum(axis=1)).ravel()
    d_inv_sqrt = 1.0 / np.sqrt(deg)
    p = sp.diags(d_inv_sqrt) @ a_hat @ sp.diags(d_inv_sqrt)
    p = sp.csr_matrix(p)
    p.sort_indices()
    return p


def normalized_adjacency(mesh: Mesh) -> sp.csr_matrix:
    return normalized_adjacency_from_edges(mesh.n_vertices, mesh.edges)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def gcn_layer(H: np.ndarray, P, W: np.ndarray, activation: str = "relu") -> np.ndarray:
    """``act(P @ H @ W)``."""
    if H.shape[0] != P.shape[0] or H.shape[1] != W.shape[0]:
        raise ModelError(f"shape mismatch: P {P.shape}, H {H.shape}, W {W.shape}")
    z = P @ (H @ W)
    if activation == "relu":
        return relu(z)
    if activation == "none":
        return np.asarray(z)
    raise ModelError(f"unknown activation {activation!r}")


def global_mean_pool(H: np.ndarray) -> np.ndarray:
    H = np.asarray(H)
    if H.ndim != 2 or H.shape[0] == 0:
        raise ModelError("cannot pool an empty node set")
    return H.mean(axis=0)


# -- parameters --------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    n_structures: int = 15
    in_features: int = 33
    hidden: int = 32
    fc_hidden: int = 32
    n_classes: int = 2
    mode: str = SHARED

    def __post_init__(self):
        if self.mode not in MODES:
            raise ModelError(f"mode must be one of {MODES}, got {self.mode!r}")

    @property
    def n_gcn_sets(self) -> int:
        return 1 if self.mode == SHARED else self.n_structures

    def shapes(self) -> dict[str, tuple[int, ...]]:
        dims = [self.in_features] + [self.hidden] * N_GCN_LAYERS
        out = {}
        for s in range(self.n_gcn_sets):
            for layer in range(N_GCN_LAYERS):
                out[f"gcn{s}.W{layer + 1}"] = (dims[layer], dims[layer + 1])
        emb = self.n_structures * self.hidden
        out["fc1.W"] = (emb, self.fc_hidden)
        out["fc1.b"] = (self.fc_hidden,)
        out["fc2.W"] = (self.fc_hidden, self.n_classes)
        out["fc2.b"] = (self.n_classes,)
        return out


@dataclass
class ModelParams:
    """Named parameter arrays plus the config that fixes their shapes.

    Gradients use the same container, so optimizer code can zip over
    ``arrays`` by name.
    """

    config: ModelConfig
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def mode(self) -> str:
        return self.config.mode

    def gcn_weights(self, structure: int) -> list[np.ndarray]:
        s = 0 if self.mode == SHARED else structure
        return [self.arrays[f"gcn{s}.W{k + 1}"] for k in range(N_GCN_LAYERS)]

    def zeros_like(self) -> "ModelParams":
        return ModelParams(self.config, {k: np.zeros_like(v) for k, v in self.arrays.items()})

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def check_shapes(self) -> None:
        expected = self.config.shapes()
        if set(expected) != set(self.arrays):
            raise ModelError(f"parameter names {sorted(self.arrays)} != {sorted(expected)}")
        for k, shape in expected.items():
            if self.arrays[k].shape != shape:
                raise ModelError(f"{k} has shape {self.arrays[k].shape}, expected {shape}")


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Glorot-uniform weights and zero biases, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in config.shapes().items():
        if name.endswith(".b"):
            arrays[name] = np.zeros(shape)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            arrays[name] = rng.uniform(-limit, limit, size=shape)
    return ModelParams(config, arrays)


def parameter_count(params: ModelParams | ModelConfig, part: str = "all") -> int:
    """Scalar parameter count for ``part`` in {"all", "gcn", "head"}."""
    config = params.config if isinstance(params, ModelParams) else params
    shapes = config.shapes()
    if part == "gcn":
        names = [k for k in shapes if k.startswith("gcn")]
    elif part == "head":
        names = [k for k in shapes if k.startswith("fc")]
    elif part == "all":
        names = list(shapes)
    else:
        raise ModelError(f"unknown parameter group {part!r}")
    return int(sum(np.prod(shapes[k]) for k in names))


# -- forward / backward ------------------------------------------------------

@dataclass
class _StructureCache:
    P: sp.csr_matrix
    inputs: list[np.ndarray]       # H(l-1) per layer
    propagated: list[np.ndarray]   # P @ H(l-1) per layer
    pre: list[np.ndarray]          # Z(l) = P H(l-1) W(l)


@dataclass
class ForwardTrace:
    pooled: np.ndarray          # (N, hidden)
    gcn_embedding: np.ndarray   # (N * hidden,)
    fc1_pre: np.ndarray
    fc1: np.ndarray
    logits: np.ndarray
    caches: list[_StructureCache] = field(repr=False, default_factory=list)


def _graphs_of(sample) -> Sequence[tuple]:
    return sample.graphs if hasattr(sample, "graphs") else sample


def forward(sample, params: ModelParams) -> ForwardTrace:
    """Run the model on one subject.

    ``sample`` is a sequence of ``(P, X)`` pairs, one per structure, or any
    object exposing them as ``.graphs``.
    """
    graphs = _graphs_of(sample)
    cfg = params.config
    if len(graphs) != cfg.n_structures:
        raise ModelError(f"expected {cfg.n_structures} structures, got {len(graphs)}")

    pooled, caches = [], []
    for s, (P, X) in enumerate(graphs):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != cfg.in_features:
            raise ModelError(
                f"structure {s}: expected {cfg.in_features}-wide node features, got shape {X.shape}"
            )
        if P.shape != (X.shape[0], X.shape[0]):
            raise ModelError(f"structure {s}: adjacency {P.shape} does not match {X.shape[0]} nodes")
        H = X
        cache = _StructureCache(P, [], [], [])
        for W in params.gcn_weights(s):
            PH = P @ H
            Z = PH @ W
            cache.inputs.append(H)
            cache.propagated.append(PH)
            cache.pre.append(Z)
            H = relu(Z)
        pooled.append(global_mean_pool(H))
        caches.append(cache)

    pooled = np.stack(pooled)
    g = pooled.reshape(-1)
    a = params.arrays
    z1 = g @ a["fc1.W"] + a["fc1.b"]
    h1 = relu(z1)
    logits = h1 @ a["fc2.W"] + a["fc2.b"]
    return ForwardTrace(pooled, g, z1, h1, logits, caches)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def cross_entropy(logits: np.ndarray, label: int) -> float:
    return float(-log_softmax(logits)[label])


def loss_and_gradients(
    trace: ForwardTrace, label: int, params: ModelParams
) -> tuple[float, ModelParams]:
    """Cross-entropy loss and analytic gradients for one forward trace."""
    lsm = log_softmax(trace.logits)
    loss = float(-lsm[label])
    if not np.isfinite(loss):
        raise ModelError(f"non-finite loss {loss}")
    a = params.arrays
    grads = params.zeros_like()
    gr = grads.arrays

    dlogits = np.exp(lsm)
    dlogits[label] -= 1.0
    gr["fc2.W"] = np.outer(trace.fc1, dlogits)
    gr["fc2.b"] = dlogits
    dz1 = (a["fc2.W"] @ dlogits) * (trace.fc1_pre > 0)
    gr["fc1.W"] = np.outer(trace.gcn_embedding, dz1)
    gr["fc1.b"] = dz1
    dg = (a["fc1.W"] @ dz1).reshape(trace.pooled.shape)

    shared = params.mode == SHARED
    for s, cache in enumerate(trace.caches):
        weights = params.gcn_weights(s)
        prefix = "gcn0" if shared else f"gcn{s}"
        n_nodes = cache.inputs[0].shape[0]
        dH = np.broadcast_to(dg[s] / n_nodes, cache.pre[-1].shape)
        for layer in reversed(range(N_GCN_LAYERS)):
            dZ = dH * (cache.pre[layer] > 0)
            gr[f"{prefix}.W{layer + 1}"] += cache.propagated[layer].T @ dZ
            if layer:
                # P is symmetric, so P^T dZ W^T == P @ (dZ W^T).
                dH = cache.P @ (dZ @ weights[layer].T)

    for k, v in gr.items():
        if not np.all(np.isfinite(v)):
            raise ModelError(f"non-finite gradient in {k}")
    return loss, grads


# -- checkpoints -------------------------------------------------------------

def config_hash(obj) -> str:
    """Stable SHA-256 of a JSON-serializable object."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(params: ModelParams, directory, seed: int | None = None, extra: dict | None = None) -> Path:
    """Write ``manifest.json`` plus little-endian row-major ``params.bin``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = sorted(params.arrays)
    entries, offset, chunks = [], 0, []
    for name in names:
        arr = np.ascontiguousarray(params.arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes(order="C"))
        offset += arr.nbytes
    manifest = {
        "mode": params.mode,
        "config": asdict(params.config),
        "seed": seed,
        "config_hash": config_hash(asdict(params.config)),
        "dtype": "<f8",
        "arrays": entries,
    }
    if extra:
        manifest["extra"] = extra
    (directory / "params.bin").write_bytes(b"".join(chunks))
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return directory


def load_checkpoint(directory) -> tuple[ModelParams, dict]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise ModelError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    blob = (directory / "params.bin").read_bytes()
    config = ModelConfig(**manifest["config"])
    arrays = {}
    for entry in manifest["arrays"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=entry["offset"])
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    params = ModelParams(config, arrays)
    params.check_shapes()
    return params, manifest
