"""Adam training loop with node-jitter augmentation and validation-loss model selection."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import SubjectSample, compute_subject_features
from .evaluation import positive_scores, roc_auc
from .gnn import MODES, ModelConfig, ModelError, ModelParams, cross_entropy, forward, init_params, loss_and_gradients
from .mesh import Mesh

log = logging.getLogger(__name__)

# Purpose tags for the per-run RNG streams.
_INIT, _SHUFFLE, _AUGMENT = 0, 1, 2


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 50
    batch_size: int = 8
    augment_max_offset_mm: float = 0.1
    seed: int = 0
    mode: str = "shared"
    registration: bool = True
    hidden: int = 32
    fc_hidden: int = 32

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.augment_max_offset_mm < 0:
            raise ValueError("augment_max_offset_mm must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = sorted(set(data) - set(cls.__dataclass_fields__))
        if unknown:
            raise ValueError(f"unknown train config key {unknown[0]!r}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        path = Path(path)
        if path.suffix.lower() == ".toml":
            import tomli

            data = tomli.loads(path.read_text())
        else:
            data = json.loads(path.read_text())
        return cls.from_dict(data.get("train", data))


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        return cls(
            {k: np.zeros_like(a) for k, a in params.arrays.items()},
            {k: np.zeros_like(a) for k, a in params.arrays.items()},
            0,
        )


def adam_step(
    params: ModelParams, grads: ModelParams, state: AdamState, config: TrainConfig
) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update; inputs are left untouched."""
    t = state.t + 1
    b1, b2 = config.beta1, config.beta2
    new_arrays, m_out, v_out = {}, {}, {}
    for k, theta in params.arrays.items():
        g = grads.arrays[k]
        if g.shape != theta.shape:
            raise TrainingError(f"gradient {k} has shape {g.shape}, parameter has {theta.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {k}")
        m = b1 * state.m[k] + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_arrays[k] = theta - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)
        m_out[k], v_out[k] = m, v
    return ModelParams(params.config, new_arrays), AdamState(m_out, v_out, t)


def augment_translate(mesh: Mesh, max_offset_mm: float, rng: np.random.Generator) -> Mesh:
    """Jitter every vertex by an independent uniform offset in ``[-max, max]^3``."""
    if max_offset_mm < 0:
        raise ValueError("max_offset_mm must be non-negative")
    if max_offset_mm == 0:
        return mesh
    offsets = rng.uniform(-max_offset_mm, max_offset_mm, size=mesh.vertices.shape)
    return mesh.with_vertices(mesh.vertices + offsets)


def augmented_sample(sample: SubjectSample, max_offset_mm: float, rng: np.random.Generator) -> SubjectSample:
    """Jittered copy with FPFH recomputed at the sample's stored radii."""
    meshes = [augment_translate(m, max_offset_mm, rng) for m in sample.meshes]
    return compute_subject_features(replace(sample, meshes=meshes), radius=None)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_auc: list[float] = field(default_factory=list)
    selected_epoch: int = -1

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "val_auc"])
            for e, row in enumerate(zip(self.train_loss, self.val_loss, self.val_auc), start=1):
                w.writerow([e, *(repr(float(x)) for x in row)])
        return path


def evaluate_loss(samples: Sequence[SubjectSample], params: ModelParams) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and the stacked logits over ``samples``."""
    logits = np.array([forward(s, params).logits for s in samples])
    labels = [s.label for s in samples]
    losses = [cross_entropy(z, y) for z, y in zip(logits, labels)]
    return float(np.mean(losses)), logits


def _safe_auc(logits: np.ndarray, labels: Sequence[int]) -> float:
    labels = np.asarray(labels)
    if labels.min() == labels.max():
        return float("nan")
    return roc_auc(positive_scores(logits), labels).auc


def model_config_for(config: TrainConfig, sample: SubjectSample) -> ModelConfig:
    return ModelConfig(
        n_structures=sample.n_structures,
        in_features=sample.features[0].shape[1],
        hidden=config.hidden,
        fc_hidden=config.fc_hidden,
        mode=config.mode,
    )


@dataclass
class TrainResult:
    params: ModelParams
    history: TrainHistory
    final_params: ModelParams


def train(
    train_samples: Sequence[SubjectSample],
    val_samples: Sequence[SubjectSample],
    config: TrainConfig,
) -> TrainResult:
    """Mini-batch Adam over ``train_samples``; keeps the lowest-val-loss epoch.

    Batches average per-subject gradients in a fixed order. Augmentation
    acts on per-epoch copies and redraws FPFH for the jittered geometry.
    Ties in validation loss resolve to the earliest epoch.
    """
    if not train_samples or not val_samples:
        raise TrainingError("train and validation splits must be non-empty")
    counts = {s.n_structures for s in (*train_samples, *val_samples)}
    if len(counts) != 1:
        raise TrainingError(f"inconsistent structure counts across subjects: {sorted(counts)}")

    model_cfg = model_config_for(config, train_samples[0])
    params = init_params(model_cfg, seed=int(np.random.SeedSequence([config.seed, _INIT]).generate_state(1)[0]))
    state = AdamState.zeros(params)
    shuffle_rng = np.random.default_rng([config.seed, _SHUFFLE])
    history = TrainHistory()
    best_params, best_loss = params, np.inf
    n = len(train_samples)

    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            total = params.zeros_like()
            for idx in batch:
                sample = train_samples[idx]
                if config.augment_max_offset_mm > 0:
                    aug_rng = np.random.default_rng([config.seed, _AUGMENT, epoch, int(idx)])
                    sample = augmented_sample(sample, config.augment_max_offset_mm, aug_rng)
                try:
                    trace = forward(sample, params)
                    loss, grads = loss_and_gradients(trace, sample.label, params)
                except ModelError as exc:
                    raise TrainingError(f"epoch {epoch + 1}, batch {start // config.batch_size}: {exc}") from None
                epoch_losses.append(loss)
                for k in total.arrays:
                    total.arrays[k] += grads.arrays[k]
            for k in total.arrays:
                total.arrays[k] /= len(batch)
            params, state = adam_step(params, total, state, config)

        train_loss = float(np.mean(epoch_losses))
        val_loss, val_logits = evaluate_loss(val_samples, params)
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise TrainingError(f"epoch {epoch + 1}: non-finite loss")
        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        history.val_auc.append(_safe_auc(val_logits, [s.label for s in val_samples]))
        if val_loss < best_loss:
            best_loss, best_params = val_loss, params
            history.selected_epoch = epoch + 1
        log.info("epoch %d train %.4f val %.4f auc %.3f", epoch + 1, train_loss, val_loss, history.val_auc[-1])

    return TrainResult(best_params, history, params)
