"""Command-line pipeline: generate -> preprocess -> train -> inspect / evaluate.

Every stage persists to disk under ``--out`` so that all model variants read
the same preprocessed inputs. A ``run_manifest.json`` in the output root
records the config hash, seed, tool version, stage timestamps and the
artifacts each stage read and wrote; it is the only file containing
wall-clock times.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .dataset import (
    ArchiveError,
    load_dataset_archive,
    load_dataset_metadata,
    load_features_archive,
    preprocess,
    save_dataset_archive,
    save_features_archive,
    split_samples,
)
from .evaluation import positive_scores, roc_auc, write_summary
from .gnn import MODES, config_hash, forward, load_checkpoint, save_checkpoint
from .inspection import GROUPINGS, LAYERS, extract_embeddings, separability_report
from .synthgen import SynthSpec, generate_dataset, generation_metadata
from .training import TrainConfig, train

log = logging.getLogger("meshinspect")

MANIFEST_NAME = "run_manifest.json"
CONFIG_SECTIONS = ("synth", "preprocess", "train", "inspect")


class CliError(RuntimeError):
    """User-facing failure; the message is printed in the structured error line."""


# -- configuration -------------------------------------------------------------

def load_config(path: str | Path | None) -> dict:
    """Read a JSON or TOML run config.

    The file may hold ``synth``/``preprocess``/``train``/``inspect`` tables.
    A file with none of those tables is treated as a bare generator spec.
    """
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise CliError(f"config file {path} does not exist")
    try:
        if path.suffix.lower() == ".toml":
            import tomli

            data = tomli.loads(path.read_text())
        else:
            data = json.loads(path.read_text())
    except Exception as exc:
        raise CliError(f"{path}: cannot parse ({exc})") from None
    if not isinstance(data, dict):
        raise CliError(f"{path}: top level must be a table")
    if not any(k in data for k in CONFIG_SECTIONS):
        return {"synth": data}
    unknown = sorted(set(data) - set(CONFIG_SECTIONS))
    if unknown:
        raise CliError(f"{path}: unknown config section {unknown[0]!r}")
    return data


def _synth_spec(cfg: dict, seed: int | None) -> SynthSpec:
    data = dict(cfg.get("synth", {}))
    if seed is not None:
        data["seed"] = seed
    return SynthSpec.from_dict(data)


def _train_config(cfg: dict, seed: int | None, **overrides) -> TrainConfig:
    data = dict(cfg.get("train", {}))
    if seed is not None:
        data["seed"] = seed
    data.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(data)


def _parse_radius(value) -> float | str:
    if value is None or value == "auto":
        return "auto"
    try:
        r = float(value)
    except (TypeError, ValueError):
        raise CliError(f"--radius must be 'auto' or a positive number, got {value!r}") from None
    if not r > 0:
        raise CliError(f"--radius must be positive, got {r}")
    return r


def _parse_switch(value) -> bool:
    if isinstance(value, bool):
        return value
    if value in ("on", "true", "yes", "1"):
        return True
    if value in ("off", "false", "no", "0"):
        return False
    raise CliError(f"expected on/off, got {value!r}")


# -- run manifest --------------------------------------------------------------

@dataclass
class RunManifest:
    config_hash: str = ""
    seed: int | None = None
    tool_version: str = __version__
    stages: dict[str, dict] = field(default_factory=dict)

    @classmethod
    def load(cls, root: Path) -> "RunManifest":
        path = root / MANIFEST_NAME
        if not path.exists():
            return cls()
        data = json.loads(path.read_text())
        return cls(data.get("config_hash", ""), data.get("seed"), data.get("tool_version", __version__), data.get("stages", {}))

    def record(self, name: str, started: float, inputs: Sequence[Path], outputs: Sequence[Path], root: Path) -> None:
        def rel(p: Path) -> str:
            p = Path(p)
            try:
                return p.resolve().relative_to(root.resolve()).as_posix()
            except ValueError:
                return str(p)

        self.stages[name] = {
            "started": _iso(started),
            "finished": _iso(time.time()),
            "inputs": [rel(p) for p in inputs],
            "outputs": sorted(rel(p) for p in outputs),
        }

    def save(self, root: Path) -> Path:
        root.mkdir(parents=True, exist_ok=True)
        path = root / MANIFEST_NAME
        path.write_text(json.dumps(asdict(self), indent=1, sort_keys=True))
        return path


def _iso(t: float) -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(t)) + f".{int((t % 1) * 1000):03d}Z"


def _files_under(directory: Path) -> list[Path]:
    return sorted(p for p in Path(directory).rglob("*") if p.is_file())


class _Stage:
    """Context manager that times a stage and records it in the run manifest."""

    def __init__(self, root: Path, name: str, cfg: dict, seed: int | None):
        self.root, self.name, self.cfg, self.seed = root, name, cfg, seed
        self.inputs: list[Path] = []
        self.outputs: list[Path] = []

    def __enter__(self) -> "_Stage":
        self.started = time.time()
        log.info("stage %s started", self.name)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        if exc_type is None:
            manifest = RunManifest.load(self.root)
            manifest.config_hash = config_hash(self.cfg)
            manifest.seed = self.seed
            manifest.tool_version = __version__
            manifest.record(self.name, self.started, self.inputs, self.outputs, self.root)
            manifest.save(self.root)
            log.info("stage %s finished in %.1fs", self.name, time.time() - self.started)
        return False


# -- commands ------------------------------------------------------------------

def cmd_generate(out: Path, cfg: dict, seed: int | None, dataset_dir: Path | None = None) -> Path:
    spec = _synth_spec(cfg, seed)
    dataset_dir = Path(dataset_dir or out / "dataset")
    with _Stage(out, "generate", cfg, spec.seed) as stage:
        samples = generate_dataset(spec)
        save_dataset_archive(samples, dataset_dir, generation_metadata(spec))
        stage.outputs = _files_under(dataset_dir)
    return dataset_dir


def cmd_preprocess(
    out: Path,
    cfg: dict,
    seed: int | None,
    register: bool | None = None,
    radius=None,
    dataset_dir: Path | None = None,
    features_dir: Path | None = None,
) -> Path:
    section = cfg.get("preprocess", {})
    register = _parse_switch(register if register is not None else section.get("register", True))
    radius = _parse_radius(radius if radius is not None else section.get("radius", "auto"))
    dataset_dir = Path(dataset_dir or out / "dataset")
    features_dir = Path(features_dir or out / "features")
    with _Stage(out, f"preprocess[{features_dir.name}]", cfg, seed) as stage:
        try:
            samples = load_dataset_archive(dataset_dir)
        except ArchiveError as exc:
            raise CliError(str(exc)) from None
        processed, transforms = preprocess(samples, register=register, radius=radius)
        meta = {
            "register": register,
            "radius": radius,
            "reference_subject": samples[0].subject_id if samples else None,
            "neighbourhood": "euclidean radius search",
            "dataset": load_dataset_metadata(dataset_dir),
        }
        save_features_archive(processed, features_dir, meta, transforms)
        stage.inputs = [dataset_dir / "manifest.csv"]
        stage.outputs = _files_under(features_dir)
    return features_dir


def _load_features(features_dir: Path):
    try:
        return load_features_archive(features_dir)
    except ArchiveError as exc:
        raise CliError(str(exc)) from None


def _load_checkpoint(checkpoint_dir: Path):
    if not (Path(checkpoint_dir) / "manifest.json").exists():
        raise CliError(f"no checkpoint at {checkpoint_dir}; run `train` first")
    return load_checkpoint(checkpoint_dir)


def cmd_train(
    out: Path,
    cfg: dict,
    seed: int | None,
    mode: str | None = None,
    features_dir: Path | None = None,
    run_dir: Path | None = None,
) -> Path:
    features_dir = Path(features_dir or out / "features")
    samples, meta = _load_features(features_dir)
    config = _train_config(cfg, seed, mode=mode, registration=bool(meta.get("register", True)))
    run_dir = Path(run_dir or out / f"model-{config.mode}")
    with _Stage(out, f"train[{run_dir.name}]", cfg, config.seed) as stage:
        splits = split_samples(samples)
        if not splits["train"] or not splits["val"]:
            raise CliError(f"features archive {features_dir} needs non-empty train and val splits")
        result = train(splits["train"], splits["val"], config)
        ckpt = save_checkpoint(
            result.params,
            run_dir / "checkpoint",
            seed=config.seed,
            extra={"train_config": asdict(config), "selected_epoch": result.history.selected_epoch},
        )
        result.history.to_csv(run_dir / "history.csv")
        stage.inputs = [features_dir / "manifest.csv"]
        stage.outputs = [*_files_under(ckpt), run_dir / "history.csv"]
    return run_dir


def cmd_inspect(
    out: Path,
    cfg: dict,
    seed: int | None,
    checkpoint_dir: Path,
    features_dir: Path | None = None,
    layers: Sequence[str] = LAYERS,
    svg: bool = False,
    report_dir: Path | None = None,
    split: str = "test",
) -> Path:
    features_dir = Path(features_dir or out / "features")
    params, _ = _load_checkpoint(checkpoint_dir)
    samples, _ = _load_features(features_dir)
    bad = [l for l in layers if l not in LAYERS]
    if bad:
        raise CliError(f"unknown layer {bad[0]!r}; choose from {','.join(LAYERS)}")
    section = cfg.get("inspect", {})
    cap = int(section.get("sample_cap", 500))
    inspect_seed = int(seed if seed is not None else section.get("seed", 0))
    report_dir = Path(report_dir or Path(checkpoint_dir).parent / "inspect")
    with _Stage(out, f"inspect[{report_dir.parent.name}]", cfg, inspect_seed) as stage:
        chosen = [s for s in samples if s.split == split]
        if not chosen:
            raise CliError(f"no subjects in split {split!r}")
        records = extract_embeddings(params, chosen)
        written = []
        for layer in layers:
            for grouping in GROUPINGS:
                report = separability_report(records, layer, grouping, sample_cap=cap, seed=inspect_seed)
                written += report.write(report_dir, svg=svg)
        stage.inputs = [Path(checkpoint_dir) / "manifest.json", features_dir / "manifest.csv"]
        stage.outputs = written
    return report_dir


def cmd_evaluate(
    out: Path,
    cfg: dict,
    seed: int | None,
    checkpoint_dir: Path,
    features_dir: Path | None = None,
    per_site: bool = False,
    eval_dir: Path | None = None,
    split: str = "test",
) -> Path:
    features_dir = Path(features_dir or out / "features")
    params, _ = _load_checkpoint(checkpoint_dir)
    samples, _ = _load_features(features_dir)
    eval_dir = Path(eval_dir or Path(checkpoint_dir).parent / "evaluate")
    with _Stage(out, f"evaluate[{eval_dir.parent.name}]", cfg, seed) as stage:
        chosen = [s for s in samples if s.split == split]
        if not chosen:
            raise CliError(f"no subjects in split {split!r}")
        eval_dir.mkdir(parents=True, exist_ok=True)
        logits = np.stack([forward(s, params).logits for s in chosen])
        scores = positive_scores(logits)
        labels = np.array([s.label for s in chosen])
        sites = np.array([s.site for s in chosen])

        groups = [("all", np.ones(len(chosen), dtype=bool))]
        if per_site:
            groups += [(site, sites == site) for site in sorted(set(sites.tolist()))]
        rows, written = [], []
        for name, mask in groups:
            row = {"group": name, "n": int(mask.sum()), "n_positive": int(labels[mask].sum()), "auc": None}
            if 0 < row["n_positive"] < row["n"]:
                roc = roc_auc(scores[mask], labels[mask])
                row["auc"] = roc.auc
                written.append(roc.to_csv(eval_dir / f"roc_{name}.csv"))
            else:
                log.warning("group %s has a single class; AUC undefined", name)
            rows.append(row)
        written.append(write_summary(rows, eval_dir / "summary.json"))
        stage.inputs = [Path(checkpoint_dir) / "manifest.json", features_dir / "manifest.csv"]
        stage.outputs = written
    return eval_dir


def cmd_run_all(out: Path, cfg: dict, seed: int | None, svg: bool = False) -> Path:
    """Generate once, preprocess with and without registration, then train,
    inspect and evaluate all four (registration x weight sharing) variants."""
    cmd_generate(out, cfg, seed)
    summary = []
    for register in (True, False):
        tag = "registered" if register else "unregistered"
        features_dir = cmd_preprocess(out, cfg, seed, register=register, features_dir=out / f"features-{tag}")
        for mode in MODES:
            run_dir = out / "runs" / f"{mode}-{tag}"
            cmd_train(out, cfg, seed, mode=mode, features_dir=features_dir, run_dir=run_dir)
            ckpt = run_dir / "checkpoint"
            cmd_inspect(out, cfg, seed, ckpt, features_dir, svg=svg)
            eval_dir = cmd_evaluate(out, cfg, seed, ckpt, features_dir, per_site=True)
            for row in json.loads((eval_dir / "summary.json").read_text()):
                summary.append({"mode": mode, "registration": register, **row})
    write_summary(summary, out / "summary.json")
    return out


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override every seed in the config")
    common.add_argument("--config", default=None, help="JSON or TOML run config")
    common.add_argument("--out", default="out", help="output root (default: ./out)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="meshinspect", description=__doc__.splitlines()[0], parents=[common])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic dataset archive")
    g.add_argument("--dataset", default=None, help="archive directory (default: OUT/dataset)")

    p = sub.add_parser("preprocess", parents=[common], help="optional registration, then FPFH features")
    p.add_argument("--dataset", default=None)
    p.add_argument("--features", default=None, help="features directory (default: OUT/features)")
    p.add_argument("--register", choices=("on", "off"), default=None)
    p.add_argument("--radius", default=None, help="'auto' or a radius in mm")

    t = sub.add_parser("train", parents=[common], help="train one model variant")
    t.add_argument("--features", default=None)
    t.add_argument("--mode", choices=MODES, default=None)
    t.add_argument("--run-dir", default=None, help="default: OUT/model-MODE")

    i = sub.add_parser("inspect", parents=[common], help="layer-wise separability reports")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--features", default=None)
    i.add_argument("--layers", default=",".join(LAYERS))
    i.add_argument("--svg", action="store_true")
    i.add_argument("--split", default="test")
    i.add_argument("--report-dir", default=None)

    e = sub.add_parser("evaluate", parents=[common], help="ROC curves and AUC summary")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--features", default=None)
    e.add_argument("--per-site", action="store_true")
    e.add_argument("--split", default="test")
    e.add_argument("--eval-dir", default=None)

    r = sub.add_parser("run-all", parents=[common], help="full four-variant experiment grid")
    r.add_argument("--svg", action="store_true")
    return parser


def _opt_path(value) -> Path | None:
    return Path(value) if value else None


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    out = Path(args.out)
    try:
        cfg = load_config(args.config)
        if args.command == "generate":
            result = cmd_generate(out, cfg, args.seed, _opt_path(args.dataset))
        elif args.command == "preprocess":
            result = cmd_preprocess(
                out, cfg, args.seed, args.register, args.radius, _opt_path(args.dataset), _opt_path(args.features)
            )
        elif args.command == "train":
            result = cmd_train(out, cfg, args.seed, args.mode, _opt_path(args.features), _opt_path(args.run_dir))
        elif args.command == "inspect":
            layers = [l.strip() for l in args.layers.split(",") if l.strip()]
            result = cmd_inspect(
                out, cfg, args.seed, Path(args.checkpoint), _opt_path(args.features), layers, args.svg,
                _opt_path(args.report_dir), args.split,
            )
        elif args.command == "evaluate":
            result = cmd_evaluate(
                out, cfg, args.seed, Path(args.checkpoint), _opt_path(args.features), args.per_site,
                _opt_path(args.eval_dir), args.split,
            )
        else:
            result = cmd_run_all(out, cfg, args.seed, args.svg)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one structured line
        line = {"command": args.command, "error": type(exc).__name__, "message": str(exc)}
        print("error: " + json.dumps(line, sort_keys=True), file=sys.stderr)
        if args.verbose:
            log.exception("command failed")
        return 1
    print(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
