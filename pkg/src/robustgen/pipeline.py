"""Experiment orchestration: train -> evaluate -> requested analyses -> manifest."""

from __future__ import annotations

import logging
import os
import platform
import time
import traceback
from contextlib import contextmanager
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .analysis import (
    filter_normalized_directions,
    group_sparsity,
    landscape_grid,
    lemma1_bounds,
    LemmaBoundInputs,
    model_bound_inputs,
    empirical_rademacher,
    theorem2_bound,
    theorem2_terms,
)
from .config import ExperimentConfig
from .data import Dataset, load_dataset
from .evaluation import corruption_errors, corruption_mce, evaluate_model
from .models import ModelSpec, build_model
from .reporting import emit_report, histogram_rows, sha256, write_csv, write_json
from .training import TrainConfig, Trainer

log = logging.getLogger(__name__)

OUT_ENV = "ROBUSTGEN_OUT"
FAILED_MARKER = "FAILED"
MANIFEST = "manifest.json"


class OutputExists(FileExistsError):
    pass


def resolve_output_dir(cfg: ExperimentConfig, override=None) -> Path:
    base = override or cfg.output_dir or os.environ.get(OUT_ENV) or "runs"
    path = Path(base)
    return path if override or cfg.output_dir else path / cfg.name


def prepare_output_dir(out_dir: Path, force: bool) -> None:
    if out_dir.exists() and any(out_dir.iterdir()):
        if not force:
            raise OutputExists(f"{out_dir} is not empty; pass --force to overwrite")
        for child in out_dir.iterdir():
            if child.is_file():
                child.unlink()
    out_dir.mkdir(parents=True, exist_ok=True)


def reference_cnn_spec(model_spec: ModelSpec) -> ModelSpec:
    """Plain CNN matching the experiment's input shape and widths (the mCE reference)."""
    return ModelSpec(
        family="CNN",
        widths=list(model_spec.widths),
        input_shape=model_spec.input_shape,
        num_classes=model_spec.num_classes,
        activation=model_spec.activation,
        blocks=model_spec.blocks,
    )


class Run:
    """State for one executed experiment; collects files and stage timings."""

    def __init__(self, cfg: ExperimentConfig, out_dir: Path):
        self.cfg = cfg
        self.out_dir = out_dir
        self.files: list[Path] = []
        self.timings: dict[str, float] = {}

    def stage(self, name, fn, *args, **kw):
        start = time.perf_counter()
        log.info("[%s] %s", self.cfg.name, name)
        result = fn(*args, **kw)
        self.timings[name] = time.perf_counter() - start
        return result

    def emit(self, reports: dict, fmt_name: str):
        self.files += emit_report(reports, self.out_dir, fmt_name)


def train_model(run: Run, data: Dataset):
    cfg = run.cfg
    model = build_model(cfg.model, cfg.seed)
    trainer = Trainer(model, cfg.train, len(data.x_train))
    trainer.fit(data.x_train, data.y_train, data.x_test, data.y_test, checkpoint_dir=run.out_dir)
    run.files += sorted(run.out_dir.glob("checkpoint_epoch*.rgw"))
    return model, trainer.log


def sparsity_report(run: Run, model) -> None:
    reports = group_sparsity(model, run.cfg.analyses.threshold_frac)
    run.emit({"sparsity": reports}, "csv")
    run.files.append(write_csv(run.out_dir / "histograms.csv", ("group", "bin_lo", "bin_hi", "count"), histogram_rows(reports)))


def landscape_report(run: Run, model, data: Dataset) -> None:
    cfg, flags = run.cfg, run.cfg.analyses
    dirs = filter_normalized_directions(model, cfg.seed)
    axis = [float(v) for v in np.linspace(-flags.landscape_span, flags.landscape_span, flags.landscape_points)]
    if 0.0 not in axis:
        axis = sorted(axis + [0.0])
    n = flags.landscape_samples
    grid = landscape_grid(model, data.x_test[:n], data.y_test[:n], dirs, axis, axis, direction_seed=cfg.seed)
    run.emit({"landscape": grid}, "csv")


def run_analyses(run: Run, model, data: Dataset) -> None:
    flags = run.cfg.analyses
    if flags.sparsity:
        run.stage("sparsity", sparsity_report, run, model)
    if flags.landscape:
        run.stage("landscape", landscape_report, run, model, data)
    if flags.bounds:
        run.files.append(run.stage("bounds", bounds_report, run, model, data))
    if flags.corruption:
        run.stage("corruption", corruption_report, run, model, data)


def bounds_report(run: Run, model, data: Dataset) -> Path:
    cfg, flags = run.cfg, run.cfg.analyses
    x, y = data.x_test, data.y_test
    eps = cfg.train.attack.epsilon
    flat = x.reshape(len(x), -1)
    theta = float(np.linalg.norm(flat, axis=1).max()) or 1.0
    r_s = empirical_rademacher(x, theta=1.0, trials=20, norm="L2", seed=cfg.seed)
    lemma = LemmaBoundInputs(R_S=r_s, epsilon=eps, Theta=1.0, d=flat.shape[1], n=len(x), p=2.0)
    lo, hi = lemma1_bounds(lemma)
    report = {"lemma1": {"inputs": lemma.__dict__, "lower": lo, "upper": hi, "input_max_l2_norm": theta}}
    has_attention = any(k.endswith(".attn.v.weight") for k in model.params)
    if has_attention:
        t2 = model_bound_inputs(model, x, y, gamma=flags.bound_gamma, epsilon=eps, delta_prob=flags.bound_delta, max_columns=flags.bound_columns)
        report["theorem2"] = {"inputs": t2.to_dict(), "terms": theorem2_terms(t2), "bound": theorem2_bound(t2)}
    else:
        report["theorem2"] = None
    return write_json(run.out_dir / "bounds.json", report)


def corruption_report(run: Run, model, data: Dataset):
    cfg = run.cfg
    ref_train = TrainConfig(**{**cfg.train.to_dict(), "method": "standard", "l1_lambda": 0.0, "checkpoint_every": 0, "eval_every": 0})
    reference = build_model(reference_cnn_spec(cfg.model), cfg.seed)
    Trainer(reference, ref_train, len(data.x_train)).fit(data.x_train, data.y_train)
    # a zero-error reference cell would make the ratio undefined; floor it at half a sample
    floor = 0.5 / len(data.y_test)
    ref_errors = {k: max(v, floor) for k, v in corruption_errors(reference, data.x_test, data.y_test, cfg.seed).items()}
    report = corruption_mce(model, data.x_test, data.y_test, ref_errors, cfg.seed)
    run.emit({"corruption": report}, "json")
    run.emit({"corruption": report}, "csv")


def _manifest(run: Run, config_path, status: str) -> Path:
    inputs = [Path(config_path)] if config_path else []
    ds = run.cfg.dataset
    if ds.source == "idx_files":
        inputs += [Path(ds.images_path), Path(ds.labels_path)]
    manifest = {
        "name": run.cfg.name,
        "status": status,
        "seed": run.cfg.seed,
        "config": run.cfg.to_dict(),
        "versions": {
            "robustgen": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "wall_times": run.timings,
        "inputs": [{"path": str(p), "sha256": sha256(p)} for p in inputs if p.exists()],
        "outputs": [{"path": p.name, "sha256": sha256(p)} for p in run.files if p.exists()],
    }
    return write_json(run.out_dir / MANIFEST, manifest)


@contextmanager
def run_context(cfg: ExperimentConfig, out_dir=None, force: bool = False, config_path=None):
    """Prepare the output directory, yield a Run, and always finish with a manifest.

    On failure a ``FAILED`` marker (with the traceback) is left next to any
    partial outputs and the exception propagates.
    """
    out = resolve_output_dir(cfg, out_dir)
    prepare_output_dir(out, force)
    run = Run(cfg, out)
    try:
        yield run
    except BaseException:
        (out / FAILED_MARKER).write_text(traceback.format_exc())
        _manifest(run, config_path, "failed")
        raise
    _manifest(run, config_path, "ok")


def train_and_evaluate(run: Run):
    cfg = run.cfg
    data = run.stage("data", load_dataset, cfg.dataset, cfg.seed)
    model, train_log = run.stage("train", train_model, run, data)
    run.emit({"train_log": train_log}, "csv")
    report = run.stage("evaluate", evaluate_model, model, data.x_test, data.y_test, cfg.eval_attacks, cfg.seed)
    run.emit({"robustness": report}, "json")
    run.emit({"robustness": report}, "csv")
    return model, data


def run_experiment(cfg: ExperimentConfig, out_dir=None, force: bool = False, config_path=None) -> Path:
    """Train, evaluate and run the flagged analyses; returns the output directory."""
    with run_context(cfg, out_dir, force, config_path) as run:
        model, data = train_and_evaluate(run)
        run_analyses(run, model, data)
    return run.out_dir


# --------------------------------------------------------------------- sweep


def sweep_variants(cfg: ExperimentConfig, stages=None, patch_sizes=None, l1_lambdas=None) -> list[ExperimentConfig]:
    """Expand one template into per-variant configs (stage layouts, patch sizes or l1 strengths)."""
    variants = []
    for layout in stages or []:
        c = ExperimentConfig.from_dict(cfg.to_dict())
        c.model.family, c.model.stages = "Hybrid", layout
        c.model.validate()
        c.name = f"{cfg.name}-{layout}"
        variants.append(c)
    for p in patch_sizes or []:
        c = ExperimentConfig.from_dict(cfg.to_dict())
        c.model.family, c.model.patch_size = "ViT", int(p)
        c.model.validate()
        c.name = f"{cfg.name}-p{p}"
        variants.append(c)
    for lam in l1_lambdas or []:
        c = ExperimentConfig.from_dict(cfg.to_dict())
        c.train.l1_lambda = float(lam)
        c.name = f"{cfg.name}-l1_{lam:g}"
        variants.append(c)
    return variants or [cfg]


def run_sweep(cfg: ExperimentConfig, out_dir, variants: list[ExperimentConfig], threads: int = 1, force: bool = False) -> list[Path]:
    root = Path(out_dir)

    def one(c):
        return run_experiment(c, root / c.name, force=force)

    if threads <= 1:
        return [one(c) for c in variants]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, variants))
