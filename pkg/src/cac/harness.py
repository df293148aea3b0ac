"""Source pretraining, the neighborhood-contrast adaptation loop, evaluation,
ablation and parameter sweeps."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .banks import Banks, init_banks, update_banks
from .core import (
    ConfigError,
    ModelParams,
    NumericError,
    cross_entropy,
    init_model,
    l2_normalize_rows,
    model_backward,
    model_forward,
    sgd_momentum_step,
    softmax_backward,
)
from .data import DomainShiftSpec, LabeledDataset, generate_two_domain_blobs
from .losses import MODES, DecaySchedule, build_similarity_mask, cac_loss, decay_factor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    hidden_width: int = 32
    feature_dim: int = 16
    num_classes: int = 3
    k: int = 3
    beta: float = 0.0
    lr: float = 1e-2
    lr_feature_scale: float = 0.1
    momentum: float = 0.9
    batch_size: int = 32
    pretrain_epochs: int = 50
    adapt_epochs: int = 30
    seed: int = 0
    n_seeds: int = 5
    loss_mode: str = "full"
    use_wsim: bool = True
    bank_fraction: float = 1.0
    max_iter_override: Optional[int] = None
    shift: DomainShiftSpec = field(default_factory=DomainShiftSpec)

    def validate(self) -> None:
        self.shift.validate()
        if self.num_classes != self.shift.num_classes:
            raise ConfigError("num_classes disagrees with the shift spec")
        if self.loss_mode not in MODES:
            raise ConfigError(f"loss_mode must be one of {MODES}")
        if self.loss_mode != "pos_only" and self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 when the negative term is used")
        if self.batch_size < 1 or self.k < 1 or self.n_seeds < 1:
            raise ConfigError("batch_size, k and n_seeds must be positive")
        if min(self.hidden_width, self.feature_dim) < 1:
            raise ConfigError("layer widths must be positive")
        if not 0 < self.bank_fraction <= 1:
            raise ConfigError("bank_fraction must lie in (0, 1]")
        if self.k >= self.stored_count():
            raise ConfigError(f"K={self.k} must be below the {self.stored_count()} stored target samples")
        if self.lr <= 0 or self.lr_feature_scale <= 0 or not 0 <= self.momentum < 1:
            raise ConfigError("need lr > 0, lr_feature_scale > 0, momentum in [0, 1)")
        if self.beta < 0:
            raise ConfigError("beta must be nonnegative")
        if min(self.pretrain_epochs, self.adapt_epochs) < 0:
            raise ConfigError("epoch counts must be nonnegative")
        if self.max_iter_override is not None and self.max_iter_override <= 0:
            raise ConfigError("max_iter_override must be positive")

    def stored_count(self) -> int:
        n = self.shift.n_target
        return n if self.bank_fraction >= 1 else int(round(n * self.bank_fraction))

    def seeds(self) -> list[int]:
        return [self.seed + i for i in range(self.n_seeds)]

    def with_seed(self, seed: int) -> "TrainConfig":
        """Same config with both the data and the training seed set to ``seed``."""
        return replace(self, seed=seed, shift=replace(self.shift, seed=seed))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        doc = dict(doc)
        shift = doc.pop("shift", {})
        if not isinstance(shift, dict):
            raise ConfigError("shift must be an object")
        shift_known = {f.name for f in dataclasses.fields(DomainShiftSpec)}
        if set(shift) - shift_known:
            raise ConfigError(f"unknown shift keys: {sorted(set(shift) - shift_known)}")
        try:
            cfg = cls(**doc, shift=DomainShiftSpec(**shift))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(doc)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def imbalanced_config(**overrides) -> TrainConfig:
    """Default benchmark with one class holding half of the target mass and
    the decay exponent set for the imbalanced case."""
    shift = DomainShiftSpec(target_proportions=[0.5, 0.25, 0.25])
    return replace(TrainConfig(beta=5.0, shift=shift), **overrides)


@dataclass
class MetricsReport:
    per_class: list[float]  # NaN marks a class absent from the evaluated data
    avg: float
    overall: float
    epoch_curve: list[tuple[int, float]] = field(default_factory=list)
    absent: list[int] = field(default_factory=list)

    @property
    def warning(self) -> bool:
        return bool(self.absent)

    @classmethod
    def from_per_class(cls, per_class, overall: float = float("nan")) -> "MetricsReport":
        values = [float(v) for v in per_class]
        absent = [c for c, v in enumerate(values) if math.isnan(v)]
        present = [v for v in values if not math.isnan(v)]
        avg = sum(present) / len(present) if present else float("nan")
        return cls(values, avg, overall, absent=absent)

    def to_dict(self) -> dict:
        return {
            "per_class": [None if math.isnan(v) else v for v in self.per_class],
            "avg": self.avg,
            "overall": self.overall,
            "epoch_curve": [list(p) for p in self.epoch_curve],
            "absent": self.absent,
        }


def evaluate(model: ModelParams, dataset: LabeledDataset) -> MetricsReport:
    """Per-class accuracy in percent and their unweighted mean."""
    pred = np.argmax(model_forward(model, dataset.X)[2], axis=1)
    correct = pred == dataset.y
    per_class = []
    for c in range(dataset.num_classes):
        members = dataset.y == c
        per_class.append(100.0 * correct[members].mean() if members.any() else float("nan"))
    report = MetricsReport.from_per_class(per_class, 100.0 * float(correct.mean()))
    if report.absent:
        log.warning("classes %s absent from evaluation data", report.absent)
    return report


def _batches(rng: np.random.Generator, n: int, batch_size: int):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def pretrain_source(config: TrainConfig, source: LabeledDataset) -> ModelParams:
    """Cross-entropy training of a fresh model on the labeled source domain."""
    model = init_model(
        source.input_dim, config.num_classes, config.hidden_width, config.feature_dim, config.seed
    )
    rng = np.random.default_rng([config.seed, 1])
    for epoch in range(config.pretrain_epochs):
        for batch in _batches(rng, len(source), config.batch_size):
            _, _, probs, cache = model_forward(model, source.X[batch], return_cache=True)
            loss, grad_logits = cross_entropy(probs, source.y[batch])
            if not math.isfinite(loss):
                raise NumericError(f"pretraining diverged in epoch {epoch}")
            grads = model_backward(model, cache, grad_logits)
            model = sgd_momentum_step(model, grads, config.lr, config.momentum)
    return model


@dataclass
class AdaptResult:
    model: ModelParams
    report: MetricsReport
    steps: list[dict]
    banks: Banks


def steps_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def _adapt(
    model: ModelParams,
    x: np.ndarray,
    config: TrainConfig,
    on_epoch: Callable[[int, ModelParams], None],
) -> tuple[ModelParams, list[dict], Banks]:
    """The adaptation loop itself. It sees target inputs only."""
    n = len(x)
    model = model.with_tensors(model.tensors(), velocity=[np.zeros_like(t) for t in model.tensors()])
    banks = init_banks(model, x, config.k, config.bank_fraction, seed=config.seed)
    max_iter = config.max_iter_override or steps_per_epoch(n, config.batch_size) * max(config.adapt_epochs, 1)
    schedule = DecaySchedule(config.beta, max_iter)
    rng = np.random.default_rng([config.seed, 2])
    extractor_lr = config.lr * config.lr_feature_scale
    records: list[dict] = []
    step = 0
    on_epoch(0, model)
    for epoch in range(1, config.adapt_epochs + 1):
        for batch in _batches(rng, n, config.batch_size):
            feats, _, probs, cache = model_forward(model, x[batch], return_cache=True)
            update_banks(banks, batch, l2_normalize_rows(feats), probs)
            if config.use_wsim:
                mask = build_similarity_mask(batch, banks)
            else:
                mask = 1 - np.eye(len(batch), dtype=np.int8)
            alpha = decay_factor(step, schedule)
            out = cac_loss(probs, batch, banks, mask, alpha, config.loss_mode)
            if not math.isfinite(out.total):
                raise NumericError(f"adaptation loss is non-finite at step {step}")
            grads = model_backward(model, cache, softmax_backward(probs, out.grad))
            model = sgd_momentum_step(model, grads, config.lr, config.momentum, extractor_lr)
            records.append(out.record(step))
            step += 1
        on_epoch(epoch, model)
    return model, records, banks


def adapt_target(model: ModelParams, target: LabeledDataset, config: TrainConfig) -> AdaptResult:
    """Adapt ``model`` to the target domain without labels or source data.

    Target labels stay on this side of the call: the loop receives only
    ``target.X`` and a callback that evaluates after every epoch.
    """
    config.validate()
    curve: list[tuple[int, float]] = []

    def on_epoch(epoch: int, current: ModelParams) -> None:
        curve.append((epoch, evaluate(current, target).avg))

    adapted, records, banks = _adapt(model, target.X, config, on_epoch)
    report = evaluate(adapted, target)
    report.epoch_curve = curve
    return AdaptResult(adapted, report, records, banks)


@dataclass
class RunResult:
    seed: int
    source_only: MetricsReport
    adapted: AdaptResult

    @property
    def gain(self) -> float:
        return self.adapted.report.avg - self.source_only.avg


_pretrain_cache: dict[str, tuple[ModelParams, LabeledDataset]] = {}


def _pretrained(config: TrainConfig) -> tuple[ModelParams, LabeledDataset]:
    """Data plus source model for ``config``; memoised on the fields that
    affect pretraining so ablation variants share one source model."""
    key_fields = {
        k: v
        for k, v in config.to_dict().items()
        if k in ("hidden_width", "feature_dim", "num_classes", "lr", "momentum", "batch_size",
                 "pretrain_epochs", "seed", "shift")
    }
    key = json.dumps(key_fields, sort_keys=True)
    if key not in _pretrain_cache:
        source, target = generate_two_domain_blobs(config.shift)
        _pretrain_cache[key] = (pretrain_source(config, source), target)
    model, target = _pretrain_cache[key]
    return model.copy(), target


def run_experiment(config: TrainConfig) -> RunResult:
    """Generate data, pretrain on source, adapt on target for one seed."""
    config.validate()
    model, target = _pretrained(config)
    return RunResult(config.seed, evaluate(model, target), adapt_target(model, target, config))


ABLATION_VARIANTS = (
    ("neg", "neg_only", False),
    ("pos", "pos_only", False),
    ("pos+neg", "full", False),
    ("pos+neg+wsim", "full", True),
)


def run_ablation(config: TrainConfig) -> list[dict]:
    """Component ablation: one row per variant, final avg accuracy over seeds."""
    config.validate()
    rows = []
    for name, mode, wsim in ABLATION_VARIANTS:
        variant = replace(config, loss_mode=mode, use_wsim=wsim)
        finals = [run_experiment(variant.with_seed(s)).adapted.report.avg for s in config.seeds()]
        rows.append({"variant": name, "mean": float(np.mean(finals)), "std": float(np.std(finals)),
                     "runs": finals})
    return rows


SWEEPABLE = ("K", "beta")


def sweep_param(config: TrainConfig, param: str, grid) -> list[dict]:
    """One row per grid value: mean/std of final avg accuracy over seeds and
    the seed-averaged epoch curve."""
    if param not in SWEEPABLE:
        raise ConfigError(f"param must be one of {SWEEPABLE}")
    grid = list(grid)
    if not grid:
        raise ConfigError("grid must not be empty")
    variants = []
    for value in grid:
        cfg = replace(config, k=int(value)) if param == "K" else replace(config, beta=float(value))
        if param == "K" and int(value) != value:
            raise ConfigError(f"K must be an integer, got {value}")
        cfg.validate()
        variants.append((value, cfg))

    rows = []
    for value, cfg in variants:
        runs = [run_experiment(cfg.with_seed(s)) for s in cfg.seeds()]
        finals = [r.adapted.report.avg for r in runs]
        curves = np.array([[a for _, a in r.adapted.report.epoch_curve] for r in runs])
        rows.append({"param": param, "value": value, "mean": float(np.mean(finals)),
                     "std": float(np.std(finals)), "curve": curves.mean(axis=0).tolist()})
    return rows


def dump_embeddings(model: ModelParams, dataset: LabeledDataset, path) -> None:
    """CSV of raw extractor features with the true label and the prediction."""
    feats, _, probs = model_forward(model, dataset.X)
    pred = probs.argmax(axis=1)
    d = feats.shape[1]
    with Path(path).open("w") as fh:
        fh.write(",".join([f"f{j}" for j in range(d)] + ["label", "pred"]) + "\n")
        for row, label, p in zip(feats.tolist(), dataset.y.tolist(), pred.tolist()):
            fh.write(",".join([repr(v) for v in row] + [str(label), str(p)]) + "\n")


def metrics_document(config: TrainConfig, result: AdaptResult, wall_clock: float) -> dict:
    return {
        "report": result.report.to_dict(),
        "steps": result.steps,
        "meta": {
            "config_hash": config.digest(),
            "seed": config.seed,
            "wall_clock": wall_clock,
            "skipped_bank_updates": result.banks.skipped,
        },
    }


def timed(fn, *args):
    t0 = time.perf_counter()
    out = fn(*args)
    return out, time.perf_counter() - t0
