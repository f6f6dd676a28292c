"""Metrics, the train × test scenario matrix and size/efficiency tables."""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from decimal import ROUND_DOWN, Decimal
from typing import Callable, Mapping, Optional, Sequence, Union

import jsonschema
import numpy as np

from . import __version__, attacks
from .attacks import AttackConfig
from .data import Dataset
from .errors import ConfigError, DataError, FormatError, UndefinedMetricError
from .nn import Model, build_paper_cnn, count_params, ensemble_flops, ensemble_params, estimate_flops
from .train import AdversarialSpec, TrainConfig, adversarial_train, train

SCHEMA_VERSION = "1.0"
TRAIN_MODES = ("regular", "adversarial")
TEST_MODES = ("clean", "attacked")

CONVENTIONS = {
    "macro_f1_zero_division": "a class whose precision or recall is 0/0 contributes F1 = 0",
    "argmax_ties": "lowest class index",
    "flops": "multiply-accumulate = 2 FLOPs; ReLU and max-pool count one per input element",
    "optimizer": "Adam(beta1=0.9, beta2=0.999, eps=1e-8), lr linear decay to 0",
    "pixel_domain": "[0, 1], u8 / 255",
}


# ---------------------------------------------------------------- metrics


@dataclass
class ConfusionMatrix:
    """K×K counts; rows are true classes, columns predictions."""

    counts: np.ndarray
    class_names: Optional[list] = None

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ConfigError(f"confusion matrix must be square, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ConfigError("confusion matrix counts must be non-negative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def class_count(self) -> int:
        return self.counts.shape[0]

    def tolist(self) -> list:
        return self.counts.tolist()


def confusion_from_predictions(y_true, y_pred, class_count: int) -> ConfusionMatrix:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    counts = np.zeros((class_count, class_count), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)
    return ConfusionMatrix(counts)


def confusion(model: Model, dataset: Dataset, split: str = "test", inputs: Optional[np.ndarray] = None) -> ConfusionMatrix:
    """Tally argmax predictions on ``split`` (or on ``inputs`` standing in for it)."""
    x, y = dataset.arrays(split)
    if len(y) == 0:
        raise DataError(f"split {split!r} is empty")
    if inputs is not None:
        if inputs.shape != x.shape:
            raise ConfigError(f"inputs {inputs.shape} do not match split {split!r} {x.shape}")
        x = inputs
    model.eval()
    cm = confusion_from_predictions(y, model.predict(x), dataset.class_count)
    cm.class_names = list(dataset.class_names)
    return cm


def _matrix(cm) -> np.ndarray:
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm, dtype=np.int64)
    if counts.sum() == 0:
        raise UndefinedMetricError("metric undefined on an empty confusion matrix")
    return counts


def accuracy(cm) -> float:
    counts = _matrix(cm)
    return float(np.trace(counts) / counts.sum())


def per_class_f1(cm) -> np.ndarray:
    counts = _matrix(cm).astype(np.float64)
    tp = np.diag(counts)
    pred = counts.sum(axis=0)
    true = counts.sum(axis=1)
    precision = np.divide(tp, pred, out=np.zeros_like(tp), where=pred > 0)
    recall = np.divide(tp, true, out=np.zeros_like(tp), where=true > 0)
    denom = precision + recall
    return np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)


def macro_f1(cm) -> float:
    """Unweighted class mean of F1; 0/0 precision or recall scores that class 0."""
    return float(per_class_f1(cm).mean())


# ---------------------------------------------------------------- provenance


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default)


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Decimal):
        return str(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def provenance(config, seed: int) -> dict:
    return {"tool": "advleaf", "version": __version__, "config_hash": config_hash(config), "seed": int(seed)}


# ---------------------------------------------------------------- scenario matrix

_CELL_SCHEMA = {
    "type": "object",
    "required": ["train", "test", "accuracy", "macro_f1", "confusion", "attack", "attack_config"],
    "additionalProperties": False,
    "properties": {
        "train": {"enum": list(TRAIN_MODES)},
        "test": {"enum": list(TEST_MODES)},
        "accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "macro_f1": {"type": "number", "minimum": 0, "maximum": 1},
        "confusion": {"type": "array", "items": {"type": "array", "items": {"type": "integer", "minimum": 0}}},
        "attack": {"type": ["string", "null"]},
        "attack_config": {"type": ["object", "null"]},
    },
}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "provenance", "config", "conventions", "class_names", "models", "cells"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "provenance": {
            "type": "object",
            "required": ["tool", "version", "config_hash", "seed"],
            "properties": {
                "tool": {"type": "string"},
                "version": {"type": "string"},
                "config_hash": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
                "seed": {"type": "integer"},
            },
        },
        "config": {"type": "object"},
        "conventions": {"type": "object"},
        "class_names": {"type": "array", "items": {"type": "string"}},
        "models": {
            "type": "object",
            "required": list(TRAIN_MODES),
            "additionalProperties": {
                "type": "object",
                "required": ["params", "flops"],
                "properties": {"params": {"type": "integer"}, "flops": {"type": "integer"}},
            },
        },
        "cells": {"type": "array", "minItems": 4, "maxItems": 4, "items": _CELL_SCHEMA},
    },
}


@dataclass
class ScenarioCell:
    train: str
    test: str
    accuracy: float
    macro_f1: float
    confusion: list
    attack: Optional[str] = None
    attack_config: Optional[dict] = None


@dataclass
class ScenarioReport:
    """Accuracy and macro-F1 for {regular, adversarial} training × {clean, attacked} test."""

    cells: list[ScenarioCell]
    config: dict
    seed: int
    class_names: list[str]
    models: dict = field(default_factory=dict)
    trained: dict = field(default_factory=dict, repr=False, compare=False)

    def cell(self, train: str, test: str) -> ScenarioCell:
        for c in self.cells:
            if c.train == train and c.test == test:
                return c
        raise KeyError((train, test))

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "provenance": provenance(self.config, self.seed),
            "config": self.config,
            "conventions": CONVENTIONS,
            "class_names": list(self.class_names),
            "models": self.models,
            "cells": [vars(c).copy() for c in self.cells],
        }

    def to_json(self) -> str:
        doc = json.loads(json.dumps(self.to_dict(), default=_json_default))
        validate_report(doc)
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ScenarioReport":
        doc = json.loads(text)
        validate_report(doc)
        cells = [ScenarioCell(**c) for c in doc["cells"]]
        return cls(cells, doc["config"], doc["provenance"]["seed"], doc["class_names"], doc["models"])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["train", "test", "attack", "accuracy", "macro_f1", "config_hash", "seed"])
        for c in self.cells:
            w.writerow([c.train, c.test, c.attack or "", f"{c.accuracy:.6f}", f"{c.macro_f1:.6f}",
                        self.config_hash, self.seed])
        return buf.getvalue()


def validate_report(doc: dict) -> None:
    try:
        jsonschema.validate(doc, REPORT_SCHEMA)
    except jsonschema.ValidationError as e:
        raise FormatError(f"scenario report does not match schema {SCHEMA_VERSION}: {e.message}") from None


def _cell(model, dataset, split, train_mode, test_mode, x_test=None, attack=None, attack_cfg=None) -> ScenarioCell:
    cm = confusion(model, dataset, split, inputs=x_test)
    return ScenarioCell(train_mode, test_mode, accuracy(cm), macro_f1(cm), cm.tolist(), attack,
                        None if attack_cfg is None else attack_cfg.to_dict())


def four_scenario_eval(base_cfg: TrainConfig, attack_cfg: AttackConfig, dataset: Dataset, attack: str = "bim",
                       build_model: Optional[Callable[[int], Model]] = None, split: str = "test",
                       mix_mode: Optional[str] = None) -> ScenarioReport:
    """Train a regular and an adversarially trained model, test both clean and attacked.

    ``attack`` both generates the adversarial training data and the attacked
    test set.  ``build_model(seed)`` defaults to the four-block CNN.
    """
    attacks.check_name(attack)
    for needed in ("train", split):
        if len(dataset.split_indices(needed)) == 0:
            raise DataError(f"split {needed!r} is empty")
    if build_model is None:
        def build_model(seed):
            return build_paper_cnn(dataset.class_count, dataset.image_shape, seed=seed)
    if mix_mode is None:
        mix_mode = base_cfg.adversarial.mix_mode if base_cfg.adversarial else "augment"
    spec = AdversarialSpec(attack, attack_cfg, mix_mode)
    regular_cfg = base_cfg.replace(adversarial=None)
    adv_cfg = base_cfg.replace(adversarial=spec)

    regular, _ = train(build_model(base_cfg.seed), dataset, regular_cfg)
    robust, _ = adversarial_train(build_model(base_cfg.seed), dataset, adv_cfg)

    x, y = dataset.arrays(split)
    rows = dataset.split_indices(split)
    cells = []
    for mode, model in (("regular", regular), ("adversarial", robust)):
        cells.append(_cell(model, dataset, split, mode, "clean"))
        x_adv = attacks.run_attack(attack, model, x, y, attack_cfg, indices=rows).x_adv
        cells.append(_cell(model, dataset, split, mode, "attacked", x_adv, attack, attack_cfg))
    config = {
        "train": regular_cfg.to_dict(),
        "adversarial_training": {"attack": attack, "mix_mode": mix_mode, "config": attack_cfg.to_dict()},
        "test_attack": {"attack": attack, "config": attack_cfg.to_dict()},
        "split": dataset.metadata.get("split", {}),
        "eval_split": split,
        "architecture": regular.name,
    }
    models = {m: {"params": count_params(net), "flops": estimate_flops(net)}
              for m, net in (("regular", regular), ("adversarial", robust))}
    report = ScenarioReport(cells, config, base_cfg.seed, list(dataset.class_names), models)
    report.trained = {"regular": regular, "adversarial": robust}
    return report


# ---------------------------------------------------------------- size / efficiency

Number = Union[int, float, str, Decimal]


def percent(part: Number, whole: Number) -> Decimal:
    """100·part/whole truncated (not rounded) to two decimals."""
    whole = Decimal(str(whole))
    if whole == 0:
        raise UndefinedMetricError("percentage of a zero reference")
    return (Decimal(str(part)) * 100 / whole).quantize(Decimal("0.01"), rounding=ROUND_DOWN)


@dataclass
class SizeRow:
    name: str
    params: Number
    flops: Number
    params_pct: Decimal
    flops_pct: Decimal


@dataclass
class SizeReport:
    reference: str
    rows: list[SizeRow]

    def row(self, name: str) -> SizeRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"reference": self.reference,
                "convention": "percent = reference / model, truncated to 2 decimals; " + CONVENTIONS["flops"],
                "rows": [{"name": r.name, "params": r.params, "flops": r.flops,
                          "params_pct": str(r.params_pct), "flops_pct": str(r.flops_pct)} for r in self.rows]}

    def format_table(self, params_scale: float = 1e6, flops_scale: float = 1e9) -> str:
        """Plain-text table: size columns in millions / 1e9 by default."""
        lines = [f"{'Model':<16}{'#Params':>10}{'% Params':>10}{'FLOPs':>10}{'% FLOPs':>10}"]
        for r in self.rows:
            ref = r.name == self.reference
            p = float(r.params) / params_scale
            f = float(r.flops) / flops_scale
            lines.append(f"{r.name:<16}{p:>10.2f}{'-' if ref else str(r.params_pct):>10}"
                         f"{f:>10.2f}{'-' if ref else str(r.flops_pct):>10}")
        return "\n".join(lines)


def ensemble_entry(members: Sequence[tuple]) -> tuple:
    """(params, flops) of an ensemble: params add up, FLOPs are the member maximum."""
    return ensemble_params(m[0] for m in members), ensemble_flops(m[1] for m in members)


def size_efficiency_report(models: Mapping[str, Union[Model, tuple]], input_shape=None,
                           reference: Optional[str] = None) -> SizeReport:
    """Params and FLOPs per entry, each expressed against ``reference``.

    Entries are built models or ``(params, flops)`` pairs (e.g. published
    values).  The percentage reads "reference as a share of this model", so
    a small reference against a large teacher gives the student's share of
    the teacher.
    """
    if not models:
        raise ConfigError("size report needs at least one model")
    sizes = {}
    for name, m in models.items():
        if isinstance(m, Model):
            sizes[name] = (count_params(m), estimate_flops(m, input_shape))
        else:
            sizes[name] = tuple(m)
    reference = reference or next(iter(models))
    if reference not in sizes:
        raise ConfigError(f"reference {reference!r} not among {sorted(sizes)}")
    ref_p, ref_f = sizes[reference]
    rows = [SizeRow(name, p, f, percent(ref_p, p), percent(ref_f, f)) for name, (p, f) in sizes.items()]
    return SizeReport(reference, rows)
